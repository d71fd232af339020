//! Forward kernels over plain [`Tensor`]s.
//!
//! Every kernel validates shapes, reports its multiply-adds to the thread's
//! [`OpCounter`](crate::counter::OpCounter) and rejects non-finite output.
//! The differentiable versions in [`autograd`](crate::autograd) call into
//! these and add the matching gradient kernels defined at the bottom.

use crate::counter;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
    }
    counter::record((m * n * k) as u64);
    let mut out = vec![0.0; m * n];
    gemm(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new([m, n], out)?.check_finite("matmul")
}

/// `out += a[m×k] · b[k×n]` with i-k-j ordering.
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += a[k×m]ᵀ · b[k×n]`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2("transpose")?;
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::new([n, m], out)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape(), data)?.check_finite("add")
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape(), data)?.check_finite("mul")
}

pub fn scale(a: &Tensor, s: f64) -> Result<Tensor> {
    a.map(|v| v * s).check_finite("scale")
}

/// Adds `bias[c]` to every row of the last axis.
pub fn add_bias(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = last_dim(a);
    if bias.shape() != [c] {
        return Err(Error::shape(
            "add_bias",
            format!("{:?} + {:?}", a.shape(), bias.shape()),
        ));
    }
    let mut out = a.clone();
    for row in out.data_mut().chunks_mut(c) {
        for (o, b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    out.check_finite("add_bias")
}

pub fn relu(a: &Tensor) -> Tensor {
    a.map(|v| v.max(0.0))
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    a.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// `x·W + b` over the last axis of a `[n, in]` matrix.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let y = matmul(x, w)?;
    match b {
        Some(b) => add_bias(&y, b),
        None => Ok(y),
    }
}

fn last_dim(a: &Tensor) -> usize {
    a.shape().last().copied().unwrap_or(1)
}

/// Softmax along `axis`, computed with max-subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::shape(
            "softmax",
            format!("axis {axis} for shape {:?}", x.shape()),
        ));
    }
    let n = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let src = x.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let max = (0..n).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..n {
                let e = (src[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..n {
                out[at(k)] /= total;
            }
        }
    }
    Tensor::new(x.shape(), out)?.check_finite("softmax")
}

/// Layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(layer_norm_parts(x, gamma, beta, eps)?.0)
}

/// Returns the normalized output, the pre-affine `x̂` and per-row `1/σ`.
pub(crate) fn layer_norm_parts(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let c = last_dim(x);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "x {:?}, gamma {:?}, beta {:?}",
                x.shape(),
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let rows = x.len() / c.max(1);
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    let mut out = vec![0.0; x.len()];
    for (r, row) in x.data().chunks(c).enumerate() {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        rstd[r] = inv;
        for k in 0..c {
            let h = (row[k] - mean) * inv;
            xhat[r * c + k] = h;
            out[r * c + k] = h * gamma.data()[k] + beta.data()[k];
        }
    }
    Ok((
        Tensor::new(x.shape(), out)?.check_finite("layer_norm")?,
        xhat,
        rstd,
    ))
}

fn pool_extent(n: usize, r: usize) -> usize {
    n.div_ceil(r)
}

/// Mean over `r×r` windows with stride `r`. Ragged edge windows average only
/// their valid cells.
pub fn avg_pool2d(x: &Tensor, r: usize) -> Result<Tensor> {
    let (h, w, c) = x.dims3("avg_pool2d")?;
    if r == 0 {
        return Err(Error::InvalidArgument("pooling ratio must be >= 1".into()));
    }
    counter::record((h * w * c) as u64);
    let (oh, ow) = (pool_extent(h, r), pool_extent(w, r));
    let src = x.data();
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let (y1, x1) = ((oy * r + r).min(h), (ox * r + r).min(w));
            let cells = ((y1 - oy * r) * (x1 - ox * r)) as f64;
            let dst = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for y in oy * r..y1 {
                for xx in ox * r..x1 {
                    for (d, s) in dst
                        .iter_mut()
                        .zip(&src[(y * w + xx) * c..(y * w + xx + 1) * c])
                    {
                        *d += s;
                    }
                }
            }
            dst.iter_mut().for_each(|d| *d /= cells);
        }
    }
    Tensor::new([oh, ow, c], out)?.check_finite("avg_pool2d")
}

/// Max over `r×r` windows (ceil mode). Also returns the flat source index of each maximum.
pub(crate) fn max_pool2d_indexed(x: &Tensor, r: usize) -> Result<(Tensor, Vec<usize>)> {
    let (h, w, c) = x.dims3("max_pool2d")?;
    if r == 0 {
        return Err(Error::InvalidArgument("pooling ratio must be >= 1".into()));
    }
    counter::record((h * w * c) as u64);
    let (oh, ow) = (pool_extent(h, r), pool_extent(w, r));
    let src = x.data();
    let mut out = vec![f64::NEG_INFINITY; oh * ow * c];
    let mut arg = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * c;
            for y in oy * r..(oy * r + r).min(h) {
                for xx in ox * r..(ox * r + r).min(w) {
                    for k in 0..c {
                        let si = (y * w + xx) * c + k;
                        if src[si] > out[base + k] {
                            out[base + k] = src[si];
                            arg[base + k] = si;
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new([oh, ow, c], out)?.check_finite("max_pool2d")?,
        arg,
    ))
}

pub fn max_pool2d(x: &Tensor, r: usize) -> Result<Tensor> {
    Ok(max_pool2d_indexed(x, r)?.0)
}

/// How a convolution reads outside the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Clamp to the nearest edge cell.
    Replicate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub mode: PadMode,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvSpec {
            stride,
            padding,
            mode: PadMode::Zero,
        }
    }

    pub fn replicate(stride: usize, padding: usize) -> Self {
        ConvSpec {
            stride,
            padding,
            mode: PadMode::Replicate,
        }
    }

    pub fn out_extent(&self, n: usize, k: usize) -> Option<usize> {
        (n + 2 * self.padding)
            .checked_sub(k)
            .map(|span| span / self.stride + 1)
    }

    fn source(&self, o: usize, k: usize, n: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        match self.mode {
            PadMode::Zero => (pos >= 0 && (pos as usize) < n).then_some(pos as usize),
            PadMode::Replicate => Some(pos.clamp(0, n as isize - 1) as usize),
        }
    }
}

struct ConvDims {
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(x: &Tensor, weights: &Tensor, spec: &ConvSpec) -> Result<ConvDims> {
    let (h, w, ci) = x.dims3("conv2d")?;
    let [kh, kw, wci, co] = weights.shape()[..] else {
        return Err(Error::shape(
            "conv2d",
            format!("weights must be [kh,kw,in,out], got {:?}", weights.shape()),
        ));
    };
    if wci != ci {
        return Err(Error::shape(
            "conv2d",
            format!("input has {ci} channels, weights expect {wci}"),
        ));
    }
    if spec.stride == 0 {
        return Err(Error::InvalidArgument("conv stride must be >= 1".into()));
    }
    let (Some(oh), Some(ow)) = (spec.out_extent(h, kh), spec.out_extent(w, kw)) else {
        return Err(Error::shape(
            "conv2d",
            format!(
                "{kh}x{kw} kernel does not fit {h}x{w} input with padding {}",
                spec.padding
            ),
        ));
    };
    Ok(ConvDims {
        h,
        w,
        ci,
        kh,
        kw,
        co,
        oh,
        ow,
    })
}

/// 2-D cross-correlation (no kernel flip) of a `[h,w,in]` map with `[kh,kw,in,out]` weights.
pub fn conv2d(
    x: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    spec: ConvSpec,
) -> Result<Tensor> {
    let d = conv_dims(x, weights, &spec)?;
    if let Some(b) = bias {
        if b.shape() != [d.co] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {} filters", b.shape(), d.co),
            ));
        }
    }
    counter::record((d.oh * d.ow * d.co * d.kh * d.kw * d.ci) as u64);
    let (src, wt) = (x.data(), weights.data());
    let mut out = vec![0.0; d.oh * d.ow * d.co];
    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let dst = &mut out[(oy * d.ow + ox) * d.co..(oy * d.ow + ox + 1) * d.co];
            if let Some(b) = bias {
                dst.copy_from_slice(b.data());
            }
            for ky in 0..d.kh {
                let Some(iy) = spec.source(oy, ky, d.h) else {
                    continue;
                };
                for kx in 0..d.kw {
                    let Some(ix) = spec.source(ox, kx, d.w) else {
                        continue;
                    };
                    let xin = &src[(iy * d.w + ix) * d.ci..(iy * d.w + ix + 1) * d.ci];
                    let wbase = (ky * d.kw + kx) * d.ci * d.co;
                    for (c, &xv) in xin.iter().enumerate() {
                        let wrow = &wt[wbase + c * d.co..wbase + (c + 1) * d.co];
                        for (o, &wv) in dst.iter_mut().zip(wrow) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new([d.oh, d.ow, d.co], out)?.check_finite("conv2d")
}

/// Per-channel valid cross-correlation of `template[h,w,C]` over `search[H,W,C]`.
pub fn depthwise_xcorr(search: &Tensor, template: &Tensor) -> Result<Tensor> {
    let (sh, sw, c) = search.dims3("depthwise_xcorr")?;
    let (th, tw, tc) = template.dims3("depthwise_xcorr")?;
    if c != tc || th > sh || tw > sw {
        return Err(Error::shape(
            "depthwise_xcorr",
            format!(
                "search {:?} vs template {:?}",
                search.shape(),
                template.shape()
            ),
        ));
    }
    let (oh, ow) = (sh - th + 1, sw - tw + 1);
    counter::record((oh * ow * c * th * tw) as u64);
    let (s, t) = (search.data(), template.data());
    let mut out = vec![0.0; oh * ow * c];
    for i in 0..oh {
        for j in 0..ow {
            let dst = &mut out[(i * ow + j) * c..(i * ow + j + 1) * c];
            for u in 0..th {
                for v in 0..tw {
                    let srow = &s[((i + u) * sw + j + v) * c..((i + u) * sw + j + v + 1) * c];
                    let trow = &t[(u * tw + v) * c..(u * tw + v + 1) * c];
                    for ((d, a), b) in dst.iter_mut().zip(srow).zip(trow) {
                        *d += a * b;
                    }
                }
            }
        }
    }
    Tensor::new([oh, ow, c], out)?.check_finite("depthwise_xcorr")
}

/// Concatenates along the last axis; all leading extents must agree.
pub fn concat_last(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let lead = &first.shape()[..first.rank().saturating_sub(1)];
    let rows: usize = lead.iter().product();
    let mut width = 0;
    for p in parts {
        if p.rank() != first.rank() || &p.shape()[..p.rank() - 1] != lead {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?}", first.shape(), p.shape()),
            ));
        }
        width += last_dim(p);
    }
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for p in parts {
            let c = last_dim(p);
            out.extend_from_slice(&p.data()[r * c..(r + 1) * c]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(width);
    Tensor::new(shape, out)
}

/// Columns `[start, start+len)` of a 2-D tensor.
pub fn slice_cols(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (m, n) = a.dims2("slice_cols")?;
    if start + len > n {
        return Err(Error::shape(
            "slice_cols",
            format!("[{start}, {}) of {n} columns", start + len),
        ));
    }
    let mut out = Vec::with_capacity(m * len);
    for row in a.data().chunks(n) {
        out.extend_from_slice(&row[start..start + len]);
    }
    Tensor::new([m, len], out)
}

/// Nearest-neighbour resize of a `[h,w,c]` map.
pub fn resize_nearest(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (h, w, c) = x.dims3("resize_nearest")?;
    let mut out = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        let sy = y * h / oh;
        for xx in 0..ow {
            let sx = xx * w / ow;
            out.extend_from_slice(&x.data()[(sy * w + sx) * c..(sy * w + sx + 1) * c]);
        }
    }
    Tensor::new([oh, ow, c], out)
}

// ---- gradient kernels (never counted) ----

pub(crate) fn conv2d_backward(
    x: &Tensor,
    weights: &Tensor,
    spec: ConvSpec,
    grad: &Tensor,
    want_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let d = conv_dims(x, weights, &spec).expect("shapes validated on forward");
    let (src, wt, g) = (x.data(), weights.data(), grad.data());
    let mut gx = want_input.then(|| vec![0.0; x.len()]);
    let mut gw = vec![0.0; weights.len()];
    let mut gb = vec![0.0; d.co];
    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let go = &g[(oy * d.ow + ox) * d.co..(oy * d.ow + ox + 1) * d.co];
            for (b, v) in gb.iter_mut().zip(go) {
                *b += v;
            }
            for ky in 0..d.kh {
                let Some(iy) = spec.source(oy, ky, d.h) else {
                    continue;
                };
                for kx in 0..d.kw {
                    let Some(ix) = spec.source(ox, kx, d.w) else {
                        continue;
                    };
                    let ibase = (iy * d.w + ix) * d.ci;
                    let wbase = (ky * d.kw + kx) * d.ci * d.co;
                    for c in 0..d.ci {
                        let xv = src[ibase + c];
                        let wrow = &wt[wbase + c * d.co..wbase + (c + 1) * d.co];
                        let gwrow = &mut gw[wbase + c * d.co..wbase + (c + 1) * d.co];
                        let mut acc = 0.0;
                        for o in 0..d.co {
                            gwrow[o] += xv * go[o];
                            acc += wrow[o] * go[o];
                        }
                        if let Some(gx) = gx.as_mut() {
                            gx[ibase + c] += acc;
                        }
                    }
                }
            }
        }
    }
    (
        gx.map(|v| Tensor::new(x.shape(), v).expect("shape")),
        Tensor::new(weights.shape(), gw).expect("shape"),
        Tensor::new([d.co], gb).expect("shape"),
    )
}

pub(crate) fn xcorr_backward(
    search: &Tensor,
    template: &Tensor,
    grad: &Tensor,
) -> (Tensor, Tensor) {
    let (_, sw, c) = search.dims3("xcorr").expect("validated");
    let (th, tw, _) = template.dims3("xcorr").expect("validated");
    let (oh, ow, _) = grad.dims3("xcorr").expect("validated");
    let (s, t, g) = (search.data(), template.data(), grad.data());
    let mut gs = vec![0.0; search.len()];
    let mut gt = vec![0.0; template.len()];
    for i in 0..oh {
        for j in 0..ow {
            let go = &g[(i * ow + j) * c..(i * ow + j + 1) * c];
            for u in 0..th {
                for v in 0..tw {
                    let sb = ((i + u) * sw + j + v) * c;
                    let tb = (u * tw + v) * c;
                    for k in 0..c {
                        gs[sb + k] += go[k] * t[tb + k];
                        gt[tb + k] += go[k] * s[sb + k];
                    }
                }
            }
        }
    }
    (
        Tensor::new(search.shape(), gs).expect("shape"),
        Tensor::new(template.shape(), gt).expect("shape"),
    )
}

pub(crate) fn avg_pool2d_backward(input_shape: &[usize], r: usize, grad: &Tensor) -> Tensor {
    let [h, w, c] = input_shape[..] else {
        unreachable!("validated on forward")
    };
    let (oh, ow) = (pool_extent(h, r), pool_extent(w, r));
    let g = grad.data();
    let mut out = vec![0.0; h * w * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let (y1, x1) = ((oy * r + r).min(h), (ox * r + r).min(w));
            let cells = ((y1 - oy * r) * (x1 - ox * r)) as f64;
            let go = &g[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for y in oy * r..y1 {
                for xx in ox * r..x1 {
                    for (d, v) in out[(y * w + xx) * c..(y * w + xx + 1) * c]
                        .iter_mut()
                        .zip(go)
                    {
                        *d += v / cells;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape, out).expect("shape")
}

pub(crate) fn resize_nearest_backward(input_shape: &[usize], grad: &Tensor) -> Tensor {
    let [h, w, c] = input_shape[..] else {
        unreachable!("validated on forward")
    };
    let (oh, ow, _) = grad.dims3("resize_nearest").expect("validated");
    let mut out = vec![0.0; h * w * c];
    for y in 0..oh {
        let sy = y * h / oh;
        for xx in 0..ow {
            let sx = xx * w / ow;
            let go = &grad.data()[(y * ow + xx) * c..(y * ow + xx + 1) * c];
            for (d, v) in out[(sy * w + sx) * c..(sy * w + sx + 1) * c]
                .iter_mut()
                .zip(go)
            {
                *d += v;
            }
        }
    }
    Tensor::new(input_shape, out).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counter::OpCounter;
    use crate::selftest::oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small_cases() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
        let r = matmul(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(r.data(), &[11.0]);
        assert!(matmul(&a, &t(&[3, 1], &[0.0; 3])).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::uniform([4, 5], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform([5, 3], -1.0, 1.0, &mut rng);
        let (got, count) = OpCounter::measure(|| matmul(&a, &b).unwrap());
        assert!(got.max_abs_diff(&oracle::matmul(&a, &b)) < 1e-12);
        assert_eq!(count.total(), 4 * 5 * 3);
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&t(&[2], &[0.0, 0.0]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&t(&[2], &[1000.0, 1000.0]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&t(&[2], &[0.0, 3f64.ln()]), 0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15 && (s.data()[1] - 0.75).abs() < 1e-15);
        assert!(softmax(&t(&[2], &[0.0, 0.0]), 1).is_err());
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]);
        let s = softmax(&x, 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_cases() {
        let g = Tensor::ones([3]);
        let b = Tensor::zeros([3]);
        let y = layer_norm(&t(&[1, 3], &[2.0, 2.0, 2.0]), &g, &b, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
        let y = layer_norm(
            &t(&[2], &[1.0, 3.0]),
            &Tensor::ones([2]),
            &Tensor::zeros([2]),
            1e-300,
        )
        .unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12 && (y.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform([6, 17], -4.0, 9.0, &mut rng);
        let y = layer_norm(&x, &Tensor::ones([17]), &Tensor::zeros([17]), 1e-12).unwrap();
        for row in y.data().chunks(17) {
            let mean = row.iter().sum::<f64>() / 17.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 17.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn avg_pool_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform([3, 4, 2], 0.0, 1.0, &mut rng);
        assert_eq!(avg_pool2d(&x, 1).unwrap(), x);
        let y = avg_pool2d(&t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]), 2).unwrap();
        assert_eq!(y.data(), &[2.5]);
        let x = Tensor::uniform([5, 5, 2], -1.0, 1.0, &mut rng);
        let y = avg_pool2d(&x, 2).unwrap();
        assert_eq!(y.shape(), &[3, 3, 2]);
        assert!(y.max_abs_diff(&oracle::avg_pool2d(&x, 2)) < 1e-12);
        // corner cell covers exactly one input cell
        assert_eq!(y.get(&[2, 2, 1]), x.get(&[4, 4, 1]));
        assert!(avg_pool2d(&x, 0).is_err());
    }

    #[test]
    fn pooling_extents_give_template_pyramid() {
        for (n, r, want) in [(10, 4, 3), (5, 2, 3), (3, 1, 3), (3, 4, 1), (32, 4, 8)] {
            let y = avg_pool2d(&Tensor::zeros([n, n, 1]), r).unwrap();
            assert_eq!(y.shape()[0], want, "n={n} r={r}");
        }
    }

    #[test]
    fn conv_trivial_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform([4, 5, 1], -1.0, 1.0, &mut rng);
        let two = Tensor::full([1, 1, 1, 1], 2.0);
        let y = conv2d(&x, &two, None, ConvSpec::new(1, 0)).unwrap();
        assert!(y.max_abs_diff(&x.map(|v| 2.0 * v)) < 1e-15);
        let mut delta = Tensor::zeros([3, 3, 1, 1]);
        delta.set(&[1, 1, 0, 0], 1.0);
        let y = conv2d(&x, &delta, None, ConvSpec::new(1, 1)).unwrap();
        assert_eq!(y, x);
        let y = conv2d(&x, &delta, None, ConvSpec::replicate(1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_six_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::uniform([8, 8, 3], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform([3, 3, 3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform([4], -1.0, 1.0, &mut rng);
        for spec in [
            ConvSpec::new(1, 1),
            ConvSpec::new(2, 1),
            ConvSpec::new(1, 0),
            ConvSpec::replicate(2, 1),
        ] {
            let (y, count) = OpCounter::measure(|| conv2d(&x, &w, Some(&b), spec).unwrap());
            let want = oracle::conv2d(&x, &w, Some(&b), spec);
            assert_eq!(y.shape(), want.shape());
            assert!(y.max_abs_diff(&want) < 1e-12);
            let (oh, ow, co) = y.dims3("t").unwrap();
            assert_eq!(count.total(), (oh * ow * co * 9 * 3) as u64);
        }
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let x = Tensor::zeros([2, 2, 1]);
        let w = Tensor::zeros([3, 3, 1, 1]);
        assert!(conv2d(&x, &w, None, ConvSpec::new(1, 0)).is_err());
        assert!(conv2d(&x, &Tensor::zeros([3, 3, 2, 1]), None, ConvSpec::new(1, 1)).is_err());
    }

    #[test]
    fn stride_two_conv_is_ceil_halving() {
        let w = Tensor::zeros([3, 3, 1, 1]);
        let spec = ConvSpec::new(2, 1);
        let mut n = 80;
        for want in [40, 20, 10, 5, 3] {
            let y = conv2d(&Tensor::zeros([n, n, 1]), &w, None, spec).unwrap();
            n = y.shape()[0];
            assert_eq!(n, want);
        }
    }

    #[test]
    fn xcorr_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Tensor::uniform([16, 16, 3], -1.0, 1.0, &mut rng);
        let z = depthwise_xcorr(&s, &Tensor::zeros([5, 5, 3])).unwrap();
        assert_eq!(z.shape(), &[12, 12, 3]);
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(depthwise_xcorr(&s, &Tensor::ones([1, 1, 3])).unwrap(), s);
        let tmpl = Tensor::uniform([5, 5, 3], -1.0, 1.0, &mut rng);
        let y = depthwise_xcorr(&s, &tmpl).unwrap();
        assert!(y.max_abs_diff(&oracle::depthwise_xcorr(&s, &tmpl)) < 1e-12);
        assert!(depthwise_xcorr(&s, &Tensor::zeros([5, 5, 2])).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let a = t(&[1, 1], &[f64::MAX]);
        let e = matmul(&a, &t(&[1, 1], &[10.0])).unwrap_err();
        assert!(e.is_numeric());
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::uniform([3, 2], 0.0, 1.0, &mut rng);
        let b = Tensor::uniform([3, 4], 0.0, 1.0, &mut rng);
        let c = concat_last(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 6]);
        assert_eq!(slice_cols(&c, 0, 2).unwrap(), a);
        assert_eq!(slice_cols(&c, 2, 4).unwrap(), b);
    }
}
