//! Deliberately naive reference implementations.
//!
//! Nothing here shares code with the optimized kernels: each oracle is a
//! direct nested-loop transcription of the definition.

use crate::attention::{AttentionOptions, PabParams, PoolKind};
use crate::ops::{ConvSpec, PadMode};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::tpn::TpnBlockParams;

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = Tensor::zeros([m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.get(&[i, p]) * b.get(&[p, j]);
            }
            out.set(&[i, j], s);
        }
    }
    out
}

/// Row-wise softmax of a 2-D matrix.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros([m, n]);
    for i in 0..m {
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            max = max.max(x.get(&[i, j]));
        }
        let mut z = 0.0;
        for j in 0..n {
            z += (x.get(&[i, j]) - max).exp();
        }
        for j in 0..n {
            out.set(&[i, j], (x.get(&[i, j]) - max).exp() / z);
        }
    }
    out
}

pub fn avg_pool2d(x: &Tensor, r: usize) -> Tensor {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h.div_ceil(r), w.div_ceil(r));
    let mut out = Tensor::zeros([oh, ow, c]);
    for oy in 0..oh {
        for ox in 0..ow {
            for k in 0..c {
                let (mut s, mut n) = (0.0, 0.0);
                for dy in 0..r {
                    for dx in 0..r {
                        let (y, xx) = (oy * r + dy, ox * r + dx);
                        if y < h && xx < w {
                            s += x.get(&[y, xx, k]);
                            n += 1.0;
                        }
                    }
                }
                out.set(&[oy, ox, k], s / n);
            }
        }
    }
    out
}

pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Tensor {
    let (h, wd, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, co) = (w.shape()[0], w.shape()[1], w.shape()[3]);
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    let oh = ((h as isize + 2 * p - kh as isize) / s + 1) as usize;
    let ow = ((wd as isize + 2 * p - kw as isize) / s + 1) as usize;
    let mut out = Tensor::zeros([oh, ow, co]);
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..co {
                let mut acc = bias.map_or(0.0, |b| b.get(&[o]));
                for ky in 0..kh {
                    for kx in 0..kw {
                        for c in 0..ci {
                            let mut iy = oy as isize * s + ky as isize - p;
                            let mut ix = ox as isize * s + kx as isize - p;
                            let inside = iy >= 0 && ix >= 0 && iy < h as isize && ix < wd as isize;
                            if !inside {
                                match spec.mode {
                                    PadMode::Zero => continue,
                                    PadMode::Replicate => {
                                        iy = iy.clamp(0, h as isize - 1);
                                        ix = ix.clamp(0, wd as isize - 1);
                                    }
                                }
                            }
                            acc += x.get(&[iy as usize, ix as usize, c]) * w.get(&[ky, kx, c, o]);
                        }
                    }
                }
                out.set(&[oy, ox, o], acc);
            }
        }
    }
    out
}

pub fn depthwise_xcorr(search: &Tensor, template: &Tensor) -> Tensor {
    let (sh, sw, c) = (search.shape()[0], search.shape()[1], search.shape()[2]);
    let (th, tw) = (template.shape()[0], template.shape()[1]);
    let mut out = Tensor::zeros([sh - th + 1, sw - tw + 1, c]);
    for i in 0..=sh - th {
        for j in 0..=sw - tw {
            for k in 0..c {
                let mut acc = 0.0;
                for u in 0..th {
                    for v in 0..tw {
                        acc += search.get(&[i + u, j + v, k]) * template.get(&[u, v, k]);
                    }
                }
                out.set(&[i, j, k], acc);
            }
        }
    }
    out
}

pub fn layer_norm_rows(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros([m, n]);
    for i in 0..m {
        let mean = (0..n).map(|j| x.get(&[i, j])).sum::<f64>() / n as f64;
        let var = (0..n).map(|j| (x.get(&[i, j]) - mean).powi(2)).sum::<f64>() / n as f64;
        for j in 0..n {
            let v = (x.get(&[i, j]) - mean) / (var + eps).sqrt();
            out.set(&[i, j], v * gamma.get(&[j]) + beta.get(&[j]));
        }
    }
    out
}

/// `softmax(Q·Kᵀ·scale)·V` with every sum written out.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Tensor {
    let (nq, d) = (q.shape()[0], q.shape()[1]);
    let nk = k.shape()[0];
    let dv = v.shape()[1];
    let mut out = Tensor::zeros([nq, dv]);
    for i in 0..nq {
        let mut scores = vec![0.0; nk];
        for (j, s) in scores.iter_mut().enumerate() {
            for p in 0..d {
                *s += q.get(&[i, p]) * k.get(&[j, p]);
            }
            *s *= scale;
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        for c in 0..dv {
            let mut acc = 0.0;
            for (j, s) in scores.iter().enumerate() {
                acc += (s - max).exp() / z * v.get(&[j, c]);
            }
            out.set(&[i, c], acc);
        }
    }
    out
}

/// Multi-head attention assembled head by head from column slices of the
/// projection matrices.
pub fn multi_head(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    heads: usize,
    scale: f64,
) -> Tensor {
    let c = wq.shape()[0];
    let d = c / heads;
    let cols = |w: &Tensor, h: usize| {
        let mut s = Tensor::zeros([c, d]);
        for i in 0..c {
            for j in 0..d {
                s.set(&[i, j], w.get(&[i, h * d + j]));
            }
        }
        s
    };
    let nq = q.shape()[0];
    let mut concat = Tensor::zeros([nq, c]);
    for h in 0..heads {
        let qh = matmul(q, &cols(wq, h));
        let kh = matmul(k, &cols(wk, h));
        let vh = matmul(v, &cols(wv, h));
        let head = attention(&qh, &kh, &vh, scale);
        for i in 0..nq {
            for j in 0..d {
                concat.set(&[i, h * d + j], head.get(&[i, j]));
            }
        }
    }
    matmul(&concat, wo)
}

/// Flattens a `[h,w,c]` map into `[h·w, c]` tokens.
pub fn flatten(x: &Tensor) -> Tensor {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros([h * w, c]);
    for y in 0..h {
        for xx in 0..w {
            for k in 0..c {
                out.set(&[y * w + xx, k], x.get(&[y, xx, k]));
            }
        }
    }
    out
}

pub fn max_pool2d(x: &Tensor, r: usize) -> Tensor {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h.div_ceil(r), w.div_ceil(r));
    let mut out = Tensor::zeros([oh, ow, c]);
    for oy in 0..oh {
        for ox in 0..ow {
            for k in 0..c {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..r {
                    for dx in 0..r {
                        let (y, xx) = (oy * r + dy, ox * r + dx);
                        if y < h && xx < w {
                            m = m.max(x.get(&[y, xx, k]));
                        }
                    }
                }
                out.set(&[oy, ox, k], m);
            }
        }
    }
    out
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i])
}

/// `x·w + b` row by row.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut y = matmul(x, w);
    let n = y.shape()[1];
    for i in 0..y.shape()[0] {
        for j in 0..n {
            y.set(&[i, j], y.get(&[i, j]) + b.get(&[j]));
        }
    }
    y
}

/// Pooling-attention block on plain tensors: pool, attend, add and
/// normalize, feed forward, add and normalize.
pub fn pab(
    q: &Tensor,
    map: &Tensor,
    p: &PabParams,
    store: &ParamStore,
    opts: &AttentionOptions,
) -> Tensor {
    let pooled = match opts.pool {
        PoolKind::Avg => avg_pool2d(map, p.ratio),
        PoolKind::Max => max_pool2d(map, p.ratio),
    };
    let kv = flatten(&pooled);
    let a = &p.attn;
    let scale = opts.scale.factor(a.channels, a.heads);
    let g = |id| store.get(id);
    let mixed = multi_head(
        q,
        &kv,
        &kv,
        g(a.wq),
        g(a.wk),
        g(a.wv),
        g(a.wo),
        a.heads,
        scale,
    );
    let f = layer_norm_rows(
        &add(q, &mixed),
        g(p.norm1.gamma),
        g(p.norm1.beta),
        opts.norm_eps,
    );
    let hidden = linear(&f, g(p.mlp.w1), g(p.mlp.b1)).map(|v| v.max(0.0));
    let ff = linear(&hidden, g(p.mlp.w2), g(p.mlp.b2));
    layer_norm_rows(
        &add(&f, &ff),
        g(p.norm2.gamma),
        g(p.norm2.beta),
        opts.norm_eps,
    )
}

/// One fusion block: the middle level attends to all three maps, the three
/// results are summed, then refined twice by self attention. Returns the
/// new middle level as `[h4, w4, C]`.
pub fn tpn_block(
    p3: &Tensor,
    p4: &Tensor,
    p5: &Tensor,
    block: &TpnBlockParams,
    store: &ParamStore,
    opts: &AttentionOptions,
) -> Tensor {
    let (h4, w4, c) = (p4.shape()[0], p4.shape()[1], p4.shape()[2]);
    let q = flatten(p4);
    let mut x = pab(&q, p3, &block.cross[0], store, opts);
    x = add(&x, &pab(&q, p4, &block.cross[1], store, opts));
    x = add(&x, &pab(&q, p5, &block.cross[2], store, opts));
    for r in &block.refine {
        let map = x.reshape([h4, w4, c]).expect("token count matches the map");
        x = pab(&x, &map, r, store, opts);
    }
    x.reshape([h4, w4, c]).expect("token count matches the map")
}
