//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. [`Var`] is a cheap
//! copyable handle into it. [`Tape::backward`] walks the records in reverse,
//! returns the gradients of every participating node and clears the tape.
//! A tape is single-threaded; run one per execution context.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::ops::{self, ConvSpec};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Gradient rule of a fused operation: maps the output gradient and the parent
/// values to one gradient per parent.
pub type CustomBackward = Box<dyn Fn(&Tensor, &[&Tensor]) -> Vec<Tensor>>;

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Transpose(usize),
    Reshape(usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    Concat(Vec<usize>),
    AvgPool {
        x: usize,
        r: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        spec: ConvSpec,
    },
    Xcorr(usize, usize),
    ResizeNearest(usize),
    Sum(usize),
    Mean(usize),
    Custom {
        parents: Vec<usize>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, usize>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|&n| self.grads[n].as_ref())
    }

    /// Parameters that received a gradient.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(&id, &n)| self.grads[n].as_ref().map(|g| (id, g)))
    }
}

/// A tape paired with the parameters a forward pass reads from.
#[derive(Clone, Copy)]
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    pub params: &'t ParamStore,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, params: &'t ParamStore) -> Self {
        Ctx { tape, params }
    }

    /// Binds a parameter onto the tape.
    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.tape.param(self.params, id)
    }

    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// A value that gradients flow into.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A value treated as constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a stored parameter. Repeated binds of the same id return the same
    /// node, so every use of a shared parameter accumulates into one gradient.
    pub fn param<'t>(&'t self, store: &ParamStore, id: ParamId) -> Var<'t> {
        if let Some(&n) = self.bound.borrow().get(&id) {
            return Var { tape: self, id: n };
        }
        let var = self.push(store.get(id).clone(), Op::Leaf, !store.is_frozen(id));
        self.bound.borrow_mut().insert(id, var.id);
        var
    }

    /// The tape node a parameter was bound to, if any.
    pub fn bound_param(&self, id: ParamId) -> Option<Var<'_>> {
        self.bound
            .borrow()
            .get(&id)
            .map(|&n| Var { tape: self, id: n })
    }

    /// Records a fused operation with a hand-written gradient rule.
    pub fn custom<'t>(
        &'t self,
        parents: &[Var<'t>],
        value: Tensor,
        backward: impl Fn(&Tensor, &[&Tensor]) -> Vec<Tensor> + 'static,
    ) -> Result<Var<'t>> {
        let value = value.check_finite("custom")?;
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let rg = self.requires(&ids);
        Ok(self.push(
            value,
            Op::Custom {
                parents: ids,
                backward: Box::new(backward),
            },
            rg,
        ))
    }

    /// Back-propagates from a scalar `loss`, returning gradients for every
    /// node that requires them. The tape is cleared afterwards; handles from
    /// this pass must not be read again.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let params = std::mem::take(&mut *self.bound.borrow_mut());
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, params })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: usize| &nodes[i].value;
    let mut acc = |i: usize, t: Tensor| accumulate(nodes, grads, i, t);
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2("matmul").expect("validated");
            let n = val(*b).shape()[1];
            if nodes[*a].requires_grad {
                let mut ga = vec![0.0; m * k];
                ops::gemm_nt(g.data(), val(*b).data(), &mut ga, m, n, k);
                acc(*a, Tensor::new([m, k], ga).expect("shape"));
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![0.0; k * n];
                ops::gemm_tn(val(*a).data(), g.data(), &mut gb, m, k, n);
                acc(*b, Tensor::new([k, n], gb).expect("shape"));
            }
        }
        Op::Add(a, b) => {
            acc(*a, g.clone());
            acc(*b, g.clone());
        }
        Op::Mul(a, b) => {
            acc(*a, zip(g, val(*b), |x, y| x * y));
            acc(*b, zip(g, val(*a), |x, y| x * y));
        }
        Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
        Op::AddBias(a, b) => {
            let c = val(*b).len();
            let mut gb = vec![0.0; c];
            for row in g.data().chunks(c) {
                for (s, v) in gb.iter_mut().zip(row) {
                    *s += v;
                }
            }
            acc(*a, g.clone());
            acc(*b, Tensor::new([c], gb).expect("shape"));
        }
        Op::Relu(a) => acc(
            *a,
            zip(g, &node.value, |gv, y| if y > 0.0 { gv } else { 0.0 }),
        ),
        Op::Sigmoid(a) => acc(*a, zip(g, &node.value, |gv, y| gv * y * (1.0 - y))),
        Op::Softmax(a) => {
            let c = *node.value.shape().last().unwrap_or(&1);
            let mut out = vec![0.0; g.len()];
            for ((o, gr), y) in out
                .chunks_mut(c)
                .zip(g.data().chunks(c))
                .zip(node.value.data().chunks(c))
            {
                let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                for k in 0..c {
                    o[k] = y[k] * (gr[k] - dot);
                }
            }
            acc(*a, Tensor::new(g.shape(), out).expect("shape"));
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gm = val(*gamma).data();
            let c = gm.len();
            let mut gx = vec![0.0; g.len()];
            let mut gg = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for (r, gr) in g.data().chunks(c).enumerate() {
                let xh = &xhat[r * c..(r + 1) * c];
                let mut sum_gh = 0.0;
                let mut sum_gh_xh = 0.0;
                for k in 0..c {
                    let gh = gr[k] * gm[k];
                    sum_gh += gh;
                    sum_gh_xh += gh * xh[k];
                    gg[k] += gr[k] * xh[k];
                    gbeta[k] += gr[k];
                }
                let scale = rstd[r] / c as f64;
                for k in 0..c {
                    gx[r * c + k] = scale * (c as f64 * gr[k] * gm[k] - sum_gh - xh[k] * sum_gh_xh);
                }
            }
            acc(*x, Tensor::new(g.shape(), gx).expect("shape"));
            acc(*gamma, Tensor::new([c], gg).expect("shape"));
            acc(*beta, Tensor::new([c], gbeta).expect("shape"));
        }
        Op::Transpose(a) => acc(*a, ops::transpose(g).expect("2-D")),
        Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape()).expect("same size")),
        Op::SliceCols { x, start } => {
            let (m, n) = val(*x).dims2("slice").expect("validated");
            let len = g.shape()[1];
            let mut out = vec![0.0; m * n];
            for (row, gr) in out.chunks_mut(n).zip(g.data().chunks(len)) {
                row[*start..start + len].copy_from_slice(gr);
            }
            acc(*x, Tensor::new([m, n], out).expect("shape"));
        }
        Op::Concat(parts) => {
            let width = *g.shape().last().expect("rank >= 1");
            let rows = g.len() / width;
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let c = *pv.shape().last().expect("rank >= 1");
                let mut out = Vec::with_capacity(rows * c);
                for r in 0..rows {
                    out.extend_from_slice(&g.data()[r * width + offset..r * width + offset + c]);
                }
                offset += c;
                acc(p, Tensor::new(pv.shape(), out).expect("shape"));
            }
        }
        Op::AvgPool { x, r } => acc(*x, ops::avg_pool2d_backward(val(*x).shape(), *r, g)),
        Op::MaxPool { x, argmax } => {
            let mut out = Tensor::zeros(val(*x).shape());
            let d = out.data_mut();
            for (&src, gv) in argmax.iter().zip(g.data()) {
                d[src] += gv;
            }
            acc(*x, out);
        }
        Op::Conv { x, w, b, spec } => {
            let (gx, gw, gb) =
                ops::conv2d_backward(val(*x), val(*w), *spec, g, nodes[*x].requires_grad);
            if let Some(gx) = gx {
                acc(*x, gx);
            }
            acc(*w, gw);
            if let Some(b) = b {
                acc(*b, gb);
            }
        }
        Op::Xcorr(s, t) => {
            let (gs, gt) = ops::xcorr_backward(val(*s), val(*t), g);
            acc(*s, gs);
            acc(*t, gt);
        }
        Op::ResizeNearest(x) => acc(*x, ops::resize_nearest_backward(val(*x).shape(), g)),
        Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.data()[0])),
        Op::Mean(a) => {
            let n = val(*a).len() as f64;
            acc(*a, Tensor::full(val(*a).shape(), g.data()[0] / n));
        }
        Op::Custom { parents, backward } => {
            let pv: Vec<&Tensor> = parents.iter().map(|&p| val(p)).collect();
            for (&p, gp) in parents.iter().zip(backward(g, &pv)) {
                acc(p, gp);
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

// Fallible graph builders, so the operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the recorded value. Drop it before recording further ops.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, f: impl FnOnce(&Tensor) -> Result<Tensor>, op: Op) -> Result<Var<'t>> {
        let out = f(&self.value())?;
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(out, op, rg))
    }

    fn binary(
        self,
        other: Var<'t>,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
        op: Op,
    ) -> Result<Var<'t>> {
        let out = f(&self.value(), &other.value())?;
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(out, op, rg))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, ops::matmul, Op::MatMul(self.id, other.id))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, ops::add, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.add(other.scale(-1.0)?)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, ops::mul, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        self.unary(|x| ops::scale(x, s), Op::Scale(self.id, s))
    }

    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.binary(bias, ops::add_bias, Op::AddBias(self.id, bias.id))
    }

    /// `x·W + b`.
    pub fn linear(self, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
        let y = self.matmul(w)?;
        match b {
            Some(b) => y.add_bias(b),
            None => Ok(y),
        }
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(|x| Ok(ops::relu(x)), Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(|x| Ok(ops::sigmoid(x)), Op::Sigmoid(self.id))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        self.unary(
            |x| ops::softmax(x, x.rank().saturating_sub(1)),
            Op::Softmax(self.id),
        )
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (out, xhat, rstd) =
            ops::layer_norm_parts(&self.value(), &gamma.value(), &beta.value(), eps)?;
        let rg = self.tape.requires(&[self.id, gamma.id, beta.id]);
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        self.unary(ops::transpose, Op::Transpose(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary(|x| x.reshape(shape), Op::Reshape(self.id))
    }

    /// `[h, w, c]` map to `[h·w, c]` tokens.
    pub fn flatten_tokens(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let [h, w, c] = shape[..] else {
            return Err(Error::shape(
                "flatten",
                format!("expected [h,w,c], got {shape:?}"),
            ));
        };
        self.reshape(&[h * w, c])
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        self.unary(
            |x| ops::slice_cols(x, start, len),
            Op::SliceCols { x: self.id, start },
        )
    }

    /// Concatenation along the last axis.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let tape = first.tape;
        let out = {
            let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| p.value()).collect();
            let refs: Vec<&Tensor> = vals.iter().map(|r| &**r).collect();
            ops::concat_last(&refs)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.requires(&ids);
        Ok(tape.push(out, Op::Concat(ids), rg))
    }

    pub fn avg_pool2d(self, r: usize) -> Result<Var<'t>> {
        self.unary(|x| ops::avg_pool2d(x, r), Op::AvgPool { x: self.id, r })
    }

    pub fn max_pool2d(self, r: usize) -> Result<Var<'t>> {
        let (out, argmax) = ops::max_pool2d_indexed(&self.value(), r)?;
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(out, Op::MaxPool { x: self.id, argmax }, rg))
    }

    pub fn conv2d(self, w: Var<'t>, b: Option<Var<'t>>, spec: ConvSpec) -> Result<Var<'t>> {
        let out = {
            let bv = b.map(|b| b.value());
            ops::conv2d(&self.value(), &w.value(), bv.as_deref(), spec)?
        };
        let mut ids = vec![self.id, w.id];
        ids.extend(b.map(|b| b.id));
        let rg = self.tape.requires(&ids);
        Ok(self.tape.push(
            out,
            Op::Conv {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                spec,
            },
            rg,
        ))
    }

    /// Depth-wise valid cross-correlation with `template` as the kernel.
    pub fn xcorr(self, template: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            template,
            ops::depthwise_xcorr,
            Op::Xcorr(self.id, template.id),
        )
    }

    pub fn resize_nearest(self, h: usize, w: usize) -> Result<Var<'t>> {
        self.unary(|x| ops::resize_nearest(x, h, w), Op::ResizeNearest(self.id))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.unary(|x| Ok(Tensor::scalar(x.sum())), Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.unary(
            |x| Ok(Tensor::scalar(x.sum() / x.len().max(1) as f64)),
            Op::Mean(self.id),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selftest::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new([3], vec![1.0, -2.0, 5.0]).unwrap());
        let loss = x.sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(tape.is_empty(), "tape cleared");
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let loss = x.mul(x).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones([2, 2]));
        let c = tape.constant(Tensor::ones([2, 2]));
        let loss = x.matmul(c).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn shared_param_binds_once() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full([1, 1], 3.0));
        let tape = Tape::new();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        assert_eq!(a.id(), b.id());
        let loss = a.mul(b).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(id).unwrap().data(), &[6.0]);
    }

    #[test]
    fn elementwise_ops_pass_gradient_check() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![
                Tensor::uniform([3, 4], -1.0, 1.0, &mut rng),
                Tensor::uniform([4, 5], -1.0, 1.0, &mut rng),
                Tensor::uniform([5], -1.0, 1.0, &mut rng),
                Tensor::uniform([3, 5], -1.0, 1.0, &mut rng),
            ];
            let report = check_gradients(&inputs, seed, |_tape, v| {
                let y = v[0].matmul(v[1])?.add_bias(v[2])?;
                let y = y.sigmoid()?.mul(v[3])?.add(y.relu()?)?.scale(0.7)?;
                let y = Var::concat(&[y, y.transpose()?.transpose()?])?;
                y.slice_cols(2, 6)?.softmax()?.reshape(&[18])
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "seed {seed}: {report:?}");
        }
    }
}
