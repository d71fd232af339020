//! Multi-head attention, pooling attention and the pooling-attention block.
//!
//! Token matrices are `[n, C]`. Projections use the `x·W` convention with
//! `C×C` weights; head `i` owns columns `[i·d, (i+1)·d)` with `d = C/N`.

use crate::autograd::{Ctx, Var};
use crate::counter::{in_category, Category};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Normalizer applied to attention scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttnScale {
    /// `1/√(C/N)`.
    #[default]
    PerHead,
    /// `1/√C`.
    FullDim,
}

impl AttnScale {
    pub fn factor(self, channels: usize, heads: usize) -> f64 {
        match self {
            AttnScale::PerHead => 1.0 / ((channels / heads) as f64).sqrt(),
            AttnScale::FullDim => 1.0 / (channels as f64).sqrt(),
        }
    }
}

/// Spatial reduction applied to keys and values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PoolKind {
    #[default]
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionOptions {
    pub scale: AttnScale,
    pub pool: PoolKind,
    pub norm_eps: f64,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        AttentionOptions {
            scale: AttnScale::PerHead,
            pool: PoolKind::Avg,
            norm_eps: 1e-5,
        }
    }
}

/// Additive positional terms for queries and keys.
#[derive(Clone, Copy, Debug)]
pub struct Pos<'t> {
    pub query: Var<'t>,
    pub key: Var<'t>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MhaParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub channels: usize,
}

impl MhaParams {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        channels: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{channels} channels are not divisible into {heads} heads"
            )));
        }
        let mut mat =
            |name: &str| store.add(format!("{prefix}.{name}"), init.matrix(channels, channels));
        Ok(MhaParams {
            wq: mat("wq"),
            wk: mat("wk"),
            wv: mat("wv"),
            wo: mat("wo"),
            heads,
            channels,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// Single-head `softmax((Q+Pos_q)(K+Pos_k)ᵀ·scale)·V`.
/// Returns the output and the `[n_q, n_kv]` attention weights.
pub fn scaled_dot_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    pos: Option<Pos<'t>>,
    scale: f64,
) -> Result<(Var<'t>, Var<'t>)> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::shape(
            "attention",
            format!("Q {qs:?}, K {ks:?}, V {vs:?}"),
        ));
    }
    let (q, k) = match pos {
        Some(p) => (q.add(p.query)?, k.add(p.key)?),
        None => (q, k),
    };
    let weights = q.matmul(k.transpose()?)?.scale(scale)?.softmax()?;
    Ok((weights.matmul(v)?, weights))
}

/// Multi-head attention. Positional terms, when given, are added to the
/// query and key inputs before projection.
pub fn multi_head<'t>(
    cx: Ctx<'t>,
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    params: &MhaParams,
    pos: Option<Pos<'t>>,
    scale: AttnScale,
) -> Result<Var<'t>> {
    Ok(multi_head_with_weights(cx, q, k, v, params, pos, scale)?.0)
}

/// [`multi_head`] that also returns each head's attention weights.
pub fn multi_head_with_weights<'t>(
    cx: Ctx<'t>,
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    params: &MhaParams,
    pos: Option<Pos<'t>>,
    scale: AttnScale,
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    let c = params.channels;
    for (name, x) in [("Q", q), ("K", k), ("V", v)] {
        let s = x.shape();
        if s.len() != 2 || s[1] != c {
            return Err(Error::shape(
                "multi_head",
                format!("{name} {s:?}, expected width {c}"),
            ));
        }
    }
    let (q, k) = match pos {
        Some(p) => (q.add(p.query)?, k.add(p.key)?),
        None => (q, k),
    };
    let d = params.head_dim();
    let factor = scale.factor(c, params.heads);
    let (qp, kp) = in_category(Category::AttentionCore, || -> Result<_> {
        Ok((q.matmul(cx.p(params.wq))?, k.matmul(cx.p(params.wk))?))
    })?;
    let vp = in_category(Category::Projection, || v.matmul(cx.p(params.wv)))?;
    let mut heads = Vec::with_capacity(params.heads);
    let mut weights = Vec::with_capacity(params.heads);
    in_category(Category::AttentionCore, || -> Result<()> {
        for h in 0..params.heads {
            let (out, w) = scaled_dot_attention(
                qp.slice_cols(h * d, d)?,
                kp.slice_cols(h * d, d)?,
                vp.slice_cols(h * d, d)?,
                None,
                factor,
            )?;
            heads.push(out);
            weights.push(w);
        }
        Ok(())
    })?;
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        Var::concat(&heads)?
    };
    let out = in_category(Category::Projection, || merged.matmul(cx.p(params.wo)))?;
    Ok((out, weights))
}

/// Pools a `[h,w,C]` map by `ratio` and flattens it to tokens.
pub fn pool_tokens<'t>(map: Var<'t>, ratio: usize, kind: PoolKind) -> Result<Var<'t>> {
    in_category(Category::Pooling, || match kind {
        PoolKind::Avg => map.avg_pool2d(ratio),
        PoolKind::Max => map.max_pool2d(ratio),
    })?
    .flatten_tokens()
}

/// Multi-head attention over keys and values spatially pooled by `ratio`,
/// with no positional encoding. When `k_map` and `v_map` are the same node
/// the map is pooled once.
pub fn pooling_attention<'t>(
    cx: Ctx<'t>,
    q: Var<'t>,
    k_map: Var<'t>,
    v_map: Var<'t>,
    params: &MhaParams,
    ratio: usize,
    opts: &AttentionOptions,
) -> Result<Var<'t>> {
    Ok(pooling_attention_with_weights(cx, q, k_map, v_map, params, ratio, opts)?.0)
}

pub fn pooling_attention_with_weights<'t>(
    cx: Ctx<'t>,
    q: Var<'t>,
    k_map: Var<'t>,
    v_map: Var<'t>,
    params: &MhaParams,
    ratio: usize,
    opts: &AttentionOptions,
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    if k_map.shape() != v_map.shape() {
        return Err(Error::shape(
            "pooling_attention",
            format!(
                "key map {:?} vs value map {:?}",
                k_map.shape(),
                v_map.shape()
            ),
        ));
    }
    let k = pool_tokens(k_map, ratio, opts.pool)?;
    let v = if v_map.id() == k_map.id() {
        k
    } else {
        pool_tokens(v_map, ratio, opts.pool)?
    };
    multi_head_with_weights(cx, q, k, v, params, None, opts.scale)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        LayerNormParams {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones([channels])),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros([channels])),
        }
    }

    pub fn apply<'t>(&self, cx: Ctx<'t>, x: Var<'t>, eps: f64) -> Result<Var<'t>> {
        x.layer_norm(cx.p(self.gamma), cx.p(self.beta), eps)
    }
}

/// Two-layer feed-forward network `Linear → ReLU → Linear`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub hidden: usize,
}

impl MlpParams {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        channels: usize,
        hidden: usize,
    ) -> Self {
        MlpParams {
            w1: store.add(format!("{prefix}.w1"), init.matrix(channels, hidden)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros([hidden])),
            w2: store.add(format!("{prefix}.w2"), init.matrix(hidden, channels)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros([channels])),
            hidden,
        }
    }

    pub fn apply<'t>(&self, cx: Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        in_category(Category::Mlp, || {
            x.linear(cx.p(self.w1), Some(cx.p(self.b1)))?
                .relu()?
                .linear(cx.p(self.w2), Some(cx.p(self.b2)))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PabParams {
    pub attn: MhaParams,
    pub mlp: MlpParams,
    pub norm1: LayerNormParams,
    pub norm2: LayerNormParams,
    pub ratio: usize,
}

impl PabParams {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        channels: usize,
        heads: usize,
        hidden: usize,
        ratio: usize,
    ) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::Config("pooling ratio must be >= 1".into()));
        }
        Ok(PabParams {
            attn: MhaParams::new(store, init, &format!("{prefix}.attn"), channels, heads)?,
            mlp: MlpParams::new(store, init, &format!("{prefix}.mlp"), channels, hidden),
            norm1: LayerNormParams::new(store, &format!("{prefix}.norm1"), channels),
            norm2: LayerNormParams::new(store, &format!("{prefix}.norm2"), channels),
            ratio,
        })
    }
}

/// Token mixer used inside an attention block.
#[derive(Clone, Copy, Debug)]
pub enum Mixer<'t> {
    /// Pooling attention with the block's own ratio.
    Pooling,
    /// Unpooled multi-head attention with optional positional terms.
    Full(Option<Pos<'t>>),
}

/// `F = Norm1(Q + PA_R(Q, K, V))`, `out = Norm2(F + MLP(F))`.
pub fn pab<'t>(
    cx: Ctx<'t>,
    q: Var<'t>,
    k_map: Var<'t>,
    v_map: Var<'t>,
    params: &PabParams,
    opts: &AttentionOptions,
) -> Result<Var<'t>> {
    attention_block(cx, q, k_map, v_map, params, Mixer::Pooling, opts)
}

/// The PAB residual/normalization/MLP structure around an arbitrary mixer.
pub fn attention_block<'t>(
    cx: Ctx<'t>,
    q: Var<'t>,
    k_map: Var<'t>,
    v_map: Var<'t>,
    params: &PabParams,
    mixer: Mixer<'t>,
    opts: &AttentionOptions,
) -> Result<Var<'t>> {
    let mixed = match mixer {
        Mixer::Pooling => pooling_attention(cx, q, k_map, v_map, &params.attn, params.ratio, opts)?,
        Mixer::Full(pos) => {
            let k = k_map.flatten_tokens()?;
            let v = if v_map.id() == k_map.id() {
                k
            } else {
                v_map.flatten_tokens()?
            };
            multi_head(cx, q, k, v, &params.attn, pos, opts.scale)?
        }
    };
    let f = params.norm1.apply(cx, q.add(mixed)?, opts.norm_eps)?;
    let ff = params.mlp.apply(cx, f)?;
    params.norm2.apply(cx, f.add(ff)?, opts.norm_eps)
}

/// Multiply-adds of multi-head attention: `2·n_q·n_kv·C + n_q·C² + n_kv·C²`.
pub fn flops_mha(n_q: u64, n_kv: u64, channels: u64) -> u64 {
    2 * n_q * n_kv * channels + n_q * channels * channels + n_kv * channels * channels
}

/// Cost of pooling attention over an `h×w` key/value map: the attention cost
/// on `⌈h/R⌉·⌈w/R⌉` pooled tokens plus one accumulate per pooled input element.
pub fn flops_pa(n_q: u64, h: u64, w: u64, channels: u64, ratio: u64) -> u64 {
    let n_kv = h.div_ceil(ratio) * w.div_ceil(ratio);
    flops_mha(n_q, n_kv, channels) + h * w * channels
}

/// Value and output projections, which the attention cost formula leaves out.
pub fn flops_extra_projections(n_q: u64, n_kv: u64, channels: u64) -> u64 {
    n_kv * channels * channels + n_q * channels * channels
}

pub fn flops_mlp(n: u64, channels: u64, hidden: u64) -> u64 {
    2 * n * channels * hidden
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::counter::OpCounter;
    use crate::selftest::oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, rng)
    }

    #[test]
    fn single_token_attention_returns_value_row() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = tape.constant(rand_t(&[1, 4], &mut rng));
        let k = tape.constant(rand_t(&[1, 4], &mut rng));
        let v = tape.constant(rand_t(&[1, 4], &mut rng));
        let (out, _) = scaled_dot_attention(q, k, v, None, 0.5).unwrap();
        assert_eq!(out.to_tensor(), v.to_tensor());
    }

    #[test]
    fn identical_value_rows_are_reproduced() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let row = rand_t(&[1, 3], &mut rng);
        let v = Tensor::from_fn([5, 3], |i| row.data()[i % 3]);
        let (out, _) = scaled_dot_attention(
            tape.constant(rand_t(&[4, 3], &mut rng)),
            tape.constant(rand_t(&[5, 3], &mut rng)),
            tape.constant(v),
            None,
            1.0,
        )
        .unwrap();
        for r in out.to_tensor().data().chunks(3) {
            for (a, b) in r.iter().zip(row.data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn attention_matches_naive_oracle() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, k, v) = (
            rand_t(&[3, 4], &mut rng),
            rand_t(&[5, 4], &mut rng),
            rand_t(&[5, 4], &mut rng),
        );
        let (out, w) = scaled_dot_attention(
            tape.constant(q.clone()),
            tape.constant(k.clone()),
            tape.constant(v.clone()),
            None,
            0.5,
        )
        .unwrap();
        assert!(
            out.to_tensor()
                .max_abs_diff(&oracle::attention(&q, &k, &v, 0.5))
                < 1e-12
        );
        for row in w.to_tensor().data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn attention_rejects_width_mismatch() {
        let tape = Tape::new();
        let r = scaled_dot_attention(
            tape.constant(Tensor::zeros([2, 3])),
            tape.constant(Tensor::zeros([2, 4])),
            tape.constant(Tensor::zeros([2, 4])),
            None,
            1.0,
        );
        assert!(r.is_err());
    }

    #[test]
    fn heads_must_divide_channels() {
        let mut store = ParamStore::new();
        assert!(MhaParams::new(&mut store, &mut Init::new(0), "m", 6, 4).is_err());
    }

    #[test]
    fn positional_terms_shift_queries_and_keys() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (q, k, v) = (
            rand_t(&[2, 3], &mut rng),
            rand_t(&[4, 3], &mut rng),
            rand_t(&[4, 3], &mut rng),
        );
        let (pq, pk) = (rand_t(&[2, 3], &mut rng), rand_t(&[4, 3], &mut rng));
        let pos = Pos {
            query: tape.constant(pq.clone()),
            key: tape.constant(pk.clone()),
        };
        let (out, _) = scaled_dot_attention(
            tape.constant(q.clone()),
            tape.constant(k.clone()),
            tape.constant(v.clone()),
            Some(pos),
            0.7,
        )
        .unwrap();
        let want = oracle::attention(
            &crate::ops::add(&q, &pq).unwrap(),
            &crate::ops::add(&k, &pk).unwrap(),
            &v,
            0.7,
        );
        assert!(out.to_tensor().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn cost_model_values() {
        assert_eq!(flops_mha(1, 1, 1), 4);
        assert_eq!(flops_mha(256, 256, 192), 44_040_192);
        assert_eq!(flops_mha(256, 64, 192), 18_087_936);
        assert_eq!(flops_pa(256, 16, 16, 192, 2), 18_087_936 + 49_152);
        assert_eq!(
            flops_pa(256, 16, 16, 192, 1),
            flops_mha(256, 256, 192) + 256 * 192
        );
    }

    #[test]
    fn pooled_attention_is_cheaper_when_keys_outnumber_channels() {
        for (h, c) in [(32u64, 64u64), (16, 192), (32, 192)] {
            assert!(flops_pa(256, h, h, c, 4) < flops_pa(256, h, h, c, 1));
        }
    }

    #[test]
    fn instrumented_core_matches_formula() {
        let mut store = ParamStore::new();
        let mut init = Init::new(4);
        let p = MhaParams::new(&mut store, &mut init, "m", 8, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (q, kv) = (rand_t(&[6, 8], &mut rng), rand_t(&[4, 5, 8], &mut rng));
        let opts = AttentionOptions::default();
        let (_, count) = OpCounter::measure(|| {
            let tape = Tape::new();
            let cx = Ctx::new(&tape, &store);
            let kv = tape.constant(kv.clone());
            pooling_attention(cx, tape.constant(q.clone()), kv, kv, &p, 2, &opts).unwrap();
        });
        assert_eq!(
            count.get(Category::AttentionCore) + count.get(Category::Pooling),
            flops_pa(6, 4, 5, 8, 2)
        );
        assert_eq!(
            count.get(Category::Projection),
            flops_extra_projections(6, 6, 8)
        );
    }
}
