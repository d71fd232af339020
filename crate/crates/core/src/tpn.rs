//! Transformer pyramid fusion of stride-8/16/32 feature maps.
//!
//! Each pyramid level is reduced to `C` channels by a bias-free 1×1
//! convolution. A fusion block lets the middle level query all three levels
//! through three lateral pooling-attention blocks, sums their outputs, and
//! refines the sum with two self-attention blocks. The outer levels pass
//! through unchanged. Blocks repeat `B` times.
//!
//! Baseline necks (identity, stacked convolutions, top-down FPN, a plain
//! transformer, and the pyramid network without pooling) are selectable
//! through [`NeckKind`] for comparison.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::attention::{
    attention_block, flops_extra_projections, flops_mha, flops_mlp, AttentionOptions, Mixer,
    PabParams, Pos,
};
use crate::autograd::{Ctx, Var};
use crate::counter::{in_category, Category};
use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Pyramid levels at strides 8, 16 and 32, each `[h, w, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub p3: Tensor,
    pub p4: Tensor,
    pub p5: Tensor,
}

pub const STRIDES: [usize; 3] = [8, 16, 32];

impl FeaturePyramid {
    pub fn levels(&self) -> [&Tensor; 3] {
        [&self.p3, &self.p4, &self.p5]
    }

    pub fn shapes(&self) -> [(usize, usize); 3] {
        self.levels().map(|t| (t.shape()[0], t.shape()[1]))
    }

    pub fn channels(&self) -> [usize; 3] {
        self.levels().map(|t| t.shape()[2])
    }

    /// Checks that each level halves the previous one (rounding up).
    pub fn validate(&self) -> Result<()> {
        for t in self.levels() {
            t.dims3("pyramid")?;
        }
        let [s3, s4, s5] = self.shapes();
        let halves =
            |a: (usize, usize), b: (usize, usize)| a.0.div_ceil(2) == b.0 && a.1.div_ceil(2) == b.1;
        if !halves(s3, s4) || !halves(s4, s5) {
            return Err(Error::shape(
                "pyramid",
                format!("levels {s3:?}, {s4:?}, {s5:?} are not successive halvings"),
            ));
        }
        Ok(())
    }
}

/// Pyramid levels recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PyramidVars<'t> {
    pub p3: Var<'t>,
    pub p4: Var<'t>,
    pub p5: Var<'t>,
}

impl<'t> PyramidVars<'t> {
    pub fn constant(cx: Ctx<'t>, pyr: &FeaturePyramid) -> Self {
        PyramidVars {
            p3: cx.constant(pyr.p3.clone()),
            p4: cx.constant(pyr.p4.clone()),
            p5: cx.constant(pyr.p5.clone()),
        }
    }

    pub fn levels(&self) -> [Var<'t>; 3] {
        [self.p3, self.p4, self.p5]
    }

    pub fn token_counts(&self) -> [usize; 3] {
        self.levels().map(|v| {
            let s = v.shape();
            s[0] * s[1]
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NeckKind {
    /// Pooling-attention pyramid fusion.
    #[default]
    Tpn,
    /// Same wiring with unpooled attention and learned positional encodings.
    TpnNoPool,
    /// Self-attention layers over the middle level only, with positional encodings.
    Transformer,
    /// 3×3 convolution layers over the middle level only.
    Conv,
    /// Convolution and nearest-neighbour resampling across the pyramid.
    Fpn,
    /// Reduced middle level, no fusion.
    Identity,
}

impl NeckKind {
    pub const ALL: [NeckKind; 6] = [
        NeckKind::Tpn,
        NeckKind::TpnNoPool,
        NeckKind::Transformer,
        NeckKind::Conv,
        NeckKind::Fpn,
        NeckKind::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NeckKind::Tpn => "tpn",
            NeckKind::TpnNoPool => "tpn-nopool",
            NeckKind::Transformer => "transformer",
            NeckKind::Conv => "conv",
            NeckKind::Fpn => "fpn",
            NeckKind::Identity => "identity",
        }
    }
}

impl fmt::Display for NeckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NeckKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        NeckKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown neck `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TpnConfig {
    pub channels: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Pooling ratios of the lateral blocks reading P3, P4 and P5.
    pub r_cross: [usize; 3],
    pub r_self: usize,
    /// MLP hidden width as a multiple of `channels`.
    pub mlp_ratio: usize,
    pub attn: AttentionOptions,
    pub kind: NeckKind,
}

impl Default for TpnConfig {
    fn default() -> Self {
        TpnConfig {
            channels: 192,
            heads: 6,
            blocks: 2,
            r_cross: [4, 2, 1],
            r_self: 2,
            mlp_ratio: 2,
            attn: AttentionOptions::default(),
            kind: NeckKind::Tpn,
        }
    }
}

impl TpnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "channels {} must be a positive multiple of heads {}",
                self.channels, self.heads
            )));
        }
        if self.blocks == 0 {
            return Err(Error::Config(
                "at least one fusion block is required".into(),
            ));
        }
        if self.r_cross.contains(&0) || self.r_self == 0 {
            return Err(Error::Config("pooling ratios must be >= 1".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp ratio must be >= 1".into()));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.mlp_ratio * self.channels
    }
}

/// The five attention blocks of one fusion block.
#[derive(Clone, Debug, PartialEq)]
pub struct TpnBlockParams {
    /// Lateral blocks with P4 as query over P3, P4 and P5.
    pub cross: [PabParams; 3],
    /// Chained self-attention blocks.
    pub refine: [PabParams; 2],
}

#[derive(Clone, Debug, PartialEq)]
enum NeckLayers {
    Attention(Vec<TpnBlockParams>),
    /// Self-attention layers, three per block.
    Transformer(Vec<PabParams>),
    /// `(weight, bias)` 3×3 convolutions.
    Conv(Vec<(ParamId, ParamId)>),
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TpnParams {
    pub reduce: [ParamId; 3],
    layers: NeckLayers,
    /// Learned positional tables keyed by (level, token count).
    pos: BTreeMap<(usize, usize), ParamId>,
}

impl TpnParams {
    /// Registers the neck. `branch_shapes` lists the pyramid spatial shapes the
    /// neck will see (search and template); unpooled variants allocate a
    /// positional table per level and shape.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        cfg: &TpnConfig,
        in_channels: [usize; 3],
        branch_shapes: &[[(usize, usize); 3]],
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let reduce = [0, 1, 2].map(|i| {
            let ci = in_channels[i];
            store.add(
                format!("neck.reduce{}", i + 3),
                init.glorot(&[1, 1, ci, c], ci, c),
            )
        });
        let pab = |store: &mut ParamStore, init: &mut Init, name: String, ratio: usize| {
            PabParams::new(store, init, &name, c, cfg.heads, cfg.hidden(), ratio)
        };
        let layers = match cfg.kind {
            NeckKind::Tpn | NeckKind::TpnNoPool => {
                let mut blocks = Vec::with_capacity(cfg.blocks);
                for b in 0..cfg.blocks {
                    let mut cross = Vec::with_capacity(3);
                    for (i, &r) in cfg.r_cross.iter().enumerate() {
                        cross.push(pab(
                            store,
                            init,
                            format!("neck.block{b}.cross{}", i + 3),
                            r,
                        )?);
                    }
                    let refine = [
                        pab(store, init, format!("neck.block{b}.refine0"), cfg.r_self)?,
                        pab(store, init, format!("neck.block{b}.refine1"), cfg.r_self)?,
                    ];
                    let cross: [PabParams; 3] = cross.try_into().expect("three lateral blocks");
                    blocks.push(TpnBlockParams { cross, refine });
                }
                NeckLayers::Attention(blocks)
            }
            NeckKind::Transformer => {
                let mut layers = Vec::new();
                for l in 0..3 * cfg.blocks {
                    layers.push(pab(store, init, format!("neck.layer{l}"), 1)?);
                }
                NeckLayers::Transformer(layers)
            }
            NeckKind::Conv | NeckKind::Fpn => {
                let per_block = if cfg.kind == NeckKind::Conv { 3 } else { 5 };
                let convs = (0..per_block * cfg.blocks)
                    .map(|l| {
                        (
                            store.add(format!("neck.conv{l}.w"), init.conv(3, c, c)),
                            store.add(format!("neck.conv{l}.b"), Tensor::zeros([c])),
                        )
                    })
                    .collect();
                NeckLayers::Conv(convs)
            }
            NeckKind::Identity => NeckLayers::Identity,
        };
        let mut pos = BTreeMap::new();
        if matches!(cfg.kind, NeckKind::TpnNoPool | NeckKind::Transformer) {
            for shapes in branch_shapes {
                for (level, &(h, w)) in shapes.iter().enumerate() {
                    let n = h * w;
                    pos.entry((level, n)).or_insert_with(|| {
                        store.add(format!("neck.pos{}.{n}", level + 3), Tensor::zeros([n, c]))
                    });
                }
            }
        }
        Ok(TpnParams {
            reduce,
            layers,
            pos,
        })
    }

    pub fn blocks(&self) -> &[TpnBlockParams] {
        match &self.layers {
            NeckLayers::Attention(b) => b,
            _ => &[],
        }
    }

    fn pos<'t>(&self, cx: Ctx<'t>, level: usize, tokens: usize) -> Result<Var<'t>> {
        self.pos
            .get(&(level, tokens))
            .map(|&id| cx.p(id))
            .ok_or_else(|| {
                Error::shape(
                    "positional encoding",
                    format!("no table for P{} with {tokens} tokens", level + 3),
                )
            })
    }
}

/// Applies the 1×1 reductions; every level keeps its spatial extent and gets `C` channels.
pub fn reduce_and_flatten<'t>(
    cx: Ctx<'t>,
    pyr: PyramidVars<'t>,
    params: &TpnParams,
) -> Result<PyramidVars<'t>> {
    let spec = ConvSpec::new(1, 0);
    in_category(Category::Conv, || {
        let [p3, p4, p5] =
            [0, 1, 2].map(|i| pyr.levels()[i].conv2d(cx.p(params.reduce[i]), None, spec));
        Ok(PyramidVars {
            p3: p3?,
            p4: p4?,
            p5: p5?,
        })
    })
}

fn map_shape(v: Var<'_>) -> Result<(usize, usize, usize)> {
    match v.shape()[..] {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::shape(
            "tpn",
            format!("expected [h,w,c] map, got {s:?}"),
        )),
    }
}

/// One fusion block. Returns `(P3, P4', P5)` with P3 and P5 passed through.
pub fn tpn_block<'t>(
    cx: Ctx<'t>,
    pyr: PyramidVars<'t>,
    block: &TpnBlockParams,
    cfg: &TpnConfig,
) -> Result<PyramidVars<'t>> {
    tpn_block_inner(cx, pyr, block, cfg, None)
}

fn tpn_block_inner<'t>(
    cx: Ctx<'t>,
    pyr: PyramidVars<'t>,
    block: &TpnBlockParams,
    cfg: &TpnConfig,
    unpooled: Option<&TpnParams>,
) -> Result<PyramidVars<'t>> {
    let (h4, w4, c) = map_shape(pyr.p4)?;
    for v in pyr.levels() {
        if map_shape(v)?.2 != c || c != cfg.channels {
            return Err(Error::shape(
                "tpn_block",
                format!("all levels need {} channels", cfg.channels),
            ));
        }
    }
    let q = pyr.p4.flatten_tokens()?;
    let mixer = |level: usize, map: Var<'t>| -> Result<Mixer<'t>> {
        match unpooled {
            None => Ok(Mixer::Pooling),
            Some(params) => {
                let (h, w, _) = map_shape(map)?;
                Ok(Mixer::Full(Some(Pos {
                    query: params.pos(cx, 1, h4 * w4)?,
                    key: params.pos(cx, level, h * w)?,
                })))
            }
        }
    };
    let mut fused: Option<Var<'t>> = None;
    for (level, (map, params)) in pyr.levels().into_iter().zip(&block.cross).enumerate() {
        let out = attention_block(cx, q, map, map, params, mixer(level, map)?, &cfg.attn)?;
        fused = Some(match fused {
            Some(acc) => acc.add(out)?,
            None => out,
        });
    }
    let mut p4 = fused.expect("three lateral blocks");
    for params in &block.refine {
        let map = p4.reshape(&[h4, w4, c])?;
        p4 = attention_block(cx, p4, map, map, params, mixer(1, map)?, &cfg.attn)?;
    }
    Ok(PyramidVars {
        p3: pyr.p3,
        p4: p4.reshape(&[h4, w4, c])?,
        p5: pyr.p5,
    })
}

/// Full neck: reduction, then `B` fusion blocks. Returns the fused middle
/// level as a `[h4, w4, C]` map.
pub fn tpn_forward<'t>(
    cx: Ctx<'t>,
    pyr: PyramidVars<'t>,
    params: &TpnParams,
    cfg: &TpnConfig,
) -> Result<Var<'t>> {
    let reduced = reduce_and_flatten(cx, pyr, params)?;
    let (h4, w4, c) = map_shape(reduced.p4)?;
    match (&params.layers, cfg.kind) {
        (NeckLayers::Attention(blocks), kind) => {
            let unpooled = (kind == NeckKind::TpnNoPool).then_some(params);
            let mut cur = reduced;
            for block in blocks {
                cur = tpn_block_inner(cx, cur, block, cfg, unpooled)?;
            }
            Ok(cur.p4)
        }
        (NeckLayers::Transformer(layers), _) => {
            let pos = params.pos(cx, 1, h4 * w4)?;
            let mut x = reduced.p4.flatten_tokens()?;
            for layer in layers {
                let map = x.reshape(&[h4, w4, c])?;
                let mixer = Mixer::Full(Some(Pos {
                    query: pos,
                    key: pos,
                }));
                x = attention_block(cx, x, map, map, layer, mixer, &cfg.attn)?;
            }
            x.reshape(&[h4, w4, c])
        }
        (NeckLayers::Conv(convs), NeckKind::Conv) => in_category(Category::Conv, || {
            let mut x = reduced.p4;
            for &(w, b) in convs {
                x = x
                    .conv2d(cx.p(w), Some(cx.p(b)), ConvSpec::new(1, 1))?
                    .relu()?;
            }
            Ok(x)
        }),
        (NeckLayers::Conv(convs), _) => in_category(Category::Conv, || {
            let conv = |x: Var<'t>, l: usize| -> Result<Var<'t>> {
                let (w, b) = convs[l];
                x.conv2d(cx.p(w), Some(cx.p(b)), ConvSpec::new(1, 1))
            };
            let mut p4 = reduced.p4;
            for blk in 0..convs.len() / 5 {
                let l = blk * 5;
                let down = reduced.p3.resize_nearest(h4, w4)?;
                let up = reduced.p5.resize_nearest(h4, w4)?;
                let sum = conv(down, l)?
                    .add(conv(p4, l + 1)?)?
                    .add(conv(up, l + 2)?)?
                    .relu()?;
                p4 = conv(conv(sum, l + 3)?.relu()?, l + 4)?.relu()?;
            }
            Ok(p4)
        }),
        (NeckLayers::Identity, _) => Ok(reduced.p4),
    }
}

/// Multiply-adds of one neck pass, by kind of work.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TpnCost {
    /// 1×1 reductions (paid once, not per block).
    pub reduction: u64,
    /// Query/key projections and attention products.
    pub attention: u64,
    pub pooling: u64,
    /// Value and output projections.
    pub projection: u64,
    pub mlp: u64,
    /// 3×3 convolutions of convolutional baselines.
    pub conv: u64,
}

impl TpnCost {
    /// Everything except the reductions; linear in the block count.
    pub fn blocks(&self) -> u64 {
        self.attention + self.pooling + self.projection + self.mlp + self.conv
    }

    pub fn total(&self) -> u64 {
        self.blocks() + self.reduction
    }
}

/// Analytic neck cost for pyramid spatial `shapes` with `in_channels` per level.
pub fn tpn_flops(cfg: &TpnConfig, shapes: [(usize, usize); 3], in_channels: [usize; 3]) -> TpnCost {
    let c = cfg.channels as u64;
    let hidden = cfg.hidden() as u64;
    let sizes = shapes.map(|(h, w)| (h as u64, w as u64));
    let n4 = sizes[1].0 * sizes[1].1;
    let mut cost = TpnCost {
        reduction: sizes
            .iter()
            .zip(in_channels)
            .map(|(&(h, w), ci)| h * w * ci as u64 * c)
            .sum(),
        ..Default::default()
    };
    let attn_layer = |cost: &mut TpnCost, (h, w): (u64, u64), ratio: Option<u64>| {
        let n_kv = match ratio {
            Some(r) => {
                cost.pooling += h * w * c;
                h.div_ceil(r) * w.div_ceil(r)
            }
            None => h * w,
        };
        cost.attention += flops_mha(n4, n_kv, c);
        cost.projection += flops_extra_projections(n4, n_kv, c);
        cost.mlp += flops_mlp(n4, c, hidden);
    };
    let blocks = cfg.blocks as u64;
    match cfg.kind {
        NeckKind::Tpn | NeckKind::TpnNoPool => {
            let pooled = cfg.kind == NeckKind::Tpn;
            for _ in 0..blocks {
                for (i, &r) in cfg.r_cross.iter().enumerate() {
                    attn_layer(&mut cost, sizes[i], pooled.then_some(r as u64));
                }
                for _ in 0..2 {
                    attn_layer(&mut cost, sizes[1], pooled.then_some(cfg.r_self as u64));
                }
            }
        }
        NeckKind::Transformer => {
            for _ in 0..3 * blocks {
                attn_layer(&mut cost, sizes[1], None);
            }
        }
        NeckKind::Conv => cost.conv = 3 * blocks * n4 * 9 * c * c,
        NeckKind::Fpn => cost.conv = 5 * blocks * n4 * 9 * c * c,
        NeckKind::Identity => {}
    }
    cost
}
