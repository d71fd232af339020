//! The Siamese network: a shared backbone and neck applied to template and
//! search crops, depth-wise correlation, and the prediction head.

use serde::{Deserialize, Serialize};

use crate::attention::pooling_attention_with_weights;
use crate::autograd::{Ctx, Tape, Var};
use crate::backbone::{pyramid_shapes, Backbone, BackboneConfig, Preset};
use crate::error::{Error, Result};
use crate::head::{
    correlate, head_forward, HeadParams, PostprocessConfig, ScoreGeometry, ScoreMaps, ScoreVars,
};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;
use crate::tpn::{reduce_and_flatten, tpn_forward, NeckKind, PyramidVars, TpnConfig, TpnParams};

pub const SEARCH_RES: usize = 256;
pub const TEMPLATE_RES: usize = 80;
/// Crop side over `√(w·h)` of the target box.
pub const SEARCH_CONTEXT: f64 = 4.0;
pub const TEMPLATE_CONTEXT: f64 = 1.5;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub neck: TpnConfig,
    pub search_res: usize,
    pub template_res: usize,
    pub search_context: f64,
    pub template_context: f64,
    pub post: PostprocessConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::preset(Preset::Shuffle),
            neck: TpnConfig::default(),
            search_res: SEARCH_RES,
            template_res: TEMPLATE_RES,
            search_context: SEARCH_CONTEXT,
            template_context: TEMPLATE_CONTEXT,
            post: PostprocessConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration trainable in minutes on one core.
    pub fn toy(channels: usize, heads: usize, blocks: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig::preset(Preset::Toy),
            neck: TpnConfig {
                channels,
                heads,
                blocks,
                ..TpnConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.neck.validate()?;
        self.post.validate()?;
        if self.template_res < 32 || self.search_res <= self.template_res {
            return Err(Error::Config(format!(
                "need 32 <= template_res < search_res, got {} and {}",
                self.template_res, self.search_res
            )));
        }
        if !(self.search_context > 0.0 && self.template_context > 0.0) {
            return Err(Error::Config(
                "crop context factors must be positive".into(),
            ));
        }
        self.score_geometry().map(|_| ())
    }

    pub fn search_shapes(&self) -> [(usize, usize); 3] {
        pyramid_shapes(&self.backbone, self.search_res, self.search_res)
    }

    pub fn template_shapes(&self) -> [(usize, usize); 3] {
        pyramid_shapes(&self.backbone, self.template_res, self.template_res)
    }

    pub fn score_geometry(&self) -> Result<ScoreGeometry> {
        ScoreGeometry::new(
            self.search_res,
            self.search_shapes()[1].0,
            self.template_shapes()[1].0,
        )
    }

    /// `key = value` pairs describing the architecture; parameter shapes are
    /// a function of these alone.
    pub fn echo(&self) -> Vec<(String, String)> {
        let b = &self.backbone;
        let n = &self.neck;
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        vec![
            ("backbone".into(), b.preset.name().into()),
            ("backbone_channels".into(), list(&b.channels)),
            ("stem_channels".into(), b.stem_channels.to_string()),
            ("stem_layers".into(), b.stem_layers.to_string()),
            ("stage_layers".into(), b.stage_layers.to_string()),
            ("neck".into(), n.kind.name().into()),
            ("channels".into(), n.channels.to_string()),
            ("heads".into(), n.heads.to_string()),
            ("blocks".into(), n.blocks.to_string()),
            ("r_cross".into(), list(&n.r_cross)),
            ("r_self".into(), n.r_self.to_string()),
            ("mlp_ratio".into(), n.mlp_ratio.to_string()),
            ("search_res".into(), self.search_res.to_string()),
            ("template_res".into(), self.template_res.to_string()),
        ]
    }
}

/// Keeps the image range centered at zero.
fn normalize(crop: &Tensor) -> Tensor {
    crop.map(|v| v - 0.5)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub neck: TpnParams,
    pub head: HeadParams,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(cfg.seed);
        let backbone = Backbone::new(&mut store, &mut init, &cfg.backbone)?;
        let neck = TpnParams::new(
            &mut store,
            &mut init,
            &cfg.neck,
            cfg.backbone.channels,
            &[cfg.search_shapes(), cfg.template_shapes()],
        )?;
        let head = HeadParams::new(
            &mut store,
            &mut init,
            cfg.neck.channels,
            cfg.search_res as f64,
        );
        Ok(Model {
            cfg,
            store,
            backbone,
            neck,
            head,
        })
    }

    pub fn ctx<'t>(&'t self, tape: &'t Tape) -> Ctx<'t> {
        Ctx::new(tape, &self.store)
    }

    pub fn pyramid<'t>(&self, cx: Ctx<'t>, crop: &Tensor) -> Result<PyramidVars<'t>> {
        self.backbone.forward(cx, cx.constant(normalize(crop)))
    }

    pub fn neck_forward<'t>(&self, cx: Ctx<'t>, pyr: PyramidVars<'t>) -> Result<Var<'t>> {
        tpn_forward(cx, pyr, &self.neck, &self.cfg.neck)
    }

    /// Backbone and neck: the fused `[h4, w4, C]` map of a crop.
    pub fn fuse<'t>(&self, cx: Ctx<'t>, crop: &Tensor) -> Result<Var<'t>> {
        let pyr = self.pyramid(cx, crop)?;
        self.neck_forward(cx, pyr)
    }

    pub fn head_forward<'t>(
        &self,
        cx: Ctx<'t>,
        search: Var<'t>,
        template: Var<'t>,
    ) -> Result<ScoreVars<'t>> {
        head_forward(cx, correlate(search, template)?, &self.head)
    }

    /// Both branches on one tape with the same parameters.
    pub fn forward_pair<'t>(
        &self,
        cx: Ctx<'t>,
        template: &Tensor,
        search: &Tensor,
    ) -> Result<ScoreVars<'t>> {
        let z = self.fuse(cx, template)?;
        let x = self.fuse(cx, search)?;
        self.head_forward(cx, x, z)
    }

    /// Fused template feature, computed once per target.
    pub fn template_feature(&self, template: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.fuse(self.ctx(&tape), template)?.to_tensor())
    }

    pub fn score(&self, search: &Tensor, template_feature: &Tensor) -> Result<ScoreMaps> {
        let tape = Tape::new();
        let cx = self.ctx(&tape);
        let z = cx.constant(template_feature.clone());
        let x = self.fuse(cx, search)?;
        Ok(self.head_forward(cx, x, z)?.to_maps())
    }

    /// Attention of the central P4 query over whole P3, P4 and P5 in the
    /// first fusion block, averaged over heads. Each map has its key level's
    /// spatial extent; rows sum to one.
    pub fn lateral_attention(&self, search: &Tensor) -> Result<[Tensor; 3]> {
        if !matches!(self.cfg.neck.kind, NeckKind::Tpn | NeckKind::TpnNoPool) {
            return Err(Error::Config(format!(
                "attention export needs a pyramid-attention neck, not `{}`",
                self.cfg.neck.kind
            )));
        }
        let tape = Tape::new();
        let cx = self.ctx(&tape);
        let pyr = reduce_and_flatten(cx, self.pyramid(cx, search)?, &self.neck)?;
        let p4 = pyr.p4.shape();
        let (h4, w4) = (p4[0], p4[1]);
        let q = pyr.p4.flatten_tokens()?;
        let centre = (h4 / 2) * w4 + w4 / 2;
        let block = &self.neck.blocks()[0];
        let mut maps = Vec::with_capacity(3);
        for (map, pab) in pyr.levels().into_iter().zip(&block.cross) {
            let s = map.shape();
            let (_, heads) =
                pooling_attention_with_weights(cx, q, map, map, &pab.attn, 1, &self.cfg.neck.attn)?;
            let n = s[0] * s[1];
            let mut row = vec![0.0; n];
            for w in &heads {
                let w = w.value();
                for (r, v) in row.iter_mut().zip(&w.data()[centre * n..(centre + 1) * n]) {
                    *r += v / heads.len() as f64;
                }
            }
            maps.push(Tensor::new([s[0], s[1]], row)?);
        }
        Ok(maps.try_into().expect("three levels"))
    }
}

/// Min-max normalization to `[0, 1]`; a constant map becomes all zeros.
pub fn min_max_normalize(t: &Tensor) -> Tensor {
    let lo = t.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span <= f64::EPSILON * hi.abs().max(1.0) {
        Tensor::zeros(t.shape())
    } else {
        t.map(|v| (v - lo) / span)
    }
}

/// Serializable summary of a model's size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub params: usize,
    pub tensors: usize,
}

impl Model {
    pub fn summary(&self) -> ModelSummary {
        ModelSummary {
            params: self.store.num_scalars(),
            tensors: self.store.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_shapes() {
        let cfg = ModelConfig::toy(16, 2, 1);
        let g = cfg.score_geometry().unwrap();
        assert_eq!((g.rows, g.cols, g.stride, g.offset), (12, 12, 16.0, 2.0));
        let m = Model::new(cfg).unwrap();
        let z = m.template_feature(&Tensor::full([80, 80, 3], 0.4)).unwrap();
        assert_eq!(z.shape(), &[5, 5, 16]);
        let maps = m.score(&Tensor::full([256, 256, 3], 0.4), &z).unwrap();
        assert_eq!(maps.dims().unwrap(), (12, 12));
    }

    #[test]
    fn shared_parameters_accumulate_both_branches() {
        let m = Model::new(ModelConfig::toy(8, 2, 1)).unwrap();
        let zt = Tensor::from_fn([80, 80, 3], |i| (i % 7) as f64 / 7.0);
        let xt = Tensor::from_fn([256, 256, 3], |i| (i % 11) as f64 / 11.0);
        let grads = |which: u8| {
            let tape = Tape::new();
            let cx = m.ctx(&tape);
            let z = m
                .fuse(cx, &zt)
                .unwrap()
                .flatten_tokens()
                .unwrap()
                .sum()
                .unwrap();
            let x = m
                .fuse(cx, &xt)
                .unwrap()
                .flatten_tokens()
                .unwrap()
                .sum()
                .unwrap();
            let loss = match which {
                0 => z,
                1 => x,
                _ => z.add(x).unwrap(),
            };
            let id = m.neck.reduce[1];
            tape.backward(loss).unwrap().param(id).unwrap().clone()
        };
        let (a, b, both) = (grads(0), grads(1), grads(2));
        let sum = Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i]);
        assert!(sum.max_abs_diff(&both) < 1e-9 * both.max_abs().max(1.0));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ModelConfig::toy(16, 3, 1);
        assert!(Model::new(cfg.clone()).is_err());
        cfg.neck.heads = 2;
        cfg.template_res = 300;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn normalization_of_constant_map_is_zero() {
        assert_eq!(min_max_normalize(&Tensor::full([3, 3], 0.2)).max_abs(), 0.0);
        let t = min_max_normalize(&Tensor::new([3], vec![1.0, 3.0, 2.0]).unwrap());
        assert_eq!(t.data(), &[0.0, 1.0, 0.5]);
    }
}
