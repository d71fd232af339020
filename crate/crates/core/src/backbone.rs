//! Toy convolutional pyramid extractor.
//!
//! A stride-4 stem (two stride-2 convolutions, then optional stride-1 ones)
//! followed by three stages whose first convolution halves the resolution.
//! The stage outputs are the stride 8/16/32 pyramid. Every convolution is
//! 3×3 with edge-replicating padding, so spatial extents round up:
//! 80 → 10/5/3 and 256 → 32/16/8. The first convolution is frozen.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Ctx, Var};
use crate::counter::{in_category, Category};
use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::tpn::{FeaturePyramid, PyramidVars};

pub const MIN_INPUT: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Stage widths of AlexNet's last three layers.
    Alex,
    /// Stage widths of MobileNetV2 at strides 8/16/32.
    Mobile,
    /// Stage widths of ShuffleNetV2 at strides 8/16/32.
    Shuffle,
    /// Narrow widths for desk-scale training.
    Toy,
    Custom,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Alex => "alex",
            Preset::Mobile => "mobile",
            Preset::Shuffle => "shuffle",
            Preset::Toy => "toy",
            Preset::Custom => "custom",
        }
    }

    /// Published parameter count (millions) and GFLOPs at 256×256 of the real
    /// network the preset borrows its widths from.
    pub fn reference_cost(self) -> Option<(f64, f64)> {
        match self {
            Preset::Alex => Some((3.1, 4.33)),
            Preset::Mobile => Some((1.81, 0.39)),
            Preset::Shuffle => Some((0.8, 0.16)),
            _ => None,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            Preset::Alex,
            Preset::Mobile,
            Preset::Shuffle,
            Preset::Toy,
            Preset::Custom,
        ]
        .into_iter()
        .find(|p| p.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown backbone preset `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub preset: Preset,
    /// Output widths of P3, P4, P5.
    pub channels: [usize; 3],
    pub stem_channels: usize,
    pub stem_layers: usize,
    pub stage_layers: usize,
}

impl BackboneConfig {
    pub fn preset(preset: Preset) -> Self {
        let (channels, stem) = match preset {
            Preset::Alex => ([384, 384, 256], 24),
            Preset::Mobile => ([32, 96, 320], 24),
            Preset::Shuffle | Preset::Custom => ([116, 232, 464], 24),
            Preset::Toy => ([16, 24, 32], 8),
        };
        BackboneConfig {
            preset,
            channels,
            stem_channels: stem,
            stem_layers: 2,
            stage_layers: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_layers < 2 {
            return Err(Error::Config(format!(
                "the stem needs at least 2 layers to reach stride 4, got {}",
                self.stem_layers
            )));
        }
        if self.stage_layers == 0 {
            return Err(Error::Config("each stage needs at least one layer".into()));
        }
        if self.stem_channels == 0 || self.channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// `(in, out, stride)` of every convolution, and which layers emit P3..P5.
    fn layout(&self) -> (Vec<(usize, usize, usize)>, [usize; 3]) {
        let mut layers = Vec::new();
        let mut cin = 3;
        for i in 0..self.stem_layers {
            layers.push((cin, self.stem_channels, if i < 2 { 2 } else { 1 }));
            cin = self.stem_channels;
        }
        let mut taps = [0; 3];
        for (s, &cout) in self.channels.iter().enumerate() {
            for i in 0..self.stage_layers {
                layers.push((cin, cout, if i == 0 { 2 } else { 1 }));
                cin = cout;
            }
            taps[s] = layers.len() - 1;
        }
        (layers, taps)
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::preset(Preset::Toy)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    cfg: BackboneConfig,
    layers: Vec<ConvLayer>,
    taps: [usize; 3],
}

impl Backbone {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let (layout, taps) = cfg.layout();
        let layers: Vec<ConvLayer> = layout
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, stride))| ConvLayer {
                weight: store.add(format!("backbone.conv{i}.w"), init.conv(3, cin, cout)),
                bias: store.add(format!("backbone.conv{i}.b"), Tensor::zeros([cout])),
                stride,
            })
            .collect();
        store.freeze(layers[0].weight);
        store.freeze(layers[0].bias);
        Ok(Backbone {
            cfg: cfg.clone(),
            layers,
            taps,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Extracts the pyramid from an `[H, W, 3]` image.
    pub fn forward<'t>(&self, cx: Ctx<'t>, image: Var<'t>) -> Result<PyramidVars<'t>> {
        let shape = image.shape();
        match shape[..] {
            [h, w, 3] if h >= MIN_INPUT && w >= MIN_INPUT => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "backbone input must be [H, W, 3] with H, W >= {MIN_INPUT}, got {shape:?}"
                )))
            }
        }
        in_category(Category::Conv, || {
            let mut x = image;
            let mut outs = Vec::with_capacity(3);
            for (i, layer) in self.layers.iter().enumerate() {
                let spec = ConvSpec::replicate(layer.stride, 1);
                x = x
                    .conv2d(cx.p(layer.weight), Some(cx.p(layer.bias)), spec)?
                    .relu()?;
                if self.taps.contains(&i) {
                    outs.push(x);
                }
            }
            Ok(PyramidVars {
                p3: outs[0],
                p4: outs[1],
                p5: outs[2],
            })
        })
    }

    /// Spatial extents of the pyramid for an `h×w` input.
    pub fn output_shapes(&self, h: usize, w: usize) -> [(usize, usize); 3] {
        pyramid_shapes(&self.cfg, h, w)
    }
}

pub fn pyramid_shapes(cfg: &BackboneConfig, h: usize, w: usize) -> [(usize, usize); 3] {
    let (layout, taps) = cfg.layout();
    let mut shapes = [(0, 0); 3];
    let (mut h, mut w) = (h, w);
    for (i, &(_, _, stride)) in layout.iter().enumerate() {
        if stride == 2 {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        if let Some(level) = taps.iter().position(|&t| t == i) {
            shapes[level] = (h, w);
        }
    }
    shapes
}

/// Parameter count and forward multiply-adds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneCost {
    pub params: u64,
    pub mul_adds: u64,
}

/// Analytic cost of the toy backbone on an `h×w` input.
pub fn backbone_cost(cfg: &BackboneConfig, h: usize, w: usize) -> Result<BackboneCost> {
    cfg.validate()?;
    let (layout, _) = cfg.layout();
    let (mut h, mut w) = (h as u64, w as u64);
    let mut cost = BackboneCost {
        params: 0,
        mul_adds: 0,
    };
    for (cin, cout, stride) in layout {
        let (cin, cout) = (cin as u64, cout as u64);
        if stride == 2 {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        cost.params += 9 * cin * cout + cout;
        cost.mul_adds += h * w * cout * 9 * cin;
    }
    Ok(cost)
}

/// Deterministic pseudo-random pyramid for tests and benchmarks.
pub fn synthetic_pyramid(
    seed: u64,
    shapes: [(usize, usize); 3],
    channels: [usize; 3],
) -> FeaturePyramid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut level =
        |i: usize| Tensor::uniform([shapes[i].0, shapes[i].1, channels[i]], -1.0, 1.0, &mut rng);
    FeaturePyramid {
        p3: level(0),
        p4: level(1),
        p5: level(2),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::counter::OpCounter;

    fn build(cfg: &BackboneConfig) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &mut Init::new(0), cfg).unwrap();
        (store, bb)
    }

    fn extents(p: &PyramidVars<'_>) -> Vec<Vec<usize>> {
        p.levels().iter().map(|v| v.shape()).collect()
    }

    #[test]
    fn search_and_template_pyramid_shapes() {
        let (store, bb) = build(&BackboneConfig::default());
        for (size, want) in [(256, [32, 16, 8]), (80, [10, 5, 3])] {
            let tape = Tape::new();
            let cx = Ctx::new(&tape, &store);
            let img = tape.constant(Tensor::full([size, size, 3], 0.3));
            let pyr = bb.forward(cx, img).unwrap();
            let e = extents(&pyr);
            for (i, c) in [16, 24, 32].iter().enumerate() {
                assert_eq!(e[i], vec![want[i], want[i], *c]);
            }
            assert_eq!(bb.output_shapes(size, size), want.map(|n| (n, n)));
        }
    }

    #[test]
    fn zero_image_gives_finite_features() {
        let (store, bb) = build(&BackboneConfig::default());
        let tape = Tape::new();
        let pyr = bb
            .forward(
                Ctx::new(&tape, &store),
                tape.constant(Tensor::zeros([64, 48, 3])),
            )
            .unwrap();
        assert!(pyr.levels().iter().all(|v| v.value().is_finite()));
    }

    #[test]
    fn undersized_input_rejected() {
        let (store, bb) = build(&BackboneConfig::default());
        let tape = Tape::new();
        let r = bb.forward(
            Ctx::new(&tape, &store),
            tape.constant(Tensor::zeros([31, 64, 3])),
        );
        assert!(r.is_err());
    }

    #[test]
    fn analytic_cost_matches_counter() {
        for preset in [Preset::Toy, Preset::Mobile] {
            let cfg = BackboneConfig::preset(preset);
            let (store, bb) = build(&cfg);
            let (_, count) = OpCounter::measure(|| {
                let tape = Tape::new();
                bb.forward(
                    Ctx::new(&tape, &store),
                    tape.constant(Tensor::zeros([96, 80, 3])),
                )
                .unwrap();
            });
            let cost = backbone_cost(&cfg, 96, 80).unwrap();
            assert_eq!(count.get(Category::Conv), cost.mul_adds);
            assert_eq!(store.num_scalars() as u64, cost.params);
        }
    }

    #[test]
    fn doubling_widths_roughly_quadruples_cost() {
        let cfg = BackboneConfig::preset(Preset::Shuffle);
        let wide = BackboneConfig {
            channels: cfg.channels.map(|c| 2 * c),
            stem_channels: 2 * cfg.stem_channels,
            ..cfg.clone()
        };
        let a = backbone_cost(&cfg, 256, 256).unwrap().mul_adds as f64;
        let b = backbone_cost(&wide, 256, 256).unwrap().mul_adds as f64;
        assert!((b / a - 4.0).abs() < 0.1, "ratio {}", b / a);
    }

    #[test]
    fn degenerate_stems_rejected() {
        for layers in [0, 1] {
            let cfg = BackboneConfig {
                stem_layers: layers,
                ..Default::default()
            };
            assert!(backbone_cost(&cfg, 256, 256).is_err());
        }
    }

    #[test]
    fn first_layer_is_frozen() {
        let (store, _) = build(&BackboneConfig::default());
        let frozen: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.frozen)
            .map(|(_, p)| p.name.clone())
            .collect();
        assert_eq!(frozen, ["backbone.conv0.w", "backbone.conv0.b"]);
    }

    #[test]
    fn synthetic_pyramid_is_seeded() {
        let shapes = [(10, 10), (5, 5), (3, 3)];
        let a = synthetic_pyramid(0, shapes, [4, 5, 6]);
        assert_eq!(a, synthetic_pyramid(0, shapes, [4, 5, 6]));
        assert_ne!(a, synthetic_pyramid(1, shapes, [4, 5, 6]));
        assert_eq!(a.shapes(), shapes);
        assert_eq!(a.channels(), [4, 5, 6]);
    }

    #[test]
    fn strides_hold_for_odd_sizes() {
        let cfg = BackboneConfig::default();
        for n in [32, 33, 47, 80, 99, 256] {
            let [s3, s4, s5] = pyramid_shapes(&cfg, n, n + 3);
            assert_eq!(s3.0, n.div_ceil(8));
            assert_eq!(s4.0, s3.0.div_ceil(2));
            assert_eq!(s5.1, s4.1.div_ceil(2));
        }
    }
}
