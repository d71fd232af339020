//! Latency and multiply-add accounting for one tracking step.
//!
//! Everything here runs on the calling thread. Latency figures are medians
//! over repetitions.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::backbone::{backbone_cost, synthetic_pyramid, Preset};
use crate::bbox::BBox;
use crate::counter::{Category, OpCount, OpCounter};
use crate::error::{Error, Result};
use crate::eval::median;
use crate::head::{hanning2d, postprocess};
use crate::image::CropGeometry;
use crate::model::{Model, ModelConfig};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;
use crate::tpn::{
    tpn_flops, tpn_forward, FeaturePyramid, NeckKind, PyramidVars, TpnConfig, TpnParams,
};

pub const MIN_REPS: usize = 10;

/// Seconds spent in each stage of one search-frame step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub backbone: f64,
    pub tpn: f64,
    pub head: f64,
    pub post: f64,
    /// Wall clock around all four stages.
    pub total: f64,
}

impl StageTimes {
    pub fn stage_sum(&self) -> f64 {
        self.backbone + self.tpn + self.head + self.post
    }

    /// Per-field medians.
    pub fn median_of(samples: &[StageTimes]) -> StageTimes {
        let m = |f: fn(&StageTimes) -> f64| median(&samples.iter().map(f).collect::<Vec<_>>());
        StageTimes {
            backbone: m(|s| s.backbone),
            tpn: m(|s| s.tpn),
            head: m(|s| s.head),
            post: m(|s| s.post),
            total: m(|s| s.total),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub warmup: usize,
    pub reps: usize,
    pub median: StageTimes,
    pub samples: Vec<StageTimes>,
    /// Frames per second at the median total.
    pub fps: f64,
}

impl BenchReport {
    pub fn table(&self) -> String {
        let m = &self.median;
        let mut s = format!("{:<10} {:>12}\n", "stage", "median ms");
        for (name, v) in [
            ("backbone", m.backbone),
            ("tpn", m.tpn),
            ("head", m.head),
            ("post", m.post),
            ("total", m.total),
        ] {
            let _ = writeln!(s, "{name:<10} {:>12.3}", v * 1e3);
        }
        let _ = writeln!(s, "{:<10} {:>12.1}", "fps", self.fps);
        s
    }
}

fn random_crop(res: usize, seed: u64) -> Tensor {
    Tensor::uniform(
        [res, res, 3],
        0.0,
        1.0,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

/// Times `reps` search-frame steps of `model` after `warmup` untimed ones.
/// Inputs are seeded random crops, identical across repetitions.
pub fn benchmark(model: &Model, warmup: usize, reps: usize, seed: u64) -> Result<BenchReport> {
    if reps < MIN_REPS {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_REPS} repetitions, got {reps}"
        )));
    }
    let cfg = &model.cfg;
    let template = model.template_feature(&random_crop(cfg.template_res, seed))?;
    let search = random_crop(cfg.search_res, seed.wrapping_add(1));
    let geom = cfg.score_geometry()?;
    let window = hanning2d(geom.cols, geom.rows);
    let prev = BBox::new(200.0, 150.0, 40.0, 30.0);
    let crop = CropGeometry::around(&prev, cfg.search_context, cfg.search_res)?;

    let mut samples = Vec::with_capacity(reps);
    for rep in 0..warmup + reps {
        let tape = Tape::new();
        let cx = model.ctx(&tape);
        let t0 = Instant::now();
        let pyr = model.pyramid(cx, &search)?;
        let t1 = Instant::now();
        let fused = model.neck_forward(cx, pyr)?;
        let t2 = Instant::now();
        let maps = model
            .head_forward(cx, fused, cx.constant(template.clone()))?
            .to_maps();
        let t3 = Instant::now();
        let sel = postprocess(&maps, &prev, &crop, &geom, &window, &cfg.post)?;
        let t4 = Instant::now();
        std::hint::black_box(sel);
        if rep >= warmup {
            samples.push(StageTimes {
                backbone: (t1 - t0).as_secs_f64(),
                tpn: (t2 - t1).as_secs_f64(),
                head: (t3 - t2).as_secs_f64(),
                post: (t4 - t3).as_secs_f64(),
                total: (t4 - t0).as_secs_f64(),
            });
        }
    }
    let median = StageTimes::median_of(&samples);
    Ok(BenchReport {
        warmup,
        reps,
        fps: 1.0 / median.total,
        median,
        samples,
    })
}

/// Neck latency of two configurations on one shared input pyramid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub label_a: String,
    pub label_b: String,
    pub secs_a: Vec<f64>,
    pub secs_b: Vec<f64>,
    pub median_a: f64,
    pub median_b: f64,
    /// Analytic attention-core multiply-adds.
    pub attention_flops_a: u64,
    pub attention_flops_b: u64,
}

impl PairedReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<24} {:>12} {:>18}\n",
            "config", "median ms", "attention MACs"
        );
        for (l, m, f) in [
            (&self.label_a, self.median_a, self.attention_flops_a),
            (&self.label_b, self.median_b, self.attention_flops_b),
        ] {
            let _ = writeln!(s, "{l:<24} {:>12.3} {f:>18}", m * 1e3);
        }
        s
    }
}

fn neck_label(cfg: &TpnConfig) -> String {
    format!(
        "{} C={} N={} B={} R=({},{},{})",
        cfg.kind,
        cfg.channels,
        cfg.heads,
        cfg.blocks,
        cfg.r_cross[0],
        cfg.r_cross[1],
        cfg.r_cross[2]
    )
}

/// Times the neck alone for two configurations. Repetitions alternate the
/// order (A,B then B,A) so drift affects both sides equally. Both read the
/// same `pyramid`.
pub fn paired_tpn(
    a: &TpnConfig,
    b: &TpnConfig,
    pyramid: &FeaturePyramid,
    reps: usize,
    seed: u64,
) -> Result<PairedReport> {
    if reps < MIN_REPS {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_REPS} repetitions, got {reps}"
        )));
    }
    pyramid.validate()?;
    let shapes = pyramid.shapes();
    let channels = pyramid.channels();
    let build = |cfg: &TpnConfig| -> Result<(ParamStore, TpnParams)> {
        let mut store = ParamStore::new();
        let params = TpnParams::new(&mut store, &mut Init::new(seed), cfg, channels, &[shapes])?;
        Ok((store, params))
    };
    let (store_a, params_a) = build(a)?;
    let (store_b, params_b) = build(b)?;
    let run = |cfg: &TpnConfig, store: &ParamStore, params: &TpnParams| -> Result<f64> {
        let tape = Tape::new();
        let cx = crate::autograd::Ctx::new(&tape, store);
        let t = Instant::now();
        let out = tpn_forward(cx, PyramidVars::constant(cx, pyramid), params, cfg)?;
        let secs = t.elapsed().as_secs_f64();
        std::hint::black_box(out.shape());
        Ok(secs)
    };
    run(a, &store_a, &params_a)?;
    run(b, &store_b, &params_b)?;
    let mut secs_a = Vec::with_capacity(reps);
    let mut secs_b = Vec::with_capacity(reps);
    for rep in 0..reps {
        if rep % 2 == 0 {
            secs_a.push(run(a, &store_a, &params_a)?);
            secs_b.push(run(b, &store_b, &params_b)?);
        } else {
            secs_b.push(run(b, &store_b, &params_b)?);
            secs_a.push(run(a, &store_a, &params_a)?);
        }
    }
    Ok(PairedReport {
        label_a: neck_label(a),
        label_b: neck_label(b),
        median_a: median(&secs_a),
        median_b: median(&secs_b),
        secs_a,
        secs_b,
        attention_flops_a: tpn_flops(a, shapes, channels).attention,
        attention_flops_b: tpn_flops(b, shapes, channels).attention,
    })
}

/// The default pyramid-attention configuration against the same network
/// without pooling (all lateral ratios 1), on a seeded search-size pyramid
/// with shuffle-preset widths.
pub fn default_paired_configs() -> (TpnConfig, TpnConfig, FeaturePyramid) {
    let cfg = ModelConfig::default();
    let pooled = TpnConfig {
        r_cross: [4, 2, 1],
        ..cfg.neck.clone()
    };
    let flat = TpnConfig {
        r_cross: [1, 1, 1],
        ..cfg.neck.clone()
    };
    let pyr = synthetic_pyramid(7, cfg.search_shapes(), cfg.backbone.channels);
    (pooled, flat, pyr)
}

/// Analytic and instrumented multiply-adds of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub stage: String,
    pub analytic: u64,
    pub instrumented: u64,
}

impl FlopsRow {
    pub fn matches(&self) -> bool {
        self.analytic == self.instrumented
    }
}

/// Published figures for a comparable configuration: parameters (M),
/// GFLOPs and CPU FPS. Labels only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFigures {
    pub params_m: f64,
    pub gflops: f64,
    pub fps_cpu: f64,
}

/// (backbone, neck, C, N, B) → published figures.
pub const REFERENCE_TABLE: &[(Preset, NeckKind, usize, usize, usize, ReferenceFigures)] = &[
    (
        Preset::Alex,
        NeckKind::Identity,
        192,
        0,
        0,
        fig(3.94, 5.73, 13.3),
    ),
    (
        Preset::Alex,
        NeckKind::Conv,
        192,
        0,
        2,
        fig(9.62, 8.31, 4.5),
    ),
    (
        Preset::Mobile,
        NeckKind::Identity,
        192,
        0,
        0,
        fig(2.58, 0.95, 43.3),
    ),
    (
        Preset::Mobile,
        NeckKind::Conv,
        192,
        0,
        2,
        fig(5.04, 1.75, 24.3),
    ),
    (
        Preset::Shuffle,
        NeckKind::Identity,
        192,
        0,
        0,
        fig(1.57, 0.6, 48.1),
    ),
    (
        Preset::Shuffle,
        NeckKind::Conv,
        192,
        0,
        2,
        fig(3.56, 1.4, 31.2),
    ),
    (
        Preset::Shuffle,
        NeckKind::Fpn,
        192,
        0,
        2,
        fig(3.85, 1.62, 26.9),
    ),
    (
        Preset::Shuffle,
        NeckKind::Transformer,
        192,
        6,
        2,
        fig(4.24, 1.79, 22.0),
    ),
    (
        Preset::Shuffle,
        NeckKind::TpnNoPool,
        192,
        6,
        2,
        fig(4.84, 2.05, 17.7),
    ),
    (
        Preset::Shuffle,
        NeckKind::Tpn,
        192,
        6,
        1,
        fig(3.92, 1.08, 33.2),
    ),
    (
        Preset::Shuffle,
        NeckKind::Tpn,
        128,
        4,
        2,
        fig(2.7, 0.88, 37.1),
    ),
    (
        Preset::Shuffle,
        NeckKind::Tpn,
        192,
        6,
        2,
        fig(4.24, 1.31, 32.1),
    ),
    (
        Preset::Shuffle,
        NeckKind::Tpn,
        256,
        8,
        2,
        fig(10.77, 3.73, 15.2),
    ),
];

const fn fig(params_m: f64, gflops: f64, fps_cpu: f64) -> ReferenceFigures {
    ReferenceFigures {
        params_m,
        gflops,
        fps_cpu,
    }
}

pub fn reference_figures(cfg: &ModelConfig) -> Option<ReferenceFigures> {
    let n = &cfg.neck;
    let attn = matches!(
        n.kind,
        NeckKind::Tpn | NeckKind::TpnNoPool | NeckKind::Transformer
    );
    REFERENCE_TABLE.iter().find_map(|&(p, k, c, h, b, f)| {
        let same = p == cfg.backbone.preset
            && k == n.kind
            && c == n.channels
            && (!attn || h == n.heads)
            && (k == NeckKind::Identity || b == n.blocks);
        same.then_some(f)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub rows: Vec<FlopsRow>,
    pub params: usize,
    pub reference: Option<ReferenceFigures>,
}

impl FlopsReport {
    pub fn total_analytic(&self) -> u64 {
        self.rows.iter().map(|r| r.analytic).sum()
    }

    pub fn all_match(&self) -> bool {
        self.rows.iter().all(FlopsRow::matches)
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<28} {:>16} {:>16} {:>6}\n",
            "stage", "analytic", "instrumented", "equal"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<28} {:>16} {:>16} {:>6}",
                r.stage,
                r.analytic,
                r.instrumented,
                if r.matches() { "yes" } else { "NO" }
            );
        }
        let _ = writeln!(
            s,
            "{:<28} {:>16.3}",
            "total GMACs",
            self.total_analytic() as f64 / 1e9
        );
        let _ = writeln!(s, "{:<28} {:>16.3}", "params (M)", self.params as f64 / 1e6);
        match self.reference {
            Some(f) => {
                let _ = writeln!(
                    s,
                    "published, real backbone: {:.2} M params, {:.2} GFLOPs, {:.1} FPS (CPU); reference only",
                    f.params_m, f.gflops, f.fps_cpu
                );
            }
            None => s.push_str("no published figures for this configuration\n"),
        }
        s
    }
}

/// Analytic head cost: correlation plus both convolution branches.
pub fn head_flops(
    channels: usize,
    search_feat: (usize, usize),
    template_feat: (usize, usize),
) -> (u64, u64) {
    let c = channels as u64;
    let (th, tw) = (template_feat.0 as u64, template_feat.1 as u64);
    let oh = search_feat.0 as u64 - th + 1;
    let ow = search_feat.1 as u64 - tw + 1;
    let corr = oh * ow * c * th * tw;
    let branch =
        |out: u64| crate::head::BRANCH_BLOCKS as u64 * oh * ow * 9 * c * c + oh * ow * c * out;
    (corr, branch(2) + branch(4))
}

/// Per-stage multiply-adds of one search step plus the template branch,
/// counted both analytically and by running the kernels once.
pub fn flops_report(cfg: &ModelConfig) -> Result<FlopsReport> {
    cfg.validate()?;
    let model = Model::new(cfg.clone())?;
    let mut rows = Vec::new();
    let neck_rows = |rows: &mut Vec<FlopsRow>, branch: &str, res: usize| -> Result<Tensor> {
        let shapes = crate::backbone::pyramid_shapes(&cfg.backbone, res, res);
        let crop = Tensor::full([res, res, 3], 0.5);
        let tape = Tape::new();
        let cx = model.ctx(&tape);
        let (pyr, bb) = OpCounter::measure(|| model.pyramid(cx, &crop));
        rows.push(FlopsRow {
            stage: format!("{branch} backbone"),
            analytic: backbone_cost(&cfg.backbone, res, res)?.mul_adds,
            instrumented: bb.total(),
        });
        let (fused, nk) = OpCounter::measure(|| model.neck_forward(cx, pyr?));
        let a = tpn_flops(&cfg.neck, shapes, cfg.backbone.channels);
        let pairs: [(&str, u64, Category); 5] = [
            ("attention core", a.attention, Category::AttentionCore),
            ("projections", a.projection, Category::Projection),
            ("pooling", a.pooling, Category::Pooling),
            ("mlp", a.mlp, Category::Mlp),
            ("reduction + conv", a.reduction + a.conv, Category::Conv),
        ];
        for (name, analytic, cat) in pairs {
            rows.push(FlopsRow {
                stage: format!("{branch} neck {name}"),
                analytic,
                instrumented: nk.get(cat),
            });
        }
        let other = nk.get(Category::Other) + nk.get(Category::Correlation);
        if other != 0 {
            rows.push(FlopsRow {
                stage: format!("{branch} neck unattributed"),
                analytic: 0,
                instrumented: other,
            });
        }
        Ok(fused?.to_tensor())
    };
    let z = neck_rows(&mut rows, "template", cfg.template_res)?;
    let x = neck_rows(&mut rows, "search", cfg.search_res)?;
    let tape = Tape::new();
    let cx = model.ctx(&tape);
    let (_, hc): (Result<_>, OpCount) = OpCounter::measure(|| {
        model.head_forward(cx, cx.constant(x.clone()), cx.constant(z.clone()))
    });
    let (corr, head) = head_flops(
        cfg.neck.channels,
        (x.shape()[0], x.shape()[1]),
        (z.shape()[0], z.shape()[1]),
    );
    rows.push(FlopsRow {
        stage: "correlation".into(),
        analytic: corr,
        instrumented: hc.get(Category::Correlation),
    });
    rows.push(FlopsRow {
        stage: "head".into(),
        analytic: head,
        instrumented: hc.get(Category::Conv) + hc.get(Category::Other),
    });
    Ok(FlopsReport {
        rows,
        params: model.store.num_scalars(),
        reference: reference_figures(cfg),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reps_honored_and_stages_consistent() {
        let m = Model::new(ModelConfig::toy(8, 2, 1)).unwrap();
        let r = benchmark(&m, 1, 10, 3).unwrap();
        assert_eq!(r.samples.len(), 10);
        for s in &r.samples {
            assert!(s.stage_sum() <= s.total * 1.05);
        }
        assert!(benchmark(&m, 0, 9, 3).is_err());
    }

    #[test]
    fn toy_flops_match() {
        let r = flops_report(&ModelConfig::toy(16, 2, 1)).unwrap();
        assert!(r.all_match(), "{}", r.table());
        assert!(r.reference.is_none());
    }

    #[test]
    fn zero_size_rejected() {
        let mut cfg = ModelConfig::toy(16, 2, 1);
        cfg.neck.channels = 0;
        assert!(flops_report(&cfg).is_err());
        let mut cfg = ModelConfig::toy(16, 2, 1);
        cfg.search_res = 0;
        assert!(flops_report(&cfg).is_err());
    }

    #[test]
    fn reference_lookup() {
        let f = reference_figures(&ModelConfig::default()).unwrap();
        assert_eq!(f.gflops, 1.31);
    }

    #[test]
    fn paired_inputs_are_shared() {
        let a = TpnConfig {
            channels: 8,
            heads: 2,
            blocks: 1,
            ..TpnConfig::default()
        };
        let b = TpnConfig {
            r_cross: [1, 1, 1],
            ..a.clone()
        };
        let pyr = synthetic_pyramid(1, [(16, 16), (8, 8), (4, 4)], [4, 6, 8]);
        let r = paired_tpn(&a, &b, &pyr, 10, 0).unwrap();
        assert_eq!(r.secs_a.len(), 10);
        assert!(r.attention_flops_a < r.attention_flops_b);
    }
}
