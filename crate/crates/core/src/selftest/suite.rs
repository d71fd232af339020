//! Named end-to-end checks, each reporting pass or fail with a short detail
//! line. The command-line `selftest` and the acceptance harness both run
//! these.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    flops_mha, flops_pa, multi_head, pab, pooling_attention, scaled_dot_attention,
    AttentionOptions, AttnScale, MhaParams, PabParams, PoolKind,
};
use crate::autograd::{Ctx, Tape, Var};
use crate::backbone::synthetic_pyramid;
use crate::bbox::BBox;
use crate::bench::{default_paired_configs, paired_tpn};
use crate::counter::{Category, OpCounter};
use crate::error::{Error, Result};
use crate::eval::{one_pass_eval, EvalReport, OracleTracker};
use crate::head::{spatial_norm, ScoreGeometry};
use crate::loss::{assign_labels, total_loss, LossWeights};
use crate::model::{Model, ModelConfig};
use crate::ops::ConvSpec;
use crate::optim::AdamWConfig;
use crate::params::{Init, ParamStore};
use crate::selftest::gradcheck::{
    check_gradients, check_store_gradients, GradCheckOptions, GradReport,
};
use crate::selftest::oracle;
use crate::serialize::{encode_weights, WeightsFile};
use crate::synth::{synth_sequence, SequenceSpec};
use crate::tensor::Tensor;
use crate::tpn::{tpn_block, PyramidVars, TpnConfig, TpnParams};
use crate::tracker::{SiamTracker, Tracker};
use crate::train::{make_pair, overfit_pair, sample_pairs, train_pairs, TOY_PEAK_LR};

pub const GRAD_TOL: f64 = 1e-4;
pub const ORACLE_TOL: f64 = 1e-12;
pub const GRAD_SEEDS: u64 = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub secs: f64,
}

impl Check {
    pub fn line(&self) -> String {
        format!(
            "{} {} ({:.1}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.secs,
            self.detail
        )
    }
}

fn run(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let t = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        name: name.to_string(),
        passed,
        detail,
        secs: t.elapsed().as_secs_f64(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

/// Replaces every parameter with uniform noise so that no gradient path is
/// hidden behind ones and zeros.
fn scramble(store: &mut ParamStore, r: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::uniform(shape, -0.6, 0.6, r);
    }
}

type GradCase = Box<dyn Fn(u64) -> Result<GradReport>>;

fn inputs_case<F>(shapes: &'static [&'static [usize]], f: F) -> GradCase
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Clone + 'static,
{
    Box::new(move |seed| {
        let mut r = rng(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| uniform(s, &mut r)).collect();
        check_gradients(&inputs, seed, f.clone())
    })
}

fn attention_store(
    seed: u64,
    c: usize,
    heads: usize,
    ratio: usize,
) -> Result<(ParamStore, PabParams)> {
    let mut store = ParamStore::new();
    let p = PabParams::new(
        &mut store,
        &mut Init::new(seed),
        "pab",
        c,
        heads,
        2 * c,
        ratio,
    )?;
    scramble(&mut store, &mut rng(seed ^ 0xa5));
    Ok((store, p))
}

/// Every differentiable operation plus the whole tiny model.
pub fn gradient_cases() -> Vec<(&'static str, GradCase)> {
    let conv_zero = ConvSpec::new(1, 1);
    let conv_rep = ConvSpec::replicate(2, 1);
    let mut cases: Vec<(&'static str, GradCase)> = vec![
        (
            "matmul",
            inputs_case(&[&[3, 4], &[4, 5]], |_, v| v[0].matmul(v[1])),
        ),
        (
            "add",
            inputs_case(&[&[3, 4], &[3, 4]], |_, v| v[0].add(v[1])),
        ),
        (
            "sub",
            inputs_case(&[&[3, 4], &[3, 4]], |_, v| v[0].sub(v[1])),
        ),
        (
            "mul",
            inputs_case(&[&[3, 4], &[3, 4]], |_, v| v[0].mul(v[1])),
        ),
        ("scale", inputs_case(&[&[3, 4]], |_, v| v[0].scale(-1.7))),
        (
            "add_bias",
            inputs_case(&[&[3, 4], &[4]], |_, v| v[0].add_bias(v[1])),
        ),
        (
            "linear",
            inputs_case(&[&[3, 4], &[4, 5], &[5]], |_, v| {
                v[0].linear(v[1], Some(v[2]))
            }),
        ),
        ("relu", inputs_case(&[&[4, 5]], |_, v| v[0].relu())),
        ("sigmoid", inputs_case(&[&[4, 5]], |_, v| v[0].sigmoid())),
        (
            "softmax",
            inputs_case(&[&[3, 5]], |_, v| v[0].scale(2.0)?.softmax()),
        ),
        (
            "layer_norm",
            inputs_case(&[&[3, 6], &[6], &[6]], |_, v| {
                v[0].layer_norm(v[1], v[2], 1e-5)
            }),
        ),
        (
            "transpose",
            inputs_case(&[&[3, 4], &[4, 3]], |_, v| v[0].transpose()?.mul(v[1])),
        ),
        (
            "reshape",
            inputs_case(&[&[2, 3, 4], &[6, 4]], |_, v| {
                v[0].flatten_tokens()?.mul(v[1])
            }),
        ),
        (
            "slice_concat",
            inputs_case(&[&[3, 6], &[3, 6]], |_, v| {
                let a = v[0].slice_cols(1, 3)?.mul(v[1].slice_cols(3, 3)?)?;
                Var::concat(&[a, v[0].slice_cols(0, 2)?])
            }),
        ),
        (
            "avg_pool2d",
            inputs_case(&[&[5, 5, 2]], |_, v| v[0].avg_pool2d(2)),
        ),
        (
            "max_pool2d",
            inputs_case(&[&[5, 5, 2]], |_, v| v[0].max_pool2d(2)),
        ),
        (
            "conv2d",
            inputs_case(&[&[5, 5, 2], &[3, 3, 2, 3], &[3]], move |_, v| {
                v[0].conv2d(v[1], Some(v[2]), conv_zero)
            }),
        ),
        (
            "conv2d_stride2_replicate",
            inputs_case(&[&[6, 5, 2], &[3, 3, 2, 2]], move |_, v| {
                v[0].conv2d(v[1], None, conv_rep)
            }),
        ),
        (
            "depthwise_xcorr",
            inputs_case(&[&[6, 6, 2], &[3, 3, 2]], |_, v| v[0].xcorr(v[1])),
        ),
        (
            "resize_nearest",
            inputs_case(&[&[3, 3, 2]], |_, v| v[0].resize_nearest(5, 4)),
        ),
        ("sum", inputs_case(&[&[3, 4]], |_, v| v[0].mul(v[0])?.sum())),
        (
            "mean",
            inputs_case(&[&[3, 4]], |_, v| v[0].mul(v[0])?.mean()),
        ),
    ];

    cases.push((
        "spatial_norm",
        Box::new(|seed| {
            let mut store = ParamStore::new();
            let mut r = rng(seed);
            let x = store.add("x", uniform(&[3, 4, 5], &mut r));
            let shift = store.add("shift", uniform(&[5], &mut r));
            check_store_gradients(
                &store,
                GradCheckOptions {
                    seed,
                    coords_per_param: None,
                },
                |tape, s| {
                    let cx = Ctx::new(tape, s);
                    spatial_norm(cx, cx.p(x), shift)
                },
            )
        }),
    ));
    cases.push((
        "multi_head",
        Box::new(|seed| {
            let (mut store, p) = attention_store(seed, 6, 2, 1)?;
            let mut r = rng(seed);
            let q = store.add("q", uniform(&[4, 6], &mut r));
            let kv = store.add("kv", uniform(&[5, 6], &mut r));
            check_store_gradients(
                &store,
                GradCheckOptions {
                    seed,
                    coords_per_param: None,
                },
                |tape, s| {
                    let cx = Ctx::new(tape, s);
                    multi_head(
                        cx,
                        cx.p(q),
                        cx.p(kv),
                        cx.p(kv),
                        &p.attn,
                        None,
                        AttnScale::PerHead,
                    )
                },
            )
        }),
    ));
    for (name, pool) in [
        ("pooling_attention_avg", PoolKind::Avg),
        ("pooling_attention_max", PoolKind::Max),
    ] {
        cases.push((
            name,
            Box::new(move |seed| {
                let (mut store, p) = attention_store(seed, 4, 2, 2)?;
                let mut r = rng(seed);
                let q = store.add("q", uniform(&[3, 4], &mut r));
                let map = store.add("map", uniform(&[5, 4, 4], &mut r));
                let opts = AttentionOptions {
                    pool,
                    ..Default::default()
                };
                check_store_gradients(
                    &store,
                    GradCheckOptions {
                        seed,
                        coords_per_param: None,
                    },
                    |tape, s| {
                        let cx = Ctx::new(tape, s);
                        pooling_attention(cx, cx.p(q), cx.p(map), cx.p(map), &p.attn, 2, &opts)
                    },
                )
            }),
        ));
    }
    cases.push((
        "pab",
        Box::new(|seed| {
            let (mut store, p) = attention_store(seed, 4, 2, 2)?;
            let mut r = rng(seed);
            let q = store.add("q", uniform(&[3, 4], &mut r));
            let map = store.add("map", uniform(&[4, 4, 4], &mut r));
            let opts = AttentionOptions::default();
            check_store_gradients(
                &store,
                GradCheckOptions {
                    seed,
                    coords_per_param: None,
                },
                |tape, s| {
                    let cx = Ctx::new(tape, s);
                    pab(cx, cx.p(q), cx.p(map), cx.p(map), &p, &opts)
                },
            )
        }),
    ));
    cases.push((
        "tpn_block",
        Box::new(|seed| {
            let cfg = small_tpn(4, 2);
            let shapes = [(6, 6), (3, 3), (2, 2)];
            let mut store = ParamStore::new();
            let params =
                TpnParams::new(&mut store, &mut Init::new(seed), &cfg, [4, 4, 4], &[shapes])?;
            scramble(&mut store, &mut rng(seed ^ 0x77));
            let pyr = synthetic_pyramid(seed, shapes, [4; 3]);
            let ids = [pyr.p3, pyr.p4, pyr.p5].map(|t| store.add(format!("in{}", t.len()), t));
            check_store_gradients(
                &store,
                GradCheckOptions {
                    seed,
                    coords_per_param: Some(4),
                },
                |tape, s| {
                    let cx = Ctx::new(tape, s);
                    let pv = PyramidVars {
                        p3: cx.p(ids[0]),
                        p4: cx.p(ids[1]),
                        p5: cx.p(ids[2]),
                    };
                    Ok(tpn_block(cx, pv, &params.blocks()[0], &cfg)?.p4)
                },
            )
        }),
    ));
    cases.push((
        "losses",
        Box::new(|seed| {
            let geom = ScoreGeometry::new(64, 8, 3)?;
            let mut r = rng(seed);
            let gt = BBox::new(
                r.random_range(24.0..40.0),
                r.random_range(24.0..40.0),
                20.0,
                14.0,
            );
            let labels = assign_labels(&gt, &geom)?;
            let mut store = ParamStore::new();
            let cls = store.add("cls", uniform(&[geom.rows, geom.cols, 2], &mut r));
            let reg = store.add(
                "reg",
                Tensor::uniform([geom.rows, geom.cols, 4], 3.0, 20.0, &mut r),
            );
            let w = LossWeights::default();
            check_store_gradients(
                &store,
                GradCheckOptions {
                    seed,
                    coords_per_param: None,
                },
                |tape, s| {
                    let cx = Ctx::new(tape, s);
                    Ok(total_loss(cx.p(cls), cx.p(reg), &labels, &w)?.total)
                },
            )
        }),
    ));
    cases.push(("tiny_model", Box::new(tiny_model_gradients)));
    cases
}

fn small_tpn(c: usize, heads: usize) -> TpnConfig {
    TpnConfig {
        channels: c,
        heads,
        blocks: 1,
        ..TpnConfig::default()
    }
}

/// Configuration of the tiny model gradient check: C=16, N=2, B=1 on
/// reduced crops so that finite differences stay affordable.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        search_res: 96,
        template_res: 48,
        ..ModelConfig::toy(16, 2, 1)
    }
}

/// Total training loss of the tiny model with respect to a sample of every
/// parameter tensor.
pub fn tiny_model_gradients(seed: u64) -> Result<GradReport> {
    let cfg = ModelConfig {
        seed,
        ..tiny_model_config()
    };
    let model = Model::new(cfg.clone())?;
    let mut r = rng(seed);
    let template = Tensor::uniform([cfg.template_res, cfg.template_res, 3], 0.0, 1.0, &mut r);
    let search = Tensor::uniform([cfg.search_res, cfg.search_res, 3], 0.0, 1.0, &mut r);
    let c = cfg.search_res as f64 / 2.0;
    let gt = BBox::new(
        c + r.random_range(-6.0..6.0),
        c + r.random_range(-6.0..6.0),
        22.0,
        18.0,
    );
    let labels = assign_labels(&gt, &cfg.score_geometry()?)?;
    let w = LossWeights::default();
    check_store_gradients(
        &model.store,
        GradCheckOptions {
            seed,
            coords_per_param: Some(2),
        },
        |tape, s| {
            let cx = Ctx::new(tape, s);
            let out = model.forward_pair(cx, &template, &search)?;
            Ok(total_loss(out.cls, out.reg, &labels, &w)?.total)
        },
    )
}

/// Finite-difference agreement of every gradient case over `seeds` seeds.
pub fn check_gradient_suite(seeds: u64) -> Check {
    run("gradients", || {
        let mut worst: (f64, String) = (0.0, String::new());
        let mut checked = 0;
        let mut retried = 0;
        let mut failures = Vec::new();
        for (name, case) in gradient_cases() {
            for seed in 0..seeds {
                let r = case(seed)?;
                checked += r.checked;
                retried += r.retried;
                if r.max_rel_err >= worst.0 {
                    worst = (r.max_rel_err, format!("{name} seed {seed}"));
                }
                if !(r.max_rel_err < GRAD_TOL) {
                    failures.push(format!(
                        "{name} seed {seed}: {:.2e} at {:?}",
                        r.max_rel_err, r.worst
                    ));
                }
            }
        }
        let mut detail = format!(
            "{} cases x {seeds} seeds, {checked} coordinates ({retried} needed a smaller step), worst rel err {:.2e} ({})",
            gradient_cases().len(),
            worst.0,
            worst.1
        );
        if !failures.is_empty() {
            detail.push_str(&format!("; failing: {}", failures.join(", ")));
        }
        Ok((failures.is_empty(), detail))
    })
}

fn max_err(a: &Tensor, b: &Tensor) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.max_abs_diff(b)
}

/// Optimized kernels and composite blocks against the naive references.
pub fn check_oracles(instances: u64) -> Check {
    run("oracles", || {
        let mut worst: Vec<(&str, f64)> = Vec::new();
        let mut note = |name: &'static str, e: f64| match worst.iter_mut().find(|(n, _)| *n == name)
        {
            Some(w) => w.1 = w.1.max(e),
            None => worst.push((name, e)),
        };
        for seed in 0..instances {
            let mut r = rng(1000 + seed);
            let c = 2 * r.random_range(1..4usize);
            let heads = if c % 4 == 0 { 2 } else { 1 };
            let (h, w) = (r.random_range(3..8usize), r.random_range(3..8usize));
            let ratio = r.random_range(1..4usize);
            let tape = Tape::new();

            let q = uniform(&[r.random_range(1..6), c], &mut r);
            let k = uniform(&[r.random_range(1..7), c], &mut r);
            let v = uniform(&[k.shape()[0], c + 1], &mut r);
            let (got, _) = scaled_dot_attention(
                tape.constant(q.clone()),
                tape.constant(k.clone()),
                tape.constant(v.clone()),
                None,
                0.7,
            )?;
            note(
                "attention",
                max_err(&got.to_tensor(), &oracle::attention(&q, &k, &v, 0.7)),
            );

            let x = uniform(&[h, w, c], &mut r);
            note(
                "avg_pool",
                max_err(
                    &crate::ops::avg_pool2d(&x, ratio)?,
                    &oracle::avg_pool2d(&x, ratio),
                ),
            );
            note(
                "max_pool",
                max_err(
                    &crate::ops::max_pool2d(&x, ratio)?,
                    &oracle::max_pool2d(&x, ratio),
                ),
            );

            let kk = r.random_range(1..4usize);
            let wt = uniform(&[kk, kk, c, 3], &mut r);
            let b = uniform(&[3], &mut r);
            for spec in [
                ConvSpec::new(1, kk / 2),
                ConvSpec::new(2, kk / 2),
                ConvSpec::replicate(1, 1),
                ConvSpec::replicate(2, 1),
            ] {
                note(
                    "conv2d",
                    max_err(
                        &crate::ops::conv2d(&x, &wt, Some(&b), spec)?,
                        &oracle::conv2d(&x, &wt, Some(&b), spec),
                    ),
                );
            }
            let t = uniform(&[kk, kk, c], &mut r);
            note(
                "depthwise_xcorr",
                max_err(
                    &crate::ops::depthwise_xcorr(&x, &t)?,
                    &oracle::depthwise_xcorr(&x, &t),
                ),
            );

            let pool = if seed % 2 == 0 {
                PoolKind::Avg
            } else {
                PoolKind::Max
            };
            let opts = AttentionOptions {
                pool,
                ..Default::default()
            };
            let (store, p) = attention_store(seed, c, heads, ratio)?;
            let cx = Ctx::new(&tape, &store);
            let g = |id| store.get(id);
            let a = &p.attn;
            let pa = pooling_attention(
                cx,
                tape.constant(q.clone()),
                tape.constant(x.clone()),
                tape.constant(x.clone()),
                a,
                ratio,
                &opts,
            )?;
            let pooled = match pool {
                PoolKind::Avg => oracle::avg_pool2d(&x, ratio),
                PoolKind::Max => oracle::max_pool2d(&x, ratio),
            };
            let kv = oracle::flatten(&pooled);
            let scale = opts.scale.factor(c, heads);
            let want = oracle::multi_head(
                &q,
                &kv,
                &kv,
                g(a.wq),
                g(a.wk),
                g(a.wv),
                g(a.wo),
                heads,
                scale,
            );
            note("pooling_attention", max_err(&pa.to_tensor(), &want));
            let mh = multi_head(
                cx,
                tape.constant(q.clone()),
                tape.constant(k.clone()),
                tape.constant(k.clone()),
                a,
                None,
                opts.scale,
            )?;
            let want =
                oracle::multi_head(&q, &k, &k, g(a.wq), g(a.wk), g(a.wv), g(a.wo), heads, scale);
            note("multi_head", max_err(&mh.to_tensor(), &want));
            let got = pab(
                cx,
                tape.constant(q.clone()),
                tape.constant(x.clone()),
                tape.constant(x.clone()),
                &p,
                &opts,
            )?;
            note(
                "pab",
                max_err(&got.to_tensor(), &oracle::pab(&q, &x, &p, &store, &opts)),
            );

            let cfg = TpnConfig {
                r_cross: [ratio, 2, 1],
                attn: opts,
                ..small_tpn(c, heads)
            };
            let shapes = [(2 * h, 2 * w), (h, w), (h.div_ceil(2), w.div_ceil(2))];
            let mut tstore = ParamStore::new();
            let params =
                TpnParams::new(&mut tstore, &mut Init::new(seed), &cfg, [c; 3], &[shapes])?;
            scramble(&mut tstore, &mut rng(seed));
            let pyr = synthetic_pyramid(seed, shapes, [c; 3]);
            let ttape = Tape::new();
            let tcx = Ctx::new(&ttape, &tstore);
            let out = tpn_block(
                tcx,
                PyramidVars::constant(tcx, &pyr),
                &params.blocks()[0],
                &cfg,
            )?;
            let want = oracle::tpn_block(
                &pyr.p3,
                &pyr.p4,
                &pyr.p5,
                &params.blocks()[0],
                &tstore,
                &cfg.attn,
            );
            note("tpn_block", max_err(&out.p4.to_tensor(), &want));
        }
        let bad: Vec<_> = worst.iter().filter(|(_, e)| !(*e <= ORACLE_TOL)).collect();
        let summary: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
        Ok((
            bad.is_empty(),
            format!("{instances} instances; max abs err: {}", summary.join(", ")),
        ))
    })
}

/// Pooling attention at ratio 1 is plain multi-head attention.
pub fn check_pa_identity(configs: u64) -> Check {
    run("pa_identity", || {
        let mut worst: f64 = 0.0;
        for seed in 0..configs {
            let mut r = rng(2000 + seed);
            let heads = r.random_range(1..4usize);
            let c = heads * r.random_range(1..4usize);
            let (h, w) = (r.random_range(1..7usize), r.random_range(1..7usize));
            let pool = if r.random_bool(0.5) {
                PoolKind::Avg
            } else {
                PoolKind::Max
            };
            let scale = if r.random_bool(0.5) {
                AttnScale::PerHead
            } else {
                AttnScale::FullDim
            };
            let opts = AttentionOptions {
                pool,
                scale,
                ..Default::default()
            };
            let mut store = ParamStore::new();
            let p = MhaParams::new(&mut store, &mut Init::new(seed), "mha", c, heads)?;
            let tape = Tape::new();
            let cx = Ctx::new(&tape, &store);
            let q = tape.constant(uniform(&[r.random_range(1..9), c], &mut r));
            let map = tape.constant(uniform(&[h, w, c], &mut r));
            let pa = pooling_attention(cx, q, map, map, &p, 1, &opts)?;
            let tokens = map.flatten_tokens()?;
            let mh = multi_head(cx, q, tokens, tokens, &p, None, scale)?;
            worst = worst.max(max_err(&pa.to_tensor(), &mh.to_tensor()));
        }
        Ok((
            worst <= ORACLE_TOL,
            format!("{configs} configs, max abs diff {worst:.1e}"),
        ))
    })
}

/// Analytic attention cost against counted multiply-adds over the sweep.
pub fn check_cost_model() -> Check {
    run("cost_model", || {
        let example = flops_mha(256, 256, 192);
        let mut points = 0;
        let mut mismatches = Vec::new();
        let side = |n: usize| (n as f64).sqrt() as usize;
        for n_q in [64usize, 256, 1024] {
            for n_kv in [64usize, 256, 1024] {
                for c in [64usize, 192] {
                    let mut store = ParamStore::new();
                    let p = MhaParams::new(&mut store, &mut Init::new(1), "mha", c, 2)?;
                    let mut r = rng((n_q * 31 + n_kv * 7 + c) as u64);
                    let q = uniform(&[n_q, c], &mut r);
                    let kv = uniform(&[n_kv, c], &mut r);
                    let tape = Tape::new();
                    let cx = Ctx::new(&tape, &store);
                    let (res, count) = OpCounter::measure(|| {
                        let kv = tape.constant(kv.clone());
                        multi_head(
                            cx,
                            tape.constant(q.clone()),
                            kv,
                            kv,
                            &p,
                            None,
                            AttnScale::PerHead,
                        )
                    });
                    res?;
                    points += 1;
                    let analytic = flops_mha(n_q as u64, n_kv as u64, c as u64);
                    if count.get(Category::AttentionCore) != analytic {
                        mismatches.push(format!("mha({n_q},{n_kv},{c})"));
                    }
                    let map = Tensor::uniform([side(n_kv), side(n_kv), c], -1.0, 1.0, &mut r);
                    for ratio in [1usize, 2, 4] {
                        let (res, count) = OpCounter::measure(|| {
                            let m = tape.constant(map.clone());
                            pooling_attention(
                                cx,
                                tape.constant(q.clone()),
                                m,
                                m,
                                &p,
                                ratio,
                                &AttentionOptions::default(),
                            )
                        });
                        res?;
                        points += 1;
                        let (h, w) = (side(n_kv) as u64, side(n_kv) as u64);
                        let analytic = flops_pa(n_q as u64, h, w, c as u64, ratio as u64);
                        let counted =
                            count.get(Category::AttentionCore) + count.get(Category::Pooling);
                        if counted != analytic {
                            mismatches.push(format!("pa({n_q},{n_kv},{c},R={ratio})"));
                        }
                    }
                }
            }
        }
        let ok = mismatches.is_empty() && example == 44_040_192;
        Ok((
            ok,
            format!(
                "{points} sweep points exact; flops_mha(256,256,192) = {example}{}",
                if mismatches.is_empty() {
                    String::new()
                } else {
                    format!("; mismatched: {}", mismatches.join(", "))
                }
            ),
        ))
    })
}

/// P3 and P5 leave a fusion block untouched, and both branches read the
/// same neck parameters.
pub fn check_passthrough_and_sharing() -> Check {
    run("passthrough_and_sharing", || {
        let cfg = small_tpn(8, 2);
        let shapes = [(8, 8), (4, 4), (2, 2)];
        let mut store = ParamStore::new();
        let params = TpnParams::new(&mut store, &mut Init::new(3), &cfg, [8; 3], &[shapes])?;
        let pyr = synthetic_pyramid(3, shapes, [8; 3]);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store);
        let out = tpn_block(
            cx,
            PyramidVars::constant(cx, &pyr),
            &params.blocks()[0],
            &cfg,
        )?;
        let exact = out.p3.to_tensor() == pyr.p3
            && out.p5.to_tensor() == pyr.p5
            && out.p4.to_tensor() != pyr.p4;

        let model = Model::new(ModelConfig::toy(8, 2, 1))?;
        let mut r = rng(9);
        let zt = Tensor::uniform([80, 80, 3], 0.0, 1.0, &mut r);
        let xt = Tensor::uniform([256, 256, 3], 0.0, 1.0, &mut r);
        let grads = |which: u8| -> Result<crate::autograd::Gradients> {
            let tape = Tape::new();
            let cx = model.ctx(&tape);
            let z = model.fuse(cx, &zt)?.flatten_tokens()?.sum()?;
            let x = model.fuse(cx, &xt)?.flatten_tokens()?.sum()?;
            let loss = match which {
                0 => z,
                1 => x,
                _ => z.add(x)?,
            };
            tape.backward(loss)
        };
        let (gz, gx, both) = (grads(0)?, grads(1)?, grads(2)?);
        let mut shared = 0;
        let mut broken = Vec::new();
        for (id, p) in model.store.iter() {
            if !p.name.starts_with("neck.") {
                continue;
            }
            let (Some(a), Some(b), Some(s)) = (gz.param(id), gx.param(id), both.param(id)) else {
                broken.push(p.name.clone());
                continue;
            };
            let sum = Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i]);
            if sum.max_abs_diff(s) > 1e-9 * s.max_abs().max(1.0)
                || a.max_abs() == 0.0
                || b.max_abs() == 0.0
            {
                broken.push(p.name.clone());
            }
            shared += 1;
        }
        let ok = exact && broken.is_empty() && shared > 0;
        Ok((
            ok,
            format!(
                "P3/P5 pass-through {}; {shared} neck tensors receive and sum gradients from both branches{}",
                if exact { "exact" } else { "BROKEN" },
                if broken.is_empty() { String::new() } else { format!("; not shared: {}", broken.join(", ")) }
            ),
        ))
    })
}

pub const OVERFIT_STEPS: usize = 500;

/// One synthetic pair, the toy model at C=32, N=2, B=1.
pub fn check_overfit() -> Check {
    run("overfit", || {
        let cfg = ModelConfig::toy(32, 2, 1);
        let seq = synth_sequence(&SequenceSpec::easy(2, 7, 7))?;
        let pair = make_pair(
            &cfg,
            &seq.frames[0],
            &seq.gt[0],
            &seq.frames[1],
            &seq.gt[1],
            None,
        )?;
        let mut model = Model::new(cfg)?;
        let opt = AdamWConfig {
            lr: TOY_PEAK_LR,
            ..Default::default()
        };
        let r = overfit_pair(&mut model, &pair, OVERFIT_STEPS, opt)?;
        let loss = r.final_loss();
        Ok((
            loss < 0.1 && r.final_iou >= 0.7,
            format!(
                "{OVERFIT_STEPS} steps: loss {:.3} -> {loss:.4} (need < 0.1), decoded IoU {:.3} (need >= 0.7)",
                r.losses[0].total, r.final_iou
            ),
        ))
    })
}

pub const TRACK_PAIRS: usize = 20;
pub const TRACK_STEPS: usize = 1000;

/// Toy model trained on [`TRACK_PAIRS`] pairs from one sequence, then run
/// one-pass on a held-out sequence with a different motion seed.
pub fn train_tracking_model() -> Result<Model> {
    let cfg = ModelConfig::toy(32, 2, 1);
    let train = synth_sequence(&SequenceSpec::easy(60, 7, 100))?;
    let pairs = sample_pairs(&cfg, &train, TRACK_PAIRS, 10, 5)?;
    let mut model = Model::new(cfg)?;
    let opt = AdamWConfig {
        lr: TOY_PEAK_LR,
        ..Default::default()
    };
    train_pairs(&mut model, &pairs, TRACK_STEPS, opt, 1)?;
    Ok(model)
}

pub fn check_tracking() -> Check {
    run("tracking", || {
        let model = train_tracking_model()?;
        let test = synth_sequence(&SequenceSpec::easy(100, 7, 200))?;
        let mut tracker = SiamTracker::new(&model)?;
        let r = one_pass_eval(&mut tracker, &test)?;
        let oracle = one_pass_eval(&mut OracleTracker::new(test.gt.clone()), &test)?;
        let ok = r.mean_iou() >= 0.5 && r.auc >= 0.45 && oracle.auc == 1.0 && !r.is_partial();
        Ok((
            ok,
            format!(
                "{TRACK_PAIRS} pairs, {TRACK_STEPS} steps; held-out 100 frames: mean IoU {:.3} (need >= 0.5), AUC {:.3} (need >= 0.45), prec@20 {:.3}; oracle AUC {}",
                r.mean_iou(),
                r.auc,
                r.precision_20px,
                oracle.auc
            ),
        ))
    })
}

pub const PAIRED_REPS: usize = 30;

pub fn check_efficiency() -> Check {
    run("efficiency", || {
        let (pooled, flat, pyr) = default_paired_configs();
        let r = paired_tpn(&pooled, &flat, &pyr, PAIRED_REPS, 0)?;
        let ok = r.attention_flops_a < r.attention_flops_b && r.median_a < r.median_b;
        Ok((
            ok,
            format!(
                "C=192 N=6, {PAIRED_REPS} paired reps: R=(4,2,1) {:.1} ms / {} MACs vs R=(1,1,1) {:.1} ms / {} MACs",
                r.median_a * 1e3,
                r.attention_flops_a,
                r.median_b * 1e3,
                r.attention_flops_b
            ),
        ))
    })
}

/// Largest absolute difference relative to the larger tensor's peak magnitude.
fn rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.max_abs_diff(b) / a.max_abs().max(b.max_abs()).max(f64::MIN_POSITIVE)
}

/// Largest elementwise relative difference, for reporting.
fn rel_diff_elementwise(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

/// Round trip through the weights format, then every corruption class.
pub fn check_serialization() -> Check {
    run("serialization", || {
        let model = Model::new(ModelConfig::toy(16, 2, 1))?;
        let dir = std::env::temp_dir().join(format!("siamtpn-selftest-{}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        let path = dir.join("w.bin");
        crate::serialize::save_weights(&path, &model)?;
        let loaded = crate::serialize::load_model(&path)?;
        let _ = std::fs::remove_dir_all(&dir);

        let mut r = rng(4);
        let zt = Tensor::uniform([80, 80, 3], 0.0, 1.0, &mut r);
        let xt = Tensor::uniform([256, 256, 3], 0.0, 1.0, &mut r);
        let outputs = |m: &Model| -> Result<Vec<Tensor>> {
            let z = m.template_feature(&zt)?;
            let maps = m.score(&xt, &z)?;
            Ok(vec![z, maps.cls, maps.reg])
        };
        let (before, after) = (outputs(&model)?, outputs(&loaded)?);
        let pairs = || before.iter().zip(after.iter());
        let worst = pairs().map(|(a, b)| rel_diff(a, b)).fold(0.0, f64::max);
        let elementwise = pairs()
            .map(|(a, b)| rel_diff_elementwise(a, b))
            .fold(0.0, f64::max);
        let stable = encode_weights(&loaded) == encode_weights(&model);

        let bytes = encode_weights(&model);
        let codes = corruption_codes(&bytes)?;
        let mut distinct = codes.iter().map(|(_, c)| *c).collect::<Vec<_>>();
        distinct.sort();
        distinct.dedup();
        let ok = worst <= 1e-6 && stable && distinct.len() == codes.len() && codes.len() == 8;
        let listed: Vec<String> = codes.iter().map(|(n, c)| format!("{n}={c}")).collect();
        Ok((
            ok,
            format!(
                "output diff {worst:.1e} of peak magnitude (largest single-element ratio {elementwise:.1e}); re-encoding {}; error codes {}",
                if stable { "byte-identical" } else { "DIFFERS" },
                listed.join(" ")
            ),
        ))
    })
}

/// One corrupted variant per failure class and the code it produced.
pub fn corruption_codes(bytes: &[u8]) -> Result<Vec<(&'static str, u32)>> {
    let end = bytes
        .windows(5)
        .position(|w| w == b"\nend\n")
        .ok_or_else(|| Error::InvalidArgument("no manifest terminator".into()))?
        + 5;
    let manifest = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::InvalidArgument("manifest not UTF-8".into()))?;
    let with = |m: String| {
        let mut b = m.into_bytes();
        b.extend_from_slice(&bytes[end..]);
        b
    };
    let parse_code = |b: &[u8]| WeightsFile::parse(b).err().map(|e| e.code());
    let apply_code = |b: &[u8], cfg: ModelConfig| -> Result<Option<u32>> {
        let file = WeightsFile::parse(b)?;
        let mut m = Model::new(cfg)?;
        Ok(file.apply(&mut m).err().map(|e| e.code()))
    };
    let cfg = WeightsFile::parse(bytes)?.model_config()?;
    let first_param = manifest
        .lines()
        .find_map(|l| l.strip_prefix("param ").and_then(|r| r.split(' ').next()))
        .ok_or_else(|| Error::InvalidArgument("no parameters".into()))?
        .to_string();
    let mut flipped = bytes.to_vec();
    *flipped.last_mut().expect("non-empty payload") ^= 0x01;
    let mut wider = cfg.clone();
    wider.neck.channels *= 2;
    let mut reshaped = Model::new(cfg.clone())?;
    let id = reshaped.store.ids().next().expect("parameters");
    let n = reshaped.store.get(id).len();
    *reshaped.store.get_mut(id) = Tensor::zeros([n]);

    let found = vec![
        (
            "magic",
            parse_code(&with(manifest.replacen("siamtpn", "siamxxx", 1))),
        ),
        (
            "version",
            parse_code(&with(manifest.replacen("version 1", "version 2", 1))),
        ),
        (
            "manifest",
            parse_code(&with(manifest.replacen("payload ", "payload x", 1))),
        ),
        ("config", apply_code(bytes, wider)?),
        (
            "shape",
            WeightsFile::parse(bytes)?
                .apply(&mut reshaped)
                .err()
                .map(|e| e.code()),
        ),
        (
            "missing",
            apply_code(
                &with(manifest.replacen(&format!("param {first_param} "), "param renamed ", 1)),
                cfg,
            )?,
        ),
        ("truncated", parse_code(&bytes[..bytes.len() - 3])),
        ("checksum", parse_code(&flipped)),
    ];
    found
        .into_iter()
        .map(|(n, c)| {
            c.map(|c| (n, c))
                .ok_or_else(|| Error::InvalidArgument(format!("corruption `{n}` was accepted")))
        })
        .collect()
}

/// Scripted predictions for the metrics fixture.
struct Scripted(Vec<BBox>, usize);

impl Tracker for Scripted {
    fn init(&mut self, _: &Tensor, _: BBox) -> Result<()> {
        self.1 = 0;
        Ok(())
    }
    fn update(&mut self, _: &Tensor) -> Result<(BBox, f64)> {
        self.1 += 1;
        Ok((self.0[self.1 - 1], 1.0))
    }
}

/// Five frames, four of them scored, with IoUs 1, 1/3, 1/2, 0 and center
/// errors 0, 5, 2.5, 30 px. By hand the success curve is 1 at threshold 0,
/// 3/4 up to 0.30, 1/2 up to 0.50 and 1/4 above; its trapezoid area is
/// 9.375/20 and precision at 20 px is 3/4.
pub fn check_metrics_fixture() -> Check {
    run("metrics", || {
        let gt = vec![BBox::from_xywh(0.0, 0.0, 10.0, 10.0); 5];
        let preds = vec![
            BBox::from_xywh(0.0, 0.0, 10.0, 10.0),
            BBox::from_xywh(5.0, 0.0, 10.0, 10.0),
            BBox::from_xywh(0.0, 0.0, 5.0, 10.0),
            BBox::from_xywh(30.0, 0.0, 10.0, 10.0),
        ];
        let seq = crate::synth::Sequence {
            name: "fixture".into(),
            frames: vec![Tensor::zeros([4, 4, 3]); 5],
            gt,
        };
        let r: EvalReport = one_pass_eval(&mut Scripted(preds, 0), &seq)?;
        let mut curve = vec![1.0];
        curve.extend([0.75; 6]);
        curve.extend([0.5; 4]);
        curve.extend([0.25; 10]);
        let curve_err = r
            .success
            .iter()
            .zip(&curve)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let auc_err = (r.auc - 9.375 / 20.0).abs();
        let ious = [1.0, 1.0 / 3.0, 0.5, 0.0];
        let iou_err = r
            .ious
            .iter()
            .zip(ious)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let ok = r.success.len() == 21
            && curve_err <= ORACLE_TOL
            && auc_err <= ORACLE_TOL
            && iou_err <= ORACLE_TOL
            && r.precision_20px == 0.75;
        Ok((
            ok,
            format!(
                "AUC {:.6} (hand 0.468750, err {auc_err:.1e}); curve err {curve_err:.1e}; precision {} (hand 0.75)",
                r.auc, r.precision_20px
            ),
        ))
    })
}

/// Checks that finish in seconds.
pub fn quick_suite() -> Vec<Check> {
    vec![
        check_gradient_suite(GRAD_SEEDS),
        check_oracles(20),
        check_pa_identity(20),
        check_cost_model(),
        check_passthrough_and_sharing(),
        check_serialization(),
        check_metrics_fixture(),
    ]
}

/// Everything, including the training and timing checks.
pub fn full_suite() -> Vec<Check> {
    let mut v = quick_suite();
    v.push(check_overfit());
    v.push(check_tracking());
    v.push(check_efficiency());
    v
}
