//! Desk-scale training on synthetic template/search pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::bbox::{iou, BBox};
use crate::error::{Error, Result};
use crate::head::argmax2d;
use crate::image::{crop_and_resize, CropGeometry};
use crate::loss::{assign_labels, total_loss, LossWeights};
use crate::model::{Model, ModelConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::synth::Sequence;
use crate::tensor::Tensor;

/// Peak learning rate of the cosine schedule used for toy training.
pub const TOY_PEAK_LR: f64 = 3e-3;

/// Largest center shift of a jittered search crop, as a fraction of its side.
pub const CENTER_JITTER: f64 = 0.08;
pub const SCALE_JITTER: (f64, f64) = (0.9, 1.1);

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub template: Tensor,
    pub search: Tensor,
    /// Target in search-crop pixels.
    pub gt: BBox,
}

/// Crops a pair. With `jitter`, the search crop center moves by up to
/// [`CENTER_JITTER`] of the crop side and its side scales by [`SCALE_JITTER`].
pub fn make_pair(
    cfg: &ModelConfig,
    template_frame: &Tensor,
    template_box: &BBox,
    search_frame: &Tensor,
    search_box: &BBox,
    jitter: Option<&mut ChaCha8Rng>,
) -> Result<TrainingPair> {
    let zg = CropGeometry::around(template_box, cfg.template_context, cfg.template_res)?;
    let mut xg = CropGeometry::around(search_box, cfg.search_context, cfg.search_res)?;
    if let Some(rng) = jitter {
        let j = CENTER_JITTER * xg.side;
        xg.cx += rng.random_range(-j..=j);
        xg.cy += rng.random_range(-j..=j);
        xg.side *= rng.random_range(SCALE_JITTER.0..=SCALE_JITTER.1);
    }
    Ok(TrainingPair {
        template: crop_and_resize(template_frame, &zg)?,
        search: crop_and_resize(search_frame, &xg)?,
        gt: xg.box_to_crop(search_box),
    })
}

/// Pairs drawn from one sequence: the template from a random frame, the
/// search crop from a frame at most `max_gap` frames away, both jittered.
pub fn sample_pairs(
    cfg: &ModelConfig,
    seq: &Sequence,
    n: usize,
    max_gap: usize,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    if seq.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot sample pairs from an empty sequence".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let z = rng.random_range(0..seq.len());
            let lo = z.saturating_sub(max_gap);
            let hi = (z + max_gap).min(seq.len() - 1);
            let x = rng.random_range(lo..=hi);
            make_pair(
                cfg,
                &seq.frames[z],
                &seq.gt[z],
                &seq.frames[x],
                &seq.gt[x],
                Some(&mut rng),
            )
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub total: f64,
    pub cls: f64,
    pub giou: f64,
    pub l1: f64,
}

/// Loss of `pair`, plus gradients when an optimizer is given.
fn step(
    model: &mut Model,
    pair: &TrainingPair,
    w: &LossWeights,
    opt: Option<&mut AdamW>,
) -> Result<StepStats> {
    let geom = model.cfg.score_geometry()?;
    let labels = assign_labels(&pair.gt, &geom)?;
    let grads = {
        let tape = Tape::new();
        let cx = model.ctx(&tape);
        let s = model.forward_pair(cx, &pair.template, &pair.search)?;
        let terms = total_loss(s.cls, s.reg, &labels, w)?;
        let stats = StepStats {
            total: terms.total.item()?,
            cls: terms.cls,
            giou: terms.giou,
            l1: terms.l1,
        };
        if !stats.total.is_finite() {
            return Err(Error::NonFinite {
                op: "training loss",
            });
        }
        if opt.is_none() {
            return Ok(stats);
        }
        (tape.backward(terms.total)?, stats)
    };
    let (grads, stats) = grads;
    opt.expect("checked above").step(&mut model.store, &grads)?;
    Ok(stats)
}

pub fn evaluate_loss(model: &mut Model, pair: &TrainingPair, w: &LossWeights) -> Result<StepStats> {
    step(model, pair, w, None)
}

pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    pair: &TrainingPair,
    w: &LossWeights,
) -> Result<StepStats> {
    step(model, pair, w, Some(opt))
}

/// Box decoded at the most confident cell, in search-crop pixels.
pub fn predict_in_crop(model: &Model, pair: &TrainingPair) -> Result<BBox> {
    let z = model.template_feature(&pair.template)?;
    let maps = model.score(&pair.search, &z)?;
    let (i, j) = argmax2d(&maps.foreground()?);
    Ok(model
        .cfg
        .score_geometry()?
        .decode(i, j, maps.distances(i, j)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss before each update; the last entry is the loss after training.
    pub losses: Vec<StepStats>,
    pub final_iou: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().map_or(f64::NAN, |s| s.total)
    }
}

/// Half-cosine decay from `peak` at step 0 toward zero at `steps`.
pub fn cosine_lr(peak: f64, t: usize, steps: usize) -> f64 {
    let x = t as f64 / steps.max(1) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

/// Repeats `steps` updates on one pair. `steps = 0` only measures.
pub fn overfit_pair(
    model: &mut Model,
    pair: &TrainingPair,
    steps: usize,
    opt: AdamWConfig,
) -> Result<TrainReport> {
    let w = LossWeights::default();
    let mut adam = AdamW::new(&model.store, opt)?;
    let mut losses = Vec::with_capacity(steps + 1);
    for t in 0..steps {
        adam.cfg.lr = cosine_lr(opt.lr, t, steps);
        losses.push(train_step(model, &mut adam, pair, &w)?);
    }
    losses.push(evaluate_loss(model, pair, &w)?);
    Ok(TrainReport {
        losses,
        final_iou: iou(&predict_in_crop(model, pair)?, &pair.gt),
    })
}

/// `steps` updates cycling through `pairs` in a seeded shuffled order. The
/// reported IoU is the mean over all pairs after training.
pub fn train_pairs(
    model: &mut Model,
    pairs: &[TrainingPair],
    steps: usize,
    opt: AdamWConfig,
    seed: u64,
) -> Result<TrainReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    let w = LossWeights::default();
    let mut adam = AdamW::new(&model.store, opt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(steps);
    for t in 0..steps {
        adam.cfg.lr = cosine_lr(opt.lr, t, steps);
        if order.is_empty() {
            order = (0..pairs.len()).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
        }
        let k = order.pop().expect("refilled");
        losses.push(train_step(model, &mut adam, &pairs[k], &w)?);
    }
    let mut total_iou = 0.0;
    for p in pairs {
        total_iou += iou(&predict_in_crop(model, p)?, &p.gt);
    }
    Ok(TrainReport {
        losses,
        final_iou: total_iou / pairs.len() as f64,
    })
}

/// Mean of each consecutive window of `w` values.
pub fn windowed_means(v: &[f64], w: usize) -> Vec<f64> {
    v.chunks(w.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}
