//! One-pass evaluation: initialize on the first frame, never re-initialize.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BBox};
use crate::error::{Error, Result};
use crate::synth::Sequence;
use crate::tensor::Tensor;
use crate::tracker::Tracker;

pub const SUCCESS_STEPS: usize = 21;
pub const PRECISION_PX: f64 = 20.0;

/// `0, 0.05, …, 1`.
pub fn success_thresholds() -> Vec<f64> {
    (0..SUCCESS_STEPS)
        .map(|i| i as f64 / (SUCCESS_STEPS - 1) as f64)
        .collect()
}

/// Fraction of frames with IoU at least each threshold.
pub fn success_curve(ious: &[f64]) -> Vec<f64> {
    let n = ious.len().max(1) as f64;
    success_thresholds()
        .iter()
        .map(|&t| ious.iter().filter(|&&v| v >= t).count() as f64 / n)
        .collect()
}

/// Trapezoid integral of the curve over `[0, 1]`.
pub fn auc(curve: &[f64]) -> f64 {
    if curve.len() < 2 {
        return curve.first().copied().unwrap_or(0.0);
    }
    let area: f64 = curve.windows(2).map(|w| (w[0] + w[1]) / 2.0).sum();
    area / (curve.len() - 1) as f64
}

/// Fraction of frames whose center error is at most `px`.
pub fn precision(errors: &[f64], px: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().filter(|&&e| e <= px).count() as f64 / errors.len() as f64
}

/// Nearest-rank percentile of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Frame rates from per-frame latencies. `p95` is the rate at the 95th
/// percentile latency, the slow tail.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FpsStats {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

impl FpsStats {
    pub fn from_latencies(secs: &[f64]) -> Self {
        if secs.is_empty() {
            return FpsStats::default();
        }
        let mean = secs.iter().sum::<f64>() / secs.len() as f64;
        FpsStats {
            mean: 1.0 / mean,
            median: 1.0 / median(secs),
            p95: 1.0 / percentile(secs, 95.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequence: String,
    pub thresholds: Vec<f64>,
    pub success: Vec<f64>,
    pub auc: f64,
    pub precision_20px: f64,
    /// One entry per tracked frame; the initialization frame is excluded.
    pub ious: Vec<f64>,
    pub center_errors: Vec<f64>,
    pub predictions: Vec<BBox>,
    pub fps: FpsStats,
    /// Set when the tracker failed mid-sequence; metrics cover the frames
    /// tracked before the failure.
    pub failure: Option<String>,
}

impl EvalReport {
    pub fn from_predictions(
        sequence: &str,
        predictions: &[BBox],
        gt: &[BBox],
        latencies: &[f64],
    ) -> Self {
        let ious: Vec<f64> = predictions.iter().zip(gt).map(|(p, g)| iou(p, g)).collect();
        let errors: Vec<f64> = predictions
            .iter()
            .zip(gt)
            .map(|(p, g)| p.center_distance(g))
            .collect();
        let success = success_curve(&ious);
        EvalReport {
            sequence: sequence.to_string(),
            thresholds: success_thresholds(),
            auc: auc(&success),
            success,
            precision_20px: precision(&errors, PRECISION_PX),
            ious,
            center_errors: errors,
            predictions: predictions.to_vec(),
            fps: FpsStats::from_latencies(latencies),
            failure: None,
        }
    }

    pub fn mean_iou(&self) -> f64 {
        if self.ious.is_empty() {
            0.0
        } else {
            self.ious.iter().sum::<f64>() / self.ious.len() as f64
        }
    }

    pub fn is_partial(&self) -> bool {
        self.failure.is_some()
    }

    /// `threshold,success` lines with a header.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("threshold,success\n");
        for (t, v) in self.thresholds.iter().zip(&self.success) {
            let _ = writeln!(s, "{t:.2},{v:.6}");
        }
        s
    }

    pub fn summary_table(reports: &[EvalReport]) -> String {
        let mut s = format!(
            "{:<28} {:>6} {:>8} {:>8} {:>9} {:>8}\n",
            "sequence", "frames", "AUC", "Prec@20", "mean IoU", "FPS"
        );
        for r in reports {
            let _ = writeln!(
                s,
                "{:<28} {:>6} {:>8.4} {:>8.4} {:>9.4} {:>8.1}{}",
                r.sequence,
                r.ious.len(),
                r.auc,
                r.precision_20px,
                r.mean_iou(),
                r.fps.mean,
                if r.is_partial() { "  (partial)" } else { "" }
            );
        }
        s
    }
}

/// Runs `tracker` over `seq`. Initialization errors are returned; a failure
/// on a later frame ends the run with a partial, flagged report.
pub fn one_pass_eval(tracker: &mut dyn Tracker, seq: &Sequence) -> Result<EvalReport> {
    if seq.frames.len() < 2 || seq.gt.len() != seq.frames.len() {
        return Err(Error::InvalidArgument(format!(
            "sequence `{}` needs at least 2 frames with matching ground truth",
            seq.name
        )));
    }
    tracker.init(&seq.frames[0], seq.gt[0])?;
    let mut predictions = Vec::with_capacity(seq.len() - 1);
    let mut latencies = Vec::with_capacity(seq.len() - 1);
    let mut failure = None;
    for frame in &seq.frames[1..] {
        let t = Instant::now();
        match tracker.update(frame) {
            Ok((b, _)) => {
                latencies.push(t.elapsed().as_secs_f64());
                predictions.push(b);
            }
            Err(e) => {
                failure = Some(format!("frame {}: {e}", predictions.len() + 1));
                break;
            }
        }
    }
    let mut report =
        EvalReport::from_predictions(&seq.name, &predictions, &seq.gt[1..], &latencies);
    report.failure = failure;
    Ok(report)
}

/// Evaluates sequences on up to `threads` workers, one tracker per sequence.
pub fn eval_parallel<T, F>(seqs: &[Sequence], threads: usize, make: F) -> Vec<Result<EvalReport>>
where
    T: Tracker,
    F: Fn() -> Result<T> + Sync,
{
    let threads = threads.clamp(1, seqs.len().max(1));
    let mut out: Vec<Option<Result<EvalReport>>> = (0..seqs.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunk = seqs.len().div_ceil(threads).max(1);
        let handles: Vec<_> = seqs
            .chunks(chunk)
            .map(|group| {
                let make = &make;
                s.spawn(move || {
                    group
                        .iter()
                        .map(|seq| make().and_then(|mut t| one_pass_eval(&mut t, seq)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut k = 0;
        for h in handles {
            for r in h.join().expect("evaluation worker panicked") {
                out[k] = Some(r);
                k += 1;
            }
        }
    });
    out.into_iter()
        .map(|r| r.expect("every sequence evaluated"))
        .collect()
}

/// Replays the ground truth.
pub struct OracleTracker {
    gt: Vec<BBox>,
    next: usize,
}

impl OracleTracker {
    pub fn new(gt: Vec<BBox>) -> Self {
        OracleTracker { gt, next: 0 }
    }
}

impl Tracker for OracleTracker {
    fn init(&mut self, _frame: &Tensor, _bbox: BBox) -> Result<()> {
        self.next = 1;
        Ok(())
    }

    fn update(&mut self, _frame: &Tensor) -> Result<(BBox, f64)> {
        let b = *self
            .gt
            .get(self.next)
            .ok_or_else(|| Error::InvalidArgument("oracle ran past its ground truth".into()))?;
        self.next += 1;
        Ok((b, 1.0))
    }
}

/// Reports the initial box forever.
#[derive(Default)]
pub struct StaticTracker {
    bbox: Option<BBox>,
}

impl Tracker for StaticTracker {
    fn init(&mut self, _frame: &Tensor, bbox: BBox) -> Result<()> {
        self.bbox = Some(bbox);
        Ok(())
    }

    fn update(&mut self, _frame: &Tensor) -> Result<(BBox, f64)> {
        self.bbox
            .map(|b| (b, 0.0))
            .ok_or_else(|| Error::InvalidArgument("tracker used before init".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_sequence, SequenceSpec};

    #[test]
    fn oracle_scores_perfectly() {
        let seq = synth_sequence(&SequenceSpec::easy(6, 1, 1)).unwrap();
        let r = one_pass_eval(&mut OracleTracker::new(seq.gt.clone()), &seq).unwrap();
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.precision_20px, 1.0);
        assert_eq!(r.ious.len(), 5);
    }

    #[test]
    fn static_tracker_auc_matches_recomputation() {
        let seq = synth_sequence(&SequenceSpec::easy(30, 1, 1)).unwrap();
        let r = one_pass_eval(&mut StaticTracker::default(), &seq).unwrap();
        let mut direct = 0.0;
        let t = success_thresholds();
        for k in 0..t.len() - 1 {
            let a = r.ious.iter().filter(|&&v| v >= t[k]).count() as f64 / r.ious.len() as f64;
            let b = r.ious.iter().filter(|&&v| v >= t[k + 1]).count() as f64 / r.ious.len() as f64;
            direct += (a + b) / 2.0 * 0.05;
        }
        assert!((r.auc - direct).abs() < 1e-12);
        assert!(r.success.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn too_short_sequence_rejected() {
        let seq = synth_sequence(&SequenceSpec::easy(1, 1, 1)).unwrap();
        assert!(one_pass_eval(&mut StaticTracker::default(), &seq).is_err());
    }

    #[test]
    fn failure_yields_partial_report() {
        let seq = synth_sequence(&SequenceSpec::easy(6, 1, 1)).unwrap();
        let mut t = OracleTracker::new(seq.gt[..3].to_vec());
        let r = one_pass_eval(&mut t, &seq).unwrap();
        assert!(r.is_partial());
        assert_eq!(r.ious.len(), 2);
    }

    #[test]
    fn percentiles() {
        let v = [5.0, 1.0, 3.0, 2.0, 4.0];
        assert_eq!(median(&v), 3.0);
        assert_eq!(percentile(&v, 95.0), 5.0);
        assert_eq!(percentile(&v, 20.0), 1.0);
        assert_eq!(median(&[1.0, 2.0]), 1.5);
    }

    #[test]
    fn parallel_matches_serial() {
        let seqs: Vec<_> = (0..3)
            .map(|s| synth_sequence(&SequenceSpec::easy(4, s, s)).unwrap())
            .collect();
        let par = eval_parallel(&seqs, 2, || Ok(StaticTracker::default()));
        for (seq, r) in seqs.iter().zip(par) {
            let serial = one_pass_eval(&mut StaticTracker::default(), seq).unwrap();
            assert_eq!(r.unwrap().ious, serial.ious);
        }
    }
}
