//! Central finite-difference gradient checking.
//!
//! The checked function's output is projected onto fixed random weights, so
//! every output element contributes to the scalar being differentiated.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so that gradients that are
/// numerically zero are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

/// Central-difference steps, relative to `max(|x|, 1)`. A coordinate whose
/// error at one step exceeds [`RETRY_ABOVE`] is retried with the next,
/// smaller step: a ReLU or max kink within `h` of the point spoils the
/// larger difference but not the analytic gradient.
pub const STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];
pub const RETRY_ABOVE: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Coordinates that needed a smaller step.
    pub retried: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub seed: u64,
    /// Coordinates sampled per parameter; `None` checks all of them.
    pub coords_per_param: Option<usize>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks `f` with respect to free-standing input tensors (every coordinate).
pub fn check_gradients<F>(inputs: &[Tensor], seed: u64, f: F) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("input{i}"), t.clone()))
        .collect();
    let opts = GradCheckOptions {
        seed,
        coords_per_param: None,
    };
    check_store_gradients(&store, opts, |tape, s| {
        let vars: Vec<Var<'_>> = ids.iter().map(|&id| tape.param(s, id)).collect();
        f(tape, &vars)
    })
}

/// Checks the gradient of `f` with respect to every non-frozen parameter of `store`.
pub fn check_store_gradients<F>(
    store: &ParamStore,
    opts: GradCheckOptions,
    f: F,
) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &'t ParamStore) -> Result<Var<'t>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let tape = Tape::new();
    let out = f(&tape, store)?;
    let proj = Tensor::uniform(out.shape(), -1.0, 1.0, &mut rng);
    let loss = out.mul(tape.constant(proj.clone()))?.sum()?;
    let grads = tape.backward(loss)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let out = f(&tape, s)?;
        let v = out.value();
        Ok(v.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
    };

    let mut report = GradReport::default();
    let mut work = store.clone();
    for (id, p) in store.iter() {
        if p.frozen {
            continue;
        }
        let n = p.value.len();
        let coords: Vec<usize> = match opts.coords_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let analytic = grads.param(id).map_or(0.0, |g| g.data()[i]);
            let x = p.value.data()[i];
            let mut err = f64::INFINITY;
            for (k, step) in STEPS.iter().enumerate() {
                let h = step * x.abs().max(1.0);
                work.get_mut(id).data_mut()[i] = x + h;
                let up = eval(&work)?;
                work.get_mut(id).data_mut()[i] = x - h;
                let down = eval(&work)?;
                work.get_mut(id).data_mut()[i] = x;
                err = err.min(relative_error(analytic, (up - down) / (2.0 * h)));
                if err < RETRY_ABOVE {
                    break;
                }
                if k + 1 < STEPS.len() {
                    report.retried += 1;
                }
            }
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((p.name.clone(), i));
                }
            }
        }
    }
    Ok(report)
}
