use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::DiffError;

/// Magnitude below which gradient differences are measured absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub coords_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// Compares tape gradients of `loss` against central differences
/// `(f(θ+h) − f(θ−h)) / 2h`, on at most `per_param` randomly chosen
/// coordinates of every parameter. `loss` must be deterministic, so build
/// it on the inference tape it is given.
pub fn finite_difference_check<F>(
    store: &ParamStore<f64>,
    loss: F,
    step: f64,
    per_param: usize,
    seed: u64,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    let grads = tape.backward(out)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64, DiffError> {
        let mut t = Tape::new();
        let v = loss(&mut t, s)?;
        t.value(v).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_param: String::new(), coords_checked: 0 };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let analytic = grads.param(id).unwrap_or_else(|| super::Tensor::zeros(store.value(id).shape()));
        let n = store.value(id).len();
        let picks = sample(&mut rng, n, per_param.min(n));
        for i in picks {
            let orig = store.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic.data()[i], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = store.name(id).to_string();
            }
        }
    }
    Ok(report)
}
