use super::TrainError;
use crate::diffcore::{DiffError, ParamStore, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<T: Scalar>(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self { m: zeros.clone(), v: zeros, step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update. Parameters whose gradient is `None` (not
/// reached by the loss) are skipped, moments included.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[Option<Vec<T>>],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(DiffError::ShapeMismatch(format!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        ))
        .into());
    }
    for (id, g) in store.ids().zip(grads) {
        let n = store.value(id).len();
        if state.m[id.0].len() != n || g.as_ref().is_some_and(|g| g.len() != n) {
            return Err(DiffError::ShapeMismatch(format!("gradient for {} does not match its shape", store.name(id))).into());
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let Some(g) = &grads[id.0] else { continue };
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        for (i, p) in store.value_mut(id).data_mut().iter_mut().enumerate() {
            let gi = g[i].f64();
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + state.eps);
            *p = T::of(p.f64() - update);
        }
    }
    Ok(())
}
