//! Central-difference verification of hand-derived gradients.

use rand::seq::SliceRandom;
use rand::Rng;

use super::ParamStore;
use crate::{Error, Result};

/// Compares `analytic` (flat, in tensor order, as from
/// [`ParamStore::flat_grads`]) against central differences of `loss_fn` on a
/// random coordinate subsample (1% of coordinates, at least 8). Returns the
/// maximum relative error `|analytic − numeric| / max(1, |numeric|)`.
///
/// `loss_fn` must be deterministic and smooth at the evaluation point; fix
/// any rng it uses and keep hinge arguments away from their kinks.
pub fn grad_check<F, R>(
    mut loss_fn: F,
    params: &mut ParamStore,
    analytic: &[f64],
    eps: f64,
    rng: &mut R,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> f64,
    R: Rng,
{
    let n = params.param_count();
    assert_eq!(analytic.len(), n, "analytic gradient length mismatch");
    let k = ((n as f64 * 0.01).ceil() as usize).clamp(8.min(n), n);
    let mut coords: Vec<usize> = (0..n).collect();
    coords.shuffle(rng);
    coords.truncate(k);

    // Flat offset -> (tensor, inner index).
    let mut bounds = Vec::with_capacity(params.len());
    let mut off = 0;
    for i in 0..params.len() {
        let len = params.tensor(i).len();
        bounds.push((off, i));
        off += len;
    }

    let locate = |flat: usize| -> (usize, usize) {
        let pos = bounds.partition_point(|&(start, _)| start <= flat) - 1;
        let (start, ti) = bounds[pos];
        (ti, flat - start)
    };

    let mut max_rel = 0.0f64;
    for &flat in &coords {
        let (ti, j) = locate(flat);
        let orig = params.data(ti)[j];
        params.data_mut(ti)[j] = orig + eps;
        let up = loss_fn(params);
        params.data_mut(ti)[j] = orig - eps;
        let down = loss_fn(params);
        params.data_mut(ti)[j] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite loss while checking tensor {}",
                params.tensor(ti).name
            )));
        }
        let numeric = (up - down) / (2.0 * eps);
        let rel = (analytic[flat] - numeric).abs() / numeric.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
