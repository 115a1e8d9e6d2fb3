//! Finite-difference verification of reverse-mode gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;

/// Compare the gradients a model accumulates against central finite
/// differences of its loss.
///
/// `run(params, accumulate)` must return the loss value; when `accumulate`
/// is true it must also add gradients into the store (whose accumulators are
/// zeroed here first). At most `max_coords` coordinates are probed (all of
/// them when the store is small), chosen by a seeded shuffle so repeated runs
/// probe the same set. Returns the maximum relative error
/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn check_gradients<F>(
    mut run: F,
    params: &mut ParamStore,
    epsilon: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&mut ParamStore, bool) -> Result<f64>,
{
    params.zero_grads();
    let base = run(params, true)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("gradient-check loss".into()));
    }

    let analytic: Vec<Vec<f64>> = (0..params.len())
        .map(|i| params.grad_at(i).data().to_vec())
        .collect();
    if analytic.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("reverse-mode gradient".into()));
    }

    let mut coords: Vec<(usize, usize)> = (0..params.len())
        .flat_map(|i| (0..params.value_at(i).len()).map(move |j| (i, j)))
        .collect();
    if coords.len() > max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
        coords.truncate(max_coords);
    }

    let mut worst = 0.0f64;
    for (i, j) in coords {
        let orig = params.value_at(i).data()[j];
        params.value_at_mut(i).data_mut()[j] = orig + epsilon;
        let plus = run(params, false)?;
        params.value_at_mut(i).data_mut()[j] = orig - epsilon;
        let minus = run(params, false)?;
        params.value_at_mut(i).data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[i][j];
        let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
