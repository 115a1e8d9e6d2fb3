//! Train/validation/test partitioning by vehicle id, so no vehicle leaks
//! across splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::samples::TrajectorySample;
use crate::error::{Error, Result};

pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.7, 0.1, 0.2);

#[derive(Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<TrajectorySample>,
    pub validation: Vec<TrajectorySample>,
    pub test: Vec<TrajectorySample>,
}

/// Partition samples by a seeded shuffle of their distinct vehicle ids.
/// Train and validation get `floor(ratio * n)` vehicles each, test the
/// remainder; every sample follows its vehicle.
pub fn split_dataset(
    samples: Vec<TrajectorySample>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit> {
    let (r_train, r_val, r_test) = ratios;
    if r_train < 0.0 || r_val < 0.0 || r_test < 0.0 || (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }

    let mut vehicles: Vec<u64> = samples.iter().map(|s| s.vehicle_id).collect();
    vehicles.sort_unstable();
    vehicles.dedup();
    if vehicles.len() < 3 {
        return Err(Error::SplitInfeasible {
            vehicles: vehicles.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vehicles.shuffle(&mut rng);

    let n = vehicles.len();
    let n_train = (n as f64 * r_train).floor() as usize;
    let n_val = (n as f64 * r_val).floor() as usize;

    let assign = |v: u64| -> usize {
        let pos = vehicles.iter().position(|&x| x == v).expect("known vehicle");
        if pos < n_train {
            0
        } else if pos < n_train + n_val {
            1
        } else {
            2
        }
    };

    let mut split = DatasetSplit::default();
    for s in samples {
        match assign(s.vehicle_id) {
            0 => split.train.push(s),
            1 => split.validation.push(s),
            _ => split.test.push(s),
        }
    }
    Ok(split)
}
