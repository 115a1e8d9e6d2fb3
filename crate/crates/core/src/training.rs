//! Loss, Adam, and the epoch loop with best-validation checkpointing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::split::DatasetSplit;
use crate::error::{Error, Result};
use crate::model::{batch_loss_and_grads, dataset_loss, ModelConfig, Prediction};
use crate::nn::params::{init_params, ParamStore};
use crate::nn::tensor::Tensor;

/// Mean over samples of the summed squared coordinate errors across the
/// prediction horizon.
pub fn trajectory_loss(preds: &[Prediction], truths: &[Vec<[f64; 2]>]) -> Result<f64> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(Error::shape(
            "trajectory_loss",
            format!("{} truths", preds.len()),
            format!("{}", truths.len()),
        ));
    }
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(truths) {
        if p.coords.len() != t.len() {
            return Err(Error::shape(
                "trajectory_loss",
                format!("{} steps", t.len()),
                format!("{}", p.coords.len()),
            ));
        }
        for (pc, tc) in p.coords.iter().zip(t) {
            let (dx, dy) = (pc[0] - tc[0], pc[1] - tc[1]);
            total += dx * dx + dy * dy;
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("trajectory_loss".into()));
    }
    Ok(total / preds.len() as f64)
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment accumulators mirroring the parameter shapes.
pub struct AdamState {
    hp: AdamParams,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, hp: AdamParams) -> Self {
        let m = (0..store.len()).map(|i| Tensor::zeros(store.value_at(i).shape())).collect();
        let v = (0..store.len()).map(|i| Tensor::zeros(store.value_at(i).shape())).collect();
        AdamState { hp, m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction, consuming the gradients currently
/// accumulated in the store.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    for i in 0..store.len() {
        if !store.grad_at(i).all_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of parameter '{}'",
                store.name(i)
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let hp = state.hp;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for i in 0..store.len() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let (value, grad) = store.value_grad_mut(i);
        let p = value.data_mut();
        let g = grad.data();
        for j in 0..p.len() {
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g[j];
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= hp.lr * m_hat / (v_hat.sqrt() + hp.epsilon);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub adam: AdamParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 128,
            seed: 0,
            shuffle: true,
            adam: AdamParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

pub struct TrainOutcome {
    /// Parameters at the lowest validation loss (final epoch when there is
    /// no validation split).
    pub best_params: ParamStore,
    pub best_epoch: usize,
    /// Parameters at the end of training (last finite state on divergence).
    pub final_params: ParamStore,
    pub history: Vec<EpochLoss>,
    /// Set when training aborted on a non-finite loss or gradient.
    pub diverged: Option<String>,
}

/// Seeded epoch loop: shuffle, fixed-size batches (last partial batch kept),
/// forward/backward, Adam. Validation loss is evaluated after every epoch
/// and the best checkpoint retained; with an empty validation split the last
/// state is kept instead.
pub fn train(split: &DatasetSplit, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::EmptySequence("training set"));
    }

    let mut params = init_params(model_cfg, train_cfg.seed);
    let mut adam = AdamState::new(&params, train_cfg.adam);
    let mut history = Vec::with_capacity(train_cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut diverged = None;

    'epochs: for epoch in 1..=train_cfg.epochs {
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        if train_cfg.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            order.shuffle(&mut rng);
        }

        let mut epoch_total = 0.0;
        for batch_idx in order.chunks(train_cfg.batch_size) {
            let batch: Vec<_> = batch_idx.iter().map(|&i| split.train[i].clone()).collect();
            params.zero_grads();
            let loss = batch_loss_and_grads(&mut params, model_cfg, &batch)?;
            if !loss.is_finite() {
                diverged = Some(format!("non-finite training loss in epoch {epoch}"));
                break 'epochs;
            }
            epoch_total += loss * batch.len() as f64;
            if let Err(e) = adam_step(&mut params, &mut adam) {
                diverged = Some(format!("epoch {epoch}: {e}"));
                break 'epochs;
            }
        }
        let train_loss = epoch_total / split.train.len() as f64;

        let val_loss = if split.validation.is_empty() {
            None
        } else {
            let v = dataset_loss(&params, model_cfg, &split.validation)?;
            if !v.is_finite() {
                diverged = Some(format!("non-finite validation loss in epoch {epoch}"));
                break 'epochs;
            }
            Some(v)
        };

        history.push(EpochLoss { epoch, train_loss, val_loss });

        if let Some(v) = val_loss {
            let improved = best.as_ref().is_none_or(|(b, _, _)| v < *b);
            if improved {
                best = Some((v, epoch, params.clone_values()));
            }
        }
    }

    let (best_epoch, best_params) = match best {
        Some((_, epoch, store)) => (epoch, store),
        None => (history.last().map_or(0, |h| h.epoch), params.clone_values()),
    };
    Ok(TrainOutcome {
        best_params,
        best_epoch,
        final_params: params,
        history,
        diverged,
    })
}

/// Render per-epoch losses as the run directory's loss CSV.
pub fn loss_history_csv(history: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for h in history {
        match h.val_loss {
            Some(v) => out.push_str(&format!("{},{},{}\n", h.epoch, h.train_loss, v)),
            None => out.push_str(&format!("{},{},\n", h.epoch, h.train_loss)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::social::OccupancyMask;
    use crate::data::samples::TrajectorySample;

    #[test]
    fn loss_hand_cases() {
        let pred = |rows: Vec<[f64; 2]>| Prediction { coords: rows };
        // perfect prediction
        assert_eq!(
            trajectory_loss(&[pred(vec![[1.0, 2.0]])], &[vec![[1.0, 2.0]]]).unwrap(),
            0.0
        );
        // single step, unit offsets: 1² + 1²
        assert_eq!(
            trajectory_loss(&[pred(vec![[1.0, 1.0]])], &[vec![[0.0, 0.0]]]).unwrap(),
            2.0
        );
        // batch mean of per-sample losses 2 and 4
        let preds = vec![pred(vec![[1.0, 1.0]]), pred(vec![[0.0, 2.0]])];
        let truths = vec![vec![[0.0, 0.0]], vec![[0.0, 0.0]]];
        assert_eq!(trajectory_loss(&preds, &truths).unwrap(), 3.0);
    }

    #[test]
    fn loss_is_nonnegative_and_zero_only_at_equality() {
        use proptest::prelude::*;
        proptest!(|(coords in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 5),
                    offsets in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 5))| {
            let truth: Vec<[f64; 2]> = coords.iter().map(|&(x, y)| [x, y]).collect();
            let shifted: Vec<[f64; 2]> = coords
                .iter()
                .zip(&offsets)
                .map(|(&(x, y), &(dx, dy))| [x + dx, y + dy])
                .collect();
            let exact = trajectory_loss(std::slice::from_ref(&Prediction { coords: truth.clone() }), std::slice::from_ref(&truth)).unwrap();
            prop_assert_eq!(exact, 0.0);
            let loss = trajectory_loss(&[Prediction { coords: shifted.clone() }], &[truth]).unwrap();
            prop_assert!(loss >= 0.0);
            if offsets.iter().any(|&(dx, dy)| dx != 0.0 || dy != 0.0) {
                prop_assert!(loss > 0.0);
            }
        });
    }

    #[test]
    fn loss_is_batch_permutation_invariant() {
        let pred = |x: f64| Prediction { coords: vec![[x, 0.0], [0.0, x]] };
        let truths = |n: usize| vec![vec![[0.0, 0.0], [0.0, 0.0]]; n];
        let a = trajectory_loss(&[pred(1.0), pred(2.0), pred(3.0)], &truths(3)).unwrap();
        let b = trajectory_loss(&[pred(3.0), pred(1.0), pred(2.0)], &truths(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adam_zero_gradient_is_noop_on_params() {
        let cfg = ModelConfig::tiny(Variant::NaiveLstm);
        let mut store = init_params(&cfg, 1);
        let before = store.clone_values();
        let mut state = AdamState::new(&store, AdamParams::default());
        store.zero_grads();
        adam_step(&mut store, &mut state).unwrap();
        assert!(store.values_equal(&before));
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_first_step_magnitude() {
        // Single scalar parameter, gradient 1: the bias-corrected update is
        // lr * 1 / (1 + eps') with eps' = eps * sqrt(bc2)/..., i.e. ~lr.
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(0.5));
        for g in store.grad_at_mut(0).data_mut() {
            *g = 1.0;
        }
        let mut state = AdamState::new(&store, AdamParams::default());
        adam_step(&mut store, &mut state).unwrap();
        let delta = store.get("p").data()[0] - 0.5;
        let expect = -0.001 * (1.0 / (1.0 + 1e-8));
        assert!((delta - expect).abs() < 1e-12, "delta {delta} vs {expect}");
    }

    #[test]
    fn adam_constant_gradient_steps_are_lr_sized() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(0.0));
        let mut state = AdamState::new(&store, AdamParams::default());
        let mut prev = 0.0;
        for _ in 0..2 {
            store.zero_grads();
            for g in store.grad_at_mut(0).data_mut() {
                *g = 1.0;
            }
            adam_step(&mut store, &mut state).unwrap();
            let now = store.get("p").data()[0];
            assert!(((now - prev).abs() - 0.001).abs() < 1e-6, "step size {}", now - prev);
            prev = now;
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0));
        store.grad_at_mut(0).data_mut()[0] = f64::NAN;
        let mut state = AdamState::new(&store, AdamParams::default());
        match adam_step(&mut store, &mut state) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("'w'")),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    fn tiny_sample(seed: u64, cfg: &ModelConfig) -> TrajectorySample {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut walk = || -> Vec<[f64; 2]> {
            let v: f64 = rng.gen_range(0.5..1.5);
            (0..cfg.history_steps).map(|i| [0.0, v * i as f64]).collect()
        };
        let history = walk();
        let last = history.last().unwrap()[1];
        let future: Vec<[f64; 2]> = (1..=cfg.horizon)
            .map(|k| [0.0, last + k as f64 * (history[1][1] - history[0][1])])
            .collect();
        TrajectorySample {
            vehicle_id: seed,
            anchor_frame: 0,
            target_history: history,
            neighbor_histories: vec![],
            mask: OccupancyMask::empty(cfg.grid_channels, cfg.grid_cells),
            future,
        }
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let cfg = ModelConfig::tiny(Variant::NaiveLstm);
        let make_split = || DatasetSplit {
            train: (0..8).map(|i| tiny_sample(i, &cfg)).collect(),
            validation: (100..102).map(|i| tiny_sample(i, &cfg)).collect(),
            test: vec![],
        };
        let tc = TrainConfig {
            epochs: 40,
            batch_size: 4,
            seed: 3,
            shuffle: true,
            adam: AdamParams { lr: 0.01, ..Default::default() },
        };
        let a = train(&make_split(), &cfg, &tc).unwrap();
        let b = train(&make_split(), &cfg, &tc).unwrap();
        assert_eq!(a.history, b.history, "same seed must give identical loss history");
        assert!(a.diverged.is_none());
        let first = a.history.first().unwrap().train_loss;
        let last = a.history.last().unwrap().train_loss;
        assert!(last < first * 0.5, "loss should at least halve: {first} -> {last}");
        assert!(a.best_epoch >= 1);
    }

    #[test]
    fn divergent_loss_aborts_with_last_finite_state() {
        let cfg = ModelConfig::tiny(Variant::NaiveLstm);
        // Absurd coordinates overflow the squared loss immediately.
        let mut sample = tiny_sample(0, &cfg);
        for p in &mut sample.future {
            p[1] = 1e200;
        }
        let split = DatasetSplit {
            train: vec![sample],
            validation: vec![],
            test: vec![],
        };
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 1,
            seed: 1,
            ..Default::default()
        };
        let out = train(&split, &cfg, &tc).unwrap();
        assert!(out.diverged.is_some());
        assert!(out.history.len() < 3, "abort must cut the epoch loop short");
        assert!(out
            .final_params
            .iter_names()
            .all(|n| out.final_params.get(n).all_finite()));
    }

    #[test]
    fn empty_validation_keeps_last_checkpoint() {
        let cfg = ModelConfig::tiny(Variant::NaiveLstm);
        let split = DatasetSplit {
            train: (0..4).map(|i| tiny_sample(i, &cfg)).collect(),
            validation: vec![],
            test: vec![],
        };
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 2,
            seed: 1,
            ..Default::default()
        };
        let out = train(&split, &cfg, &tc).unwrap();
        assert!(out.history.iter().all(|h| h.val_loss.is_none()));
        assert_eq!(out.best_epoch, 3);
        assert!(out.best_params.values_equal(&out.final_params));
    }
}
