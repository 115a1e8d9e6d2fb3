//! Per-step RMSE evaluation and the constant-velocity physics baseline.

use crate::data::samples::TrajectorySample;
use crate::error::{Error, Result};
use crate::model::{predict_batch, ModelConfig, Prediction};
use crate::nn::params::ParamStore;

/// Root-mean-square Euclidean displacement error at each prediction step,
/// in the data's length unit.
#[derive(Clone, Debug, PartialEq)]
pub struct RmseReport {
    pub model_tag: String,
    pub per_step: Vec<f64>,
    pub sample_count: usize,
}

/// Per step `t`: `sqrt(mean_i(dx² + dy²))`.
pub fn rmse_per_step(preds: &[Prediction], truths: &[Vec<[f64; 2]>]) -> Result<Vec<f64>> {
    if preds.is_empty() {
        return Err(Error::EmptySequence("rmse_per_step"));
    }
    if preds.len() != truths.len() {
        return Err(Error::shape(
            "rmse_per_step",
            format!("{} truths", preds.len()),
            format!("{}", truths.len()),
        ));
    }
    let steps = truths[0].len();
    let mut sums = vec![0.0; steps];
    for (p, t) in preds.iter().zip(truths) {
        if p.coords.len() != steps || t.len() != steps {
            return Err(Error::shape(
                "rmse_per_step",
                format!("{steps} steps"),
                format!("{} / {}", p.coords.len(), t.len()),
            ));
        }
        for (k, (pc, tc)) in p.coords.iter().zip(t).enumerate() {
            let (dx, dy) = (pc[0] - tc[0], pc[1] - tc[1]);
            sums[k] += dx * dx + dy * dy;
        }
    }
    let n = preds.len() as f64;
    Ok(sums.into_iter().map(|s| (s / n).sqrt()).collect())
}

/// Extrapolate the last observed velocity. With `averaged` the velocity is
/// the mean displacement across the whole history instead of the final one.
pub fn constant_velocity_predict(history: &[[f64; 2]], horizon: usize, averaged: bool) -> Prediction {
    assert!(history.len() >= 2, "constant velocity needs two history points");
    let last = history[history.len() - 1];
    let v = if averaged {
        let first = history[0];
        let n = (history.len() - 1) as f64;
        [(last[0] - first[0]) / n, (last[1] - first[1]) / n]
    } else {
        let prev = history[history.len() - 2];
        [last[0] - prev[0], last[1] - prev[1]]
    };
    let coords = (1..=horizon)
        .map(|k| [last[0] + k as f64 * v[0], last[1] + k as f64 * v[1]])
        .collect();
    Prediction { coords }
}

/// What produces predictions during evaluation: a trained model or the
/// physics baseline. The naive LSTM variant is just a model checkpoint whose
/// config says so; there is no separate evaluation path.
pub enum Predictor<'a> {
    Model {
        params: &'a ParamStore,
        config: &'a ModelConfig,
    },
    ConstantVelocity {
        horizon: usize,
        averaged: bool,
    },
}

impl Predictor<'_> {
    pub fn predict(&self, samples: &[TrajectorySample]) -> Result<Vec<Prediction>> {
        match self {
            Predictor::Model { params, config } => predict_batch(params, config, samples),
            Predictor::ConstantVelocity { horizon, averaged } => Ok(samples
                .iter()
                .map(|s| constant_velocity_predict(&s.target_history, *horizon, *averaged))
                .collect()),
        }
    }
}

/// Run one predictor over a test set, in input order.
pub fn evaluate(predictor: &Predictor, samples: &[TrajectorySample], tag: &str) -> Result<RmseReport> {
    if samples.is_empty() {
        return Err(Error::EmptySequence("evaluate"));
    }
    let preds = predictor.predict(samples)?;
    let truths: Vec<Vec<[f64; 2]>> = samples.iter().map(|s| s.future.clone()).collect();
    let per_step = rmse_per_step(&preds, &truths)?;
    Ok(RmseReport {
        model_tag: tag.to_string(),
        per_step,
        sample_count: samples.len(),
    })
}

/// Human-readable comparison table, one row per model.
pub fn report_table(reports: &[RmseReport]) -> String {
    let steps = reports.first().map_or(0, |r| r.per_step.len());
    let mut out = format!("{:<28}", "Model");
    for s in 1..=steps {
        out.push_str(&format!("{:>10}", format!("Step {s}")));
    }
    out.push_str(&format!("{:>10}\n", "N"));
    out.push_str(&"-".repeat(28 + 10 * (steps + 1)));
    out.push('\n');
    for r in reports {
        out.push_str(&format!("{:<28}", r.model_tag));
        for v in &r.per_step {
            out.push_str(&format!("{:>10.4}", v));
        }
        out.push_str(&format!("{:>10}\n", r.sample_count));
    }
    out
}

/// Machine CSV: `model_tag,step,rmse`.
pub fn report_csv(reports: &[RmseReport]) -> String {
    let mut out = String::from("model_tag,step,rmse\n");
    for r in reports {
        for (i, v) in r.per_step.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", r.model_tag, i + 1, v));
        }
    }
    out
}

/// Wide CSV for plotting: one step column, one column per model.
pub fn plot_csv(reports: &[RmseReport]) -> String {
    let steps = reports.first().map_or(0, |r| r.per_step.len());
    let mut out = String::from("step");
    for r in reports {
        out.push_str(&format!(",{}", r.model_tag));
    }
    out.push('\n');
    for s in 0..steps {
        out.push_str(&format!("{}", s + 1));
        for r in reports {
            out.push_str(&format!(",{}", r.per_step.get(s).copied().unwrap_or(f64::NAN)));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::social::OccupancyMask;

    fn pred(rows: Vec<[f64; 2]>) -> Prediction {
        Prediction { coords: rows }
    }

    #[test]
    fn zero_error_for_perfect_predictions() {
        let p = vec![pred(vec![[1.0, 2.0]; 5])];
        let t = vec![vec![[1.0, 2.0]; 5]];
        assert_eq!(rmse_per_step(&p, &t).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn three_four_five_triangle() {
        let p = vec![pred(vec![[3.0, 4.0]; 5]), pred(vec![[3.0, 4.0]; 5])];
        let t = vec![vec![[0.0, 0.0]; 5]; 2];
        let rmse = rmse_per_step(&p, &t).unwrap();
        for v in rmse {
            assert!((v - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mixed_squared_displacements() {
        // Step-1 squared displacements 1 and 9 -> RMSE sqrt(5).
        let p = vec![pred(vec![[1.0, 0.0]]), pred(vec![[3.0, 0.0]])];
        let t = vec![vec![[0.0, 0.0]], vec![[0.0, 0.0]]];
        let rmse = rmse_per_step(&p, &t).unwrap();
        assert!((rmse[0] - 5.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rmse_is_sample_permutation_invariant() {
        let p1 = vec![pred(vec![[1.0, 0.0]]), pred(vec![[0.0, 2.0]]), pred(vec![[3.0, 0.0]])];
        let p2 = vec![p1[2].clone(), p1[0].clone(), p1[1].clone()];
        let t = vec![vec![[0.0, 0.0]]; 3];
        assert_eq!(rmse_per_step(&p1, &t).unwrap(), rmse_per_step(&p2, &t).unwrap());
    }

    #[test]
    fn constant_velocity_linear_extrapolation() {
        // Ends at (0,0) after moving (0,2) per step.
        let history: Vec<[f64; 2]> = (0..15).map(|i| [0.0, -28.0 + 2.0 * i as f64]).collect();
        let p = constant_velocity_predict(&history, 5, false);
        let expect: Vec<[f64; 2]> = (1..=5).map(|k| [0.0, 2.0 * k as f64]).collect();
        assert_eq!(p.coords, expect);
    }

    #[test]
    fn constant_velocity_stationary() {
        let history = vec![[1.5, -3.0]; 15];
        let p = constant_velocity_predict(&history, 5, false);
        assert_eq!(p.coords, vec![[1.5, -3.0]; 5]);
    }

    #[test]
    fn averaged_velocity_variant() {
        // Single jump at the end: last displacement 14, averaged 1.
        let mut history = vec![[0.0, 0.0]; 14];
        history.push([0.0, 14.0]);
        let last = constant_velocity_predict(&history, 2, false);
        assert_eq!(last.coords, vec![[0.0, 28.0], [0.0, 42.0]]);
        let avg = constant_velocity_predict(&history, 2, true);
        assert_eq!(avg.coords, vec![[0.0, 15.0], [0.0, 16.0]]);
    }

    #[test]
    fn evaluate_perfect_oracle_is_zero() {
        // Linear motion: constant velocity matches the generator exactly.
        let history: Vec<[f64; 2]> = (0..15).map(|i| [0.0, i as f64 - 14.0]).collect();
        let future: Vec<[f64; 2]> = (1..=5).map(|k| [0.0, k as f64]).collect();
        let samples: Vec<TrajectorySample> = (0..3)
            .map(|v| TrajectorySample {
                vehicle_id: v,
                anchor_frame: 0,
                target_history: history.clone(),
                neighbor_histories: vec![],
                mask: OccupancyMask::empty(3, 13),
                future: future.clone(),
            })
            .collect();
        let report = evaluate(
            &Predictor::ConstantVelocity { horizon: 5, averaged: false },
            &samples,
            "constant_velocity",
        )
        .unwrap();
        assert_eq!(report.sample_count, 3);
        assert!(report.per_step.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_evaluation_is_error() {
        let p = Predictor::ConstantVelocity { horizon: 5, averaged: false };
        assert!(evaluate(&p, &[], "cv").is_err());
    }

    #[test]
    fn csv_outputs_are_well_formed() {
        let reports = vec![
            RmseReport { model_tag: "full".into(), per_step: vec![0.1, 0.2], sample_count: 10 },
            RmseReport { model_tag: "constant_velocity".into(), per_step: vec![0.3, 0.4], sample_count: 10 },
        ];
        let csv = report_csv(&reports);
        assert!(csv.starts_with("model_tag,step,rmse\n"));
        assert_eq!(csv.lines().count(), 5);
        let plot = plot_csv(&reports);
        assert_eq!(plot.lines().next().unwrap(), "step,full,constant_velocity");
        assert_eq!(plot.lines().count(), 3);
        let table = report_table(&reports);
        assert!(table.contains("full"));
        assert!(table.contains("Step 2"));
    }
}
