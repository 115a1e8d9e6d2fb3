//! Python bindings for the trajectory-prediction pipeline: the pure
//! operations (grid indexing, physics baseline, metrics) plus file-based
//! entry points mirroring the CLI subcommands.

// The #[pyfunction] expansion trips this lint on every fallible signature.
#![allow(clippy::useless_conversion)]

use std::fs;
use std::io::BufReader;
use std::path::Path;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use trajpred::config::RunConfig;
use trajpred::data::records::{cap_lane, parse_records};
use trajpred::data::samples::build_samples;
use trajpred::data::split::{split_dataset, DatasetSplit};
use trajpred::data::store::{read_samples_file, write_samples_file};
use trajpred::eval;
use trajpred::model::{load_checkpoint, predict_batch, save_checkpoint, Prediction};
use trajpred::synth;
use trajpred::training;

fn err(e: trajpred::Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn load_config(path: &str, seed: Option<u64>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::from_path(Path::new(path)).map_err(err)?;
    if let Some(seed) = seed {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn to_predictions(rows: Vec<Vec<(f64, f64)>>) -> Vec<Prediction> {
    rows.into_iter()
        .map(|coords| Prediction {
            coords: coords.into_iter().map(|(x, y)| [x, y]).collect(),
        })
        .collect()
}

fn to_points(rows: Vec<Vec<(f64, f64)>>) -> Vec<Vec<[f64; 2]>> {
    rows.into_iter()
        .map(|coords| coords.into_iter().map(|(x, y)| [x, y]).collect())
        .collect()
}

/// Grid cell for a neighbor at (lane offset, longitudinal offset in meters),
/// or None outside the 3x13 window.
#[pyfunction]
fn grid_cell_index(delta_lane: i64, delta_y: f64) -> Option<(usize, usize)> {
    trajpred::data::samples::grid_cell_index(delta_lane, delta_y)
}

/// Constant-velocity extrapolation of a history of (x, y) points.
#[pyfunction]
#[pyo3(signature = (history, horizon = 5, averaged = false))]
fn constant_velocity_predict(
    history: Vec<(f64, f64)>,
    horizon: usize,
    averaged: bool,
) -> PyResult<Vec<(f64, f64)>> {
    if history.len() < 2 {
        return Err(PyValueError::new_err("history needs at least two points"));
    }
    let history: Vec<[f64; 2]> = history.into_iter().map(|(x, y)| [x, y]).collect();
    let pred = eval::constant_velocity_predict(&history, horizon, averaged);
    Ok(pred.coords.into_iter().map(|p| (p[0], p[1])).collect())
}

/// Per-step RMSE between predictions and truths, each `[n][steps](x, y)`.
#[pyfunction]
fn rmse_per_step(preds: Vec<Vec<(f64, f64)>>, truths: Vec<Vec<(f64, f64)>>) -> PyResult<Vec<f64>> {
    eval::rmse_per_step(&to_predictions(preds), &to_points(truths)).map_err(err)
}

/// Mean over samples of summed squared coordinate errors.
#[pyfunction]
fn trajectory_loss(preds: Vec<Vec<(f64, f64)>>, truths: Vec<Vec<(f64, f64)>>) -> PyResult<f64> {
    training::trajectory_loss(&to_predictions(preds), &to_points(truths)).map_err(err)
}

/// Generate the config's synthetic dataset as CSV; returns the record count.
#[pyfunction]
#[pyo3(signature = (config_path, out_csv, seed = None))]
fn synth_csv(config_path: &str, out_csv: &str, seed: Option<u64>) -> PyResult<usize> {
    let cfg = load_config(config_path, seed)?;
    let synth_cfg = cfg
        .synth
        .as_ref()
        .ok_or_else(|| PyValueError::new_err("config has no [synth] section"))?;
    let records = synth::generate(synth_cfg).map_err(err)?;
    let mut buf = Vec::new();
    synth::write_csv(&mut buf, &records).map_err(err)?;
    fs::write(out_csv, buf)?;
    Ok(records.len())
}

/// Parse a CSV, build samples, split by vehicle, and write one container per
/// split into `out_dir`. Returns (train, validation, test) sample counts.
#[pyfunction]
#[pyo3(signature = (config_path, input_csv, out_dir, seed = None))]
fn preprocess(
    config_path: &str,
    input_csv: &str,
    out_dir: &str,
    seed: Option<u64>,
) -> PyResult<(usize, usize, usize)> {
    let cfg = load_config(config_path, seed)?;
    let pp = &cfg.preprocess;
    let file = fs::File::open(input_csv)?;
    let mut records = parse_records(BufReader::new(file), pp.unit).map_err(err)?;
    for r in &mut records {
        r.lane_id = cap_lane(r.lane_id).map_err(err)?;
    }
    let samples = build_samples(&records, pp.history_steps, pp.future_steps, pp.downsample_factor);
    let split = split_dataset(samples, pp.ratios, pp.split_seed).map_err(err)?;
    let out = Path::new(out_dir);
    fs::create_dir_all(out)?;
    let hash = pp.data_hash();
    write_samples_file(&out.join("train.trj"), &split.train, hash).map_err(err)?;
    write_samples_file(&out.join("validation.trj"), &split.validation, hash).map_err(err)?;
    write_samples_file(&out.join("test.trj"), &split.test, hash).map_err(err)?;
    Ok((split.train.len(), split.validation.len(), split.test.len()))
}

/// Train on a preprocessed directory and write best/last checkpoints plus
/// the loss CSV. Returns (best_epoch, final_train_loss).
#[pyfunction]
#[pyo3(signature = (config_path, data_dir, out_dir, seed = None))]
fn train(config_path: &str, data_dir: &str, out_dir: &str, seed: Option<u64>) -> PyResult<(usize, f64)> {
    let cfg = load_config(config_path, seed)?;
    let data = Path::new(data_dir);
    let (train_samples, hash) = read_samples_file(&data.join("train.trj")).map_err(err)?;
    let (val_samples, _) = read_samples_file(&data.join("validation.trj")).map_err(err)?;
    let split = DatasetSplit {
        train: train_samples,
        validation: val_samples,
        test: vec![],
    };
    let outcome = training::train(&split, &cfg.model, &cfg.train).map_err(err)?;
    if let Some(reason) = &outcome.diverged {
        return Err(PyRuntimeError::new_err(format!("training diverged: {reason}")));
    }
    let out = Path::new(out_dir);
    fs::create_dir_all(out)?;
    fs::write(out.join("loss.csv"), training::loss_history_csv(&outcome.history))?;
    save_checkpoint(&out.join("best.ckpt"), &outcome.best_params, &cfg.model, hash).map_err(err)?;
    save_checkpoint(&out.join("last.ckpt"), &outcome.final_params, &cfg.model, hash).map_err(err)?;
    let final_loss = outcome.history.last().map_or(f64::NAN, |h| h.train_loss);
    Ok((outcome.best_epoch, final_loss))
}

fn load_split(data_dir: &str, split: &str) -> PyResult<(Vec<trajpred::data::samples::TrajectorySample>, u64)> {
    let name = match split {
        "train" => "train.trj",
        "validation" => "validation.trj",
        "test" => "test.trj",
        other => return Err(PyValueError::new_err(format!("unknown split '{other}'"))),
    };
    read_samples_file(&Path::new(data_dir).join(name)).map_err(err)
}

/// Per-step RMSE of a checkpoint over a stored split.
#[pyfunction]
#[pyo3(signature = (checkpoint, data_dir, split = "test"))]
fn evaluate_checkpoint(checkpoint: &str, data_dir: &str, split: &str) -> PyResult<Vec<f64>> {
    let ckpt = load_checkpoint(Path::new(checkpoint)).map_err(err)?;
    let (samples, hash) = load_split(data_dir, split)?;
    if ckpt.data_hash != hash {
        return Err(PyValueError::new_err(
            "checkpoint/data preprocessing hash mismatch",
        ));
    }
    let report = eval::evaluate(
        &eval::Predictor::Model { params: &ckpt.params, config: &ckpt.config },
        &samples,
        "model",
    )
    .map_err(err)?;
    Ok(report.per_step)
}

/// Per-step RMSE of the constant-velocity baseline over a stored split.
#[pyfunction]
#[pyo3(signature = (data_dir, split = "test", averaged = false))]
fn evaluate_constant_velocity(data_dir: &str, split: &str, averaged: bool) -> PyResult<Vec<f64>> {
    let (samples, _) = load_split(data_dir, split)?;
    if samples.is_empty() {
        return Err(PyValueError::new_err("empty split"));
    }
    let horizon = samples[0].future.len();
    let report = eval::evaluate(
        &eval::Predictor::ConstantVelocity { horizon, averaged },
        &samples,
        "constant_velocity",
    )
    .map_err(err)?;
    Ok(report.per_step)
}

/// Predicted future (x, y) for one stored sample.
#[pyfunction]
#[pyo3(signature = (checkpoint, data_dir, index, split = "test"))]
fn predict_sample(checkpoint: &str, data_dir: &str, index: usize, split: &str) -> PyResult<Vec<(f64, f64)>> {
    let ckpt = load_checkpoint(Path::new(checkpoint)).map_err(err)?;
    let (samples, hash) = load_split(data_dir, split)?;
    if ckpt.data_hash != hash {
        return Err(PyValueError::new_err(
            "checkpoint/data preprocessing hash mismatch",
        ));
    }
    let sample = samples
        .get(index)
        .ok_or_else(|| PyValueError::new_err(format!("sample index {index} out of range")))?;
    let preds = predict_batch(&ckpt.params, &ckpt.config, std::slice::from_ref(sample)).map_err(err)?;
    Ok(preds[0].coords.iter().map(|p| (p[0], p[1])).collect())
}

#[pymodule]
fn trajpred_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(grid_cell_index, m)?)?;
    m.add_function(wrap_pyfunction!(constant_velocity_predict, m)?)?;
    m.add_function(wrap_pyfunction!(rmse_per_step, m)?)?;
    m.add_function(wrap_pyfunction!(trajectory_loss, m)?)?;
    m.add_function(wrap_pyfunction!(synth_csv, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_constant_velocity, m)?)?;
    m.add_function(wrap_pyfunction!(predict_sample, m)?)?;
    Ok(())
}
