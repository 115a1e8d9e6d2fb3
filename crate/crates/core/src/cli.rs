//! Command-line entry points tying the pipeline together.
//!
//! Exit codes: 0 success, 2 for configuration/compatibility problems, 1 for
//! runtime failures. All outputs are deterministic given equal inputs and
//! seeds; wall-clock timestamps only ever go to sidecar `.log` files.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::data::records::{cap_lane, parse_records, Unit};
use crate::data::samples::build_samples;
use crate::data::split::split_dataset;
use crate::data::store::{read_samples_file, write_samples_file};
use crate::error::{Error, Result};
use crate::eval::{evaluate, plot_csv, report_csv, report_table, Predictor, RmseReport};
use crate::model::{load_checkpoint, predict_batch, save_checkpoint};
use crate::selfcheck;
use crate::synth::{generate, write_csv};
use crate::training::{loss_history_csv, train};

#[derive(Parser)]
#[command(
    name = "trajpred",
    about = "Highway trajectory prediction: synthesize, preprocess, train, evaluate",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, ValueEnum)]
enum UnitArg {
    Meters,
    Feet,
}

impl From<UnitArg> for Unit {
    fn from(u: UnitArg) -> Unit {
        match u {
            UnitArg::Meters => Unit::Meters,
            UnitArg::Feet => Unit::Feet,
        }
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic CSV dataset from the config's [synth] section.
    Synth(SynthArgs),
    /// Parse a CSV, build grid samples, and write one container per split.
    Preprocess(PreprocessArgs),
    /// Train a model and write a run directory (checkpoints, loss CSV).
    Train(TrainArgs),
    /// Per-step RMSE of checkpoints and baselines on a stored split.
    Evaluate(EvaluateArgs),
    /// Predict future coordinates for selected samples, as CSV.
    Predict(PredictArgs),
    /// Merge evaluation CSVs into one wide per-step RMSE table.
    ExportPlot(ExportPlotArgs),
    /// Run gradient checks and the scatter/grid oracles.
    Selfcheck,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Master seed override (cascades into every seeded stage).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    config: PathBuf,
    /// Input CSV of raw records.
    #[arg(long)]
    input: PathBuf,
    /// Output directory for the split containers.
    #[arg(long)]
    out: PathBuf,
    /// Position unit of the input file (overrides the config).
    #[arg(long)]
    unit: Option<UnitArg>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Directory produced by `preprocess`.
    #[arg(long)]
    data: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Optional config; its [evaluate] section controls the baselines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint(s) to evaluate; repeatable.
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
    /// Which split to evaluate on.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Force-include the constant-velocity baseline.
    #[arg(long)]
    constant_velocity: bool,
    /// Report directory (table + CSV); the table always prints to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Comma-separated sample indices; all samples when omitted.
    #[arg(long)]
    samples: Option<String>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportPlotArgs {
    /// Evaluation CSVs produced by `evaluate`; repeatable.
    #[arg(long = "report")]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(args) => cmd_synth(args),
        Command::Preprocess(args) => cmd_preprocess(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Predict(args) => cmd_predict(args),
        Command::ExportPlot(args) => cmd_export_plot(args),
        Command::Selfcheck => cmd_selfcheck(),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_path(path)?;
    if let Some(seed) = seed {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

fn append_log(dir: &Path, name: &str, message: &str) {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let line = format!("[unix {secs}] {message}\n");
    let path = dir.join(name);
    let existing = fs::read_to_string(&path).unwrap_or_default();
    let _ = fs::write(&path, existing + &line);
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cfg = load_config(&args.config, args.seed)?;
    let synth = cfg
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [synth] section".into()))?;
    let records = generate(synth)?;
    let mut out = Vec::new();
    write_csv(&mut out, &records)?;
    fs::write(&args.out, out)?;
    println!(
        "wrote {} records for {} vehicles to {}",
        records.len(),
        synth.n_vehicles,
        args.out.display()
    );
    Ok(())
}

fn cmd_preprocess(args: PreprocessArgs) -> Result<()> {
    let mut cfg = load_config(&args.config, args.seed)?;
    if let Some(unit) = args.unit {
        cfg.preprocess.unit = unit.into();
    }
    let pp = &cfg.preprocess;

    let file = fs::File::open(&args.input)?;
    let mut records = parse_records(BufReader::new(file), pp.unit)?;
    for r in &mut records {
        r.lane_id = cap_lane(r.lane_id)?;
    }
    let samples = build_samples(&records, pp.history_steps, pp.future_steps, pp.downsample_factor);
    let split = split_dataset(samples, pp.ratios, pp.split_seed)?;

    fs::create_dir_all(&args.out)?;
    let hash = pp.data_hash();
    write_samples_file(&args.out.join("train.trj"), &split.train, hash)?;
    write_samples_file(&args.out.join("validation.trj"), &split.validation, hash)?;
    write_samples_file(&args.out.join("test.trj"), &split.test, hash)?;
    echo_config(&args.out, &cfg)?;
    println!(
        "wrote splits to {}: {} train / {} validation / {} test samples",
        args.out.display(),
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    Ok(())
}

fn split_path(data: &Path, split: SplitArg) -> PathBuf {
    match split {
        SplitArg::Train => data.join("train.trj"),
        SplitArg::Validation => data.join("validation.trj"),
        SplitArg::Test => data.join("test.trj"),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = load_config(&args.config, args.seed)?;
    let (train_samples, train_hash) = read_samples_file(&args.data.join("train.trj"))?;
    let (val_samples, val_hash) = read_samples_file(&args.data.join("validation.trj"))?;
    if train_hash != val_hash {
        return Err(Error::Compatibility(
            "train and validation containers were built with different preprocessing configs".into(),
        ));
    }
    let expected = cfg.preprocess.data_hash();
    if train_hash != expected {
        return Err(Error::Compatibility(format!(
            "dataset was preprocessed with a different config (hash {train_hash:#018x}, config says {expected:#018x})"
        )));
    }

    fs::create_dir_all(&args.out)?;
    echo_config(&args.out, &cfg)?;
    append_log(&args.out, "train.log", "training started");

    let split = crate::data::split::DatasetSplit {
        train: train_samples,
        validation: val_samples,
        test: Vec::new(),
    };
    let outcome = train(&split, &cfg.model, &cfg.train)?;

    fs::write(args.out.join("loss.csv"), loss_history_csv(&outcome.history))?;
    save_checkpoint(&args.out.join("best.ckpt"), &outcome.best_params, &cfg.model, train_hash)?;
    save_checkpoint(&args.out.join("last.ckpt"), &outcome.final_params, &cfg.model, train_hash)?;

    if let Some(reason) = outcome.diverged {
        fs::write(
            args.out.join("diverged.txt"),
            format!("{reason}\nlast finite checkpoint: last.ckpt\n"),
        )?;
        append_log(&args.out, "train.log", &format!("aborted: {reason}"));
        return Err(Error::Diverged(reason));
    }

    append_log(&args.out, "train.log", "training finished");
    println!(
        "trained {} epochs; best epoch {} (checkpoints in {})",
        outcome.history.len(),
        outcome.best_epoch,
        args.out.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => Some(RunConfig::from_path(path)?),
        None => None,
    };
    let (samples, data_hash) = read_samples_file(&split_path(&args.data, args.split))?;
    if samples.is_empty() {
        return Err(Error::EmptySequence("evaluation split"));
    }
    let horizon = samples[0].future.len();

    let eval_cfg = cfg.as_ref().map(|c| c.evaluate.clone()).unwrap_or_default();
    let include_cv = args.constant_velocity || eval_cfg.constant_velocity;

    let mut reports: Vec<RmseReport> = Vec::new();
    let mut used_tags: Vec<String> = Vec::new();
    for path in &args.checkpoints {
        let ckpt = load_checkpoint(path)?;
        if ckpt.data_hash != data_hash {
            return Err(Error::Compatibility(format!(
                "checkpoint {} was trained on data with hash {:#018x}, but this dataset has {:#018x}",
                path.display(),
                ckpt.data_hash,
                data_hash
            )));
        }
        let mut tag = ckpt.config.variant.to_string();
        let copies = used_tags.iter().filter(|t| **t == tag).count();
        used_tags.push(tag.clone());
        if copies > 0 {
            tag = format!("{tag}#{}", copies + 1);
        }
        let predictor = Predictor::Model {
            params: &ckpt.params,
            config: &ckpt.config,
        };
        reports.push(evaluate(&predictor, &samples, &tag)?);
    }
    if include_cv {
        let averaged = eval_cfg.averaged_velocity;
        let tag = if averaged { "constant_velocity_avg" } else { "constant_velocity" };
        let predictor = Predictor::ConstantVelocity { horizon, averaged };
        reports.push(evaluate(&predictor, &samples, tag)?);
    }
    if reports.is_empty() {
        return Err(Error::Config(
            "nothing to evaluate: pass --checkpoint and/or --constant-velocity".into(),
        ));
    }

    print!("{}", report_table(&reports));
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("report.txt"), report_table(&reports))?;
        fs::write(out.join("rmse.csv"), report_csv(&reports))?;
        if let Some(cfg) = &cfg {
            echo_config(out, cfg)?;
        }
    }
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let (samples, data_hash) = read_samples_file(&split_path(&args.data, args.split))?;
    if ckpt.data_hash != data_hash {
        return Err(Error::Compatibility(format!(
            "checkpoint data hash {:#018x} does not match dataset hash {:#018x}",
            ckpt.data_hash, data_hash
        )));
    }
    let indices: Vec<usize> = match &args.samples {
        None => (0..samples.len()).collect(),
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad sample index '{s}'")))
            })
            .collect::<Result<_>>()?,
    };
    for &i in &indices {
        if i >= samples.len() {
            return Err(Error::Config(format!(
                "sample index {i} out of range (split has {})",
                samples.len()
            )));
        }
    }
    let selected: Vec<_> = indices.iter().map(|&i| samples[i].clone()).collect();
    let preds = predict_batch(&ckpt.params, &ckpt.config, &selected)?;

    let mut out = String::from("sample_index,vehicle_id,anchor_frame,step,x,y\n");
    for (&i, pred) in indices.iter().zip(&preds) {
        let s = &samples[i];
        for (k, c) in pred.coords.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                i,
                s.vehicle_id,
                s.anchor_frame,
                k + 1,
                c[0],
                c[1]
            ));
        }
    }
    fs::write(&args.out, out)?;
    println!("wrote {} predictions to {}", preds.len(), args.out.display());
    Ok(())
}

fn cmd_export_plot(args: ExportPlotArgs) -> Result<()> {
    if args.reports.is_empty() {
        return Err(Error::Config("pass at least one --report CSV".into()));
    }
    let mut reports: Vec<RmseReport> = Vec::new();
    for path in &args.reports {
        let text = fs::read_to_string(path)?;
        reports.extend(parse_report_csv(&text, path)?);
    }
    fs::write(&args.out, plot_csv(&reports))?;
    println!("wrote plot CSV for {} models to {}", reports.len(), args.out.display());
    Ok(())
}

fn parse_report_csv(text: &str, path: &Path) -> Result<Vec<RmseReport>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("model_tag,step,rmse") => {}
        _ => {
            return Err(Error::Format(format!(
                "{} is not an evaluation CSV (expected 'model_tag,step,rmse' header)",
                path.display()
            )))
        }
    }
    let mut reports: Vec<RmseReport> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Parse {
                line: lineno + 2,
                msg: format!("expected 3 fields in {}", path.display()),
            });
        }
        let rmse: f64 = parts[2].parse().map_err(|_| Error::Parse {
            line: lineno + 2,
            msg: format!("bad rmse value '{}'", parts[2]),
        })?;
        match reports.last_mut() {
            Some(r) if r.model_tag == parts[0] => r.per_step.push(rmse),
            _ => reports.push(RmseReport {
                model_tag: parts[0].to_string(),
                per_step: vec![rmse],
                sample_count: 0,
            }),
        }
    }
    Ok(reports)
}

fn cmd_selfcheck() -> Result<()> {
    let mut failed = false;

    let results = selfcheck::gradient_suite()?;
    let mut worst: f64 = 0.0;
    for (name, err) in &results {
        let ok = *err < selfcheck::GRADIENT_TOLERANCE;
        println!(
            "gradient {:<28} max rel err {:<12.3e} {}",
            name,
            err,
            if ok { "ok" } else { "FAIL" }
        );
        failed |= !ok;
        worst = worst.max(*err);
    }
    println!("max gradient rel. error: {worst:.3e}");

    match selfcheck::scatter_oracle(1000, 2024) {
        Ok(()) => println!("masked scatter vs brute-force oracle (1000 cases): ok"),
        Err(e) => {
            println!("masked scatter oracle: FAIL ({e})");
            failed = true;
        }
    }
    match selfcheck::grid_partition_sweep(0.01) {
        Ok(()) => println!("grid partition sweep (0.01 m): ok"),
        Err(e) => {
            println!("grid partition sweep: FAIL ({e})");
            failed = true;
        }
    }

    if failed {
        Err(Error::Diverged("selfcheck failed".into()))
    } else {
        println!("selfcheck passed");
        Ok(())
    }
}
