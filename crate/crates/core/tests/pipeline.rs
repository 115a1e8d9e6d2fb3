//! End-to-end CLI tests over the bundled demo config: every subcommand, the
//! documented exit codes, and the checkpoint/dataset compatibility guard.

use std::fs;
use std::path::{Path, PathBuf};

use trajpred::cli::run;

fn demo_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/demo.toml")
}

fn arg(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn cli(args: &[String]) -> i32 {
    let mut argv = vec!["trajpred".to_string()];
    argv.extend_from_slice(args);
    run(argv.iter())
}

#[test]
fn demo_config_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = demo_config();
    let csv = root.join("data.csv");
    let splits = root.join("splits");
    let run_dir = root.join("run");
    let report = root.join("report");

    assert_eq!(
        cli(&["synth".into(), "--config".into(), arg(&config), "--out".into(), arg(&csv)]),
        0
    );
    assert!(csv.is_file());

    assert_eq!(
        cli(&[
            "preprocess".into(),
            "--config".into(),
            arg(&config),
            "--input".into(),
            arg(&csv),
            "--out".into(),
            arg(&splits),
        ]),
        0
    );
    for split in ["train.trj", "validation.trj", "test.trj"] {
        assert!(splits.join(split).is_file(), "missing {split}");
    }
    assert!(splits.join("config.toml").is_file());

    assert_eq!(
        cli(&[
            "train".into(),
            "--config".into(),
            arg(&config),
            "--data".into(),
            arg(&splits),
            "--out".into(),
            arg(&run_dir),
        ]),
        0
    );
    let loss = fs::read_to_string(run_dir.join("loss.csv")).unwrap();
    assert!(loss.starts_with("epoch,train_loss,val_loss\n"));
    assert_eq!(loss.lines().count(), 4, "3 epochs + header");
    assert!(run_dir.join("best.ckpt").is_file());
    assert!(run_dir.join("last.ckpt").is_file());

    assert_eq!(
        cli(&[
            "evaluate".into(),
            "--config".into(),
            arg(&config),
            "--data".into(),
            arg(&splits),
            "--checkpoint".into(),
            arg(&run_dir.join("best.ckpt")),
            "--out".into(),
            arg(&report),
        ]),
        0
    );
    let rmse = fs::read_to_string(report.join("rmse.csv")).unwrap();
    assert!(rmse.starts_with("model_tag,step,rmse\n"));
    // full model and constant-velocity baseline, one row per step
    assert_eq!(rmse.lines().count(), 1 + 2 * 5);
    assert!(rmse.contains("full,1,"));
    assert!(rmse.contains("constant_velocity,5,"));
    let table = fs::read_to_string(report.join("report.txt")).unwrap();
    assert!(table.contains("full") && table.contains("constant_velocity"));

    // Predictions for three samples.
    let preds = root.join("preds.csv");
    assert_eq!(
        cli(&[
            "predict".into(),
            "--checkpoint".into(),
            arg(&run_dir.join("best.ckpt")),
            "--data".into(),
            arg(&splits),
            "--samples".into(),
            "0,1,5".into(),
            "--out".into(),
            arg(&preds),
        ]),
        0
    );
    let preds = fs::read_to_string(&preds).unwrap();
    assert_eq!(preds.lines().count(), 1 + 3 * 5, "header + 3 samples x 5 steps");
    assert!(preds.starts_with("sample_index,vehicle_id,anchor_frame,step,x,y\n"));

    // Plot export from the evaluation CSV.
    let plot = root.join("plot.csv");
    assert_eq!(
        cli(&[
            "export-plot".into(),
            "--report".into(),
            arg(&report.join("rmse.csv")),
            "--out".into(),
            arg(&plot),
        ]),
        0
    );
    let plot = fs::read_to_string(&plot).unwrap();
    assert_eq!(plot.lines().next().unwrap(), "step,full,constant_velocity");
    assert_eq!(plot.lines().count(), 6);
}

#[test]
fn preprocess_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = demo_config();
    let csv = root.join("data.csv");
    cli(&["synth".into(), "--config".into(), arg(&config), "--out".into(), arg(&csv)]);

    let mut blobs = Vec::new();
    for out in ["a", "b"] {
        let splits = root.join(out);
        assert_eq!(
            cli(&[
                "preprocess".into(),
                "--config".into(),
                arg(&config),
                "--input".into(),
                arg(&csv),
                "--out".into(),
                arg(&splits),
            ]),
            0
        );
        blobs.push((
            fs::read(splits.join("train.trj")).unwrap(),
            fs::read(splits.join("test.trj")).unwrap(),
        ));
    }
    assert_eq!(blobs[0], blobs[1], "preprocess outputs must be byte-identical");
}

#[test]
fn mismatched_data_hash_is_a_compatibility_error() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = demo_config();
    let csv = root.join("data.csv");
    let splits = root.join("splits");
    let run_dir = root.join("run");
    cli(&["synth".into(), "--config".into(), arg(&config), "--out".into(), arg(&csv)]);
    cli(&[
        "preprocess".into(), "--config".into(), arg(&config),
        "--input".into(), arg(&csv), "--out".into(), arg(&splits),
    ]);
    cli(&[
        "train".into(), "--config".into(), arg(&config),
        "--data".into(), arg(&splits), "--out".into(), arg(&run_dir),
    ]);

    // Rebuild the dataset with a different preprocessing config.
    let other_cfg = root.join("other.toml");
    let text = fs::read_to_string(&config).unwrap();
    fs::write(&other_cfg, text.replace("downsample_factor = 2", "downsample_factor = 1")).unwrap();
    let other_splits = root.join("other_splits");
    assert_eq!(
        cli(&[
            "preprocess".into(), "--config".into(), arg(&other_cfg),
            "--input".into(), arg(&csv), "--out".into(), arg(&other_splits),
        ]),
        0
    );

    let code = cli(&[
        "evaluate".into(),
        "--data".into(),
        arg(&other_splits),
        "--checkpoint".into(),
        arg(&run_dir.join("best.ckpt")),
    ]);
    assert_eq!(code, 2, "hash mismatch must exit 2");
}

#[test]
fn invalid_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "not_a_key = true\n").unwrap();
    let out = dir.path().join("out.csv");
    assert_eq!(
        cli(&["synth".into(), "--config".into(), arg(&bad), "--out".into(), arg(&out)]),
        2
    );

    // Structurally valid config without the [synth] section the command needs.
    let no_synth = dir.path().join("nosynth.toml");
    fs::write(&no_synth, "seed = 1\n").unwrap();
    assert_eq!(
        cli(&["synth".into(), "--config".into(), arg(&no_synth), "--out".into(), arg(&out)]),
        2
    );

    // Unknown subcommand is a usage error.
    assert_eq!(cli(&["frobnicate".into()]), 2);
}

#[test]
fn train_rejects_dataset_from_other_config() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = demo_config();
    let csv = root.join("data.csv");
    let splits = root.join("splits");
    cli(&["synth".into(), "--config".into(), arg(&config), "--out".into(), arg(&csv)]);
    cli(&[
        "preprocess".into(), "--config".into(), arg(&config),
        "--input".into(), arg(&csv), "--out".into(), arg(&splits),
    ]);

    let other_cfg = root.join("other.toml");
    let text = fs::read_to_string(&config).unwrap();
    fs::write(&other_cfg, text.replace("downsample_factor = 2", "downsample_factor = 1")).unwrap();
    let code = cli(&[
        "train".into(), "--config".into(), arg(&other_cfg),
        "--data".into(), arg(&splits), "--out".into(), arg(&root.join("run")),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn selfcheck_exits_zero() {
    assert_eq!(cli(&["selfcheck".into()]), 0);
}
