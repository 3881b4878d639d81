use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use chrono::NaiveDate;
use cryptoseq::dataset::TimeSeriesFrame;
use cryptoseq_cli::{parse_config, Command, Experiment};

const FAST: &str = "epochs = 2\nsynth_days = 700\nsarima = none\nseed = 3\n";

fn experiment(cfg: &str, out: &Path) -> Experiment {
    Experiment::create(parse_config(cfg).unwrap(), out, Path::new(".")).unwrap()
}

fn binary(args: &[&str], cwd: &Path) -> (i32, String, String) {
    let out = Process::new(env!("CARGO_BIN_EXE_cryptoseq"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn zero_epoch_training_writes_empty_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let exp = experiment(&FAST.replace("epochs = 2", "epochs = 0"), tmp.path());
    for c in [Command::Synth, Command::Features, Command::Train] {
        exp.run(c).unwrap();
    }
    let curve = fs::read_to_string(exp.path("train_curve.csv")).unwrap();
    assert_eq!(curve.trim(), "epoch,train_loss,val_loss");
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(exp.path("train_summary.json")).unwrap()).unwrap();
    assert!(summary["best_epoch"].is_null());
    assert!(summary["rmse_train"].as_f64().unwrap().is_finite());
    assert!(summary["rmse_test"].as_f64().unwrap().is_finite());
}

#[test]
fn evaluate_emits_one_row_per_lookback() {
    let tmp = tempfile::tempdir().unwrap();
    let exp = experiment(&FAST.replace("sarima = none", "sarima = small"), tmp.path());
    for c in [Command::Synth, Command::Features, Command::Evaluate] {
        exp.run(c).unwrap();
    }
    let table = fs::read_to_string(exp.path("lookback_rmse.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "lookback,rmse_train,rmse_test");
    assert_eq!(rows.len(), 5);
    for (row, lookback) in rows[1..].iter().zip(["15", "30", "45", "60"]) {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells[0], lookback);
        assert!(cells[1..].iter().all(|c| c.parse::<f64>().unwrap() > 0.0));
    }
    let sarima: serde_json::Value = serde_json::from_str(&fs::read_to_string(exp.path("sarima.json")).unwrap()).unwrap();
    assert!(sarima["rmse_test"].as_f64().unwrap() > 0.0);
    assert!(sarima["fit"]["sigma2"].as_f64().unwrap() > 0.0);
}

#[test]
fn predictions_cover_the_test_range_and_feed_the_backtest() {
    let tmp = tempfile::tempdir().unwrap();
    let exp = experiment(&format!("{FAST}strategy = buy_sell\nemit_buy_and_hold = true\n"), tmp.path());
    for c in [Command::Synth, Command::Features, Command::Train, Command::Backtest] {
        exp.run(c).unwrap();
    }
    let preds = TimeSeriesFrame::read_csv_path(&exp.path("predictions.csv")).unwrap();
    assert_eq!(preds.names(), ["predicted", "actual"]);
    assert_eq!(preds.dates()[0], NaiveDate::from_ymd_opt(2019, 1, 1).unwrap());
    assert_eq!(preds.len(), 181);
    let values = fs::read_to_string(exp.path("backtest_buy_sell.csv")).unwrap();
    assert!(values.starts_with("date,signal,portfolio_value\n"));
    assert_eq!(values.lines().count(), 182);
    let ledger = fs::read_to_string(exp.path("ledger_buy_sell.csv")).unwrap();
    assert!(ledger.starts_with("date,side,price,notional,fee\n"));
    let hold = fs::read_to_string(exp.path("buy_and_hold.csv")).unwrap();
    assert_eq!(hold.lines().count(), 182);
}

fn write_source(dir: &Path, name: &str, column: &str, skip_weekends: bool, f: impl Fn(usize) -> f64) {
    let start = NaiveDate::from_ymd_opt(2017, 1, 1).unwrap();
    let mut text = format!("date,{column}\n");
    for (i, d) in start.iter_days().take(950).enumerate() {
        use chrono::Datelike;
        if skip_weekends && d.weekday().number_from_monday() > 5 {
            continue;
        }
        text.push_str(&format!("{d},{}\n", f(i)));
    }
    fs::write(dir.join(name), text).unwrap();
}

#[test]
fn csv_sources_are_merged_filled_and_extended() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("inputs");
    fs::create_dir_all(&data).unwrap();
    write_source(&data, "btc_price.csv", "price", false, |i| 1000.0 + 10.0 * (i as f64 * 0.05).sin() + i as f64);
    write_source(&data, "gold.csv", "gold", true, |i| 1200.0 + ((i * 7919) % 113) as f64);
    let cfg = "data_source = csv\ndata_dir = inputs\nderive_features = true\nepochs = 1\nsarima = none\n\
               train_start = 2017-01-01\neval_lookbacks = 30\n";
    let exp = Experiment::create(parse_config(cfg).unwrap(), &tmp.path().join("runs"), tmp.path()).unwrap();
    exp.run(Command::Pipeline).unwrap();
    let features = TimeSeriesFrame::read_csv_path(&exp.path("features.csv")).unwrap();
    assert_eq!(features.missing_count(), 0);
    assert!(features.is_contiguous());
    assert_eq!(features.names()[0], "price");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(exp.path("feature_report.json")).unwrap()).unwrap();
    let listed: Vec<&str> = report["features"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["feature"].as_str().unwrap())
        .collect();
    for name in ["gold", "daily_return", "volatility", "macd_line", "macd_signal", "macd_histogram"] {
        assert!(listed.contains(&name), "{name} missing from report");
    }
    assert!(exp.path("backtest_long_short.csv").exists());
}

#[test]
fn output_directory_depends_on_config_content() {
    let tmp = tempfile::tempdir().unwrap();
    let a = experiment(FAST, tmp.path());
    let b = experiment(&format!("# same settings\n{FAST}"), tmp.path());
    let c = experiment(&FAST.replace("seed = 3", "seed = 4"), tmp.path());
    assert_eq!(a.dir, b.dir);
    assert_ne!(a.dir, c.dir);
    let resolved = fs::read_to_string(a.path("config.resolved")).unwrap();
    assert_eq!(parse_config(&resolved).unwrap(), a.config);
}

fn only_dir(root: &Path) -> PathBuf {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1);
    dirs.pop().unwrap()
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    fs::write(cwd.join("bad.cfg"), "lookback = 30\nwindow = 3\n").unwrap();
    let (code, _, err) = binary(&["train", "--config", "bad.cfg"], cwd);
    assert_eq!(code, 1);
    assert!(err.contains("line 2") && err.contains("'window'"), "{err}");
    assert_eq!(err.lines().count(), 1);

    let (code, _, _) = binary(&["train", "--config", "absent.cfg"], cwd);
    assert_eq!(code, 2);

    fs::write(cwd.join("fast.cfg"), FAST).unwrap();
    let (code, _, err) = binary(&["train", "--config", "fast.cfg", "--out", "runs"], cwd);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("features.csv"), "{err}");

    fs::write(cwd.join("wild.cfg"), format!("{FAST}learning_rate = 1e300\nclip_norm = 1e300\n")).unwrap();
    for cmd in ["synth", "features"] {
        assert_eq!(binary(&[cmd, "--config", "wild.cfg", "--out", "wild"], cwd).0, 0);
    }
    let (code, _, err) = binary(&["train", "--config", "wild.cfg", "--out", "wild"], cwd);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("diverged"), "{err}");
}

#[test]
fn binary_seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    fs::write(cwd.join("fast.cfg"), FAST).unwrap();
    let (code, stdout, _) = binary(&["synth", "--config", "fast.cfg", "--out", "runs", "--seed", "11"], cwd);
    assert_eq!(code, 0);
    let dir = only_dir(&cwd.join("runs"));
    assert_eq!(stdout.trim(), Path::new("runs").join(dir.file_name().unwrap()).display().to_string());
    let resolved = fs::read_to_string(dir.join("config.resolved")).unwrap();
    assert!(resolved.contains("seed = 11\n"));
}
