use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use chrono::{Days, NaiveDate};
use cryptoseq::backtest::{buy_and_hold, run_buy_sell, run_long_short, signals, BacktestReport, SignalSeries};
use cryptoseq::dataset::{forward_fill_all, make_windows, merge_frames, split, synth_generate, TimeSeriesFrame};
use cryptoseq::features::{
    annualized_volatility, apply_normalizer, daily_returns, fit_normalizer, macd, prune_collinear, Direction, Normalizer,
};
use cryptoseq::numerics::RandomStream;
use cryptoseq::sarima::{self, SarimaOrder};
use cryptoseq::training::{predict_all, train_and_evaluate, TrainReport};
use cryptoseq::{RecurrentNetwork, WindowedDataset};
use log::info;

use crate::config::{DataSource, ExperimentConfig, SarimaGrid, Strategy};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Synth,
    Features,
    Train,
    Evaluate,
    Backtest,
    Pipeline,
}

pub const SYNTHETIC_CSV: &str = "data/synthetic.csv";
pub const FEATURES_CSV: &str = "features.csv";
pub const FEATURE_REPORT: &str = "feature_report.json";
pub const TRAIN_CURVE: &str = "train_curve.csv";
pub const TRAIN_SUMMARY: &str = "train_summary.json";
pub const MODEL_PARAMS: &str = "model.params";
pub const PREDICTIONS_CSV: &str = "predictions.csv";
pub const LOOKBACK_RMSE: &str = "lookback_rmse.csv";
pub const SARIMA_JSON: &str = "sarima.json";
pub const BUY_AND_HOLD_CSV: &str = "buy_and_hold.csv";

/// One configuration bound to its output directory `<out>/<content hash>`.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
    base_dir: PathBuf,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput {
            path: path.to_path_buf(),
            reason: hint.into(),
        })
    }
}

/// Row range of `frame` falling inside `[from, to]`.
fn rows_between(frame: &TimeSeriesFrame, from: NaiveDate, to: NaiveDate) -> Range<usize> {
    let d = frame.dates();
    let start = d.partition_point(|x| *x < from);
    let end = d.partition_point(|x| *x <= to);
    start..end.max(start)
}

/// Drops rows before the first one on which every column has a value.
fn trim_leading(frame: &TimeSeriesFrame) -> TimeSeriesFrame {
    let width = frame.width();
    let first = (0..frame.len()).find(|&r| (0..width).all(|c| frame.get(r, c).is_some()));
    match first {
        Some(r) => frame.slice_rows(r, frame.len()),
        None => frame.slice_rows(0, 0),
    }
}

/// Appends return, volatility and MACD columns computed from `target`.
fn derive_columns(frame: &TimeSeriesFrame, target: &str, window: usize) -> Result<TimeSeriesFrame> {
    let price = frame.values(target)?;
    let n = price.len();
    let returns = daily_returns(&price)?;
    let vol = annualized_volatility(&returns, window)?;
    let m = macd(&price)?;
    let pad = |lead: usize, v: &[f64]| -> Vec<Option<f64>> {
        std::iter::repeat_n(None, lead).chain(v.iter().map(|&x| Some(x))).collect()
    };
    let dense = |v: &[f64]| v.iter().map(|&x| Some(x)).collect::<Vec<_>>();
    let out = frame
        .with_column("daily_return", pad(1, &returns))?
        .with_column("volatility", pad(n - vol.len(), &vol))?
        .with_column("macd_line", dense(&m.line))?
        .with_column("macd_signal", dense(&m.signal))?
        .with_column("macd_histogram", dense(&m.histogram))?;
    Ok(trim_leading(&out))
}

struct Prepared {
    raw: TimeSeriesFrame,
    norm: Normalizer,
    train: TimeSeriesFrame,
    validation: TimeSeriesFrame,
    test: TimeSeriesFrame,
}

struct TrainedModel {
    net: RecurrentNetwork,
    report: TrainReport,
    test_set: WindowedDataset,
}

impl Experiment {
    /// Creates `<out_root>/<hash>` and writes `config.resolved`. Relative data
    /// paths resolve against `base_dir`.
    pub fn create(config: ExperimentConfig, out_root: &Path, base_dir: &Path) -> Result<Self> {
        let dir = out_root.join(config.content_hash());
        fs::create_dir_all(&dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
        write_file(&dir.join("config.resolved"), &config.canonical())?;
        Ok(Self {
            config,
            dir,
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn run(&self, command: Command) -> Result<()> {
        match command {
            Command::Synth => self.synth(),
            Command::Features => self.features(),
            Command::Train => self.train(),
            Command::Evaluate => self.evaluate(),
            Command::Backtest => self.backtest(),
            Command::Pipeline => {
                if self.config.data_source == DataSource::Synthetic {
                    self.synth()?;
                }
                self.features()?;
                self.train()?;
                self.evaluate()?;
                self.backtest()
            }
        }
    }

    pub fn synth(&self) -> Result<()> {
        let c = &self.config;
        let frame = synth_generate(c.seed, c.synth_days, c.synth_features)?;
        let data = self.path("data");
        fs::create_dir_all(&data).map_err(|e| CliError::io(format!("creating {}", data.display()), e))?;
        frame.write_csv_path(&self.path(SYNTHETIC_CSV))?;
        info!("wrote {} synthetic rows", frame.len());
        Ok(())
    }

    fn load_sources(&self) -> Result<TimeSeriesFrame> {
        let c = &self.config;
        let frames = match c.data_source {
            DataSource::Synthetic => {
                let path = self.path(SYNTHETIC_CSV);
                require(&path, "run `synth` first")?;
                vec![TimeSeriesFrame::read_csv_path(&path)?]
            }
            DataSource::Csv => {
                let dir = self.base_dir.join(&c.data_dir);
                let listing = fs::read_dir(&dir).map_err(|e| CliError::MissingInput {
                    path: dir.clone(),
                    reason: e.to_string(),
                })?;
                let mut files: Vec<PathBuf> = listing
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                    .collect();
                files.sort();
                if files.is_empty() {
                    return Err(CliError::MissingInput {
                        path: dir,
                        reason: "no .csv files".into(),
                    });
                }
                files
                    .iter()
                    .map(|p| {
                        info!("reading {}", p.display());
                        TimeSeriesFrame::read_csv_path(p)
                    })
                    .collect::<cryptoseq::Result<Vec<_>>>()?
            }
        };
        let merged = merge_frames(&frames)?.reindex_daily();
        let filled = forward_fill_all(&trim_leading(&merged))?;
        if c.derive_features {
            derive_columns(&filled, &c.target_column, c.volatility_window)
        } else {
            Ok(filled)
        }
    }

    pub fn features(&self) -> Result<()> {
        let c = &self.config;
        let frame = self.load_sources()?;
        let train_rows = rows_between(&frame, c.split.train.0, c.split.train.1);
        let train_part = frame.slice_rows(train_rows.start, train_rows.end);
        let report = prune_collinear(&train_part, &c.target_column, c.correlation_threshold, &c.forced_drops)?;
        info!("kept {} of {} columns", report.kept.len(), frame.width());
        frame.select(&report.kept)?.write_csv_path(&self.path(FEATURES_CSV))?;
        write_file(&self.path(FEATURE_REPORT), &report.to_json()?)
    }

    fn prepare(&self) -> Result<Prepared> {
        let c = &self.config;
        let path = self.path(FEATURES_CSV);
        require(&path, "run `features` first")?;
        let raw = TimeSeriesFrame::read_csv_path(&path)?;
        let fit_rows = if c.paper_mode_normalization {
            0..raw.len()
        } else {
            rows_between(&raw, c.split.train.0, c.split.train.1)
        };
        let norm = fit_normalizer(&raw, fit_rows)?;
        let z = apply_normalizer(&norm, &raw, Direction::Forward)?;
        let (train, validation, test) = split(&z, &c.split)?;
        Ok(Prepared {
            raw,
            norm,
            train,
            validation,
            test,
        })
    }

    fn fit_model(&self, data: &Prepared, lookback: usize) -> Result<TrainedModel> {
        let c = &self.config;
        let target = &c.target_column;
        let train_set = make_windows(&data.train, lookback, target, None)?;
        let val_set = make_windows(&data.validation, lookback, target, Some(&data.train))?;
        let test_set = make_windows(&data.test, lookback, target, Some(&data.validation))?;
        let spec = c.network_spec(lookback, train_set.input_width())?;
        let init = RecurrentNetwork::init(spec, &mut RandomStream::new(c.seed))?;
        info!(
            "training {} with lookback {lookback} on {} samples",
            c.model_family,
            train_set.len()
        );
        let (net, report) = train_and_evaluate(&init, &train_set, &val_set, &test_set, &c.train_config())?;
        Ok(TrainedModel { net, report, test_set })
    }

    pub fn train(&self) -> Result<()> {
        let c = &self.config;
        let data = self.prepare()?;
        let model = self.fit_model(&data, c.lookback)?;

        let mut curve = Vec::new();
        model.report.write_curve_csv(&mut curve)?;
        write_file(&self.path(TRAIN_CURVE), &String::from_utf8_lossy(&curve))?;
        write_file(&self.path(TRAIN_SUMMARY), &model.report.summary_json()?)?;
        let params = self.path(MODEL_PARAMS);
        let file = fs::File::create(&params).map_err(|e| CliError::io(format!("writing {}", params.display()), e))?;
        model.net.write_params(std::io::BufWriter::new(file))?;

        let predicted = predict_all(&model.net, &model.test_set)?;
        let dates: Vec<NaiveDate> = model.test_set.samples.iter().map(|s| s.target_date).collect();
        let actual_raw = data.raw.between(dates[0], dates[dates.len() - 1]).values(&c.target_column)?;
        let predicted_raw = predicted
            .iter()
            .map(|&z| data.norm.inverse_value(&c.target_column, z))
            .collect::<cryptoseq::Result<Vec<f64>>>()?;
        let table = TimeSeriesFrame::from_dense(
            dates,
            vec![("predicted".into(), predicted_raw), ("actual".into(), actual_raw)],
        )?;
        table.write_csv_path(&self.path(PREDICTIONS_CSV))?;
        info!(
            "best epoch {:?}, train RMSE {}, test RMSE {:?}",
            model.report.best_epoch, model.report.rmse_train, model.report.rmse_test
        );
        Ok(())
    }

    pub fn evaluate(&self) -> Result<()> {
        let c = &self.config;
        let data = self.prepare()?;
        let mut table = String::from("lookback,rmse_train,rmse_test\n");
        for &lookback in &c.eval_lookbacks {
            let model = self.fit_model(&data, lookback)?;
            let test = model.report.rmse_test.unwrap_or(f64::NAN);
            let _ = writeln!(table, "{lookback},{},{test}", model.report.rmse_train);
        }
        write_file(&self.path(LOOKBACK_RMSE), &table)?;

        let grid: Vec<SarimaOrder> = match c.sarima {
            SarimaGrid::None => return Ok(()),
            SarimaGrid::Small => sarima::small_grid(),
            SarimaGrid::Default => sarima::default_grid(),
        };
        let series: Vec<f64> = [&data.train, &data.validation, &data.test]
            .iter()
            .map(|f| f.values(&c.target_column))
            .collect::<cryptoseq::Result<Vec<_>>>()?
            .concat();
        let n_train = data.train.len();
        let test_start = n_train + data.validation.len();
        info!("fitting SARIMA over {} orders", grid.len());
        let fit = sarima::fit(&series[..n_train], &grid)?;
        let pred = sarima::rolling_one_step(&fit, &series, test_start)?;
        let rmse = cryptoseq::training::rmse(&pred, &series[test_start..])?;
        let summary: serde_json::Value = serde_json::from_str(&fit.summary_json()?).map_err(cryptoseq::Error::from)?;
        let doc = serde_json::json!({ "fit": summary, "rmse_test": rmse });
        write_file(
            &self.path(SARIMA_JSON),
            &serde_json::to_string_pretty(&doc).map_err(cryptoseq::Error::from)?,
        )
    }

    pub fn backtest(&self) -> Result<()> {
        let c = &self.config;
        if c.strategy == Strategy::None && !c.emit_buy_and_hold {
            info!("strategy none, nothing to backtest");
            return Ok(());
        }
        let pred_path = self.path(PREDICTIONS_CSV);
        require(&pred_path, "run `train` first")?;
        let feat_path = self.path(FEATURES_CSV);
        require(&feat_path, "run `features` first")?;
        let preds = TimeSeriesFrame::read_csv_path(&pred_path)?;
        let raw = TimeSeriesFrame::read_csv_path(&feat_path)?;
        if preds.is_empty() || !preds.is_contiguous() {
            return Err(cryptoseq::Error::Schema("predictions must cover consecutive dates".into()).into());
        }
        let first = preds.dates()[0];
        let anchor_date = first - Days::new(1);
        let anchor = raw
            .dates()
            .iter()
            .position(|d| *d == anchor_date)
            .and_then(|r| raw.get(r, raw.column_index(&c.target_column)?))
            .ok_or_else(|| cryptoseq::Error::Schema(format!("no close on {anchor_date} before the first prediction")))?;
        let mut closes = vec![anchor];
        closes.extend(preds.values("actual")?);
        let predicted = preds.values("predicted")?;
        let sig = signals(&predicted, &closes[..closes.len() - 1])?;
        let series = SignalSeries::new(preds.dates().to_vec(), sig)?;

        let report: Option<BacktestReport> = match c.strategy {
            Strategy::LongShort => Some(run_long_short(&series, &closes, c.fee)?),
            Strategy::BuySell => Some(run_buy_sell(&series, &closes, c.fee)?),
            Strategy::None => None,
        };
        if let Some(report) = report {
            let name = c.strategy.name();
            let mut values = Vec::new();
            report.write_values_csv(&mut values)?;
            write_file(&self.path(&format!("backtest_{name}.csv")), &String::from_utf8_lossy(&values))?;
            let mut ledger = Vec::new();
            report.write_ledger_csv(&mut ledger)?;
            write_file(&self.path(&format!("ledger_{name}.csv")), &String::from_utf8_lossy(&ledger))?;
            info!("{name}: final value {}, {} trades", report.final_value, report.trades.len());
        }
        if c.emit_buy_and_hold {
            let mut out = String::from("date,portfolio_value\n");
            for (d, v) in preds.dates().iter().zip(buy_and_hold(&closes)?) {
                let _ = writeln!(out, "{d},{v}");
            }
            write_file(&self.path(BUY_AND_HOLD_CSV), &out)?;
        }
        Ok(())
    }
}
