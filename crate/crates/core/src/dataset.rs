//! Date-indexed frames, CSV ingestion, merging, gap filling, date splits,
//! lookback windowing and a seeded synthetic market.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RandomStream};
use crate::scalar::Scalar;

const DATE_FORMAT: &str = "%Y-%m-%d";

/// Named columns over a strictly increasing date axis. `None` marks a missing cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesFrame {
    dates: Vec<NaiveDate>,
    names: Vec<String>,
    columns: Vec<Vec<Option<f64>>>,
}

impl TimeSeriesFrame {
    pub fn new(dates: Vec<NaiveDate>, columns: Vec<(String, Vec<Option<f64>>)>) -> Result<Self> {
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Schema("dates must be strictly increasing".into()));
        }
        let mut seen = BTreeSet::new();
        let mut names = Vec::with_capacity(columns.len());
        let mut values = Vec::with_capacity(columns.len());
        for (name, col) in columns {
            if !seen.insert(name.clone()) {
                return Err(Error::Schema(format!("duplicate column '{name}'")));
            }
            if col.len() != dates.len() {
                return Err(Error::Schema(format!(
                    "column '{name}' has {} values for {} dates",
                    col.len(),
                    dates.len()
                )));
            }
            names.push(name);
            values.push(col);
        }
        Ok(Self {
            dates,
            names,
            columns: values,
        })
    }

    /// Frame with every cell present.
    pub fn from_dense(dates: Vec<NaiveDate>, columns: Vec<(String, Vec<f64>)>) -> Result<Self> {
        Self::new(
            dates,
            columns
                .into_iter()
                .map(|(n, v)| (n, v.into_iter().map(Some).collect()))
                .collect(),
        )
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn column(&self, name: &str) -> Result<&[Option<f64>]> {
        self.column_index(name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| Error::Schema(format!("unknown column '{name}'")))
    }

    /// Column values, failing if any cell is missing.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        self.column(name)?
            .iter()
            .zip(&self.dates)
            .map(|(v, d)| {
                v.ok_or_else(|| Error::Schema(format!("column '{name}' is missing a value on {d}")))
            })
            .collect()
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.columns[col][row]
    }

    pub fn missing_count(&self) -> usize {
        self.columns
            .iter()
            .map(|c| c.iter().filter(|v| v.is_none()).count())
            .sum()
    }

    pub fn is_contiguous(&self) -> bool {
        self.dates
            .windows(2)
            .all(|w| w[0].checked_add_days(Days::new(1)) == Some(w[1]))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> TimeSeriesFrame {
        let end = end.min(self.len());
        let start = start.min(end);
        TimeSeriesFrame {
            dates: self.dates[start..end].to_vec(),
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| c[start..end].to_vec()).collect(),
        }
    }

    /// Rows with `from <= date <= to`.
    pub fn between(&self, from: NaiveDate, to: NaiveDate) -> TimeSeriesFrame {
        let start = self.dates.partition_point(|d| *d < from);
        let end = self.dates.partition_point(|d| *d <= to);
        self.slice_rows(start, end.max(start))
    }

    pub fn with_column(&self, name: &str, values: Vec<Option<f64>>) -> Result<TimeSeriesFrame> {
        let mut cols: Vec<(String, Vec<Option<f64>>)> =
            self.names.iter().cloned().zip(self.columns.iter().cloned()).collect();
        cols.push((name.to_string(), values));
        TimeSeriesFrame::new(self.dates.clone(), cols)
    }

    pub fn select(&self, names: &[String]) -> Result<TimeSeriesFrame> {
        let cols = names
            .iter()
            .map(|n| Ok((n.clone(), self.column(n)?.to_vec())))
            .collect::<Result<Vec<_>>>()?;
        TimeSeriesFrame::new(self.dates.clone(), cols)
    }

    /// Drops every row that has a missing cell in any column.
    pub fn drop_incomplete_rows(&self) -> TimeSeriesFrame {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&r| self.columns.iter().all(|c| c[r].is_some()))
            .collect();
        TimeSeriesFrame {
            dates: keep.iter().map(|&r| self.dates[r]).collect(),
            names: self.names.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| keep.iter().map(|&r| c[r]).collect())
                .collect(),
        }
    }

    /// Inserts every missing calendar day between the first and last date as an all-missing row.
    pub fn reindex_daily(&self) -> TimeSeriesFrame {
        let (Some(&first), Some(&last)) = (self.dates.first(), self.dates.last()) else {
            return self.clone();
        };
        let dates: Vec<NaiveDate> = first.iter_days().take_while(|d| *d <= last).collect();
        let mut columns = vec![vec![None; dates.len()]; self.width()];
        for (r, d) in self.dates.iter().enumerate() {
            let idx = (*d - first).num_days() as usize;
            for (c, col) in self.columns.iter().enumerate() {
                columns[c][idx] = col[r];
            }
        }
        TimeSeriesFrame {
            dates,
            names: self.names.clone(),
            columns,
        }
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.get(0) != Some("date") {
            return Err(Error::Schema("first CSV column must be 'date'".into()));
        }
        let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut dates = Vec::new();
        let mut columns = vec![Vec::new(); names.len()];
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            let raw = record.get(0).unwrap_or_default();
            let date = NaiveDate::parse_from_str(raw, DATE_FORMAT).map_err(|_| {
                Error::Schema(format!("row {}: bad date '{raw}'", line + 2))
            })?;
            dates.push(date);
            for (c, col) in columns.iter_mut().enumerate() {
                let cell = record.get(c + 1).unwrap_or_default();
                let value = if cell.is_empty() {
                    None
                } else {
                    Some(cell.parse::<f64>().map_err(|_| {
                        Error::Schema(format!("row {}: bad number '{cell}' in '{}'", line + 2, names[c]))
                    })?)
                };
                col.push(value);
            }
        }
        TimeSeriesFrame::new(dates, names.into_iter().zip(columns).collect())
    }

    pub fn read_csv_path(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["date".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for (r, d) in self.dates.iter().enumerate() {
            let mut row = vec![d.format(DATE_FORMAT).to_string()];
            row.extend(
                self.columns
                    .iter()
                    .map(|c| c[r].map(|v| v.to_string()).unwrap_or_default()),
            );
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Outer join on the union of dates.
pub fn merge_frames(frames: &[TimeSeriesFrame]) -> Result<TimeSeriesFrame> {
    let mut seen = BTreeSet::new();
    for f in frames {
        for n in f.names() {
            if !seen.insert(n.clone()) {
                return Err(Error::Schema(format!("duplicate column '{n}' across frames")));
            }
        }
    }
    let dates: Vec<NaiveDate> = frames
        .iter()
        .flat_map(|f| f.dates.iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: BTreeMap<NaiveDate, usize> = dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();
    let mut cols = Vec::new();
    for f in frames {
        for (name, col) in f.names.iter().zip(&f.columns) {
            let mut out = vec![None; dates.len()];
            for (d, v) in f.dates.iter().zip(col) {
                out[index[d]] = *v;
            }
            cols.push((name.clone(), out));
        }
    }
    TimeSeriesFrame::new(dates, cols)
}

/// Fills each missing cell of the named columns with the latest earlier value.
pub fn forward_fill(frame: &TimeSeriesFrame, columns: &[String]) -> Result<TimeSeriesFrame> {
    let mut out = frame.clone();
    for name in columns {
        let idx = frame
            .column_index(name)
            .ok_or_else(|| Error::Schema(format!("unknown column '{name}'")))?;
        let col = &mut out.columns[idx];
        if let (Some(None), Some(&date)) = (col.first(), frame.dates.first()) {
            return Err(Error::LeadingGap {
                column: name.clone(),
                date,
            });
        }
        let mut last = None;
        for cell in col.iter_mut() {
            match cell {
                Some(v) => last = Some(*v),
                None => *cell = last,
            }
        }
    }
    Ok(out)
}

/// Fills every column.
pub fn forward_fill_all(frame: &TimeSeriesFrame) -> Result<TimeSeriesFrame> {
    forward_fill(frame, &frame.names.clone())
}

/// Inclusive date ranges for the three-way split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: (NaiveDate, NaiveDate),
    pub validation: (NaiveDate, NaiveDate),
    pub test: (NaiveDate, NaiveDate),
}

fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid calendar date")
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: (ymd(2010, 1, 1), ymd(2018, 6, 30)),
            validation: (ymd(2018, 7, 1), ymd(2018, 12, 31)),
            test: (ymd(2019, 1, 1), ymd(2019, 6, 30)),
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|(a, b)| a > b) {
            return Err(Error::Range("split range ends before it starts".into()));
        }
        if self.train.1 >= self.validation.0 || self.validation.1 >= self.test.0 {
            return Err(Error::Range("split ranges must be disjoint and ordered".into()));
        }
        Ok(())
    }
}

/// Partitions rows by date into train, validation and test frames.
pub fn split(
    frame: &TimeSeriesFrame,
    spec: &SplitSpec,
) -> Result<(TimeSeriesFrame, TimeSeriesFrame, TimeSeriesFrame)> {
    spec.validate()?;
    let part = |(from, to): (NaiveDate, NaiveDate), name: &str| {
        let f = frame.between(from, to);
        if f.is_empty() {
            Err(Error::Range(format!("{name} split {from}..={to} contains no rows")))
        } else {
            Ok(f)
        }
    };
    Ok((
        part(spec.train, "train")?,
        part(spec.validation, "validation")?,
        part(spec.test, "test")?,
    ))
}

/// One supervised example: the `lookback` rows before `target_date`, all columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub window: Matrix<T>,
    pub target: T,
    pub target_date: NaiveDate,
    /// Target column on the day before `target_date`; the persistence forecast.
    pub prev_target: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset<T> {
    pub lookback: usize,
    pub feature_names: Vec<String>,
    pub target_column: String,
    pub samples: Vec<Sample<T>>,
}

impl<T: Scalar> WindowedDataset<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_width(&self) -> usize {
        self.feature_names.len()
    }

    pub fn targets(&self) -> Vec<T> {
        self.samples.iter().map(|s| s.target).collect()
    }

    pub fn persistence(&self) -> Vec<T> {
        self.samples.iter().map(|s| s.prev_target).collect()
    }
}

/// Builds one sample per date of `frame` that has `lookback` earlier rows.
/// `context` holds rows immediately preceding `frame` and extends the history
/// available to its first targets. Every cell must be present and dates must
/// be consecutive days.
pub fn make_windows<T: Scalar>(
    frame: &TimeSeriesFrame,
    lookback: usize,
    target_column: &str,
    context: Option<&TimeSeriesFrame>,
) -> Result<WindowedDataset<T>> {
    if lookback == 0 {
        return Err(Error::Argument("lookback must be at least 1".into()));
    }
    let target_idx = frame
        .column_index(target_column)
        .ok_or_else(|| Error::Schema(format!("unknown target column '{target_column}'")))?;
    let combined = match context {
        Some(ctx) => {
            if ctx.names != frame.names {
                return Err(Error::Schema("context columns differ from frame columns".into()));
            }
            let take = ctx.len().min(lookback);
            let tail = ctx.slice_rows(ctx.len() - take, ctx.len());
            let mut dates = tail.dates.clone();
            dates.extend_from_slice(&frame.dates);
            let cols = frame
                .names
                .iter()
                .enumerate()
                .map(|(c, n)| {
                    let mut v = tail.columns[c].clone();
                    v.extend_from_slice(&frame.columns[c]);
                    (n.clone(), v)
                })
                .collect();
            TimeSeriesFrame::new(dates, cols)?
        }
        None => frame.clone(),
    };
    if !combined.is_contiguous() {
        return Err(Error::Schema(
            "windowing requires consecutive calendar days (reindex and forward-fill first)".into(),
        ));
    }
    if combined.missing_count() > 0 {
        return Err(Error::Schema("windowing requires a frame without missing cells".into()));
    }
    let n = combined.len();
    if n <= lookback {
        let first_target = frame
            .dates
            .first()
            .copied()
            .ok_or_else(|| Error::Argument("cannot window an empty frame".into()))?;
        return Err(Error::Warmup {
            missing: lookback + 1 - n,
            first_target,
        });
    }
    let width = combined.width();
    let cell = |r: usize, c: usize| T::of(combined.columns[c][r].expect("checked complete"));
    let samples = (lookback..n)
        .map(|t| Sample {
            window: Matrix::from_fn(lookback, width, |i, c| cell(t - lookback + i, c)),
            target: cell(t, target_idx),
            target_date: combined.dates[t],
            prev_target: cell(t - 1, target_idx),
        })
        .collect();
    Ok(WindowedDataset {
        lookback,
        feature_names: combined.names.clone(),
        target_column: target_column.to_string(),
        samples,
    })
}

/// Last date produced by [`synth_generate`].
pub fn synth_end_date() -> NaiveDate {
    ymd(2019, 6, 30)
}

const SYNTH_PHI: f64 = 0.98;
const SYNTH_DRIFT: f64 = 2.0;
const SYNTH_VOL: f64 = 0.03;

/// Latent price recursion `p_t = (0.98·p_{t-1} + 2)·exp(0.03·ε_t − 0.03²/2)`, `p_0 = 100`.
/// The multiplicative noise keeps every value positive.
pub fn synth_price_path(rng: &mut RandomStream, steps: usize) -> Vec<f64> {
    let mut p = 100.0;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        p = (SYNTH_PHI * p + SYNTH_DRIFT) * (SYNTH_VOL * rng.next_normal() - 0.5 * SYNTH_VOL * SYNTH_VOL).exp();
        out.push(p);
    }
    out
}

/// Seeded synthetic market of `days` consecutive days ending on 2019-06-30.
///
/// Columns are `price` followed by `cov1..cov{features}`:
/// - `cov1_t = price_{t+1} + 0.5·η_t` leads the price by one day.
/// - `cov2_t = (price_{t+1} − price_t) + η_t` leads the next move.
/// - `cov3` onward are independent AR(1) series with coefficient 0.9, unrelated to price.
///
/// `η` is standard normal. A model that reads `cov1` on the last window row
/// therefore sees next-day price plus noise with standard deviation 0.5,
/// against a daily price move of roughly 3.
pub fn synth_generate(seed: u64, days: usize, features: usize) -> Result<TimeSeriesFrame> {
    if days < 100 {
        return Err(Error::Argument(format!("synthetic data needs at least 100 days, got {days}")));
    }
    let mut root = RandomStream::new(seed);
    let mut price_rng = root.split();
    let mut noise_rng = root.split();
    let path = synth_price_path(&mut price_rng, days + 1);
    let price = &path[..days];
    let next = &path[1..];
    let mut cols: Vec<(String, Vec<f64>)> = vec![("price".into(), price.to_vec())];
    for k in 1..=features {
        let values: Vec<f64> = match k {
            1 => next.iter().map(|&p| p + 0.5 * noise_rng.next_normal()).collect(),
            2 => (0..days)
                .map(|t| next[t] - price[t] + noise_rng.next_normal())
                .collect(),
            _ => {
                let mut x = 0.0;
                (0..days)
                    .map(|_| {
                        x = 0.9 * x + noise_rng.next_normal();
                        x
                    })
                    .collect()
            }
        };
        cols.push((format!("cov{k}"), values));
    }
    let end = synth_end_date();
    let start = end - Days::new(days as u64 - 1);
    let dates = start.iter_days().take(days).collect();
    TimeSeriesFrame::from_dense(dates, cols)
}
