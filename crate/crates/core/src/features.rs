//! Technical indicators, rank correlation, collinearity pruning and z-score normalization.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::dataset::TimeSeriesFrame;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Exponential moving average with multiplier `2/(period+1)`, seeded with the first observation.
pub fn ema<T: Scalar>(series: &[T], period: usize) -> Result<Vec<T>> {
    if series.is_empty() {
        return Err(Error::Argument("ema of an empty series".into()));
    }
    if period == 0 {
        return Err(Error::Argument("ema period must be at least 1".into()));
    }
    let k = T::of(2.0) / T::of_usize(period + 1);
    let mut out = Vec::with_capacity(series.len());
    let mut e = series[0];
    out.push(e);
    for &x in &series[1..] {
        e = k * x + (T::one() - k) * e;
        out.push(e);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Macd<T> {
    pub line: Vec<T>,
    pub signal: Vec<T>,
    pub histogram: Vec<T>,
}

/// 12/26 EMA difference, its 9-period EMA signal line, and their difference.
pub fn macd<T: Scalar>(price: &[T]) -> Result<Macd<T>> {
    let fast = ema(price, 12)?;
    let slow = ema(price, 26)?;
    let line: Vec<T> = fast.iter().zip(&slow).map(|(&a, &b)| a - b).collect();
    let signal = ema(&line, 9)?;
    let histogram = line.iter().zip(&signal).map(|(&a, &b)| a - b).collect();
    Ok(Macd {
        line,
        signal,
        histogram,
    })
}

/// Simple returns `p_t / p_{t-1} − 1`; one shorter than the input.
pub fn daily_returns<T: Scalar>(price: &[T]) -> Result<Vec<T>> {
    if price.len() < 2 {
        return Err(Error::Argument("returns need at least two prices".into()));
    }
    if let Some(p) = price.iter().find(|p| !(**p > T::zero())) {
        return Err(Error::Domain(format!("price {p} is not positive")));
    }
    Ok(price.windows(2).map(|w| w[1] / w[0] - T::one()).collect())
}

fn population_std<T: Scalar>(values: &[T]) -> T {
    let n = T::of_usize(values.len());
    let mean = values.iter().copied().sum::<T>() / n;
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    var.sqrt()
}

/// Trailing-window population standard deviation of returns times √365.
/// Output `k` covers `returns[k .. k + window]`.
pub fn annualized_volatility<T: Scalar>(returns: &[T], window: usize) -> Result<Vec<T>> {
    if window < 2 {
        return Err(Error::Argument("volatility window must be at least 2".into()));
    }
    if window > returns.len() {
        return Err(Error::Argument(format!(
            "volatility window {window} exceeds {} returns",
            returns.len()
        )));
    }
    let scale = T::of(365.0).sqrt();
    Ok(returns.windows(window).map(|w| population_std(w) * scale).collect())
}

/// Ranks starting at 1; tied values share the mean of their positions.
pub fn average_ranks<T: Scalar>(values: &[T]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman<T: Scalar>(x: &[T], y: &[T]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Argument(format!(
            "spearman needs equal lengths of at least 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Domain("spearman inputs must be finite".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
        .ok_or_else(|| Error::UndefinedCorrelation("an input has zero rank variance".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedFeature {
    pub feature: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureReport {
    pub target: String,
    pub threshold: f64,
    /// Correlation of each non-constant column with the target (the target maps to 1).
    pub spearman_to_target: BTreeMap<String, f64>,
    /// Retained columns in frame order, target included.
    pub kept: Vec<String>,
    pub dropped: Vec<DroppedFeature>,
}

#[derive(Serialize)]
struct ReportRow<'a> {
    feature: &'a str,
    rho: Option<f64>,
    status: &'static str,
    reason: Option<&'a str>,
}

impl FeatureReport {
    /// One row per column: feature, rho to target, kept/dropped, reason.
    pub fn to_json(&self) -> Result<String> {
        let mut rows: Vec<ReportRow> = self
            .kept
            .iter()
            .map(|f| ReportRow {
                feature: f,
                rho: self.spearman_to_target.get(f).copied(),
                status: "kept",
                reason: None,
            })
            .collect();
        rows.extend(self.dropped.iter().map(|d| ReportRow {
            feature: &d.feature,
            rho: self.spearman_to_target.get(&d.feature).copied(),
            status: "dropped",
            reason: Some(&d.reason),
        }));
        rows.sort_by(|a, b| a.feature.cmp(b.feature));
        let doc = serde_json::json!({
            "target": self.target,
            "threshold": self.threshold,
            "features": rows,
        });
        Ok(serde_json::to_string_pretty(&doc)?)
    }
}

/// Removes `forced_drops`, then constant columns, then resolves every
/// remaining feature pair with `|ρ| ≥ threshold` by dropping the member less
/// correlated with the target. Pairs are visited by descending `|ρ|`, ties by
/// name, and a pair is skipped once either member is gone.
pub fn prune_collinear(
    frame: &TimeSeriesFrame,
    target: &str,
    threshold: f64,
    forced_drops: &[String],
) -> Result<FeatureReport> {
    if frame.column_index(target).is_none() {
        return Err(Error::Schema(format!("unknown target column '{target}'")));
    }
    if forced_drops.iter().any(|f| f == target) {
        return Err(Error::Argument(format!("target '{target}' cannot be force-dropped")));
    }
    for f in forced_drops {
        if frame.column_index(f).is_none() {
            return Err(Error::Schema(format!("forced drop names unknown column '{f}'")));
        }
    }
    let target_values = frame.values(target)?;
    let mut dropped: BTreeMap<String, String> = BTreeMap::new();
    for f in forced_drops {
        dropped.insert(f.clone(), "forced".into());
    }

    let mut names: Vec<String> = frame
        .names()
        .iter()
        .filter(|n| n.as_str() != target && !dropped.contains_key(*n))
        .cloned()
        .collect();
    names.sort();

    let mut rho_target = BTreeMap::new();
    rho_target.insert(target.to_string(), 1.0);
    let mut values = BTreeMap::new();
    for n in &names {
        let v = frame.values(n)?;
        match spearman(&v, &target_values) {
            Ok(r) => {
                rho_target.insert(n.clone(), r);
                values.insert(n.clone(), v);
            }
            Err(Error::UndefinedCorrelation(_)) => {
                if average_ranks(&target_values).iter().all(|&r| r == (target_values.len() + 1) as f64 / 2.0) {
                    return Err(Error::UndefinedCorrelation(format!("target '{target}' is constant")));
                }
                dropped.insert(n.clone(), "constant".into());
            }
            Err(e) => return Err(e),
        }
    }
    for f in forced_drops {
        if let Ok(v) = frame.values(f) {
            if let Ok(r) = spearman(&v, &target_values) {
                rho_target.insert(f.clone(), r);
            }
        }
    }

    let candidates: Vec<&String> = names.iter().filter(|n| values.contains_key(*n)).collect();
    let mut pairs = Vec::new();
    for (i, a) in candidates.iter().enumerate() {
        for b in &candidates[i + 1..] {
            let r = spearman(&values[*a], &values[*b])?;
            if r.abs() >= threshold {
                pairs.push((r.abs(), (*a).clone(), (*b).clone()));
            }
        }
    }
    pairs.sort_by(|x, y| {
        y.0.partial_cmp(&x.0)
            .expect("finite correlation")
            .then_with(|| (&x.1, &x.2).cmp(&(&y.1, &y.2)))
    });
    for (r, a, b) in pairs {
        if dropped.contains_key(&a) || dropped.contains_key(&b) {
            continue;
        }
        let (ra, rb) = (rho_target[&a].abs(), rho_target[&b].abs());
        let (loser, winner) = if ra >= rb { (b, a) } else { (a, b) };
        dropped.insert(loser, format!("collinear with {winner} (|rho| = {r:.6})"));
    }

    let kept = frame
        .names()
        .iter()
        .filter(|n| !dropped.contains_key(*n))
        .cloned()
        .collect();
    let dropped = frame
        .names()
        .iter()
        .filter_map(|n| {
            dropped.get(n).map(|reason| DroppedFeature {
                feature: n.clone(),
                reason: reason.clone(),
            })
        })
        .collect();
    Ok(FeatureReport {
        target: target.to_string(),
        threshold,
        spearman_to_target: rho_target,
        kept,
        dropped,
    })
}

/// Per-column population mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub columns: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Fits on `fit_rows` of every column.
pub fn fit_normalizer(frame: &TimeSeriesFrame, fit_rows: Range<usize>) -> Result<Normalizer> {
    if fit_rows.is_empty() || fit_rows.end > frame.len() {
        return Err(Error::Range(format!(
            "fit rows {fit_rows:?} invalid for a frame of {} rows",
            frame.len()
        )));
    }
    let part = frame.slice_rows(fit_rows.start, fit_rows.end);
    let mut mean = Vec::with_capacity(frame.width());
    let mut std = Vec::with_capacity(frame.width());
    for name in frame.names() {
        let v = part.values(name)?;
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let s = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
        if !(s > 0.0) {
            return Err(Error::ZeroVariance {
                column: name.clone(),
            });
        }
        mean.push(m);
        std.push(s);
    }
    Ok(Normalizer {
        columns: frame.names().to_vec(),
        mean,
        std,
    })
}

impl Normalizer {
    fn index(&self, column: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == column)
            .ok_or_else(|| Error::Schema(format!("normalizer has no column '{column}'")))
    }

    pub fn forward_value(&self, column: &str, x: f64) -> Result<f64> {
        let i = self.index(column)?;
        Ok((x - self.mean[i]) / self.std[i])
    }

    pub fn inverse_value(&self, column: &str, z: f64) -> Result<f64> {
        let i = self.index(column)?;
        Ok(z * self.std[i] + self.mean[i])
    }
}

/// Transforms every column of `frame`; missing cells stay missing.
pub fn apply_normalizer(n: &Normalizer, frame: &TimeSeriesFrame, direction: Direction) -> Result<TimeSeriesFrame> {
    let cols = frame
        .names()
        .iter()
        .map(|name| {
            let i = n.index(name)?;
            let (m, s) = (n.mean[i], n.std[i]);
            let values = frame
                .column(name)?
                .iter()
                .map(|v| {
                    v.map(|x| match direction {
                        Direction::Forward => (x - m) / s,
                        Direction::Inverse => x * s + m,
                    })
                })
                .collect();
            Ok((name.clone(), values))
        })
        .collect::<Result<Vec<_>>>()?;
    TimeSeriesFrame::new(frame.dates().to_vec(), cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use chrono::NaiveDate;

    fn frame(cols: Vec<(&str, Vec<f64>)>) -> TimeSeriesFrame {
        let n = cols[0].1.len();
        let dates = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap().iter_days().take(n).collect();
        TimeSeriesFrame::from_dense(dates, cols.into_iter().map(|(k, v)| (k.to_string(), v)).collect()).unwrap()
    }

    #[test]
    fn ema_cases() {
        assert_eq!(ema(&[4.0; 5], 7).unwrap(), vec![4.0; 5]);
        let e = ema(&[1.0, 2.0], 2).unwrap();
        assert_abs_diff_eq!(e[1], 1.666667, epsilon = 1e-6);
        let x = [3.0, -1.0, 2.5];
        assert_eq!(ema(&x, 1).unwrap(), x.to_vec());
        assert!(ema::<f64>(&[], 3).is_err());
    }

    #[test]
    fn macd_of_constant_is_zero() {
        let m = macd(&[50.0; 40]).unwrap();
        assert!(m.line.iter().chain(&m.signal).chain(&m.histogram).all(|&v| v == 0.0));
    }

    #[test]
    fn returns_cases() {
        let r = daily_returns(&[100.0, 110.0, 99.0]).unwrap();
        assert_abs_diff_eq!(r[0], 0.10, epsilon = 1e-12);
        assert_abs_diff_eq!(r[1], -0.10, epsilon = 1e-12);
        assert_eq!(daily_returns(&[5.0; 4]).unwrap(), vec![0.0; 3]);
        assert!(matches!(daily_returns(&[1.0, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn volatility_cases() {
        let v = annualized_volatility(&[0.01, -0.01, 0.01, -0.01], 4).unwrap();
        assert_eq!(v.len(), 1);
        assert_abs_diff_eq!(v[0], 0.191050, epsilon = 1e-6);
        assert_eq!(annualized_volatility(&[0.02; 6], 3).unwrap(), vec![0.0; 4]);
        assert!(annualized_volatility(&[0.1; 3], 4).is_err());
    }

    #[test]
    fn spearman_cases() {
        assert_abs_diff_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap(), 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 90.0]).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(spearman(&[1.0, 2.0, 3.0], &[9.0, 2.0, 1.0]).unwrap(), -1.0, epsilon = 1e-15);
        assert!(matches!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::UndefinedCorrelation(_))));
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 3.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn greedy_rule_drops_weaker_member() {
        // f1 tracks the target closely; f2 is f1 with a few swaps, so it is
        // collinear with f1 but weaker against the target.
        let target: Vec<f64> = (0..20).map(f64::from).collect();
        let f1: Vec<f64> = target.iter().enumerate().map(|(i, v)| if i % 7 == 3 { v + 1.5 } else { *v }).collect();
        let mut f2 = f1.clone();
        f2.swap(2, 9);
        f2.swap(12, 17);
        let noise: Vec<f64> = (0..20).map(|i| ((i * 37) % 11) as f64).collect();
        let f = frame(vec![("price", target), ("f2", f2), ("f1", f1), ("z", noise)]);
        let r = prune_collinear(&f, "price", 0.8, &[]).unwrap();
        assert_eq!(r.kept, vec!["price", "f1", "z"]);
        assert_eq!(r.dropped.len(), 1);
        assert_eq!(r.dropped[0].feature, "f2");
        assert!(r.dropped[0].reason.starts_with("collinear with f1"));
    }

    #[test]
    fn forced_drop_of_target_is_rejected() {
        let f = frame(vec![("price", vec![1.0, 2.0, 3.0]), ("a", vec![3.0, 1.0, 2.0])]);
        assert!(matches!(prune_collinear(&f, "price", 0.8, &["price".into()]), Err(Error::Argument(_))));
        assert!(matches!(prune_collinear(&f, "price", 0.8, &["nope".into()]), Err(Error::Schema(_))));
    }

    #[test]
    fn constant_feature_is_dropped() {
        let f = frame(vec![("price", vec![1.0, 2.0, 3.0]), ("c", vec![7.0; 3])]);
        let r = prune_collinear(&f, "price", 0.8, &[]).unwrap();
        assert_eq!(r.kept, vec!["price"]);
        assert_eq!(r.dropped[0].reason, "constant");
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json["features"][0]["feature"], "c");
        assert_eq!(json["features"][0]["status"], "dropped");
    }

    #[test]
    fn normalizer_hand_case() {
        let f = frame(vec![("x", vec![1.0, 2.0, 3.0])]);
        let n = fit_normalizer(&f, 0..3).unwrap();
        assert_abs_diff_eq!(n.mean[0], 2.0);
        assert_abs_diff_eq!(n.std[0], 0.816497, epsilon = 1e-6);
        let z = apply_normalizer(&n, &f, Direction::Forward).unwrap().values("x").unwrap();
        assert_abs_diff_eq!(z[0], -1.224745, epsilon = 1e-6);
        assert_eq!(z[1], 0.0);
        assert_abs_diff_eq!(z[2], 1.224745, epsilon = 1e-6);
        assert_eq!(n.forward_value("x", 2.0).unwrap(), 0.0);
        let back = apply_normalizer(&n, &apply_normalizer(&n, &f, Direction::Forward).unwrap(), Direction::Inverse).unwrap();
        for (a, b) in back.values("x").unwrap().iter().zip([1.0, 2.0, 3.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn normalizer_errors() {
        let f = frame(vec![("x", vec![1.0, 2.0, 3.0]), ("k", vec![4.0, 4.0, 5.0])]);
        match fit_normalizer(&f, 0..2) {
            Err(Error::ZeroVariance { column }) => assert_eq!(column, "k"),
            other => panic!("unexpected {other:?}"),
        }
        let n = fit_normalizer(&f.select(&["x".into()]).unwrap(), 0..3).unwrap();
        assert!(matches!(apply_normalizer(&n, &f, Direction::Forward), Err(Error::Schema(_))));
    }
}
