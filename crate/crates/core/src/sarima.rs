//! Seasonal ARIMA by conditional sum of squares.
//!
//! On the differenced series `w = (1−B)^d (1−B^s)^D y` the model is
//!
//! ```text
//! φ(B)Φ(B^s)(w_t − μ) = θ(B)Θ(B^s) e_t
//! ```
//!
//! with `φ(B) = 1 − Σφ_i B^i` and `θ(B) = 1 + Σθ_i B^i` (seasonal factors
//! alike). Residuals are computed recursively from the first index at which
//! every AR lag is observed, with earlier residuals taken as zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SarimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
    #[serde(rename = "P")]
    pub sp: usize,
    #[serde(rename = "D")]
    pub sd: usize,
    #[serde(rename = "Q")]
    pub sq: usize,
    pub s: usize,
}

impl SarimaOrder {
    pub fn new(p: usize, d: usize, q: usize) -> Self {
        Self {
            p,
            d,
            q,
            sp: 0,
            sd: 0,
            sq: 0,
            s: 7,
        }
    }

    pub fn seasonal(mut self, sp: usize, sd: usize, sq: usize, s: usize) -> Self {
        self.sp = sp;
        self.sd = sd;
        self.sq = sq;
        self.s = s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if (self.sp > 0 || self.sd > 0 || self.sq > 0) && self.s < 2 {
            return Err(Error::Argument(format!("season length {} must be at least 2", self.s)));
        }
        Ok(())
    }

    /// Number of ARMA coefficients.
    pub fn coefficient_count(&self) -> usize {
        self.p + self.q + self.sp + self.sq
    }

    fn ar_lag(&self) -> usize {
        self.p + self.sp * self.s
    }

    fn diff_lag(&self) -> usize {
        self.d + self.sd * self.s
    }
}

impl std::fmt::Display for SarimaOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({},{},{})({},{},{})[{}]",
            self.p, self.d, self.q, self.sp, self.sd, self.sq, self.s
        )
    }
}

/// Coefficients for one order; `intercept` is the mean `μ` of the differenced series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SarimaCoefficients {
    pub ar: Vec<f64>,
    pub ma: Vec<f64>,
    pub sar: Vec<f64>,
    pub sma: Vec<f64>,
    pub intercept: f64,
}

impl SarimaCoefficients {
    pub fn zeros(order: &SarimaOrder) -> Self {
        Self {
            ar: vec![0.0; order.p],
            ma: vec![0.0; order.q],
            sar: vec![0.0; order.sp],
            sma: vec![0.0; order.sq],
            intercept: 0.0,
        }
    }

    fn check(&self, order: &SarimaOrder) -> Result<()> {
        if self.ar.len() != order.p || self.ma.len() != order.q || self.sar.len() != order.sp || self.sma.len() != order.sq {
            return Err(Error::Argument(format!("coefficient counts do not match order {order}")));
        }
        Ok(())
    }

    fn from_vec(order: &SarimaOrder, v: &[f64], intercept: f64) -> Self {
        let (ar, rest) = v.split_at(order.p);
        let (ma, rest) = rest.split_at(order.q);
        let (sar, sma) = rest.split_at(order.sp);
        Self {
            ar: ar.to_vec(),
            ma: ma.to_vec(),
            sar: sar.to_vec(),
            sma: sma.to_vec(),
            intercept,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SarimaFit {
    pub order: SarimaOrder,
    pub coefficients: SarimaCoefficients,
    pub sigma2: f64,
    pub aic: f64,
    /// Residuals entering the sum of squares.
    pub n: usize,
}

impl SarimaFit {
    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Applies `(1−B)^d (1−B^s)^D`. The output is `d + D·s` values shorter.
pub fn difference(series: &[f64], d: usize, sd: usize, s: usize) -> Result<Vec<f64>> {
    let lag = d + sd * s;
    if series.len() <= lag {
        return Err(Error::Argument(format!(
            "series of length {} too short for differencing lag {lag}",
            series.len()
        )));
    }
    if sd > 0 && s < 1 {
        return Err(Error::Argument("seasonal differencing needs s >= 1".into()));
    }
    let mut w = series.to_vec();
    for _ in 0..d {
        w = w.windows(2).map(|x| x[1] - x[0]).collect();
    }
    for _ in 0..sd {
        w = (s..w.len()).map(|t| w[t] - w[t - s]).collect();
    }
    Ok(w)
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// `δ` with `(1−B)^d (1−B^s)^D = 1 − Σ_j δ_j B^j`; `δ[0]` is lag 1.
fn delta_coefficients(d: usize, sd: usize, s: usize) -> Vec<f64> {
    let mut poly = vec![1.0];
    for _ in 0..d {
        poly = poly_mul(&poly, &[1.0, -1.0]);
    }
    for _ in 0..sd {
        let mut seasonal = vec![0.0; s + 1];
        seasonal[0] = 1.0;
        seasonal[s] = -1.0;
        poly = poly_mul(&poly, &seasonal);
    }
    poly[1..].iter().map(|c| -c).collect()
}

/// Reconstructs the original series from its first `d + D·s` values and the differenced series.
pub fn undifference(head: &[f64], diffs: &[f64], d: usize, sd: usize, s: usize) -> Result<Vec<f64>> {
    let delta = delta_coefficients(d, sd, s);
    if head.len() != delta.len() {
        return Err(Error::Argument(format!(
            "undifferencing needs {} leading values, got {}",
            delta.len(),
            head.len()
        )));
    }
    let mut y = head.to_vec();
    for &w in diffs {
        let t = y.len();
        let v = w + delta.iter().enumerate().map(|(j, c)| c * y[t - 1 - j]).sum::<f64>();
        y.push(v);
    }
    Ok(y)
}

/// Expanded `1 − Σ a_k B^k` of `φ(B)Φ(B^s)`; `a[0]` is lag 1.
fn expand_ar(ar: &[f64], sar: &[f64], s: usize) -> Vec<f64> {
    let mut base = vec![1.0];
    base.extend(ar.iter().map(|c| -c));
    let mut seasonal = vec![0.0; sar.len() * s + 1];
    seasonal[0] = 1.0;
    for (j, c) in sar.iter().enumerate() {
        seasonal[(j + 1) * s] = -c;
    }
    poly_mul(&base, &seasonal)[1..].iter().map(|c| -c).collect()
}

/// Expanded `1 + Σ b_k B^k` of `θ(B)Θ(B^s)`; `b[0]` is lag 1.
fn expand_ma(ma: &[f64], sma: &[f64], s: usize) -> Vec<f64> {
    let mut base = vec![1.0];
    base.extend_from_slice(ma);
    let mut seasonal = vec![0.0; sma.len() * s + 1];
    seasonal[0] = 1.0;
    for (j, c) in sma.iter().enumerate() {
        seasonal[(j + 1) * s] = *c;
    }
    poly_mul(&base, &seasonal)[1..].to_vec()
}

/// True when `1 + c_1 z + … + c_q z^q` has every root strictly outside the
/// unit circle, decided by Schur–Cohn step-down.
pub fn is_invertible(coeffs: &[f64]) -> bool {
    let mut a = coeffs.to_vec();
    while let Some(&k) = a.last() {
        if !k.is_finite() || k.abs() >= 1.0 {
            return false;
        }
        let q = a.len();
        let denom = 1.0 - k * k;
        a = (0..q - 1).map(|i| (a[i] - k * a[q - 2 - i]) / denom).collect();
    }
    true
}

fn check_invertible(c: &SarimaCoefficients) -> Result<()> {
    if !is_invertible(&c.ma) {
        return Err(Error::Stability(format!("MA polynomial {:?} is not invertible", c.ma)));
    }
    if !is_invertible(&c.sma) {
        return Err(Error::Stability(format!("seasonal MA polynomial {:?} is not invertible", c.sma)));
    }
    Ok(())
}

/// Residuals on the differenced series; entries before the first full AR lag are zero.
fn residuals(w: &[f64], order: &SarimaOrder, c: &SarimaCoefficients) -> (Vec<f64>, usize) {
    let a = expand_ar(&c.ar, &c.sar, order.s);
    let b = expand_ma(&c.ma, &c.sma, order.s);
    let m = a.len();
    let mu = c.intercept;
    let mut e = vec![0.0; w.len()];
    for t in m..w.len() {
        let mut pred = mu;
        for (k, &ak) in a.iter().enumerate() {
            pred += ak * (w[t - 1 - k] - mu);
        }
        for (k, &bk) in b.iter().enumerate() {
            if t > k {
                pred += bk * e[t - 1 - k];
            }
        }
        e[t] = w[t] - pred;
    }
    (e, m)
}

/// Conditional sum of squared one-step residuals of `series` under `order`.
pub fn css_loss(series: &[f64], order: &SarimaOrder, coefficients: &SarimaCoefficients) -> Result<f64> {
    order.validate()?;
    coefficients.check(order)?;
    check_invertible(coefficients)?;
    let w = difference(series, order.d, order.sd, order.s)?;
    if w.len() <= order.ar_lag() {
        return Err(Error::Argument(format!("series too short for order {order}")));
    }
    let (e, m) = residuals(&w, order, coefficients);
    Ok(e[m..].iter().map(|v| v * v).sum())
}

/// Unconstrained Nelder–Mead minimization from `start` with an axis simplex of edge `step`.
pub fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, start: &[f64], step: f64, max_evals: usize) -> (Vec<f64>, f64) {
    let n = start.len();
    if n == 0 {
        return (Vec::new(), f(start));
    }
    let mut simplex: Vec<Vec<f64>> = vec![start.to_vec()];
    for i in 0..n {
        let mut x = start.to_vec();
        x[i] += step;
        simplex.push(x);
    }
    let mut values: Vec<f64> = simplex.iter().map(|x| f(x)).collect();
    let mut evals = n + 1;
    while evals < max_evals {
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        values = idx.iter().map(|&i| values[i]).collect();
        let (best, worst) = (values[0], values[n]);
        let spread = (worst - best).abs();
        let size = simplex[1..]
            .iter()
            .flat_map(|x| x.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if best.is_finite() && spread <= 1e-12 * (1.0 + best.abs()) && size <= 1e-10 {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|x| x[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid.iter().zip(&simplex[n]).map(|(c, w)| c + t * (w - c)).collect()
        };
        let xr = along(-1.0);
        let fr = f(&xr);
        evals += 1;
        if fr < values[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            evals += 1;
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
        } else {
            let (xc, fc) = if fr < values[n] {
                let x = along(-0.5);
                let v = f(&x);
                (x, v)
            } else {
                let x = along(0.5);
                let v = f(&x);
                (x, v)
            };
            evals += 1;
            if fc < values[n].min(fr) {
                simplex[n] = xc;
                values[n] = fc;
            } else {
                for i in 1..=n {
                    simplex[i] = simplex[i]
                        .iter()
                        .zip(&simplex[0])
                        .map(|(x, b)| b + 0.5 * (x - b))
                        .collect();
                    values[i] = f(&simplex[i]);
                }
                evals += n;
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).expect("nonempty simplex");
    (simplex[best].clone(), values[best])
}

const SSE_FLOOR: f64 = 1e-300;

/// Fits one order. The optimizer works on the ARMA coefficients and a
/// scaled intercept offset `u` with `μ = mean(w) + sd(w)·u`.
pub fn fit_order(series: &[f64], order: &SarimaOrder) -> Result<SarimaFit> {
    order.validate()?;
    let w = difference(series, order.d, order.sd, order.s)?;
    let m = order.ar_lag();
    if w.len() <= m + order.coefficient_count() + 1 {
        return Err(Error::Argument(format!(
            "{} differenced values are too few for order {order}",
            w.len()
        )));
    }
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let sd = (w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64).sqrt();
    let scale = if sd > 0.0 { sd } else { 1.0 };
    let k = order.coefficient_count();

    let objective = |x: &[f64]| -> f64 {
        let c = SarimaCoefficients::from_vec(order, &x[..k], mean + scale * x[k]);
        if check_invertible(&c).is_err() {
            return f64::INFINITY;
        }
        let (e, m) = residuals(&w, order, &c);
        let sse: f64 = e[m..].iter().map(|v| v * v).sum();
        if sse.is_finite() {
            sse
        } else {
            f64::INFINITY
        }
    };
    let dim = k + 1;
    let max_evals = 400 * dim * dim + 200;
    let mut best: Option<(Vec<f64>, f64)> = None;
    for offset in [0.0, 0.1, -0.1] {
        let mut start = vec![offset; dim];
        start[k] = 0.0;
        let (x, v) = nelder_mead(&objective, &start, 0.1, max_evals);
        if best.as_ref().is_none_or(|(_, bv)| v < *bv) {
            best = Some((x, v));
        }
    }
    let (x, sse) = best.expect("at least one start");
    if !sse.is_finite() {
        return Err(Error::Stability(format!("no invertible solution for order {order}")));
    }
    let coefficients = SarimaCoefficients::from_vec(order, &x[..k], mean + scale * x[k]);
    let n = w.len() - m;
    let sigma2 = (sse / n as f64).max(SSE_FLOOR);
    let aic = n as f64 * sigma2.ln() + 2.0 * (k as f64 + 1.0);
    Ok(SarimaFit {
        order: *order,
        coefficients,
        sigma2,
        aic,
        n,
    })
}

/// Fits every order in `grid` and returns the minimum-AIC fit, ties broken by order.
pub fn fit(series: &[f64], grid: &[SarimaOrder]) -> Result<SarimaFit> {
    if grid.is_empty() {
        return Err(Error::Argument("empty order grid".into()));
    }
    let mut best: Option<SarimaFit> = None;
    let mut failures = Vec::new();
    for order in grid {
        match fit_order(series, order) {
            Ok(f) => {
                let better = match &best {
                    None => true,
                    Some(b) => f.aic < b.aic || (f.aic == b.aic && f.order < b.order),
                };
                if better {
                    best = Some(f);
                }
            }
            Err(e) => failures.push(format!("{order}: {e}")),
        }
    }
    best.ok_or_else(|| Error::Fit(failures.join("; ")))
}

/// `p, q, P, Q ∈ {0,1,2}`, `d, D ∈ {0,1}`, `s = 7`.
pub fn default_grid() -> Vec<SarimaOrder> {
    let mut grid = Vec::new();
    for p in 0..3 {
        for d in 0..2 {
            for q in 0..3 {
                for sp in 0..3 {
                    for sd in 0..2 {
                        for sq in 0..3 {
                            grid.push(SarimaOrder::new(p, d, q).seasonal(sp, sd, sq, 7));
                        }
                    }
                }
            }
        }
    }
    grid
}

/// `p, q, P ∈ {0,1}`, `d ∈ {0,1}`, no seasonal differencing or seasonal MA, `s = 7`.
pub fn small_grid() -> Vec<SarimaOrder> {
    let mut grid = Vec::new();
    for p in 0..2 {
        for d in 0..2 {
            for q in 0..2 {
                for sp in 0..2 {
                    grid.push(SarimaOrder::new(p, d, q).seasonal(sp, 0, 0, 7));
                }
            }
        }
    }
    grid
}

/// Iterated forecasts `horizon` steps past the end of `series`, future residuals zero.
pub fn forecast(fit: &SarimaFit, series: &[f64], horizon: usize) -> Result<Vec<f64>> {
    if horizon == 0 {
        return Err(Error::Argument("forecast horizon must be at least 1".into()));
    }
    let o = &fit.order;
    let c = &fit.coefficients;
    check_invertible(c)?;
    let w = difference(series, o.d, o.sd, o.s)?;
    let (mut e, _) = residuals(&w, o, c);
    let a = expand_ar(&c.ar, &c.sar, o.s);
    let b = expand_ma(&c.ma, &c.sma, o.s);
    if w.len() < a.len() {
        return Err(Error::Argument(format!("series too short to forecast order {o}")));
    }
    let mut w_ext = w.clone();
    for _ in 0..horizon {
        let t = w_ext.len();
        let mut pred = c.intercept;
        for (k, &ak) in a.iter().enumerate() {
            pred += ak * (w_ext[t - 1 - k] - c.intercept);
        }
        for (k, &bk) in b.iter().enumerate() {
            if t > k {
                pred += bk * e[t - 1 - k];
            }
        }
        w_ext.push(pred);
        e.push(0.0);
    }
    let delta = delta_coefficients(o.d, o.sd, o.s);
    let mut y = series.to_vec();
    for &wv in &w_ext[w.len()..] {
        let t = y.len();
        let v = wv + delta.iter().enumerate().map(|(j, dj)| dj * y[t - 1 - j]).sum::<f64>();
        y.push(v);
    }
    Ok(y[series.len()..].to_vec())
}

/// One-step predictions of `series[t]` from `series[..t]` for every `t >= start`,
/// keeping the fitted coefficients fixed.
pub fn rolling_one_step(fit: &SarimaFit, series: &[f64], start: usize) -> Result<Vec<f64>> {
    let o = &fit.order;
    let c = &fit.coefficients;
    check_invertible(c)?;
    let lag = o.diff_lag();
    let first = lag + o.ar_lag();
    if start < first || start > series.len() {
        return Err(Error::Argument(format!(
            "rolling predictions for order {o} need start in {first}..={}, got {start}",
            series.len()
        )));
    }
    let w = difference(series, o.d, o.sd, o.s)?;
    let (e, _) = residuals(&w, o, c);
    let delta = delta_coefficients(o.d, o.sd, o.s);
    Ok((start..series.len())
        .map(|t| {
            let wt = t - lag;
            let w_hat = w[wt] - e[wt];
            w_hat + delta.iter().enumerate().map(|(j, dj)| dj * series[t - 1 - j]).sum::<f64>()
        })
        .collect())
}
