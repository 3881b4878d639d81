//! Daily long-short and signal-driven buy-sell strategies with proportional fees.
//!
//! Prices are daily closes with one leading anchor: `closes[0]` is the close
//! before the first signal date and `closes[t]` is the close on signal date
//! `t`. Positions open at the prior close and are marked at the day's close.

use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Signal {
    Short,
    Flat,
    Long,
}

impl Signal {
    pub fn value(self) -> i8 {
        match self {
            Signal::Short => -1,
            Signal::Flat => 0,
            Signal::Long => 1,
        }
    }
}

/// Long when the prediction is above the previous close, short when below, flat on a tie.
pub fn signals(predicted: &[f64], actual_prev_close: &[f64]) -> Result<Vec<Signal>> {
    if predicted.len() != actual_prev_close.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} previous closes",
            predicted.len(),
            actual_prev_close.len()
        )));
    }
    Ok(predicted
        .iter()
        .zip(actual_prev_close)
        .map(|(&p, &c)| {
            if p > c {
                Signal::Long
            } else if p < c {
                Signal::Short
            } else {
                Signal::Flat
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalSeries {
    pub dates: Vec<NaiveDate>,
    pub signals: Vec<Signal>,
}

impl SignalSeries {
    pub fn new(dates: Vec<NaiveDate>, signals: Vec<Signal>) -> Result<Self> {
        if dates.len() != signals.len() {
            return Err(Error::Argument(format!("{} dates for {} signals", dates.len(), signals.len())));
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument("signal dates must be strictly increasing".into()));
        }
        Ok(Self { dates, signals })
    }

    pub fn len(&self) -> usize {
        self.signals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Buy,
    Sell,
    Short,
    Cover,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Buy => "buy",
            Side::Sell => "sell",
            Side::Short => "short",
            Side::Cover => "cover",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trade {
    pub date: NaiveDate,
    pub side: Side,
    pub price: f64,
    pub notional: f64,
    pub fee: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestReport {
    pub initial_value: f64,
    pub dates: Vec<NaiveDate>,
    pub signals: Vec<Signal>,
    /// Portfolio value at each date's close.
    pub daily_value: Vec<f64>,
    pub trades: Vec<Trade>,
    pub final_value: f64,
    /// First date on which the portfolio was wiped out; later values are zero.
    pub ruined_on: Option<NaiveDate>,
}

impl BacktestReport {
    /// `date,signal,portfolio_value` rows.
    pub fn write_values_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["date", "signal", "portfolio_value"])?;
        for ((d, s), v) in self.dates.iter().zip(&self.signals).zip(&self.daily_value) {
            w.write_record([d.to_string(), s.value().to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `date,side,price,notional,fee` rows.
    pub fn write_ledger_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["date", "side", "price", "notional", "fee"])?;
        for t in &self.trades {
            w.write_record([
                t.date.to_string(),
                t.side.as_str().to_string(),
                t.price.to_string(),
                t.notional.to_string(),
                t.fee.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_inputs(signals: &SignalSeries, closes: &[f64], fee: f64) -> Result<()> {
    if closes.len() != signals.len() + 1 {
        return Err(Error::Argument(format!(
            "expected {} closes (anchor plus one per signal), got {}",
            signals.len() + 1,
            closes.len()
        )));
    }
    if let Some(p) = closes.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
        return Err(Error::Domain(format!("close price {p} is not positive")));
    }
    if !(0.0..1.0).contains(&fee) {
        return Err(Error::Argument(format!("fee {fee} outside [0,1)")));
    }
    Ok(())
}

/// Each non-flat day the whole portfolio opens at the prior close and closes
/// at the day's close, paying `fee` on both notionals:
/// `V_t = V_{t-1}·(1−fee)·(1 + s·r_t)·(1−fee)`.
pub fn run_long_short(signals: &SignalSeries, closes: &[f64], fee: f64) -> Result<BacktestReport> {
    check_inputs(signals, closes, fee)?;
    let mut value = 1.0;
    let mut daily = Vec::with_capacity(signals.len());
    let mut trades = Vec::new();
    let mut ruined_on = None;
    for (t, (&date, &sig)) in signals.dates.iter().zip(&signals.signals).enumerate() {
        if ruined_on.is_none() && sig != Signal::Flat {
            let (open, close) = (closes[t], closes[t + 1]);
            let s = f64::from(sig.value());
            let r = close / open - 1.0;
            let entry_fee = value * fee;
            let (entry_side, exit_side) = if s > 0.0 {
                (Side::Buy, Side::Sell)
            } else {
                (Side::Short, Side::Cover)
            };
            trades.push(Trade {
                date,
                side: entry_side,
                price: open,
                notional: value,
                fee: entry_fee,
            });
            let exit_notional = (value - entry_fee) * (1.0 + s * r);
            if exit_notional > 0.0 {
                let exit_fee = exit_notional * fee;
                trades.push(Trade {
                    date,
                    side: exit_side,
                    price: close,
                    notional: exit_notional,
                    fee: exit_fee,
                });
                value = exit_notional - exit_fee;
            } else {
                value = 0.0;
            }
            if value <= 0.0 {
                value = 0.0;
                ruined_on = Some(date);
            }
        }
        daily.push(value);
    }
    Ok(BacktestReport {
        initial_value: 1.0,
        dates: signals.dates.clone(),
        signals: signals.signals.clone(),
        daily_value: daily,
        trades,
        final_value: value,
        ruined_on,
    })
}

/// Cash/invested state machine: a long signal in cash buys with the whole
/// balance, a short signal while invested sells everything, anything else
/// holds. Trades execute at the prior close.
pub fn run_buy_sell(signals: &SignalSeries, closes: &[f64], fee: f64) -> Result<BacktestReport> {
    check_inputs(signals, closes, fee)?;
    let mut cash = 1.0;
    let mut coins = 0.0;
    let mut daily = Vec::with_capacity(signals.len());
    let mut trades = Vec::new();
    for (t, (&date, &sig)) in signals.dates.iter().zip(&signals.signals).enumerate() {
        let price = closes[t];
        if coins == 0.0 && sig == Signal::Long {
            let f = cash * fee;
            trades.push(Trade {
                date,
                side: Side::Buy,
                price,
                notional: cash,
                fee: f,
            });
            coins = (cash - f) / price;
            cash = 0.0;
        } else if coins > 0.0 && sig == Signal::Short {
            let proceeds = coins * price;
            let f = proceeds * fee;
            trades.push(Trade {
                date,
                side: Side::Sell,
                price,
                notional: proceeds,
                fee: f,
            });
            cash = proceeds - f;
            coins = 0.0;
        }
        daily.push(if coins > 0.0 { coins * closes[t + 1] } else { cash });
    }
    let final_value = daily.last().copied().unwrap_or(1.0);
    Ok(BacktestReport {
        initial_value: 1.0,
        dates: signals.dates.clone(),
        signals: signals.signals.clone(),
        daily_value: daily,
        trades,
        final_value,
        ruined_on: None,
    })
}

/// Value of one unit bought at the anchor close, marked at each later close.
pub fn buy_and_hold(closes: &[f64]) -> Result<Vec<f64>> {
    let (&first, rest) = closes
        .split_first()
        .ok_or_else(|| Error::Argument("no closes".into()))?;
    if !(first > 0.0) {
        return Err(Error::Domain(format!("close price {first} is not positive")));
    }
    Ok(rest.iter().map(|&c| c / first).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn series(signals: Vec<Signal>) -> SignalSeries {
        let dates = NaiveDate::from_ymd_opt(2019, 1, 1).unwrap().iter_days().take(signals.len()).collect();
        SignalSeries::new(dates, signals).unwrap()
    }

    #[test]
    fn signal_rule() {
        let s = signals(&[105.0, 95.0, 100.0], &[100.0, 100.0, 100.0]).unwrap();
        assert_eq!(s, vec![Signal::Long, Signal::Short, Signal::Flat]);
        assert!(signals(&[1.0], &[]).is_err());
    }

    #[test]
    fn flat_signals_never_trade() {
        let r = run_long_short(&series(vec![Signal::Flat; 3]), &[100.0, 90.0, 120.0, 80.0], 0.008).unwrap();
        assert_eq!(r.final_value, 1.0);
        assert!(r.trades.is_empty());
        let r = run_buy_sell(&series(vec![Signal::Short; 3]), &[100.0, 90.0, 120.0, 80.0], 0.008).unwrap();
        assert_eq!(r.final_value, 1.0);
        assert!(r.trades.is_empty());
    }

    #[test]
    fn long_short_hand_ledger() {
        let up = run_long_short(&series(vec![Signal::Long]), &[100.0, 105.0], 0.008).unwrap();
        assert_abs_diff_eq!(up.final_value, 1.0332672, epsilon = 1e-12);
        assert_eq!(up.trades.len(), 2);
        assert_abs_diff_eq!(up.trades[0].fee, 0.008, epsilon = 1e-15);
        let down = run_long_short(&series(vec![Signal::Short]), &[100.0, 95.0], 0.008).unwrap();
        assert_abs_diff_eq!(down.final_value, 1.0332672, epsilon = 1e-12);
        assert_eq!(down.trades[0].side, Side::Short);
    }

    #[test]
    fn buy_sell_hand_ledger() {
        let r = run_buy_sell(&series(vec![Signal::Long, Signal::Short]), &[100.0, 110.0, 110.0], 0.008).unwrap();
        assert_abs_diff_eq!(r.final_value, 1.0824704, epsilon = 1e-12);
        assert_eq!(r.trades.len(), 2);
        assert_abs_diff_eq!(r.trades[1].notional, 0.00992 * 110.0, epsilon = 1e-12);
    }

    #[test]
    fn repeated_buy_signals_hold() {
        let mut s = vec![Signal::Long; 11];
        s.push(Signal::Short);
        let closes: Vec<f64> = (0..13).map(|i| 100.0 + i as f64).collect();
        let r = run_buy_sell(&series(s), &closes, 0.008).unwrap();
        assert_eq!(r.trades.len(), 2);
    }

    #[test]
    fn short_squeeze_ruins() {
        let r = run_long_short(&series(vec![Signal::Short, Signal::Long]), &[100.0, 250.0, 300.0], 0.0).unwrap();
        assert_eq!(r.ruined_on, Some(NaiveDate::from_ymd_opt(2019, 1, 1).unwrap()));
        assert_eq!(r.daily_value, vec![0.0, 0.0]);
        assert_eq!(r.trades.len(), 1);
    }

    #[test]
    fn input_validation() {
        assert!(run_long_short(&series(vec![Signal::Long]), &[100.0], 0.008).is_err());
        assert!(run_buy_sell(&series(vec![Signal::Long]), &[100.0, -1.0], 0.008).is_err());
        assert!(run_buy_sell(&series(vec![Signal::Long]), &[100.0, 1.0], 1.5).is_err());
        assert!(SignalSeries::new(vec![], vec![Signal::Flat]).is_err());
    }

    #[test]
    fn csv_outputs() {
        let r = run_long_short(&series(vec![Signal::Long]), &[100.0, 105.0], 0.0).unwrap();
        let mut buf = Vec::new();
        r.write_values_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "date,signal,portfolio_value\n2019-01-01,1,1.05\n");
        let mut buf = Vec::new();
        r.write_ledger_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("date,side,price,notional,fee\n2019-01-01,buy,100,1,0\n2019-01-01,sell,105,1.05"));
        assert_eq!(buy_and_hold(&[100.0, 105.0, 90.0]).unwrap(), vec![1.05, 0.9]);
    }
}
