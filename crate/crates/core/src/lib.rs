//! Recurrent-network price forecasting, feature engineering, seasonal ARIMA
//! baselines and trading backtests over daily cryptocurrency series.
//!
//! Numerical cores are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix the scalar to `f64`.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backtest;
pub mod cells;
pub mod dataset;
pub mod error;
pub mod features;
pub mod numerics;
pub mod sarima;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = numerics::Matrix<f64>;
pub type RecurrentNetwork = cells::RecurrentNetwork<f64>;
pub type GruParams = cells::GruParams<f64>;
pub type LstmParams = cells::LstmParams<f64>;
pub type DenseParams = cells::DenseParams<f64>;
pub type DropoutMasks = cells::DropoutMasks<f64>;
pub type ParamSet = cells::ParamSet<f64>;

pub type Matrix32 = numerics::Matrix<f32>;
pub type RecurrentNetwork32 = cells::RecurrentNetwork<f32>;
pub type WindowedDataset = dataset::WindowedDataset<f64>;
pub type AdamState = training::AdamState<f64>;
