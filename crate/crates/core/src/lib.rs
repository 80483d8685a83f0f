//! Day-ahead electricity price forecasting with market clearing prices from a
//! cost-minimising dispatch model as an extra regressor.

pub mod backtest;
pub mod dispatch;
pub mod evaluate;
pub mod features;
pub mod forest;
pub mod linear;
pub mod lp;
pub mod neural;
pub mod panel;
pub mod storage;
pub mod synth;
