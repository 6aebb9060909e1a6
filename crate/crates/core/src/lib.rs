//! Limit order book forecasting and tick-driven backtesting toolkit.
//!
//! The pipeline runs in stages, each usable on its own:
//!
//! 1. [`lob`] — parse, validate and deduplicate level-2 snapshot streams,
//!    or generate seeded synthetic streams for experiments.
//! 2. [`features`] — weighted midprices, log-returns, the 38-feature
//!    representation, online-normalized look-back windows, and an ADF
//!    stationarity probe.
//! 3. [`nn`] — a small dense-tensor graph with reverse-mode gradients,
//!    the layer zoo (attention, layer norm, spiking gates, ...), losses,
//!    and AdamW.
//! 4. [`models`] — the transformer-encoder forecaster, the LSTM baseline,
//!    and ablation variants assembled from [`nn`].
//! 5. [`train`] — mini-batch training with early stopping, grid search,
//!    and regression/classification metrics.
//! 6. [`backtest`] — tick-driven simulation of multi-signal strategies
//!    with slippage, trade sizing and PnL reporting.
//!
//! The `hflab` binary wires these stages behind subcommands; see the
//! repository README for end-to-end usage.

pub mod backtest;
pub mod config;
pub mod features;
pub mod lob;
pub mod models;
pub mod nn;
pub mod train;
