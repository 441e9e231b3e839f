//! Portfolio decisions by supervised learning.
//!
//! The crate builds monthly ratio-maximizing target portfolios, trains
//! sequence models to predict them, averages independently seeded members
//! into deep ensembles and evaluates every decision schedule in a
//! lagged, cost-aware backtester.

pub mod backtest;
pub mod ensemble;
pub mod marketdata;
pub mod metrics;
pub mod targetsolver;
pub mod strategies;
pub mod tensorauto;
