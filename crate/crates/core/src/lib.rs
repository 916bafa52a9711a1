//! Bayesian portfolio selection via multiple testing of k-factor
//! asset-pricing restrictions.
//!
//! The library tests, for every asset in a market, the joint restriction
//! that its intercept is zero and its market loading is one (with all
//! other factor loadings zero). Assets for which the restriction is
//! rejected are candidates for an actively selected portfolio. Two testing
//! routes are provided: a spike-and-slab Bayes oracle test ([`oracle`])
//! backed by weighted chi-square distribution machinery ([`quadform`]),
//! and a hierarchical-Bayes shrinkage sampler with a half-Cauchy global
//! scale ([`hb`]). [`sim`] generates synthetic markets and runs the four
//! calibration experiments; [`backtest`] evaluates selection strategies
//! on price panels with monthly rebalancing and GARCH / VaR risk
//! reporting.

pub mod backtest;
pub mod factor;
pub mod garch;
pub mod hb;
pub mod io;
pub mod oracle;
pub mod quadform;
pub mod seeds;
pub mod sim;

pub use factor::{AssetEstimate, FactorDesign, FactorError, NullPoint, ReturnsPanel};
pub use oracle::{LossSpec, OracleTest, OracleTestResult, SpikeSlabPrior};
pub use quadform::{EigenWeights, WeightedChiSquare};
