//! TOML run configuration.

use bayes_portfolio::sim::{
    Experiment1Config, Experiment2Config, Experiment3Config, Experiment4Config,
};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Master seed; the `--seed` flag overrides it.
    pub master_seed: Option<u64>,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub test: TestSection,
    #[serde(default)]
    pub hb: HbSection,
    #[serde(default)]
    pub backtest: BacktestSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    /// Experiment id 1..4; the `--experiment` flag overrides it.
    pub experiment: Option<u8>,
    /// Full per-experiment grids; absent sections use the library
    /// defaults (with the master seed applied).
    pub experiment1: Option<Experiment1Config>,
    pub experiment2: Option<Experiment2Config>,
    pub experiment3: Option<Experiment3Config>,
    pub experiment4: Option<Experiment4Config>,
}

/// Shared ingestion settings: which level series accompany the prices.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Benchmark index level CSV (`date,level`); required.
    pub benchmark: Option<String>,
    /// Additional factor level CSVs.
    #[serde(default)]
    pub factors: Vec<String>,
    /// Optional risk-free daily rate CSV (`date,rate`).
    pub risk_free: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TestSection {
    #[serde(flatten)]
    pub data: DataSection,
    /// Sparsity prior p of the spike-and-slab test.
    pub sparsity: f64,
    /// Optional slab precision rows; defaults per dimension.
    pub lambda0: Option<Vec<Vec<f64>>>,
    /// Type-I and type-II loss weights.
    pub delta0: f64,
    pub delta_a: f64,
    /// Analysis window (inclusive); defaults to the whole panel.
    pub start: Option<NaiveDate>,
    pub end: Option<NaiveDate>,
}

impl Default for TestSection {
    fn default() -> Self {
        Self {
            data: DataSection::default(),
            sparsity: 0.05,
            lambda0: None,
            delta0: 1.0,
            delta_a: 1.0,
            start: None,
            end: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HbSection {
    #[serde(flatten)]
    pub data: DataSection,
    pub iterations: usize,
    pub burn_in: usize,
    pub stride: usize,
    /// Portfolio size for the emitted ranking.
    pub p_tilde: usize,
    pub start: Option<NaiveDate>,
    pub end: Option<NaiveDate>,
}

impl Default for HbSection {
    fn default() -> Self {
        Self {
            data: DataSection::default(),
            iterations: 1000,
            burn_in: 200,
            stride: 1,
            p_tilde: 25,
            start: None,
            end: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BacktestSection {
    #[serde(flatten)]
    pub data: DataSection,
    pub p_tilde: usize,
    /// Strategies to run: any of oracle, hb, ftest, market. The
    /// `--selector` flag restricts to one.
    pub selectors: Vec<String>,
    pub var_confidence: f64,
    /// Sparsity prior for the oracle selector.
    pub sparsity: f64,
    pub lambda0: Option<Vec<Vec<f64>>>,
    /// F-test significance for the ftest selector.
    pub significance: f64,
    pub hb_iterations: usize,
    pub hb_burn_in: usize,
    pub hb_stride: usize,
    /// Months with fewer fit days are skipped.
    pub min_fit_days: usize,
}

impl Default for BacktestSection {
    fn default() -> Self {
        Self {
            data: DataSection::default(),
            p_tilde: 25,
            selectors: vec![
                "oracle".into(),
                "hb".into(),
                "ftest".into(),
                "market".into(),
            ],
            var_confidence: 0.99,
            sparsity: 0.05,
            lambda0: None,
            significance: 0.05,
            hb_iterations: 600,
            hb_burn_in: 200,
            hb_stride: 1,
            min_fit_days: 15,
        }
    }
}
