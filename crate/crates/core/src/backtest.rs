//! Rolling monthly out-of-sample backtester.
//!
//! Each calendar month the model is fit on that month's daily excess
//! returns, the top P̃ assets are selected (under-priced first: positive
//! estimated intercept, then score rank), and the equal-weight portfolio
//! is held through the next month. Look-ahead is prevented structurally:
//! the fitting stage only ever receives a panel physically truncated at
//! the rebalance date. Performance per calendar year is reported as
//! compounded return, GARCH(1,1) annualized volatility, historical VaR,
//! and the return/volatility ratio.

use crate::factor::{FactorDesign, FactorError, ReturnsPanel};
use crate::garch::{garch_fit, GarchError};
use crate::hb::{hb_select, run_chain, ChainConfig, HbError, HbPrior};
use crate::oracle::{
    f_test_baseline, DecisionStatistic, LossSpec, OracleError, OracleTest, SigmaMode,
    SpikeSlabPrior,
};
use crate::seeds::derive_seed;
use crate::sim::default_lambda0;
use chrono::{Datelike, NaiveDate};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error(transparent)]
    Factor(#[from] FactorError),

    #[error(transparent)]
    Oracle(#[from] OracleError),

    #[error(transparent)]
    Hb(#[from] HbError),

    #[error("month starting {month}: only {available} assets have complete fit data, need {required}")]
    InsufficientAssets {
        month: NaiveDate,
        available: usize,
        required: usize,
    },

    #[error("invalid panel: {0}")]
    InvalidPanel(String),

    #[error("need at least two calendar months of data")]
    TooFewMonths,
}

/// Daily adjusted-close panel with a benchmark index and optional extra
/// factor index series. Missing prices (assets entering or leaving the
/// universe) are NaN cells.
#[derive(Debug, Clone)]
pub struct PricePanel {
    pub dates: Vec<NaiveDate>,
    pub tickers: Vec<String>,
    /// n_total×P adjusted close; NaN where unavailable.
    pub prices: DMatrix<f64>,
    /// Benchmark index level per date.
    pub benchmark: Vec<f64>,
    /// Additional factor index level series.
    pub factor_series: Vec<(String, Vec<f64>)>,
    /// Daily risk-free rate per date; zeros when absent.
    pub risk_free: Vec<f64>,
}

impl PricePanel {
    pub fn new(
        dates: Vec<NaiveDate>,
        tickers: Vec<String>,
        prices: DMatrix<f64>,
        benchmark: Vec<f64>,
        factor_series: Vec<(String, Vec<f64>)>,
        risk_free: Option<Vec<f64>>,
    ) -> Result<Self, BacktestError> {
        let n = dates.len();
        if prices.nrows() != n || prices.ncols() != tickers.len() {
            return Err(BacktestError::InvalidPanel(format!(
                "prices are {}x{}, expected {}x{}",
                prices.nrows(),
                prices.ncols(),
                n,
                tickers.len()
            )));
        }
        if benchmark.len() != n {
            return Err(BacktestError::InvalidPanel(
                "benchmark series length does not match dates".into(),
            ));
        }
        for w in dates.windows(2) {
            if w[1] <= w[0] {
                return Err(BacktestError::InvalidPanel(format!(
                    "dates not strictly increasing at {}",
                    w[1]
                )));
            }
        }
        if prices.iter().any(|p| !p.is_nan() && *p <= 0.0) {
            return Err(BacktestError::InvalidPanel(
                "non-positive price present".into(),
            ));
        }
        if benchmark.iter().any(|p| !(*p > 0.0)) {
            return Err(BacktestError::InvalidPanel(
                "benchmark levels must be positive".into(),
            ));
        }
        for (name, series) in &factor_series {
            if series.len() != n {
                return Err(BacktestError::InvalidPanel(format!(
                    "factor series {name} length mismatch"
                )));
            }
            if series.iter().any(|p| !(*p > 0.0)) {
                return Err(BacktestError::InvalidPanel(format!(
                    "factor series {name} has non-positive levels"
                )));
            }
        }
        let risk_free = match risk_free {
            Some(rf) => {
                if rf.len() != n {
                    return Err(BacktestError::InvalidPanel(
                        "risk-free series length mismatch".into(),
                    ));
                }
                rf
            }
            None => vec![0.0; n],
        };
        Ok(Self {
            dates,
            tickers,
            prices,
            benchmark,
            factor_series,
            risk_free,
        })
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    /// Physical copy of the first `end` rows: the only view the fitting
    /// stage ever sees, so future data cannot leak into selection.
    pub fn truncate_rows(&self, end: usize) -> PricePanel {
        let end = end.min(self.n_days());
        PricePanel {
            dates: self.dates[..end].to_vec(),
            tickers: self.tickers.clone(),
            prices: self.prices.rows(0, end).into_owned(),
            benchmark: self.benchmark[..end].to_vec(),
            factor_series: self
                .factor_series
                .iter()
                .map(|(n, s)| (n.clone(), s[..end].to_vec()))
                .collect(),
            risk_free: self.risk_free[..end].to_vec(),
        }
    }
}

/// One fit/hold month pair as row ranges (end-exclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RebalancePair {
    pub fit_start: usize,
    pub fit_end: usize,
    pub hold_start: usize,
    pub hold_end: usize,
}

/// Builds the month-over-month schedule. Pairs whose fit month has fewer
/// than `min_fit_days` trading days are skipped.
pub fn monthly_schedule(dates: &[NaiveDate], min_fit_days: usize) -> Vec<RebalancePair> {
    let mut months: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for t in 1..=dates.len() {
        let new_month = t == dates.len()
            || (dates[t].year(), dates[t].month()) != (dates[start].year(), dates[start].month());
        if new_month {
            months.push((start, t));
            start = t;
        }
    }
    months
        .windows(2)
        .filter(|w| w[0].1 - w[0].0 >= min_fit_days)
        .map(|w| RebalancePair {
            fit_start: w[0].0,
            fit_end: w[0].1,
            hold_start: w[1].0,
            hold_end: w[1].1,
        })
        .collect()
}

/// Asset-ranking rule applied each month.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Selector {
    /// Spike-and-slab test with plug-in σ̂ᵢ; ranks by π̃ of S̃.
    Oracle {
        sparsity: f64,
        #[serde(default)]
        lambda0: Option<Vec<Vec<f64>>>,
    },
    /// Hierarchical-Bayes chain; ranks by posterior P(α > 0).
    Hb {
        iterations: usize,
        burn_in: usize,
        stride: usize,
    },
    /// Joint F-test baseline; ranks by the F statistic.
    FTest { significance: f64 },
}

impl Selector {
    pub fn name(&self) -> &'static str {
        match self {
            Selector::Oracle { .. } => "oracle",
            Selector::Hb { .. } => "hb",
            Selector::FTest { .. } => "ftest",
        }
    }
}

/// A month's chosen portfolio.
#[derive(Debug, Clone)]
pub struct MonthSelection {
    /// First trading day of the hold month.
    pub hold_month: NaiveDate,
    /// Tickers held (equal weight).
    pub tickers: Vec<String>,
}

/// A strategy's full out-of-sample record.
#[derive(Debug, Clone)]
pub struct StrategyRun {
    pub name: String,
    pub daily: Vec<(NaiveDate, f64)>,
    pub selections: Vec<MonthSelection>,
}

struct AssetScore {
    col: usize,
    score: f64,
    alpha: f64,
}

/// Log returns of an index level series over [start+1, end).
fn level_returns(levels: &[f64], start: usize, end: usize) -> Vec<f64> {
    (start + 1..end)
        .map(|t| levels[t] / levels[t - 1] - 1.0)
        .collect()
}

/// Scores all eligible assets of `visible` on the fit window. Only called
/// with panels truncated at the rebalance date.
fn fit_scores(
    visible: &PricePanel,
    pair: RebalancePair,
    selector: &Selector,
    seed: u64,
    month_index: usize,
) -> Result<Vec<AssetScore>, BacktestError> {
    let (fs, fe) = (pair.fit_start, pair.fit_end);
    debug_assert!(fe <= visible.n_days());
    let n_ret = fe - fs - 1;
    let rf = &visible.risk_free[fs + 1..fe];

    let mut market = level_returns(&visible.benchmark, fs, fe);
    for (m, r) in market.iter_mut().zip(rf) {
        *m -= r;
    }
    let extras: Vec<Vec<f64>> = visible
        .factor_series
        .iter()
        .map(|(_, levels)| {
            let mut f = level_returns(levels, fs, fe);
            for (v, r) in f.iter_mut().zip(rf) {
                *v -= r;
            }
            f
        })
        .collect();
    let design = FactorDesign::build(&market, &extras)?;

    let eligible: Vec<usize> = (0..visible.tickers.len())
        .filter(|&i| (fs..fe).all(|t| visible.prices[(t, i)].is_finite()))
        .collect();

    let mut excess = DMatrix::zeros(n_ret, eligible.len());
    for (j, &col) in eligible.iter().enumerate() {
        for (row, t) in (fs + 1..fe).enumerate() {
            let ret = visible.prices[(t, col)] / visible.prices[(t - 1, col)] - 1.0;
            excess[(row, j)] = ret - rf[row];
        }
    }

    let scores = match selector {
        Selector::Oracle { sparsity, lambda0 } => {
            let dim = design.dim();
            let lam0 = match lambda0 {
                Some(rows) => {
                    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                    DMatrix::from_row_slice(dim, dim, &flat)
                }
                None => default_lambda0(dim),
            };
            let prior = SpikeSlabPrior::new(*sparsity, lam0)?;
            let harness = OracleTest::new(
                &prior,
                LossSpec::default(),
                &design,
                SigmaMode::PlugIn,
                DecisionStatistic::Projection,
            )?;
            eligible
                .iter()
                .enumerate()
                .map(|(j, &col)| {
                    let r_j = DVector::from_column_slice(excess.column(j).as_slice());
                    let res = harness.test_asset(col, &r_j)?;
                    Ok(AssetScore {
                        col,
                        score: res.pip,
                        alpha: res.alpha_hat,
                    })
                })
                .collect::<Result<Vec<_>, BacktestError>>()?
        }
        Selector::FTest { significance } => eligible
            .iter()
            .enumerate()
            .map(|(j, &col)| {
                let r_j = DVector::from_column_slice(excess.column(j).as_slice());
                let est = crate::factor::ols_estimate(&design, &r_j)?;
                let out = f_test_baseline(&design, &est, *significance)?;
                Ok(AssetScore {
                    col,
                    score: if out.statistic.is_finite() {
                        out.statistic
                    } else {
                        f64::MAX
                    },
                    alpha: est.theta_hat[0],
                })
            })
            .collect::<Result<Vec<_>, BacktestError>>()?,
        Selector::Hb {
            iterations,
            burn_in,
            stride,
        } => {
            let panel = ReturnsPanel::new(
                visible.dates[fs + 1..fe].to_vec(),
                eligible.iter().map(|&c| visible.tickers[c].clone()).collect(),
                excess.clone(),
            )?;
            let prior = HbPrior::defaults(design.dim());
            let cfg = ChainConfig::new(
                *iterations,
                *burn_in,
                *stride,
                derive_seed(seed, "backtest-hb", month_index as u64),
            );
            let draws = run_chain(&panel, &design, &prior, &cfg)?;
            let ranked = hb_select(&draws, eligible.len())?;
            ranked
                .into_iter()
                .map(|s| AssetScore {
                    col: eligible[s.asset],
                    score: s.prob_alpha_positive,
                    alpha: s.mean_alpha,
                })
                .collect()
        }
    };
    Ok(scores)
}

/// Runs the rolling backtest for one selector. Each month the under-priced
/// assets (positive estimated α) are taken first by score rank, the rest
/// of the P̃ slots filled by rank among the others; the equal-weight
/// portfolio's daily return through the hold month is the arithmetic mean
/// of constituent daily returns.
pub fn monthly_rebalance(
    panel: &PricePanel,
    selector: &Selector,
    p_tilde: usize,
    schedule: &[RebalancePair],
    seed: u64,
) -> Result<StrategyRun, BacktestError> {
    if schedule.is_empty() {
        return Err(BacktestError::TooFewMonths);
    }
    let mut daily = Vec::new();
    let mut selections = Vec::new();
    for (month_index, pair) in schedule.iter().enumerate() {
        // The fitting stage sees only data up to the rebalance date.
        let visible = panel.truncate_rows(pair.hold_start);
        let mut scores = fit_scores(&visible, *pair, selector, seed, month_index)?;
        if scores.len() < p_tilde {
            return Err(BacktestError::InsufficientAssets {
                month: panel.dates[pair.hold_start],
                available: scores.len(),
                required: p_tilde,
            });
        }
        // under-priced first, each group by score rank (ties by column)
        scores.sort_by(|a, b| {
            let ga = a.alpha <= 0.0;
            let gb = b.alpha <= 0.0;
            ga.cmp(&gb)
                .then(b.score.partial_cmp(&a.score).unwrap())
                .then(a.col.cmp(&b.col))
        });
        let chosen: Vec<usize> = scores.iter().take(p_tilde).map(|s| s.col).collect();
        selections.push(MonthSelection {
            hold_month: panel.dates[pair.hold_start],
            tickers: chosen.iter().map(|&c| panel.tickers[c].clone()).collect(),
        });

        // hold-month daily returns with prices carried over gaps
        let mut last: Vec<f64> = chosen
            .iter()
            .map(|&c| panel.prices[(pair.hold_start - 1, c)])
            .collect();
        debug_assert!(last.iter().all(|p| p.is_finite()));
        for t in pair.hold_start..pair.hold_end {
            let mut sum = 0.0;
            for (k, &c) in chosen.iter().enumerate() {
                let price = panel.prices[(t, c)];
                if price.is_finite() {
                    sum += price / last[k] - 1.0;
                    last[k] = price;
                }
            }
            daily.push((panel.dates[t], sum / chosen.len() as f64));
        }
    }
    Ok(StrategyRun {
        name: selector.name().into(),
        daily,
        selections,
    })
}

/// The passive benchmark column: index daily returns over the hold months.
pub fn benchmark_strategy(panel: &PricePanel, schedule: &[RebalancePair]) -> StrategyRun {
    let mut daily = Vec::new();
    for pair in schedule {
        for t in pair.hold_start..pair.hold_end {
            daily.push((
                panel.dates[t],
                panel.benchmark[t] / panel.benchmark[t - 1] - 1.0,
            ));
        }
    }
    StrategyRun {
        name: "market".into(),
        daily,
        selections: Vec::new(),
    }
}

/// Compounded return over a year's trading days, in percent.
pub fn annual_return(returns: &[f64]) -> f64 {
    100.0 * (returns.iter().map(|r| 1.0 + r).product::<f64>() - 1.0)
}

/// Annualized volatility from a year's slice of conditional variances:
/// 100·√252·mean(√h_t).
pub fn annualized_vol(cond_var: &[f64]) -> f64 {
    if cond_var.is_empty() {
        return 0.0;
    }
    let mean_sd: f64 = cond_var.iter().map(|h| h.sqrt()).sum::<f64>() / cond_var.len() as f64;
    100.0 * 252.0_f64.sqrt() * mean_sd
}

/// Historical one-day VaR at the given confidence, reported as a positive
/// loss percentage. Uses the linear-interpolation quantile; never
/// negative (a year without losses reports 0).
pub fn var_historical(returns: &[f64], confidence: f64) -> f64 {
    assert!(
        returns.len() >= 20,
        "need at least 20 observations for historical VaR"
    );
    assert!(confidence > 0.0 && confidence < 1.0);
    let mut sorted = returns.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = 1.0 - confidence;
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    let quantile = if lo + 1 < sorted.len() {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    };
    (-100.0 * quantile).max(0.0)
}

/// Annual return over annualized volatility; undefined when volatility is
/// not positive.
pub fn risk_adjusted(annual_return_pct: f64, ann_vol_pct: f64) -> Option<f64> {
    if ann_vol_pct > 0.0 {
        Some(annual_return_pct / ann_vol_pct)
    } else {
        None
    }
}

/// One calendar year's performance line.
#[derive(Debug, Clone, Serialize)]
pub struct YearRow {
    pub year: i32,
    pub annual_return: f64,
    pub ann_vol: f64,
    pub var: f64,
    pub risk_adjusted: Option<f64>,
}

/// A strategy's yearly table plus its daily series.
#[derive(Debug, Clone)]
pub struct StrategyPerf {
    pub name: String,
    pub daily: Vec<(NaiveDate, f64)>,
    pub years: Vec<YearRow>,
    /// Years skipped for having fewer than 20 observations.
    pub skipped_years: Vec<i32>,
}

/// Minimum trading days for a year to be reported.
const MIN_YEAR_OBS: usize = 20;

/// Builds the yearly report: compounded return, GARCH(1,1) volatility
/// (sample-variance fallback when the fit does not converge), historical
/// VaR, and return/volatility. The GARCH model is fit once over the whole
/// series and sliced by year.
pub fn performance_report(run: &StrategyRun, var_confidence: f64) -> StrategyPerf {
    let returns: Vec<f64> = run.daily.iter().map(|(_, r)| *r).collect();
    let garch = garch_fit(&returns);
    let cond_var: Option<&[f64]> = match &garch {
        Ok(fit) => Some(&fit.cond_var),
        Err(GarchError::NonConvergence) | Err(GarchError::TooFewObservations { .. }) => None,
    };

    let mut years = Vec::new();
    let mut skipped = Vec::new();
    let mut idx = 0;
    while idx < run.daily.len() {
        let year = run.daily[idx].0.year();
        let start = idx;
        while idx < run.daily.len() && run.daily[idx].0.year() == year {
            idx += 1;
        }
        let slice = &returns[start..idx];
        if slice.len() < MIN_YEAR_OBS {
            skipped.push(year);
            continue;
        }
        let ret = annual_return(slice);
        let vol = match cond_var {
            Some(h) => annualized_vol(&h[start..idx]),
            None => {
                // sample-variance fallback
                let mean = slice.iter().sum::<f64>() / slice.len() as f64;
                let var =
                    slice.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / slice.len() as f64;
                100.0 * 252.0_f64.sqrt() * var.sqrt()
            }
        };
        years.push(YearRow {
            year,
            annual_return: ret,
            ann_vol: vol,
            var: var_historical(slice, var_confidence),
            risk_adjusted: risk_adjusted(ret, vol),
        });
    }
    StrategyPerf {
        name: run.name.clone(),
        daily: run.daily.clone(),
        years,
        skipped_years: skipped,
    }
}
