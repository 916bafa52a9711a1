//! Command implementations. Every command is a deterministic batch job:
//! inputs + config + seed fully determine the report files; only the
//! manifest carries a timestamp.

use crate::config::{BacktestSection, Config, DataSection};
use crate::manifest::RunManifest;
use bayes_portfolio::backtest::{
    benchmark_strategy, monthly_rebalance, monthly_schedule, performance_report, BacktestError,
    PricePanel, Selector, StrategyPerf,
};
use bayes_portfolio::factor::{FactorDesign, FactorError, ReturnsPanel};
use bayes_portfolio::garch::GarchError;
use bayes_portfolio::hb::{run_chain, ChainConfig, HbError, HbPrior};
use bayes_portfolio::io::{
    assemble_price_panel, read_daily_returns, read_price_csv, read_series_csv, write_metric_rows,
    write_oracle_report, write_perf_reports, write_trace, IoError,
};
use bayes_portfolio::oracle::{
    DecisionStatistic, LossSpec, OracleError, OracleTest, SigmaMode, SpikeSlabPrior,
};
use bayes_portfolio::quadform::QuadFormError;
use bayes_portfolio::seeds::derive_seed;
use bayes_portfolio::sim::{
    run_experiment1, run_experiment2, run_experiment3, run_experiment4, default_lambda0,
};
use chrono::NaiveDate;
use nalgebra::DMatrix;
use std::path::{Path, PathBuf};

/// Exit codes: 2 config, 3 data, 4 numerical.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<FactorError> for CliError {
    fn from(e: FactorError) -> Self {
        match e {
            FactorError::RankDeficient { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::InvalidPrior(_) | OracleError::Infeasible { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<QuadFormError> for CliError {
    fn from(e: QuadFormError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<HbError> for CliError {
    fn from(e: HbError) -> Self {
        match e {
            HbError::InvalidPrior(m) | HbError::InvalidInput(m) => CliError::Config(m),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<BacktestError> for CliError {
    fn from(e: BacktestError) -> Self {
        match e {
            BacktestError::InsufficientAssets { .. }
            | BacktestError::InvalidPanel(_)
            | BacktestError::TooFewMonths => CliError::Data(e.to_string()),
            BacktestError::Factor(f) => f.into(),
            BacktestError::Oracle(o) => o.into(),
            BacktestError::Hb(h) => h.into(),
        }
    }
}

impl From<GarchError> for CliError {
    fn from(e: GarchError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub fn load_config(path: Option<&Path>) -> Result<(Config, toml::Value), CliError> {
    match path {
        None => Ok((Config::default(), toml::Value::Table(Default::default()))),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            let value: toml::Value = text
                .parse()
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            let config: Config = value
                .clone()
                .try_into()
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            Ok((config, value))
        }
    }
}

pub fn resolve_seed(cli_seed: Option<u64>, config: &Config) -> u64 {
    cli_seed.or(config.master_seed).unwrap_or(42)
}

fn ensure_out(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

/// Runs one simulation experiment and writes its tidy table.
pub fn cmd_simulate(
    config: &Config,
    raw_config: toml::Value,
    experiment: Option<u8>,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let id = experiment
        .or(config.simulate.experiment)
        .ok_or_else(|| CliError::Config("no experiment id (use --experiment 1..4)".into()))?;
    ensure_out(out)?;
    let rows = match id {
        1 => {
            let mut cfg = config.simulate.experiment1.clone().unwrap_or_default();
            cfg.seed = seed;
            run_experiment1(&cfg)?
        }
        2 => {
            let mut cfg = config.simulate.experiment2.clone().unwrap_or_default();
            cfg.seed = seed;
            run_experiment2(&cfg)?
        }
        3 => {
            let mut cfg = config.simulate.experiment3.clone().unwrap_or_default();
            cfg.seed = seed;
            run_experiment3(&cfg)?
        }
        4 => {
            let mut cfg = config.simulate.experiment4.clone().unwrap_or_default();
            cfg.seed = seed;
            run_experiment4(&cfg)?
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown experiment id {other}; expected 1..4"
            )))
        }
    };
    let table = out.join(format!("experiment{id}.csv"));
    write_metric_rows(&table, &rows)?;
    RunManifest::new(
        &format!("simulate --experiment {id}"),
        seed,
        raw_config,
        vec![table.display().to_string()],
    )
    .write(out)?;
    println!("experiment {id}: {} rows -> {}", rows.len(), table.display());
    Ok(())
}

fn load_panel(prices: &Path, data: &DataSection) -> Result<PricePanel, CliError> {
    let raw = read_price_csv(prices)?;
    let bench_path = data
        .benchmark
        .as_ref()
        .ok_or_else(|| CliError::Config("benchmark level CSV is required".into()))?;
    let benchmark = read_series_csv(Path::new(bench_path), "level")?;
    let factors = data
        .factors
        .iter()
        .map(|p| {
            let series = read_series_csv(Path::new(p), "level")?;
            Ok((
                Path::new(p)
                    .file_stem()
                    .map(|s| s.to_string_lossy().to_string())
                    .unwrap_or_else(|| p.clone()),
                series,
            ))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let risk_free = data
        .risk_free
        .as_ref()
        .map(|p| read_series_csv(Path::new(p), "rate"))
        .transpose()?;
    Ok(assemble_price_panel(raw, benchmark, factors, risk_free)?)
}

/// Row range of the panel within the inclusive date window.
fn window_rows(
    panel: &PricePanel,
    start: Option<NaiveDate>,
    end: Option<NaiveDate>,
) -> (usize, usize) {
    let lo = match start {
        Some(s) => panel.dates.partition_point(|d| *d < s),
        None => 0,
    };
    let hi = match end {
        Some(e) => panel.dates.partition_point(|d| *d <= e),
        None => panel.n_days(),
    };
    (lo, hi)
}

/// Excess-return panel and factor design over a row window, restricted to
/// assets with complete data there.
fn window_returns(
    panel: &PricePanel,
    lo: usize,
    hi: usize,
) -> Result<(ReturnsPanel, FactorDesign), CliError> {
    if hi <= lo + 2 {
        return Err(CliError::Data(format!(
            "window has {} trading days; need at least 3",
            hi.saturating_sub(lo)
        )));
    }
    let rf = &panel.risk_free[lo + 1..hi];
    let mut market: Vec<f64> = (lo + 1..hi)
        .map(|t| panel.benchmark[t] / panel.benchmark[t - 1] - 1.0)
        .collect();
    for (m, r) in market.iter_mut().zip(rf) {
        *m -= r;
    }
    let extras: Vec<Vec<f64>> = panel
        .factor_series
        .iter()
        .map(|(_, levels)| {
            let mut f: Vec<f64> = (lo + 1..hi)
                .map(|t| levels[t] / levels[t - 1] - 1.0)
                .collect();
            for (v, r) in f.iter_mut().zip(rf) {
                *v -= r;
            }
            f
        })
        .collect();
    let design = match FactorDesign::build(&market, &extras) {
        Ok(d) => d,
        Err(FactorError::RankDeficient { n, cols, .. }) if n <= cols => {
            return Err(CliError::Data(format!(
                "insufficient data: window has {n} return days for {cols} design columns"
            )))
        }
        Err(e) => return Err(e.into()),
    };
    let eligible: Vec<usize> = (0..panel.tickers.len())
        .filter(|&i| (lo..hi).all(|t| panel.prices[(t, i)].is_finite()))
        .collect();
    if eligible.is_empty() {
        return Err(CliError::Data(
            "no asset has complete data in the window".into(),
        ));
    }
    let mut excess = DMatrix::zeros(hi - lo - 1, eligible.len());
    for (j, &col) in eligible.iter().enumerate() {
        for (row, t) in (lo + 1..hi).enumerate() {
            excess[(row, j)] =
                panel.prices[(t, col)] / panel.prices[(t - 1, col)] - 1.0 - rf[row];
        }
    }
    let returns = ReturnsPanel::new(
        panel.dates[lo + 1..hi].to_vec(),
        eligible
            .iter()
            .map(|&c| panel.tickers[c].clone())
            .collect(),
        excess,
    )?;
    Ok((returns, design))
}

/// Per-asset oracle test over a date window of a price panel.
pub fn cmd_test(
    config: &Config,
    raw_config: toml::Value,
    prices: &Path,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let section = &config.test;
    let panel = load_panel(prices, &section.data)?;
    let (lo, hi) = window_rows(&panel, section.start, section.end);
    let (returns, design) = window_returns(&panel, lo, hi)?;
    let dim = design.dim();
    let lambda0 = match &section.lambda0 {
        Some(rows) => {
            if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                return Err(CliError::Config(format!("lambda0 must be {dim}x{dim}")));
            }
            DMatrix::from_row_slice(dim, dim, &rows.iter().flatten().copied().collect::<Vec<_>>())
        }
        None => default_lambda0(dim),
    };
    let prior = SpikeSlabPrior::new(section.sparsity, lambda0)?;
    let loss = LossSpec::new(section.delta0, section.delta_a)?;
    let harness = OracleTest::new(
        &prior,
        loss,
        &design,
        SigmaMode::PlugIn,
        DecisionStatistic::Projection,
    )?;
    let results = harness.run_panel(&returns)?;
    if results.iter().any(|r| r.c2 < 0.0) {
        eprintln!(
            "warning: negative rejection threshold (dense regime, p = {}): every asset is \
             rejected; the mixture test is not informative here",
            section.sparsity
        );
    }
    ensure_out(out)?;
    let table = out.join("oracle_report.csv");
    write_oracle_report(&table, &returns.assets, &results)?;
    RunManifest::new("test", seed, raw_config, vec![table.display().to_string()]).write(out)?;
    println!(
        "tested {} assets over {} days -> {}",
        returns.n_assets(),
        returns.n_days(),
        table.display()
    );
    Ok(())
}

/// Hierarchical-Bayes fit over a date window: chain trace plus ranking.
pub fn cmd_hb_fit(
    config: &Config,
    raw_config: toml::Value,
    prices: &Path,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let section = &config.hb;
    let panel = load_panel(prices, &section.data)?;
    let (lo, hi) = window_rows(&panel, section.start, section.end);
    let (returns, design) = window_returns(&panel, lo, hi)?;
    let prior = HbPrior::defaults(design.dim());
    let chain_cfg = ChainConfig::new(
        section.iterations,
        section.burn_in,
        section.stride,
        derive_seed(seed, "hb-fit", 0),
    );
    let draws = run_chain(&returns, &design, &prior, &chain_cfg)?;
    let ranked = bayes_portfolio::hb::hb_select(&draws, section.p_tilde.min(returns.n_assets()))?;
    ensure_out(out)?;
    let trace = out.join("trace.csv");
    write_trace(&trace, &draws)?;
    let ranking = out.join("ranking.csv");
    {
        let mut w = csv::WriterBuilder::new()
            .from_path(&ranking)
            .map_err(|e| CliError::Data(e.to_string()))?;
        w.write_record(["rank", "asset", "prob_alpha_positive", "mean_alpha"])
            .map_err(|e| CliError::Data(e.to_string()))?;
        for (rank, s) in ranked.iter().enumerate() {
            w.write_record([
                (rank + 1).to_string(),
                returns.assets[s.asset].clone(),
                format!("{}", s.prob_alpha_positive),
                format!("{}", s.mean_alpha),
            ])
            .map_err(|e| CliError::Data(e.to_string()))?;
        }
        w.flush().map_err(|e| CliError::Data(e.to_string()))?;
    }
    RunManifest::new(
        "hb-fit",
        seed,
        raw_config,
        vec![trace.display().to_string(), ranking.display().to_string()],
    )
    .write(out)?;
    println!(
        "chain of {} retained draws (tau acceptance {:.2}) -> {}, {}",
        draws.states.len(),
        draws.tau_acceptance,
        trace.display(),
        ranking.display()
    );
    Ok(())
}

fn selector_from_name(name: &str, section: &BacktestSection) -> Result<Option<Selector>, CliError> {
    match name {
        "oracle" => Ok(Some(Selector::Oracle {
            sparsity: section.sparsity,
            lambda0: section.lambda0.clone(),
        })),
        "hb" => Ok(Some(Selector::Hb {
            iterations: section.hb_iterations,
            burn_in: section.hb_burn_in,
            stride: section.hb_stride,
        })),
        "ftest" => Ok(Some(Selector::FTest {
            significance: section.significance,
        })),
        "market" => Ok(None), // passive benchmark column
        other => Err(CliError::Config(format!(
            "unknown selector {other:?}; expected oracle|hb|ftest|market"
        ))),
    }
}

/// Full rolling backtest across the configured strategies.
pub fn cmd_backtest(
    config: &Config,
    raw_config: toml::Value,
    prices: &Path,
    selector_override: Option<&str>,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let section = &config.backtest;
    let panel = load_panel(prices, &section.data)?;
    let schedule = monthly_schedule(&panel.dates, section.min_fit_days);
    if schedule.is_empty() {
        return Err(CliError::Data(
            "need at least two calendar months of data".into(),
        ));
    }
    let names: Vec<String> = match selector_override {
        Some(s) => vec![s.to_string()],
        None => section.selectors.clone(),
    };
    let mut perfs: Vec<StrategyPerf> = Vec::new();
    for name in &names {
        let run = match selector_from_name(name, section)? {
            Some(selector) => {
                monthly_rebalance(&panel, &selector, section.p_tilde, &schedule, seed)?
            }
            None => benchmark_strategy(&panel, &schedule),
        };
        perfs.push(performance_report(&run, section.var_confidence));
    }
    ensure_out(out)?;
    write_perf_reports(out, &perfs)?;
    let outputs = ["returns.csv", "vol.csv", "var.csv", "riskadj.csv", "daily_returns.csv"]
        .iter()
        .map(|f| out.join(f).display().to_string())
        .collect();
    RunManifest::new("backtest", seed, raw_config, outputs).write(out)?;
    println!(
        "backtested {} strategies over {} hold months -> {}",
        names.len(),
        schedule.len(),
        out.display()
    );
    Ok(())
}

/// Rebuilds the four yearly tables from an existing daily return series.
pub fn cmd_report(
    config: &Config,
    raw_config: toml::Value,
    daily: &Path,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let series = read_daily_returns(daily)?;
    if series.is_empty() {
        return Err(CliError::Data("daily series file has no strategies".into()));
    }
    let perfs: Vec<StrategyPerf> = series
        .into_iter()
        .map(|(name, daily)| {
            performance_report(
                &bayes_portfolio::backtest::StrategyRun {
                    name,
                    daily,
                    selections: vec![],
                },
                config.backtest.var_confidence,
            )
        })
        .collect();
    for p in &perfs {
        for year in &p.skipped_years {
            eprintln!("warning: {} has fewer than 20 observations in {year}; row omitted", p.name);
        }
    }
    ensure_out(out)?;
    write_perf_reports(out, &perfs)?;
    let outputs = ["returns.csv", "vol.csv", "var.csv", "riskadj.csv", "daily_returns.csv"]
        .iter()
        .map(|f| out.join(f).display().to_string())
        .collect();
    RunManifest::new("report", seed, raw_config, outputs).write(out)?;
    println!("reports written to {}", out.display());
    Ok(())
}

/// Output directory resolution shared by commands.
pub fn resolve_out(out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| PathBuf::from("out"))
}
