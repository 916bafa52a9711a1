//! CSV ingestion and report writers.
//!
//! Inputs: a long-format price file (`date,ticker,adj_close`), index level
//! files (`date,level`), and an optional risk-free rate file (`date,rate`).
//! Dates are ISO-8601, decimal point, no thousands separators. Outputs are
//! plain CSV with full-precision floats (Rust's shortest round-trip
//! formatting), so values survive a write/read cycle exactly.

use crate::backtest::{BacktestError, PricePanel, StrategyPerf};
use crate::hb::PosteriorDraws;
use crate::oracle::OracleTestResult;
use crate::sim::MetricRow;
use chrono::NaiveDate;
use nalgebra::DMatrix;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    /// Malformed input data, pointing at the offending line (1-based,
    /// counting the header).
    #[error("{path}:{line}: {detail}")]
    Data {
        path: String,
        line: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Panel(#[from] BacktestError),
}

fn data_err(path: &Path, line: usize, detail: impl Into<String>) -> IoError {
    IoError::Data {
        path: path.display().to_string(),
        line,
        detail: detail.into(),
    }
}

fn parse_date(path: &Path, line: usize, s: &str) -> Result<NaiveDate, IoError> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
        .map_err(|e| data_err(path, line, format!("bad date {s:?}: {e}")))
}

fn parse_num(path: &Path, line: usize, s: &str, what: &str) -> Result<f64, IoError> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| data_err(path, line, format!("bad {what} {s:?}: {e}")))
}

/// Long-format prices pivoted into a date × ticker matrix (NaN = missing).
#[derive(Debug, Clone)]
pub struct RawPrices {
    pub dates: Vec<NaiveDate>,
    pub tickers: Vec<String>,
    pub prices: DMatrix<f64>,
}

/// Reads `date,ticker,adj_close`, pivoting to wide form. Dates and
/// tickers come out sorted; duplicate cells are an error.
pub fn read_price_csv(path: &Path) -> Result<RawPrices, IoError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    {
        let headers = reader.headers()?;
        let expect = ["date", "ticker", "adj_close"];
        if headers.len() < 3 || !headers.iter().take(3).eq(expect) {
            return Err(data_err(
                path,
                1,
                format!("expected header date,ticker,adj_close, got {headers:?}"),
            ));
        }
    }
    let mut cells: BTreeMap<(NaiveDate, String), f64> = BTreeMap::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record?;
        if record.len() < 3 {
            return Err(data_err(path, line, "expected 3 fields"));
        }
        let date = parse_date(path, line, &record[0])?;
        let ticker = record[1].to_string();
        if ticker.is_empty() {
            return Err(data_err(path, line, "empty ticker"));
        }
        let price = parse_num(path, line, &record[2], "price")?;
        if !(price > 0.0) {
            return Err(data_err(path, line, format!("non-positive price {price}")));
        }
        if cells.insert((date, ticker.clone()), price).is_some() {
            return Err(data_err(
                path,
                line,
                format!("duplicate cell for {date} {ticker}"),
            ));
        }
    }
    if cells.is_empty() {
        return Err(data_err(path, 2, "no data rows"));
    }
    let mut dates: Vec<NaiveDate> = cells.keys().map(|(d, _)| *d).collect();
    dates.dedup();
    let mut tickers: Vec<String> = cells.keys().map(|(_, t)| t.clone()).collect();
    tickers.sort();
    tickers.dedup();
    let date_index: BTreeMap<NaiveDate, usize> =
        dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();
    let ticker_index: BTreeMap<&str, usize> = tickers
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i))
        .collect();
    let mut prices = DMatrix::from_element(dates.len(), tickers.len(), f64::NAN);
    for ((date, ticker), price) in &cells {
        prices[(date_index[date], ticker_index[ticker.as_str()])] = *price;
    }
    Ok(RawPrices {
        dates,
        tickers,
        prices,
    })
}

/// Reads a two-column `date,<value>` series (used for `level` and `rate`
/// files). The second header field must match `value_name`.
pub fn read_series_csv(path: &Path, value_name: &str) -> Result<Vec<(NaiveDate, f64)>, IoError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    {
        let headers = reader.headers()?;
        if headers.len() < 2 || &headers[0] != "date" || &headers[1] != value_name {
            return Err(data_err(
                path,
                1,
                format!("expected header date,{value_name}, got {headers:?}"),
            ));
        }
    }
    let mut out = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record?;
        if record.len() < 2 {
            return Err(data_err(path, line, "expected 2 fields"));
        }
        let date = parse_date(path, line, &record[0])?;
        let value = parse_num(path, line, &record[1], value_name)?;
        out.push((date, value));
    }
    if out.is_empty() {
        return Err(data_err(path, 2, "no data rows"));
    }
    out.sort_by_key(|(d, _)| *d);
    Ok(out)
}

/// Joins raw prices with benchmark/factor levels and an optional risk-free
/// rate into a [`PricePanel`]. The panel keeps the dates where prices and
/// every level series are all present; missing risk-free dates default
/// to zero.
pub fn assemble_price_panel(
    raw: RawPrices,
    benchmark: Vec<(NaiveDate, f64)>,
    factors: Vec<(String, Vec<(NaiveDate, f64)>)>,
    risk_free: Option<Vec<(NaiveDate, f64)>>,
) -> Result<PricePanel, IoError> {
    let bench_map: BTreeMap<NaiveDate, f64> = benchmark.into_iter().collect();
    let factor_maps: Vec<(String, BTreeMap<NaiveDate, f64>)> = factors
        .into_iter()
        .map(|(name, s)| (name, s.into_iter().collect()))
        .collect();
    let rf_map: BTreeMap<NaiveDate, f64> = risk_free.unwrap_or_default().into_iter().collect();

    let keep: Vec<usize> = (0..raw.dates.len())
        .filter(|&i| {
            let d = raw.dates[i];
            bench_map.contains_key(&d) && factor_maps.iter().all(|(_, m)| m.contains_key(&d))
        })
        .collect();
    if keep.is_empty() {
        return Err(IoError::Panel(BacktestError::InvalidPanel(
            "no dates shared by prices and level series".into(),
        )));
    }
    let dates: Vec<NaiveDate> = keep.iter().map(|&i| raw.dates[i]).collect();
    let mut prices = DMatrix::from_element(dates.len(), raw.tickers.len(), f64::NAN);
    for (row, &i) in keep.iter().enumerate() {
        for j in 0..raw.tickers.len() {
            prices[(row, j)] = raw.prices[(i, j)];
        }
    }
    let bench: Vec<f64> = dates.iter().map(|d| bench_map[d]).collect();
    let factor_series: Vec<(String, Vec<f64>)> = factor_maps
        .iter()
        .map(|(name, m)| (name.clone(), dates.iter().map(|d| m[d]).collect()))
        .collect();
    let rf: Vec<f64> = dates
        .iter()
        .map(|d| rf_map.get(d).copied().unwrap_or(0.0))
        .collect();
    Ok(PricePanel::new(
        dates,
        raw.tickers,
        prices,
        bench,
        factor_series,
        Some(rf),
    )?)
}

/// Writes the per-asset oracle test report: id, S, S̃, c², π̃, decision and
/// the eigenweights.
pub fn write_oracle_report(
    path: &Path,
    names: &[String],
    results: &[OracleTestResult],
) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    let dim = results.first().map_or(0, |r| r.lambdas.len());
    let mut header = vec![
        "asset".to_string(),
        "s".into(),
        "s_tilde".into(),
        "c2".into(),
        "pip".into(),
        "reject".into(),
    ];
    for j in 0..dim {
        header.push(format!("lambda{}", j + 1));
    }
    w.write_record(&header)?;
    for r in results {
        let mut rec = vec![
            names[r.asset].clone(),
            format!("{}", r.s),
            format!("{}", r.s_tilde),
            format!("{}", r.c2),
            format!("{}", r.pip),
            format!("{}", r.reject),
        ];
        for l in &r.lambdas {
            rec.push(format!("{l}"));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes tidy experiment metric rows.
pub fn write_metric_rows(path: &Path, rows: &[MetricRow]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "experiment",
        "method",
        "metric",
        "p",
        "n",
        "market_size",
        "sigma",
        "p_tilde",
        "value",
    ])?;
    for r in rows {
        w.write_record([
            r.experiment.to_string(),
            r.method.clone(),
            r.metric.clone(),
            format!("{}", r.p),
            r.n.to_string(),
            r.market_size.to_string(),
            format!("{}", r.sigma),
            r.p_tilde.map(|v| v.to_string()).unwrap_or_default(),
            format!("{}", r.value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Flat chain trace (iteration, parameter, value) for external convergence
/// tooling.
pub fn write_trace(path: &Path, draws: &PosteriorDraws) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "parameter", "value"])?;
    for (snap, state) in draws.states.iter().enumerate() {
        let iteration = snap * draws.stride;
        let mut put = |name: String, value: f64| -> Result<(), IoError> {
            w.write_record([iteration.to_string(), name, format!("{value}")])?;
            Ok(())
        };
        for (i, theta) in state.thetas.iter().enumerate() {
            for (j, v) in theta.iter().enumerate() {
                put(format!("theta[{i}][{j}]"), *v)?;
            }
        }
        for (i, s2) in state.sigma2s.iter().enumerate() {
            put(format!("sigma2[{i}]"), *s2)?;
        }
        for i in 0..state.lambda.nrows() {
            for j in 0..state.lambda.ncols() {
                put(format!("lambda[{i}][{j}]"), state.lambda[(i, j)])?;
            }
        }
        for (j, v) in state.theta0.iter().enumerate() {
            put(format!("theta0[{j}]"), *v)?;
        }
        put("tau2".into(), state.tau2)?;
    }
    w.flush()?;
    Ok(())
}

/// Whether a report metric is better when larger.
fn higher_is_better(metric: &str) -> bool {
    matches!(metric, "returns" | "riskadj")
}

fn year_table(
    path: &Path,
    metric: &str,
    perfs: &[StrategyPerf],
    pick: impl Fn(&crate::backtest::YearRow) -> Option<f64>,
) -> Result<(), IoError> {
    let mut years: Vec<i32> = perfs
        .iter()
        .flat_map(|p| p.years.iter().map(|y| y.year))
        .collect();
    years.sort_unstable();
    years.dedup();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["year".to_string()];
    header.extend(perfs.iter().map(|p| p.name.clone()));
    header.push("best".into());
    w.write_record(&header)?;
    for year in years {
        let mut rec = vec![year.to_string()];
        let mut best: Option<(f64, &str)> = None;
        for p in perfs {
            let value = p.years.iter().find(|y| y.year == year).and_then(&pick);
            match value {
                Some(v) => {
                    rec.push(format!("{v}"));
                    let better = match best {
                        None => true,
                        Some((bv, _)) => {
                            if higher_is_better(metric) {
                                v > bv
                            } else {
                                v < bv
                            }
                        }
                    };
                    if better {
                        best = Some((v, &p.name));
                    }
                }
                None => rec.push(String::new()),
            }
        }
        rec.push(best.map(|(_, n)| n.to_string()).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Emits the four yearly tables (`returns.csv`, `vol.csv`, `var.csv`,
/// `riskadj.csv`) with strategies as columns and a per-year best flag,
/// plus `daily_returns.csv` (date × strategy).
pub fn write_perf_reports(dir: &Path, perfs: &[StrategyPerf]) -> Result<(), IoError> {
    std::fs::create_dir_all(dir)?;
    year_table(&dir.join("returns.csv"), "returns", perfs, |y| {
        Some(y.annual_return)
    })?;
    year_table(&dir.join("vol.csv"), "vol", perfs, |y| Some(y.ann_vol))?;
    year_table(&dir.join("var.csv"), "var", perfs, |y| Some(y.var))?;
    year_table(&dir.join("riskadj.csv"), "riskadj", perfs, |y| y.risk_adjusted)?;

    let mut dates: Vec<NaiveDate> = perfs
        .iter()
        .flat_map(|p| p.daily.iter().map(|(d, _)| *d))
        .collect();
    dates.sort_unstable();
    dates.dedup();
    let maps: Vec<BTreeMap<NaiveDate, f64>> = perfs
        .iter()
        .map(|p| p.daily.iter().copied().collect())
        .collect();
    let mut w = csv::Writer::from_path(dir.join("daily_returns.csv"))?;
    let mut header = vec!["date".to_string()];
    header.extend(perfs.iter().map(|p| p.name.clone()));
    w.write_record(&header)?;
    for d in dates {
        let mut rec = vec![d.format("%Y-%m-%d").to_string()];
        for m in &maps {
            rec.push(m.get(&d).map(|v| format!("{v}")).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `daily_returns.csv` back into per-strategy series (for the
/// standalone report command).
pub fn read_daily_returns(
    path: &Path,
) -> Result<Vec<(String, Vec<(NaiveDate, f64)>)>, IoError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let names: Vec<String> = {
        let headers = reader.headers()?;
        if headers.is_empty() || &headers[0] != "date" {
            return Err(data_err(path, 1, "expected date as first column"));
        }
        headers.iter().skip(1).map(|s| s.to_string()).collect()
    };
    let mut series: Vec<Vec<(NaiveDate, f64)>> = vec![Vec::new(); names.len()];
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record?;
        let date = parse_date(path, line, &record[0])?;
        for (j, field) in record.iter().skip(1).enumerate() {
            if field.is_empty() {
                continue;
            }
            let v = parse_num(path, line, field, "return")?;
            series[j].push((date, v));
        }
    }
    Ok(names.into_iter().zip(series).collect())
}

/// Writes a writer-agnostic ABOS diagnostic table.
pub fn write_abos_table(
    path: &Path,
    rows: &[crate::oracle::AbosDiagnosticRow],
) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "v", "sqrt_prod_complement", "scaled_threshold", "c2", "t1", "t2"])?;
    for (i, r) in rows.iter().enumerate() {
        w.write_record([
            i.to_string(),
            format!("{}", r.v),
            format!("{}", r.sqrt_prod_complement),
            format!("{}", r.scaled_threshold),
            format!("{}", r.c2),
            format!("{}", r.t1),
            format!("{}", r.t2),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Convenience for tests and the CLI: write any string to a file.
pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
