//! Price-panel ingestion and sample statistics.
//!
//! A price panel is an `n × (T+1)` matrix of strictly positive weekly price
//! levels. Simple rates of return turn it into an `n × T` matrix of
//! equiprobable scenarios, from which means, the population covariance, the
//! volatilities and the correlation matrix are estimated.

use std::fmt;
use std::path::Path;

use chrono::NaiveDate;
use ndarray::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MarketDataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv parse error: {0}")]
    Csv(#[from] csv::Error),
    #[error("first header cell must be \"date\", found {0:?}")]
    BadHeader(String),
    #[error("file has no asset columns")]
    NoAssets,
    #[error("row {row}: expected {expected} cells, found {found}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("missing value at ({asset}, {date})")]
    MissingValue { asset: String, date: String },
    #[error("non-numeric cell at ({asset}, {date}): {cell:?}")]
    NonNumeric {
        asset: String,
        date: String,
        cell: String,
    },
    #[error("non-positive price at ({asset}, {date}): {value}")]
    NonPositivePrice {
        asset: String,
        date: String,
        value: f64,
    },
    #[error("dates must be strictly increasing ({prev:?} !< {next:?})")]
    NonIncreasingDates { prev: String, next: String },
    #[error("date {0:?} is neither an integer ordinal nor an ISO-8601 date")]
    UnparsableDate(String),
    #[error("need at least 2 price dates to form returns, found {0}")]
    TooFewDates(usize),
    #[error("need at least 2 scenarios to estimate moments, found {0}")]
    TooFewScenarios(usize),
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
}

/// Weekly price levels for `n` assets over `T+1` dates.
#[derive(Debug, Clone)]
pub struct PriceSeries {
    asset_names: Vec<String>,
    dates: Vec<String>,
    /// `n × (T+1)`, assets by time.
    prices: Array2<f64>,
}

impl PriceSeries {
    /// Builds a validated series: positive prices, strictly increasing dates,
    /// consistent dimensions.
    pub fn new(
        asset_names: Vec<String>,
        dates: Vec<String>,
        prices: Array2<f64>,
    ) -> Result<Self, MarketDataError> {
        if prices.nrows() != asset_names.len() || prices.ncols() != dates.len() {
            return Err(MarketDataError::Dimensions(format!(
                "prices are {}×{} but there are {} assets and {} dates",
                prices.nrows(),
                prices.ncols(),
                asset_names.len(),
                dates.len()
            )));
        }
        validate_date_order(&dates)?;
        for (j, name) in asset_names.iter().enumerate() {
            for (t, date) in dates.iter().enumerate() {
                let v = prices[[j, t]];
                if v.is_nan() {
                    return Err(MarketDataError::MissingValue {
                        asset: name.clone(),
                        date: date.clone(),
                    });
                }
                if !(v > 0.0) {
                    return Err(MarketDataError::NonPositivePrice {
                        asset: name.clone(),
                        date: date.clone(),
                        value: v,
                    });
                }
            }
        }
        Ok(Self {
            asset_names,
            dates,
            prices,
        })
    }

    pub fn asset_names(&self) -> &[String] {
        &self.asset_names
    }

    pub fn dates(&self) -> &[String] {
        &self.dates
    }

    pub fn prices(&self) -> ArrayView2<'_, f64> {
        self.prices.view()
    }

    pub fn num_assets(&self) -> usize {
        self.asset_names.len()
    }

    pub fn num_dates(&self) -> usize {
        self.dates.len()
    }
}

/// `n × T` simple rates of return, each scenario equiprobable.
#[derive(Debug, Clone)]
pub struct ReturnScenarioMatrix {
    returns: Array2<f64>,
}

impl ReturnScenarioMatrix {
    /// Wraps a raw return matrix. Every entry must exceed −1 (prices are
    /// positive) and be finite.
    pub fn new(returns: Array2<f64>) -> Result<Self, MarketDataError> {
        for &v in returns.iter() {
            if !v.is_finite() || v <= -1.0 {
                return Err(MarketDataError::Dimensions(format!(
                    "invalid return {v}: returns must be finite and > -1"
                )));
            }
        }
        Ok(Self { returns })
    }

    pub fn returns(&self) -> ArrayView2<'_, f64> {
        self.returns.view()
    }

    pub fn num_assets(&self) -> usize {
        self.returns.nrows()
    }

    pub fn num_scenarios(&self) -> usize {
        self.returns.ncols()
    }

    /// `p_t = 1/T`.
    pub fn scenario_probability(&self) -> f64 {
        1.0 / self.returns.ncols() as f64
    }

    /// Sub-matrix restricted to a contiguous scenario range.
    pub fn slice_scenarios(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            returns: self.returns.slice(s![.., range]).to_owned(),
        }
    }

    /// Portfolio return per scenario, `y_t(x) = Σ_j r_jt x_j`.
    pub fn portfolio_returns(&self, weights: &[f64]) -> Vec<f64> {
        let x = ArrayView1::from(weights);
        self.returns.t().dot(&x).to_vec()
    }
}

impl fmt::Display for ReturnScenarioMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} assets × {} scenarios",
            self.num_assets(),
            self.num_scenarios()
        )
    }
}

/// Sample moments of a scenario matrix.
#[derive(Debug, Clone)]
pub struct AssetStats {
    pub mu: Array1<f64>,
    /// Population covariance (1/T normalization).
    pub cov: Array2<f64>,
    /// `σ_j = +sqrt(σ_jj)`.
    pub vol: Array1<f64>,
    /// Correlation; off-diagonal entries are 0 where either volatility
    /// vanishes, the diagonal is identically 1.
    pub corr: Array2<f64>,
}

/// Reads a price CSV: header `date,ASSET1,ASSET2,...`, one row per date,
/// strictly positive decimal prices, no missing cells.
pub fn load_prices(path: &Path) -> Result<PriceSeries, MarketDataError> {
    let file = std::fs::File::open(path).map_err(|source| MarketDataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(file);

    let headers = reader.headers()?.clone();
    let mut header_iter = headers.iter();
    let first = header_iter.next().unwrap_or("").trim_start_matches('\u{feff}');
    if !first.eq_ignore_ascii_case("date") {
        return Err(MarketDataError::BadHeader(first.to_string()));
    }
    let asset_names: Vec<String> = header_iter.map(|s| s.to_string()).collect();
    if asset_names.is_empty() {
        return Err(MarketDataError::NoAssets);
    }

    let mut dates = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != asset_names.len() + 1 {
            return Err(MarketDataError::RaggedRow {
                row: i + 2,
                expected: asset_names.len() + 1,
                found: record.len(),
            });
        }
        let date = record[0].to_string();
        let mut row = Vec::with_capacity(asset_names.len());
        for (j, cell) in record.iter().skip(1).enumerate() {
            if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                return Err(MarketDataError::MissingValue {
                    asset: asset_names[j].clone(),
                    date: date.clone(),
                });
            }
            let value: f64 = cell.parse().map_err(|_| MarketDataError::NonNumeric {
                asset: asset_names[j].clone(),
                date: date.clone(),
                cell: cell.to_string(),
            })?;
            if value.is_nan() {
                return Err(MarketDataError::MissingValue {
                    asset: asset_names[j].clone(),
                    date: date.clone(),
                });
            }
            if value <= 0.0 {
                return Err(MarketDataError::NonPositivePrice {
                    asset: asset_names[j].clone(),
                    date: date.clone(),
                    value,
                });
            }
            row.push(value);
        }
        dates.push(date);
        rows.push(row);
    }

    if dates.len() < 2 {
        return Err(MarketDataError::TooFewDates(dates.len()));
    }

    // Rows arrive dates-by-assets; store assets-by-time.
    let n = asset_names.len();
    let t1 = dates.len();
    let mut prices = Array2::zeros((n, t1));
    for (t, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            prices[[j, t]] = v;
        }
    }
    PriceSeries::new(asset_names, dates, prices)
}

/// Date labels must be uniformly integer ordinals or ISO-8601 dates, strictly
/// increasing either way.
fn validate_date_order(dates: &[String]) -> Result<(), MarketDataError> {
    enum Key {
        Ordinal(i64),
        Day(NaiveDate),
    }
    let parse = |s: &String| -> Result<Key, MarketDataError> {
        if let Ok(v) = s.trim().parse::<i64>() {
            return Ok(Key::Ordinal(v));
        }
        if let Ok(d) = NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d") {
            return Ok(Key::Day(d));
        }
        Err(MarketDataError::UnparsableDate(s.clone()))
    };
    let mut prev: Option<(Key, &String)> = None;
    for s in dates {
        let key = parse(s)?;
        if let Some((prev_key, prev_label)) = &prev {
            let increasing = match (prev_key, &key) {
                (Key::Ordinal(a), Key::Ordinal(b)) => a < b,
                (Key::Day(a), Key::Day(b)) => a < b,
                // Mixing label kinds has no defined order.
                _ => false,
            };
            if !increasing {
                return Err(MarketDataError::NonIncreasingDates {
                    prev: (*prev_label).clone(),
                    next: s.clone(),
                });
            }
        }
        prev = Some((key, s));
    }
    Ok(())
}

/// Simple rates `r_jt = (P_jt − P_j,t−1)/P_j,t−1`.
pub fn compute_returns(p: &PriceSeries) -> Result<ReturnScenarioMatrix, MarketDataError> {
    let t1 = p.num_dates();
    if t1 < 2 {
        return Err(MarketDataError::TooFewDates(t1));
    }
    let n = p.num_assets();
    let mut returns = Array2::zeros((n, t1 - 1));
    let prices = p.prices();
    for j in 0..n {
        for t in 1..t1 {
            returns[[j, t - 1]] = (prices[[j, t]] - prices[[j, t - 1]]) / prices[[j, t - 1]];
        }
    }
    ReturnScenarioMatrix::new(returns)
}

/// Means, population covariance, volatilities and correlation.
pub fn compute_stats(r: &ReturnScenarioMatrix) -> Result<AssetStats, MarketDataError> {
    let t = r.num_scenarios();
    if t < 2 {
        return Err(MarketDataError::TooFewScenarios(t));
    }
    let n = r.num_assets();
    let returns = r.returns();
    let p = 1.0 / t as f64;

    let mu: Array1<f64> = returns.mean_axis(Axis(1)).expect("t >= 2");
    let mut centered = returns.to_owned();
    for j in 0..n {
        for tt in 0..t {
            centered[[j, tt]] -= mu[j];
        }
    }
    let mut cov = centered.dot(&centered.t());
    cov.mapv_inplace(|v| v * p);
    // Exact symmetry; the Gram matrix may carry rounding asymmetry.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (cov[[i, j]] + cov[[j, i]]);
            cov[[i, j]] = avg;
            cov[[j, i]] = avg;
        }
    }

    let vol = cov.diag().mapv(|v| v.max(0.0).sqrt());
    let mut corr = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                corr[[i, j]] = 1.0;
            } else {
                let denom = vol[i] * vol[j];
                corr[[i, j]] = if denom > 0.0 { cov[[i, j]] / denom } else { 0.0 };
            }
        }
    }
    Ok(AssetStats { mu, cov, vol, corr })
}

/// Mean over scenarios of the equally-weighted portfolio return.
pub fn market_portfolio_return(r: &ReturnScenarioMatrix) -> f64 {
    let n = r.num_assets() as f64;
    let t = r.num_scenarios() as f64;
    r.returns().sum() / (n * t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::io::Write;

    fn series(prices: Array2<f64>) -> PriceSeries {
        let n = prices.nrows();
        let t1 = prices.ncols();
        let names = (0..n).map(|j| format!("A{j}")).collect();
        let dates = (1..=t1).map(|t| t.to_string()).collect();
        PriceSeries::new(names, dates, prices).unwrap()
    }

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn load_prices_small_panel() {
        let f = write_csv("date,AA,BB\n2020-01-06,10.0,20.0\n2020-01-13,11.0,19.0\n");
        let p = load_prices(f.path()).unwrap();
        assert_eq!(p.num_assets(), 2);
        assert_eq!(p.num_dates(), 2);
        assert_eq!(p.asset_names(), &["AA".to_string(), "BB".to_string()]);
        assert_eq!(p.prices()[[1, 0]], 20.0);
    }

    #[test]
    fn load_prices_rejects_nan_cell() {
        let f = write_csv("date,AA\n1,10.0\n2,NaN\n");
        let err = load_prices(f.path()).unwrap_err();
        assert!(matches!(err, MarketDataError::MissingValue { .. }), "{err}");
        let msg = err.to_string();
        assert!(msg.contains("AA") && msg.contains('2'), "{msg}");
    }

    #[test]
    fn load_prices_rejects_zero_price() {
        let f = write_csv("date,AA\n1,10.0\n2,0.0\n");
        let err = load_prices(f.path()).unwrap_err();
        assert!(matches!(err, MarketDataError::NonPositivePrice { .. }), "{err}");
    }

    #[test]
    fn load_prices_rejects_non_numeric_and_missing_file() {
        let f = write_csv("date,AA\n1,10.0\n2,abc\n");
        assert!(matches!(
            load_prices(f.path()).unwrap_err(),
            MarketDataError::NonNumeric { .. }
        ));
        assert!(matches!(
            load_prices(Path::new("/nonexistent/prices.csv")).unwrap_err(),
            MarketDataError::Io { .. }
        ));
    }

    #[test]
    fn load_prices_rejects_duplicate_or_decreasing_dates() {
        let f = write_csv("date,AA\n2,10.0\n2,11.0\n");
        assert!(matches!(
            load_prices(f.path()).unwrap_err(),
            MarketDataError::NonIncreasingDates { .. }
        ));
        let f = write_csv("date,AA\n2020-02-01,10.0\n2020-01-01,11.0\n");
        assert!(matches!(
            load_prices(f.path()).unwrap_err(),
            MarketDataError::NonIncreasingDates { .. }
        ));
    }

    #[test]
    fn returns_from_simple_path() {
        let p = series(array![[100.0, 110.0, 99.0]]);
        let r = compute_returns(&p).unwrap();
        assert_abs_diff_eq!(r.returns()[[0, 0]], 0.10, epsilon = 1e-15);
        assert_abs_diff_eq!(r.returns()[[0, 1]], -0.10, epsilon = 1e-15);
        assert_abs_diff_eq!(r.scenario_probability() * 2.0, 1.0, epsilon = 0.0);
    }

    #[test]
    fn returns_of_constant_prices_are_zero() {
        let p = series(array![[5.0, 5.0, 5.0]]);
        let r = compute_returns(&p).unwrap();
        assert_eq!(r.returns(), array![[0.0, 0.0]]);
    }

    #[test]
    fn returns_doubling_then_halving() {
        let p = series(array![[1.0, 2.0, 1.0]]);
        let r = compute_returns(&p).unwrap();
        assert_eq!(r.returns(), array![[1.0, -0.5]]);
    }

    #[test]
    fn returns_require_two_dates() {
        let names = vec!["A".to_string()];
        let dates = vec!["1".to_string()];
        let p = PriceSeries::new(names, dates, array![[1.0]]).unwrap();
        assert!(matches!(
            compute_returns(&p).unwrap_err(),
            MarketDataError::TooFewDates(1)
        ));
    }

    #[test]
    fn stats_population_variance() {
        let r = ReturnScenarioMatrix::new(array![[1.0, 2.0, 3.0]]).unwrap();
        let s = compute_stats(&r).unwrap();
        assert_abs_diff_eq!(s.mu[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.cov[[0, 0]], 2.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn stats_identical_rows_perfectly_correlated() {
        let r = ReturnScenarioMatrix::new(array![[0.1, -0.2, 0.3], [0.1, -0.2, 0.3]]).unwrap();
        let s = compute_stats(&r).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(s.corr[[i, j]], 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn stats_antisymmetric_rows() {
        let r = ReturnScenarioMatrix::new(array![[0.5, -0.5], [-0.5, 0.5]]).unwrap();
        let s = compute_stats(&r).unwrap();
        assert_abs_diff_eq!(s.cov[[0, 0]], 0.25, epsilon = 1e-14);
        assert_abs_diff_eq!(s.cov[[0, 1]], -0.25, epsilon = 1e-14);
        assert_abs_diff_eq!(s.corr[[0, 1]], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn stats_zero_vol_asset_gets_zero_corr() {
        let r = ReturnScenarioMatrix::new(array![[0.0, 0.0, 0.0], [0.1, 0.2, 0.3]]).unwrap();
        let s = compute_stats(&r).unwrap();
        assert_eq!(s.corr[[0, 1]], 0.0);
        assert_eq!(s.corr[[1, 0]], 0.0);
        assert_eq!(s.corr[[0, 0]], 1.0);
    }

    #[test]
    fn stats_reject_single_scenario() {
        let r = ReturnScenarioMatrix::new(array![[0.1]]).unwrap();
        assert!(matches!(
            compute_stats(&r).unwrap_err(),
            MarketDataError::TooFewScenarios(1)
        ));
    }

    #[test]
    fn market_return_examples() {
        let r = ReturnScenarioMatrix::new(array![[0.1, 0.3], [0.3, 0.1]]).unwrap();
        assert_abs_diff_eq!(market_portfolio_return(&r), 0.2, epsilon = 1e-15);

        let single = ReturnScenarioMatrix::new(array![[0.1, 0.3, -0.1]]).unwrap();
        let s = compute_stats(&single).unwrap();
        assert_abs_diff_eq!(market_portfolio_return(&single), s.mu[0], epsilon = 1e-15);

        let zero = ReturnScenarioMatrix::new(Array2::zeros((3, 4))).unwrap();
        assert_eq!(market_portfolio_return(&zero), 0.0);
    }

    #[test]
    fn cov_reconstructs_from_vol_and_corr() {
        let r = ReturnScenarioMatrix::new(array![
            [0.02, -0.01, 0.03, 0.00, -0.02],
            [0.01, 0.02, -0.03, 0.01, 0.00],
            [-0.01, 0.00, 0.02, -0.02, 0.03]
        ])
        .unwrap();
        let s = compute_stats(&r).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if s.vol[i] > 0.0 && s.vol[j] > 0.0 {
                    let rebuilt = s.vol[i] * s.vol[j] * s.corr[[i, j]];
                    let denom = s.cov[[i, j]].abs().max(1e-300);
                    assert!(
                        ((rebuilt - s.cov[[i, j]]) / denom).abs() < 1e-10,
                        "cov mismatch at ({i},{j})"
                    );
                }
            }
        }
    }
}
