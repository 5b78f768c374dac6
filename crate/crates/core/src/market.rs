//! Monthly return data: loading, factor-model estimation and rolling backtests.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{build_grids, FactorCounts};
use crate::linalg;
use crate::mean_variance::{discount_factors, mu_star, mv_solve};
use crate::model::LqModel;
use crate::policy::{mean_sd, rollout, ControlRule, Nature, RealizedPath, RolloutOptions, DEFAULT_INNER_SAMPLES};
use crate::sampler::{standard_normals, SeedSpec};
use crate::solver::{InnerMode, OptimizerOptions, SolveOptions};

/// Per-entry sanity bound on decimal returns.
const RETURN_BOUND: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ReturnSeries {
    /// Month identifiers `YYYYMM`, consecutive.
    pub dates: Vec<u32>,
    pub factor_names: Vec<String>,
    pub asset_names: Vec<String>,
    /// `T_obs×k` decimal factor returns.
    pub factors: DMatrix<f64>,
    /// `T_obs×n` decimal excess asset returns.
    pub assets: DMatrix<f64>,
    pub riskfree: Vec<f64>,
    /// Rows present in only one of the input files.
    pub dropped_rows: usize,
}

pub fn next_month(date: u32) -> u32 {
    let (y, m) = (date / 100, date % 100);
    if m == 12 {
        (y + 1) * 100 + 1
    } else {
        date + 1
    }
}

fn check_date(date: u32) -> bool {
    (1..=12).contains(&(date % 100)) && date >= 100_000
}

impl ReturnSeries {
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn n_factors(&self) -> usize {
        self.factors.ncols()
    }

    pub fn n_assets(&self) -> usize {
        self.assets.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let rows = self.dates.len();
        if rows == 0 {
            return Err(Error::Data("no data rows".into()));
        }
        if self.factors.nrows() != rows || self.assets.nrows() != rows || self.riskfree.len() != rows {
            return Err(Error::Data("factor, asset and risk-free rows differ in count".into()));
        }
        if self.factor_names.len() != self.factors.ncols() || self.asset_names.len() != self.assets.ncols() {
            return Err(Error::Data("column names do not match the data".into()));
        }
        for (i, &d) in self.dates.iter().enumerate() {
            if !check_date(d) {
                return Err(Error::Data(format!("row {i}: {d} is not a YYYYMM month")));
            }
            if i > 0 && d != next_month(self.dates[i - 1]) {
                return Err(Error::Data(format!(
                    "months are not consecutive: {} is followed by {d}",
                    self.dates[i - 1]
                )));
            }
        }
        let check = |m: &DMatrix<f64>, what: &str| -> Result<()> {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    let v = m[(i, j)];
                    if !v.is_finite() || v.abs() >= RETURN_BOUND {
                        return Err(Error::Data(format!(
                            "{what} return {v} at {} column {j} fails the |r| < 1 sanity bound",
                            self.dates[i]
                        )));
                    }
                }
            }
            Ok(())
        };
        check(&self.factors, "factor")?;
        check(&self.assets, "asset")?;
        check(&DMatrix::from_column_slice(rows, 1, &self.riskfree), "risk-free")?;
        Ok(())
    }

    /// Row index of `date`.
    pub fn index_of(&self, date: u32) -> Result<usize> {
        self.dates
            .binary_search(&date)
            .map_err(|_| Error::Data(format!("month {date} is not in the series")))
    }

    /// Writes the factor and asset files in the percent layout read by [`load_returns`].
    pub fn write_csv(&self, factor_path: &Path, asset_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(factor_path)?;
        let mut header = vec!["date".to_string()];
        header.extend(self.factor_names.iter().cloned());
        header.push("RF".into());
        w.write_record(&header)?;
        for (i, d) in self.dates.iter().enumerate() {
            let mut row = vec![d.to_string()];
            row.extend(self.factors.row(i).iter().map(|v| percent(*v)));
            row.push(percent(self.riskfree[i]));
            w.write_record(&row)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(asset_path)?;
        let mut header = vec!["date".to_string()];
        header.extend(self.asset_names.iter().cloned());
        w.write_record(&header)?;
        for (i, d) in self.dates.iter().enumerate() {
            let mut row = vec![d.to_string()];
            // Files hold raw returns; excess returns are rebuilt on load.
            row.extend(self.assets.row(i).iter().map(|v| percent(*v + self.riskfree[i])));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn percent(v: f64) -> String {
    format!("{:.10}", v * 100.0)
}

struct Table {
    header: Vec<String>,
    rows: BTreeMap<u32, Vec<f64>>,
}

fn read_table(path: &Path) -> Result<Table> {
    let name = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{name}: {e}")))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Data(format!("{name}: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 2 {
        return Err(Error::Data(format!("{name}: expected a date column and at least one data column")));
    }
    let mut rows = BTreeMap::new();
    for (r, rec) in rdr.records().enumerate() {
        let line = r + 2;
        let rec = rec.map_err(|e| Error::Data(format!("{name}: line {line}: {e}")))?;
        let date: u32 = rec[0]
            .parse()
            .ok()
            .filter(|d| check_date(*d))
            .ok_or_else(|| Error::Data(format!("{name}: line {line}, column 1: '{}' is not a YYYYMM month", &rec[0])))?;
        let values = rec
            .iter()
            .enumerate()
            .skip(1)
            .map(|(c, cell)| {
                cell.parse::<f64>().ok().filter(|v| v.is_finite()).map(|v| v / 100.0).ok_or_else(|| {
                    Error::Data(format!("{name}: line {line}, column {} ({}): '{cell}' is not numeric", c + 1, header[c]))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if rows.insert(date, values).is_some() {
            return Err(Error::Data(format!("{name}: line {line}: duplicate month {date}")));
        }
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{name}: no data rows")));
    }
    Ok(Table { header, rows })
}

/// Reads a factor file (`date, MKT|Mkt-RF, SMB, HML, …, RF`) and an asset
/// file (`date, asset…`), both in percent, aligned on common months.
///
/// Factor columns are every column but the date and `RF`; asset returns are
/// converted to excess returns over `RF`.
pub fn load_returns(factor_file: &Path, asset_file: &Path) -> Result<ReturnSeries> {
    let ft = read_table(factor_file)?;
    let at = read_table(asset_file)?;
    let rf_col = ft.header[1..]
        .iter()
        .position(|h| h.eq_ignore_ascii_case("RF"))
        .ok_or_else(|| Error::Data(format!("{}: missing RF column", factor_file.display())))?;
    let factor_cols: Vec<usize> = (0..ft.header.len() - 1).filter(|&c| c != rf_col).collect();
    if factor_cols.is_empty() {
        return Err(Error::Data(format!("{}: no factor columns", factor_file.display())));
    }
    let has_market = ft.header[1..]
        .iter()
        .any(|h| h.eq_ignore_ascii_case("MKT") || h.eq_ignore_ascii_case("Mkt-RF"));
    if !has_market {
        return Err(Error::Data(format!("{}: missing MKT (or Mkt-RF) column", factor_file.display())));
    }
    let dates: Vec<u32> = ft.rows.keys().filter(|d| at.rows.contains_key(d)).copied().collect();
    if dates.is_empty() {
        return Err(Error::Data("factor and asset files share no months".into()));
    }
    let dropped = ft.rows.len() + at.rows.len() - 2 * dates.len();
    if dropped > 0 {
        log::warn!("dropped {dropped} rows present in only one file");
    }
    let (k, n) = (factor_cols.len(), at.header.len() - 1);
    let mut factors = DMatrix::zeros(dates.len(), k);
    let mut assets = DMatrix::zeros(dates.len(), n);
    let mut riskfree = Vec::with_capacity(dates.len());
    for (i, d) in dates.iter().enumerate() {
        let f = &ft.rows[d];
        let rf = f[rf_col];
        for (j, &c) in factor_cols.iter().enumerate() {
            factors[(i, j)] = f[c];
        }
        for (j, v) in at.rows[d].iter().enumerate() {
            assets[(i, j)] = v - rf;
        }
        riskfree.push(rf);
    }
    let series = ReturnSeries {
        dates,
        factor_names: factor_cols.iter().map(|&c| ft.header[c + 1].clone()).collect(),
        asset_names: at.header[1..].to_vec(),
        factors,
        assets,
        riskfree,
        dropped_rows: dropped,
    };
    series.validate()?;
    Ok(series)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatedParams {
    pub c: Vec<f64>,
    pub d: Vec<Vec<f64>>,
    pub asset_noise_cov: Vec<Vec<f64>>,
    pub mean_reversion: Vec<Vec<f64>>,
    pub factor_noise_cov: Vec<Vec<f64>>,
    pub start: u32,
    pub end: u32,
    pub n_obs: usize,
    pub r_squared: Vec<f64>,
    /// Standard errors of `[c | D]`, one row per asset.
    pub coef_std_err: Vec<Vec<f64>>,
    pub asset_residual_df: usize,
    pub factor_residual_df: usize,
    /// Spectral radius of `I − Φ` is at least one.
    pub nonstationary: bool,
}

/// Least squares `Y ≈ X B` with a rank check on `X`.
fn least_squares(x: &DMatrix<f64>, y: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * x.nrows().max(x.ncols()) as f64;
    if !(smax > 0.0) || svd.singular_values.iter().any(|&s| s <= tol) {
        return Err(Error::Numerical(format!("{what}: regressors are rank deficient")));
    }
    let b = svd
        .solve(y, tol)
        .map_err(|e| Error::Numerical(format!("{what}: {e}")))?;
    // (XᵀX)⁻¹ = V Σ⁻² Vᵀ
    let v_t = svd.v_t.as_ref().unwrap();
    let inv_s2 = DMatrix::from_diagonal(&svd.singular_values.map(|s| 1.0 / (s * s)));
    let xtx_inv = v_t.transpose() * inv_s2 * v_t;
    Ok((b, xtx_inv))
}

fn residual_cov(resid: &DMatrix<f64>, df: usize) -> DMatrix<f64> {
    linalg::symmetrize(&((resid.transpose() * resid) / df as f64))
}

/// Fits `b_t = c + D f_t + ε_t` by per-asset OLS and `f_{t+1} = G f_t + η`
/// without intercept, `Φ = I − G`, over the inclusive month window.
pub fn estimate(series: &ReturnSeries, window: (u32, u32)) -> Result<EstimatedParams> {
    let (lo, hi) = (series.index_of(window.0)?, series.index_of(window.1)?);
    if hi < lo {
        return Err(Error::Domain(format!("window end {} precedes its start {}", window.1, window.0)));
    }
    estimate_rows(series, lo, hi + 1)
}

/// [`estimate`] over rows `lo..hi`.
pub fn estimate_rows(series: &ReturnSeries, lo: usize, hi: usize) -> Result<EstimatedParams> {
    let (k, n) = (series.n_factors(), series.n_assets());
    if hi > series.len() || lo >= hi {
        return Err(Error::Domain(format!("row window {lo}..{hi} is outside the series")));
    }
    let rows = hi - lo;
    if rows < k + 2 {
        return Err(Error::Domain(format!("window of {rows} rows is shorter than k + 2 = {}", k + 2)));
    }
    let f = series.factors.rows(lo, rows).into_owned();
    let b = series.assets.rows(lo, rows).into_owned();

    let x = DMatrix::from_fn(rows, k + 1, |i, j| if j == 0 { 1.0 } else { f[(i, j - 1)] });
    let (coef, xtx_inv) = least_squares(&x, &b, "asset regression")?;
    let resid = &b - &x * &coef;
    let asset_df = rows - k - 1;
    let sigma_eps = residual_cov(&resid, asset_df);
    let r_squared = (0..n)
        .map(|i| {
            let col = b.column(i);
            let mean = col.mean();
            let tss: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
            let rss: f64 = resid.column(i).norm_squared();
            if tss > 0.0 {
                1.0 - rss / tss
            } else {
                0.0
            }
        })
        .collect();
    let coef_std_err = (0..n)
        .map(|i| (0..=k).map(|j| (sigma_eps[(i, i)] * xtx_inv[(j, j)]).sqrt()).collect())
        .collect();

    let lagged = f.rows(0, rows - 1).into_owned();
    let next = f.rows(1, rows - 1).into_owned();
    let (g_t, _) = least_squares(&lagged, &next, "factor regression")?;
    let resid_f = &next - &lagged * &g_t;
    let factor_df = rows - 1 - k;
    let sigma_eta = residual_cov(&resid_f, factor_df);
    let g = g_t.transpose();
    let phi = DMatrix::identity(k, k) - &g;
    let nonstationary = linalg::spectral_radius(&g) >= 1.0;
    if nonstationary {
        log::warn!("estimated I − Φ has spectral radius ≥ 1 over rows {lo}..{hi}");
    }
    let c = coef.row(0).iter().copied().collect();
    let d = (0..n).map(|i| (0..k).map(|j| coef[(j + 1, i)]).collect()).collect();
    Ok(EstimatedParams {
        c,
        d,
        asset_noise_cov: linalg::matrix_to_rows(&sigma_eps),
        mean_reversion: linalg::matrix_to_rows(&phi),
        factor_noise_cov: linalg::matrix_to_rows(&sigma_eta),
        start: series.dates[lo],
        end: series.dates[hi - 1],
        n_obs: rows,
        r_squared,
        coef_std_err,
        asset_residual_df: asset_df,
        factor_residual_df: factor_df,
        nonstationary,
    })
}

impl EstimatedParams {
    /// Mean-variance model over `horizon` periods with constant risk-free
    /// multiplier and efficiencies `theta`.
    pub fn to_model(&self, horizon: usize, riskfree: f64, theta: &[f64], diagonal_factor_noise: bool) -> Result<LqModel> {
        let n = self.c.len();
        let k = self.mean_reversion.len();
        let mut sigma_eta = linalg::rows_to_matrix(&self.factor_noise_cov, "factor_noise_cov")?;
        if diagonal_factor_noise {
            sigma_eta = DMatrix::from_diagonal(&sigma_eta.diagonal());
        }
        let theta = match theta.len() {
            1 => vec![theta[0]; k],
            len if len == k => theta.to_vec(),
            len => return Err(Error::Dimension(format!("{len} efficiencies for {k} factors"))),
        };
        LqModel::stationary(
            horizon,
            riskfree,
            DMatrix::zeros(n, n),
            DVector::zeros(n),
            0.0,
            1.0,
            linalg::dvec(&self.c),
            linalg::rows_to_matrix(&self.d, "D")?,
            linalg::rows_to_matrix(&self.mean_reversion, "mean_reversion")?,
            sigma_eta,
            linalg::rows_to_matrix(&self.asset_noise_cov, "asset_noise_cov")?,
            linalg::dvec(&theta),
        )
    }
}

/// `(mean − ρ₀x₀)/std`.
pub fn sharpe(mean: f64, std: f64, rho0: f64, x0: f64) -> Result<f64> {
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::Domain("Sharpe ratio is undefined for zero dispersion".into()));
    }
    Ok((mean - rho0 * x0) / std)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    pub horizon: usize,
    /// Trailing estimation window in months.
    pub window_len: usize,
    pub budget0: f64,
    /// One efficiency for all factors, or one per factor.
    pub theta: Vec<f64>,
    pub budget_nodes: usize,
    pub factor_nodes: FactorCounts,
    pub samples: usize,
    pub seed: u64,
    /// Monthly risk-free multiplier `a`.
    pub riskfree: f64,
    /// Target `d = ρ₀x₀(1 + δ)`.
    pub target_delta: f64,
    pub inner_samples: usize,
    pub inner: InnerMode,
    pub optimizer: OptimizerOptions,
    /// Drop off-diagonal entries of the estimated `Σ_η`.
    pub diagonal_factor_noise: bool,
    /// First and last episode start months; defaults to every start available.
    pub first_start: Option<u32>,
    pub last_start: Option<u32>,
    pub max_episodes: Option<usize>,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            horizon: 3,
            window_len: 120,
            budget0: 3.0,
            theta: vec![0.69],
            budget_nodes: 13,
            factor_nodes: FactorCounts::Uniform(7),
            samples: 2000,
            seed: 0,
            riskfree: 1.0036,
            target_delta: 0.05,
            inner_samples: DEFAULT_INNER_SAMPLES,
            inner: InnerMode::Auto,
            optimizer: OptimizerOptions::fast(),
            diagonal_factor_noise: true,
            first_start: None,
            last_start: None,
            max_episodes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedStart {
    pub start: u32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    /// Episode start months, in date order.
    pub starts: Vec<u32>,
    pub terminal_wealths: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub sharpe: f64,
    /// Large-sample standard error `√((1 + S²/2)/N)`.
    pub sharpe_std_err: f64,
    pub rho0: f64,
    pub target_d: f64,
    pub target_rule: String,
    pub skipped: Vec<SkippedStart>,
}

impl BacktestReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["start", "terminal_wealth"])?;
        for (s, x) in self.starts.iter().zip(&self.terminal_wealths) {
            w.write_record([s.to_string(), x.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Rolling out-of-sample backtest of the mean-variance policy.
///
/// An episode starting at row `s` estimates on rows `s − window_len..s`,
/// solves the tables, and rolls the policy over the realized rows
/// `s..s + T` from `x₀ = 1` and `f₀` = the factors of row `s − 1`.
/// Episodes start every month and therefore overlap.
pub fn backtest(series: &ReturnSeries, config: &BacktestConfig) -> Result<BacktestReport> {
    series.validate()?;
    let horizon = config.horizon;
    if horizon == 0 || config.window_len == 0 {
        return Err(Error::Domain("horizon and window length must be positive".into()));
    }
    let first = match config.first_start {
        Some(d) => series.index_of(d)?,
        None => config.window_len,
    };
    let last = match config.last_start {
        Some(d) => series.index_of(d)?,
        None => series.len().saturating_sub(horizon),
    };
    if first < config.window_len {
        return Err(Error::Domain(format!(
            "first start needs {} months of history, only {first} available",
            config.window_len
        )));
    }
    if last + horizon > series.len() || first > last {
        return Err(Error::Domain("not enough data for a single out-of-sample episode".into()));
    }
    let mut starts: Vec<usize> = (first..=last).collect();
    if let Some(m) = config.max_episodes {
        starts.truncate(m);
    }
    let x0 = 1.0;
    let rho0 = config.riskfree.powi(horizon as i32);
    let target_d = rho0 * x0 * (1.0 + config.target_delta);

    let outcomes: Vec<std::result::Result<f64, String>> = starts
        .par_iter()
        .map(|&s| run_episode(series, config, s, x0, target_d).map_err(|e| e.to_string()))
        .collect();

    let mut report_starts = Vec::new();
    let mut wealths = Vec::new();
    let mut skipped = Vec::new();
    for (&s, out) in starts.iter().zip(outcomes) {
        match out {
            Ok(x) => {
                report_starts.push(series.dates[s]);
                wealths.push(x);
            }
            Err(reason) => {
                log::warn!("skipping start {}: {reason}", series.dates[s]);
                skipped.push(SkippedStart {
                    start: series.dates[s],
                    reason,
                });
            }
        }
    }
    if wealths.len() < 2 {
        return Err(Error::Numerical(format!(
            "only {} of {} backtest episodes succeeded",
            wealths.len(),
            starts.len()
        )));
    }
    let (mean, std) = mean_sd(&wealths);
    let sr = sharpe(mean, std, rho0, x0)?;
    Ok(BacktestReport {
        sharpe_std_err: ((1.0 + sr * sr / 2.0) / wealths.len() as f64).sqrt(),
        starts: report_starts,
        terminal_wealths: wealths,
        mean,
        std,
        sharpe: sr,
        rho0,
        target_d,
        target_rule: format!("d = rho0 * x0 * (1 + {})", config.target_delta),
        skipped,
    })
}

fn run_episode(series: &ReturnSeries, config: &BacktestConfig, s: usize, x0: f64, target_d: f64) -> Result<f64> {
    let horizon = config.horizon;
    let params = estimate_rows(series, s - config.window_len, s)?;
    let model = params.to_model(horizon, config.riskfree, &config.theta, config.diagonal_factor_noise)?;
    let grids = build_grids(&model, config.budget0, config.budget_nodes, &config.factor_nodes)?;
    let opts = SolveOptions {
        samples: config.samples,
        base_seed: config.seed,
        inner: config.inner,
        optimizer: config.optimizer.clone(),
        threads: Some(1),
        ..SolveOptions::default()
    };
    let policy = mv_solve(&model, &grids, &opts)?;
    let f0: Vec<f64> = series.factors.row(s - 1).iter().copied().collect();
    let rho = discount_factors(&model);
    let mu = mu_star(policy.h0(config.budget0, &f0), rho[0], x0, target_d)?;
    let path = RealizedPath {
        factors: (0..horizon).map(|t| series.factors.row(s + t).transpose()).collect(),
        assets: (0..horizon).map(|t| series.assets.row(s + t).transpose()).collect(),
    };
    let ropts = RolloutOptions {
        inner_samples: config.inner_samples,
        rule: ControlRule::MeanVariance { target: target_d, mu_star: mu },
    };
    let seed = SeedSpec::new(config.seed, &[u64::MAX, s as u64]);
    let traj = rollout(&model, &policy, x0, config.budget0, &f0, &seed, &Nature::Path(path), &ropts)?;
    Ok(traj.terminal_state())
}

/// Parameters of a simulated market with the model's factor structure.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticMarket {
    pub c: DVector<f64>,
    pub d: DMatrix<f64>,
    pub mean_reversion: DMatrix<f64>,
    pub factor_noise_cov: DMatrix<f64>,
    pub asset_noise_cov: DMatrix<f64>,
    /// Constant monthly risk-free return.
    pub riskfree: f64,
}

/// Simulates `n_obs` consecutive months starting at `start_date`, with the
/// factor path started at zero after a burn-in of 100 months.
pub fn synthetic_series(market: &SyntheticMarket, n_obs: usize, seed: u64, start_date: u32) -> Result<ReturnSeries> {
    let (n, k) = (market.d.nrows(), market.d.ncols());
    if market.c.len() != n || market.mean_reversion.shape() != (k, k) {
        return Err(Error::Dimension("synthetic market dimensions differ".into()));
    }
    if !check_date(start_date) {
        return Err(Error::Domain(format!("{start_date} is not a YYYYMM month")));
    }
    let burn = 100;
    let total = n_obs + burn;
    let spec = SeedSpec::new(seed, &[]);
    let eta = standard_normals(&spec.child(&[1]), total, k) * linalg::sqrt_factor(&market.factor_noise_cov).transpose();
    let eps = standard_normals(&spec.child(&[2]), total, n) * linalg::sqrt_factor(&market.asset_noise_cov).transpose();
    let g = DMatrix::identity(k, k) - &market.mean_reversion;
    let mut f = DVector::zeros(k);
    let mut factors = DMatrix::zeros(n_obs, k);
    let mut assets = DMatrix::zeros(n_obs, n);
    for t in 0..total {
        f = &g * &f + eta.row(t).transpose();
        if t >= burn {
            let b = &market.c + &market.d * &f + eps.row(t).transpose();
            factors.set_row(t - burn, &f.transpose());
            assets.set_row(t - burn, &b.transpose());
        }
    }
    let mut dates = Vec::with_capacity(n_obs);
    let mut d = start_date;
    for _ in 0..n_obs {
        dates.push(d);
        d = next_month(d);
    }
    let factor_names = (0..k)
        .map(|j| match j {
            0 => "MKT".to_string(),
            j => format!("F{j}"),
        })
        .collect();
    let series = ReturnSeries {
        dates,
        factor_names,
        asset_names: (0..n).map(|i| format!("A{i}")).collect(),
        factors,
        assets,
        riskfree: vec![market.riskfree; n_obs],
        dropped_rows: 0,
    };
    series.validate()?;
    Ok(series)
}
