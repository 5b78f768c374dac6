use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use attnlq::linalg;
use attnlq::market::{estimate, load_returns, BacktestConfig, EstimatedParams, ReturnSeries};
use attnlq::solver::OptimizerOptions;
use attnlq::{FactorCounts, InnerMode, LqModel, SolveMode};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Top-level run configuration, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: ModeName,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub model: ModelSection,
    pub data: Option<DataSection>,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub mean_variance: MeanVarianceSection,
    #[serde(default)]
    pub inspect: InspectSection,
    pub backtest: Option<BacktestConfig>,
}

fn default_mode() -> ModeName {
    ModeName::General
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    General,
    Mv,
}

impl From<ModeName> for SolveMode {
    fn from(m: ModeName) -> Self {
        match m {
            ModeName::General => SolveMode::General,
            ModeName::Mv => SolveMode::MeanVariance,
        }
    }
}

/// Stationary model parameters. The return-model matrices may instead come
/// from the `[data]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub horizon: usize,
    pub riskfree: f64,
    /// One efficiency for all factors or one per factor.
    pub attention_efficiency: Vec<f64>,
    pub cost_a: Option<Vec<Vec<f64>>>,
    pub cost_p: Option<Vec<f64>>,
    #[serde(default)]
    pub cost_q: f64,
    #[serde(default = "one")]
    pub terminal_q: f64,
    pub loading_c: Option<Vec<f64>>,
    pub loading_d: Option<Vec<Vec<f64>>>,
    pub mean_reversion: Option<Vec<Vec<f64>>>,
    pub factor_noise_cov: Option<Vec<Vec<f64>>>,
    pub asset_noise_cov: Option<Vec<Vec<f64>>>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub factor_file: PathBuf,
    pub asset_file: PathBuf,
    /// Inclusive estimation window `[start, end]` as YYYYMM; whole series if absent.
    pub window: Option<[u32; 2]>,
    /// Zero the off-diagonal entries of the estimated factor-noise covariance.
    #[serde(default = "yes")]
    pub diagonal_factor_noise: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub budget0: f64,
    pub budget_nodes: usize,
    pub factor_nodes: FactorCounts,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            budget0: 3.0,
            budget_nodes: 13,
            factor_nodes: FactorCounts::Uniform(7),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub samples: usize,
    pub inner: InnerMode,
    pub optimizer: OptimizerOptions,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            samples: 2000,
            inner: InnerMode::Auto,
            optimizer: OptimizerOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub episodes: usize,
    pub x0: f64,
    /// Initial factors; zero if absent.
    pub f0: Option<Vec<f64>>,
    pub inner_samples: usize,
    /// Number of trajectories exported in full.
    pub export_trajectories: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            episodes: 10_000,
            x0: 1.0,
            f0: None,
            inner_samples: attnlq::policy::DEFAULT_INNER_SAMPLES,
            export_trajectories: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeanVarianceSection {
    pub x0: f64,
    /// Target used by `simulate` in mean-variance mode, as `d = ρ₀x₀(1 + δ)`.
    pub target_delta: f64,
    /// Frontier targets; a default sweep of `δ ∈ [0, 0.1]` if empty.
    pub targets: Vec<f64>,
}

impl Default for MeanVarianceSection {
    fn default() -> Self {
        Self {
            x0: 1.0,
            target_delta: 0.05,
            targets: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Case {
    pub label: String,
    pub f: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct InspectSection {
    pub cases: Vec<Case>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        // Data paths are relative to the config file.
        if let (Some(data), Some(base)) = (cfg.data.as_mut(), path.parent()) {
            data.factor_file = base.join(&data.factor_file);
            data.asset_file = base.join(&data.asset_file);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn series(&self) -> Result<ReturnSeries> {
        let Some(data) = &self.data else {
            bail!(crate::UsageError("this command needs a [data] section".into()));
        };
        Ok(load_returns(&data.factor_file, &data.asset_file)?)
    }

    pub fn estimated(&self) -> Result<Option<EstimatedParams>> {
        let Some(data) = &self.data else {
            return Ok(None);
        };
        let series = self.series()?;
        let window = data
            .window
            .unwrap_or([series.dates[0], *series.dates.last().unwrap()]);
        Ok(Some(estimate(&series, (window[0], window[1]))?))
    }

    pub fn build_model(&self) -> Result<LqModel> {
        let m = &self.model;
        let (c, d, phi, eta, eps) = match (self.estimated()?, &self.data) {
            (Some(p), Some(data)) => {
                let mut eta = linalg::rows_to_matrix(&p.factor_noise_cov, "factor_noise_cov")?;
                if data.diagonal_factor_noise {
                    eta = DMatrix::from_diagonal(&eta.diagonal());
                }
                (
                    linalg::dvec(&p.c),
                    linalg::rows_to_matrix(&p.d, "loading_d")?,
                    linalg::rows_to_matrix(&p.mean_reversion, "mean_reversion")?,
                    eta,
                    linalg::rows_to_matrix(&p.asset_noise_cov, "asset_noise_cov")?,
                )
            }
            _ => {
                let need = |name: &str| {
                    crate::UsageError(format!("[model] needs `{name}` when no [data] section is given"))
                };
                (
                    linalg::dvec(m.loading_c.as_ref().ok_or_else(|| need("loading_c"))?),
                    linalg::rows_to_matrix(m.loading_d.as_ref().ok_or_else(|| need("loading_d"))?, "loading_d")?,
                    linalg::rows_to_matrix(
                        m.mean_reversion.as_ref().ok_or_else(|| need("mean_reversion"))?,
                        "mean_reversion",
                    )?,
                    linalg::rows_to_matrix(
                        m.factor_noise_cov.as_ref().ok_or_else(|| need("factor_noise_cov"))?,
                        "factor_noise_cov",
                    )?,
                    linalg::rows_to_matrix(
                        m.asset_noise_cov.as_ref().ok_or_else(|| need("asset_noise_cov"))?,
                        "asset_noise_cov",
                    )?,
                )
            }
        };
        let (n, k) = (c.len(), phi.nrows());
        let theta = match m.attention_efficiency.len() {
            1 => vec![m.attention_efficiency[0]; k],
            _ => m.attention_efficiency.clone(),
        };
        let cost_a = match &m.cost_a {
            Some(rows) => linalg::rows_to_matrix(rows, "cost_a")?,
            None => DMatrix::zeros(n, n),
        };
        let cost_p = m.cost_p.as_ref().map_or_else(|| DVector::zeros(n), |p| linalg::dvec(p));
        Ok(LqModel::stationary(
            m.horizon,
            m.riskfree,
            cost_a,
            cost_p,
            m.cost_q,
            m.terminal_q,
            c,
            d,
            phi,
            eta,
            eps,
            linalg::dvec(&theta),
        )?)
    }
}
