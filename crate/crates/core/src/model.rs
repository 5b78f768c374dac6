//! Problem parameterization and the closed-form Gaussian belief algebra.
//!
//! The state evolves as `x_{t+1} = a_{t+1} x_t + b_{t+1}ᵀ u_t` with asset
//! returns `b_{t+1} = c + D f_{t+1} + ε_{t+1}` and mean-reverting factors
//! `f_{t+1} = (I − Φ) f_t + η_{t+1}`. Before choosing `u_t` the decision
//! maker may spend attention `λ_t` to observe `s = f_{t+1} + v(λ_t)` where
//! `v_j` has variance `σ²_{η,j} / (exp(λ_j θ_j) − 1)`.
//!
//! Signal noise is carried in precision form throughout, so `λ_j = 0`
//! is an exact zero-precision (uninformative) signal rather than an
//! infinite variance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, PSD_TOL};

/// Full parameterization of the LQ problem with attention allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct LqModel {
    /// Number of periods `T`.
    pub horizon: usize,
    pub n_assets: usize,
    pub n_factors: usize,
    /// State multipliers `a_1..a_T`.
    pub riskfree: Vec<f64>,
    /// Control cost matrices `A_0..A_{T−1}`.
    pub cost_a: Vec<DMatrix<f64>>,
    /// Cross terms `p_0..p_{T−1}`.
    pub cost_p: Vec<DVector<f64>>,
    /// State costs `q_0..q_{T−1}`.
    pub cost_q: Vec<f64>,
    pub terminal_q: f64,
    pub loading_c: DVector<f64>,
    pub loading_d: DMatrix<f64>,
    /// Mean-reversion matrix `Φ`.
    pub mean_reversion: DMatrix<f64>,
    pub factor_noise_cov: DMatrix<f64>,
    pub asset_noise_cov: DMatrix<f64>,
    /// Information-processing efficiencies `θ`.
    pub attention_efficiency: DVector<f64>,
    derived: Derived,
}

#[derive(Debug, Clone, PartialEq)]
struct Derived {
    transition: DMatrix<f64>,
    factor_noise_precision: DMatrix<f64>,
    factor_noise_diag: Vec<f64>,
    factor_noise_is_diagonal: bool,
    asset_noise_sqrt: DMatrix<f64>,
}

/// Wire format of [`LqModel`]: explicit field names, matrices as row-major
/// nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LqModelDoc {
    pub horizon: usize,
    pub n_assets: usize,
    pub n_factors: usize,
    pub riskfree: Vec<f64>,
    #[serde(rename = "cost_A")]
    pub cost_a: Vec<Vec<Vec<f64>>>,
    pub cost_p: Vec<Vec<f64>>,
    pub cost_q: Vec<f64>,
    pub terminal_q: f64,
    pub loading_c: Vec<f64>,
    #[serde(rename = "loading_D")]
    pub loading_d: Vec<Vec<f64>>,
    pub mean_reversion: Vec<Vec<f64>>,
    pub factor_noise_cov: Vec<Vec<f64>>,
    pub asset_noise_cov: Vec<Vec<f64>>,
    pub attention_efficiency: Vec<f64>,
}

fn check_shape(m: &DMatrix<f64>, rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::Dimension(format!(
            "{what} is {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("model", format!("{what} has non-finite entries")));
    }
    Ok(())
}

fn check_len(len: usize, expect: usize, what: &str) -> Result<()> {
    if len != expect {
        return Err(Error::Dimension(format!("{what} has length {len}, expected {expect}")));
    }
    Ok(())
}

impl LqModel {
    /// Validates all invariants and caches derived quantities.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        horizon: usize,
        riskfree: Vec<f64>,
        cost_a: Vec<DMatrix<f64>>,
        cost_p: Vec<DVector<f64>>,
        cost_q: Vec<f64>,
        terminal_q: f64,
        loading_c: DVector<f64>,
        loading_d: DMatrix<f64>,
        mean_reversion: DMatrix<f64>,
        factor_noise_cov: DMatrix<f64>,
        asset_noise_cov: DMatrix<f64>,
        attention_efficiency: DVector<f64>,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::invalid("model", "horizon must be at least 1"));
        }
        let n = loading_c.len();
        let k = loading_d.ncols();
        if n == 0 || k == 0 {
            return Err(Error::invalid("model", "need at least one asset and one factor"));
        }
        if k >= n {
            return Err(Error::invalid(
                "model",
                format!("number of factors ({k}) must be smaller than number of assets ({n})"),
            ));
        }
        check_len(riskfree.len(), horizon, "riskfree")?;
        check_len(cost_a.len(), horizon, "cost_A")?;
        check_len(cost_p.len(), horizon, "cost_p")?;
        check_len(cost_q.len(), horizon, "cost_q")?;
        check_len(attention_efficiency.len(), k, "attention_efficiency")?;
        check_shape(&loading_d, n, k, "loading_D")?;
        check_shape(&mean_reversion, k, k, "mean_reversion")?;
        check_shape(&factor_noise_cov, k, k, "factor_noise_cov")?;
        check_shape(&asset_noise_cov, n, n, "asset_noise_cov")?;
        if loading_c.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("model", "loading_c has non-finite entries"));
        }
        if riskfree.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::invalid("model", "every riskfree multiplier must be positive"));
        }
        if !(terminal_q > 0.0 && terminal_q.is_finite()) {
            return Err(Error::invalid("model", "terminal_q must be positive"));
        }
        if attention_efficiency.iter().any(|&th| !(th > 0.0 && th.is_finite())) {
            return Err(Error::invalid("model", "attention efficiencies must be positive"));
        }
        for t in 0..horizon {
            check_shape(&cost_a[t], n, n, "cost_A[t]")?;
            check_len(cost_p[t].len(), n, "cost_p[t]")?;
            let q = cost_q[t];
            if !(q >= 0.0 && q.is_finite()) {
                return Err(Error::invalid("model", format!("cost_q[{t}] must be nonnegative")));
            }
            if linalg::max_asymmetry(&cost_a[t]) > 1e-12 {
                return Err(Error::invalid("model", format!("cost_A[{t}] is not symmetric")));
            }
            let mut block = DMatrix::zeros(n + 1, n + 1);
            block.view_mut((0, 0), (n, n)).copy_from(&cost_a[t]);
            for i in 0..n {
                block[(i, n)] = cost_p[t][i];
                block[(n, i)] = cost_p[t][i];
            }
            block[(n, n)] = q;
            if linalg::min_eigenvalue(&block) < -PSD_TOL {
                return Err(Error::invalid(
                    "model",
                    format!("cost block B_{t} is not positive semidefinite"),
                ));
            }
        }
        for (m, what) in [(&factor_noise_cov, "factor_noise_cov"), (&asset_noise_cov, "asset_noise_cov")] {
            if linalg::max_asymmetry(m) > 1e-12 {
                return Err(Error::invalid("model", format!("{what} is not symmetric")));
            }
            if linalg::cholesky_lower(m).is_none() {
                return Err(Error::invalid("model", format!("{what} is not positive definite")));
            }
        }

        let derived = Derived::compute(&mean_reversion, &factor_noise_cov, &asset_noise_cov)?;
        Ok(Self {
            horizon,
            n_assets: n,
            n_factors: k,
            riskfree,
            cost_a,
            cost_p,
            cost_q,
            terminal_q,
            loading_c,
            loading_d,
            mean_reversion,
            factor_noise_cov,
            asset_noise_cov,
            attention_efficiency,
            derived,
        })
    }

    /// A model with constant parameters across periods.
    #[allow(clippy::too_many_arguments)]
    pub fn stationary(
        horizon: usize,
        riskfree: f64,
        cost_a: DMatrix<f64>,
        cost_p: DVector<f64>,
        cost_q: f64,
        terminal_q: f64,
        loading_c: DVector<f64>,
        loading_d: DMatrix<f64>,
        mean_reversion: DMatrix<f64>,
        factor_noise_cov: DMatrix<f64>,
        asset_noise_cov: DMatrix<f64>,
        attention_efficiency: DVector<f64>,
    ) -> Result<Self> {
        Self::new(
            horizon,
            vec![riskfree; horizon],
            vec![cost_a; horizon],
            vec![cost_p; horizon],
            vec![cost_q; horizon],
            terminal_q,
            loading_c,
            loading_d,
            mean_reversion,
            factor_noise_cov,
            asset_noise_cov,
            attention_efficiency,
        )
    }

    /// Mean-variance embedding: zero running costs and unit terminal weight.
    pub fn mean_variance_embedding(&self) -> Self {
        let n = self.n_assets;
        let mut m = self.clone();
        m.cost_a = vec![DMatrix::zeros(n, n); self.horizon];
        m.cost_p = vec![DVector::zeros(n); self.horizon];
        m.cost_q = vec![0.0; self.horizon];
        m.terminal_q = 1.0;
        m
    }

    /// `I − Φ`.
    pub fn transition(&self) -> &DMatrix<f64> {
        &self.derived.transition
    }

    pub fn factor_noise_precision(&self) -> &DMatrix<f64> {
        &self.derived.factor_noise_precision
    }

    /// Diagonal entries `σ²_{η,j}`.
    pub fn factor_variances(&self) -> &[f64] {
        &self.derived.factor_noise_diag
    }

    pub fn factor_noise_is_diagonal(&self) -> bool {
        self.derived.factor_noise_is_diagonal
    }

    /// Square-root factor of `Σ_ε`.
    pub fn asset_noise_sqrt(&self) -> &DMatrix<f64> {
        &self.derived.asset_noise_sqrt
    }

    /// `a_{t+1}`, the multiplier applied from period `t` to `t + 1`.
    pub fn a(&self, t: usize) -> f64 {
        self.riskfree[t]
    }

    pub fn to_doc(&self) -> LqModelDoc {
        LqModelDoc {
            horizon: self.horizon,
            n_assets: self.n_assets,
            n_factors: self.n_factors,
            riskfree: self.riskfree.clone(),
            cost_a: self.cost_a.iter().map(linalg::matrix_to_rows).collect(),
            cost_p: self.cost_p.iter().map(|p| p.iter().copied().collect()).collect(),
            cost_q: self.cost_q.clone(),
            terminal_q: self.terminal_q,
            loading_c: self.loading_c.iter().copied().collect(),
            loading_d: linalg::matrix_to_rows(&self.loading_d),
            mean_reversion: linalg::matrix_to_rows(&self.mean_reversion),
            factor_noise_cov: linalg::matrix_to_rows(&self.factor_noise_cov),
            asset_noise_cov: linalg::matrix_to_rows(&self.asset_noise_cov),
            attention_efficiency: self.attention_efficiency.iter().copied().collect(),
        }
    }

    pub fn from_doc(doc: &LqModelDoc) -> Result<Self> {
        let model = Self::new(
            doc.horizon,
            doc.riskfree.clone(),
            doc.cost_a
                .iter()
                .map(|m| linalg::rows_to_matrix(m, "cost_A"))
                .collect::<Result<_>>()?,
            doc.cost_p.iter().map(|p| linalg::dvec(p)).collect(),
            doc.cost_q.clone(),
            doc.terminal_q,
            linalg::dvec(&doc.loading_c),
            linalg::rows_to_matrix(&doc.loading_d, "loading_D")?,
            linalg::rows_to_matrix(&doc.mean_reversion, "mean_reversion")?,
            linalg::rows_to_matrix(&doc.factor_noise_cov, "factor_noise_cov")?,
            linalg::rows_to_matrix(&doc.asset_noise_cov, "asset_noise_cov")?,
            linalg::dvec(&doc.attention_efficiency),
        )?;
        if model.n_assets != doc.n_assets || model.n_factors != doc.n_factors {
            return Err(Error::Dimension(format!(
                "declared n_assets={}, n_factors={} but matrices imply {}x{}",
                doc.n_assets, doc.n_factors, model.n_assets, model.n_factors
            )));
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: LqModelDoc = serde_json::from_str(s)?;
        Self::from_doc(&doc)
    }

    pub(crate) fn check_factor_vec(&self, v: &[f64], what: &str) -> Result<()> {
        check_len(v.len(), self.n_factors, what)
    }
}

impl Serialize for LqModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_doc().serialize(s)
    }
}

impl<'de> Deserialize<'de> for LqModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = LqModelDoc::deserialize(d)?;
        LqModel::from_doc(&doc).map_err(serde::de::Error::custom)
    }
}

impl Derived {
    fn compute(phi: &DMatrix<f64>, sigma_eta: &DMatrix<f64>, sigma_eps: &DMatrix<f64>) -> Result<Self> {
        let k = phi.nrows();
        let transition = DMatrix::identity(k, k) - phi;
        let factor_noise_precision = linalg::spd_inverse(sigma_eta)
            .ok_or_else(|| Error::invalid("model", "factor_noise_cov is not invertible"))?;
        let factor_noise_diag = (0..k).map(|j| sigma_eta[(j, j)]).collect();
        let factor_noise_is_diagonal =
            (0..k).all(|i| (0..k).all(|j| i == j || sigma_eta[(i, j)] == 0.0));
        let asset_noise_sqrt = linalg::sqrt_factor(sigma_eps);
        Ok(Self {
            transition,
            factor_noise_precision,
            factor_noise_diag,
            factor_noise_is_diagonal,
            asset_noise_sqrt,
        })
    }
}

/// Mean and covariance of a Gaussian vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Dimension("belief covariance does not match mean".into()));
        }
        if linalg::max_asymmetry(&cov) > 1e-12 {
            return Err(Error::invalid("belief", "covariance is not symmetric"));
        }
        if !linalg::is_psd(&cov) {
            return Err(Error::invalid("belief", "covariance is not positive semidefinite"));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Attention spent per factor together with the remaining budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionAllocation {
    pub lambda: Vec<f64>,
    pub budget: f64,
}

impl AttentionAllocation {
    pub fn new(lambda: Vec<f64>, budget: f64) -> Result<Self> {
        if !(budget >= 0.0) {
            return Err(Error::Domain(format!("budget {budget} is negative")));
        }
        check_attention(&lambda)?;
        let total: f64 = lambda.iter().sum();
        if total > budget + 1e-12 {
            return Err(Error::Domain(format!(
                "attention {total} exceeds remaining budget {budget}"
            )));
        }
        Ok(Self { lambda, budget })
    }

    pub fn total(&self) -> f64 {
        self.lambda.iter().sum()
    }
}

pub(crate) fn check_attention(lambda: &[f64]) -> Result<()> {
    if let Some(&bad) = lambda.iter().find(|&&l| !(l >= 0.0) || l.is_infinite()) {
        return Err(Error::Domain(format!("attention component {bad} is not a finite nonnegative number")));
    }
    Ok(())
}

/// Diagonal signal-noise covariance and precision for an allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalNoise {
    /// `σ²_{η,j} / (exp(λ_j θ_j) − 1)`, `+∞` when `λ_j = 0`.
    pub cov_diag: Vec<f64>,
    /// `(exp(λ_j θ_j) − 1) / σ²_{η,j}`, zero when `λ_j = 0`.
    pub precision_diag: Vec<f64>,
}

impl SignalNoise {
    /// Indices with strictly positive precision.
    pub fn informative(&self) -> Vec<usize> {
        self.precision_diag
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(j, _)| j)
            .collect()
    }
}

pub fn signal_noise(lambda: &[f64], model: &LqModel) -> Result<SignalNoise> {
    model.check_factor_vec(lambda, "lambda")?;
    check_attention(lambda)?;
    let sig2 = model.factor_variances();
    let mut cov_diag = Vec::with_capacity(lambda.len());
    let mut precision_diag = Vec::with_capacity(lambda.len());
    for (j, &l) in lambda.iter().enumerate() {
        let growth = (l * model.attention_efficiency[j]).exp_m1();
        if growth == 0.0 {
            cov_diag.push(f64::INFINITY);
            precision_diag.push(0.0);
        } else {
            cov_diag.push(sig2[j] / growth);
            precision_diag.push(growth / sig2[j]);
        }
    }
    Ok(SignalNoise {
        cov_diag,
        precision_diag,
    })
}

/// Beliefs about `f_{t+1}` and `b_{t+1}` before any signal is observed.
pub fn prior_beliefs(model: &LqModel, f_t: &[f64]) -> Result<(GaussianBelief, GaussianBelief)> {
    model.check_factor_vec(f_t, "f_t")?;
    if f_t.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("f_t must be finite".into()));
    }
    let mean_f = model.transition() * linalg::dvec(f_t);
    let factor = GaussianBelief {
        mean: mean_f,
        cov: model.factor_noise_cov.clone(),
    };
    let asset = asset_belief(model, &factor);
    Ok((factor, asset))
}

/// Pushes a factor belief through `b = c + D f + ε`.
pub fn asset_belief(model: &LqModel, factor: &GaussianBelief) -> GaussianBelief {
    let d = &model.loading_d;
    let mean = &model.loading_c + d * &factor.mean;
    let cov = linalg::symmetrize(&(d * &factor.cov * d.transpose() + &model.asset_noise_cov));
    GaussianBelief { mean, cov }
}

/// Posterior factor covariance `(Σ_η⁻¹ + P_v)⁻¹` and gain `Σ_post P_v`.
#[derive(Debug, Clone)]
pub struct PosteriorUpdate {
    pub prior_mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    pub noise: SignalNoise,
}

impl PosteriorUpdate {
    pub fn new(model: &LqModel, f_t: &[f64], lambda: &[f64]) -> Result<Self> {
        let noise = signal_noise(lambda, model)?;
        model.check_factor_vec(f_t, "f_t")?;
        let prior_mean = model.transition() * linalg::dvec(f_t);
        let k = model.n_factors;
        let mut info = model.factor_noise_precision().clone();
        for j in 0..k {
            info[(j, j)] += noise.precision_diag[j];
        }
        let cov = if noise.precision_diag.iter().all(|&p| p == 0.0) {
            model.factor_noise_cov.clone()
        } else {
            linalg::spd_inverse(&info)
                .ok_or_else(|| Error::Numerical("posterior information matrix is singular".into()))?
        };
        let mut gain = cov.clone();
        for j in 0..k {
            let p = noise.precision_diag[j];
            gain.column_mut(j).scale_mut(p);
        }
        Ok(Self {
            prior_mean,
            cov,
            gain,
            noise,
        })
    }

    /// Posterior mean of `f_{t+1}` for an observed signal.
    ///
    /// Components with zero precision receive zero gain and are never read.
    pub fn posterior_mean(&self, signal: &[f64]) -> Result<DVector<f64>> {
        let k = self.prior_mean.len();
        if signal.len() != k {
            return Err(Error::Dimension(format!("signal has length {}, expected {k}", signal.len())));
        }
        let mut mean = self.prior_mean.clone();
        for j in self.noise.informative() {
            if !signal[j].is_finite() {
                return Err(Error::Domain(format!("signal component {j} is not finite")));
            }
            let innov = signal[j] - self.prior_mean[j];
            for i in 0..k {
                mean[i] += self.gain[(i, j)] * innov;
            }
        }
        Ok(mean)
    }
}

/// Kalman update of both beliefs after observing `signal` under attention `lambda`.
pub fn posterior_beliefs(
    model: &LqModel,
    f_t: &[f64],
    lambda: &[f64],
    signal: &[f64],
) -> Result<(GaussianBelief, GaussianBelief)> {
    let update = PosteriorUpdate::new(model, f_t, lambda)?;
    let factor = GaussianBelief {
        mean: update.posterior_mean(signal)?,
        cov: update.cov,
    };
    let asset = asset_belief(model, &factor);
    Ok((factor, asset))
}

/// Per-factor entropy reduction `λ_j θ_j / 2` in nats.
pub fn entropy_reduction(lambda: &[f64], model: &LqModel) -> Result<Vec<f64>> {
    model.check_factor_vec(lambda, "lambda")?;
    check_attention(lambda)?;
    Ok(lambda
        .iter()
        .zip(model.attention_efficiency.iter())
        .map(|(l, th)| 0.5 * l * th)
        .collect())
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// Single-factor, two-asset model with constant costs.
    pub fn scalar_model(
        horizon: usize,
        a: f64,
        phi: f64,
        sigma2_eta: f64,
        theta: f64,
    ) -> LqModel {
        LqModel::stationary(
            horizon,
            a,
            DMatrix::from_diagonal_element(2, 2, 0.01),
            DVector::zeros(2),
            0.0,
            1.0,
            DVector::from_vec(vec![0.01, 0.005]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.5]),
            DMatrix::from_element(1, 1, phi),
            DMatrix::from_element(1, 1, sigma2_eta),
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.0025, 0.0016])),
            DVector::from_element(1, theta),
        )
        .unwrap()
    }

    pub fn three_factor_model(sig2: [f64; 3], theta: [f64; 3]) -> LqModel {
        LqModel::stationary(
            2,
            1.0036,
            DMatrix::zeros(5, 5),
            DVector::zeros(5),
            0.0,
            1.0,
            DVector::from_element(5, 0.006),
            DMatrix::from_fn(5, 3, |i, j| 0.2 + 0.1 * ((i + 2 * j) % 4) as f64),
            DMatrix::from_diagonal_element(3, 3, 0.9),
            DMatrix::from_diagonal(&DVector::from_row_slice(&sig2)),
            DMatrix::from_diagonal_element(5, 5, 0.0004),
            DVector::from_row_slice(&theta),
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn signal_noise_values() {
        let m = scalar_model(1, 1.0, 0.1, 1.0, 0.69);
        let sn = signal_noise(&[0.0], &m).unwrap();
        assert_eq!(sn.precision_diag[0], 0.0);
        assert!(sn.cov_diag[0].is_infinite());
        let sn = signal_noise(&[1.0], &m).unwrap();
        assert_relative_eq!(sn.cov_diag[0], 1.006324, epsilon = 1e-6);
        assert_relative_eq!(sn.precision_diag[0], 0.9937155, epsilon = 1e-7);
        let m = scalar_model(1, 1.0, 0.1, 0.04, 0.69);
        let sn = signal_noise(&[1.0], &m).unwrap();
        assert_relative_eq!(sn.cov_diag[0], 0.0402530, epsilon = 1e-7);
        assert!(matches!(signal_noise(&[-0.1], &m), Err(Error::Domain(_))));
    }

    #[test]
    fn prior_belief_values() {
        let m = scalar_model(1, 1.0, 1.0, 0.04, 0.69);
        let (f, _) = prior_beliefs(&m, &[0.37]).unwrap();
        assert_eq!(f.mean[0], 0.0);
        assert_eq!(f.cov[(0, 0)], 0.04);

        let m = scalar_model(1, 1.0, 0.1, 0.04, 0.69);
        let (f, b) = prior_beliefs(&m, &[0.2]).unwrap();
        assert_relative_eq!(f.mean[0], 0.18, epsilon = 1e-15);
        assert_relative_eq!(b.mean[0], 0.01 + 0.18, epsilon = 1e-15);
        assert_relative_eq!(b.cov[(0, 1)], 0.5 * 0.04, epsilon = 1e-15);
    }

    #[test]
    fn zero_loading_asset_belief_ignores_factors() {
        let mut m = scalar_model(1, 1.0, 0.1, 0.04, 0.69);
        m.loading_d = DMatrix::zeros(2, 1);
        let (_, b) = prior_beliefs(&m, &[3.0]).unwrap();
        assert_eq!(b.mean, m.loading_c);
        assert_eq!(b.cov, m.asset_noise_cov);
    }

    #[test]
    fn posterior_worked_example() {
        let m = scalar_model(1, 1.0, 0.1, 0.04, 0.69);
        let up = PosteriorUpdate::new(&m, &[0.2], &[1.0]).unwrap();
        assert_relative_eq!(up.gain[(0, 0)], 0.498424, epsilon = 1e-6);
        let (f, _) = posterior_beliefs(&m, &[0.2], &[1.0], &[0.3]).unwrap();
        assert_relative_eq!(f.mean[0], 0.239811, epsilon = 1e-6);
        assert_relative_eq!(f.cov[(0, 0)], 0.0200630, epsilon = 1e-7);
    }

    #[test]
    fn zero_attention_posterior_is_prior() {
        let m = three_factor_model([0.002, 0.001, 0.0008], [0.69; 3]);
        let f_t = [0.01, -0.02, 0.005];
        let prior = prior_beliefs(&m, &f_t).unwrap();
        let post = posterior_beliefs(&m, &f_t, &[0.0; 3], &[f64::NAN, 1e9, -4.0]).unwrap();
        assert_eq!(prior, post);
    }

    #[test]
    fn non_finite_signal_rejected_when_informative() {
        let m = scalar_model(1, 1.0, 0.1, 0.04, 0.69);
        assert!(matches!(
            posterior_beliefs(&m, &[0.0], &[0.5], &[f64::NAN]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn entropy_values() {
        let m = scalar_model(1, 1.0, 0.1, 0.04, 0.69);
        assert_eq!(entropy_reduction(&[0.0], &m).unwrap(), vec![0.0]);
        assert_relative_eq!(entropy_reduction(&[1.0], &m).unwrap()[0], 0.345, epsilon = 1e-15);
        assert_relative_eq!(entropy_reduction(&[2.0], &m).unwrap()[0], 0.69, epsilon = 1e-15);
        let up = PosteriorUpdate::new(&m, &[0.0], &[2.0]).unwrap();
        assert_relative_eq!(up.cov[(0, 0)] / 0.04, 0.251579, epsilon = 1e-6);
    }

    #[test]
    fn gain_tends_to_identity() {
        let m = three_factor_model([0.002, 0.001, 0.0008], [0.69; 3]);
        let up = PosteriorUpdate::new(&m, &[0.0; 3], &[50.0; 3]).unwrap();
        let id = DMatrix::<f64>::identity(3, 3);
        assert!((up.gain - id).abs().max() < 1e-8);
        let up = PosteriorUpdate::new(&m, &[0.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(up.gain.abs().max(), 0.0);
    }

    #[test]
    fn json_roundtrip_and_validation() {
        let m = three_factor_model([0.002, 0.001, 0.0008], [0.69, 0.5, 0.3]);
        let s = m.to_json().unwrap();
        assert!(s.contains("\"loading_D\""));
        let back = LqModel::from_json(&s).unwrap();
        assert_eq!(back, m);

        let mut doc = m.to_doc();
        doc.asset_noise_cov[0][0] = -1.0;
        assert!(LqModel::from_doc(&doc).is_err());
        let mut doc = m.to_doc();
        doc.n_assets = 4;
        assert!(matches!(LqModel::from_doc(&doc), Err(Error::Dimension(_))));
        let mut doc = m.to_doc();
        doc.cost_p[0][0] = 1.0; // B_t indefinite with A = 0, q = 0
        assert!(LqModel::from_doc(&doc).is_err());
    }

    #[test]
    fn more_factors_than_assets_rejected() {
        let r = LqModel::stationary(
            1,
            1.0,
            DMatrix::zeros(1, 1),
            DVector::zeros(1),
            0.0,
            1.0,
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 0.01),
            DMatrix::from_element(1, 1, 0.01),
            DVector::from_element(1, 0.69),
        );
        assert!(r.is_err());
    }

    fn subtraction_form(m: &LqModel, lambda: &[f64]) -> DMatrix<f64> {
        let sn = signal_noise(lambda, m).unwrap();
        let s = &m.factor_noise_cov;
        let sv = DMatrix::from_diagonal(&DVector::from_vec(sn.cov_diag.clone()));
        let inv = (s + sv).try_inverse().unwrap();
        s - s * inv * s
    }

    proptest! {
        #[test]
        fn posterior_variance_law(l in proptest::collection::vec(0.0f64..6.0, 3),
                                  th in proptest::collection::vec(0.05f64..2.0, 3)) {
            let sig2 = [0.0021, 0.0011, 0.0009];
            let m = three_factor_model(sig2, [th[0], th[1], th[2]]);
            let up = PosteriorUpdate::new(&m, &[0.0; 3], &l).unwrap();
            for j in 0..3 {
                let expect = sig2[j] * (-l[j] * th[j]).exp();
                prop_assert!((up.cov[(j, j)] - expect).abs() <= 1e-10);
            }
        }

        #[test]
        fn precision_and_subtraction_forms_agree(l in proptest::collection::vec(1e-6f64..5.0, 3)) {
            let mut m = three_factor_model([0.002, 0.001, 0.0008], [0.69; 3]);
            m = LqModel::new(
                m.horizon, m.riskfree.clone(), m.cost_a.clone(), m.cost_p.clone(), m.cost_q.clone(),
                m.terminal_q, m.loading_c.clone(), m.loading_d.clone(), m.mean_reversion.clone(),
                DMatrix::from_row_slice(3, 3, &[0.002, 0.0003, 0.0001, 0.0003, 0.001, -0.0002, 0.0001, -0.0002, 0.0008]),
                m.asset_noise_cov.clone(), m.attention_efficiency.clone()).unwrap();
            let up = PosteriorUpdate::new(&m, &[0.0; 3], &l).unwrap();
            let sub = subtraction_form(&m, &l);
            prop_assert!((up.cov - sub).abs().max() <= 1e-9);
        }

        #[test]
        fn posterior_variance_decreasing(l in 0.0f64..5.0, dl in 1e-3f64..1.0) {
            let m = scalar_model(1, 1.0, 0.1, 0.04, 0.69);
            let a = PosteriorUpdate::new(&m, &[0.0], &[l]).unwrap().cov[(0, 0)];
            let b = PosteriorUpdate::new(&m, &[0.0], &[l + dl]).unwrap().cov[(0, 0)];
            prop_assert!(b < a);
        }

        #[test]
        fn posterior_asset_cov_dominates_idiosyncratic(l in proptest::collection::vec(0.0f64..5.0, 3)) {
            let m = three_factor_model([0.002, 0.001, 0.0008], [0.69; 3]);
            let (_, b) = posterior_beliefs(&m, &[0.0; 3], &l, &[0.01, 0.0, -0.01]).unwrap();
            let diff = &b.cov - &m.asset_noise_cov;
            prop_assert!(linalg::min_eigenvalue(&diff) >= -1e-12);
            prop_assert!(linalg::min_eigenvalue(&b.cov) > 0.0);
        }
    }
}
