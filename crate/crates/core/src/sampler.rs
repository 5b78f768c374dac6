//! Seed-reproducible Monte-Carlo batches and the derived signal, factor and
//! asset samples.
//!
//! Every batch is a pure function of `(base_seed, stream_key)`. Each key is
//! folded into a 64-bit ChaCha stream id, so parallel callers with distinct
//! keys draw from independent streams regardless of scheduling.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{signal_noise, GaussianBelief, LqModel};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub base_seed: u64,
    pub stream_key: Vec<u64>,
}

impl SeedSpec {
    pub fn new(base_seed: u64, stream_key: &[u64]) -> Self {
        Self {
            base_seed,
            stream_key: stream_key.to_vec(),
        }
    }

    /// Extends the key with further components.
    pub fn child(&self, extra: &[u64]) -> Self {
        let mut key = self.stream_key.clone();
        key.extend_from_slice(extra);
        Self {
            base_seed: self.base_seed,
            stream_key: key,
        }
    }

    pub fn rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.base_seed);
        rng.set_stream(fold_key(&self.stream_key));
        rng
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fold_key(key: &[u64]) -> u64 {
    // Length is mixed in so that (1,) and (1, 0) differ.
    let mut h = splitmix64(key.len() as u64);
    for &k in key {
        h = splitmix64(h ^ k);
    }
    h
}

/// `rows×cols` standard normals, filled row by row.
///
/// Row-major filling makes the first `m` rows of a larger draw equal to a
/// draw of `m` rows from the same stream.
pub fn standard_normals(seed: &SeedSpec, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut rng = seed.rng();
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = StandardNormal.sample(&mut rng);
        }
    }
    m
}

/// The three independent shock matrices of one Monte-Carlo batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    /// `L×k` signal shocks.
    pub eps1: DMatrix<f64>,
    /// `L×k` posterior factor shocks.
    pub eps2: DMatrix<f64>,
    /// `L×n` idiosyncratic asset shocks, paired row-wise with `eps2`.
    pub eps3: DMatrix<f64>,
    pub seed_spec: SeedSpec,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.eps1.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn draw_batch(base_seed: u64, stream_key: &[u64], samples: usize, k: usize, n: usize) -> Result<SampleBatch> {
    if samples == 0 {
        return Err(Error::Domain("batch size L must be at least 1".into()));
    }
    let seed_spec = SeedSpec::new(base_seed, stream_key);
    Ok(SampleBatch {
        eps1: standard_normals(&seed_spec.child(&[1]), samples, k),
        eps2: standard_normals(&seed_spec.child(&[2]), samples, k),
        eps3: standard_normals(&seed_spec.child(&[3]), samples, n),
        seed_spec,
    })
}

/// Lower square-root factor of `(Σ_η + Σ_v(λ))` over the informative
/// components, together with their indices.
pub(crate) fn signal_factor(model: &LqModel, lambda: &[f64]) -> Result<(Vec<usize>, DMatrix<f64>)> {
    let noise = signal_noise(lambda, model)?;
    let idx = noise.informative();
    let m = idx.len();
    let cov = DMatrix::from_fn(m, m, |a, b| {
        let (i, j) = (idx[a], idx[b]);
        let mut v = model.factor_noise_cov[(i, j)];
        if a == b {
            v += noise.cov_diag[i];
        }
        v
    });
    Ok((idx, linalg::sqrt_factor(&cov)))
}

/// Signals `s = (I − Φ) f_t + C ε₁` for every row of `eps1`.
///
/// Uninformative components (`λ_j = 0`) are emitted as the prior mean.
pub fn simulate_signals(model: &LqModel, f_t: &[f64], lambda: &[f64], eps1: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = model.n_factors;
    model.check_factor_vec(f_t, "f_t")?;
    if eps1.ncols() != k {
        return Err(Error::Dimension(format!("eps1 has {} columns, expected {k}", eps1.ncols())));
    }
    let prior = model.transition() * linalg::dvec(f_t);
    let (idx, chol) = signal_factor(model, lambda)?;
    let rows = eps1.nrows();
    let mut out = DMatrix::from_fn(rows, k, |_, j| prior[j]);
    for l in 0..rows {
        for (a, &i) in idx.iter().enumerate() {
            // Full row: the eigen fallback factor is not triangular.
            let s: f64 = idx.iter().enumerate().map(|(b, &j)| chol[(a, b)] * eps1[(l, j)]).sum();
            out[(l, i)] += s;
        }
    }
    Ok(out)
}

/// Samples `μ + M ε₂` from a posterior factor belief.
pub fn simulate_posterior_factors(belief: &GaussianBelief, eps2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = belief.dim();
    if eps2.ncols() != k {
        return Err(Error::Dimension(format!("eps2 has {} columns, expected {k}", eps2.ncols())));
    }
    let root = linalg::sqrt_factor(&belief.cov);
    let mut out = eps2 * root.transpose();
    for mut row in out.row_iter_mut() {
        for j in 0..k {
            row[j] += belief.mean[j];
        }
    }
    Ok(out)
}

/// Asset returns `c + D f + Σ_ε^{1/2} ε₃` row by row.
pub fn simulate_asset_returns(model: &LqModel, factors: &DMatrix<f64>, eps3: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, k) = (model.n_assets, model.n_factors);
    if factors.ncols() != k || eps3.ncols() != n || factors.nrows() != eps3.nrows() {
        return Err(Error::Dimension("factors/eps3 shapes do not match the model".into()));
    }
    let mut out = factors * model.loading_d.transpose() + eps3 * model.asset_noise_sqrt().transpose();
    for mut row in out.row_iter_mut() {
        for i in 0..n {
            row[i] += model.loading_c[i];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testing::*;
    use crate::model::PosteriorUpdate;
    use nalgebra::DVector;

    fn col_mean_var(m: &DMatrix<f64>, j: usize) -> (f64, f64) {
        let n = m.nrows() as f64;
        let mean = m.column(j).sum() / n;
        let var = m.column(j).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn batches_are_deterministic() {
        let a = draw_batch(7, &[1, 2, 3], 100, 3, 5).unwrap();
        let b = draw_batch(7, &[1, 2, 3], 100, 3, 5).unwrap();
        assert_eq!(a, b);
        let c = draw_batch(7, &[1, 2, 4], 100, 3, 5).unwrap();
        assert_ne!(a.eps1, c.eps1);
        assert!(draw_batch(7, &[1], 0, 3, 5).is_err());
    }

    #[test]
    fn prefix_property() {
        let a = draw_batch(3, &[9], 50, 2, 3).unwrap();
        let b = draw_batch(3, &[9], 20, 2, 3).unwrap();
        assert_eq!(a.eps1.rows(0, 20), b.eps1.rows(0, 20));
        assert_eq!(a.eps3.rows(0, 20), b.eps3.rows(0, 20));
    }

    #[test]
    fn key_length_is_significant() {
        assert_ne!(fold_key(&[1]), fold_key(&[1, 0]));
        assert_ne!(fold_key(&[]), fold_key(&[0]));
    }

    #[test]
    fn standard_normal_moments() {
        let l = 100_000;
        let b = draw_batch(11, &[0], l, 3, 5).unwrap();
        let tol_m = 4.0 / (l as f64).sqrt();
        let tol_v = 6.0 / (l as f64).sqrt();
        for m in [&b.eps1, &b.eps2, &b.eps3] {
            for j in 0..m.ncols() {
                let (mean, var) = col_mean_var(m, j);
                assert!(mean.abs() <= tol_m, "mean {mean}");
                assert!((var - 1.0).abs() <= tol_v, "var {var}");
            }
        }
    }

    #[test]
    fn distinct_streams_uncorrelated() {
        let l = 100_000;
        let a = draw_batch(0, &[1], l, 2, 3).unwrap();
        let b = draw_batch(0, &[2], l, 2, 3).unwrap();
        let x: Vec<f64> = a.eps1.iter().copied().collect();
        let y: Vec<f64> = b.eps1.iter().copied().collect();
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n;
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n;
        let corr = cov / (vx * vy).sqrt();
        assert!(corr.abs() <= 4.0 / n.sqrt(), "corr {corr}");
    }

    #[test]
    fn uninformative_signals_equal_prior_mean() {
        let m = three_factor_model([0.002, 0.001, 0.0008], [0.69; 3]);
        let b = draw_batch(1, &[5], 64, 3, 5).unwrap();
        let f = [0.05, -0.02, 0.01];
        let s = simulate_signals(&m, &f, &[0.0; 3], &b.eps1).unwrap();
        let prior = m.transition() * DVector::from_row_slice(&f);
        for row in s.row_iter() {
            for j in 0..3 {
                assert_eq!(row[j], prior[j]);
            }
        }
        let s = simulate_signals(&m, &f, &[0.0, 1.0, 0.0], &b.eps1).unwrap();
        assert_eq!(s[(3, 0)], prior[0]);
        assert_ne!(s[(3, 1)], prior[1]);
    }

    #[test]
    fn signal_variance_matches_closed_form() {
        let l = 100_000;
        let m = scalar_model(1, 1.0, 0.1, 0.04, 0.69);
        let b = draw_batch(2, &[1], l, 1, 2).unwrap();
        let s = simulate_signals(&m, &[0.2], &[1.0], &b.eps1).unwrap();
        let (_, var) = col_mean_var(&s, 0);
        assert!((var / 0.0802530 - 1.0).abs() < 0.02, "var {var}");
        let s = simulate_signals(&m, &[0.2], &[50.0], &b.eps1).unwrap();
        let (_, var) = col_mean_var(&s, 0);
        assert!((var / 0.04 - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn common_random_numbers_across_lambda() {
        let m = scalar_model(1, 1.0, 0.1, 0.04, 0.69);
        let b = draw_batch(2, &[1], 16, 1, 2).unwrap();
        let s1 = simulate_signals(&m, &[0.2], &[1.0], &b.eps1).unwrap();
        let s2 = simulate_signals(&m, &[0.2], &[2.0], &b.eps1).unwrap();
        // Same shocks, rescaled: (s - prior) / sd is identical.
        let sd1 = (0.04 + 0.04 / (0.69f64).exp_m1()).sqrt();
        let sd2 = (0.04 + 0.04 / (1.38f64).exp_m1()).sqrt();
        for l in 0..16 {
            let z1 = (s1[(l, 0)] - 0.18) / sd1;
            let z2 = (s2[(l, 0)] - 0.18) / sd2;
            assert!((z1 - z2).abs() < 1e-12);
            assert!((z1 - b.eps1[(l, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_factor_samples() {
        let l = 100_000;
        let m = scalar_model(1, 1.0, 0.1, 0.04, 0.69);
        let up = PosteriorUpdate::new(&m, &[0.2], &[1.0]).unwrap();
        let belief = GaussianBelief::new(DVector::from_element(1, 0.24), up.cov.clone()).unwrap();
        let b = draw_batch(3, &[1], l, 1, 2).unwrap();
        let f = simulate_posterior_factors(&belief, &b.eps2).unwrap();
        let (mean, var) = col_mean_var(&f, 0);
        assert!((var / 0.0200630 - 1.0).abs() < 0.02);
        assert!((mean - 0.24).abs() <= 4.0 * (0.0200630 / l as f64).sqrt());

        let zero = GaussianBelief::new(DVector::from_element(1, 0.3), DMatrix::zeros(1, 1)).unwrap();
        let f = simulate_posterior_factors(&zero, &b.eps2).unwrap();
        assert!(f.iter().all(|&v| v == 0.3));
    }

    #[test]
    fn asset_samples_match_plugin_moments() {
        let l = 100_000;
        let m = three_factor_model([0.002, 0.001, 0.0008], [0.69; 3]);
        let cov_f = DMatrix::from_row_slice(3, 3, &[0.002, 0.0004, 0.0, 0.0004, 0.001, 0.0, 0.0, 0.0, 0.0008]);
        let belief = GaussianBelief::new(DVector::from_row_slice(&[0.01, 0.0, -0.01]), cov_f.clone()).unwrap();
        let b = draw_batch(4, &[1], l, 3, 5).unwrap();
        let f = simulate_posterior_factors(&belief, &b.eps2).unwrap();
        let r = simulate_asset_returns(&m, &f, &b.eps3).unwrap();
        let d = &m.loading_d;
        let target = d * &cov_f * d.transpose() + &m.asset_noise_cov;
        let mean = r.row_mean();
        let centered = DMatrix::from_fn(l, 5, |i, j| r[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (l as f64 - 1.0);
        let rel = (&cov - &target).norm() / target.norm();
        assert!(rel < 0.05, "relative Frobenius error {rel}");
        let expect_mean = &m.loading_c + d * &belief.mean;
        for i in 0..5 {
            assert!((mean[i] - expect_mean[i]).abs() <= 4.0 * (target[(i, i)] / l as f64).sqrt());
        }
    }

    #[test]
    fn degenerate_asset_samples() {
        let mut m = scalar_model(1, 1.0, 0.1, 0.04, 0.69);
        m.loading_d = DMatrix::zeros(2, 1);
        let f = DMatrix::from_element(4, 1, 0.3);
        let r = simulate_asset_returns(&m, &f, &DMatrix::zeros(4, 2)).unwrap();
        for row in r.row_iter() {
            assert_eq!(row[0], m.loading_c[0]);
            assert_eq!(row[1], m.loading_c[1]);
        }
    }
}
