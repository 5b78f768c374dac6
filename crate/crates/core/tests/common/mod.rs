//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use attnlq::LqModel;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Probabilists' Gauss–Hermite rule: `E[g(Z)] ≈ Σ w_i g(x_i)` for `Z ~ N(0, 1)`,
/// from the eigen-decomposition of the Jacobi matrix.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Clamped multilinear interpolation over a tensor grid, first axis slowest.
pub fn multilinear(values: &[f64], grids: &[Vec<f64>], x: &[f64]) -> f64 {
    let d = grids.len();
    let mut lo = vec![0usize; d];
    let mut w = vec![0.0; d];
    for a in 0..d {
        let g = &grids[a];
        if g.len() == 1 {
            continue;
        }
        let xa = x[a].clamp(g[0], g[g.len() - 1]);
        let mut i = 0;
        while i + 2 < g.len() && xa > g[i + 1] {
            i += 1;
        }
        lo[a] = i;
        w[a] = (xa - g[i]) / (g[i + 1] - g[i]);
    }
    let mut total = 0.0;
    for corner in 0..(1usize << d) {
        let mut weight = 1.0;
        let mut flat = 0;
        for a in 0..d {
            let up = corner >> a & 1 == 1;
            let n = grids[a].len();
            if n == 1 && up {
                weight = 0.0;
            }
            let idx = if up { (lo[a] + 1).min(n - 1) } else { lo[a] };
            weight *= if up { w[a] } else { 1.0 - w[a] };
            flat = flat * n + idx;
        }
        if weight != 0.0 {
            total += weight * values[flat];
        }
    }
    total
}

/// `q + a²m0 − (p + a m1)ᵀ(A + m2)⁻¹(p + a m1)` for period `t`.
pub fn g_value(model: &LqModel, t: usize, m0: f64, m1: &DVector<f64>, m2: &DMatrix<f64>) -> f64 {
    let a = model.riskfree[t];
    let v = &model.cost_p[t] + m1 * a;
    let mat = &model.cost_a[t] + m2;
    let sol = mat.clone().lu().solve(&v).expect("nonsingular");
    model.cost_q[t] + a * a * m0 - v.dot(&sol)
}

/// One-period objective with a constant next-period value `q_next`, for a
/// single factor, by Gauss–Hermite integration over the posterior mean.
pub fn one_period_g(model: &LqModel, f_t: f64, lambda: f64, q_next: f64, nodes: usize) -> f64 {
    assert_eq!(model.n_factors, 1);
    let phi = model.mean_reversion[(0, 0)];
    let s2 = model.factor_noise_cov[(0, 0)];
    let theta = model.attention_efficiency[0];
    let prior = (1.0 - phi) * f_t;
    let post_var = s2 * (-lambda * theta).exp();
    let mean_sd = (s2 - post_var).max(0.0).sqrt();
    let d = model.loading_d.column(0).into_owned();
    let cov = &d * d.transpose() * post_var + &model.asset_noise_cov;
    let (x, w) = gauss_hermite(nodes);
    x.iter()
        .zip(&w)
        .map(|(&z, &wi)| {
            let mu = prior + mean_sd * z;
            let beta = &model.loading_c + &d * mu;
            let m2 = (&beta * beta.transpose() + &cov) * q_next;
            wi * g_value(model, 0, q_next, &(&beta * q_next), &m2)
        })
        .sum()
}
