//! Exact Gaussian expectations of a clamped multilinear interpolant.
//!
//! With independent coordinates `f_j ~ N(μ_j, σ_j²)` the interpolant is a sum
//! of products of one-dimensional hat functions, so
//! `E[h(f) Π (f_j − μ_j)^{p_j}]` factorizes into per-dimension hat moments
//! followed by a tensor contraction.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::grid::locate;

/// Standardized distance beyond which the Gaussian mass is ignored.
const Z_CUTOFF: f64 = 9.0;

#[derive(Clone, Copy)]
struct Edge {
    z: f64,
    cdf: f64,
    pdf: f64,
}

impl Edge {
    fn at(z: f64) -> Self {
        if z <= -Z_CUTOFF {
            Edge { z, cdf: 0.0, pdf: 0.0 }
        } else if z >= Z_CUTOFF {
            Edge { z, cdf: 1.0, pdf: 0.0 }
        } else {
            Edge {
                z,
                cdf: 0.5 * libm::erfc(-z * FRAC_1_SQRT_2),
                pdf: (-0.5 * z * z).exp() / (2.0 * PI).sqrt(),
            }
        }
    }

    const MINUS_INF: Edge = Edge { z: 0.0, cdf: 0.0, pdf: 0.0 };
    const PLUS_INF: Edge = Edge { z: 0.0, cdf: 1.0, pdf: 0.0 };
}

/// `E[Z^p 1{a ≤ Z ≤ b}]` for `p = 0..3`, `Z` standard normal.
fn truncated(a: Edge, b: Edge) -> [f64; 4] {
    let z0 = b.cdf - a.cdf;
    let z1 = a.pdf - b.pdf;
    let z2 = z0 + a.z * a.pdf - b.z * b.pdf;
    let z3 = 2.0 * z1 + a.z * a.z * a.pdf - b.z * b.z * b.pdf;
    [z0, z1, z2, z3]
}

/// Writes `E[φ_i(X) (X − μ)^p]` for `p = 0, 1, 2` into `out[i]`, where `φ_i`
/// are the clamped hat functions of `grid` and `X ~ N(μ, σ²)`.
///
/// Returns the half-open range of nodes with nonzero weight.
pub(crate) fn hat_moments(grid: &[f64], mu: f64, sigma: f64, out: &mut [[f64; 3]]) -> (usize, usize) {
    let m = grid.len();
    for o in out[..m].iter_mut() {
        *o = [0.0; 3];
    }
    if m == 1 {
        out[0] = [1.0, 0.0, sigma * sigma];
        return (0, 1);
    }
    if !(sigma > 0.0) {
        let (i, w) = locate(grid, mu);
        out[i][0] = 1.0 - w;
        out[i + 1][0] = w;
        return (i, i + 2);
    }
    let edge = |g: f64| Edge::at((g - mu) / sigma);
    let s = [1.0, sigma, sigma * sigma, sigma * sigma * sigma];

    let mut lo = m;
    let mut hi = 0;
    let mark = |i: usize, lo: &mut usize, hi: &mut usize| {
        *lo = (*lo).min(i);
        *hi = (*hi).max(i + 1);
    };

    let mut left = edge(grid[0]);
    let tail = truncated(Edge::MINUS_INF, left);
    if tail[0] > 0.0 {
        for p in 0..3 {
            out[0][p] += s[p] * tail[p];
        }
        mark(0, &mut lo, &mut hi);
    }
    for i in 0..m - 1 {
        let right = edge(grid[i + 1]);
        let both_far = (left.z <= -Z_CUTOFF && right.z <= -Z_CUTOFF) || (left.z >= Z_CUTOFF && right.z >= Z_CUTOFF);
        if !both_far {
            let t = truncated(left, right);
            let inv_delta = 1.0 / (grid[i + 1] - grid[i]);
            for p in 0..3 {
                let scale = s[p + 1] * inv_delta;
                out[i][p] += scale * (right.z * t[p] - t[p + 1]);
                out[i + 1][p] += scale * (t[p + 1] - left.z * t[p]);
            }
            mark(i, &mut lo, &mut hi);
            mark(i + 1, &mut lo, &mut hi);
        }
        left = right;
    }
    let tail = truncated(left, Edge::PLUS_INF);
    if tail[0] > 0.0 {
        for p in 0..3 {
            out[m - 1][p] += s[p] * tail[p];
        }
        mark(m - 1, &mut lo, &mut hi);
    }
    if lo >= hi {
        // Numerically all mass fell outside the cutoff; fall back to the point mass.
        let (i, w) = locate(grid, mu);
        out[i][0] = 1.0 - w;
        out[i + 1][0] = w;
        return (i, i + 2);
    }
    (lo, hi)
}

struct Stage {
    dim: usize,
    in_monos: usize,
    /// Highest exponent on `dim` appended to each input monomial.
    pmax: Vec<u8>,
    /// Output offset of each input monomial; outputs are contiguous per input.
    offsets: Vec<usize>,
    out_monos: usize,
}

/// Contraction order for one set of signal-dependent dimensions.
///
/// Tensor axes are permuted so that dimensions whose mean is the same for
/// every signal draw come last; they are contracted once per objective
/// evaluation and only the remaining axes are contracted per draw.
struct Plan {
    /// Original flat index of each permuted position.
    gather: Vec<usize>,
    n_const: usize,
    stages: Vec<Stage>,
    idx_e0: usize,
    idx_e1: Vec<usize>,
    idx_e2: Vec<usize>,
}

impl Plan {
    fn new(shape: &[usize], varying: u64) -> Self {
        let k = shape.len();
        let is_var = |j: usize| varying >> j & 1 == 1;
        let perm: Vec<usize> = (0..k).filter(|&j| is_var(j)).chain((0..k).filter(|&j| !is_var(j))).collect();
        let n_const = perm.iter().filter(|&&j| !is_var(j)).count();

        let total: usize = shape.iter().product();
        let mut gather = vec![0; total];
        let mut idx = vec![0usize; k];
        for g in gather.iter_mut() {
            *g = (0..k).fold(0, |acc, d| acc * shape[d] + idx[d]);
            // Advance the permuted multi-index, innermost permuted axis first.
            for &d in perm.iter().rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }

        let mut monos: Vec<Vec<u8>> = vec![vec![0; k]];
        let mut stages = Vec::with_capacity(k);
        for &dim in perm.iter().rev() {
            let mut next = Vec::new();
            let mut pmax = Vec::with_capacity(monos.len());
            let mut offsets = Vec::with_capacity(monos.len());
            for mono in &monos {
                let deg: u8 = mono.iter().sum();
                offsets.push(next.len());
                pmax.push(2 - deg);
                for p in 0..=(2 - deg) {
                    let mut e = mono.clone();
                    e[dim] = p;
                    next.push(e);
                }
            }
            stages.push(Stage {
                dim,
                in_monos: monos.len(),
                pmax,
                offsets,
                out_monos: next.len(),
            });
            monos = next;
        }
        let find = |e: &[u8]| monos.iter().position(|m| m.as_slice() == e).unwrap();
        let mut e = vec![0u8; k];
        let idx_e0 = find(&e);
        let mut idx_e1 = Vec::with_capacity(k);
        let mut idx_e2 = vec![0; k * k];
        for j in 0..k {
            e[j] += 1;
            idx_e1.push(find(&e));
            for l in 0..k {
                e[l] += 1;
                idx_e2[j * k + l] = find(&e);
                e[l] -= 1;
            }
            e[j] -= 1;
        }
        Self {
            gather,
            n_const,
            stages,
            idx_e0,
            idx_e1,
            idx_e2,
        }
    }
}

fn run_stage(stage: &Stage, m: usize, range: (usize, usize), e: &[[f64; 3]], src: &[f64], dst: &mut Vec<f64>) {
    let n_in = stage.in_monos;
    let n_out = stage.out_monos;
    let prefix = src.len() / (m * n_in);
    dst.clear();
    dst.resize(prefix * n_out, 0.0);
    let (lo, hi) = range;
    for pf in 0..prefix {
        let d = &mut dst[pf * n_out..(pf + 1) * n_out];
        for i in lo..hi {
            let w = &e[i];
            let s = &src[(pf * m + i) * n_in..(pf * m + i + 1) * n_in];
            for a in 0..n_in {
                let v = s[a];
                let o = stage.offsets[a];
                match stage.pmax[a] {
                    0 => d[o] += v * w[0],
                    1 => {
                        d[o] += v * w[0];
                        d[o + 1] += v * w[1];
                    }
                    _ => {
                        d[o] += v * w[0];
                        d[o + 1] += v * w[1];
                        d[o + 2] += v * w[2];
                    }
                }
            }
        }
    }
}

/// Contraction of a row-major tensor against per-dimension hat moments,
/// producing all mixed moments of total degree ≤ 2.
pub(crate) struct Contraction {
    shape: Vec<usize>,
    plans: Vec<Option<Plan>>,
    current: usize,
    moments: Vec<Vec<[f64; 3]>>,
    ranges: Vec<(usize, usize)>,
    base: Vec<f64>,
    buf_a: Vec<f64>,
    buf_b: Vec<f64>,
}

/// `E[h]`, `E[h δ]` and `E[h δ δᵀ]` with `δ = f − μ`.
pub(crate) struct WeightedMoments {
    pub e0: f64,
    pub e1: Vec<f64>,
    /// Row-major `k×k`.
    pub e2: Vec<f64>,
}

impl Contraction {
    pub(crate) fn new(shape: &[usize]) -> Self {
        let k = shape.len();
        assert!(k < 16, "too many factor dimensions for the contraction plan cache");
        let total: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            plans: (0..1usize << k).map(|_| None).collect(),
            current: 0,
            moments: shape.iter().map(|&m| vec![[0.0; 3]; m]).collect(),
            ranges: vec![(0, 0); k],
            base: Vec::with_capacity(total),
            buf_a: Vec::with_capacity(total * 3),
            buf_b: Vec::with_capacity(total * 3),
        }
    }

    /// Contracts the dimensions not flagged in `varying` using their fixed
    /// `mean` and `sd`; later [`evaluate`](Self::evaluate) calls finish the
    /// remaining dimensions.
    pub(crate) fn prepare(&mut self, grids: &[&[f64]], values: &[f64], mean: &[f64], sd: &[f64], varying: u64) {
        let mask = varying as usize & (self.plans.len() - 1);
        if self.plans[mask].is_none() {
            self.plans[mask] = Some(Plan::new(&self.shape, mask as u64));
        }
        self.current = mask;
        let plan = self.plans[mask].as_ref().unwrap();
        self.buf_a.clear();
        self.buf_a.extend(plan.gather.iter().map(|&g| values[g]));
        for stage in &plan.stages[..plan.n_const] {
            let d = stage.dim;
            self.ranges[d] = hat_moments(grids[d], mean[d], sd[d], &mut self.moments[d]);
            run_stage(stage, self.shape[d], self.ranges[d], &self.moments[d], &self.buf_a, &mut self.buf_b);
            std::mem::swap(&mut self.buf_a, &mut self.buf_b);
        }
        self.base.clear();
        self.base.extend_from_slice(&self.buf_a);
    }

    /// Moments for a draw; only the entries of `mean` and `sd` on the
    /// varying dimensions of the last [`prepare`](Self::prepare) are read.
    pub(crate) fn evaluate(&mut self, grids: &[&[f64]], mean: &[f64], sd: &[f64]) -> WeightedMoments {
        let plan = self.plans[self.current].as_ref().unwrap();
        let k = self.shape.len();
        self.buf_a.clear();
        self.buf_a.extend_from_slice(&self.base);
        for stage in &plan.stages[plan.n_const..] {
            let d = stage.dim;
            self.ranges[d] = hat_moments(grids[d], mean[d], sd[d], &mut self.moments[d]);
            run_stage(stage, self.shape[d], self.ranges[d], &self.moments[d], &self.buf_a, &mut self.buf_b);
            std::mem::swap(&mut self.buf_a, &mut self.buf_b);
        }
        let r = &self.buf_a;
        WeightedMoments {
            e0: r[plan.idx_e0],
            e1: plan.idx_e1.iter().map(|&i| r[i]).collect(),
            e2: (0..k * k).map(|i| r[plan.idx_e2[i]]).collect(),
        }
    }

    #[cfg(test)]
    fn full(&mut self, grids: &[&[f64]], values: &[f64], mean: &[f64], sd: &[f64]) -> WeightedMoments {
        self.prepare(grids, values, mean, sd, 0);
        self.evaluate(grids, mean, sd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::interpolate;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hat_moments_partition_of_unity() {
        let grid = [-0.3, -0.1, 0.0, 0.2, 0.5];
        let mut out = [[0.0; 3]; 5];
        for &(mu, sigma) in &[(0.0, 0.1), (0.7, 0.05), (-1.0, 0.5), (0.1, 2.0), (0.05, 1e-4)] {
            hat_moments(&grid, mu, sigma, &mut out);
            let sums: Vec<f64> = (0..3).map(|p| out.iter().map(|o| o[p]).sum()).collect();
            assert_relative_eq!(sums[0], 1.0, epsilon = 1e-13);
            assert!(sums[1].abs() < 1e-13 * (1.0 + sigma));
            assert_relative_eq!(sums[2], sigma * sigma, max_relative = 1e-11);
        }
    }

    /// Simpson integration of φ_i(x)(x − μ)^p against the normal density
    /// (accurate to about 1e-9 because of the kinks).
    fn reference(grid: &[f64], mu: f64, sigma: f64) -> Vec<[f64; 3]> {
        let m = grid.len();
        let lo = mu - 12.0 * sigma;
        let hi = mu + 12.0 * sigma;
        let n = 200_000;
        let h = (hi - lo) / n as f64;
        let mut out = vec![[0.0; 3]; m];
        for s in 0..=n {
            let x = lo + h * s as f64;
            let w = if s == 0 || s == n { 1.0 } else if s % 2 == 1 { 4.0 } else { 2.0 };
            let dens = (-0.5 * ((x - mu) / sigma).powi(2)).exp() / (sigma * (2.0 * PI).sqrt());
            for i in 0..m {
                let mut unit = vec![0.0; m];
                unit[i] = 1.0;
                let phi = interpolate(&unit, &[grid], &[x]);
                for p in 0..3 {
                    out[i][p] += w * h / 3.0 * dens * phi * (x - mu).powi(p as i32);
                }
            }
        }
        out
    }

    #[test]
    fn hat_moments_match_quadrature() {
        let grid = [-0.2, -0.05, 0.1, 0.3];
        for &(mu, sigma) in &[(0.0, 0.1), (0.25, 0.04), (-0.4, 0.15)] {
            let mut out = [[0.0; 3]; 4];
            hat_moments(&grid, mu, sigma, &mut out);
            let r = reference(&grid, mu, sigma);
            for i in 0..4 {
                for p in 0..3 {
                    assert!((out[i][p] - r[i][p]).abs() < 1e-8, "node {i} p {p}: {} vs {}", out[i][p], r[i][p]);
                }
            }
        }
    }

    #[test]
    fn contraction_matches_product_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g0 = [-0.1, 0.0, 0.1];
        let g1 = [-0.2, 0.05, 0.1, 0.3];
        let g2 = [-0.05, 0.05];
        let grids: [&[f64]; 3] = [&g0, &g1, &g2];
        let shape = [3, 4, 2];
        let values: Vec<f64> = (0..24).map(|_| rng.random_range(0.5..1.5)).collect();
        let mean = [0.02, -0.03, 0.01];
        let sd = [0.05, 0.12, 0.03];
        let mut c = Contraction::new(&shape);
        let wm = c.full(&grids, &values, &mean, &sd);

        // Brute force: sum over nodes of value × product of 1-D moments.
        let mut per_dim = Vec::new();
        for j in 0..3 {
            let mut out = vec![[0.0; 3]; shape[j]];
            hat_moments(grids[j], mean[j], sd[j], &mut out);
            per_dim.push(out);
        }
        let moment = |exps: [usize; 3]| {
            let mut acc = 0.0;
            for i0 in 0..3 {
                for i1 in 0..4 {
                    for i2 in 0..2 {
                        let v = values[(i0 * 4 + i1) * 2 + i2];
                        acc += v * per_dim[0][i0][exps[0]] * per_dim[1][i1][exps[1]] * per_dim[2][i2][exps[2]];
                    }
                }
            }
            acc
        };
        assert_relative_eq!(wm.e0, moment([0, 0, 0]), epsilon = 1e-14);
        assert_relative_eq!(wm.e1[1], moment([0, 1, 0]), epsilon = 1e-14);
        assert_relative_eq!(wm.e2[2], moment([1, 0, 1]), epsilon = 1e-14);
        assert_relative_eq!(wm.e2[6], moment([1, 0, 1]), epsilon = 1e-14);
        assert_relative_eq!(wm.e2[4], moment([0, 2, 0]), epsilon = 1e-14);
    }

    #[test]
    fn partial_preparation_matches_full_contraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g: Vec<f64> = (0..5).map(|i| -0.2 + 0.1 * i as f64).collect();
        let grids: [&[f64]; 3] = [&g, &g, &g];
        let values: Vec<f64> = (0..125).map(|_| rng.random_range(0.5..1.5)).collect();
        let mean = [0.03, -0.07, 0.11];
        let sd = [0.05, 0.08, 0.02];
        let mut c = Contraction::new(&[5, 5, 5]);
        let reference = c.full(&grids, &values, &mean, &sd);
        for mask in 0..8u64 {
            c.prepare(&grids, &values, &mean, &sd, mask);
            let wm = c.evaluate(&grids, &mean, &sd);
            assert_relative_eq!(wm.e0, reference.e0, epsilon = 1e-14);
            for j in 0..3 {
                assert_relative_eq!(wm.e1[j], reference.e1[j], epsilon = 1e-14);
            }
            for j in 0..9 {
                assert_relative_eq!(wm.e2[j], reference.e2[j], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn constant_interpolant_gives_gaussian_moments() {
        let g: Vec<f64> = (0..7).map(|i| -0.3 + 0.1 * i as f64).collect();
        let grids: [&[f64]; 2] = [&g, &g];
        let values = vec![2.0; 49];
        let mut c = Contraction::new(&[7, 7]);
        let wm = c.full(&grids, &values, &[0.1, -0.05], &[0.07, 0.2]);
        assert_relative_eq!(wm.e0, 2.0, epsilon = 1e-13);
        assert!(wm.e1.iter().all(|v| v.abs() < 1e-13));
        assert_relative_eq!(wm.e2[0], 2.0 * 0.0049, max_relative = 1e-11);
        assert_relative_eq!(wm.e2[3], 2.0 * 0.04, max_relative = 1e-11);
        assert!(wm.e2[1].abs() < 1e-14);
    }
}
