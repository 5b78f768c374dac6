//! Tensor grids over `(Λ, f)` and clamped multilinear interpolation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::LqModel;

/// Half-width of the factor grids in stationary standard deviations.
pub const FACTOR_SPAN_SD: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Ascending budget nodes from 0 to `Λ₀`.
    pub budget_grid: Vec<f64>,
    /// One ascending node list per factor.
    pub factor_grids: Vec<Vec<f64>>,
}

/// Number of factor nodes, shared or per factor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FactorCounts {
    Uniform(usize),
    PerFactor(Vec<usize>),
}

impl FactorCounts {
    fn resolve(&self, k: usize) -> Result<Vec<usize>> {
        let counts = match self {
            FactorCounts::Uniform(m) => vec![*m; k],
            FactorCounts::PerFactor(v) => v.clone(),
        };
        if counts.len() != k {
            return Err(Error::Dimension(format!("{} factor counts for {k} factors", counts.len())));
        }
        if counts.iter().any(|&m| m < 2) {
            return Err(Error::Domain("factor grids need at least 2 nodes".into()));
        }
        Ok(counts)
    }
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite()) && v.windows(2).all(|w| w[0] < w[1])
}

impl GridSpec {
    pub fn new(budget_grid: Vec<f64>, factor_grids: Vec<Vec<f64>>) -> Result<Self> {
        if budget_grid.is_empty() || budget_grid[0] != 0.0 || !strictly_increasing(&budget_grid) {
            return Err(Error::invalid("grid", "budget grid must start at 0 and be strictly increasing"));
        }
        if factor_grids.is_empty() {
            return Err(Error::invalid("grid", "need at least one factor grid"));
        }
        for (j, g) in factor_grids.iter().enumerate() {
            if g.is_empty() || !strictly_increasing(g) {
                return Err(Error::invalid("grid", format!("factor grid {j} must be strictly increasing")));
            }
        }
        Ok(Self {
            budget_grid,
            factor_grids,
        })
    }

    pub fn budget0(&self) -> f64 {
        *self.budget_grid.last().unwrap()
    }

    pub fn n_budget(&self) -> usize {
        self.budget_grid.len()
    }

    pub fn n_factors(&self) -> usize {
        self.factor_grids.len()
    }

    pub fn factor_shape(&self) -> Vec<usize> {
        self.factor_grids.iter().map(Vec::len).collect()
    }

    /// Number of factor nodes `M₁ × … × M_k`.
    pub fn n_factor_nodes(&self) -> usize {
        self.factor_grids.iter().map(Vec::len).product()
    }

    pub fn n_cells(&self) -> usize {
        self.n_budget() * self.n_factor_nodes()
    }

    /// Row-major multi-index of a flat factor-node index.
    pub fn unflatten(&self, mut flat: usize) -> Vec<usize> {
        let shape = self.factor_shape();
        let mut idx = vec![0; shape.len()];
        for d in (0..shape.len()).rev() {
            idx[d] = flat % shape[d];
            flat /= shape[d];
        }
        idx
    }

    pub fn flatten(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(self.factor_grids.iter())
            .fold(0, |acc, (&i, g)| acc * g.len() + i)
    }

    pub fn factor_node(&self, flat: usize) -> Vec<f64> {
        self.unflatten(flat)
            .iter()
            .zip(self.factor_grids.iter())
            .map(|(&i, g)| g[i])
            .collect()
    }

    /// Flat cell index, budget-major.
    pub fn cell_index(&self, budget_idx: usize, factor_flat: usize) -> usize {
        budget_idx * self.n_factor_nodes() + factor_flat
    }

    /// Factor-node index of the node nearest to the grid centre.
    pub fn center_node(&self) -> usize {
        let idx: Vec<usize> = self.factor_grids.iter().map(|g| (g.len() - 1) / 2).collect();
        self.flatten(&idx)
    }
}

/// Stationary covariance solving `Σ = (I − Φ) Σ (I − Φ)ᵀ + Σ_η`.
pub fn stationary_factor_cov(model: &LqModel) -> Result<DMatrix<f64>> {
    let g = model.transition();
    let rho = linalg::spectral_radius(g);
    if !(rho < 1.0) {
        return Err(Error::Domain(format!(
            "spectral radius of I - Phi is {rho:.6} >= 1; supply explicit factor bounds"
        )));
    }
    // Doubling: Σ_{2m} = Σ_m + Gᵐ Σ_m (Gᵐ)ᵀ.
    let mut sigma = model.factor_noise_cov.clone();
    let mut power = g.clone();
    for _ in 0..200 {
        let incr = &power * &sigma * power.transpose();
        sigma += &incr;
        if incr.abs().max() < 1e-12 * (1.0 + sigma.abs().max()) {
            return Ok(linalg::symmetrize(&sigma));
        }
        power = &power * &power;
    }
    Err(Error::Numerical("stationary covariance iteration did not converge".into()))
}

fn uniform(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let step = (hi - lo) / (count - 1) as f64;
    (0..count)
        .map(|i| if i + 1 == count { hi } else { lo + step * i as f64 })
        .collect()
}

fn budget_nodes(budget0: f64, n_budget: usize) -> Result<Vec<f64>> {
    if !(budget0 >= 0.0 && budget0.is_finite()) {
        return Err(Error::Domain(format!("initial budget {budget0} must be finite and nonnegative")));
    }
    if budget0 == 0.0 {
        return Ok(vec![0.0]);
    }
    if n_budget < 2 {
        return Err(Error::Domain("budget grid needs at least 2 nodes when the budget is positive".into()));
    }
    Ok(uniform(0.0, budget0, n_budget))
}

/// Uniform budget grid on `[0, Λ₀]` and factor grids spanning the stationary
/// mean (zero) plus or minus three stationary standard deviations.
///
/// A zero budget collapses the budget grid to the single node `{0}`.
pub fn build_grids(model: &LqModel, budget0: f64, n_budget: usize, counts: &FactorCounts) -> Result<GridSpec> {
    let counts = counts.resolve(model.n_factors)?;
    let budget = budget_nodes(budget0, n_budget)?;
    let sigma = stationary_factor_cov(model)?;
    let factor_grids = counts
        .iter()
        .enumerate()
        .map(|(j, &m)| {
            let half = FACTOR_SPAN_SD * sigma[(j, j)].sqrt();
            uniform(-half, half, m)
        })
        .collect();
    GridSpec::new(budget, factor_grids)
}

/// Grids with caller-supplied factor bounds.
pub fn build_grids_with_bounds(
    budget0: f64,
    n_budget: usize,
    bounds: &[(f64, f64)],
    counts: &FactorCounts,
) -> Result<GridSpec> {
    let counts = counts.resolve(bounds.len())?;
    let budget = budget_nodes(budget0, n_budget)?;
    let mut factor_grids = Vec::with_capacity(bounds.len());
    for (&(lo, hi), &m) in bounds.iter().zip(counts.iter()) {
        if !(lo < hi) {
            return Err(Error::Domain(format!("factor bounds ({lo}, {hi}) are not increasing")));
        }
        factor_grids.push(uniform(lo, hi, m));
    }
    GridSpec::new(budget, factor_grids)
}

/// Lower node index and weight of the upper node, clamped to the grid hull.
pub(crate) fn locate(grid: &[f64], x: f64) -> (usize, f64) {
    let m = grid.len();
    if m == 1 || x <= grid[0] {
        return (0, 0.0);
    }
    if x >= grid[m - 1] {
        return (m - 2, 1.0);
    }
    // partition_point gives the first node > x.
    let hi = grid.partition_point(|&g| g <= x).min(m - 1);
    let lo = hi - 1;
    let w = (x - grid[lo]) / (grid[hi] - grid[lo]);
    (lo, w)
}

/// Clamped multilinear interpolation of a row-major tensor.
pub(crate) fn interpolate(values: &[f64], grids: &[&[f64]], point: &[f64]) -> f64 {
    let d = grids.len();
    debug_assert_eq!(point.len(), d);
    let mut lo = [0usize; 8];
    let mut w = [0.0f64; 8];
    let mut lo_v = vec![0usize; if d > 8 { d } else { 0 }];
    let mut w_v = vec![0.0f64; if d > 8 { d } else { 0 }];
    let (lo, w): (&mut [usize], &mut [f64]) = if d <= 8 {
        (&mut lo[..d], &mut w[..d])
    } else {
        (&mut lo_v[..], &mut w_v[..])
    };
    for j in 0..d {
        let (i, wj) = locate(grids[j], point[j]);
        lo[j] = i;
        w[j] = wj;
    }
    let mut acc = 0.0;
    for corner in 0..(1usize << d) {
        let mut weight = 1.0;
        let mut flat = 0usize;
        let mut skip = false;
        for j in 0..d {
            let up = (corner >> j) & 1 == 1;
            let wj = if up { w[j] } else { 1.0 - w[j] };
            if wj == 0.0 {
                skip = true;
                break;
            }
            weight *= wj;
            let idx = lo[j] + usize::from(up);
            flat = flat * grids[j].len() + idx;
        }
        if !skip {
            acc += weight * values[flat];
        }
    }
    acc
}
