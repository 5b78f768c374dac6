//! Dynamic mean-variance allocation embedded in the LQ attention problem.

use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::linalg;
use crate::model::LqModel;
use crate::solver::{backward_solve, Moments, SolveMode, SolveOptions, SolvedPolicy};

/// Relative slack when comparing a target against `ρ₀x₀`.
const TARGET_SLACK: f64 = 1e-12;

/// `ρ_t = ∏_{s=t}^{T−1} a_{s+1}` for `t = 0..=T`, with `ρ_T = 1`.
pub fn discount_factors(model: &LqModel) -> Vec<f64> {
    let horizon = model.horizon;
    let mut rho = vec![1.0; horizon + 1];
    for t in (0..horizon).rev() {
        rho[t] = model.a(t) * rho[t + 1];
    }
    rho
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvSpec {
    pub x0: f64,
    pub target_d: f64,
    pub budget0: f64,
    pub f0: Vec<f64>,
    pub discounts: Vec<f64>,
}

impl MvSpec {
    pub fn new(model: &LqModel, x0: f64, target_d: f64, budget0: f64, f0: Vec<f64>) -> Result<Self> {
        model.check_factor_vec(&f0, "f0")?;
        if !(budget0 >= 0.0) {
            return Err(Error::Domain("initial budget must be nonnegative".into()));
        }
        let discounts = discount_factors(model);
        check_target(discounts[0], x0, target_d)?;
        Ok(Self {
            x0,
            target_d,
            budget0,
            f0,
            discounts,
        })
    }

    pub fn rho0(&self) -> f64 {
        self.discounts[0]
    }
}

fn check_target(rho0: f64, x0: f64, d: f64) -> Result<()> {
    let floor = rho0 * x0;
    if d < floor - TARGET_SLACK * floor.abs().max(1.0) {
        return Err(Error::Domain(format!("target {d} is below the risk-free growth ρ₀x₀ = {floor}")));
    }
    Ok(())
}

fn check_h0(h0: f64, rho0: f64) -> Result<()> {
    if !(rho0 * rho0 - h0 > 0.0) {
        return Err(Error::Domain(format!(
            "ρ₀² = {} does not exceed h₀ = {h0}; the model implies zero expected excess return",
            rho0 * rho0
        )));
    }
    Ok(())
}

/// Backward solve with zero running costs and unit terminal weight.
pub fn mv_solve(model: &LqModel, grids: &GridSpec, opts: &SolveOptions) -> Result<SolvedPolicy> {
    let opts = SolveOptions {
        mode: SolveMode::MeanVariance,
        ..opts.clone()
    };
    backward_solve(model, grids, &opts)
}

/// Optimal multiplier `μ* = h₀(ρ₀x₀ − d)/(ρ₀² − h₀)`.
pub fn mu_star(h0: f64, rho0: f64, x0: f64, d: f64) -> Result<f64> {
    check_h0(h0, rho0)?;
    Ok(h0 * (rho0 * x0 - d) / (rho0 * rho0 - h0))
}

/// `u* = −m2⁻¹ m1 a_{t+1} (x_t − (d − μ*)/ρ_t)`.
pub fn mv_control(
    model: &LqModel,
    t: usize,
    x_t: f64,
    moments: &Moments,
    rho_t: f64,
    d: f64,
    mu_star: f64,
) -> Result<DVector<f64>> {
    if t >= model.horizon {
        return Err(Error::Domain(format!("period {t} is beyond the horizon {}", model.horizon)));
    }
    if !(rho_t > 0.0) {
        return Err(Error::Domain("discount factor must be positive".into()));
    }
    let chol = linalg::symmetrize(&moments.m2)
        .cholesky()
        .ok_or_else(|| Error::Numerical(format!("E[h b bᵀ] is singular at period {t}")))?;
    let deviation = x_t - (d - mu_star) / rho_t;
    Ok(-chol.solve(&moments.m1) * (model.a(t) * deviation))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub target_d: f64,
    pub expected_terminal: f64,
    pub variance: f64,
    pub std: f64,
}

/// `Var(x_T) = h₀(d − ρ₀x₀)²/(ρ₀² − h₀)` for each target.
pub fn efficient_frontier(h0: f64, rho0: f64, x0: f64, targets: &[f64]) -> Result<Vec<FrontierPoint>> {
    check_h0(h0, rho0)?;
    targets
        .iter()
        .map(|&d| {
            check_target(rho0, x0, d)?;
            let excess = (d - rho0 * x0).max(0.0);
            let variance = h0 * excess * excess / (rho0 * rho0 - h0);
            Ok(FrontierPoint {
                target_d: d,
                expected_terminal: d,
                variance,
                std: variance.sqrt(),
            })
        })
        .collect()
}

pub fn write_frontier_csv<W: Write>(points: &[FrontierPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}
