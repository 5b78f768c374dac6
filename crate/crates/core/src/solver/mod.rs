//! Backward dynamic programming over the `(Λ, f)` grid.
//!
//! For every period and grid cell the solver minimizes the sample-average
//! objective `g(λ)` over the budget set, tabulates the optimal cost-to-go
//! coefficient `h_t` and allocation `λ*_t`, and hands the interpolated table
//! to the previous period.

mod analytic;
mod backward;
mod objective;
mod optimize;
mod value;

use serde::{Deserialize, Serialize};

pub use backward::{backward_solve, SolveOptions};
pub use objective::{conditional_moments, g_objective, g_objective_with, GEstimate, Moments};
pub use optimize::{
    minimize_on_budget_set, optimize_attention, project_budget_simplex, OptimizeOutcome, OptimizerOptions,
    StartKind,
};
pub use value::{eval_h, eval_lambda_star, CellDiagnostics, PolicyTable, SolvedPolicy, TableMeta, ValueFunction};

/// Which terminal condition and cost blocks the recursion uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMode {
    /// The model's own costs with `h_T = q_T`.
    #[default]
    General,
    /// Zero running costs with `h_T = 1`.
    MeanVariance,
}

/// How the inner expectation over `(f_{t+1}, b_{t+1})` given a signal is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InnerMode {
    /// Sample average over the paired `(ε₂, ε₃)` batch.
    Sampled,
    /// Exact Gaussian integral of the interpolated `h_{t+1}`; needs a
    /// diagonal factor-noise covariance.
    Analytic,
    /// `Analytic` when available, otherwise `Sampled`.
    #[default]
    Auto,
}

impl InnerMode {
    pub(crate) fn resolve(self, diagonal: bool) -> crate::Result<InnerMode> {
        match (self, diagonal) {
            (InnerMode::Auto, true) | (InnerMode::Analytic, true) => Ok(InnerMode::Analytic),
            (InnerMode::Auto, false) | (InnerMode::Sampled, _) => Ok(InnerMode::Sampled),
            (InnerMode::Analytic, false) => Err(crate::Error::Domain(
                "analytic inner expectations need a diagonal factor noise covariance".into(),
            )),
        }
    }
}
