use serde::{Deserialize, Serialize};

use super::optimize::{project_budget_simplex, OptimizerOptions, StartKind};
use super::{InnerMode, SolveMode};
use crate::error::{Error, Result};
use crate::grid::{interpolate, locate, GridSpec};

/// Per-cell optimizer record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDiagnostics {
    pub iterations: usize,
    pub evaluations: usize,
    /// Which multistart produced the winner.
    pub start: StartKind,
    /// Objective at `λ = 0`.
    pub g_zero: f64,
    /// Objective at the uniform split `Λ/k`.
    pub g_uniform: f64,
}

/// Solver settings recorded with every table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableMeta {
    pub seed: u64,
    pub samples: usize,
    pub mode: SolveMode,
    pub inner: InnerMode,
    pub optimizer: OptimizerOptions,
}

/// Tabulated `h_t` and `λ*_t` over the `(Λ, f)` grid of one period.
///
/// Flat arrays are row-major with the budget index outermost, followed by
/// the factor indices in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    pub period: usize,
    #[serde(flatten)]
    pub grid: GridSpec,
    pub h: Vec<f64>,
    /// `k` entries per cell.
    pub lambda_star: Vec<f64>,
    /// Monte-Carlo standard error of each `h` over the outer signal draws.
    pub std_err: Vec<f64>,
    pub diagnostics: Vec<CellDiagnostics>,
    #[serde(flatten)]
    pub meta: TableMeta,
}

impl PolicyTable {
    pub fn n_factors(&self) -> usize {
        self.grid.n_factors()
    }

    pub fn lambda_at(&self, cell: usize) -> &[f64] {
        let k = self.n_factors();
        &self.lambda_star[cell * k..(cell + 1) * k]
    }

    /// Checks shapes, positivity of `h` and feasibility of every `λ*`.
    pub fn validate(&self) -> Result<()> {
        let g = GridSpec::new(self.grid.budget_grid.clone(), self.grid.factor_grids.clone())?;
        let cells = g.n_cells();
        let k = g.n_factors();
        if self.h.len() != cells || self.std_err.len() != cells || self.lambda_star.len() != cells * k {
            return Err(Error::invalid("policy table", format!("array lengths do not match {cells} cells")));
        }
        if !self.diagnostics.is_empty() && self.diagnostics.len() != cells {
            return Err(Error::invalid("policy table", "diagnostics length does not match the cell count"));
        }
        if let Some(c) = self.h.iter().position(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::invalid("policy table", format!("h at cell {c} is not positive")));
        }
        let nf = g.n_factor_nodes();
        for cell in 0..cells {
            let budget = g.budget_grid[cell / nf];
            let lam = self.lambda_at(cell);
            let total: f64 = lam.iter().sum();
            if lam.iter().any(|&l| !(l >= 0.0)) || total > budget + 1e-9 {
                return Err(Error::invalid("policy table", format!("lambda at cell {cell} is infeasible")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: PolicyTable = serde_json::from_str(s)?;
        t.validate()?;
        Ok(t)
    }

    /// Factor-only slice of `h` at a budget, linearly blended between the two
    /// bracketing budget nodes.
    pub(crate) fn budget_slice(&self, budget: f64, out: &mut Vec<f64>) {
        let nf = self.grid.n_factor_nodes();
        let (j, w) = locate(&self.grid.budget_grid, budget);
        out.clear();
        let lo = &self.h[j * nf..(j + 1) * nf];
        if w == 0.0 {
            out.extend_from_slice(lo);
        } else {
            let hi = &self.h[(j + 1) * nf..(j + 2) * nf];
            out.extend(lo.iter().zip(hi).map(|(a, b)| (1.0 - w) * a + w * b));
        }
    }

    fn full_grids(&self) -> Vec<&[f64]> {
        std::iter::once(self.grid.budget_grid.as_slice())
            .chain(self.grid.factor_grids.iter().map(Vec::as_slice))
            .collect()
    }
}

/// Multilinear interpolation of `h` at `(budget, f)`, clamped to the grid hull.
pub fn eval_h(table: &PolicyTable, budget: f64, f: &[f64]) -> f64 {
    let mut point = Vec::with_capacity(f.len() + 1);
    point.push(budget);
    point.extend_from_slice(f);
    interpolate(&table.h, &table.full_grids(), &point)
}

/// Interpolated `λ*` projected onto `{λ ≥ 0, Σλ ≤ budget}`.
pub fn eval_lambda_star(table: &PolicyTable, budget: f64, f: &[f64]) -> Vec<f64> {
    let k = table.n_factors();
    let grids = table.full_grids();
    let cells = table.grid.n_cells();
    let mut point = Vec::with_capacity(k + 1);
    point.push(budget);
    point.extend_from_slice(f);
    let mut comp = vec![0.0; cells];
    let raw: Vec<f64> = (0..k)
        .map(|j| {
            for (c, v) in comp.iter_mut().enumerate() {
                *v = table.lambda_star[c * k + j];
            }
            interpolate(&comp, &grids, &point)
        })
        .collect();
    project_budget_simplex(&raw, budget.max(0.0))
}

/// `h_{t+1}`: the terminal constant or an interpolated table.
#[derive(Debug, Clone, Copy)]
pub enum ValueFunction<'a> {
    Terminal(f64),
    Table(&'a PolicyTable),
}

impl ValueFunction<'_> {
    pub fn eval(&self, budget: f64, f: &[f64]) -> f64 {
        match self {
            ValueFunction::Terminal(q) => *q,
            ValueFunction::Table(t) => eval_h(t, budget, f),
        }
    }
}

/// All period tables of one solve, indexed by period.
#[derive(Debug, Clone, PartialEq)]
pub struct SolvedPolicy {
    pub mode: SolveMode,
    /// `h_T`.
    pub terminal: f64,
    pub tables: Vec<PolicyTable>,
}

impl SolvedPolicy {
    pub fn horizon(&self) -> usize {
        self.tables.len()
    }

    /// `h_t`; `t = T` gives the terminal constant.
    pub fn value_function(&self, t: usize) -> ValueFunction<'_> {
        if t >= self.tables.len() {
            ValueFunction::Terminal(self.terminal)
        } else {
            ValueFunction::Table(&self.tables[t])
        }
    }

    /// `h_0(Λ, f)`.
    pub fn h0(&self, budget: f64, f: &[f64]) -> f64 {
        self.value_function(0).eval(budget, f)
    }

    /// Reassembles a policy from tables in any order.
    pub fn from_tables(mut tables: Vec<PolicyTable>, terminal: f64) -> Result<Self> {
        if tables.is_empty() {
            return Err(Error::invalid("policy", "no tables"));
        }
        tables.sort_by_key(|t| t.period);
        for (t, table) in tables.iter().enumerate() {
            if table.period != t {
                return Err(Error::invalid("policy", format!("missing table for period {t}")));
            }
            if table.grid != tables[0].grid || table.meta.mode != tables[0].meta.mode {
                return Err(Error::invalid("policy", "tables disagree on grid or mode"));
            }
        }
        Ok(Self {
            mode: tables[0].meta.mode,
            terminal,
            tables,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn toy_table() -> PolicyTable {
        let grid = GridSpec::new(vec![0.0, 1.0], vec![vec![-1.0, 0.0, 1.0]]).unwrap();
        PolicyTable {
            period: 0,
            grid,
            h: vec![1.0, 0.9, 1.0, 0.8, 0.7, 0.6],
            lambda_star: vec![0.0, 0.0, 0.0, 1.0, 0.5, 0.0],
            std_err: vec![0.0; 6],
            diagnostics: vec![],
            meta: TableMeta {
                seed: 1,
                samples: 10,
                mode: SolveMode::General,
                inner: InnerMode::Sampled,
                optimizer: OptimizerOptions::default(),
            },
        }
    }

    #[test]
    fn interpolation_contract() {
        let t = toy_table();
        assert_eq!(eval_h(&t, 1.0, &[0.0]), 0.7);
        assert_relative_eq!(eval_h(&t, 0.5, &[0.0]), 0.8, epsilon = 1e-15);
        assert_relative_eq!(eval_h(&t, 1.0, &[0.5]), 0.65, epsilon = 1e-15);
        assert_eq!(eval_h(&t, 7.0, &[-3.0]), 0.8);
        assert_eq!(eval_lambda_star(&t, 1.0, &[-1.0]), vec![1.0]);
        assert_relative_eq!(eval_lambda_star(&t, 0.5, &[-1.0])[0], 0.5, epsilon = 1e-15);
        // Blending along the budget axis keeps λ within the query budget.
        assert_relative_eq!(eval_lambda_star(&t, 0.2, &[-1.0])[0], 0.2, epsilon = 1e-15);
        assert_eq!(eval_lambda_star(&t, -0.5, &[-1.0]), vec![0.0]);
    }

    #[test]
    fn json_roundtrip_and_validation() {
        let t = toy_table();
        let s = t.to_json().unwrap();
        assert_eq!(PolicyTable::from_json(&s).unwrap(), t);
        let mut bad = t.clone();
        bad.h[2] = -1.0;
        assert!(PolicyTable::from_json(&bad.to_json().unwrap()).is_err());
        let mut bad = t.clone();
        bad.lambda_star[0] = 0.1;
        assert!(PolicyTable::from_json(&bad.to_json().unwrap()).is_err());
        let mut bad = t;
        bad.h.pop();
        assert!(PolicyTable::from_json(&bad.to_json().unwrap()).is_err());
    }

    #[test]
    fn terminal_value_function() {
        let p = SolvedPolicy::from_tables(vec![toy_table()], 1.5).unwrap();
        assert_eq!(p.value_function(1).eval(0.3, &[2.0]), 1.5);
        assert_eq!(p.h0(1.0, &[1.0]), 0.6);
    }
}
