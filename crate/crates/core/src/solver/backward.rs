use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::objective::CellObjective;
use super::optimize::{minimize_on_budget_set, OptimizerOptions};
use super::value::{CellDiagnostics, PolicyTable, SolvedPolicy, TableMeta, ValueFunction};
use super::{InnerMode, SolveMode};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::model::LqModel;
use crate::sampler::draw_batch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveOptions {
    /// Batch size `L`, shared by the outer signal and inner draws.
    pub samples: usize,
    pub base_seed: u64,
    pub mode: SolveMode,
    pub inner: InnerMode,
    pub optimizer: OptimizerOptions,
    /// Worker threads; `None` uses the global pool. Never changes results.
    #[serde(skip)]
    pub threads: Option<usize>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            samples: 2000,
            base_seed: 0,
            mode: SolveMode::General,
            inner: InnerMode::Auto,
            optimizer: OptimizerOptions::default(),
            threads: None,
        }
    }
}

struct CellResult {
    lambda: Vec<f64>,
    h: f64,
    std_err: f64,
    diag: CellDiagnostics,
}

/// Runs the backward recursion from `t = T − 1` down to `0`.
///
/// In mean-variance mode the running costs are replaced by zero and the
/// terminal weight by one. Cell `(t, j, i)` draws its batch from stream key
/// `(t, j, i)`, so tables do not depend on the number of worker threads.
pub fn backward_solve(model: &LqModel, grids: &GridSpec, opts: &SolveOptions) -> Result<SolvedPolicy> {
    if opts.samples == 0 {
        return Err(Error::Domain("batch size L must be at least 1".into()));
    }
    if grids.n_factors() != model.n_factors {
        return Err(Error::Dimension(format!(
            "grid has {} factor axes, model has {} factors",
            grids.n_factors(),
            model.n_factors
        )));
    }
    // Fail early rather than inside a worker.
    opts.inner.resolve(model.factor_noise_is_diagonal())?;
    let effective = match opts.mode {
        SolveMode::General => model.clone(),
        SolveMode::MeanVariance => model.mean_variance_embedding(),
    };
    match opts.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Numerical(format!("thread pool: {e}")))?;
            pool.install(|| solve_all(&effective, grids, opts))
        }
        None => solve_all(&effective, grids, opts),
    }
}

fn solve_all(model: &LqModel, grids: &GridSpec, opts: &SolveOptions) -> Result<SolvedPolicy> {
    let horizon = model.horizon;
    let mut tables: Vec<PolicyTable> = Vec::with_capacity(horizon);
    for t in (0..horizon).rev() {
        let started = Instant::now();
        let h_next = match tables.last() {
            Some(tab) => ValueFunction::Table(tab),
            None => ValueFunction::Terminal(model.terminal_q),
        };
        let table = solve_period(model, t, grids, h_next, opts)?;
        log::info!(
            "period {t}: {} cells in {:.1}s, h range [{:.6}, {:.6}]",
            table.h.len(),
            started.elapsed().as_secs_f64(),
            table.h.iter().copied().fold(f64::INFINITY, f64::min),
            table.h.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        );
        tables.push(table);
    }
    tables.reverse();
    Ok(SolvedPolicy {
        mode: opts.mode,
        terminal: model.terminal_q,
        tables,
    })
}

fn solve_period(
    model: &LqModel,
    t: usize,
    grids: &GridSpec,
    h_next: ValueFunction,
    opts: &SolveOptions,
) -> Result<PolicyTable> {
    let nf = grids.n_factor_nodes();
    let nb = grids.n_budget();
    let k = model.n_factors;
    let columns: Vec<Vec<CellResult>> = (0..nf)
        .into_par_iter()
        .map(|i| solve_column(model, t, grids, i, h_next, opts))
        .collect::<Result<_>>()?;

    let cells = grids.n_cells();
    let mut h = vec![0.0; cells];
    let mut std_err = vec![0.0; cells];
    let mut lambda_star = vec![0.0; cells * k];
    let mut diagnostics: Vec<Option<CellDiagnostics>> = vec![None; cells];
    for (i, column) in columns.into_iter().enumerate() {
        for (j, r) in column.into_iter().enumerate() {
            let cell = grids.cell_index(j, i);
            if !(r.h > 0.0 && r.h.is_finite()) {
                return Err(Error::Numerical(format!(
                    "period {t}: non-positive h = {} at budget {} and factors {:?}; L may be too small",
                    r.h,
                    grids.budget_grid[j],
                    grids.factor_node(i)
                )));
            }
            h[cell] = r.h;
            std_err[cell] = r.std_err;
            lambda_star[cell * k..(cell + 1) * k].copy_from_slice(&r.lambda);
            diagnostics[cell] = Some(r.diag);
        }
    }
    debug_assert_eq!(nb * nf, cells);
    Ok(PolicyTable {
        period: t,
        grid: grids.clone(),
        h,
        lambda_star,
        std_err,
        diagnostics: diagnostics.into_iter().map(Option::unwrap).collect(),
        meta: TableMeta {
            seed: opts.base_seed,
            samples: opts.samples,
            mode: opts.mode,
            inner: opts.inner,
            optimizer: opts.optimizer.clone(),
        },
    })
}

/// All budget nodes at one factor node, in increasing budget so each cell
/// can warm-start from its predecessor.
fn solve_column(
    model: &LqModel,
    t: usize,
    grids: &GridSpec,
    i: usize,
    h_next: ValueFunction,
    opts: &SolveOptions,
) -> Result<Vec<CellResult>> {
    let f = grids.factor_node(i);
    let locate = |j: usize, e: Error| match e {
        Error::Numerical(msg) => Error::Numerical(format!("period {t}, budget node {j}, factor node {i}: {msg}")),
        other => other,
    };
    let mut out: Vec<CellResult> = Vec::with_capacity(grids.n_budget());
    for (j, &budget) in grids.budget_grid.iter().enumerate() {
        let key = [t as u64, j as u64, i as u64];
        let batch = draw_batch(opts.base_seed, &key, opts.samples, model.n_factors, model.n_assets)?;
        let mut cell = CellObjective::new(model, t, budget, &f, h_next, &batch, opts.inner)?;
        let warm = out.last().map(|r| r.lambda.clone());
        let outcome = minimize_on_budget_set(
            model.n_factors,
            cell.budget(),
            |l| Ok(cell.eval(l)?.value),
            &opts.optimizer,
            warm.as_deref(),
            &batch.seed_spec.child(&[4]),
        )
        .map_err(|e| locate(j, e))?;
        let est = cell.eval(&outcome.lambda).map_err(|e| locate(j, e))?;
        out.push(CellResult {
            lambda: outcome.lambda,
            h: outcome.value,
            std_err: est.std_err,
            diag: CellDiagnostics {
                iterations: outcome.iterations,
                evaluations: outcome.evaluations,
                start: outcome.start,
                g_zero: outcome.g_zero,
                g_uniform: outcome.g_uniform,
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grids, FactorCounts};
    use crate::model::testing::*;

    fn small_opts(inner: InnerMode) -> SolveOptions {
        SolveOptions {
            samples: 200,
            base_seed: 42,
            inner,
            ..SolveOptions::default()
        }
    }

    #[test]
    fn tables_are_positive_feasible_and_deterministic() {
        let m = scalar_model(2, 1.0036, 0.3, 0.04, 0.69);
        let g = build_grids(&m, 1.0, 3, &FactorCounts::Uniform(3)).unwrap();
        let a = backward_solve(&m, &g, &small_opts(InnerMode::Analytic)).unwrap();
        assert_eq!(a.tables.len(), 2);
        for (t, tab) in a.tables.iter().enumerate() {
            assert_eq!(tab.period, t);
            tab.validate().unwrap();
            for (c, d) in tab.diagnostics.iter().enumerate() {
                assert!(tab.h[c] <= d.g_zero + 1e-9 && tab.h[c] <= d.g_uniform + 1e-9);
            }
        }
        let mut threaded = small_opts(InnerMode::Analytic);
        threaded.threads = Some(2);
        let b = backward_solve(&m, &g, &threaded).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tables[0].to_json().unwrap(), b.tables[0].to_json().unwrap());
    }

    #[test]
    fn zero_budget_gives_zero_attention() {
        let m = scalar_model(2, 1.0036, 0.3, 0.04, 0.69);
        let g = build_grids(&m, 0.0, 13, &FactorCounts::Uniform(3)).unwrap();
        let p = backward_solve(&m, &g, &small_opts(InnerMode::Sampled)).unwrap();
        for tab in &p.tables {
            assert!(tab.lambda_star.iter().all(|&l| l == 0.0));
        }
    }

    #[test]
    fn mean_variance_values_stay_below_discount_squared() {
        let m = scalar_model(2, 1.0036, 0.3, 0.04, 0.69);
        let g = build_grids(&m, 1.0, 3, &FactorCounts::Uniform(3)).unwrap();
        let mut opts = small_opts(InnerMode::Analytic);
        opts.mode = SolveMode::MeanVariance;
        let p = backward_solve(&m, &g, &opts).unwrap();
        assert_eq!(p.terminal, 1.0);
        let rho = [1.0036f64 * 1.0036, 1.0036];
        for (t, tab) in p.tables.iter().enumerate() {
            assert!(tab.h.iter().all(|&h| h > 0.0 && h < rho[t] * rho[t]));
        }
    }

    #[test]
    fn grid_dimension_mismatch_is_rejected() {
        let m = scalar_model(1, 1.0036, 0.3, 0.04, 0.69);
        let g = GridSpec::new(vec![0.0, 1.0], vec![vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(backward_solve(&m, &g, &SolveOptions::default()), Err(Error::Dimension(_))));
    }
}
