use rand::Rng;
use serde::{Deserialize, Serialize};

use super::objective::CellObjective;
use super::value::ValueFunction;
use super::InnerMode;
use crate::error::{Error, Result};
use crate::model::LqModel;
use crate::sampler::{SampleBatch, SeedSpec};

/// Objectives closer than this are treated as ties.
const TIE_TOL: f64 = 1e-12;
const ARMIJO_C: f64 = 1e-4;

/// Multistart projected-gradient settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerOptions {
    /// Finite-difference step per coordinate.
    pub fd_step: f64,
    /// Stop when the projected-gradient norm falls below this.
    pub tol: f64,
    pub max_iter: usize,
    pub max_backtracks: usize,
    pub random_starts: usize,
    /// Descend only from this many best starts; `None` descends from all.
    pub descend_top: Option<usize>,
    /// Seed an extra start from the neighbouring budget node's solution.
    pub warm_start: bool,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            fd_step: 1e-4,
            tol: 1e-6,
            max_iter: 500,
            max_backtracks: 30,
            random_starts: 2,
            descend_top: None,
            warm_start: true,
        }
    }
}

impl OptimizerOptions {
    /// Cheaper preset for large grids: every start is evaluated but only the
    /// best one is refined, for a few iterations.
    pub fn fast() -> Self {
        Self {
            max_iter: 4,
            max_backtracks: 6,
            descend_top: Some(1),
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.fd_step > 0.0) || !(self.tol >= 0.0) {
            return Err(Error::invalid("optimizer options", "fd_step must be positive and tol nonnegative"));
        }
        if self.descend_top == Some(0) {
            return Err(Error::invalid("optimizer options", "descend_top must be at least 1"));
        }
        Ok(())
    }
}

/// Origin of the winning allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartKind {
    Zero,
    Uniform,
    Corner(usize),
    Random(usize),
    Warm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOutcome {
    pub lambda: Vec<f64>,
    pub value: f64,
    pub start: StartKind,
    /// Projected-gradient iterations summed over all descents.
    pub iterations: usize,
    pub evaluations: usize,
    pub g_zero: f64,
    pub g_uniform: f64,
}

/// Euclidean projection onto `{λ ≥ 0, Σλ ≤ budget}`.
pub fn project_budget_simplex(v: &[f64], budget: f64) -> Vec<f64> {
    if !(budget > 0.0) {
        return vec![0.0; v.len()];
    }
    let w: Vec<f64> = v.iter().map(|&x| x.max(0.0)).collect();
    let total: f64 = w.iter().sum();
    if total <= budget {
        return w;
    }
    let mut u = w.clone();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut tau = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        acc += uj;
        let cand = (acc - budget) / (j + 1) as f64;
        if uj - cand > 0.0 {
            tau = cand;
        } else {
            break;
        }
    }
    w.iter().map(|&x| (x - tau).max(0.0)).collect()
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// True when `(va, a)` beats `(vb, b)`: lower objective, then smaller ℓ1
/// norm, then lexicographically smaller.
fn better(va: f64, a: &[f64], vb: f64, b: &[f64]) -> bool {
    if va < vb - TIE_TOL {
        return true;
    }
    if va > vb + TIE_TOL {
        return false;
    }
    let (na, nb) = (l1(a), l1(b));
    if na != nb {
        return na < nb;
    }
    a.iter().zip(b).find(|(x, y)| x != y).is_some_and(|(x, y)| x < y)
}

fn random_feasible(rng: &mut impl Rng, k: usize, budget: f64) -> Vec<f64> {
    // Dirichlet(1, …, 1) over k + 1 parts, the last being unused slack.
    let e: Vec<f64> = (0..=k).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    e[..k].iter().map(|x| budget * x / s).collect()
}

struct Counter<F> {
    f: F,
    evaluations: usize,
}

impl<F: FnMut(&[f64]) -> Result<f64>> Counter<F> {
    fn call(&mut self, x: &[f64]) -> Result<f64> {
        self.evaluations += 1;
        let v = (self.f)(x)?;
        if !v.is_finite() {
            return Err(Error::Numerical(format!("objective is not finite at {x:?}")));
        }
        Ok(v)
    }
}

fn fd_gradient<F: FnMut(&[f64]) -> Result<f64>>(
    f: &mut Counter<F>,
    x: &[f64],
    fx: f64,
    budget: f64,
    h: f64,
) -> Result<Vec<f64>> {
    let total: f64 = x.iter().sum();
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for j in 0..x.len() {
        let fwd_ok = total + h <= budget + 1e-12;
        let bwd_ok = x[j] >= h;
        let xj = x[j];
        grad[j] = if fwd_ok && bwd_ok {
            probe[j] = xj + h;
            let up = f.call(&probe)?;
            probe[j] = xj - h;
            let dn = f.call(&probe)?;
            (up - dn) / (2.0 * h)
        } else if bwd_ok {
            probe[j] = xj - h;
            (fx - f.call(&probe)?) / h
        } else {
            // Forward probe; past the budget face the objective clamps the
            // remaining budget at zero.
            probe[j] = xj + h;
            (f.call(&probe)? - fx) / h
        };
        probe[j] = xj;
    }
    Ok(grad)
}

fn descend<F: FnMut(&[f64]) -> Result<f64>>(
    f: &mut Counter<F>,
    x0: Vec<f64>,
    f0: f64,
    budget: f64,
    opts: &OptimizerOptions,
) -> Result<(Vec<f64>, f64, usize)> {
    let mut x = x0;
    let mut fx = f0;
    let mut alpha: Option<f64> = None;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    for it in 0..opts.max_iter {
        let g = fd_gradient(f, &x, fx, budget, opts.fd_step)?;
        let unit: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - b).collect();
        let pg: f64 = project_budget_simplex(&unit, budget)
            .iter()
            .zip(&x)
            .map(|(p, a)| (p - a).powi(2))
            .sum::<f64>()
            .sqrt();
        if pg < opts.tol {
            return Ok((x, fx, it));
        }
        if let Some((xp, gp)) = &prev {
            let (mut ss, mut sy) = (0.0, 0.0);
            for j in 0..x.len() {
                let s = x[j] - xp[j];
                ss += s * s;
                sy += s * (g[j] - gp[j]);
            }
            if sy > 0.0 {
                alpha = Some(ss / sy);
            }
        }
        let gmax = g.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let cap = budget / gmax;
        let mut a = alpha.unwrap_or(0.25 * cap).min(cap);
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let trial: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - a * gi).collect();
            let y = project_budget_simplex(&trial, budget);
            let decrease: f64 = y.iter().zip(&x).zip(&g).map(|((yi, xi), gi)| gi * (yi - xi)).sum();
            if y.iter().zip(&x).all(|(yi, xi)| (yi - xi).abs() < 1e-15) {
                break;
            }
            let fy = f.call(&y)?;
            if fy <= fx + ARMIJO_C * decrease {
                accepted = Some((y, fy));
                break;
            }
            a *= 0.5;
        }
        let Some((y, fy)) = accepted else {
            return Ok((x, fx, it + 1));
        };
        prev = Some((std::mem::replace(&mut x, y), g));
        fx = fy;
        alpha = Some(a);
    }
    Ok((x, fx, opts.max_iter))
}

/// Multistart projected gradient descent of `objective` over
/// `{λ ∈ ℝᵏ₊, Σλ ≤ budget}`.
pub fn minimize_on_budget_set<F>(
    k: usize,
    budget: f64,
    objective: F,
    opts: &OptimizerOptions,
    warm_start: Option<&[f64]>,
    seed: &SeedSpec,
) -> Result<OptimizeOutcome>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    opts.validate()?;
    if !(budget >= 0.0 && budget.is_finite()) {
        return Err(Error::Domain(format!("budget {budget} must be finite and nonnegative")));
    }
    let mut f = Counter {
        f: objective,
        evaluations: 0,
    };
    let zero = vec![0.0; k];
    let g_zero = f.call(&zero)?;
    if budget == 0.0 {
        return Ok(OptimizeOutcome {
            lambda: zero,
            value: g_zero,
            start: StartKind::Zero,
            iterations: 0,
            evaluations: f.evaluations,
            g_zero,
            g_uniform: g_zero,
        });
    }

    let mut starts: Vec<(StartKind, Vec<f64>)> = vec![(StartKind::Zero, zero)];
    starts.push((StartKind::Uniform, vec![budget / k as f64; k]));
    for j in 0..k {
        let mut e = vec![0.0; k];
        e[j] = budget;
        starts.push((StartKind::Corner(j), e));
    }
    let mut rng = seed.rng();
    for r in 0..opts.random_starts {
        starts.push((StartKind::Random(r), random_feasible(&mut rng, k, budget)));
    }
    if opts.warm_start {
        if let Some(w) = warm_start {
            if w.len() != k {
                return Err(Error::Dimension("warm start has the wrong length".into()));
            }
            starts.push((StartKind::Warm, project_budget_simplex(w, budget)));
        }
    }
    let mut unique: Vec<(StartKind, Vec<f64>)> = Vec::with_capacity(starts.len());
    for (kind, x) in starts {
        if !unique.iter().any(|(_, u)| *u == x) {
            unique.push((kind, x));
        }
    }

    let mut evaluated: Vec<(StartKind, Vec<f64>, f64)> = Vec::with_capacity(unique.len());
    let mut g_uniform = f64::NAN;
    for (i, (kind, x)) in unique.into_iter().enumerate() {
        let v = if i == 0 { g_zero } else { f.call(&x)? };
        if kind == StartKind::Uniform || (k == 1 && kind == StartKind::Corner(0)) {
            g_uniform = v;
        }
        evaluated.push((kind, x, v));
    }
    // Stable ranking by the tie-break order.
    let mut order: Vec<usize> = (0..evaluated.len()).collect();
    order.sort_by(|&a, &b| {
        let (ea, eb) = (&evaluated[a], &evaluated[b]);
        if better(ea.2, &ea.1, eb.2, &eb.1) {
            std::cmp::Ordering::Less
        } else if better(eb.2, &eb.1, ea.2, &ea.1) {
            std::cmp::Ordering::Greater
        } else {
            a.cmp(&b)
        }
    });
    let n_descend = opts.descend_top.unwrap_or(order.len()).min(order.len());

    let mut best_idx = order[0];
    let mut best = (evaluated[best_idx].1.clone(), evaluated[best_idx].2);
    let mut iterations = 0;
    for &i in &order[..n_descend] {
        let (_, x0, f0) = &evaluated[i];
        let (x, fx, it) = descend(&mut f, x0.clone(), *f0, budget, opts)?;
        iterations += it;
        if better(fx, &x, best.1, &best.0) {
            best = (x, fx);
            best_idx = i;
        }
    }
    Ok(OptimizeOutcome {
        lambda: best.0,
        value: best.1,
        start: evaluated[best_idx].0,
        iterations,
        evaluations: f.evaluations,
        g_zero,
        g_uniform,
    })
}

/// Optimal attention for one grid cell against `h_next`.
#[allow(clippy::too_many_arguments)]
pub fn optimize_attention(
    model: &LqModel,
    t: usize,
    budget: f64,
    f_t: &[f64],
    h_next: &ValueFunction,
    batch: &SampleBatch,
    opts: &OptimizerOptions,
    inner: InnerMode,
) -> Result<OptimizeOutcome> {
    let mut cell = CellObjective::new(model, t, budget, f_t, *h_next, batch, inner)?;
    let seed = batch.seed_spec.child(&[4]);
    minimize_on_budget_set(model.n_factors, budget, |l| Ok(cell.eval(l)?.value), opts, None, &seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn projection_examples() {
        assert_eq!(project_budget_simplex(&[-0.2, 0.5], 1.0), vec![0.0, 0.5]);
        let p = project_budget_simplex(&[0.5, 0.7], 1.0);
        assert_relative_eq!(p[0], 0.4, epsilon = 1e-15);
        assert_relative_eq!(p[1], 0.6, epsilon = 1e-15);
        assert_eq!(project_budget_simplex(&[2.0, 2.0], 1.0), vec![0.5, 0.5]);
        assert_eq!(project_budget_simplex(&[2.0, -1.0], 0.0), vec![0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn projection_is_feasible_and_idempotent(
            v in proptest::collection::vec(-3.0..3.0f64, 1..6),
            budget in 0.0..4.0f64,
        ) {
            let p = project_budget_simplex(&v, budget);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!(p.iter().sum::<f64>() <= budget + 1e-12);
            let pp = project_budget_simplex(&p, budget);
            for (a, b) in p.iter().zip(&pp) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            // Variational inequality: (v − p)·(y − p) ≤ 0 for feasible y.
            let y = project_budget_simplex(&vec![budget / v.len() as f64; v.len()], budget);
            let vi: f64 = v.iter().zip(&p).zip(&y).map(|((vi, pi), yi)| (vi - pi) * (yi - pi)).sum();
            prop_assert!(vi <= 1e-10);
        }
    }

    fn seed() -> SeedSpec {
        SeedSpec::new(1, &[0])
    }

    #[test]
    fn zero_budget_returns_zero() {
        let out = minimize_on_budget_set(2, 0.0, |l| Ok(l[0] + 1.0), &OptimizerOptions::default(), None, &seed()).unwrap();
        assert_eq!(out.lambda, vec![0.0, 0.0]);
        assert_eq!(out.value, 1.0);
    }

    #[test]
    fn monotone_objective_goes_to_budget() {
        let out =
            minimize_on_budget_set(1, 2.0, |l| Ok((-l[0]).exp()), &OptimizerOptions::default(), None, &seed()).unwrap();
        assert_relative_eq!(out.lambda[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn interior_quadratic_minimum() {
        let obj = |l: &[f64]| Ok((l[0] - 0.3).powi(2) + 2.0 * (l[1] - 0.5).powi(2));
        let out = minimize_on_budget_set(2, 2.0, obj, &OptimizerOptions::default(), None, &seed()).unwrap();
        assert!((out.lambda[0] - 0.3).abs() < 1e-5 && (out.lambda[1] - 0.5).abs() < 1e-5, "{:?}", out.lambda);
    }

    #[test]
    fn nonconvex_objective_matches_grid_search() {
        // Two separated basins; the deeper one sits on the budget face.
        let obj = |l: &[f64]| {
            let a = (-(l[0] - 0.2).powi(2) / 0.02 - (l[1] - 0.1).powi(2) / 0.02).exp();
            let b = 1.3 * (-(l[0] - 0.25).powi(2) / 0.05 - (l[1] - 0.75).powi(2) / 0.05).exp();
            Ok(1.0 - 0.1 * a - 0.1 * b)
        };
        let out = minimize_on_budget_set(2, 1.0, obj, &OptimizerOptions::default(), None, &seed()).unwrap();
        let mut best = f64::INFINITY;
        for i in 0..=20 {
            for j in 0..=(20 - i) {
                best = best.min(obj(&[0.05 * i as f64, 0.05 * j as f64]).unwrap());
            }
        }
        assert!(out.value <= best + 1e-3);
    }

    #[test]
    fn ties_prefer_smaller_allocations() {
        let out = minimize_on_budget_set(2, 1.0, |_| Ok(0.5), &OptimizerOptions::default(), None, &seed()).unwrap();
        assert_eq!(out.lambda, vec![0.0, 0.0]);
        assert_eq!(out.start, StartKind::Zero);
        assert!(better(1.0, &[0.0, 0.2], 1.0, &[0.2, 0.0]));
        assert!(!better(1.0, &[0.2, 0.0], 1.0, &[0.0, 0.2]));
    }

    #[test]
    fn dominates_every_start() {
        let obj = |l: &[f64]| Ok((3.0 * l[0]).sin() + (2.0 * l[1]).cos() + l[2] * 0.1);
        let opts = OptimizerOptions::default();
        let out = minimize_on_budget_set(3, 1.5, obj, &opts, Some(&[0.5, 0.5, 0.5]), &seed()).unwrap();
        assert!(out.value <= out.g_zero + 1e-9 && out.value <= out.g_uniform + 1e-9);
        assert!(out.lambda.iter().sum::<f64>() <= 1.5 + 1e-12);
    }
}
