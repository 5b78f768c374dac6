//! Runtime controls and simulation of the attention → signal → control loop.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mean_variance::{discount_factors, mv_control};
use crate::model::{GaussianBelief, LqModel, PosteriorUpdate};
use crate::sampler::{draw_batch, simulate_asset_returns, simulate_posterior_factors, standard_normals, SeedSpec};
use crate::solver::{conditional_moments, eval_lambda_star, Moments, SolveMode, SolvedPolicy};

/// Default inner batch size for moments re-estimated during a rollout.
pub const DEFAULT_INNER_SAMPLES: usize = 4096;

/// `u* = −(A_t + m2)⁻¹ (p_t + a_{t+1} m1) x_t`.
pub fn optimal_control(model: &LqModel, t: usize, x_t: f64, moments: &Moments) -> Result<DVector<f64>> {
    if t >= model.horizon {
        return Err(Error::Domain(format!("period {t} is beyond the horizon {}", model.horizon)));
    }
    let mat = &model.cost_a[t] + &moments.m2;
    let rhs = &model.cost_p[t] + &moments.m1 * model.a(t);
    let chol = linalg::symmetrize(&mat)
        .cholesky()
        .ok_or_else(|| Error::Numerical(format!("A_{t} + E[h b bᵀ] is singular")))?;
    Ok(-chol.solve(&rhs) * x_t)
}

/// Dated realizations of `f_1..f_T` and `b_1..b_T` replacing the model's draws.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizedPath {
    pub factors: Vec<DVector<f64>>,
    pub assets: Vec<DVector<f64>>,
}

/// Source of the true factor and return draws.
#[derive(Debug, Clone)]
pub enum Nature {
    /// Draws from the decision maker's own model.
    Model,
    /// Draws from a different ground-truth model.
    Alternative(Box<LqModel>),
    /// Replays realized data.
    Path(RealizedPath),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControlRule {
    /// `u*` of the general problem.
    Lq,
    /// Mean-variance policy steering towards `target` with multiplier `mu_star`.
    MeanVariance { target: f64, mu_star: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutOptions {
    /// Size of the fresh batch used to estimate the moments behind each control.
    pub inner_samples: usize,
    pub rule: ControlRule,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self {
            inner_samples: DEFAULT_INNER_SAMPLES,
            rule: ControlRule::Lq,
        }
    }
}

/// One simulated episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `x_0..x_T`.
    pub x_path: Vec<f64>,
    /// `Λ_0..Λ_T`.
    pub budget_path: Vec<f64>,
    /// `f_0..f_T`.
    pub factor_path: Vec<Vec<f64>>,
    pub attention_path: Vec<Vec<f64>>,
    pub signal_path: Vec<Vec<f64>>,
    pub control_path: Vec<Vec<f64>>,
    pub realized_cost: f64,
}

impl Trajectory {
    pub fn terminal_state(&self) -> f64 {
        *self.x_path.last().unwrap()
    }

    /// One row per period: `t, x, budget, f…, lambda…, s…, u…`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let k = self.factor_path[0].len();
        let n = self.control_path.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string(), "x".into(), "budget".into()];
        header.extend((0..k).map(|j| format!("f{j}")));
        header.extend((0..k).map(|j| format!("lambda{j}")));
        header.extend((0..k).map(|j| format!("s{j}")));
        header.extend((0..n).map(|i| format!("u{i}")));
        w.write_record(&header)?;
        let periods = self.x_path.len();
        for t in 0..periods {
            let mut row = vec![t.to_string(), self.x_path[t].to_string(), self.budget_path[t].to_string()];
            row.extend(self.factor_path[t].iter().map(f64::to_string));
            let blank = |len: usize| vec![String::new(); len];
            match (self.attention_path.get(t), self.signal_path.get(t), self.control_path.get(t)) {
                (Some(l), Some(s), Some(u)) => {
                    row.extend(l.iter().map(f64::to_string));
                    row.extend(s.iter().map(f64::to_string));
                    row.extend(u.iter().map(f64::to_string));
                }
                _ => {
                    row.extend(blank(2 * k + n));
                }
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn normals(seed: &SeedSpec, key: &[u64], len: usize) -> DVector<f64> {
    let m = standard_normals(&seed.child(key), 1, len);
    DVector::from_iterator(len, m.iter().copied())
}

/// Simulates one episode under `policy`.
///
/// Attention comes from the interpolated tables, the signal observes the
/// true next factors through noise of covariance `Σ_v(λ)`, and controls use
/// moments re-estimated on a fresh inner batch at the realized signal.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    model: &LqModel,
    policy: &SolvedPolicy,
    x0: f64,
    budget0: f64,
    f0: &[f64],
    seed: &SeedSpec,
    nature: &Nature,
    opts: &RolloutOptions,
) -> Result<Trajectory> {
    let horizon = model.horizon;
    let (n, k) = (model.n_assets, model.n_factors);
    model.check_factor_vec(f0, "f0")?;
    if policy.horizon() != horizon {
        return Err(Error::Dimension(format!(
            "policy covers {} periods, model has {horizon}",
            policy.horizon()
        )));
    }
    if !(budget0 >= 0.0) {
        return Err(Error::Domain("initial budget must be nonnegative".into()));
    }
    if opts.inner_samples == 0 {
        return Err(Error::Domain("inner batch size must be at least 1".into()));
    }
    if let Nature::Path(p) = nature {
        if p.factors.len() < horizon || p.assets.len() < horizon {
            return Err(Error::Dimension("realized path is shorter than the horizon".into()));
        }
        if p.factors.iter().any(|f| f.len() != k) || p.assets.iter().any(|b| b.len() != n) {
            return Err(Error::Dimension("realized path has the wrong dimensions".into()));
        }
    }
    let truth = match nature {
        Nature::Alternative(m) => {
            if m.n_assets != n || m.n_factors != k || m.horizon < horizon {
                return Err(Error::Dimension("ground-truth model dimensions differ".into()));
            }
            m.as_ref()
        }
        _ => model,
    };
    let costs = match policy.mode {
        SolveMode::General => model.clone(),
        SolveMode::MeanVariance => model.mean_variance_embedding(),
    };
    let rho = discount_factors(model);

    let mut x = x0;
    let mut budget = budget0;
    let mut f = linalg::dvec(f0);
    let mut traj = Trajectory {
        x_path: vec![x0],
        budget_path: vec![budget0],
        factor_path: vec![f0.to_vec()],
        attention_path: Vec::with_capacity(horizon),
        signal_path: Vec::with_capacity(horizon),
        control_path: Vec::with_capacity(horizon),
        realized_cost: 0.0,
    };
    let eta_root = linalg::sqrt_factor(&truth.factor_noise_cov);
    for t in 0..horizon {
        let tu = t as u64;
        let f_slice: Vec<f64> = f.iter().copied().collect();
        let lambda = eval_lambda_star(&policy.tables[t], budget, &f_slice);
        let spent: f64 = lambda.iter().sum();
        let remaining = budget - spent;
        if remaining < -1e-9 {
            return Err(Error::Numerical(format!("attention {spent} exceeds the remaining budget {budget}")));
        }
        let budget_next = remaining.max(0.0);

        let (f_next, b_next) = match nature {
            Nature::Path(p) => (p.factors[t].clone(), p.assets[t].clone()),
            _ => {
                let f_next = truth.transition() * &f + &eta_root * normals(seed, &[tu, 1], k);
                let b_next =
                    &truth.loading_c + &truth.loading_d * &f_next + truth.asset_noise_sqrt() * normals(seed, &[tu, 2], n);
                (f_next, b_next)
            }
        };

        let update = PosteriorUpdate::new(model, &f_slice, &lambda)?;
        let z = normals(seed, &[tu, 3], k);
        let signal: Vec<f64> = (0..k)
            .map(|j| {
                let cov = update.noise.cov_diag[j];
                if update.noise.precision_diag[j] > 0.0 {
                    f_next[j] + cov.sqrt() * z[j]
                } else {
                    update.prior_mean[j]
                }
            })
            .collect();
        let belief = GaussianBelief {
            mean: update.posterior_mean(&signal)?,
            cov: update.cov.clone(),
        };
        let mut key = seed.stream_key.clone();
        key.extend_from_slice(&[tu, 4]);
        let batch = draw_batch(seed.base_seed, &key, opts.inner_samples, k, n)?;
        let factors = simulate_posterior_factors(&belief, &batch.eps2)?;
        let assets = simulate_asset_returns(model, &factors, &batch.eps3)?;
        let moments = conditional_moments(&policy.value_function(t + 1), budget_next, &factors, &assets)?;
        let u = match opts.rule {
            ControlRule::Lq => optimal_control(&costs, t, x, &moments)?,
            ControlRule::MeanVariance { target, mu_star } => mv_control(model, t, x, &moments, rho[t], target, mu_star)?,
        };

        traj.realized_cost += u.dot(&(&costs.cost_a[t] * &u)) + 2.0 * x * u.dot(&costs.cost_p[t]) + costs.cost_q[t] * x * x;
        x = truth.a(t) * x + b_next.dot(&u);
        budget = budget_next;
        f = f_next;
        traj.x_path.push(x);
        traj.budget_path.push(budget);
        traj.factor_path.push(f.iter().copied().collect());
        traj.attention_path.push(lambda);
        traj.signal_path.push(signal);
        traj.control_path.push(u.iter().copied().collect());
    }
    traj.realized_cost += costs.terminal_q * x * x;
    Ok(traj)
}

/// Runs `episodes` independent rollouts with stream keys `(e,)` under `base_seed`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_episodes(
    model: &LqModel,
    policy: &SolvedPolicy,
    x0: f64,
    budget0: f64,
    f0: &[f64],
    episodes: usize,
    base_seed: u64,
    nature: &Nature,
    opts: &RolloutOptions,
) -> Result<Vec<Trajectory>> {
    (0..episodes)
        .into_par_iter()
        .map(|e| rollout(model, policy, x0, budget0, f0, &SeedSpec::new(base_seed, &[e as u64]), nature, opts))
        .collect()
}

/// Monte-Carlo cost against the table prediction `h_0(Λ_0, f_0) x_0²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub mc_cost: f64,
    pub std_err: f64,
    pub h0x0sq: f64,
    pub episodes: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn verify_cost(
    model: &LqModel,
    policy: &SolvedPolicy,
    x0: f64,
    budget0: f64,
    f0: &[f64],
    episodes: usize,
    seed: u64,
    opts: &RolloutOptions,
) -> Result<CostReport> {
    if episodes < 2 {
        return Err(Error::Domain("cost verification needs at least 2 episodes".into()));
    }
    let runs = simulate_episodes(model, policy, x0, budget0, f0, episodes, seed, &Nature::Model, opts)?;
    let costs: Vec<f64> = runs.iter().map(|t| t.realized_cost).collect();
    let (mean, sd) = mean_sd(&costs);
    Ok(CostReport {
        mc_cost: mean,
        std_err: sd / (episodes as f64).sqrt(),
        h0x0sq: policy.h0(budget0, f0) * x0 * x0,
        episodes,
    })
}

/// Sample mean and standard deviation (denominator `N − 1`).
pub(crate) fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Matrix of simulated terminal states, one per trajectory.
pub fn terminal_states(runs: &[Trajectory]) -> DMatrix<f64> {
    DMatrix::from_iterator(runs.len(), 1, runs.iter().map(Trajectory::terminal_state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grids, FactorCounts};
    use crate::model::testing::*;
    use crate::solver::{backward_solve, SolveOptions};
    use approx::assert_relative_eq;

    #[test]
    fn worked_control_value() {
        let m = scalar_model(1, 1.0036, 1.0, 0.04, 0.69);
        // Single effective asset: moments for asset 1 only, asset 2 zero weight.
        let mo = Moments {
            m0: 1.0,
            m1: DVector::from_vec(vec![0.05, 0.0]),
            m2: DMatrix::from_row_slice(2, 2, &[0.025, 0.0, 0.0, 1.0]),
        };
        let u = optimal_control(&m, 0, 1.0, &mo).unwrap();
        assert_relative_eq!(u[0], -1.433714, epsilon = 1e-6);
        let u2 = optimal_control(&m, 0, -2.5, &mo).unwrap();
        assert_eq!(u2[0], -2.5 * u[0]);
        assert_eq!(optimal_control(&m, 0, 0.0, &mo).unwrap().norm(), 0.0);
    }

    fn solved(budget0: f64) -> (LqModel, SolvedPolicy) {
        let m = scalar_model(2, 1.0036, 0.3, 0.04, 0.69);
        let g = build_grids(&m, budget0, 3, &FactorCounts::Uniform(3)).unwrap();
        let opts = SolveOptions {
            samples: 200,
            base_seed: 3,
            ..SolveOptions::default()
        };
        let p = backward_solve(&m, &g, &opts).unwrap();
        (m, p)
    }

    #[test]
    fn budget_is_conserved_and_state_follows_dynamics() {
        let (m, p) = solved(1.0);
        let opts = RolloutOptions {
            inner_samples: 256,
            ..RolloutOptions::default()
        };
        for e in 0..5u64 {
            let tr = rollout(&m, &p, 1.0, 1.0, &[0.1], &SeedSpec::new(9, &[e]), &Nature::Model, &opts).unwrap();
            let spent: f64 = tr.attention_path.iter().flatten().sum();
            assert!((tr.budget_path[2] - (1.0 - spent)).abs() < 1e-9);
            assert!(tr.budget_path.iter().all(|&b| b >= 0.0));
            assert_eq!(tr.x_path.len(), 3);
        }
    }

    #[test]
    fn zero_state_stays_zero() {
        let (m, p) = solved(1.0);
        let opts = RolloutOptions {
            inner_samples: 64,
            ..RolloutOptions::default()
        };
        let tr = rollout(&m, &p, 0.0, 1.0, &[0.0], &SeedSpec::new(1, &[0]), &Nature::Model, &opts).unwrap();
        assert!(tr.x_path.iter().all(|&x| x == 0.0));
        assert!(tr.control_path.iter().flatten().all(|&u| u == 0.0));
        assert_eq!(tr.realized_cost, 0.0);
    }

    #[test]
    fn zero_budget_spends_nothing() {
        let (m, p) = solved(0.0);
        let tr = rollout(&m, &p, 1.0, 0.0, &[0.0], &SeedSpec::new(1, &[0]), &Nature::Model, &RolloutOptions::default())
            .unwrap();
        assert!(tr.attention_path.iter().flatten().all(|&l| l == 0.0));
    }

    #[test]
    fn attention_ignores_the_state() {
        let (m, p) = solved(1.0);
        let opts = RolloutOptions {
            inner_samples: 64,
            ..RolloutOptions::default()
        };
        let a = rollout(&m, &p, 1.0, 1.0, &[0.2], &SeedSpec::new(4, &[0]), &Nature::Model, &opts).unwrap();
        let b = rollout(&m, &p, 7.0, 1.0, &[0.2], &SeedSpec::new(4, &[0]), &Nature::Model, &opts).unwrap();
        assert_eq!(a.attention_path, b.attention_path);
        for (ua, ub) in a.control_path[0].iter().zip(&b.control_path[0]) {
            assert_relative_eq!(7.0 * ua, *ub, max_relative = 1e-12);
        }
    }

    #[test]
    fn csv_export_has_one_row_per_period() {
        let (m, p) = solved(1.0);
        let tr = rollout(&m, &p, 1.0, 1.0, &[0.0], &SeedSpec::new(2, &[0]), &Nature::Model, &RolloutOptions::default())
            .unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,x,budget,f0,lambda0,s0,u0,u1");
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn verify_cost_needs_two_episodes() {
        let (m, p) = solved(1.0);
        assert!(verify_cost(&m, &p, 1.0, 1.0, &[0.0], 1, 0, &RolloutOptions::default()).is_err());
        let r = verify_cost(&m, &p, 0.0, 1.0, &[0.0], 4, 0, &RolloutOptions::default()).unwrap();
        assert_eq!((r.mc_cost, r.h0x0sq), (0.0, 0.0));
    }
}
