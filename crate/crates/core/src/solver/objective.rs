use nalgebra::{DMatrix, DVector};

use super::analytic::Contraction;
use super::value::ValueFunction;
use super::InnerMode;
use crate::error::{Error, Result};
use crate::grid::interpolate;
use crate::linalg;
use crate::model::{check_attention, LqModel, PosteriorUpdate};
use crate::sampler::{signal_factor, SampleBatch};

/// `h`-weighted conditional moments `(E[h], E[h b], E[h b bᵀ])`.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m0: f64,
    pub m1: DVector<f64>,
    pub m2: DMatrix<f64>,
}

/// Sample moments of `h_next(budget_next, f) · (1, b, b bᵀ)` over paired rows.
pub fn conditional_moments(
    h_next: &ValueFunction,
    budget_next: f64,
    factors: &DMatrix<f64>,
    assets: &DMatrix<f64>,
) -> Result<Moments> {
    let rows = factors.nrows();
    if rows == 0 || assets.nrows() != rows {
        return Err(Error::Domain("conditional moments need a nonempty paired batch".into()));
    }
    let n = assets.ncols();
    let mut m0 = 0.0;
    let mut m1 = DVector::zeros(n);
    let mut m2 = DMatrix::zeros(n, n);
    let mut f = vec![0.0; factors.ncols()];
    for l in 0..rows {
        for (j, v) in f.iter_mut().enumerate() {
            *v = factors[(l, j)];
        }
        let h = h_next.eval(budget_next, &f);
        m0 += h;
        for i in 0..n {
            let bi = assets[(l, i)];
            m1[i] += h * bi;
            for j in 0..=i {
                m2[(i, j)] += h * bi * assets[(l, j)];
            }
        }
    }
    let inv = 1.0 / rows as f64;
    for i in 0..n {
        for j in 0..i {
            m2[(j, i)] = m2[(i, j)];
        }
    }
    Ok(Moments {
        m0: m0 * inv,
        m1: m1 * inv,
        m2: m2 * inv,
    })
}

/// Sample-average objective and its Monte-Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GEstimate {
    pub value: f64,
    /// Standard deviation of the per-signal terms divided by `√L`.
    pub std_err: f64,
}

/// `g(λ)` with the inner expectation as a sample average over the batch.
#[allow(clippy::too_many_arguments)]
pub fn g_objective(
    lambda: &[f64],
    model: &LqModel,
    t: usize,
    budget: f64,
    f_t: &[f64],
    h_next: &ValueFunction,
    batch: &SampleBatch,
) -> Result<f64> {
    Ok(g_objective_with(lambda, model, t, budget, f_t, h_next, batch, InnerMode::Sampled)?.value)
}

#[allow(clippy::too_many_arguments)]
pub fn g_objective_with(
    lambda: &[f64],
    model: &LqModel,
    t: usize,
    budget: f64,
    f_t: &[f64],
    h_next: &ValueFunction,
    batch: &SampleBatch,
    inner: InnerMode,
) -> Result<GEstimate> {
    check_attention(lambda)?;
    let total: f64 = lambda.iter().sum();
    if !(budget >= 0.0) || total > budget + 1e-9 {
        return Err(Error::Domain(format!("attention total {total} exceeds the budget {budget}")));
    }
    CellObjective::new(model, t, budget, f_t, *h_next, batch, inner)?.eval(lambda)
}

/// Per-cell evaluator of `g` with precomputed constants and scratch space.
pub(crate) struct CellObjective<'a> {
    model: &'a LqModel,
    t: usize,
    budget: f64,
    f_t: Vec<f64>,
    h_next: ValueFunction<'a>,
    batch: &'a SampleBatch,
    inner: InnerMode,
    n: usize,
    k: usize,
    /// Row-major `D`.
    d: Vec<f64>,
    /// Row-major `A_t`.
    a_cost: Vec<f64>,
    contraction: Option<Contraction>,
    slice: Vec<f64>,
    terms: Vec<f64>,
    pub(crate) evaluations: usize,
}

impl<'a> CellObjective<'a> {
    pub(crate) fn new(
        model: &'a LqModel,
        t: usize,
        budget: f64,
        f_t: &[f64],
        h_next: ValueFunction<'a>,
        batch: &'a SampleBatch,
        inner: InnerMode,
    ) -> Result<Self> {
        model.check_factor_vec(f_t, "f_t")?;
        if t >= model.horizon {
            return Err(Error::Domain(format!("period {t} is beyond the horizon {}", model.horizon)));
        }
        let (n, k) = (model.n_assets, model.n_factors);
        if batch.is_empty() || batch.eps1.ncols() != k || batch.eps2.ncols() != k || batch.eps3.ncols() != n {
            return Err(Error::Dimension("sample batch does not match the model dimensions".into()));
        }
        let inner = inner.resolve(model.factor_noise_is_diagonal())?;
        let contraction = match (inner, &h_next) {
            (InnerMode::Analytic, ValueFunction::Table(tab)) => {
                if tab.n_factors() != k {
                    return Err(Error::Dimension("value table factor count differs from the model".into()));
                }
                Some(Contraction::new(&tab.grid.factor_shape()))
            }
            _ => None,
        };
        let d = (0..n * k).map(|i| model.loading_d[(i / k, i % k)]).collect();
        let a_cost = (0..n * n).map(|i| model.cost_a[t][(i / n, i % n)]).collect();
        Ok(Self {
            model,
            t,
            budget,
            f_t: f_t.to_vec(),
            h_next,
            batch,
            inner,
            n,
            k,
            d,
            a_cost,
            contraction,
            slice: Vec::new(),
            terms: Vec::with_capacity(batch.len()),
            evaluations: 0,
        })
    }

    pub(crate) fn budget(&self) -> f64 {
        self.budget
    }

    /// Evaluates `g` at `lambda`; the remaining budget is clamped at zero so
    /// finite-difference probes may step slightly past the budget face.
    pub(crate) fn eval(&mut self, lambda: &[f64]) -> Result<GEstimate> {
        self.evaluations += 1;
        let model = self.model;
        let (n, k) = (self.n, self.k);
        let update = PosteriorUpdate::new(model, &self.f_t, lambda)?;
        let (idx, chol) = signal_factor(model, lambda)?;
        // Posterior-mean shift per unit signal shock: K[:, idx] · C.
        let shift = DMatrix::from_fn(k, idx.len(), |i, b| {
            idx.iter().enumerate().map(|(a, &j)| update.gain[(i, j)] * chol[(a, b)]).sum::<f64>()
        });
        let budget_next = (self.budget - lambda.iter().sum::<f64>()).max(0.0);
        let terminal = match self.h_next {
            ValueFunction::Terminal(q) => Some(q),
            ValueFunction::Table(tab) => {
                tab.budget_slice(budget_next, &mut self.slice);
                None
            }
        };

        let eps1 = &self.batch.eps1;
        let outer = eps1.nrows();
        let inner_rows = self.batch.eps2.nrows();
        let c = &model.loading_c;

        // Inner pieces that do not depend on the signal draw.
        let sampled = if self.inner == InnerMode::Sampled {
            let root = linalg::sqrt_factor(&update.cov);
            let z = &self.batch.eps2 * root.transpose();
            let w = &z * model.loading_d.transpose() + &self.batch.eps3 * model.asset_noise_sqrt().transpose();
            Some((z, w))
        } else {
            None
        };
        let terminal_second = match (terminal, &sampled) {
            (Some(_), Some((_, w))) => {
                let inv = 1.0 / inner_rows as f64;
                let wbar: DVector<f64> = w.row_sum().transpose() * inv;
                let ww = w.transpose() * w * inv;
                Some((wbar, ww))
            }
            (Some(_), None) => {
                let s = linalg::symmetrize(
                    &(&model.loading_d * &update.cov * model.loading_d.transpose() + &model.asset_noise_cov),
                );
                Some((DVector::zeros(n), s))
            }
            _ => None,
        };
        let post_sd: Vec<f64> = (0..k).map(|j| update.cov[(j, j)].max(0.0).sqrt()).collect();

        let a = model.a(self.t);
        let p = &model.cost_p[self.t];
        let q = model.cost_q[self.t];
        let mut mu = vec![0.0; k];
        let mut beta = vec![0.0; n];
        let mut m1 = vec![0.0; n];
        let mut m2 = vec![0.0; n * n];
        let mut v = vec![0.0; n];
        let mut work = vec![0.0; n];
        let mut f = vec![0.0; k];
        let mut s1 = vec![0.0; n];
        let mut s2 = vec![0.0; n * n];
        let mut de1 = vec![0.0; n];
        let mut dtmp = vec![0.0; n * k];
        let grids: Vec<&[f64]> = match self.h_next {
            ValueFunction::Table(tab) => tab.grid.factor_grids.iter().map(Vec::as_slice).collect(),
            ValueFunction::Terminal(_) => Vec::new(),
        };

        if let Some(con) = self.contraction.as_mut() {
            // Dimensions with no signal loading keep the prior mean in every draw.
            let varying = (0..k)
                .filter(|&i| (0..idx.len()).any(|b| shift[(i, b)] != 0.0))
                .fold(0u64, |m, i| m | 1 << i);
            let prior: Vec<f64> = update.prior_mean.iter().copied().collect();
            con.prepare(&grids, &self.slice, &prior, &post_sd, varying);
        }

        self.terms.clear();
        // Without an informative signal every draw gives the prior; evaluate once.
        let draws = if idx.is_empty() { 1 } else { outer };
        for l1 in 0..draws {
            for i in 0..k {
                let mut s = update.prior_mean[i];
                for (b, &j) in idx.iter().enumerate() {
                    s += shift[(i, b)] * eps1[(l1, j)];
                }
                mu[i] = s;
            }
            for i in 0..n {
                beta[i] = c[i] + (0..k).map(|j| self.d[i * k + j] * mu[j]).sum::<f64>();
            }

            let m0;
            if let (Some(qn), Some((wbar, second))) = (terminal, &terminal_second) {
                m0 = qn;
                for i in 0..n {
                    m1[i] = qn * (beta[i] + wbar[i]);
                    for j in 0..n {
                        m2[i * n + j] = qn
                            * (beta[i] * beta[j] + beta[i] * wbar[j] + wbar[i] * beta[j] + second[(i, j)]);
                    }
                }
            } else if let Some((z, w)) = &sampled {
                let mut s0 = 0.0;
                s1.iter_mut().for_each(|x| *x = 0.0);
                s2.iter_mut().for_each(|x| *x = 0.0);
                for l2 in 0..inner_rows {
                    for j in 0..k {
                        f[j] = mu[j] + z[(l2, j)];
                    }
                    let h = interpolate(&self.slice, &grids, &f);
                    s0 += h;
                    for i in 0..n {
                        let hw = h * w[(l2, i)];
                        s1[i] += hw;
                        for j in 0..=i {
                            s2[i * n + j] += hw * w[(l2, j)];
                        }
                    }
                }
                let inv = 1.0 / inner_rows as f64;
                m0 = s0 * inv;
                for i in 0..n {
                    let mwi = s1[i] * inv;
                    m1[i] = beta[i] * m0 + mwi;
                    for j in 0..=i {
                        let mwj = s1[j] * inv;
                        let val = m0 * beta[i] * beta[j] + beta[i] * mwj + mwi * beta[j] + s2[i * n + j] * inv;
                        m2[i * n + j] = val;
                        m2[j * n + i] = val;
                    }
                }
            } else {
                let wm = self
                    .contraction
                    .as_mut()
                    .expect("analytic table evaluation has a contraction plan")
                    .evaluate(&grids, &mu, &post_sd);
                m0 = wm.e0;
                for i in 0..n {
                    de1[i] = (0..k).map(|j| self.d[i * k + j] * wm.e1[j]).sum();
                    for l in 0..k {
                        dtmp[i * k + l] = (0..k).map(|j| self.d[i * k + j] * wm.e2[j * k + l]).sum();
                    }
                }
                for i in 0..n {
                    m1[i] = beta[i] * m0 + de1[i];
                    for j in 0..=i {
                        let de2d: f64 = (0..k).map(|l| dtmp[i * k + l] * self.d[j * k + l]).sum();
                        let val = m0 * (beta[i] * beta[j] + model.asset_noise_cov[(i, j)])
                            + beta[i] * de1[j]
                            + de1[i] * beta[j]
                            + de2d;
                        m2[i * n + j] = val;
                        m2[j * n + i] = val;
                    }
                }
            }

            for i in 0..n {
                v[i] = p[i] + a * m1[i];
                for j in 0..n {
                    m2[i * n + j] += self.a_cost[i * n + j];
                }
            }
            let quad = linalg::inverse_quadratic_form(&mut m2, n, &v, &mut work).ok_or_else(|| {
                Error::Numerical(format!("A_{} + E[h b bᵀ] is not positive definite", self.t))
            })?;
            self.terms.push(q + a * a * m0 - quad);
        }
        if draws < outer {
            return Ok(GEstimate {
                value: self.terms[0],
                std_err: 0.0,
            });
        }
        Ok(summarize(&self.terms))
    }
}

fn summarize(terms: &[f64]) -> GEstimate {
    let l = terms.len() as f64;
    let mean = terms.iter().sum::<f64>() / l;
    let std_err = if terms.len() > 1 {
        let var = terms.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (l - 1.0);
        (var / l).sqrt()
    } else {
        0.0
    };
    GEstimate { value: mean, std_err }
}
