//! Stochastic linear-quadratic control with multiplicative noise and a
//! limited attention budget.
//!
//! The crate covers the model and its Gaussian belief algebra
//! ([`model`]), reproducible Monte-Carlo batches ([`sampler`]), the backward
//! dynamic-programming solver ([`solver`]), runtime control and episode
//! simulation ([`policy`]), the mean-variance portfolio embedding
//! ([`mean_variance`]) and return-data estimation and backtests ([`market`]).

pub mod error;
pub mod grid;
pub mod linalg;
pub mod market;
pub mod mean_variance;
pub mod model;
pub mod policy;
pub mod sampler;
pub mod solver;

pub use error::{Error, Result};
pub use grid::{build_grids, build_grids_with_bounds, stationary_factor_cov, FactorCounts, GridSpec};
pub use model::{
    entropy_reduction, posterior_beliefs, prior_beliefs, signal_noise, AttentionAllocation, GaussianBelief, LqModel,
    LqModelDoc, SignalNoise,
};
pub use sampler::{draw_batch, SampleBatch, SeedSpec};
pub use solver::{backward_solve, InnerMode, PolicyTable, SolveMode, SolveOptions, SolvedPolicy, ValueFunction};
pub use market::{backtest, estimate, load_returns, sharpe, synthetic_series, BacktestConfig, BacktestReport, EstimatedParams, ReturnSeries};
pub use mean_variance::{discount_factors, efficient_frontier, mu_star, mv_control, mv_solve, FrontierPoint, MvSpec};
pub use policy::{optimal_control, rollout, simulate_episodes, verify_cost, ControlRule, CostReport, Nature, RealizedPath, RolloutOptions, Trajectory};
