use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use attnlq::mean_variance::{discount_factors, efficient_frontier, mu_star, write_frontier_csv};
use attnlq::policy::{simulate_episodes, ControlRule, Nature, RolloutOptions};
use attnlq::solver::eval_lambda_star;
use attnlq::{backtest as run_backtest, build_grids, LqModel, PolicyTable, SolveMode, SolveOptions, SolvedPolicy};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::{Common, UsageError};

/// A loaded configuration with command-line overrides applied.
struct Run {
    cfg: RunConfig,
    out: PathBuf,
    threads: Option<usize>,
    files: Vec<String>,
}

impl Run {
    fn new(common: &Common) -> Result<Self> {
        let mut cfg = RunConfig::load(&common.config)?;
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        if let Some(m) = common.mode {
            cfg.mode = m;
        }
        if let Some(o) = &common.out {
            cfg.output_dir = o.clone();
        }
        if let Some(n) = common.threads {
            if n == 0 {
                bail!(UsageError("--threads must be at least 1".into()));
            }
            // A second initialization in the same process is harmless.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        let out = cfg.output_dir.clone();
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            cfg,
            out,
            threads: common.threads,
            files: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.out.join(name)
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let p = self.path(name);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        self.write(name, &(text + "\n"))
    }

    fn tables_dir(&self, flag: Option<PathBuf>) -> PathBuf {
        flag.unwrap_or_else(|| self.out.join("tables"))
    }

    /// Writes the resolved configuration and the manifest; call last.
    fn finish(mut self, command: &str) -> Result<()> {
        let resolved = self.cfg.to_toml()?;
        self.write("config.resolved.toml", &resolved)?;
        let entry = json!({
            "seed": self.cfg.seed,
            "mode": self.cfg.mode,
            "threads": self.threads,
            "version": env!("CARGO_PKG_VERSION"),
            "outputs": self.files,
        });
        // One entry per command, so a later `inspect` keeps the `solve` record.
        let p = self.out.join("manifest.json");
        let mut manifest = fs::read_to_string(&p)
            .ok()
            .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
            .filter(serde_json::Value::is_object)
            .unwrap_or_else(|| json!({}));
        manifest[command] = entry;
        fs::write(&p, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}

fn model_for(run: &Run) -> Result<LqModel> {
    run.cfg.build_model()
}

fn f0_for(run: &Run, model: &LqModel) -> Result<Vec<f64>> {
    let f0 = run.cfg.simulate.f0.clone().unwrap_or_else(|| vec![0.0; model.n_factors]);
    if f0.len() != model.n_factors {
        bail!(UsageError(format!("f0 has {} entries, model has {} factors", f0.len(), model.n_factors)));
    }
    Ok(f0)
}

fn table_name(t: usize) -> String {
    format!("policy_t{t}.json")
}

fn load_policy(dir: &Path, model: &LqModel) -> Result<SolvedPolicy> {
    let mut tables = Vec::with_capacity(model.horizon);
    for t in 0..model.horizon {
        let p = dir.join(table_name(t));
        let text = fs::read_to_string(&p).with_context(|| format!("missing table {}", p.display()))?;
        tables.push(PolicyTable::from_json(&text).with_context(|| format!("reading {}", p.display()))?);
    }
    let terminal = match tables[0].meta.mode {
        SolveMode::MeanVariance => 1.0,
        SolveMode::General => model.terminal_q,
    };
    Ok(SolvedPolicy::from_tables(tables, terminal)?)
}

pub fn estimate(common: &Common) -> Result<()> {
    let mut run = Run::new(common)?;
    let Some(params) = run.cfg.estimated()? else {
        bail!(UsageError("estimate needs a [data] section".into()));
    };
    let model = model_for(&run)?;
    println!(
        "estimated on {}..{} ({} months); R² = {:?}",
        params.start, params.end, params.n_obs, params.r_squared
    );
    run.write_json("estimated_params.json", &params)?;
    run.write("model.json", &(model.to_json()? + "\n"))?;
    run.finish("estimate")
}

#[derive(Serialize)]
struct PeriodSummary {
    t: usize,
    budget: f64,
    h: f64,
    lambda: Vec<f64>,
    total_attention: f64,
}

pub fn solve(common: &Common) -> Result<()> {
    let mut run = Run::new(common)?;
    let model = model_for(&run)?;
    let g = run.cfg.grid.clone();
    let grids = build_grids(&model, g.budget0, g.budget_nodes, &g.factor_nodes)?;
    let opts = SolveOptions {
        samples: run.cfg.solver.samples,
        base_seed: run.cfg.seed,
        mode: run.cfg.mode.into(),
        inner: run.cfg.solver.inner,
        optimizer: run.cfg.solver.optimizer.clone(),
        threads: run.threads,
    };
    let policy = attnlq::backward_solve(&model, &grids, &opts)?;
    for (t, tab) in policy.tables.iter().enumerate() {
        run.write(&format!("tables/{}", table_name(t)), &(tab.to_json()? + "\n"))?;
    }
    // Attention along the budget path with factors held at the grid center.
    let center = grids.factor_node(grids.center_node());
    let mut budget = g.budget0;
    let mut periods = Vec::new();
    for (t, tab) in policy.tables.iter().enumerate() {
        let lambda = eval_lambda_star(tab, budget, &center);
        let total: f64 = lambda.iter().sum();
        periods.push(PeriodSummary {
            t,
            budget,
            h: policy.value_function(t).eval(budget, &center),
            lambda,
            total_attention: total,
        });
        budget = (budget - total).max(0.0);
    }
    let h0 = policy.h0(g.budget0, &center);
    println!("h0(Λ0 = {}, f = {:?}) = {h0:.8}", g.budget0, center);
    for p in &periods {
        println!("t = {}: budget {:.4}, total attention {:.4}", p.t, p.budget, p.total_attention);
    }
    run.write_json(
        "summary.json",
        &json!({ "h0": h0, "budget0": g.budget0, "f_center": center, "periods": periods }),
    )?;
    run.write("model.json", &(model.to_json()? + "\n"))?;
    run.finish("solve")
}

pub fn simulate(common: &Common, tables: Option<PathBuf>) -> Result<()> {
    let mut run = Run::new(common)?;
    let model = model_for(&run)?;
    let policy = load_policy(&run.tables_dir(tables), &model)?;
    let sim = run.cfg.simulate.clone();
    let f0 = f0_for(&run, &model)?;
    let budget0 = run.cfg.grid.budget0;
    if sim.episodes < 2 {
        bail!(UsageError("simulate needs at least 2 episodes".into()));
    }
    let rho0 = discount_factors(&model)[0];
    let h0 = policy.h0(budget0, &f0);
    let (rule, x0, target) = match policy.mode {
        SolveMode::General => (ControlRule::Lq, sim.x0, None),
        SolveMode::MeanVariance => {
            let x0 = run.cfg.mean_variance.x0;
            let d = rho0 * x0 * (1.0 + run.cfg.mean_variance.target_delta);
            let mu = mu_star(h0, rho0, x0, d)?;
            (ControlRule::MeanVariance { target: d, mu_star: mu }, x0, Some(d))
        }
    };
    let opts = RolloutOptions {
        inner_samples: sim.inner_samples,
        rule,
    };
    let runs = simulate_episodes(&model, &policy, x0, budget0, &f0, sim.episodes, run.cfg.seed, &Nature::Model, &opts)?;
    let n = runs.len() as f64;
    let stats = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    };
    let costs: Vec<f64> = runs.iter().map(|r| r.realized_cost).collect();
    let terminal: Vec<f64> = runs.iter().map(|r| r.terminal_state()).collect();
    let (mc_cost, cost_var) = stats(&costs);
    let (mean_x, var_x) = stats(&terminal);
    let mut report = json!({
        "episodes": sim.episodes,
        "x0": x0,
        "budget0": budget0,
        "f0": f0,
        "mc_cost": mc_cost,
        "std_err": (cost_var / n).sqrt(),
        "h0x0sq": h0 * x0 * x0,
        "mean_terminal": mean_x,
        "var_terminal": var_x,
    });
    if let Some(d) = target {
        let predicted = efficient_frontier(h0, rho0, x0, &[d])?[0].variance;
        report["target_d"] = json!(d);
        report["predicted_variance"] = json!(predicted);
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    run.write_json("cost_report.json", &report)?;
    let export = sim.export_trajectories.min(runs.len());
    run.write_json("trajectories.json", &runs[..export])?;
    for (e, traj) in runs.iter().take(export).enumerate() {
        let p = run.path(&format!("trajectory_{e}.csv"));
        traj.write_csv(fs::File::create(&p)?)?;
    }
    run.finish("simulate")
}

pub fn frontier(common: &Common, tables: Option<PathBuf>) -> Result<()> {
    let mut run = Run::new(common)?;
    let model = model_for(&run)?;
    let policy = load_policy(&run.tables_dir(tables), &model)?;
    if policy.mode != SolveMode::MeanVariance {
        bail!(UsageError("frontier needs tables solved in mv mode".into()));
    }
    let f0 = f0_for(&run, &model)?;
    let h0 = policy.h0(run.cfg.grid.budget0, &f0);
    let rho0 = discount_factors(&model)[0];
    let x0 = run.cfg.mean_variance.x0;
    let targets = if run.cfg.mean_variance.targets.is_empty() {
        (0..=10).map(|i| rho0 * x0 * (1.0 + 0.01 * i as f64)).collect()
    } else {
        run.cfg.mean_variance.targets.clone()
    };
    let points = efficient_frontier(h0, rho0, x0, &targets)?;
    let p = run.path("frontier.csv");
    write_frontier_csv(&points, fs::File::create(&p)?)?;
    println!("h0 = {h0:.8}, rho0 = {rho0:.8}; wrote {} frontier points", points.len());
    run.finish("frontier")
}

pub fn backtest(common: &Common) -> Result<()> {
    let mut run = Run::new(common)?;
    let series = run.cfg.series()?;
    let mut cfg = run.cfg.backtest.clone().unwrap_or_default();
    cfg.seed = run.cfg.seed;
    let report = run_backtest(&series, &cfg)?;
    println!(
        "{} episodes ({} skipped): mean {:.6}, std {:.6}, sharpe {:.4}",
        report.terminal_wealths.len(),
        report.skipped.len(),
        report.mean,
        report.std,
        report.sharpe
    );
    run.write_json("backtest_report.json", &report)?;
    let p = run.path("terminal_wealths.csv");
    report.write_csv(fs::File::create(&p)?)?;
    run.finish("backtest")
}

pub fn inspect(common: &Common, tables: Option<PathBuf>, budget: Option<f64>, f: Option<Vec<f64>>) -> Result<()> {
    let mut run = Run::new(common)?;
    let model = model_for(&run)?;
    let policy = load_policy(&run.tables_dir(tables), &model)?;
    let k = model.n_factors;
    let budget = budget.unwrap_or(run.cfg.grid.budget0);
    let f = f.unwrap_or_else(|| vec![0.0; k]);
    if f.len() != k {
        bail!(UsageError(format!("--f has {} values, model has {k} factors", f.len())));
    }
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "state: budget {budget}, f {f:?}")?;
    for (t, tab) in policy.tables.iter().enumerate() {
        let lambda = eval_lambda_star(tab, budget, &f);
        writeln!(stdout, "t = {t}: h = {:.8}, lambda* = {lambda:?}", policy.value_function(t).eval(budget, &f))?;
    }

    let cases = run.cfg.inspect.cases.clone();
    if !cases.is_empty() {
        let p = run.path("inspect_cases.csv");
        let mut w = csv::Writer::from_path(&p)?;
        let mut header = vec!["case".to_string(), "label".into(), "t".into(), "budget".into(), "h".into()];
        header.extend((0..k).map(|j| format!("lambda{j}")));
        header.push("total".into());
        w.write_record(&header)?;
        for (c, case) in cases.iter().enumerate() {
            if case.f.len() != k {
                bail!(UsageError(format!("case '{}' has {} factor values", case.label, case.f.len())));
            }
            // Factors held at the case value, budget carried along the path.
            let mut b = run.cfg.grid.budget0;
            for (t, tab) in policy.tables.iter().enumerate() {
                let lambda = eval_lambda_star(tab, b, &case.f);
                let total: f64 = lambda.iter().sum();
                let mut row = vec![
                    (c + 1).to_string(),
                    case.label.clone(),
                    t.to_string(),
                    b.to_string(),
                    policy.value_function(t).eval(b, &case.f).to_string(),
                ];
                row.extend(lambda.iter().map(f64::to_string));
                row.push(total.to_string());
                w.write_record(&row)?;
                b = (b - total).max(0.0);
            }
        }
        w.flush()?;
        writeln!(stdout, "wrote {} cases to {}", cases.len(), p.display())?;
    }
    run.finish("inspect")
}
