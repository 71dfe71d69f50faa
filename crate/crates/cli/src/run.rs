use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use hones::baselines::{OracleSolver, PgWarmSolver};
use hones::driver::{SequentialSolver, SolverConfig, SolverSession, StepReport};
use hones::flows::{build_flow, load_prices, FlowConfig, FlowKind, PriceSeries};
use hones::summary::Summary;

use crate::{RunArgs, SolverKind, Switch};

/// Version of the `steps.csv` / `summary.json` layout.
pub const OUTPUT_VERSION: u32 = 1;

#[derive(Serialize)]
struct StepRow {
    t: usize,
    #[serde(rename = "k_A")]
    k_a: usize,
    k_c: usize,
    k_t: usize,
    e_t: usize,
    support_size: usize,
    kkt_residual: f64,
    wall_ns: u64,
    mult_count: Option<u64>,
    wall_total_ns: u64,
    sym_diff: usize,
    e_legs: usize,
    s_max: usize,
    s_star: usize,
    rebuilds: usize,
    refined: u8,
    iterations: usize,
}

impl StepRow {
    fn new(r: &StepReport, counters: bool) -> Self {
        StepRow {
            t: r.t,
            k_a: r.k_a,
            k_c: r.k_c,
            k_t: r.k_t,
            e_t: r.e_t,
            support_size: r.support_size,
            kkt_residual: r.kkt_residual,
            wall_ns: r.wall_ns,
            mult_count: counters.then_some(r.mult_count),
            wall_total_ns: r.wall_total_ns,
            sym_diff: r.sym_diff,
            e_legs: r.e_legs,
            s_max: r.s_max,
            s_star: r.s_star,
            rebuilds: r.rebuilds,
            refined: r.refined as u8,
            iterations: r.iterations,
        }
    }
}

#[derive(Serialize, Deserialize)]
pub struct RunSummary {
    pub output_version: u32,
    #[serde(flatten)]
    pub stats: Summary,
    pub flow: FlowConfig,
    pub counters: bool,
    /// Steps whose KKT residual exceeds `--tol`.
    pub steps_above_tol: usize,
    pub tol: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub twin_max_deviation: Option<f64>,
}

/// One entry of a `--grid` file; absent fields take the command-line value.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: Option<String>,
    pub n: Option<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub epsilon: Option<f64>,
    pub c_factor: Option<f64>,
    pub lambda: Option<f64>,
}

impl Scenario {
    fn apply(&self, base: &RunArgs) -> RunArgs {
        let mut a = base.clone();
        a.n = self.n.unwrap_or(a.n);
        a.steps = self.steps.unwrap_or(a.steps);
        a.seed = self.seed.unwrap_or(a.seed);
        a.epsilon = self.epsilon.unwrap_or(a.epsilon);
        a.c_factor = self.c_factor.unwrap_or(a.c_factor);
        a.lambda = self.lambda.unwrap_or(a.lambda);
        a
    }
}

#[derive(Serialize)]
struct GridEntry<'a> {
    name: &'a str,
    summary: &'a RunSummary,
}

pub fn cmd_run(kind: FlowKind, args: &RunArgs) -> Result<()> {
    if args.prices.is_some() && kind == FlowKind::Synthetic {
        bail!("--prices applies only to run-ons and run-markowitz");
    }
    if args.epoch == 0 {
        bail!("--epoch must be positive");
    }
    let prices = match &args.prices {
        Some(p) => {
            let (series, dropped) = load_prices(p).with_context(|| format!("reading {}", p.display()))?;
            if dropped > 0 {
                log::warn!("{dropped} price rows dropped");
            }
            Some(series)
        }
        None => None,
    };
    let Some(grid) = &args.grid else {
        let s = run_one(kind, args, prices.as_ref(), &args.out)?;
        print_summary(&s);
        return Ok(());
    };

    let text = fs::read_to_string(grid).with_context(|| format!("reading {}", grid.display()))?;
    let scenarios: Vec<Scenario> = serde_json::from_str(&text).with_context(|| format!("parsing {}", grid.display()))?;
    if scenarios.is_empty() {
        bail!("grid file lists no scenarios");
    }
    let names: Vec<String> = scenarios
        .iter()
        .enumerate()
        .map(|(i, s)| s.name.clone().unwrap_or_else(|| format!("scenario-{i:03}")))
        .collect();
    let results: Vec<Result<RunSummary>> = scenarios
        .par_iter()
        .zip(&names)
        .map(|(sc, name)| run_one(kind, &sc.apply(args), prices.as_ref(), &args.out.join(name)))
        .collect();
    let mut entries = Vec::new();
    let mut failed = 0;
    for (name, r) in names.iter().zip(&results) {
        match r {
            Ok(s) => {
                println!("{name}:");
                print_summary(s);
                entries.push(GridEntry { name, summary: s });
            }
            Err(e) => {
                eprintln!("{name}: {e:#}");
                failed += 1;
            }
        }
    }
    fs::write(args.out.join("grid.json"), serde_json::to_string_pretty(&entries)?)?;
    if failed > 0 {
        bail!("{failed} of {} scenarios failed", names.len());
    }
    Ok(())
}

fn print_summary(s: &RunSummary) {
    let st = &s.stats;
    println!(
        "  {} steps, support {:.1} ± {:.1} [{}, {}], e_t = 0 on {:.1}% (q99 {}, q99.9 {}), max KKT {:.2e}, solve time {:.3}s",
        st.steps,
        st.support_mean,
        st.support_std,
        st.support_min,
        st.support_max,
        100.0 * st.zero_excess_fraction,
        st.excess_q99,
        st.excess_q999,
        st.kkt_residual_max,
        st.wall_ns as f64 * 1e-9
    );
    if let Some(d) = s.twin_max_deviation {
        println!("  twin max |x - oracle| {d:.2e}");
    }
}

fn make_solver(args: &RunArgs, a0: nalgebra::DMatrix<f64>, c0: Vec<f64>) -> Result<Box<dyn SequentialSolver>> {
    Ok(match args.solver {
        SolverKind::Hones => {
            let config = SolverConfig {
                rebuild_every: args.rebuild_every,
                cycle_cap: args.cycle_cap,
                ..SolverConfig::default()
            };
            Box::new(SolverSession::new(a0, c0, config)?)
        }
        SolverKind::PgWarm => Box::new(PgWarmSolver::new(a0, c0, args.tol, args.max_iter)?),
        SolverKind::Oracle => Box::new(OracleSolver::new(a0, c0)?),
    })
}

/// Runs one scenario and writes `steps.csv`, `summary.json` and, with
/// `--twin`, `twin.csv` into `out`.
pub fn run_one(kind: FlowKind, args: &RunArgs, prices: Option<&PriceSeries>, out: &Path) -> Result<RunSummary> {
    let n = prices.map_or(args.n, |p| p.n());
    let flow_cfg = FlowConfig {
        kind,
        n,
        steps: args.steps,
        epsilon: args.epsilon,
        c_factor: args.c_factor,
        seed: args.seed,
        lambda: args.lambda,
    };
    let mut flow = build_flow(&flow_cfg, prices)?;
    let (a0, c0) = (flow.a0(), flow.c0());
    let mut solver = make_solver(args, a0.clone(), c0.clone())?;
    let mut twin = if args.twin { Some(OracleSolver::new(a0, c0)?) } else { None };

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let counters = args.counters == Switch::On && args.solver == SolverKind::Hones;
    let mut steps_csv = csv::Writer::from_path(out.join("steps.csv"))?;
    let mut twin_csv = match twin {
        Some(_) => {
            let mut w = csv::Writer::from_path(out.join("twin.csv"))?;
            w.write_record(["t", "max_abs_dev"])?;
            Some(w)
        }
        None => None,
    };
    let mut reports = Vec::with_capacity(args.steps);
    let mut twin_max: f64 = 0.0;
    for _ in 0..args.steps {
        let Some(next) = flow.next_step(&solver.x()) else { break };
        let r = solver.step(&next.g, &next.c).with_context(|| format!("step {}", reports.len() + 1))?;
        steps_csv.serialize(StepRow::new(&r, counters))?;
        if let (Some(o), Some(w)) = (twin.as_mut(), twin_csv.as_mut()) {
            o.step(&next.g, &next.c).with_context(|| format!("oracle twin, step {}", r.t))?;
            let dev = solver.x().iter().zip(o.x()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            twin_max = twin_max.max(dev);
            w.write_record([r.t.to_string(), format!("{dev:e}")])?;
        }
        reports.push(r);
    }
    steps_csv.flush()?;
    if let Some(mut w) = twin_csv {
        w.flush()?;
    }
    if reports.len() < args.steps {
        log::warn!("flow exhausted after {} of {} steps", reports.len(), args.steps);
    }

    let mut stats = Summary::from_reports(solver.name(), n, &reports, args.epoch, counters);
    if !counters {
        stats.mult_count = 0;
    }
    let summary = RunSummary {
        output_version: OUTPUT_VERSION,
        stats,
        flow: FlowConfig { steps: reports.len(), ..flow_cfg },
        counters,
        steps_above_tol: reports.iter().filter(|r| r.kkt_residual > args.tol).count(),
        tol: args.tol,
        twin_max_deviation: args.twin.then_some(twin_max),
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}
