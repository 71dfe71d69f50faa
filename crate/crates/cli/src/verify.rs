use std::process::ExitCode;

use clap::{Args, ValueEnum};
use nalgebra::{DMatrix, DVector};

use hones::driver::{SolverConfig, SolverSession};
use hones::flows::{build_flow, synthetic_prices, FlowConfig, FlowKind};
use hones::kkt::{enumerate_solve, kkt_residual, oracle_solve_from, Problem, ENUMERATION_MAX_N};

const X_TOL: f64 = 1e-7;
const KKT_TOL: f64 = 1e-8;
const STATE_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    /// Perturb one stored entry of `M` part-way through each run.
    MCorruption,
}

#[derive(Args, Clone, Debug)]
pub struct VerifyArgs {
    /// Problem size; default checks 5, 10 and 30.
    #[arg(long)]
    pub n: Option<usize>,
    /// Runs per (flow kind, size) pair.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    /// Compare against support enumeration instead of the active-set oracle.
    #[arg(long)]
    pub exhaustive: bool,
    #[arg(long, value_enum)]
    pub inject_fault: Option<Fault>,
}

#[derive(Default)]
struct Check {
    name: &'static str,
    checks: usize,
    failures: usize,
    worst: f64,
    first: Option<String>,
}

impl Check {
    fn new(name: &'static str) -> Self {
        Check { name, ..Check::default() }
    }

    fn record(&mut self, ok: bool, value: f64, what: impl FnOnce() -> String) {
        self.checks += 1;
        self.worst = self.worst.max(value);
        if !ok {
            self.failures += 1;
            if self.first.is_none() {
                self.first = Some(what());
            }
        }
    }
}

pub fn cmd_verify(args: &VerifyArgs) -> ExitCode {
    let sizes = match args.n {
        Some(n) => vec![n],
        None => vec![5, 10, 30],
    };
    if args.exhaustive && sizes.iter().any(|&n| n > ENUMERATION_MAX_N) {
        eprintln!("error: --exhaustive needs --n at most {ENUMERATION_MAX_N}");
        return ExitCode::from(2);
    }
    if sizes.contains(&0) || args.steps == 0 || args.seeds == 0 {
        eprintln!("error: --n, --steps and --seeds must be positive");
        return ExitCode::from(2);
    }
    let mut eq = Check::new("oracle-equivalence");
    let mut kkt = Check::new("kkt-residual");
    let mut lower = Check::new("turning-point-bound");
    let mut state = Check::new("state-validation");
    let mut errors = Check::new("solver-errors");
    let kinds = [FlowKind::Synthetic, FlowKind::Ons, FlowKind::Markowitz];
    for &n in &sizes {
        for kind in kinds {
            for seed in 0..args.seeds {
                let cfg = FlowConfig {
                    kind,
                    n,
                    steps: args.steps,
                    seed,
                    lambda: (seed % 2) as f64,
                    ..FlowConfig::default()
                };
                let tag = format!("{kind:?} n={n} seed={seed}");
                if let Err(e) = verify_run(&cfg, args, &mut [&mut eq, &mut kkt, &mut lower, &mut state]) {
                    errors.record(false, 0.0, || format!("{tag}: {e}"));
                } else {
                    errors.record(true, 0.0, String::new);
                }
            }
        }
    }
    let table = [&eq, &kkt, &lower, &state, &errors];
    println!("{:<22} {:>8} {:>8} {:>10}  result", "invariant", "checks", "failed", "worst");
    for c in table {
        println!(
            "{:<22} {:>8} {:>8} {:>10.2e}  {}",
            c.name,
            c.checks,
            c.failures,
            c.worst,
            if c.failures == 0 { "PASS" } else { "FAIL" }
        );
    }
    let failed: Vec<_> = table.iter().filter(|c| c.failures > 0).collect();
    for c in &failed {
        println!("{} failed first at {}", c.name, c.first.as_deref().unwrap_or("?"));
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn verify_run(cfg: &FlowConfig, args: &VerifyArgs, checks: &mut [&mut Check; 4]) -> anyhow::Result<()> {
    let [eq, kkt, lower, state] = checks;
    let prices = synthetic_prices(cfg.n, cfg.steps + 1, cfg.seed);
    let mut flow = build_flow(cfg, Some(&prices))?;
    let mut a = flow.a0();
    let config = SolverConfig {
        rebuild_every: 0,
        ..SolverConfig::default()
    };
    let mut s = SolverSession::new(a.clone(), flow.c0(), config)?;
    let mut oracle_x = s.quadruple().x();
    let tag = |t: usize| format!("{:?} n={} seed={} t={t}", cfg.kind, cfg.n, cfg.seed);
    for _ in 0..cfg.steps {
        let Some(next) = flow.next_step(&s.quadruple().x()) else { break };
        let r = s.step(&next.g, &next.c)?;
        if args.inject_fault.is_some() && r.t == cfg.steps / 2 {
            corrupt_m(&mut s);
        }
        add_outer(&mut a, &next.g);
        let problem = Problem::new(a.clone(), next.c.clone())?;
        let reference = if args.exhaustive {
            enumerate_solve(&problem)?
        } else {
            oracle_solve_from(&problem, &oracle_x)?
        };
        oracle_x = reference.x();
        let dev = s
            .quadruple()
            .x()
            .iter()
            .zip(&oracle_x)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        eq.record(dev <= X_TOL, dev, || format!("{} (deviation {dev:.2e})", tag(r.t)));
        let res = kkt_residual(&problem, s.quadruple());
        kkt.record(res <= KKT_TOL, res, || format!("{} (residual {res:.2e})", tag(r.t)));
        lower.record(r.k_t >= r.sym_diff, 0.0, || {
            format!("{} (k_t {} < {})", tag(r.t), r.k_t, r.sym_diff)
        });
        let v = s.validate()?;
        let ratio = v.deviation / v.kappa.max(1.0);
        state.record(ratio <= STATE_TOL, ratio, || format!("{} (deviation/kappa {ratio:.2e})", tag(r.t)));
    }
    Ok(())
}

fn add_outer(a: &mut DMatrix<f64>, g: &[f64]) {
    let v = DVector::from_column_slice(g);
    *a += &v * v.transpose();
}

fn corrupt_m(s: &mut SolverSession) {
    let k = s.support().indices()[0];
    let p1 = s.par1_mut();
    let col = p1.m.col_mut(k);
    col[k] += 1e-3 * (1.0 + col[k].abs());
}
