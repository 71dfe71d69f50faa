//! Reference solvers for the sequential benchmarks.
//!
//! `pg-warm` is projected gradient with Barzilai–Borwein steps and a
//! nonmonotone (Grippo–Lampariello–Lucidi) backtracking rule, warm-started
//! from the previous solution. It is a simplified stand-in for spectral
//! projected gradient and is reported under its own name.

use std::time::Instant;

use nalgebra::DMatrix;

use crate::driver::{SequentialSolver, StepReport};
use crate::error::{Error, Result};
use crate::kkt::{self, oracle_solve_from, project_simplex, Problem, Support};

/// Nonmonotone memory.
const GLL_MEMORY: usize = 10;
const ARMIJO: f64 = 1e-4;
const STEP_MIN: f64 = 1e-30;
const STEP_MAX: f64 = 1e30;
/// Iterations between full gradient refreshes.
const REFRESH: usize = 50;

/// Result of [`pg_warmstart_solve`].
#[derive(Debug, Clone, PartialEq)]
pub struct PgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    /// Last Barzilai–Borwein step, reusable as the next warm step.
    pub step: f64,
}

impl PgOutcome {
    pub fn into_result(self) -> Result<PgOutcome> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NoConvergence {
                iterations: self.iterations,
            })
        }
    }
}

/// `A x` over the nonzero entries of `x`.
fn sparse_matvec(a: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (k, &xk) in x.iter().enumerate() {
        if xk != 0.0 {
            let col = a.column(k);
            for (o, &akj) in out.iter_mut().zip(col.iter()) {
                *o += xk * akj;
            }
        }
    }
}

/// KKT residual of a primal point given its gradient `Ax − c`, with
/// `μ₀ = xᵀ(Ax − c)` and `μ = max(Ax − c − μ₀, 0)`. Same measure as
/// [`kkt::kkt_residual_parts`] for those multipliers.
pub fn primal_residual(x: &[f64], grad: &[f64]) -> f64 {
    let mu0: f64 = x.iter().zip(grad).map(|(a, b)| a * b).sum();
    let mut res = (x.iter().sum::<f64>() - 1.0).abs();
    for (&xi, &gi) in x.iter().zip(grad) {
        let mu = (gi - mu0).max(0.0);
        res = res.max((gi - mu0 - mu).abs()).max((mu * xi).abs()).max(-xi);
    }
    res
}

/// Projected gradient on a raw matrix. `step0` is the initial step; pass
/// `None` to use `1/max Aᵢᵢ`.
pub fn pg_solve(
    a: &DMatrix<f64>,
    c: &[f64],
    x0: &[f64],
    tol: f64,
    max_iter: usize,
    step0: Option<f64>,
) -> PgOutcome {
    let n = c.len();
    let mut x = project_simplex(x0);
    let mut grad = vec![0.0; n];
    let refresh = |x: &[f64], grad: &mut [f64]| {
        sparse_matvec(a, x, grad);
        grad.iter_mut().zip(c).for_each(|(g, ci)| *g -= ci);
    };
    refresh(&x, &mut grad);
    let mut alpha = step0.unwrap_or_else(|| {
        let dmax = a.diagonal().max();
        if dmax > 0.0 {
            1.0 / dmax
        } else {
            1.0
        }
    });
    alpha = alpha.clamp(STEP_MIN, STEP_MAX);
    // Objective values relative to the current iterate; absolute values
    // lose the tiny decrements near convergence.
    let mut history = std::collections::VecDeque::with_capacity(GLL_MEMORY);
    history.push_back(0.0);
    let mut ad = vec![0.0; n];
    let mut best = f64::INFINITY;
    let mut iterations = 0;
    let mut since_refresh = 0;
    let mut stalled = false;
    loop {
        let mut res = primal_residual(&x, &grad);
        if res <= tol && since_refresh > 0 {
            // confirm against a fresh gradient
            refresh(&x, &mut grad);
            since_refresh = 0;
            res = primal_residual(&x, &grad);
        }
        best = best.min(res);
        if res <= tol || iterations >= max_iter || stalled {
            return PgOutcome {
                x,
                iterations,
                residual: best,
                converged: res <= tol,
                step: alpha,
            };
        }
        iterations += 1;

        // The projection is shift invariant; centring the gradient keeps
        // the small components of the step accurate.
        let mu0: f64 = x.iter().zip(&grad).map(|(a, b)| a * b).sum();
        let shifted: Vec<f64> = grad.iter().map(|g| g - mu0).collect();
        let trial: Vec<f64> = x.iter().zip(&shifted).map(|(xi, gi)| xi - alpha * gi).collect();
        let target = project_simplex(&trial);
        let d: Vec<f64> = target.iter().zip(&x).map(|(p, xi)| p - xi).collect();
        sparse_matvec(a, &d, &mut ad);
        let gd: f64 = shifted.iter().zip(&d).map(|(g, di)| g * di).sum();
        let dad: f64 = d.iter().zip(&ad).map(|(di, v)| di * v).sum();
        if gd >= 0.0 {
            if since_refresh == 0 {
                stalled = true;
            }
            refresh(&x, &mut grad);
            since_refresh = 0;
            continue;
        }
        let f_ref = history.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut lam: f64 = 1.0;
        let mut delta = lam * gd + 0.5 * lam * lam * dad;
        while delta > f_ref + ARMIJO * lam * gd && lam > 1e-20 {
            // safeguarded quadratic interpolation
            let lt = if dad > 0.0 { -gd / dad } else { 0.5 * lam };
            lam = if lt > 0.1 * lam && lt < 0.9 * lam { lt } else { 0.5 * lam };
            delta = lam * gd + 0.5 * lam * lam * dad;
        }
        for i in 0..n {
            x[i] += lam * d[i];
            grad[i] += lam * ad[i];
            if x[i] < 0.0 {
                x[i] = 0.0;
            }
        }
        since_refresh += 1;
        if since_refresh >= REFRESH {
            refresh(&x, &mut grad);
            since_refresh = 0;
        }
        if history.len() == GLL_MEMORY {
            history.pop_front();
        }
        history.iter_mut().for_each(|h| *h -= delta);
        history.push_back(0.0);
        // BB1 step: sᵀs / sᵀy with s = λd, y = λAd
        alpha = if dad > 0.0 {
            (d.iter().map(|v| v * v).sum::<f64>() / dad).clamp(STEP_MIN, STEP_MAX)
        } else {
            STEP_MAX
        };
    }
}

/// Warm-started projected gradient on `problem` from `x0`.
pub fn pg_warmstart_solve(problem: &Problem, x0: &[f64], tol: f64, max_iter: usize) -> Result<PgOutcome> {
    if x0.len() != problem.n() {
        return Err(Error::DimensionMismatch {
            what: "warm start",
            expected: problem.n(),
            got: x0.len(),
        });
    }
    Ok(pg_solve(problem.a(), problem.c(), x0, tol, max_iter, None))
}

fn support_of(x: &[f64]) -> Support {
    Support::from_positive(x, 0.0).unwrap_or_else(|_| Support::full(x.len()))
}

fn baseline_report(t: usize, prev: &Support, x: &[f64], residual: f64, wall_ns: u64, total_ns: u64, iters: usize) -> StepReport {
    let s = support_of(x);
    StepReport {
        t,
        k_a: 0,
        k_c: 0,
        k_t: 0,
        e_t: 0,
        e_legs: 0,
        sym_diff: prev.symmetric_difference_len(&s),
        support_size: s.len(),
        kkt_residual: residual,
        refined: false,
        wall_ns,
        wall_total_ns: total_ns,
        mult_count: 0,
        rebuilds: 0,
        s_max: s.len(),
        s_star: 0,
        iterations: iters,
        audit: None,
    }
}

fn rank_one_update(a: &mut DMatrix<f64>, g: &[f64]) {
    let n = g.len();
    for j in 0..n {
        if g[j] == 0.0 {
            continue;
        }
        let mut col = a.column_mut(j);
        for i in 0..n {
            col[i] += g[i] * g[j];
        }
    }
}

fn check_lens(n: usize, g: &[f64], c: &[f64]) -> Result<()> {
    for (what, v) in [("rank-one direction", g), ("linear term", c)] {
        if v.len() != n {
            return Err(Error::DimensionMismatch {
                what,
                expected: n,
                got: v.len(),
            });
        }
    }
    Ok(())
}

/// Sequential `pg-warm` baseline. Works on a raw matrix so that no
/// factorization enters its timings. Non-convergence within `max_iter`
/// is logged and the last iterate is kept.
#[derive(Debug, Clone)]
pub struct PgWarmSolver {
    a: DMatrix<f64>,
    c: Vec<f64>,
    x: Vec<f64>,
    step: Option<f64>,
    t: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub failures: usize,
}

impl PgWarmSolver {
    pub fn new(a0: DMatrix<f64>, c0: Vec<f64>, tol: f64, max_iter: usize) -> Result<Self> {
        let problem = Problem::new(a0, c0)?;
        let n = problem.n();
        let start = vec![1.0 / n as f64; n];
        let out = pg_solve(problem.a(), problem.c(), &start, tol, max_iter, None);
        let (a, c) = (problem.a().clone(), problem.c().to_vec());
        Ok(PgWarmSolver {
            a,
            c,
            x: out.x,
            step: Some(out.step),
            t: 0,
            tol,
            max_iter,
            failures: usize::from(!out.converged),
        })
    }
}

impl SequentialSolver for PgWarmSolver {
    fn name(&self) -> &'static str {
        "pg-warm"
    }

    fn n(&self) -> usize {
        self.c.len()
    }

    fn x(&self) -> Vec<f64> {
        self.x.clone()
    }

    fn step(&mut self, g: &[f64], c: &[f64]) -> Result<StepReport> {
        check_lens(self.n(), g, c)?;
        let start = Instant::now();
        rank_one_update(&mut self.a, g);
        let a_ns = start.elapsed().as_nanos() as u64;
        self.c.copy_from_slice(c);
        let solve = Instant::now();
        let out = pg_solve(&self.a, &self.c, &self.x, self.tol, self.max_iter, self.step);
        let wall = solve.elapsed().as_nanos() as u64;
        self.t += 1;
        if !out.converged {
            self.failures += 1;
            log::warn!("pg-warm step {}: residual {:.3e} after {} iterations", self.t, out.residual, out.iterations);
        }
        let prev = support_of(&self.x);
        self.x = out.x;
        self.step = Some(out.step);
        Ok(baseline_report(self.t, &prev, &self.x, out.residual, wall, wall + a_ns, out.iterations))
    }
}

/// Sequential wrapper around the active-set oracle, warm-started from the
/// previous solution.
#[derive(Debug, Clone)]
pub struct OracleSolver {
    a: DMatrix<f64>,
    c: Vec<f64>,
    x: Vec<f64>,
    t: usize,
}

impl OracleSolver {
    pub fn new(a0: DMatrix<f64>, c0: Vec<f64>) -> Result<Self> {
        let problem = Problem::new(a0, c0)?;
        let q = kkt::oracle_solve(&problem)?;
        Ok(OracleSolver {
            x: q.x(),
            a: problem.a().clone(),
            c: problem.c().to_vec(),
            t: 0,
        })
    }
}

impl SequentialSolver for OracleSolver {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn n(&self) -> usize {
        self.c.len()
    }

    fn x(&self) -> Vec<f64> {
        self.x.clone()
    }

    fn step(&mut self, g: &[f64], c: &[f64]) -> Result<StepReport> {
        check_lens(self.n(), g, c)?;
        let start = Instant::now();
        rank_one_update(&mut self.a, g);
        let a_ns = start.elapsed().as_nanos() as u64;
        let solve = Instant::now();
        let problem = Problem::new(self.a.clone(), c.to_vec())?;
        let q = oracle_solve_from(&problem, &self.x)?;
        let residual = kkt::kkt_residual(&problem, &q);
        let wall = solve.elapsed().as_nanos() as u64;
        self.c.copy_from_slice(c);
        self.t += 1;
        let prev = support_of(&self.x);
        self.x = q.x();
        Ok(baseline_report(self.t, &prev, &self.x, residual, wall, wall + a_ns, 0))
    }
}
