//! Sequential outer loop: for every step run the matrix leg on
//! `A⁽ᵗ⁻¹⁾ → A⁽ᵗ⁻¹⁾ + g gᵀ`, update the tracked columns of `A`, then run
//! the vector leg on `c⁽ᵗ⁻¹⁾ → c⁽ᵗ⁾`.

use std::io::{Read, Write};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::counters::{step_bound, Counters, COUNTER_FIELDS};
use crate::error::{Error, Result};
use crate::flows::Flow;
use crate::baselines::pg_solve;
use crate::kkt::{self, oracle_solve_from, Problem, Quadruple, Support};
use crate::linalg::{self, DEFAULT_COND_CAP};
use crate::path_matrix::{run_lambda_leg, AuditStats, LegOptions, PathEvent};
use crate::path_vector::run_utilde_leg;
use crate::state::{
    direct_update_par2, direct_update_par3, init_par1, validate_state, Layout, MStore, Par1, Par2,
    Par3, Par3Check, Validation,
};
use crate::tracked::TrackedMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub layout: Layout,
    /// Refactorize every this many steps; 0 disables.
    pub rebuild_every: usize,
    /// Validate the state every this many steps and rebuild when the
    /// deviation exceeds `check_tol`; 0 disables.
    pub check_every: usize,
    pub check_tol: f64,
    /// Turning points allowed per leg; `None` means `10·n`.
    pub cycle_cap: Option<usize>,
    /// Keep only columns in `S✱` current.
    pub lazy_a: bool,
    /// Validate after every turning point and record the worst deviation.
    pub audit_events: bool,
    pub cond_cap: f64,
    /// Apply one residual correction when the KKT residual after a step
    /// exceeds this; negative disables.
    pub refine_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            layout: Layout::Dense,
            rebuild_every: 1000,
            check_every: 0,
            check_tol: 1e-6,
            cycle_cap: None,
            lazy_a: true,
            audit_events: false,
            cond_cap: DEFAULT_COND_CAP,
            refine_tol: 1e-10,
        }
    }
}

/// Per-step statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub t: usize,
    pub k_a: usize,
    pub k_c: usize,
    pub k_t: usize,
    /// `(k_t − |S_t Δ S_{t−1}|)/2`.
    pub e_t: usize,
    pub sym_diff: usize,
    /// Excess measured per leg, against the support between the two legs.
    pub e_legs: usize,
    pub support_size: usize,
    pub kkt_residual: f64,
    /// A residual correction was applied after the step.
    pub refined: bool,
    /// Solve time, excluding the update of `A`.
    pub wall_ns: u64,
    pub wall_total_ns: u64,
    pub mult_count: u64,
    pub rebuilds: usize,
    /// Largest support size along the step's path.
    pub s_max: usize,
    pub s_star: usize,
    /// Inner iterations for iterative baselines; 0 for the path solver.
    pub iterations: usize,
    #[serde(skip)]
    pub audit: Option<AuditStats>,
}

impl StepReport {
    /// Whether the multiplication tally respects the per-step bound.
    pub fn within_bound(&self, n: usize) -> bool {
        self.mult_count <= step_bound(n, self.s_max, self.s_star, self.k_a, self.k_c)
    }
}

/// A solver that consumes `(g⁽ᵗ⁾, c⁽ᵗ⁾)` one step at a time.
pub trait SequentialSolver {
    fn name(&self) -> &'static str;
    fn n(&self) -> usize;
    /// Current primal solution.
    fn x(&self) -> Vec<f64>;
    fn step(&mut self, g: &[f64], c: &[f64]) -> Result<StepReport>;
}

#[derive(Debug, Clone)]
pub struct SolverSession {
    config: SolverConfig,
    t: usize,
    mat: TrackedMatrix,
    c: Vec<f64>,
    prev_c: Vec<f64>,
    last_g: Vec<f64>,
    last_l: Vec<f64>,
    q: Quadruple,
    p1: Par1,
    p2: Par2,
    p3: Par3,
    counters: Counters,
    rebuilds: usize,
    events: Vec<PathEvent>,
}

fn check_len(what: &'static str, v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::DimensionMismatch {
            what,
            expected: n,
            got: v.len(),
        });
    }
    Ok(())
}

impl SolverSession {
    /// Solves the first problem with the active-set oracle and builds the state.
    pub fn new(a0: DMatrix<f64>, c0: Vec<f64>, config: SolverConfig) -> Result<Self> {
        let problem = Problem::new(a0, c0)?;
        // A few projected-gradient iterations usually land on the optimal
        // support, which saves the active-set pass most of its
        // factorizations on large problems.
        let n = problem.n();
        let guess = pg_solve(problem.a(), problem.c(), &vec![1.0 / n as f64; n], 1e-10, 1000, None);
        let q = oracle_solve_from(&problem, &guess.x)?;
        let mat = TrackedMatrix::new(problem.a().clone(), q.support().indices(), config.lazy_a);
        let p1 = init_par1(mat.matrix(), q.support(), config.layout, config.cond_cap)?;
        Ok(SolverSession {
            t: 0,
            mat,
            c: problem.c().to_vec(),
            prev_c: problem.c().to_vec(),
            last_g: vec![0.0; n],
            last_l: vec![0.0; n],
            q,
            p1,
            p2: Par2::zero(n),
            p3: Par3::zero(n),
            counters: Counters::default(),
            rebuilds: 0,
            events: Vec::new(),
            config,
        })
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn quadruple(&self) -> &Quadruple {
        &self.q
    }

    pub fn support(&self) -> &Support {
        self.q.support()
    }

    pub fn matrix(&self) -> &TrackedMatrix {
        &self.mat
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn par1(&self) -> &Par1 {
        &self.p1
    }

    pub fn par2(&self) -> &Par2 {
        &self.p2
    }

    pub fn par3(&self) -> &Par3 {
        &self.p3
    }

    /// Mutable access to `Par1`, for fault-injection experiments.
    pub fn par1_mut(&mut self) -> &mut Par1 {
        &mut self.p1
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn total_rebuilds(&self) -> usize {
        self.rebuilds
    }

    /// Turning points of the most recent step.
    pub fn last_events(&self) -> &[PathEvent] {
        &self.events
    }

    fn leg_options(&self) -> LegOptions {
        let n = self.n();
        LegOptions {
            cycle_cap: self.config.cycle_cap.unwrap_or(10 * n.max(1)),
            layout: self.config.layout,
            cond_cap: self.config.cond_cap,
            audit: self.config.audit_events,
        }
    }

    /// Advances to the problem `(A + g gᵀ, c)`. After an error the session
    /// is left mid-step and should be discarded.
    pub fn step(&mut self, g: &[f64], c: &[f64]) -> Result<StepReport> {
        let n = self.n();
        check_len("rank-one direction", g, n)?;
        check_len("linear term", c, n)?;
        let start = Instant::now();
        let before = self.counters;
        let rebuilds_before = self.rebuilds;
        let s_prev = self.q.support().clone();
        let opts = self.leg_options();

        self.p2 = direct_update_par2(self.q.support(), &self.p1, &self.c, g, &mut self.counters);
        let leg_a = run_lambda_leg(
            &mut self.mat,
            &self.c,
            g,
            &mut self.q,
            &mut self.p1,
            &mut self.p2,
            &opts,
            &mut self.counters,
        )?;

        let s_mid = self.q.support().clone();
        let a_start = Instant::now();
        self.mat.apply(g);
        let a_ns = a_start.elapsed().as_nanos() as u64;

        let l: Vec<f64> = c.iter().zip(&self.c).map(|(x, y)| x - y).collect();
        self.p3 = direct_update_par3(self.q.support(), &self.p1, &l, &mut self.counters);
        let leg_c = run_utilde_leg(
            &mut self.mat,
            &l,
            &mut self.q,
            &mut self.p1,
            &mut self.p3,
            &opts,
            &mut self.counters,
        )?;

        self.prev_c = std::mem::replace(&mut self.c, c.to_vec());
        self.last_g = g.to_vec();
        self.last_l = l;
        self.t += 1;
        self.rebuilds += leg_a.rebuilds + leg_c.rebuilds;
        self.maintain()?;
        let mut kkt_residual = self.kkt_residual();
        let mut refined = false;
        if self.config.refine_tol >= 0.0 && kkt_residual > self.config.refine_tol {
            self.refine();
            kkt_residual = self.kkt_residual();
            refined = true;
        }
        let total_ns = start.elapsed().as_nanos() as u64;

        let k_a = leg_a.events.len();
        let k_c = leg_c.events.len();
        let k_t = k_a + k_c;
        let sym_diff = s_prev.symmetric_difference_len(self.q.support());
        let leg_diff = s_prev.symmetric_difference_len(&s_mid) + s_mid.symmetric_difference_len(self.q.support());
        let mut audit = None;
        if self.config.audit_events {
            let mut a = leg_a.audit;
            a.merge(&leg_c.audit);
            audit = Some(a);
        }
        self.events = leg_a.events;
        self.events.extend(leg_c.events);
        Ok(StepReport {
            t: self.t,
            k_a,
            k_c,
            k_t,
            e_t: k_t.saturating_sub(sym_diff) / 2,
            sym_diff,
            e_legs: k_t.saturating_sub(leg_diff) / 2,
            support_size: self.q.support().len(),
            kkt_residual,
            refined,
            wall_ns: total_ns.saturating_sub(a_ns),
            wall_total_ns: total_ns,
            mult_count: (self.counters - before).total(),
            rebuilds: self.rebuilds - rebuilds_before,
            s_max: leg_a.s_max.max(leg_c.s_max),
            s_star: self.mat.s_star(),
            iterations: 0,
            audit,
        })
    }

    fn maintain(&mut self) -> Result<()> {
        let t = self.t;
        if self.config.rebuild_every > 0 && t % self.config.rebuild_every == 0 {
            return self.rebuild();
        }
        if self.config.check_every > 0 && t % self.config.check_every == 0 {
            let v = self.validate()?;
            if v.deviation > self.config.check_tol {
                log::info!("step {t}: state deviation {:.3e}; rebuilding", v.deviation);
                self.rebuild()?;
            }
        }
        Ok(())
    }

    /// One step of iterative refinement on the quadruple with the support
    /// held fixed. The stationarity residual on `S` is mapped through `M`
    /// and the budget defect through `η̃`; rows off `S` absorb their own
    /// residual into `μ`. Not tallied in the counters.
    pub fn refine(&mut self) {
        let n = self.n();
        let s = self.q.support.indices().to_vec();
        let mu0 = self.q.mu0;
        let mut r: Vec<f64> = (0..n)
            .map(|i| {
                let mu = if self.q.support.contains(i) { 0.0 } else { -self.q.v[i] };
                -mu0 - mu - self.c[i]
            })
            .collect();
        for &k in &s {
            linalg::axpy(self.q.v[k], self.mat.col(k), &mut r);
        }
        let mut w = vec![0.0; n];
        for &k in &s {
            linalg::axpy(r[k], self.p1.m.col(k), &mut w);
        }
        let defect = s.iter().map(|&k| self.q.v[k]).sum::<f64>() - 1.0;
        let dmu0 = (s.iter().map(|&k| w[k]).sum::<f64>() - defect) / self.p1.d;
        for i in 0..n {
            let off = if self.q.support.contains(i) { 0.0 } else { r[i] };
            self.q.v[i] -= off + w[i] - dmu0 * self.p1.eta_tilde[i];
        }
        self.q.mu0 += dmu0;
    }

    /// KKT residual of the current quadruple against `(A⁽ᵗ⁾, c⁽ᵗ⁾)`,
    /// reading only the support columns.
    pub fn kkt_residual(&self) -> f64 {
        kkt::residual_with_columns(
            self.n(),
            |k| self.mat.col(k),
            &self.c,
            &self.q.x(),
            &self.q.mu(),
            self.q.mu0(),
        )
    }

    /// Recomputes all intermediate variables by factorization; the
    /// quadruple is left untouched.
    pub fn rebuild(&mut self) -> Result<()> {
        let s = self.q.support().clone();
        self.p1 = init_par1(self.mat.matrix(), &s, self.config.layout, self.config.cond_cap)?;
        let mut scratch = Counters::default();
        self.p2 = direct_update_par2(&s, &self.p1, &self.prev_c, &self.last_g, &mut scratch);
        self.p3 = direct_update_par3(&s, &self.p1, &self.last_l, &mut scratch);
        self.rebuilds += 1;
        Ok(())
    }

    /// Deviation of the stored state from a fresh factorization. `Par2`
    /// is left out: the vector leg does not maintain it, and it is
    /// recomputed at the start of every step.
    pub fn validate(&self) -> Result<Validation> {
        validate_state(
            self.mat.matrix(),
            self.q.support(),
            &self.p1,
            None,
            Some(Par3Check {
                par3: &self.p3,
                l: &self.last_l,
            }),
        )
    }

    /// Writes a binary checkpoint (see `docs/FORMATS.md`).
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.n();
        let mut b = Vec::with_capacity(8 * (n * n * 2 + self.mat.log().len() + 16 * n + 64));
        b.extend_from_slice(CHECKPOINT_MAGIC);
        put_u64(&mut b, CHECKPOINT_VERSION);
        put_u64(&mut b, n as u64);
        put_u64(&mut b, self.t as u64);
        let cfg = &self.config;
        put_u64(&mut b, matches!(cfg.layout, Layout::Compressed) as u64);
        put_u64(&mut b, cfg.rebuild_every as u64);
        put_u64(&mut b, cfg.check_every as u64);
        put_f64(&mut b, cfg.check_tol);
        put_u64(&mut b, cfg.cycle_cap.map_or(0, |c| c as u64 + 1));
        put_u64(&mut b, cfg.lazy_a as u64);
        put_u64(&mut b, cfg.audit_events as u64);
        put_f64(&mut b, cfg.cond_cap);
        put_f64(&mut b, cfg.refine_tol);

        put_f64s(&mut b, self.mat.matrix().as_slice());
        for &f in self.mat.star_flags() {
            put_u64(&mut b, f as u64);
        }
        put_u64(&mut b, self.mat.steps() as u64);
        put_f64s(&mut b, self.mat.log());
        for v in [&self.c, &self.prev_c, &self.last_g, &self.last_l] {
            put_f64s(&mut b, v);
        }
        let s = self.q.support().indices();
        put_u64(&mut b, s.len() as u64);
        for &i in s {
            put_u64(&mut b, i as u64);
        }
        put_f64s(&mut b, self.q.v());
        put_f64(&mut b, self.q.mu0());
        for &k in s {
            put_f64s(&mut b, self.p1.m.col(k));
        }
        put_f64s(&mut b, &self.p1.eta_tilde);
        put_f64(&mut b, self.p1.d);
        put_f64s(&mut b, &self.p2.eta);
        for x in [self.p2.d_g, self.p2.d_gg, self.p2.d_gc] {
            put_f64(&mut b, x);
        }
        put_f64s(&mut b, &self.p3.xi);
        put_f64(&mut b, self.p3.d_l);
        for x in self.counters.to_array() {
            put_u64(&mut b, x);
        }
        put_u64(&mut b, self.rebuilds as u64);
        w.write_all(&b)?;
        Ok(())
    }

    /// Restores a session written by [`SolverSession::save`].
    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut rd = Reader { buf: &buf, pos: 0 };
        if rd.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = rd.u64()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n = rd.usize()?;
        if n == 0 || n > 1 << 20 {
            return Err(Error::Checkpoint(format!("implausible dimension {n}")));
        }
        let t = rd.usize()?;
        let layout = if rd.u64()? == 1 { Layout::Compressed } else { Layout::Dense };
        let rebuild_every = rd.usize()?;
        let check_every = rd.usize()?;
        let check_tol = rd.f64()?;
        let cycle_cap = match rd.u64()? {
            0 => None,
            c => Some(c as usize - 1),
        };
        let lazy_a = rd.u64()? == 1;
        let audit_events = rd.u64()? == 1;
        let cond_cap = rd.f64()?;
        let refine_tol = rd.f64()?;
        let config = SolverConfig {
            layout,
            rebuild_every,
            check_every,
            check_tol,
            cycle_cap,
            lazy_a,
            audit_events,
            cond_cap,
            refine_tol,
        };

        let a = DMatrix::from_vec(n, n, rd.f64s(n * n)?);
        let mut star = Vec::with_capacity(n);
        for _ in 0..n {
            star.push(rd.u64()? == 1);
        }
        let steps = rd.usize()?;
        let log = rd.f64s(steps.checked_mul(n).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
        let mat = TrackedMatrix::from_parts(a, log, star, lazy_a);
        let c = rd.f64s(n)?;
        let prev_c = rd.f64s(n)?;
        let last_g = rd.f64s(n)?;
        let last_l = rd.f64s(n)?;
        let s_len = rd.usize()?;
        if s_len == 0 || s_len > n {
            return Err(Error::Checkpoint(format!("bad support size {s_len}")));
        }
        let mut idx = Vec::with_capacity(s_len);
        for _ in 0..s_len {
            idx.push(rd.usize()?);
        }
        let support = Support::new(n, &idx).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let v = rd.f64s(n)?;
        let mu0 = rd.f64()?;
        let q = Quadruple::from_v(support, v, mu0)?;
        let mut m = MStore::new(n, layout);
        for &k in &idx {
            m.activate(k);
            let col = rd.f64s(n)?;
            m.col_mut(k).copy_from_slice(&col);
        }
        let eta_tilde = rd.f64s(n)?;
        let d = rd.f64()?;
        let eta = rd.f64s(n)?;
        let (d_g, d_gg, d_gc) = (rd.f64()?, rd.f64()?, rd.f64()?);
        let xi = rd.f64s(n)?;
        let d_l = rd.f64()?;
        let mut cn = [0u64; COUNTER_FIELDS];
        for x in cn.iter_mut() {
            *x = rd.u64()?;
        }
        let counters = Counters::from_array(cn);
        let rebuilds = rd.usize()?;
        if rd.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(SolverSession {
            config,
            t,
            mat,
            c,
            prev_c,
            last_g,
            last_l,
            q,
            p1: Par1 { m, eta_tilde, d },
            p2: Par2 { eta, d_g, d_gg, d_gc },
            p3: Par3 { xi, d_l },
            counters,
            rebuilds,
            events: Vec::new(),
        })
    }
}

impl SequentialSolver for SolverSession {
    fn name(&self) -> &'static str {
        "hones"
    }

    fn n(&self) -> usize {
        SolverSession::n(self)
    }

    fn x(&self) -> Vec<f64> {
        self.q.x()
    }

    fn step(&mut self, g: &[f64], c: &[f64]) -> Result<StepReport> {
        SolverSession::step(self, g, c)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HONESCK\0";
pub const CHECKPOINT_VERSION: u64 = 2;

fn put_u64(b: &mut Vec<u8>, x: u64) {
    b.extend_from_slice(&x.to_le_bytes());
}

fn put_f64(b: &mut Vec<u8>, x: f64) {
    b.extend_from_slice(&x.to_le_bytes());
}

fn put_f64s(b: &mut Vec<u8>, xs: &[f64]) {
    for &x in xs {
        put_f64(b, x);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, k: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < k {
            return Err(Error::Checkpoint("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + k];
        self.pos += k;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("value out of range".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, k: usize) -> Result<Vec<f64>> {
        let bytes = self.take(k.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// One step of a sequential run.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub x: Vec<f64>,
    pub report: StepReport,
}

/// Feeds `steps` problems from `flow` into `solver`, calling `sink` after
/// each step. Stops early if the flow runs dry.
pub fn run_sequence_with<S, F, K>(solver: &mut S, flow: &mut F, steps: usize, mut sink: K) -> Result<usize>
where
    S: SequentialSolver + ?Sized,
    F: Flow + ?Sized,
    K: FnMut(&S, &StepReport) -> Result<()>,
{
    let mut done = 0;
    while done < steps {
        let x = solver.x();
        let Some(next) = flow.next_step(&x) else {
            break;
        };
        let report = solver.step(&next.g, &next.c)?;
        sink(solver, &report)?;
        done += 1;
    }
    Ok(done)
}

/// Collects `(x_t, report_t)` for `steps` steps.
pub fn run_sequence<S, F>(solver: &mut S, flow: &mut F, steps: usize) -> Result<Vec<StepOutput>>
where
    S: SequentialSolver + ?Sized,
    F: Flow + ?Sized,
{
    let mut out = Vec::with_capacity(steps);
    run_sequence_with(solver, flow, steps, |s, r| {
        out.push(StepOutput {
            x: s.x(),
            report: r.clone(),
        });
        Ok(())
    })?;
    Ok(out)
}
