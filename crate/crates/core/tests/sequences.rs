use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use hones::baselines::{OracleSolver, PgWarmSolver};
use hones::driver::{SequentialSolver, SolverConfig, SolverSession};
use hones::flows::{build_flow, synthetic_prices, Flow, FlowConfig, FlowKind};
use hones::kkt::{kkt_residual, oracle_solve_from, Problem};
use hones::state::Layout;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn flow(kind: FlowKind, n: usize, steps: usize, seed: u64) -> Box<dyn Flow + Send> {
    let cfg = FlowConfig {
        kind,
        n,
        steps,
        seed,
        lambda: 1.0,
        ..FlowConfig::default()
    };
    build_flow(&cfg, Some(&synthetic_prices(n, steps + 1, seed))).unwrap()
}

#[test]
fn lazy_and_eager_agree_on_every_flow() {
    for kind in [FlowKind::Synthetic, FlowKind::Ons, FlowKind::Markowitz] {
        for layout in [Layout::Dense, Layout::Compressed] {
            let mut f = flow(kind, 12, 80, 21);
            let cfg = |lazy_a| SolverConfig {
                lazy_a,
                layout,
                ..SolverConfig::default()
            };
            let mut lazy = SolverSession::new(f.a0(), f.c0(), cfg(true)).unwrap();
            let mut eager = SolverSession::new(f.a0(), f.c0(), cfg(false)).unwrap();
            for _ in 0..80 {
                let Some(st) = f.next_step(&lazy.quadruple().x()) else { break };
                let a = lazy.step(&st.g, &st.c).unwrap();
                let b = eager.step(&st.g, &st.c).unwrap();
                assert_eq!(lazy.last_events(), eager.last_events(), "{kind:?} t={}", a.t);
                assert_eq!(lazy.quadruple().x(), eager.quadruple().x());
                assert_eq!(a.mult_count, b.mult_count);
            }
        }
    }
}

#[test]
fn checkpoint_resumes_bitwise() {
    let mut f = flow(FlowKind::Synthetic, 15, 60, 8);
    let mut s = SolverSession::new(f.a0(), f.c0(), SolverConfig::default()).unwrap();
    let mut steps = Vec::new();
    for _ in 0..60 {
        let st = f.next_step(&s.quadruple().x()).unwrap();
        steps.push(st);
    }
    for st in &steps[..30] {
        s.step(&st.g, &st.c).unwrap();
    }
    let mut bytes = Vec::new();
    s.save(&mut bytes).unwrap();
    let mut resumed = SolverSession::load(bytes.as_slice()).unwrap();
    for st in &steps[30..] {
        let a = s.step(&st.g, &st.c).unwrap();
        let b = resumed.step(&st.g, &st.c).unwrap();
        assert_eq!(s.quadruple(), resumed.quadruple());
        assert_eq!((a.k_t, a.mult_count), (b.k_t, b.mult_count));
    }
    assert_eq!(s.counters(), resumed.counters());
}

#[test]
fn solvers_agree_on_ons() {
    let mut f = flow(FlowKind::Ons, 8, 40, 3);
    let mut h = SolverSession::new(f.a0(), f.c0(), SolverConfig::default()).unwrap();
    let mut pg = PgWarmSolver::new(f.a0(), f.c0(), 1e-10, 20_000).unwrap();
    let mut or = OracleSolver::new(f.a0(), f.c0()).unwrap();
    while let Some(st) = f.next_step(&h.x()) {
        h.step(&st.g, &st.c).unwrap();
        pg.step(&st.g, &st.c).unwrap();
        or.step(&st.g, &st.c).unwrap();
        assert!(max_abs_diff(&h.x(), &or.x()) <= 1e-7);
        assert!(max_abs_diff(&pg.x(), &or.x()) <= 1e-5);
    }
    assert_eq!(pg.failures, 0);
}

fn spd(n: usize, entries: &[f64], ridge: f64) -> DMatrix<f64> {
    let b = DMatrix::from_fn(n, n, |i, j| entries[(i * n + j) % entries.len()]);
    &b * b.transpose() + DMatrix::identity(n, n) * ridge
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_sequences_track_the_oracle(
        n in 2usize..9,
        entries in prop::collection::vec(-1.0f64..1.0, 81),
        ridge in 0.01f64..1.0,
        c0 in prop::collection::vec(-1.0f64..1.0, 9),
        moves in prop::collection::vec((prop::collection::vec(-1.0f64..1.0, 9), prop::collection::vec(-0.5f64..0.5, 9)), 1..12),
    ) {
        let mut a = spd(n, &entries, ridge);
        let mut c = c0[..n].to_vec();
        let mut s = SolverSession::new(a.clone(), c.clone(), SolverConfig::default()).unwrap();
        let mut prev = s.quadruple().x();
        for (g, dc) in &moves {
            let g = &g[..n];
            for (ci, d) in c.iter_mut().zip(dc) {
                *ci += d;
            }
            let r = s.step(g, &c).unwrap();
            let gv = DVector::from_column_slice(g);
            a += &gv * gv.transpose();
            let problem = Problem::new(a.clone(), c.clone()).unwrap();
            let q = oracle_solve_from(&problem, &prev).unwrap();
            prev = q.x();
            prop_assert!(max_abs_diff(&s.quadruple().x(), &prev) <= 1e-7);
            prop_assert!(kkt_residual(&problem, s.quadruple()) <= 1e-8);
            prop_assert!(r.k_t >= r.sym_diff);
            // Every turning point toggles one index.
            prop_assert_eq!((r.k_t - r.sym_diff) % 2, 0);
            prop_assert_eq!(r.e_t * 2 + r.sym_diff, r.k_t);
        }
    }
}
