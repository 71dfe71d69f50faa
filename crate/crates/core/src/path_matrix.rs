//! Matrix leg: follow the optimum of `½xᵀ(A + λggᵀ)x − cᵀx` over the
//! simplex as `λ` runs from 0 to 1.
//!
//! Along a segment of constant support, with `α(λ) = λ/(1 + λD_gg)`,
//!
//! ```text
//! v(λ)  = v + α/(D − αD_g²) · u,      u = (D_gμ₀ − D_gc)(D_g η̃ − D η)
//! μ₀(λ) = μ₀ + α/(D − αD_g²) · D_g(D_gμ₀ − D_gc)
//! ```
//!
//! A turning point is the first `λ` where a coordinate of `v` reaches zero.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::counters::Counters;
use crate::error::{Error, Result};
use crate::kkt::{zeta, Quadruple, Support};
use crate::linalg::axpy;
use crate::state::{
    direct_update_par2, expand_par1, init_par1, shrink_par1, validate_state, LambdaTerm,
    Layout, Par1, Par2, Par2Check,
};
use crate::tracked::TrackedMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Leg {
    Matrix,
    Vector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Enter,
    Leave,
}

/// One turning point.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEvent {
    pub leg: Leg,
    /// Location of the turning point on `[0, 1]`.
    pub param: f64,
    pub index: usize,
    pub kind: EventKind,
    pub support_after: Vec<usize>,
}

/// Result of a turning-point search. `inc` is `∞` when no coordinate
/// ever reaches zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub inc: f64,
    pub index: Option<usize>,
}

impl Hit {
    pub const NONE: Hit = Hit {
        inc: f64::INFINITY,
        index: None,
    };

    pub fn support_after(&self, support: &Support) -> Option<Support> {
        self.index.map(|j| support.toggled(j).expect("toggle keeps support nonempty"))
    }
}

const GUARD: f64 = 64.0 * f64::EPSILON;

/// Smallest positive ratio `max(sᵢvᵢ, 0)/(sᵢ denᵢ)` over coordinates
/// moving toward zero (`sᵢ = +1` on `S`, `−1` off it). `skip` is the index
/// toggled by the previous event, excluded while it still sits at zero.
pub(crate) fn min_ratio<F>(q: &Quadruple, skip: Option<usize>, mut den: F) -> Option<(f64, usize)>
where
    F: FnMut(usize) -> (f64, f64),
{
    let z = zeta(&q.v);
    let mut best: Option<(f64, usize)> = None;
    for i in 0..q.v.len() {
        let sign = if q.support.contains(i) { 1.0 } else { -1.0 };
        let sv = sign * q.v[i];
        if skip == Some(i) && sv <= z {
            continue;
        }
        let (d, scale) = den(i);
        let sd = sign * d;
        if !(sd > GUARD * scale) {
            continue;
        }
        let r = sv.max(0.0) / sd;
        if best.is_none_or(|(b, _)| r < b) {
            best = Some((r, i));
        }
    }
    best
}

/// Next turning point of the matrix leg, as an increment from the current `λ`.
pub fn find_lambda(q: &Quadruple, p1: &Par1, p2: &Par2, skip: Option<usize>, counters: &mut Counters) -> Hit {
    let n = q.v.len();
    let t = p2.d_g * q.mu0 - p2.d_gc;
    let a = t * p2.d_g;
    let b = t * p1.d;
    let dg2 = p2.d_g * p2.d_g;
    let mut ops = 4u64;
    let best = min_ratio(q, skip, |i| {
        let x = dg2 * q.v[i];
        let y = a * p1.eta_tilde[i];
        let z = b * p2.eta[i];
        (x - y + z, x.abs() + y.abs() + z.abs())
    });
    ops += 3 * n as u64 + best.map_or(0, |_| 1) + n as u64;
    counters.find_lambda += ops;
    let Some((r, j)) = best else {
        return Hit::NONE;
    };
    let alpha = p1.d * r;
    let inc = if alpha * p2.d_gg < 1.0 {
        (alpha / (1.0 - alpha * p2.d_gg)).max(0.0)
    } else {
        f64::INFINITY
    };
    Hit { inc, index: Some(j) }
}

/// Advances the quadruple and the intermediate variables by `inc` along λ.
pub fn update_by_lambda(
    inc: f64,
    q: &mut Quadruple,
    p1: &mut Par1,
    p2: &mut Par2,
    counters: &mut Counters,
) -> Result<()> {
    let one_plus = 1.0 + inc * p2.d_gg;
    if !(one_plus > 0.0) {
        return Err(Error::DegenerateDenominator { value: one_plus });
    }
    let a0 = 1.0 / one_plus;
    let alpha = inc * a0;
    let den = p1.d - alpha * p2.d_g * p2.d_g;
    if !(den > 1e-12 * p1.d.abs()) || !den.is_finite() {
        return Err(Error::DegenerateDenominator { value: den });
    }
    let at = alpha / den;
    let t = p2.d_g * q.mu0 - p2.d_gc;
    let ca = at * t * p2.d_g;
    let cb = at * t * p1.d;
    let n = q.v.len();
    for i in 0..n {
        q.v[i] += ca * p1.eta_tilde[i] - cb * p2.eta[i];
    }
    q.mu0 += ca;
    p1.d = den;

    let s = q.support.indices();
    for &k in s {
        let w = alpha * p2.eta[k];
        axpy(-w, &p2.eta, p1.m.col_mut(k));
    }
    axpy(-alpha * p2.d_g, &p2.eta, &mut p1.eta_tilde);
    for e in p2.eta.iter_mut() {
        *e *= a0;
    }
    p2.d_g *= a0;
    p2.d_gg *= a0;
    p2.d_gc *= a0;
    counters.update_by_lambda += (n * s.len() + 4 * n + s.len() + 14) as u64;
    Ok(())
}

/// `j` enters the support at cumulative parameter `lambda`. `a` is the
/// base matrix of the leg; columns `S ∪ {j}` must be current.
#[allow(clippy::too_many_arguments)]
pub fn expand_support_lambda(
    lambda: f64,
    support: &mut Support,
    j: usize,
    a: &DMatrix<f64>,
    c: &[f64],
    g: &[f64],
    p1: &mut Par1,
    p2: &mut Par2,
    counters: &mut Counters,
) -> Result<()> {
    if support.contains(j) {
        return Err(Error::InvalidSupport(format!("index {j} already in the support")));
    }
    let eta_j = p2.eta[j];
    let et_j = p1.eta_tilde[j];
    let mut ops = 0u64;
    let term = LambdaTerm { lambda, eta_j, g };
    let (pivot, gamma) = expand_par1(a, support, j, Some(term), p1, &mut ops)?;

    let b = -support.indices().iter().map(|&i| c[i] * gamma[i]).sum::<f64>() - c[j];
    p2.d_g += eta_j * et_j / pivot;
    p2.d_gg += eta_j * eta_j / pivot;
    p2.d_gc += eta_j * b / pivot;
    p2.eta[j] = 0.0;
    axpy(eta_j / pivot, &gamma, &mut p2.eta);
    ops += (support.len() + 7 + p2.eta.len()) as u64;
    support.insert(j);
    counters.expand_lambda += ops;
    Ok(())
}

/// `j` leaves the support.
pub fn shrink_support_lambda(
    support: &mut Support,
    j: usize,
    c: &[f64],
    p1: &mut Par1,
    p2: &mut Par2,
    counters: &mut Counters,
) -> Result<()> {
    if !support.contains(j) {
        return Err(Error::InvalidSupport(format!("index {j} not in the support")));
    }
    let eta_j = p2.eta[j];
    let et_j = p1.eta_tilde[j];
    let mut ops = 0u64;
    let (m_jj, beta) = shrink_par1(support, j, p1, &mut ops)?;

    let b = -support
        .indices()
        .iter()
        .filter(|&&i| i != j)
        .map(|&i| c[i] * beta[i])
        .sum::<f64>()
        - c[j] * m_jj;
    p2.d_g -= eta_j * et_j / m_jj;
    p2.d_gg -= eta_j * eta_j / m_jj;
    p2.d_gc -= eta_j * b / m_jj;
    p2.eta[j] = 0.0;
    axpy(-eta_j / m_jj, &beta, &mut p2.eta);
    ops += (support.len() + 7 + p2.eta.len()) as u64;
    support.remove(j)?;
    counters.shrink_lambda += ops;
    Ok(())
}

/// Policies shared by both legs.
#[derive(Debug, Clone, Copy)]
pub struct LegOptions {
    /// Maximum turning points per leg.
    pub cycle_cap: usize,
    pub layout: Layout,
    pub cond_cap: f64,
    /// Validate the state after every turning point.
    pub audit: bool,
}

impl LegOptions {
    pub fn for_size(n: usize) -> Self {
        LegOptions {
            cycle_cap: 10 * n.max(1),
            layout: Layout::Dense,
            cond_cap: crate::linalg::DEFAULT_COND_CAP,
            audit: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AuditStats {
    pub checks: usize,
    pub max_deviation: f64,
    /// Largest `deviation / κ(A_SS)`.
    pub max_ratio: f64,
}

impl AuditStats {
    pub(crate) fn record(&mut self, deviation: f64, kappa: f64) {
        self.checks += 1;
        self.max_deviation = self.max_deviation.max(deviation);
        self.max_ratio = self.max_ratio.max(deviation / kappa.max(1.0));
    }

    pub fn merge(&mut self, o: &AuditStats) {
        self.checks += o.checks;
        self.max_deviation = self.max_deviation.max(o.max_deviation);
        self.max_ratio = self.max_ratio.max(o.max_ratio);
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LegOutcome {
    pub events: Vec<PathEvent>,
    pub rebuilds: usize,
    /// Largest support size seen during the leg.
    pub s_max: usize,
    pub audit: AuditStats,
}

/// Columns of `A + λggᵀ` on `S ∪ extra`; other columns are copied unchanged.
pub(crate) fn shifted_matrix(a: &DMatrix<f64>, support: &Support, g: &[f64], lambda: f64) -> DMatrix<f64> {
    let mut b = a.clone();
    let n = a.nrows();
    let data = b.as_mut_slice();
    for &k in support.indices() {
        axpy(lambda * g[k], g, &mut data[k * n..(k + 1) * n]);
    }
    b
}

fn rebuild_lambda(
    a: &DMatrix<f64>,
    q: &Quadruple,
    c: &[f64],
    g: &[f64],
    lambda: f64,
    opts: &LegOptions,
) -> Result<(Par1, Par2)> {
    let b = shifted_matrix(a, &q.support, g, lambda);
    let p1 = init_par1(&b, &q.support, opts.layout, opts.cond_cap)?;
    let p2 = direct_update_par2(&q.support, &p1, c, g, &mut Counters::default());
    Ok((p1, p2))
}

fn audit_lambda(a: &DMatrix<f64>, q: &Quadruple, c: &[f64], g: &[f64], lambda: f64, p1: &Par1, p2: &Par2) -> Result<(f64, f64)> {
    let b = shifted_matrix(a, &q.support, g, lambda);
    let v = validate_state(&b, &q.support, p1, Some(Par2Check { par2: p2, c, g }), None)?;
    Ok((v.deviation, v.kappa))
}

/// Runs the matrix leg from `λ = 0` to `λ = 1`. On entry `q` is optimal
/// for `(A, c)` and `p1`, `p2` are consistent with `(A, S, c, g)`; on exit
/// they describe `(A + ggᵀ, c)`. The tracked matrix itself is not updated.
#[allow(clippy::too_many_arguments)]
pub fn run_lambda_leg(
    mat: &mut TrackedMatrix,
    c: &[f64],
    g: &[f64],
    q: &mut Quadruple,
    p1: &mut Par1,
    p2: &mut Par2,
    opts: &LegOptions,
    counters: &mut Counters,
) -> Result<LegOutcome> {
    let mut out = LegOutcome {
        s_max: q.support.len(),
        ..Default::default()
    };
    let mut lambda = 0.0_f64;
    let mut skip: Option<usize> = None;
    let mut retried = false;
    loop {
        let hit = find_lambda(q, p1, p2, skip, counters);
        let remaining = 1.0 - lambda;
        let step = match hit.index {
            Some(j) if hit.inc < remaining => {
                if out.events.len() >= opts.cycle_cap {
                    return Err(Error::CycleLimit { cap: opts.cycle_cap });
                }
                lambda_event(mat, c, g, q, p1, p2, hit.inc, j, &mut lambda, counters)
            }
            _ => update_by_lambda(remaining, q, p1, p2, counters).map(|_| None),
        };
        match step {
            Ok(None) => break,
            Ok(Some(j)) => {
                skip = Some(j);
                out.s_max = out.s_max.max(q.support.len());
                let kind = if q.support.contains(j) {
                    EventKind::Enter
                } else {
                    EventKind::Leave
                };
                out.events.push(PathEvent {
                    leg: Leg::Matrix,
                    param: lambda,
                    index: j,
                    kind,
                    support_after: q.support.indices().to_vec(),
                });
                if opts.audit {
                    let (dev, kappa) = audit_lambda(mat.matrix(), q, c, g, lambda, p1, p2)?;
                    out.audit.record(dev, kappa);
                }
            }
            Err(e) if e.is_degenerate() && !retried => {
                log::warn!("matrix leg at λ = {lambda}: {e}; rebuilding");
                retried = true;
                let (n1, n2) = rebuild_lambda(mat.matrix(), q, c, g, lambda, opts)?;
                *p1 = n1;
                *p2 = n2;
                out.rebuilds += 1;
                skip = None;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn lambda_event(
    mat: &mut TrackedMatrix,
    c: &[f64],
    g: &[f64],
    q: &mut Quadruple,
    p1: &mut Par1,
    p2: &mut Par2,
    inc: f64,
    j: usize,
    lambda: &mut f64,
    counters: &mut Counters,
) -> Result<Option<usize>> {
    update_by_lambda(inc, q, p1, p2, counters)?;
    *lambda += inc;
    q.v[j] = 0.0;
    if q.support.contains(j) {
        shrink_support_lambda(&mut q.support, j, c, p1, p2, counters)?;
    } else {
        mat.ensure(j);
        expand_support_lambda(*lambda, &mut q.support, j, mat.matrix(), c, g, p1, p2, counters)?;
    }
    Ok(Some(j))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kkt::{oracle_solve, solve_given_support, Problem};
    use approx::assert_abs_diff_eq;

    fn seeded_spd(n: usize, seed: u64) -> DMatrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &b * b.transpose() + DMatrix::identity(n, n) * 0.5
    }

    struct Fixture {
        a: DMatrix<f64>,
        c: Vec<f64>,
        g: Vec<f64>,
        q: Quadruple,
        p1: Par1,
        p2: Par2,
        cn: Counters,
    }

    fn fixture(a: DMatrix<f64>, c: Vec<f64>, g: Vec<f64>) -> Fixture {
        let p = Problem::new(a.clone(), c.clone()).unwrap();
        let q = oracle_solve(&p).unwrap();
        let p1 = init_par1(&a, &q.support, Layout::Dense, 1e12).unwrap();
        let mut cn = Counters::default();
        let p2 = direct_update_par2(&q.support, &p1, &c, &g, &mut cn);
        Fixture { a, c, g, q, p1, p2, cn }
    }

    fn oracle_at(f: &Fixture, lambda: f64) -> Quadruple {
        let n = f.a.nrows();
        let gm = DMatrix::from_fn(n, n, |i, j| f.g[i] * f.g[j]);
        let p = Problem::new(&f.a + gm * lambda, f.c.clone()).unwrap();
        oracle_solve(&p).unwrap()
    }

    #[test]
    fn zero_direction_never_moves() {
        let mut f = fixture(DMatrix::identity(3, 3), vec![0.1, 0.0, 0.2], vec![0.0; 3]);
        let hit = find_lambda(&f.q, &f.p1, &f.p2, None, &mut f.cn);
        assert_eq!(hit, Hit::NONE);
        let before = (f.q.clone(), f.p1.m.to_dense(), f.p2.clone());
        update_by_lambda(0.7, &mut f.q, &mut f.p1, &mut f.p2, &mut f.cn).unwrap();
        assert_eq!(before.0, f.q);
        assert_eq!(before.1, f.p1.m.to_dense());
        assert_eq!(before.2, f.p2);
    }

    #[test]
    fn zero_increment_is_identity() {
        let mut f = fixture(seeded_spd(4, 1), vec![0.1, 0.3, 0.0, 0.2], vec![1.0, -0.5, 0.2, 0.3]);
        let before = (f.q.clone(), f.p1.m.to_dense(), f.p2.clone());
        update_by_lambda(0.0, &mut f.q, &mut f.p1, &mut f.p2, &mut f.cn).unwrap();
        assert_eq!(before.0, f.q);
        assert_eq!(before.1, f.p1.m.to_dense());
        assert_eq!(before.2, f.p2);
    }

    #[test]
    fn two_coordinates_stay_interior() {
        // min ½xᵀ(I + λe₁e₁ᵀ)x over Δ₂ gives x(λ) = (1, 1 + λ)/(2 + λ).
        let mut f = fixture(DMatrix::identity(2, 2), vec![0.0; 2], vec![1.0, 0.0]);
        let hit = find_lambda(&f.q, &f.p1, &f.p2, None, &mut f.cn);
        assert!(hit.index.is_none() || hit.inc > 1.0);
        update_by_lambda(1.0, &mut f.q, &mut f.p1, &mut f.p2, &mut f.cn).unwrap();
        let x = f.q.x();
        assert_abs_diff_eq!(x[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(x[1], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f.q.mu0(), 2.0 / 3.0, epsilon = 1e-15);
        let m = f.p1.m.to_dense();
        assert_abs_diff_eq!(m[(0, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m[(1, 1)], 1.0, epsilon = 1e-15);
        assert_eq!(m[(0, 1)], 0.0);
        assert_eq!(m[(1, 0)], 0.0);
    }

    #[test]
    fn interior_path_follows_closed_form() {
        for lam in [0.1, 0.35, 0.8] {
            let mut f = fixture(DMatrix::identity(2, 2), vec![0.0; 2], vec![1.0, 0.0]);
            update_by_lambda(lam, &mut f.q, &mut f.p1, &mut f.p2, &mut f.cn).unwrap();
            assert_abs_diff_eq!(f.q.x()[0], 1.0 / (2.0 + lam), epsilon = 1e-15);
        }
    }

        fn leave_fixture() -> Fixture {
        // A = I, c = (0.4, 0, 0): x(0) = (0.6, 0.2, 0.2). The direction
        // couples coordinates 1 and 2 so coordinate 2 is driven to zero.
        fixture(DMatrix::identity(3, 3), vec![0.4, 0.0, 0.0], vec![1.0, 3.0, 0.0])
    }

    #[test]
    fn first_event_is_index_two_leaving() {
        let mut f = leave_fixture();
        let x0 = f.q.x();
        assert_abs_diff_eq!(x0[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(x0[1], 0.2, epsilon = 1e-15);
        let hit = find_lambda(&f.q, &f.p1, &f.p2, None, &mut f.cn);
        assert_eq!(hit.index, Some(1));
        assert!(hit.inc < 1.0);

        // Bisection on the dense oracle: smallest λ with x₂(λ) = 0.
        let (mut lo, mut hi) = (0.0, 1.0);
        assert!(oracle_at(&f, hi).x()[1] < 1e-12);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if oracle_at(&f, mid).x()[1] > 1e-13 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert_abs_diff_eq!(hit.inc, 0.5 * (lo + hi), epsilon = 1e-9);
    }

    #[test]
    fn expand_with_identity_block() {
        let a = DMatrix::identity(3, 3);
        let mut s = Support::new(3, &[0]).unwrap();
        let mut p1 = init_par1(&a, &s, Layout::Dense, 1e12).unwrap();
        let mut cn = Counters::default();
        let g = [0.0; 3];
        let mut p2 = direct_update_par2(&s, &p1, &[0.0; 3], &g, &mut cn);
        expand_support_lambda(0.0, &mut s, 1, &a, &[0.0; 3], &g, &mut p1, &mut p2, &mut cn).unwrap();
        assert_eq!(s.indices(), &[0, 1]);
        let m = p1.m.to_dense();
        assert_eq!(m[(0, 0)], 1.0);
        assert_eq!(m[(1, 1)], 1.0);
        assert_eq!(m[(0, 1)], 0.0);
        assert_eq!(p1.d, 2.0);
    }

    #[test]
    fn expand_with_rank_one_term() {
        // (I + e₂e₂ᵀ) restricted to {1, 2} is diag(1, 2), so M⁺₂₂ = 1/2.
        let a = DMatrix::identity(3, 3);
        let mut s = Support::new(3, &[0]).unwrap();
        let mut p1 = init_par1(&a, &s, Layout::Dense, 1e12).unwrap();
        let mut cn = Counters::default();
        let g = [0.0, 1.0, 0.0];
        let c = [0.0; 3];
        let mut p2 = direct_update_par2(&s, &p1, &c, &g, &mut cn);
        assert_eq!(p2.eta[1], 1.0);
        expand_support_lambda(1.0, &mut s, 1, &a, &c, &g, &mut p1, &mut p2, &mut cn).unwrap();
        assert_abs_diff_eq!(p1.m.get(1, 1), 0.5, epsilon = 1e-15);
        let b = shifted_matrix(&a, &s, &g, 1.0);
        let v = validate_state(&b, &s, &p1, Some(Par2Check { par2: &p2, c: &c, g: &g }), None).unwrap();
        assert!(v.deviation <= 1e-15);
    }

    #[test]
    fn shrink_identity_block() {
        let a = DMatrix::identity(3, 3);
        let mut s = Support::new(3, &[0, 1]).unwrap();
        let mut p1 = init_par1(&a, &s, Layout::Dense, 1e12).unwrap();
        let mut cn = Counters::default();
        let mut p2 = direct_update_par2(&s, &p1, &[0.0; 3], &[0.0; 3], &mut cn);
        shrink_support_lambda(&mut s, 1, &[0.0; 3], &mut p1, &mut p2, &mut cn).unwrap();
        let mut expect = DMatrix::zeros(3, 3);
        expect[(0, 0)] = 1.0;
        assert_eq!(p1.m.to_dense(), expect);
        assert_eq!(p1.d, 1.0);
        assert_eq!(p1.eta_tilde, vec![1.0; 3]);
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn seeded_pivots_validate_and_round_trip() {
        let n = 10;
        let a = seeded_spd(n, 40);
        let c = random_vec(n, 41);
        let g = random_vec(n, 42);
        let s0 = Support::new(n, &[1, 3, 4, 8]).unwrap();
        let lambda = 0.37;
        let b = shifted_matrix(&a, &Support::full(n), &g, lambda);
        let mut cn = Counters::default();
        let mut p1 = init_par1(&b, &s0, Layout::Dense, 1e12).unwrap();
        let mut p2 = direct_update_par2(&s0, &p1, &c, &g, &mut cn);
        let orig = (p1.clone(), p2.clone());

        let mut s = s0.clone();
        expand_support_lambda(lambda, &mut s, 6, &a, &c, &g, &mut p1, &mut p2, &mut cn).unwrap();
        let v = validate_state(&b, &s, &p1, Some(Par2Check { par2: &p2, c: &c, g: &g }), None).unwrap();
        assert!(v.deviation <= 1e-10 * v.kappa, "{v:?}");

        shrink_support_lambda(&mut s, 6, &c, &mut p1, &mut p2, &mut cn).unwrap();
        assert_eq!(s, s0);
        let dm = (p1.m.to_dense() - orig.0.m.to_dense()).amax();
        assert!(dm <= 1e-12, "{dm}");
        for (x, y) in p1.eta_tilde.iter().zip(&orig.0.eta_tilde) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
        for (x, y) in p2.eta.iter().zip(&orig.1.eta) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(p1.d, orig.0.d, epsilon = 1e-12 * orig.0.d.abs().max(1.0));
        assert_abs_diff_eq!(p2.d_g, orig.1.d_g, epsilon = 1e-12);
        assert_abs_diff_eq!(p2.d_gg, orig.1.d_gg, epsilon = 1e-12);
        assert_abs_diff_eq!(p2.d_gc, orig.1.d_gc, epsilon = 1e-12);

        shrink_support_lambda(&mut s, 3, &c, &mut p1, &mut p2, &mut cn).unwrap();
        let v = validate_state(&b, &s, &p1, Some(Par2Check { par2: &p2, c: &c, g: &g }), None).unwrap();
        assert!(v.deviation <= 1e-10 * v.kappa, "{v:?}");
    }

    fn run_leg(f: &mut Fixture, audit: bool) -> LegOutcome {
        let mut mat = TrackedMatrix::new(f.a.clone(), &(0..f.a.nrows()).collect::<Vec<_>>(), false);
        let mut opts = LegOptions::for_size(f.a.nrows());
        opts.audit = audit;
        run_lambda_leg(&mut mat, &f.c, &f.g, &mut f.q, &mut f.p1, &mut f.p2, &opts, &mut f.cn).unwrap()
    }

    #[test]
    fn leg_on_zero_direction_has_no_events() {
        let mut f = fixture(seeded_spd(5, 3), random_vec(5, 4), vec![0.0; 5]);
        let q0 = f.q.clone();
        let out = run_leg(&mut f, false);
        assert!(out.events.is_empty());
        assert_eq!(f.q, q0);
    }

    #[test]
    fn leg_two_coordinates() {
        let mut f = fixture(DMatrix::identity(2, 2), vec![0.0; 2], vec![1.0, 0.0]);
        let out = run_leg(&mut f, false);
        assert!(out.events.is_empty());
        assert_abs_diff_eq!(f.q.x()[0], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn leg_end_matches_oracle_and_events_are_valid() {
        let mut total_events = 0;
        for seed in 0..300u64 {
            let n = 3 + (seed as usize % 8);
            let a = seeded_spd(n, seed);
            let c: Vec<f64> = random_vec(n, seed + 1000).iter().map(|v| 3.0 * v).collect();
            let g: Vec<f64> = random_vec(n, seed + 2000).iter().map(|v| 2.0 * v).collect();
            let mut f = fixture(a, c, g);
            let s_before = f.q.support.clone();
            let out = run_leg(&mut f, true);
            total_events += out.events.len();
            let expect = oracle_at(&f, 1.0);
            for (x, y) in f.q.x().iter().zip(expect.x()) {
                assert_abs_diff_eq!(*x, y, epsilon = 1e-7);
            }
            let mut prev = 0.0;
            let mut s = s_before;
            for e in &out.events {
                assert!(e.param >= prev);
                prev = e.param;
                s = s.toggled(e.index).unwrap();
                assert_eq!(s.indices(), &e.support_after[..]);
            }
            assert!(out.audit.max_ratio <= 1e-8, "seed {seed}: {:?}", out.audit);
        }
        assert!(total_events > 50, "{total_events}");
    }

    #[test]
    fn piecewise_validity_between_events() {
        for seed in 0..40u64 {
            let n = 6;
            let a = seeded_spd(n, seed + 500);
            let c: Vec<f64> = random_vec(n, seed + 600).iter().map(|v| 3.0 * v).collect();
            let g: Vec<f64> = random_vec(n, seed + 700).iter().map(|v| 2.0 * v).collect();
            let mut f = fixture(a, c, g);
            let mut lambda = 0.0;
            let mut skip = None;
            for _ in 0..20 {
                let hit = find_lambda(&f.q, &f.p1, &f.p2, skip, &mut f.cn);
                let seg = hit.inc.min(1.0 - lambda);
                // Interior checkpoints on a clone.
                for frac in [0.2, 0.5, 0.9] {
                    let (mut q, mut p1, mut p2) = (f.q.clone(), f.p1.clone(), f.p2.clone());
                    update_by_lambda(seg * frac, &mut q, &mut p1, &mut p2, &mut f.cn).unwrap();
                    let gm = DMatrix::from_fn(n, n, |i, j| f.g[i] * f.g[j]);
                    let p = Problem::new(&f.a + gm * (lambda + seg * frac), f.c.clone()).unwrap();
                    let r = crate::kkt::kkt_residual(&p, &q);
                    assert!(r <= 1e-9, "seed {seed}: {r}");
                }
                if hit.inc >= 1.0 - lambda {
                    break;
                }
                let j = hit.index.unwrap();
                update_by_lambda(hit.inc, &mut f.q, &mut f.p1, &mut f.p2, &mut f.cn).unwrap();
                lambda += hit.inc;
                f.q.v[j] = 0.0;
                if f.q.support.contains(j) {
                    shrink_support_lambda(&mut f.q.support, j, &f.c, &mut f.p1, &mut f.p2, &mut f.cn).unwrap();
                } else {
                    expand_support_lambda(lambda, &mut f.q.support, j, &f.a, &f.c, &f.g, &mut f.p1, &mut f.p2, &mut f.cn)
                        .unwrap();
                }
                skip = Some(j);
                let gm = DMatrix::from_fn(n, n, |i, j| f.g[i] * f.g[j]);
                let p = Problem::new(&f.a + gm * lambda, f.c.clone()).unwrap();
                let fresh = solve_given_support(&p, &f.q.support).unwrap();
                for (x, y) in fresh.v.iter().zip(&f.q.v) {
                    assert_abs_diff_eq!(*x, *y, epsilon = 1e-9);
                }
            }
        }
    }
}
