//! Vector leg: follow the optimum of `½xᵀAx − (c + λ̃l)ᵀx` over the simplex
//! as `λ̃` runs from 0 to 1. With `A` fixed the path is affine between
//! turning points:
//!
//! ```text
//! v(λ̃)  = v − (ξ − (D_l/D) η̃) λ̃
//! μ₀(λ̃) = μ₀ + (D_l/D) λ̃
//! ```

use nalgebra::DMatrix;

use crate::counters::Counters;
use crate::error::{Error, Result};
use crate::kkt::{Quadruple, Support};
use crate::linalg::axpy;
use crate::path_matrix::{min_ratio, EventKind, Hit, Leg, LegOptions, LegOutcome, PathEvent};
use crate::state::{
    direct_update_par3, expand_par1, init_par1, shrink_par1, validate_state, Par1, Par3, Par3Check,
};
use crate::tracked::TrackedMatrix;

/// Next turning point of the vector leg, as an increment from the current `λ̃`.
pub fn find_utilde_lambda(q: &Quadruple, p1: &Par1, p3: &Par3, skip: Option<usize>, counters: &mut Counters) -> Hit {
    let n = q.v.len();
    let r = p3.d_l / p1.d;
    let best = min_ratio(q, skip, |i| {
        let y = r * p1.eta_tilde[i];
        (p3.xi[i] - y, p3.xi[i].abs() + y.abs())
    });
    counters.find_utilde += (n + 1) as u64 + best.map_or(0, |_| n as u64);
    match best {
        Some((inc, j)) => Hit { inc, index: Some(j) },
        None => Hit::NONE,
    }
}

/// Moves the quadruple by `inc` along `λ̃`; the intermediate variables do
/// not depend on `λ̃`.
pub fn update_by_utilde_lambda(inc: f64, q: &mut Quadruple, p1: &Par1, p3: &Par3, counters: &mut Counters) {
    let n = q.v.len();
    let r = p3.d_l / p1.d;
    let ri = r * inc;
    for i in 0..n {
        q.v[i] -= inc * p3.xi[i] - ri * p1.eta_tilde[i];
    }
    q.mu0 += ri;
    counters.update_by_utilde += (2 * n + 2) as u64;
}

/// `j` enters the support; `a` is the (fixed) matrix of the leg.
pub fn expand_support_utilde(
    support: &mut Support,
    j: usize,
    a: &DMatrix<f64>,
    p1: &mut Par1,
    p3: &mut Par3,
    counters: &mut Counters,
) -> Result<()> {
    if support.contains(j) {
        return Err(Error::InvalidSupport(format!("index {j} already in the support")));
    }
    let xi_j = p3.xi[j];
    let et_j = p1.eta_tilde[j];
    let mut ops = 0u64;
    let (pivot, gamma) = expand_par1(a, support, j, None, p1, &mut ops)?;
    p3.d_l += xi_j * et_j / pivot;
    p3.xi[j] = 0.0;
    axpy(xi_j / pivot, &gamma, &mut p3.xi);
    ops += (p3.xi.len() + 3) as u64;
    support.insert(j);
    counters.expand_utilde += ops;
    Ok(())
}

/// `j` leaves the support.
pub fn shrink_support_utilde(
    support: &mut Support,
    j: usize,
    p1: &mut Par1,
    p3: &mut Par3,
    counters: &mut Counters,
) -> Result<()> {
    if !support.contains(j) {
        return Err(Error::InvalidSupport(format!("index {j} not in the support")));
    }
    let xi_j = p3.xi[j];
    let et_j = p1.eta_tilde[j];
    let mut ops = 0u64;
    let (m_jj, beta) = shrink_par1(support, j, p1, &mut ops)?;
    p3.d_l -= xi_j * et_j / m_jj;
    p3.xi[j] = 0.0;
    axpy(-xi_j / m_jj, &beta, &mut p3.xi);
    ops += (p3.xi.len() + 3) as u64;
    support.remove(j)?;
    counters.shrink_utilde += ops;
    Ok(())
}

/// Runs the vector leg from `λ̃ = 0` to `λ̃ = 1` on the current tracked
/// matrix. On exit `q` is optimal for `(A, c + l)`.
pub fn run_utilde_leg(
    mat: &mut TrackedMatrix,
    l: &[f64],
    q: &mut Quadruple,
    p1: &mut Par1,
    p3: &mut Par3,
    opts: &LegOptions,
    counters: &mut Counters,
) -> Result<LegOutcome> {
    let mut out = LegOutcome {
        s_max: q.support.len(),
        ..Default::default()
    };
    let mut at = 0.0_f64;
    let mut skip: Option<usize> = None;
    let mut retried = false;
    loop {
        let hit = find_utilde_lambda(q, p1, p3, skip, counters);
        let remaining = 1.0 - at;
        let j = match hit.index {
            Some(j) if hit.inc < remaining => j,
            _ => {
                update_by_utilde_lambda(remaining, q, p1, p3, counters);
                break;
            }
        };
        if out.events.len() >= opts.cycle_cap {
            return Err(Error::CycleLimit { cap: opts.cycle_cap });
        }
        update_by_utilde_lambda(hit.inc, q, p1, p3, counters);
        at += hit.inc;
        q.v[j] = 0.0;
        let res = if q.support.contains(j) {
            shrink_support_utilde(&mut q.support, j, p1, p3, counters)
        } else {
            mat.ensure(j);
            expand_support_utilde(&mut q.support, j, mat.matrix(), p1, p3, counters)
        };
        match res {
            Ok(()) => {
                skip = Some(j);
                out.s_max = out.s_max.max(q.support.len());
                let kind = if q.support.contains(j) {
                    EventKind::Enter
                } else {
                    EventKind::Leave
                };
                out.events.push(PathEvent {
                    leg: Leg::Vector,
                    param: at,
                    index: j,
                    kind,
                    support_after: q.support.indices().to_vec(),
                });
                if opts.audit {
                    let v = validate_state(mat.matrix(), &q.support, p1, None, Some(Par3Check { par3: p3, l }))?;
                    out.audit.record(v.deviation, v.kappa);
                }
            }
            Err(e) if e.is_degenerate() && !retried => {
                log::warn!("vector leg at λ̃ = {at}: {e}; rebuilding");
                retried = true;
                *p1 = init_par1(mat.matrix(), &q.support, opts.layout, opts.cond_cap)?;
                *p3 = direct_update_par3(&q.support, p1, l, &mut Counters::default());
                out.rebuilds += 1;
                skip = None;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}
