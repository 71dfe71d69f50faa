//! Static machinery for one simplex-constrained QP
//!
//! ```text
//! minimize ½ xᵀA x − cᵀx   subject to   x ≥ 0, 1ᵀx = 1
//! ```
//!
//! with `A` symmetric positive definite. The optimum is certified by the
//! quadruple `(S, x_S, μ_{Sᶜ}, μ₀)`; given the support the other three
//! parts follow from one linear solve on `A_SS`.

use nalgebra::{Cholesky, DMatrix};

use crate::error::{Error, Result};
use crate::linalg::{self, DEFAULT_COND_CAP};

/// Relative symmetry tolerance accepted by [`Problem::new`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Sign threshold: a coordinate of `v` counts as nonzero only above
/// `1e-12 · max(1, ‖v‖∞)`.
pub fn zeta(v: &[f64]) -> f64 {
    1e-12 * linalg::norm_inf(v).max(1.0)
}

/// One instance of the simplex QP.
#[derive(Debug, Clone)]
pub struct Problem {
    a: DMatrix<f64>,
    c: Vec<f64>,
}

impl Problem {
    /// Validates shape, symmetry and positive definiteness (Cholesky attempt).
    pub fn new(a: DMatrix<f64>, c: Vec<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 {
            return Err(Error::DimensionMismatch {
                what: "matrix order",
                expected: 1,
                got: 0,
            });
        }
        if a.ncols() != n {
            return Err(Error::DimensionMismatch {
                what: "matrix columns",
                expected: n,
                got: a.ncols(),
            });
        }
        if c.len() != n {
            return Err(Error::DimensionMismatch {
                what: "linear term",
                expected: n,
                got: c.len(),
            });
        }
        let scale = a.amax().max(f64::MIN_POSITIVE);
        let asym = linalg::max_asymmetry(&a);
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::NotSymmetric { asym });
        }
        if Cholesky::new(a.clone()).is_none() {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(Problem { a, c })
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    /// Column `k` of `A` as a contiguous slice.
    pub fn col(&self, k: usize) -> &[f64] {
        let n = self.n();
        &self.a.as_slice()[k * n..(k + 1) * n]
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let n = self.n();
        let mut quad = 0.0;
        for k in 0..n {
            if x[k] != 0.0 {
                quad += x[k] * linalg::dot(self.col(k), x);
            }
        }
        0.5 * quad - linalg::dot(&self.c, x)
    }
}

/// Ordered, nonempty index set `S ⊆ {0..n}` with O(1) membership.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Support {
    idx: Vec<usize>,
    member: Vec<bool>,
}

impl Support {
    pub fn new(n: usize, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidSupport("support must be nonempty".into()));
        }
        let mut member = vec![false; n];
        let mut prev: Option<usize> = None;
        for &i in indices {
            if i >= n {
                return Err(Error::InvalidSupport(format!("index {i} out of range 0..{n}")));
            }
            if prev.is_some_and(|p| p >= i) {
                return Err(Error::InvalidSupport("indices must be strictly increasing".into()));
            }
            member[i] = true;
            prev = Some(i);
        }
        Ok(Support {
            idx: indices.to_vec(),
            member,
        })
    }

    pub fn full(n: usize) -> Self {
        Support {
            idx: (0..n).collect(),
            member: vec![true; n],
        }
    }

    /// Indices with `x_i > tol`.
    pub fn from_positive(x: &[f64], tol: f64) -> Result<Self> {
        let idx: Vec<usize> = (0..x.len()).filter(|&i| x[i] > tol).collect();
        Support::new(x.len(), &idx)
    }

    pub fn n(&self) -> usize {
        self.member.len()
    }

    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.idx
    }

    #[inline]
    pub fn contains(&self, i: usize) -> bool {
        self.member[i]
    }

    pub fn complement(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| !self.member[i]).collect()
    }

    /// `S ∖ {j}` when `j ∈ S`, otherwise `S ∪ {j}`.
    pub fn toggled(&self, j: usize) -> Result<Support> {
        let mut s = self.clone();
        if s.contains(j) {
            s.remove(j)?;
        } else {
            s.insert(j);
        }
        Ok(s)
    }

    pub(crate) fn insert(&mut self, j: usize) {
        if self.member[j] {
            return;
        }
        let pos = self.idx.partition_point(|&k| k < j);
        self.idx.insert(pos, j);
        self.member[j] = true;
    }

    pub(crate) fn remove(&mut self, j: usize) -> Result<()> {
        if !self.member[j] {
            return Ok(());
        }
        if self.idx.len() == 1 {
            return Err(Error::EmptySupport);
        }
        let pos = self.idx.partition_point(|&k| k < j);
        self.idx.remove(pos);
        self.member[j] = false;
        Ok(())
    }

    /// `|S ∖ T| + |T ∖ S|`.
    pub fn symmetric_difference_len(&self, other: &Support) -> usize {
        self.member
            .iter()
            .zip(&other.member)
            .filter(|(a, b)| a != b)
            .count()
    }
}

/// KKT certificate `(S, x_S, μ_{Sᶜ}, μ₀)` stored through the signed
/// vector `v` with `v_S = x_S` and `v_{Sᶜ} = −μ_{Sᶜ}`.
///
/// Signs are not enforced at construction: candidates produced by
/// [`solve_given_support`] may be infeasible. Use [`Quadruple::sign_violation`].
#[derive(Debug, Clone, PartialEq)]
pub struct Quadruple {
    pub(crate) support: Support,
    pub(crate) v: Vec<f64>,
    pub(crate) mu0: f64,
}

impl Quadruple {
    pub fn from_v(support: Support, v: Vec<f64>, mu0: f64) -> Result<Self> {
        if v.len() != support.n() {
            return Err(Error::DimensionMismatch {
                what: "signed vector v",
                expected: support.n(),
                got: v.len(),
            });
        }
        Ok(Quadruple { support, v, mu0 })
    }

    pub fn from_parts(support: Support, x_s: &[f64], mu_sc: &[f64], mu0: f64) -> Result<Self> {
        let n = support.n();
        if x_s.len() != support.len() || mu_sc.len() != n - support.len() {
            return Err(Error::DimensionMismatch {
                what: "quadruple parts",
                expected: n,
                got: x_s.len() + mu_sc.len(),
            });
        }
        let mut v = vec![0.0; n];
        for (&i, &xi) in support.indices().iter().zip(x_s) {
            v[i] = xi;
        }
        for (i, &m) in support.complement().iter().zip(mu_sc) {
            v[*i] = -m;
        }
        Ok(Quadruple { support, v, mu0 })
    }

    pub fn n(&self) -> usize {
        self.v.len()
    }

    pub fn support(&self) -> &Support {
        &self.support
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn mu0(&self) -> f64 {
        self.mu0
    }

    /// Full primal vector (zeros off the support).
    pub fn x(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.n()];
        for &i in self.support.indices() {
            x[i] = self.v[i];
        }
        x
    }

    /// Full multiplier vector (`μ_S = 0`).
    pub fn mu(&self) -> Vec<f64> {
        (0..self.n())
            .map(|i| if self.support.contains(i) { 0.0 } else { -self.v[i] })
            .collect()
    }

    pub fn x_s(&self) -> Vec<f64> {
        self.support.indices().iter().map(|&i| self.v[i]).collect()
    }

    pub fn mu_sc(&self) -> Vec<f64> {
        self.support.complement().iter().map(|&i| -self.v[i]).collect()
    }

    /// Largest sign violation: `max(0, −min x_S, −min μ_{Sᶜ})`.
    pub fn sign_violation(&self) -> f64 {
        (0..self.n()).fold(0.0_f64, |w, i| {
            let signed = if self.support.contains(i) { self.v[i] } else { -self.v[i] };
            w.max(-signed)
        })
    }
}

/// Solves the KKT equalities for a fixed support; no sign check.
pub fn solve_given_support(problem: &Problem, support: &Support) -> Result<Quadruple> {
    solve_given_support_capped(problem, support, DEFAULT_COND_CAP)
}

pub fn solve_given_support_capped(
    problem: &Problem,
    support: &Support,
    cond_cap: f64,
) -> Result<Quadruple> {
    let n = problem.n();
    if support.n() != n {
        return Err(Error::DimensionMismatch {
            what: "support universe",
            expected: n,
            got: support.n(),
        });
    }
    let s = support.indices();
    let a = problem.a();
    let block = DMatrix::from_fn(s.len(), s.len(), |r, q| a[(s[r], s[q])]);
    let size = s.len();
    let chol = Cholesky::new(block.clone()).ok_or(Error::SingularSubmatrix {
        size,
        cond: f64::INFINITY,
    })?;
    let inv = chol.inverse();
    let cond = linalg::norm1(&block) * linalg::norm1(&inv);
    if !cond.is_finite() || cond > cond_cap {
        return Err(Error::SingularSubmatrix { size, cond });
    }
    let ones = nalgebra::DVector::from_element(size, 1.0);
    let c_s = nalgebra::DVector::from_iterator(size, s.iter().map(|&i| problem.c[i]));
    let w1 = chol.solve(&ones);
    let wc = chol.solve(&c_s);
    let mu0 = (1.0 - wc.sum()) / w1.sum();
    let x_s = &w1 * mu0 + &wc;

    let mut v = vec![0.0; n];
    for (r, &i) in s.iter().enumerate() {
        v[i] = x_s[r];
    }
    for i in support.complement() {
        // -μ_i = μ₀ + c_i − (A_{i,S} x_S)
        let ax: f64 = s.iter().enumerate().map(|(r, &k)| a[(i, k)] * x_s[r]).sum();
        v[i] = mu0 + problem.c[i] - ax;
    }
    Ok(Quadruple {
        support: support.clone(),
        v,
        mu0,
    })
}

/// Max-norm KKT residual of `(x, μ, μ₀)` given as full vectors.
///
/// Combines stationarity `‖Ax − μ₀1 − μ − c‖∞`, `|1ᵀx − 1|`,
/// complementarity `max|μᵢxᵢ|` and the two sign violations.
pub fn kkt_residual_parts(problem: &Problem, x: &[f64], mu: &[f64], mu0: f64) -> f64 {
    residual_with_columns(problem.n(), |k| problem.col(k), problem.c(), x, mu, mu0)
}

pub fn kkt_residual(problem: &Problem, q: &Quadruple) -> f64 {
    kkt_residual_parts(problem, &q.x(), &q.mu(), q.mu0)
}

/// Residual evaluation that reads only the columns of `A` where `x ≠ 0`.
pub(crate) fn residual_with_columns<'a, F>(
    n: usize,
    col: F,
    c: &[f64],
    x: &[f64],
    mu: &[f64],
    mu0: f64,
) -> f64
where
    F: Fn(usize) -> &'a [f64],
{
    let mut r: Vec<f64> = (0..n).map(|i| -mu0 - mu[i] - c[i]).collect();
    for (k, &xk) in x.iter().enumerate() {
        if xk != 0.0 {
            linalg::axpy(xk, col(k), &mut r);
        }
    }
    let mut res = linalg::norm_inf(&r);
    res = res.max((x.iter().sum::<f64>() - 1.0).abs());
    for i in 0..n {
        res = res.max((mu[i] * x[i]).abs());
        res = res.max(-x[i]).max(-mu[i]);
    }
    res
}

/// Options for [`oracle_solve_with`].
#[derive(Debug, Clone, Copy)]
pub struct OracleOptions {
    /// Cap on working-set changes; `None` means `50·n`.
    pub max_changes: Option<usize>,
    /// Use exhaustive enumeration when the active-set pass fails and `n ≤ 12`.
    pub enumerate_fallback: bool,
    pub cond_cap: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            max_changes: None,
            enumerate_fallback: true,
            cond_cap: DEFAULT_COND_CAP,
        }
    }
}

/// Largest `n` for which exhaustive support enumeration is attempted.
pub const ENUMERATION_MAX_N: usize = 12;

/// Global optimum by a primal active-set method started at the barycenter.
pub fn oracle_solve(problem: &Problem) -> Result<Quadruple> {
    let n = problem.n();
    oracle_solve_with(problem, &vec![1.0 / n as f64; n], OracleOptions::default())
}

/// Same as [`oracle_solve`] but warm-started from a feasible `x0`.
pub fn oracle_solve_from(problem: &Problem, x0: &[f64]) -> Result<Quadruple> {
    oracle_solve_with(problem, x0, OracleOptions::default())
}

pub fn oracle_solve_with(problem: &Problem, x0: &[f64], opts: OracleOptions) -> Result<Quadruple> {
    let n = problem.n();
    let attempt = active_set(problem, x0, &opts);
    match attempt {
        Ok(q) => Ok(q),
        Err(e) if opts.enumerate_fallback && n <= ENUMERATION_MAX_N => {
            log::debug!("active-set oracle failed ({e}); falling back to enumeration");
            enumerate_solve(problem)
        }
        Err(e) => Err(e),
    }
}

fn active_set(problem: &Problem, x0: &[f64], opts: &OracleOptions) -> Result<Quadruple> {
    let n = problem.n();
    if x0.len() != n {
        return Err(Error::DimensionMismatch {
            what: "starting point",
            expected: n,
            got: x0.len(),
        });
    }
    let max_changes = opts.max_changes.unwrap_or(50 * n);
    // Feasible start: clip and renormalize.
    let mut x: Vec<f64> = x0.iter().map(|&v| v.max(0.0)).collect();
    let total: f64 = x.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        x = vec![1.0 / n as f64; n];
    } else {
        x.iter_mut().for_each(|v| *v /= total);
    }
    let mut free: Vec<bool> = x.iter().map(|&v| v > 0.0).collect();
    let scale = problem.a().amax().max(linalg::norm_inf(problem.c())).max(1.0);
    let mult_tol = 1e-13 * scale;

    let mut changes = 0usize;
    let mut iterations = 0usize;
    while changes <= max_changes && iterations <= 4 * max_changes + 10 {
        iterations += 1;
        let f: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
        let support = Support::new(n, &f)?;
        let cand = solve_given_support_capped(problem, &support, opts.cond_cap)?;
        let step_norm = f.iter().fold(0.0_f64, |m, &i| m.max((cand.v[i] - x[i]).abs()));
        if step_norm <= 1e-15 * linalg::norm_inf(&x).max(1.0) {
            // Stationary on the working set: inspect multipliers of fixed bounds.
            let mut worst: Option<(usize, f64)> = None;
            for i in 0..n {
                if !free[i] {
                    let mu = -cand.v[i];
                    if mu < -mult_tol && worst.is_none_or(|(_, w)| mu < w) {
                        worst = Some((i, mu));
                    }
                }
            }
            match worst {
                None => return finish(problem, &cand, opts),
                Some((i, _)) => {
                    free[i] = true;
                    changes += 1;
                }
            }
            continue;
        }
        let mut alpha = 1.0_f64;
        let mut blocking = None;
        for &i in &f {
            let p = cand.v[i] - x[i];
            if p < 0.0 {
                let r = x[i] / -p;
                if r < alpha {
                    alpha = r;
                    blocking = Some(i);
                }
            }
        }
        match blocking {
            None => {
                for &i in &f {
                    x[i] = cand.v[i];
                }
            }
            Some(b) => {
                for &i in &f {
                    x[i] += alpha * (cand.v[i] - x[i]);
                }
                x[b] = 0.0;
                free[b] = false;
                changes += 1;
                if !free.iter().any(|&m| m) {
                    return Err(Error::NoConvergence { iterations });
                }
            }
        }
    }
    Err(Error::NoConvergence { iterations })
}

fn finish(problem: &Problem, cand: &Quadruple, opts: &OracleOptions) -> Result<Quadruple> {
    let x = cand.x();
    let tol = zeta(&x);
    let support = Support::from_positive(&x, tol)?;
    let q = if support == cand.support {
        cand.clone()
    } else {
        solve_given_support_capped(problem, &support, opts.cond_cap)?
    };
    let scale = problem.a().amax().max(1.0);
    if q.sign_violation() > 1e-10 * scale {
        return Err(Error::NoConvergence { iterations: 0 });
    }
    Ok(q)
}

/// Exhaustive oracle: solves every nonempty support and keeps the
/// KKT-feasible candidate with the smallest objective. `O(2ⁿ)`.
pub fn enumerate_solve(problem: &Problem) -> Result<Quadruple> {
    let n = problem.n();
    if n > 24 {
        return Err(Error::InvalidSupport(format!(
            "enumeration over 2^{n} supports refused"
        )));
    }
    let scale = problem.a().amax().max(linalg::norm_inf(problem.c())).max(1.0);
    let tol = 1e-10 * scale;
    let mut best: Option<(f64, Quadruple)> = None;
    for mask in 1u32..(1u32 << n) {
        let idx: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
        let support = Support::new(n, &idx)?;
        let Ok(q) = solve_given_support(problem, &support) else {
            continue;
        };
        if q.sign_violation() > tol {
            continue;
        }
        let obj = problem.objective(&q.x());
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, q));
        }
    }
    best.map(|(_, q)| q).ok_or(Error::NoConvergence { iterations: 1 << n })
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_simplex(y: &[f64]) -> Vec<f64> {
    let theta = simplex_threshold(y);
    y.iter().map(|&v| (v - theta).max(0.0)).collect()
}

/// Threshold `θ` with `xᵢ = max(yᵢ − θ, 0)` for the projection of `y`.
pub fn simplex_threshold(y: &[f64]) -> f64 {
    let mut u = y.to_vec();
    u.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    theta
}
