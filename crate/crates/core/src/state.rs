//! Cached intermediate variables of the path algorithm.
//!
//! * `Par1 = {M, η̃, D}` depends only on `(A, S)`.
//! * `Par2 = {η, D_g, D_gg, D_gc}` adds the rank-one direction `g` and `c`.
//! * `Par3 = {ξ, D_l}` adds the drift `l` of the linear term.
//!
//! `M` has `M_SS = A_SS⁻¹`, `M_{SᶜS} = −A_{SᶜS}A_SS⁻¹` and zero columns
//! outside `S`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::counters::Counters;
use crate::error::{Error, Result};
use crate::kkt::Support;
use crate::linalg::{self, axpy};

/// Storage layout of `M`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Full `n × n` column-major buffer.
    #[default]
    Dense,
    /// One `n`-slot per support column, slots recycled on shrink.
    Compressed,
}

const NO_SLOT: usize = usize::MAX;

/// Column store for `M`. Columns outside the support are structurally zero.
#[derive(Debug, Clone)]
pub struct MStore {
    n: usize,
    layout: Layout,
    data: Vec<f64>,
    slot: Vec<usize>,
    free: Vec<usize>,
    zeros: Vec<f64>,
}

impl MStore {
    pub fn new(n: usize, layout: Layout) -> Self {
        let (data, slot) = match layout {
            Layout::Dense => (vec![0.0; n * n], Vec::new()),
            Layout::Compressed => (Vec::new(), vec![NO_SLOT; n]),
        };
        MStore {
            n,
            layout,
            data,
            slot,
            free: Vec::new(),
            zeros: vec![0.0; n],
        }
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn col(&self, k: usize) -> &[f64] {
        let n = self.n;
        match self.layout {
            Layout::Dense => &self.data[k * n..(k + 1) * n],
            Layout::Compressed => match self.slot[k] {
                NO_SLOT => &self.zeros,
                s => &self.data[s * n..(s + 1) * n],
            },
        }
    }

    /// Mutable column. In the compressed layout the column must be active.
    #[inline]
    pub fn col_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.n;
        match self.layout {
            Layout::Dense => &mut self.data[k * n..(k + 1) * n],
            Layout::Compressed => {
                let s = self.slot[k];
                assert!(s != NO_SLOT, "column {k} of M is not active");
                &mut self.data[s * n..(s + 1) * n]
            }
        }
    }

    #[inline]
    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.col(k)[i]
    }

    /// Makes column `k` writable; it starts out zero.
    pub fn activate(&mut self, k: usize) {
        if self.layout == Layout::Compressed && self.slot[k] == NO_SLOT {
            let s = match self.free.pop() {
                Some(s) => s,
                None => {
                    self.data.resize(self.data.len() + self.n, 0.0);
                    self.data.len() / self.n - 1
                }
            };
            self.slot[k] = s;
        }
    }

    /// Zeroes column `k` and releases its slot.
    pub fn deactivate(&mut self, k: usize) {
        match self.layout {
            Layout::Dense => self.col_mut(k).fill(0.0),
            Layout::Compressed => {
                let s = self.slot[k];
                if s != NO_SLOT {
                    self.data[s * self.n..(s + 1) * self.n].fill(0.0);
                    self.free.push(s);
                    self.slot[k] = NO_SLOT;
                }
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, k| self.get(i, k))
    }

    /// Largest absolute entry in columns outside `support`.
    pub fn off_support_max(&self, support: &Support) -> f64 {
        support
            .complement()
            .iter()
            .map(|&k| linalg::norm_inf(self.col(k)))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct Par1 {
    pub m: MStore,
    pub eta_tilde: Vec<f64>,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Par2 {
    pub eta: Vec<f64>,
    pub d_g: f64,
    pub d_gg: f64,
    pub d_gc: f64,
}

impl Par2 {
    pub fn zero(n: usize) -> Self {
        Par2 {
            eta: vec![0.0; n],
            d_g: 0.0,
            d_gg: 0.0,
            d_gc: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Par3 {
    pub xi: Vec<f64>,
    pub d_l: f64,
}

impl Par3 {
    pub fn zero(n: usize) -> Self {
        Par3 {
            xi: vec![0.0; n],
            d_l: 0.0,
        }
    }
}

#[inline]
pub(crate) fn column(a: &DMatrix<f64>, k: usize) -> &[f64] {
    let n = a.nrows();
    &a.as_slice()[k * n..(k + 1) * n]
}

/// Builds `Par1` by factorizing `A_SS`. Only the columns of `A` in `S` are read.
pub fn init_par1(a: &DMatrix<f64>, support: &Support, layout: Layout, cond_cap: f64) -> Result<Par1> {
    let n = a.nrows();
    if support.n() != n {
        return Err(Error::DimensionMismatch {
            what: "support universe",
            expected: n,
            got: support.n(),
        });
    }
    let s = support.indices();
    let size = s.len();
    let block = DMatrix::from_fn(size, size, |r, q| a[(s[r], s[q])]);
    let (inv, cond) = linalg::spd_inverse(block).ok_or(Error::SingularSubmatrix {
        size,
        cond: f64::INFINITY,
    })?;
    if cond > cond_cap {
        return Err(Error::SingularSubmatrix { size, cond });
    }
    let mut m = MStore::new(n, layout);
    let mut tmp = vec![0.0; n];
    for (q, &k) in s.iter().enumerate() {
        tmp.fill(0.0);
        for (r, &i) in s.iter().enumerate() {
            axpy(-inv[(r, q)], column(a, i), &mut tmp);
        }
        for (r, &i) in s.iter().enumerate() {
            tmp[i] = inv[(r, q)];
        }
        m.activate(k);
        m.col_mut(k).copy_from_slice(&tmp);
    }
    let mut eta_tilde: Vec<f64> = (0..n)
        .map(|i| if support.contains(i) { 0.0 } else { 1.0 })
        .collect();
    for &k in s {
        axpy(1.0, m.col(k), &mut eta_tilde);
    }
    let d = s.iter().map(|&i| eta_tilde[i]).sum();
    Ok(Par1 { m, eta_tilde, d })
}

/// `η = g_{Sᶜ} + M_{·,S} g_S`, `D_g = 1ᵀη_S`, `D_gg = η_Sᵀg_S`, `D_gc = −η_Sᵀc_S`.
pub fn direct_update_par2(
    support: &Support,
    par1: &Par1,
    c: &[f64],
    g: &[f64],
    counters: &mut Counters,
) -> Par2 {
    let n = support.n();
    let mut eta: Vec<f64> = (0..n)
        .map(|i| if support.contains(i) { 0.0 } else { g[i] })
        .collect();
    for &k in support.indices() {
        axpy(g[k], par1.m.col(k), &mut eta);
    }
    let s = support.indices();
    let d_g = s.iter().map(|&i| eta[i]).sum();
    let d_gg = s.iter().map(|&i| eta[i] * g[i]).sum();
    let d_gc = -s.iter().map(|&i| eta[i] * c[i]).sum::<f64>();
    counters.direct_update += (n * s.len() + 2 * s.len()) as u64;
    Par2 {
        eta,
        d_g,
        d_gg,
        d_gc,
    }
}

/// `ξ = −l_{Sᶜ} − M_{·,S} l_S`, `D_l = 1ᵀξ_S`.
pub fn direct_update_par3(support: &Support, par1: &Par1, l: &[f64], counters: &mut Counters) -> Par3 {
    let n = support.n();
    let mut xi: Vec<f64> = (0..n)
        .map(|i| if support.contains(i) { 0.0 } else { -l[i] })
        .collect();
    for &k in support.indices() {
        axpy(-l[k], par1.m.col(k), &mut xi);
    }
    let d_l = support.indices().iter().map(|&i| xi[i]).sum();
    counters.direct_utilde += (n * support.len()) as u64;
    Par3 { xi, d_l }
}

/// Par2 together with the inputs that define it.
#[derive(Debug, Clone, Copy)]
pub struct Par2Check<'a> {
    pub par2: &'a Par2,
    pub c: &'a [f64],
    pub g: &'a [f64],
}

#[derive(Debug, Clone, Copy)]
pub struct Par3Check<'a> {
    pub par3: &'a Par3,
    pub l: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Validation {
    /// Largest relative deviation of any stored field from its fresh value.
    pub deviation: f64,
    /// `‖M_SS‖₁·‖A_SS‖₁` from the stored `M`.
    pub kappa: f64,
}

fn rel(delta: f64, scale: f64) -> f64 {
    if scale > 0.0 {
        delta / scale
    } else {
        delta
    }
}

fn vec_dev(stored: &[f64], fresh: &[f64]) -> f64 {
    let delta = stored
        .iter()
        .zip(fresh)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    if delta.is_nan() {
        return f64::INFINITY;
    }
    rel(delta, linalg::norm_inf(fresh))
}

fn scalar_dev(stored: f64, fresh: f64, scale: f64) -> f64 {
    let d = (stored - fresh).abs();
    if d.is_nan() {
        f64::INFINITY
    } else {
        rel(d, scale)
    }
}

/// Compares stored intermediate variables against a fresh factorization of
/// `A_SS`. Only columns of `a` in `S` are read.
pub fn validate_state(
    a: &DMatrix<f64>,
    support: &Support,
    par1: &Par1,
    par2: Option<Par2Check<'_>>,
    par3: Option<Par3Check<'_>>,
) -> Result<Validation> {
    let fresh = init_par1(a, support, par1.m.layout(), f64::INFINITY)?;
    let n = a.nrows();
    let s = support.indices();

    let m_scale = s
        .iter()
        .map(|&k| linalg::norm_inf(fresh.m.col(k)))
        .fold(0.0, f64::max);
    let mut m_delta = par1.m.off_support_max(support);
    for &k in s {
        for (x, y) in par1.m.col(k).iter().zip(fresh.m.col(k)) {
            let d = (x - y).abs();
            m_delta = if d.is_nan() { f64::INFINITY } else { m_delta.max(d) };
        }
    }
    let mut dev = rel(m_delta, m_scale);
    dev = dev.max(vec_dev(&par1.eta_tilde, &fresh.eta_tilde));
    let d_scale: f64 = s.iter().map(|&i| fresh.eta_tilde[i].abs()).sum();
    dev = dev.max(scalar_dev(par1.d, fresh.d, d_scale));

    let mut scratch = Counters::default();
    if let Some(chk) = par2 {
        let f = direct_update_par2(support, &fresh, chk.c, chk.g, &mut scratch);
        dev = dev.max(vec_dev(&chk.par2.eta, &f.eta));
        let sg: f64 = s.iter().map(|&i| f.eta[i].abs()).sum();
        let sgg: f64 = s.iter().map(|&i| (f.eta[i] * chk.g[i]).abs()).sum();
        let sgc: f64 = s.iter().map(|&i| (f.eta[i] * chk.c[i]).abs()).sum();
        dev = dev.max(scalar_dev(chk.par2.d_g, f.d_g, sg));
        dev = dev.max(scalar_dev(chk.par2.d_gg, f.d_gg, sgg));
        dev = dev.max(scalar_dev(chk.par2.d_gc, f.d_gc, sgc));
    }
    if let Some(chk) = par3 {
        let f = direct_update_par3(support, &fresh, chk.l, &mut scratch);
        dev = dev.max(vec_dev(&chk.par3.xi, &f.xi));
        let sl: f64 = s.iter().map(|&i| f.xi[i].abs()).sum();
        dev = dev.max(scalar_dev(chk.par3.d_l, f.d_l, sl));
    }

    let size = s.len();
    let m_ss = DMatrix::from_fn(size, size, |r, q| par1.m.get(s[r], s[q]));
    let a_ss = DMatrix::from_fn(size, size, |r, q| a[(s[r], s[q])]);
    let kappa = linalg::norm1(&m_ss) * linalg::norm1(&a_ss);
    debug_assert_eq!(par1.m.n(), n);
    Ok(Validation {
        deviation: dev,
        kappa,
    })
}

/// Rank-one term `λ g gᵀ` added to the base matrix during the matrix leg.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LambdaTerm<'a> {
    pub lambda: f64,
    pub eta_j: f64,
    pub g: &'a [f64],
}

/// Grows `S` by `j`: updates `M`, `η̃`, `D` and returns `(Ã_jj, γ)`.
/// `support` is the support before the change and is not modified.
pub(crate) fn expand_par1(
    a: &DMatrix<f64>,
    support: &Support,
    j: usize,
    term: Option<LambdaTerm<'_>>,
    p1: &mut Par1,
    ops: &mut u64,
) -> Result<(f64, Vec<f64>)> {
    let n = support.n();
    let s = support.indices();
    debug_assert!(!support.contains(j));
    let a_j = column(a, j);
    let m_j: Vec<f64> = s.iter().map(|&k| p1.m.get(j, k)).collect();

    let mut pivot = a_j[j] + s.iter().zip(&m_j).map(|(&k, &mk)| mk * a_j[k]).sum::<f64>();
    let mut reference = a_j[j];
    if let Some(t) = term {
        pivot += t.lambda * t.g[j] * t.eta_j;
        reference += t.lambda * t.g[j] * t.g[j];
    }
    if !(pivot > 1e-13 * reference.abs()) || !pivot.is_finite() {
        return Err(Error::DegeneratePivot {
            index: j,
            value: pivot,
        });
    }

    let outside: Vec<usize> = (0..n).filter(|&i| i != j && !support.contains(i)).collect();
    let mut gamma = vec![0.0; n];
    for &i in &outside {
        gamma[i] = -a_j[i];
    }
    for (&k, &mk) in s.iter().zip(&m_j) {
        let a_k = column(a, k);
        for &i in &outside {
            gamma[i] -= mk * a_k[i];
        }
    }
    if let Some(t) = term {
        let lg = t.lambda * t.eta_j;
        for &i in &outside {
            gamma[i] -= lg * t.g[i];
        }
        *ops += outside.len() as u64 + 2;
    }
    for (&k, &mk) in s.iter().zip(&m_j) {
        gamma[k] = mk;
    }
    gamma[j] = 1.0;

    let et = p1.eta_tilde[j];
    p1.d += et * et / pivot;
    p1.eta_tilde[j] = 0.0;
    axpy(et / pivot, &gamma, &mut p1.eta_tilde);

    for &k in s {
        let col = p1.m.col_mut(k);
        col[j] = 0.0;
        axpy(gamma[k] / pivot, &gamma, col);
    }
    p1.m.activate(j);
    axpy(1.0 / pivot, &gamma, p1.m.col_mut(j));

    let sz = s.len();
    *ops += (sz + sz * outside.len() + n + n * (sz + 1) + (sz + 1) + 3) as u64;
    Ok((pivot, gamma))
}

/// Removes `j` from `S`: updates `M`, `η̃`, `D` and returns `(M_jj, β)`.
/// `support` is the support before the change and is not modified.
pub(crate) fn shrink_par1(support: &Support, j: usize, p1: &mut Par1, ops: &mut u64) -> Result<(f64, Vec<f64>)> {
    debug_assert!(support.contains(j));
    if support.len() == 1 {
        return Err(Error::EmptySupport);
    }
    let m_jj = p1.m.get(j, j);
    if !(m_jj > 0.0) || !m_jj.is_finite() {
        return Err(Error::DegeneratePivot {
            index: j,
            value: m_jj,
        });
    }
    let n = support.n();
    let mut beta = p1.m.col(j).to_vec();
    beta[j] = -1.0;
    let rest: Vec<usize> = support.indices().iter().copied().filter(|&k| k != j).collect();
    let beta_tilde: Vec<f64> = rest.iter().map(|&k| p1.m.get(j, k)).collect();

    let et = p1.eta_tilde[j];
    p1.d -= et * et / m_jj;
    p1.eta_tilde[j] = 0.0;
    axpy(-et / m_jj, &beta, &mut p1.eta_tilde);

    for (&k, &bt) in rest.iter().zip(&beta_tilde) {
        let col = p1.m.col_mut(k);
        col[j] = 0.0;
        axpy(-bt / m_jj, &beta, col);
    }
    p1.m.deactivate(j);

    *ops += (n + n * rest.len() + rest.len() + 3) as u64;
    Ok((m_jj, beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn diag(d: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(d))
    }

    fn seeded_spd(n: usize, seed: u64) -> DMatrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &b * b.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn identity_full_support() {
        let p = init_par1(&DMatrix::identity(4, 4), &Support::full(4), Layout::Dense, 1e12).unwrap();
        assert_eq!(p.m.to_dense(), DMatrix::identity(4, 4));
        assert_eq!(p.eta_tilde, vec![1.0; 4]);
        assert_eq!(p.d, 4.0);
    }

    #[test]
    fn diagonal_two_by_two() {
        let p = init_par1(&diag(&[2.0, 1.0]), &Support::full(2), Layout::Dense, 1e12).unwrap();
        assert!((p.m.to_dense() - diag(&[0.5, 1.0])).amax() <= 1e-15);
        assert_abs_diff_eq!(p.eta_tilde[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p.eta_tilde[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.d, 1.5, epsilon = 1e-15);
    }

    #[test]
    fn identity_single_index() {
        let s = Support::new(3, &[0]).unwrap();
        let p = init_par1(&DMatrix::identity(3, 3), &s, Layout::Dense, 1e12).unwrap();
        let mut expect = DMatrix::zeros(3, 3);
        expect[(0, 0)] = 1.0;
        assert_eq!(p.m.to_dense(), expect);
        assert_eq!(p.eta_tilde, vec![1.0, 1.0, 1.0]);
        assert_eq!(p.d, 1.0);
    }

    #[test]
    fn par1_definition_on_random_support() {
        let a = seeded_spd(7, 5);
        let s = Support::new(7, &[1, 2, 5]).unwrap();
        let p = init_par1(&a, &s, Layout::Dense, 1e12).unwrap();
        let m = p.m.to_dense();
        let idx = s.indices();
        for (r, &i) in idx.iter().enumerate() {
            for (q, &k) in idx.iter().enumerate() {
                let prod: f64 = idx.iter().map(|&l| m[(i, l)] * a[(l, k)]).sum();
                let expect = if r == q { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(prod, expect, epsilon = 1e-12);
            }
        }
        // Rows outside S satisfy M_{SᶜS} + A_{SᶜS} A_SS⁻¹ = 0, i.e. (M A)_{SᶜS} = −A_{SᶜS}·… ⇒
        // M_{iS} A_SS + A_{iS} = 0.
        for i in s.complement() {
            for &k in idx {
                let v: f64 = idx.iter().map(|&l| m[(i, l)] * a[(l, k)]).sum::<f64>() + a[(i, k)];
                assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
            }
            for k in s.complement() {
                assert_eq!(m[(i, k)], 0.0);
            }
        }
    }

    #[test]
    fn par2_examples() {
        let mut cn = Counters::default();
        let p = init_par1(&DMatrix::identity(3, 3), &Support::full(3), Layout::Dense, 1e12).unwrap();
        let z = direct_update_par2(&Support::full(3), &p, &[1.0, 2.0, 3.0], &[0.0; 3], &mut cn);
        assert_eq!(z, Par2::zero(3));
        let g = [0.5, -1.0, 2.0];
        let c = [1.0, 2.0, 3.0];
        let q = direct_update_par2(&Support::full(3), &p, &c, &g, &mut cn);
        assert_eq!(q.eta, g.to_vec());
        assert_abs_diff_eq!(q.d_g, 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(q.d_gg, 5.25, epsilon = 1e-15);
        assert_abs_diff_eq!(q.d_gc, -4.5, epsilon = 1e-15);

        // η = diag(1/2, 1)(1, 1) = (1/2, 1); D_gg = 1/2 + 1; D_gc = −1/2.
        let p = init_par1(&diag(&[2.0, 1.0]), &Support::full(2), Layout::Dense, 1e12).unwrap();
        let q = direct_update_par2(&Support::full(2), &p, &[1.0, 0.0], &[1.0, 1.0], &mut cn);
        assert_abs_diff_eq!(q.eta[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(q.eta[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(q.d_g, 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(q.d_gg, 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(q.d_gc, -0.5, epsilon = 1e-15);
    }

    #[test]
    fn par3_examples() {
        let mut cn = Counters::default();
        let p = init_par1(&DMatrix::identity(3, 3), &Support::full(3), Layout::Dense, 1e12).unwrap();
        let z = direct_update_par3(&Support::full(3), &p, &[0.0; 3], &mut cn);
        assert_eq!(z.d_l, 0.0);
        assert!(z.xi.iter().all(|&v| v == 0.0));
        let q = direct_update_par3(&Support::full(3), &p, &[1.0, -2.0, 0.5], &mut cn);
        assert_eq!(q.xi, vec![-1.0, 2.0, -0.5]);
        assert_abs_diff_eq!(q.d_l, 0.5, epsilon = 1e-15);

        let p = init_par1(&diag(&[2.0, 1.0]), &Support::full(2), Layout::Dense, 1e12).unwrap();
        let q = direct_update_par3(&Support::full(2), &p, &[2.0, 0.0], &mut cn);
        assert_abs_diff_eq!(q.xi[0], -1.0, epsilon = 1e-15);
        assert_eq!(q.xi[1], 0.0);
        assert_abs_diff_eq!(q.d_l, -1.0, epsilon = 1e-15);
    }

    #[test]
    fn fresh_state_validates() {
        let a = seeded_spd(9, 2);
        let s = Support::new(9, &[0, 3, 4, 8]).unwrap();
        let p1 = init_par1(&a, &s, Layout::Dense, 1e12).unwrap();
        let g: Vec<f64> = (0..9).map(|i| (i as f64).sin()).collect();
        let c: Vec<f64> = (0..9).map(|i| (i as f64).cos()).collect();
        let mut cn = Counters::default();
        let p2 = direct_update_par2(&s, &p1, &c, &g, &mut cn);
        let p3 = direct_update_par3(&s, &p1, &g, &mut cn);
        let v = validate_state(
            &a,
            &s,
            &p1,
            Some(Par2Check { par2: &p2, c: &c, g: &g }),
            Some(Par3Check { par3: &p3, l: &g }),
        )
        .unwrap();
        assert!(v.deviation <= 1e-12, "{}", v.deviation);
        assert!(v.kappa >= 1.0);
    }

    #[test]
    fn corrupted_fields_are_detected() {
        let a = DMatrix::identity(4, 4);
        let s = Support::new(4, &[0, 1, 2]).unwrap();
        let g = [1.0, 0.0, 0.5, 0.25];
        let c = [0.0; 4];
        let mut cn = Counters::default();
        let p1 = init_par1(&a, &s, Layout::Dense, 1e12).unwrap();
        let p2 = direct_update_par2(&s, &p1, &c, &g, &mut cn);

        let mut bad = p1.clone();
        bad.m.col_mut(1)[1] += 1.0;
        assert!(validate_state(&a, &s, &bad, None, None).unwrap().deviation >= 0.5);

        let mut bad = p1.clone();
        bad.eta_tilde[3] += 1.0;
        assert!(validate_state(&a, &s, &bad, None, None).unwrap().deviation >= 0.5);

        let mut bad2 = p2.clone();
        bad2.eta[0] += 1.0;
        let v = validate_state(&a, &s, &p1, Some(Par2Check { par2: &bad2, c: &c, g: &g }), None).unwrap();
        assert!(v.deviation >= 0.5);

        let mut bad = p1.clone();
        bad.m.col_mut(3)[0] = 1.0;
        assert!(validate_state(&a, &s, &bad, None, None).unwrap().deviation >= 0.5);
    }

    #[test]
    fn layouts_agree_bitwise() {
        let a = seeded_spd(8, 9);
        let s = Support::new(8, &[1, 4, 6]).unwrap();
        let mut dense = init_par1(&a, &s, Layout::Dense, 1e12).unwrap();
        let mut comp = init_par1(&a, &s, Layout::Compressed, 1e12).unwrap();
        let mut ops = 0;
        expand_par1(&a, &s, 2, None, &mut dense, &mut ops).unwrap();
        expand_par1(&a, &s, 2, None, &mut comp, &mut ops).unwrap();
        let s2 = Support::new(8, &[1, 2, 4, 6]).unwrap();
        shrink_par1(&s2, 4, &mut dense, &mut ops).unwrap();
        shrink_par1(&s2, 4, &mut comp, &mut ops).unwrap();
        let s3 = Support::new(8, &[1, 2, 6]).unwrap();
        let g: Vec<f64> = (0..8).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        let mut cn = Counters::default();
        let pd = direct_update_par2(&s3, &dense, &g, &g, &mut cn);
        let pc = direct_update_par2(&s3, &comp, &g, &g, &mut cn);
        assert_eq!(pd, pc);
        assert_eq!(dense.m.to_dense(), comp.m.to_dense());
        assert_eq!(dense.eta_tilde, comp.eta_tilde);
        assert_eq!(
            direct_update_par3(&s3, &dense, &g, &mut cn),
            direct_update_par3(&s3, &comp, &g, &mut cn)
        );
    }

    #[test]
    fn pivot_updates_match_fresh_factorization() {
        let a = seeded_spd(10, 21);
        let s = Support::new(10, &[0, 2, 5, 7]).unwrap();
        let mut p1 = init_par1(&a, &s, Layout::Dense, 1e12).unwrap();
        let mut ops = 0;
        expand_par1(&a, &s, 3, None, &mut p1, &mut ops).unwrap();
        let s_up = s.toggled(3).unwrap();
        let v = validate_state(&a, &s_up, &p1, None, None).unwrap();
        assert!(v.deviation <= 1e-10 * v.kappa, "{v:?}");
        shrink_par1(&s_up, 5, &mut p1, &mut ops).unwrap();
        let s_dn = s_up.toggled(5).unwrap();
        let v = validate_state(&a, &s_dn, &p1, None, None).unwrap();
        assert!(v.deviation <= 1e-10 * v.kappa, "{v:?}");
    }

    #[test]
    fn shrink_guards() {
        let a = DMatrix::identity(3, 3);
        let s = Support::new(3, &[1]).unwrap();
        let mut p1 = init_par1(&a, &s, Layout::Dense, 1e12).unwrap();
        let mut ops = 0;
        assert_eq!(shrink_par1(&s, 1, &mut p1, &mut ops).unwrap_err(), Error::EmptySupport);
        let s = Support::full(3);
        let mut p1 = init_par1(&a, &s, Layout::Dense, 1e12).unwrap();
        p1.m.col_mut(2)[2] = -1.0;
        assert!(matches!(
            shrink_par1(&s, 2, &mut p1, &mut ops),
            Err(Error::DegeneratePivot { index: 2, .. })
        ));
    }

    #[test]
    fn compressed_slots_are_recycled() {
        let mut m = MStore::new(4, Layout::Compressed);
        m.activate(1);
        m.col_mut(1)[0] = 3.0;
        m.activate(2);
        m.deactivate(1);
        assert_eq!(m.col(1), &[0.0; 4]);
        m.activate(3);
        assert_eq!(m.col(3), &[0.0; 4]);
        assert_eq!(m.data.len(), 8);
    }
}
