//! The sequence matrix `A⁽ᵗ⁾ = A⁽⁰⁾ + Σ g⁽ˢ⁾g⁽ˢ⁾ᵀ` with lazy column updates.
//!
//! Only columns in `S✱` (every index ever visited by a support) are kept
//! current. A column entering `S✱` is caught up by replaying the logged
//! directions in order, so its bits match an eagerly updated column.

use nalgebra::DMatrix;

use crate::linalg::axpy;
use crate::state::column;

#[derive(Debug, Clone)]
pub struct TrackedMatrix {
    a: DMatrix<f64>,
    log: Vec<f64>,
    steps: usize,
    star: Vec<bool>,
    star_count: usize,
    lazy: bool,
}

impl TrackedMatrix {
    /// `initial` seeds `S✱`. With `lazy = false` every column is updated
    /// on every step.
    pub fn new(a0: DMatrix<f64>, initial: &[usize], lazy: bool) -> Self {
        let n = a0.nrows();
        let mut star = vec![false; n];
        for &i in initial {
            star[i] = true;
        }
        let star_count = star.iter().filter(|&&b| b).count();
        TrackedMatrix {
            a: a0,
            log: Vec::new(),
            steps: 0,
            star,
            star_count,
            lazy,
        }
    }

    pub(crate) fn from_parts(a: DMatrix<f64>, log: Vec<f64>, star: Vec<bool>, lazy: bool) -> Self {
        let n = a.nrows();
        let steps = if n == 0 { 0 } else { log.len() / n };
        let star_count = star.iter().filter(|&&b| b).count();
        TrackedMatrix {
            a,
            log,
            steps,
            star,
            star_count,
            lazy,
        }
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn is_lazy(&self) -> bool {
        self.lazy
    }

    /// Stored matrix. Columns outside `S✱` may be stale in lazy mode.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn col(&self, k: usize) -> &[f64] {
        column(&self.a, k)
    }

    pub fn s_star(&self) -> usize {
        self.star_count
    }

    pub fn in_s_star(&self, j: usize) -> bool {
        self.star[j]
    }

    pub(crate) fn star_flags(&self) -> &[bool] {
        &self.star
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn log(&self) -> &[f64] {
        &self.log
    }

    /// Adds `j` to `S✱`, replaying all logged directions on column `j` first.
    pub fn ensure(&mut self, j: usize) {
        if self.star[j] {
            return;
        }
        if self.lazy {
            let n = self.n();
            let col = &mut self.a.as_mut_slice()[j * n..(j + 1) * n];
            for s in 0..self.steps {
                let g = &self.log[s * n..(s + 1) * n];
                axpy(g[j], g, col);
            }
        }
        self.star[j] = true;
        self.star_count += 1;
    }

    /// `A ← A + g gᵀ` on the tracked columns; `g` is appended to the log.
    pub fn apply(&mut self, g: &[f64]) {
        let n = self.n();
        assert_eq!(g.len(), n);
        let data = self.a.as_mut_slice();
        for k in 0..n {
            if !self.lazy || self.star[k] {
                axpy(g[k], g, &mut data[k * n..(k + 1) * n]);
            }
        }
        self.log.extend_from_slice(g);
        self.steps += 1;
    }

    /// Fully current copy of the matrix.
    pub fn materialize(&self) -> DMatrix<f64> {
        let mut m = self.clone();
        for j in 0..self.n() {
            m.ensure(j);
        }
        m.a
    }
}
