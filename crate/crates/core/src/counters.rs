//! Scalar-multiplication tallies per sub-routine. Divisions count as
//! multiplications; additions are not counted.

use std::ops::{AddAssign, Sub};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub find_lambda: u64,
    pub update_by_lambda: u64,
    pub expand_lambda: u64,
    pub shrink_lambda: u64,
    pub find_utilde: u64,
    pub update_by_utilde: u64,
    pub expand_utilde: u64,
    pub shrink_utilde: u64,
    pub direct_update: u64,
    pub direct_utilde: u64,
}

pub const COUNTER_FIELDS: usize = 10;

impl Counters {
    pub fn total(&self) -> u64 {
        self.to_array().iter().sum()
    }

    /// Fixed field order, used by checkpoints.
    pub fn to_array(&self) -> [u64; COUNTER_FIELDS] {
        [
            self.find_lambda,
            self.update_by_lambda,
            self.expand_lambda,
            self.shrink_lambda,
            self.find_utilde,
            self.update_by_utilde,
            self.expand_utilde,
            self.shrink_utilde,
            self.direct_update,
            self.direct_utilde,
        ]
    }

    pub fn from_array(a: [u64; COUNTER_FIELDS]) -> Counters {
        Counters {
            find_lambda: a[0],
            update_by_lambda: a[1],
            expand_lambda: a[2],
            shrink_lambda: a[3],
            find_utilde: a[4],
            update_by_utilde: a[5],
            expand_utilde: a[6],
            shrink_utilde: a[7],
            direct_update: a[8],
            direct_utilde: a[9],
        }
    }
}

impl Sub for Counters {
    type Output = Counters;

    fn sub(self, o: Counters) -> Counters {
        let (a, b) = (self.to_array(), o.to_array());
        Counters::from_array(std::array::from_fn(|i| a[i] - b[i]))
    }
}

impl AddAssign for Counters {
    fn add_assign(&mut self, o: Counters) {
        let (a, b) = (self.to_array(), o.to_array());
        *self = Counters::from_array(std::array::from_fn(|i| a[i] + b[i]));
    }
}

/// Upper bound on the multiplications of one sequential step:
/// `n·s✱ + n·s·(3k_A + 1) + n·(12k_A + 2)` for the matrix leg plus
/// `n·s·(2k_c + 1) + n·(6k_c + 1)` for the vector leg, with an additive
/// slack of `100·(k_A + k_c + 1)`.
pub fn step_bound(n: usize, s: usize, s_star: usize, k_a: usize, k_c: usize) -> u64 {
    let (n, s, s_star, k_a, k_c) = (n as u64, s as u64, s_star as u64, k_a as u64, k_c as u64);
    let c1 = n * s_star + n * s * (3 * k_a + 1) + n * (12 * k_a + 2);
    let c2 = n * s * (2 * k_c + 1) + n * (6 * k_c + 1);
    c1 + c2 + 100 * (k_a + k_c + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn difference_and_total() {
        let mut a = Counters::default();
        a.find_lambda = 5;
        a.direct_utilde = 2;
        let mut b = a;
        b.expand_lambda = 7;
        assert_eq!((b - a).total(), 7);
        b += a;
        assert_eq!(b.total(), 21);
        assert_eq!(Counters::from_array(b.to_array()), b);
    }

    #[test]
    fn bound_without_turning_points() {
        // n·s✱ + n·s + 2n + n·s + n + 100
        assert_eq!(step_bound(10, 3, 5, 0, 0), 50 + 30 + 20 + 30 + 10 + 100);
    }
}
