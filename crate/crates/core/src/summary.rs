//! Aggregate statistics over a run.

use serde::{Deserialize, Serialize};

use crate::driver::StepReport;

pub const SUMMARY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub version: u32,
    pub solver: String,
    pub n: usize,
    pub steps: usize,
    pub support_mean: f64,
    /// Population standard deviation.
    pub support_std: f64,
    pub support_min: usize,
    pub support_max: usize,
    /// Fraction of steps with no excess turning point.
    pub zero_excess_fraction: f64,
    /// Same, with excess counted per leg.
    pub zero_excess_legs_fraction: f64,
    pub excess_q99: usize,
    pub excess_q999: usize,
    pub excess_max: usize,
    pub turning_points: usize,
    pub kkt_residual_max: f64,
    pub wall_ns: u64,
    pub wall_total_ns: u64,
    pub mult_count: u64,
    /// Steps whose multiplication tally exceeds the per-step bound.
    pub bound_violations: usize,
    pub epoch: usize,
    /// Cumulative solve time (seconds) at the end of each epoch; a trailing
    /// partial epoch is included.
    pub epoch_cumulative_s: Vec<f64>,
}

/// Nearest-rank quantile: the smallest value with at least `q·len`
/// observations at or below it.
pub fn nearest_rank(sorted: &[usize], q: f64) -> usize {
    if sorted.is_empty() {
        return 0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl Summary {
    /// `count_bound` enables the multiplication-bound check, which only
    /// makes sense for instrumented solvers.
    pub fn from_reports(solver: &str, n: usize, reports: &[StepReport], epoch: usize, count_bound: bool) -> Summary {
        let steps = reports.len();
        let sizes: Vec<f64> = reports.iter().map(|r| r.support_size as f64).collect();
        let mean = if steps > 0 { sizes.iter().sum::<f64>() / steps as f64 } else { 0.0 };
        let var = if steps > 0 {
            sizes.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / steps as f64
        } else {
            0.0
        };
        let mut excess: Vec<usize> = reports.iter().map(|r| r.e_t).collect();
        excess.sort_unstable();
        let epoch = epoch.max(1);
        let mut epochs = Vec::new();
        let mut acc = 0u64;
        for (i, r) in reports.iter().enumerate() {
            acc += r.wall_ns;
            if (i + 1) % epoch == 0 || i + 1 == steps {
                epochs.push(acc as f64 * 1e-9);
            }
        }
        Summary {
            version: SUMMARY_VERSION,
            solver: solver.to_string(),
            n,
            steps,
            support_mean: mean,
            support_std: var.sqrt(),
            support_min: reports.iter().map(|r| r.support_size).min().unwrap_or(0),
            support_max: reports.iter().map(|r| r.support_size).max().unwrap_or(0),
            zero_excess_fraction: if steps > 0 {
                excess.iter().filter(|&&e| e == 0).count() as f64 / steps as f64
            } else {
                0.0
            },
            zero_excess_legs_fraction: if steps > 0 {
                reports.iter().filter(|r| r.e_legs == 0).count() as f64 / steps as f64
            } else {
                0.0
            },
            excess_q99: nearest_rank(&excess, 0.99),
            excess_q999: nearest_rank(&excess, 0.999),
            excess_max: excess.last().copied().unwrap_or(0),
            turning_points: reports.iter().map(|r| r.k_t).sum(),
            kkt_residual_max: reports.iter().map(|r| r.kkt_residual).fold(0.0, f64::max),
            wall_ns: reports.iter().map(|r| r.wall_ns).sum(),
            wall_total_ns: reports.iter().map(|r| r.wall_total_ns).sum(),
            mult_count: reports.iter().map(|r| r.mult_count).sum(),
            bound_violations: if count_bound {
                reports.iter().filter(|r| !r.within_bound(n)).count()
            } else {
                0
            },
            epoch,
            epoch_cumulative_s: epochs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(t: usize, size: usize, e: usize, ns: u64) -> StepReport {
        StepReport {
            t,
            k_a: 2 * e,
            k_c: 0,
            k_t: 2 * e,
            e_t: e,
            e_legs: e,
            sym_diff: 0,
            support_size: size,
            kkt_residual: 1e-14,
            refined: false,
            wall_ns: ns,
            wall_total_ns: ns + 1,
            mult_count: 0,
            rebuilds: 0,
            s_max: size,
            s_star: size,
            iterations: 0,
            audit: None,
        }
    }

    #[test]
    fn quantiles_by_nearest_rank() {
        let mut v: Vec<usize> = vec![0; 995];
        v.extend([1, 1, 1, 2, 5]);
        assert_eq!(nearest_rank(&v, 0.99), 0);
        assert_eq!(nearest_rank(&v, 0.999), 2);
        assert_eq!(nearest_rank(&v, 1.0), 5);
        assert_eq!(nearest_rank(&[], 0.5), 0);
        assert_eq!(nearest_rank(&[7], 0.0), 7);
    }

    #[test]
    fn aggregates() {
        let reports: Vec<_> = (1..=5).map(|t| report(t, t, usize::from(t == 3), 1_000_000_000)).collect();
        let s = Summary::from_reports("hones", 10, &reports, 2, false);
        assert_eq!(s.steps, 5);
        assert_eq!(s.support_mean, 3.0);
        assert!((s.support_std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!((s.support_min, s.support_max), (1, 5));
        assert_eq!(s.zero_excess_fraction, 0.8);
        assert_eq!(s.excess_max, 1);
        assert_eq!(s.turning_points, 2);
        assert_eq!(s.epoch_cumulative_s, vec![2.0, 4.0, 5.0]);
        assert_eq!(s.wall_total_ns, 5_000_000_005);
    }

    #[test]
    fn empty_run() {
        let s = Summary::from_reports("oracle", 3, &[], 250, true);
        assert_eq!(s.steps, 0);
        assert!(s.epoch_cumulative_s.is_empty());
    }
}
