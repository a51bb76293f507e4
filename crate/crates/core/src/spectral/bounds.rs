use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::circulant::{circulant_spectrum, fourier_basis_vector};
use crate::error::{Error, Result};
use crate::layers::{Conv1dCircular, ConvFilter, Layer};
use crate::numerics::{svd_oracle, vector, Rng};

/// Additive slack every bound check allows for round-off.
pub const BOUND_SLACK: f64 = 1e-9;

fn rate_term(filter: &ConvFilter, n: usize, numerator: f64) -> f64 {
    let t = filter.len() as f64;
    PI * filter.norm_sq() * t * t * numerator / n as f64
}

/// `pi ||f||^2 T^2 p / n`: upper bound on `sigma_1^2 - sigma_p^2`.
pub fn lemma_gap_bound(filter: &ConvFilter, n: usize, p: usize) -> f64 {
    rate_term(filter, n, p as f64)
}

/// `pi ||f||^2 T^2 (p + 1) / n`: upper bound on `sigma_j^2 - sigma_{j+p}^2`.
pub fn corollary_gap_bound(filter: &ConvFilter, n: usize, j: usize, p: usize) -> Result<f64> {
    if j < 1 || j + p > n {
        return Err(Error::InvalidInput(format!(
            "corollary indices need 1 <= j and j + p <= n, got j = {j}, p = {p}, n = {n}"
        )));
    }
    Ok(rate_term(filter, n, (p + 1) as f64))
}

/// `sqrt(eps^2 + pi ||f||^2 T^2 p / n)`: bound on `||A v'_p||` given `||A v'_1|| <= eps`.
pub fn theorem_cross_bound(eps: f64, filter: &ConvFilter, n: usize, p: usize) -> f64 {
    (eps * eps + rate_term(filter, n, p as f64)).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub p: usize,
    pub measured: f64,
    pub bound: f64,
    pub holds: bool,
}

impl BoundRecord {
    fn new(p: usize, measured: f64, bound: f64) -> Self {
        Self {
            p,
            measured,
            bound,
            holds: measured <= bound + BOUND_SLACK,
        }
    }
}

/// Worst case over `j` of `sigma_j^2 - sigma_{j+p}^2` against its bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorollaryRecord {
    pub p: usize,
    /// The `j` with the smallest slack `bound - measured`.
    pub worst_j: usize,
    pub measured: f64,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremRecord {
    pub p: usize,
    /// `||A v'_p||_2`
    pub measured: f64,
    pub bound: f64,
    pub holds: bool,
    /// Fourier index of `v'_p` in the second layer's ranking.
    pub fourier_index: usize,
    /// Circular distance between the Fourier indices of `v'_p` and `v'_1`.
    pub frequency_offset: usize,
    /// `frequency_offset <= p / 2`: the neighbourhood condition under which
    /// the cross bound follows from the gap argument.
    pub neighbourhood: bool,
}

/// Gap and cross-layer checks for one pair of circular filters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub n: usize,
    /// Length of the first filter.
    pub t: usize,
    /// `||f_a||_2^2`
    pub filter_norm_sq: f64,
    /// `||A v'_1||_2`
    pub epsilon: f64,
    /// Sorted singular values of `A` from the materialized oracle.
    pub sorted_singular_values: Vec<f64>,
    pub lemma: Vec<BoundRecord>,
    pub corollary: Vec<CorollaryRecord>,
    pub theorem: Vec<TheoremRecord>,
}

impl BoundReport {
    pub fn lemma_holds(&self) -> bool {
        self.lemma.iter().all(|r| r.holds)
    }

    pub fn corollary_holds(&self) -> bool {
        self.corollary.iter().all(|r| r.holds)
    }

    pub fn theorem_holds(&self) -> bool {
        self.theorem.iter().all(|r| r.holds)
    }

    /// Cross bound restricted to the `p` whose vectors satisfy the neighbourhood condition.
    pub fn theorem_holds_in_neighbourhood(&self) -> bool {
        self.theorem.iter().filter(|r| r.neighbourhood).all(|r| r.holds)
    }

    pub fn holds(&self) -> bool {
        self.lemma_holds() && self.corollary_holds() && self.theorem_holds()
    }
}

/// Materializes `A` from `filter_a`, feeds it the real Fourier singular
/// vectors of `B` in `B`'s ranked order, and checks every `p` against the
/// cross bound with `eps = ||A v'_1||`. The gap bounds are checked on `A`'s
/// own oracle spectrum.
pub fn verify_circulant_bounds(
    filter_a: &ConvFilter,
    filter_b: &ConvFilter,
    n: usize,
) -> Result<BoundReport> {
    if filter_b.len() > n {
        return Err(Error::InvalidInput(format!(
            "second filter length {} exceeds n = {n}",
            filter_b.len()
        )));
    }
    let a: Layer = Conv1dCircular::new(filter_a.clone(), n)?.into();
    let a_matrix = a.materialize()?;
    let sorted = svd_oracle(&a_matrix)?.singular_values;
    let sq: Vec<f64> = sorted.iter().map(|s| s * s).collect();

    let lemma = (1..=n)
        .map(|p| BoundRecord::new(p, sq[0] - sq[p - 1], lemma_gap_bound(filter_a, n, p)))
        .collect();

    let mut corollary = Vec::with_capacity(n);
    for p in 0..n {
        let bound = corollary_gap_bound(filter_a, n, 1, p)?;
        let (worst_j, measured) = (1..=n - p)
            .map(|j| (j, sq[j - 1] - sq[j + p - 1]))
            .fold((1, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        corollary.push(CorollaryRecord {
            p,
            worst_j,
            measured,
            bound,
            holds: measured <= bound + BOUND_SLACK,
        });
    }

    let ranking = circulant_spectrum(filter_b, n)?.ranked_indices();
    let cross: Vec<f64> = ranking
        .iter()
        .map(|&j| vector::norm(&a_matrix.matvec(&fourier_basis_vector(n, j))))
        .collect();
    let epsilon = cross[0];
    let top = ranking[0];
    let theorem = ranking
        .iter()
        .zip(&cross)
        .enumerate()
        .map(|(i, (&j, &measured))| {
            let p = i + 1;
            let diff = j.abs_diff(top);
            let offset = diff.min(n - diff);
            let bound = theorem_cross_bound(epsilon, filter_a, n, p);
            TheoremRecord {
                p,
                measured,
                bound,
                holds: measured <= bound + BOUND_SLACK,
                fourier_index: j,
                frequency_offset: offset,
                neighbourhood: 2 * offset <= p,
            }
        })
        .collect();

    Ok(BoundReport {
        n,
        t: filter_a.len(),
        filter_norm_sq: filter_a.norm_sq(),
        epsilon,
        sorted_singular_values: sorted,
        lemma,
        corollary,
        theorem,
    })
}

/// Outcome of [`run_bound_trials`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundTrialSummary {
    pub trials: usize,
    pub lemma_violations: usize,
    pub corollary_violations: usize,
    /// Trials with any violated cross bound.
    pub theorem_violations: usize,
    /// Trials violating a cross bound whose vector is in the neighbourhood.
    pub neighbourhood_violations: usize,
    /// `(T, n, filter_a, filter_b)` of the first failing trial.
    pub first_failure: Option<(usize, usize, Vec<f64>, Vec<f64>)>,
}

impl BoundTrialSummary {
    pub fn all_hold(&self) -> bool {
        self.lemma_violations == 0 && self.corollary_violations == 0 && self.theorem_violations == 0
    }
}

/// Runs [`verify_circulant_bounds`] on `trials` seeded random filter pairs
/// with lengths in `2..=t_max` and `n` in `max(8, 2 t_max)..=n_max`.
pub fn run_bound_trials(trials: usize, seed: u64, t_max: usize, n_max: usize) -> Result<BoundTrialSummary> {
    let n_min = 8.max(2 * t_max);
    if t_max < 2 || n_max < n_min {
        return Err(Error::InvalidInput(format!(
            "need t_max >= 2 and n_max >= {n_min}, got t_max = {t_max}, n_max = {n_max}"
        )));
    }
    let mut rng = Rng::new(seed);
    let mut summary = BoundTrialSummary {
        trials,
        ..BoundTrialSummary::default()
    };
    for _ in 0..trials {
        let t = rng.int_range(2, t_max);
        let n = rng.int_range(n_min, n_max);
        let tb = rng.int_range(2, t_max);
        let a = rng.normal_vec(t);
        let b = rng.normal_vec(tb);
        let r = verify_circulant_bounds(&ConvFilter::new(a.clone())?, &ConvFilter::new(b.clone())?, n)?;
        summary.lemma_violations += usize::from(!r.lemma_holds());
        summary.corollary_violations += usize::from(!r.corollary_holds());
        summary.theorem_violations += usize::from(!r.theorem_holds());
        summary.neighbourhood_violations += usize::from(!r.theorem_holds_in_neighbourhood());
        if !r.holds() && summary.first_failure.is_none() {
            summary.first_failure = Some((t, n, a, b));
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn filter(t: &[f64]) -> ConvFilter {
        ConvFilter::new(t.to_vec()).unwrap()
    }

    #[test]
    fn lemma_example() {
        let f = filter(&[1.0, 1.0]);
        let b = lemma_gap_bound(&f, 4, 2);
        assert!((b - 4.0 * PI).abs() < 1e-12);
        let sq = circulant_spectrum(&f, 4).unwrap().sorted_squared();
        assert!((sq[0] - sq[1] - 2.0).abs() < 1e-12);
        assert!(sq[0] - sq[1] <= b);
    }

    #[test]
    fn corollary_examples() {
        let f = filter(&[1.0, 1.0]);
        let sq = circulant_spectrum(&f, 4).unwrap().sorted_squared();
        let b = corollary_gap_bound(&f, 4, 1, 1).unwrap();
        assert!((b - 4.0 * PI).abs() < 1e-12);
        assert!((sq[0] - sq[1] - 2.0).abs() < 1e-12);
        assert!((sq[1] - sq[2]).abs() < 1e-12);
        let b0 = corollary_gap_bound(&f, 4, 2, 0).unwrap();
        assert!((b0 - PI * 2.0 * 4.0 / 4.0).abs() < 1e-12);
        assert!(corollary_gap_bound(&f, 4, 0, 1).is_err());
        assert!(corollary_gap_bound(&f, 4, 3, 2).is_err());
    }

    #[test]
    fn theorem_examples() {
        let f = filter(&[1.0, 1.0]);
        assert_eq!(theorem_cross_bound(0.0, &f, 4, 0), 0.0);
        let b = theorem_cross_bound(0.1, &f, 4, 1);
        assert!((b - (0.01 + 2.0 * PI).sqrt()).abs() < 1e-12);
        assert!((b - 2.5086).abs() < 1e-4);
        let mut last = 0.0;
        for p in 0..10 {
            let v = theorem_cross_bound(0.3, &f, 16, p);
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn self_comparison_measures_own_spectrum() {
        let f = filter(&[0.3, -1.2, 0.7]);
        let r = verify_circulant_bounds(&f, &f, 16).unwrap();
        for (rec, s) in r.theorem.iter().zip(&r.sorted_singular_values) {
            assert!((rec.measured - s).abs() < 1e-10);
        }
        assert!(r.holds());
    }

    #[test]
    fn flat_first_filter() {
        let mut rng = Rng::new(2);
        let b = filter(&rng.normal_vec(4));
        let r = verify_circulant_bounds(&filter(&[1.0]), &b, 12).unwrap();
        assert!((r.epsilon - 1.0).abs() < 1e-12);
        assert!(r.theorem.iter().all(|t| (t.measured - 1.0).abs() < 1e-12));
        assert!(r.holds());
    }

    #[test]
    fn gap_bounds_hold_on_random_filters() {
        let mut rng = Rng::new(9);
        for _ in 0..200 {
            let t = rng.int_range(2, 5);
            let n = rng.int_range(8, 40);
            let fa = filter(&(0..t).map(|_| rng.uniform_range(-1.0, 1.0)).collect::<Vec<_>>());
            let tb = rng.int_range(2, 5);
            let fb = filter(&rng.normal_vec(tb));
            let r = verify_circulant_bounds(&fa, &fb, n).unwrap();
            assert!(r.lemma_holds() && r.corollary_holds());
            assert!(r.theorem_holds_in_neighbourhood());
        }
    }

    #[test]
    fn cross_bound_can_fail_outside_neighbourhood() {
        // A has its peak where B's second-ranked vector sits, far from B's top frequency.
        // B = [1, 0, 0.9] at n = 32 peaks at j = 0 and again near j = 16.
        let fa = filter(&[1.0, -1.0]);
        let fb = filter(&[1.0, 0.0, 0.9]);
        let r = verify_circulant_bounds(&fa, &fb, 32).unwrap();
        let violated: Vec<_> = r.theorem.iter().filter(|t| !t.holds).collect();
        assert!(!violated.is_empty());
        assert!(violated.iter().all(|t| !t.neighbourhood));
        assert!(r.theorem_holds_in_neighbourhood());
    }

    #[test]
    fn trial_runner_is_deterministic() {
        let a = run_bound_trials(20, 5, 5, 64).unwrap();
        assert_eq!(a, run_bound_trials(20, 5, 5, 64).unwrap());
        assert_eq!(a.trials, 20);
        assert_eq!(a.lemma_violations + a.corollary_violations, 0);
        assert_eq!(a.neighbourhood_violations, 0);
        assert!(run_bound_trials(1, 0, 1, 64).is_err());
    }
}
