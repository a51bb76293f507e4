use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ConvFilter;

/// Round-off threshold below which negative squared singular values are clamped to 0.
const CLAMP_THRESHOLD: f64 = -1e-12;

/// `c_i = sum_t f_t f_{t+i}` for `i = 0 .. T-1`.
pub fn autocorrelation_coeffs(filter: &ConvFilter) -> Vec<f64> {
    let f = filter.taps();
    (0..f.len())
        .map(|i| f.iter().zip(&f[i..]).map(|(a, b)| a * b).sum())
        .collect()
}

/// Squared singular values of the `n x n` circulant built from a filter,
/// indexed by Fourier index `j` (not sorted).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CirculantSpectrum {
    pub n: usize,
    pub coeffs: Vec<f64>,
    /// `s_j^2` for `j = 0 .. n-1`.
    pub values: Vec<f64>,
}

impl CirculantSpectrum {
    /// `s_j` in Fourier order.
    pub fn singular_values(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.sqrt()).collect()
    }

    /// Fourier indices sorted by `s_j^2` descending, ties by ascending `j`.
    pub fn ranked_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n).collect();
        idx.sort_by(|&a, &b| self.values[b].total_cmp(&self.values[a]).then(a.cmp(&b)));
        idx
    }

    pub fn sorted_squared(&self) -> Vec<f64> {
        self.ranked_indices().into_iter().map(|j| self.values[j]).collect()
    }

    pub fn sorted_singular_values(&self) -> Vec<f64> {
        self.sorted_squared().into_iter().map(f64::sqrt).collect()
    }

    pub fn spectral_norm(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max).sqrt()
    }
}

/// `s_j^2 = c_0 + 2 sum_{i>=1} c_i cos(2 pi j i / n)`.
pub fn circulant_spectrum(filter: &ConvFilter, n: usize) -> Result<CirculantSpectrum> {
    if filter.len() > n {
        return Err(Error::InvalidInput(format!(
            "filter length {} exceeds n = {n}",
            filter.len()
        )));
    }
    let coeffs = autocorrelation_coeffs(filter);
    let values = (0..n)
        .map(|j| {
            let mut s = coeffs[0];
            for (i, c) in coeffs.iter().enumerate().skip(1) {
                // Reduce j*i mod n first so the angle stays small and exact-ish.
                let k = (j * i) % n;
                s += 2.0 * c * (2.0 * PI * k as f64 / n as f64).cos();
            }
            if s < 0.0 && s >= CLAMP_THRESHOLD * coeffs[0].max(1.0) {
                0.0
            } else {
                s.max(0.0)
            }
        })
        .collect();
    Ok(CirculantSpectrum { n, coeffs, values })
}

/// Real unit right-singular vector of a real circulant for Fourier index `j`.
///
/// `j = 0` and `j = n/2` give the constant and alternating vectors; otherwise
/// `j < n/2` gives the cosine and `j > n/2` the sine of frequency
/// `min(j, n - j)`, so conjugate pairs map to an orthonormal pair.
pub fn fourier_basis_vector(n: usize, j: usize) -> Vec<f64> {
    assert!(j < n, "Fourier index {j} out of range for n = {n}");
    let nf = n as f64;
    if j == 0 {
        return vec![1.0 / nf.sqrt(); n];
    }
    if 2 * j == n {
        return (0..n)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 } / nf.sqrt())
            .collect();
    }
    let scale = (2.0 / nf).sqrt();
    let freq = j.min(n - j);
    (0..n)
        .map(|i| {
            let angle = 2.0 * PI * ((freq * i) % n) as f64 / nf;
            scale * if j < n - j { angle.cos() } else { angle.sin() }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Conv1dCircular, Layer};
    use crate::numerics::{svd_oracle, vector, Rng};

    fn filter(t: &[f64]) -> ConvFilter {
        ConvFilter::new(t.to_vec()).unwrap()
    }

    #[test]
    fn autocorrelation_examples() {
        assert_eq!(autocorrelation_coeffs(&filter(&[1.0, 1.0])), vec![2.0, 1.0]);
        assert_eq!(autocorrelation_coeffs(&filter(&[1.0, 2.0, 3.0])), vec![14.0, 8.0, 3.0]);
        assert_eq!(autocorrelation_coeffs(&filter(&[5.0])), vec![25.0]);
    }

    #[test]
    fn two_tap_spectrum() {
        let s = circulant_spectrum(&filter(&[1.0, 1.0]), 4).unwrap();
        let expected = [4.0, 2.0, 0.0, 2.0];
        for (a, b) in s.values.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{:?}", s.values);
        }
        // Brute force: SVD of the materialized circulant.
        let layer: Layer = Conv1dCircular::new(filter(&[1.0, 1.0]), 4).unwrap().into();
        let sv = svd_oracle(&layer.materialize().unwrap()).unwrap().singular_values;
        for (a, b) in s.sorted_singular_values().iter().zip(&sv) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(s.ranked_indices(), vec![0, 1, 3, 2]);
    }

    #[test]
    fn identity_and_zero_filters() {
        let s = circulant_spectrum(&filter(&[1.0]), 9).unwrap();
        assert!(s.singular_values().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let z = circulant_spectrum(&filter(&[0.0, 0.0]), 8).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn filter_longer_than_input_is_rejected() {
        assert!(matches!(
            circulant_spectrum(&filter(&[1.0, 2.0, 3.0]), 2),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn values_never_negative() {
        let mut rng = Rng::new(3);
        for _ in 0..500 {
            let t = rng.int_range(1, 5);
            let n = rng.int_range(t.max(2), 40);
            let f = filter(&rng.normal_vec(t));
            assert!(circulant_spectrum(&f, n).unwrap().values.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn fourier_vectors_are_orthonormal_singular_vectors() {
        let mut rng = Rng::new(5);
        for n in [5usize, 8, 13] {
            let basis: Vec<Vec<f64>> = (0..n).map(|j| fourier_basis_vector(n, j)).collect();
            for a in 0..n {
                for b in 0..n {
                    let d = vector::dot(&basis[a], &basis[b]);
                    let e = if a == b { 1.0 } else { 0.0 };
                    assert!((d - e).abs() < 1e-12, "n={n} ({a},{b}) -> {d}");
                }
            }
            let f = filter(&rng.normal_vec(3));
            let spec = circulant_spectrum(&f, n).unwrap();
            let layer: Layer = Conv1dCircular::new(f, n).unwrap().into();
            for (j, v) in basis.iter().enumerate() {
                let norm = vector::norm(&layer.as_operator().apply(v));
                assert!((norm - spec.values[j].sqrt()).abs() < 1e-10);
            }
        }
    }
}
