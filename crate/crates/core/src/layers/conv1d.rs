use crate::error::{Error, Result};

/// Filter taps `f_0 .. f_{T-1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvFilter {
    taps: Vec<f64>,
}

impl ConvFilter {
    pub fn new(taps: Vec<f64>) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::InvalidInput("filter needs at least one tap".into()));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidInput("filter taps must be finite".into()));
        }
        Ok(Self { taps })
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// `||f||_2^2`
    pub fn norm_sq(&self) -> f64 {
        self.taps.iter().map(|t| t * t).sum()
    }

    pub(crate) fn scale(&mut self, alpha: f64) {
        self.taps.iter_mut().for_each(|t| *t *= alpha);
    }
}

/// Single-channel circular convolution on inputs of length `n`,
/// `(A v)_i = sum_t f_t v_{(i + t) mod n}`, plus an optional shared bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1dCircular {
    pub filter: ConvFilter,
    pub n: usize,
    pub bias: Option<f64>,
}

impl Conv1dCircular {
    pub fn new(filter: ConvFilter, n: usize) -> Result<Self> {
        if filter.len() > n {
            return Err(Error::InvalidInput(format!(
                "filter length {} exceeds input length {n}",
                filter.len()
            )));
        }
        Ok(Self {
            filter,
            n,
            bias: None,
        })
    }

    pub fn with_bias(mut self, bias: f64) -> Self {
        self.bias = Some(bias);
        self
    }

    pub(super) fn apply_linear(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|i| {
                self.filter
                    .taps()
                    .iter()
                    .enumerate()
                    .map(|(t, f)| f * x[(i + t) % n])
                    .sum()
            })
            .collect()
    }

    /// Adjoint: correlation with the reversed filter, `(A^T y)_j = sum_t f_t y_{(j - t) mod n}`.
    pub(super) fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|j| {
                self.filter
                    .taps()
                    .iter()
                    .enumerate()
                    .map(|(t, f)| f * y[(j + n - t % n) % n])
                    .sum()
            })
            .collect()
    }

    pub(super) fn filter_grad(&self, x: &[f64], g: &[f64], out: &mut [f64]) {
        let n = self.n;
        for (t, o) in out.iter_mut().take(self.filter.len()).enumerate() {
            *o = (0..n).map(|i| g[i] * x[(i + t) % n]).sum();
        }
    }
}
