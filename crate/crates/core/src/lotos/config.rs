use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelection {
    AllAffine,
    FirstOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LotosConfig {
    pub k: usize,
    /// Per-direction weights; `None` means `w_i = 1 / i`.
    pub weights: Option<Vec<f64>>,
    pub mal: f64,
    pub lambda: f64,
    pub layer_selection: LayerSelection,
    /// Warm-started power steps per training iteration.
    pub refresh_steps: usize,
    /// Full re-convergence period in iterations.
    pub reconverge_every: usize,
    pub reconverge_tol: f64,
    pub reconverge_max_iters: usize,
}

impl Default for LotosConfig {
    fn default() -> Self {
        Self {
            k: 1,
            weights: None,
            mal: 0.8,
            lambda: 1.0,
            layer_selection: LayerSelection::AllAffine,
            refresh_steps: 1,
            reconverge_every: 100,
            reconverge_tol: 1e-4,
            reconverge_max_iters: 10_000,
        }
    }
}

impl LotosConfig {
    pub fn weights(&self) -> Vec<f64> {
        match &self.weights {
            Some(w) => w.clone(),
            None => (1..=self.k).map(|i| 1.0 / i as f64).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let w = self.weights();
        if w.len() != self.k {
            return Err(Error::Config(format!("{} weights given for k = {}", w.len(), self.k)));
        }
        if w.iter().any(|x| !(*x > 0.0) || !x.is_finite()) || w.windows(2).any(|p| p[1] > p[0]) {
            return Err(Error::Config("weights must be positive and non-increasing".into()));
        }
        if !(self.mal >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config("mal and lambda must be >= 0".into()));
        }
        if self.reconverge_every == 0 || !(self.reconverge_tol > 0.0) {
            return Err(Error::Config("re-convergence period and tolerance must be positive".into()));
        }
        Ok(())
    }
}
