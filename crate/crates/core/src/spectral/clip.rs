use serde::{Deserialize, Serialize};

use super::circulant::circulant_spectrum;
use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::numerics::{power_iteration, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    /// Target spectral norm `C`.
    pub target: f64,
    /// Accept `sigma_1 <= C (1 + tol)`.
    pub tol: f64,
    pub max_rounds: usize,
    pub power_tol: f64,
    pub power_max_iters: usize,
}

impl ClipConfig {
    pub fn new(target: f64, tol: f64) -> Self {
        Self {
            target,
            tol,
            max_rounds: 50,
            power_tol: 1e-14,
            power_max_iters: 20_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    pub initial_sigma: f64,
    pub final_sigma: f64,
    pub rounds: usize,
    /// Whether any parameter changed.
    pub modified: bool,
    /// `final_sigma <= C (1 + tol)`
    pub within_target: bool,
    /// Last top right singular vector, reusable as a warm start.
    pub top_right_vector: Vec<f64>,
}

/// Projects a layer's spectral norm down to `C`.
///
/// Dense layers get rank-1 surgery `W += (C - sigma_1) u_1 v_1^T`, which leaves
/// every other singular direction alone. Convolutions cannot absorb a rank-1
/// update in their taps, so their linear part is rescaled by `C / sigma_1`;
/// circular 1-D convolutions use the exact closed-form `sigma_1`. Layers
/// already at or below `C (1 + tol)` are not modified.
pub fn clip_spectral_norm(
    layer: &mut Layer,
    config: &ClipConfig,
    warm_start: Option<&[f64]>,
    rng: &mut Rng,
) -> Result<ClipReport> {
    if !(config.target > 0.0) {
        return Err(Error::InvalidInput(format!(
            "clip target must be > 0, got {}",
            config.target
        )));
    }
    let limit = config.target * (1.0 + config.tol);
    let mut warm: Option<Vec<f64>> = warm_start.map(<[f64]>::to_vec);
    let mut initial = None;
    let mut rounds = 0;
    let mut modified = false;
    loop {
        let (sigma, u, v) = top_triple(layer, config, warm.as_deref(), rng)?;
        initial.get_or_insert(sigma);
        if sigma <= limit || rounds >= config.max_rounds {
            return Ok(ClipReport {
                initial_sigma: initial.unwrap_or(sigma),
                final_sigma: sigma,
                rounds,
                modified,
                within_target: sigma <= limit,
                top_right_vector: v,
            });
        }
        rounds += 1;
        modified = true;
        match layer {
            Layer::Dense(d) => d.weights.rank_one_update(config.target - sigma, &u, &v),
            Layer::Conv1d(_) | Layer::Conv2d(_) => layer.scale_linear(config.target / sigma),
        }
        // The old top vector now sits on a flat part of the spectrum; a
        // warm start from it can stall before finding the next direction.
        warm = None;
    }
}

fn top_triple(
    layer: &Layer,
    config: &ClipConfig,
    warm: Option<&[f64]>,
    rng: &mut Rng,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if let Layer::Conv1d(c) = layer {
        let sigma = circulant_spectrum(&c.filter, c.n)?.spectral_norm();
        return Ok((sigma, Vec::new(), Vec::new()));
    }
    let run = power_iteration(
        layer.as_operator(),
        warm,
        config.power_max_iters,
        config.power_tol,
        rng,
    )?;
    Ok((run.triple.sigma, run.triple.u, run.triple.v))
}
