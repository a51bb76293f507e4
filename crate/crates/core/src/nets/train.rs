use serde::{Deserialize, Serialize};

use super::adversarial::{adversarial_train_step, AdvTrainConfig};
use super::model::{Gradients, Model};
use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::numerics::{power_iteration, Rng};
use crate::spectral::{circulant_spectrum, clip_spectral_norm, ClipConfig, ClipReport};

/// Stream index of a model's private RNG (clipping, attack starts).
pub(crate) const MODEL_STREAM: u64 = 0x7261_696e;
const LIPSCHITZ_STREAM: u64 = 0x6c69_7073;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Spectral-norm target `C`; `None` trains unclipped.
    pub clip: Option<f64>,
    pub clip_tol: f64,
    /// Seeds the batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            weight_decay: 5e-4,
            momentum: 0.9,
            epochs: 20,
            batch_size: 32,
            clip: None,
            clip_tol: 1e-2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.batch_size > 0
            && self.clip_tol > 0.0
            && self.clip.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config: {self:?}")))
        }
    }

    /// Per-step clipping settings; looser power tolerance than one-off clips.
    pub fn clip_config(&self) -> Option<ClipConfig> {
        self.clip.map(|c| ClipConfig {
            power_tol: 1e-10,
            power_max_iters: 5_000,
            ..ClipConfig::new(c, self.clip_tol)
        })
    }
}

/// Momentum buffers, one per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(model: &Model) -> Self {
        Self {
            velocity: Gradients::zeros_like(model).layers,
        }
    }
}

/// `theta -= lr * (grad + wd * theta)` through the momentum buffer, then
/// clips every layer when `config.clip` is set.
pub fn sgd_step(
    model: &mut Model,
    grads: &Gradients,
    config: &TrainConfig,
    opt: &mut Sgd,
    rng: &mut Rng,
) -> Result<Vec<ClipReport>> {
    if grads.layers.len() != model.layers.len() {
        return Err(Error::Shape("gradient layer count differs from model".into()));
    }
    for ((layer, g), vel) in model.layers.iter_mut().zip(&grads.layers).zip(&mut opt.velocity) {
        let mut p = layer.params();
        if g.len() != p.len() {
            return Err(Error::Shape("gradient length differs from layer".into()));
        }
        for i in 0..p.len() {
            let d = g[i] + config.weight_decay * p[i];
            vel[i] = config.momentum * vel[i] + d;
            p[i] -= config.learning_rate * vel[i];
        }
        layer.set_params(&p)?;
    }
    if !model.is_finite() {
        return Err(Error::NonFinite("parameters after SGD step".into()));
    }
    match config.clip_config() {
        Some(cc) => clip_model(model, &cc, rng),
        None => Ok(Vec::new()),
    }
}

/// Clips every affine layer of `model` to `config.target`.
pub fn clip_model(model: &mut Model, config: &ClipConfig, rng: &mut Rng) -> Result<Vec<ClipReport>> {
    model
        .layers
        .iter_mut()
        .map(|l| clip_spectral_norm(l, config, None, rng))
        .collect()
}

/// Mean cross-entropy and mean parameter gradient over a batch.
pub fn batch_loss_and_grad(model: &Model, xs: &[&[f64]], ys: &[usize]) -> Result<(f64, Gradients)> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::InvalidInput("batch must be non-empty with one label per input".into()));
    }
    let mut total = Gradients::zeros_like(model);
    let mut loss = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let (l, g, _) = model.loss_and_grad(x, y)?;
        loss += l;
        total.add_scaled(1.0, &g);
    }
    let scale = 1.0 / xs.len() as f64;
    total.scale(scale);
    Ok((loss * scale, total))
}

/// `sqrt(2) * prod sigma_1(layer)`: an upper bound on the input-Lipschitz
/// constant of softmax cross-entropy composed with the network.
///
/// The softmax-CE logit gradient is `p - e_y`, whose norm is at most
/// `sqrt((1 - p_y)^2 + sum_{i != y} p_i^2) <= sqrt(2)`; ReLU is 1-Lipschitz.
pub fn loss_lipschitz_bound(model: &Model) -> Result<f64> {
    let mut rng = Rng::new(model.seed).derive(LIPSCHITZ_STREAM);
    let mut bound = std::f64::consts::SQRT_2;
    for layer in &model.layers {
        let sigma = match layer {
            Layer::Conv1d(c) => circulant_spectrum(&c.filter, c.n)?.spectral_norm(),
            _ => power_iteration(layer.as_operator(), None, 100_000, 1e-6, &mut rng)?.triple.sigma,
        };
        bound *= sigma;
    }
    Ok(bound)
}

/// Shuffled mini-batch index lists for one epoch; the last batch may be short.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean batch loss at every step.
    pub losses: Vec<f64>,
    /// Largest post-clip `sigma_1` at every step; empty when unclipped.
    pub max_sigma: Vec<f64>,
}

/// Mini-batch SGD over `epochs` passes, optionally with adversarial batches.
pub fn train_model(
    model: &mut Model,
    inputs: &[Vec<f64>],
    labels: &[usize],
    config: &TrainConfig,
    adv: Option<&AdvTrainConfig>,
) -> Result<TrainHistory> {
    config.validate()?;
    if inputs.is_empty() || inputs.len() != labels.len() {
        return Err(Error::InvalidInput("dataset must be non-empty with one label per input".into()));
    }
    let mut data_rng = Rng::new(config.seed);
    let mut model_rng = Rng::new(model.seed).derive(MODEL_STREAM);
    let mut opt = Sgd::new(model);
    let mut history = TrainHistory::default();
    for _ in 0..config.epochs {
        for batch in epoch_batches(inputs.len(), config.batch_size, &mut data_rng) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| inputs[i].as_slice()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, reports) = match adv {
                Some(a) if a.enabled => {
                    adversarial_train_step(model, &xs, &ys, a, config, &mut opt, &mut model_rng)?
                }
                _ => {
                    let (loss, g) = batch_loss_and_grad(model, &xs, &ys)?;
                    (loss, sgd_step(model, &g, config, &mut opt, &mut model_rng)?)
                }
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {}", history.losses.len())));
            }
            history.losses.push(loss);
            if !reports.is_empty() {
                history.max_sigma.push(reports.iter().map(|r| r.final_sigma).fold(0.0, f64::max));
            }
        }
    }
    Ok(history)
}
