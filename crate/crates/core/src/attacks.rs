//! Projected gradient descent attacks under an L2 or L-infinity ball,
//! targeted or untargeted, against a single model or a mean-softmax ensemble.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::Model;
use crate::numerics::{vector, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L2,
    Linf,
}

impl std::fmt::Display for Norm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Norm::L2 => "l2",
            Norm::Linf => "linf",
        })
    }
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(Norm::L2),
            "linf" => Ok(Norm::Linf),
            other => Err(Error::Config(format!("unknown norm '{other}' (expected l2 or linf)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub norm: Norm,
    pub random_start: bool,
    /// Target class; `None` is an untargeted attack on the true label.
    pub targeted: Option<usize>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::new(0.04, 50, Norm::L2)
    }
}

impl AttackConfig {
    /// Step size `2.5 * epsilon / steps`, no random start, untargeted.
    pub fn new(epsilon: f64, steps: usize, norm: Norm) -> Self {
        let step_size = if steps > 0 && epsilon > 0.0 {
            2.5 * epsilon / steps as f64
        } else {
            1.0
        };
        Self {
            epsilon,
            steps,
            step_size,
            norm,
            random_start: false,
            targeted: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if self.steps > 0 && !(self.step_size > 0.0) {
            return Err(Error::Config(format!("step size must be > 0, got {}", self.step_size)));
        }
        Ok(())
    }
}

/// Anything PGD can differentiate: a classifier with an input gradient.
pub trait AttackTarget: Sync {
    fn input_dim(&self) -> usize;
    fn classes(&self) -> usize;
    /// Cross-entropy at `x` for `label` and its gradient with respect to `x`.
    fn loss_and_input_grad(&self, x: &[f64], label: usize) -> Result<(f64, Vec<f64>)>;
    fn predict(&self, x: &[f64]) -> Result<usize>;
}

impl AttackTarget for Model {
    fn input_dim(&self) -> usize {
        Model::input_dim(self)
    }

    fn classes(&self) -> usize {
        Model::classes(self)
    }

    fn loss_and_input_grad(&self, x: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        let (loss, _, gx) = self.loss_and_grad(x, label)?;
        Ok((loss, gx))
    }

    fn predict(&self, x: &[f64]) -> Result<usize> {
        Model::predict(self, x)
    }
}

impl AttackTarget for [Model] {
    fn input_dim(&self) -> usize {
        self.first().map_or(0, Model::input_dim)
    }

    fn classes(&self) -> usize {
        self.first().map_or(0, Model::classes)
    }

    fn loss_and_input_grad(&self, x: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        ensemble_loss_for_attack(self, x, label)
    }

    fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(crate::evaluation::ensemble_predict(self, x)?.0)
    }
}

/// Cross-entropy of the mean member softmax, with its input gradient.
///
/// Works in log space: `ln pbar_y = logsumexp_i(ln p_iy) - ln N`, and member
/// `i` receives logit gradient `-(w_i / N)(e_y - p_i)` with
/// `w_i = p_iy / pbar_y`.
pub fn ensemble_loss_for_attack(models: &[Model], x: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if models.is_empty() {
        return Err(Error::InvalidInput("empty ensemble".into()));
    }
    if label >= models[0].classes() {
        return Err(Error::InvalidInput(format!("label {label} out of range")));
    }
    let passes = models.iter().map(|m| m.forward(x)).collect::<Result<Vec<_>>>()?;
    let log_py: Vec<f64> = passes.iter().map(|p| -p.loss(label)).collect();
    let max = log_py.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + log_py.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let n = models.len() as f64;
    let loss = -(lse - n.ln());
    let mut grad = vec![0.0; x.len()];
    for ((m, pass), lp) in models.iter().zip(&passes).zip(&log_py) {
        let w = (lp - lse).exp();
        let mut dz: Vec<f64> = pass.probabilities.iter().map(|p| w * p).collect();
        dz[label] -= w;
        let (_, gx) = m.backward(pass, &dz)?;
        vector::axpy(1.0, &gx, &mut grad);
    }
    Ok((loss, grad))
}

fn project(x: &mut [f64], x0: &[f64], config: &AttackConfig) {
    match config.norm {
        Norm::L2 => {
            let mut delta = vector::sub(x, x0);
            let r = vector::norm(&delta);
            if r > config.epsilon {
                vector::scale(&mut delta, config.epsilon / r);
            }
            for ((xi, &x0i), d) in x.iter_mut().zip(x0).zip(&delta) {
                *xi = (x0i + d).clamp(0.0, 1.0);
            }
        }
        Norm::Linf => {
            for (xi, &x0i) in x.iter_mut().zip(x0) {
                let d = (*xi - x0i).clamp(-config.epsilon, config.epsilon);
                *xi = (x0i + d).clamp(0.0, 1.0);
            }
        }
    }
}

fn random_start(x0: &[f64], config: &AttackConfig, rng: &mut Rng) -> Vec<f64> {
    let d = x0.len();
    let delta: Vec<f64> = match config.norm {
        Norm::L2 => {
            let r = config.epsilon * rng.uniform().powf(1.0 / d as f64);
            rng.unit_vector(d).into_iter().map(|u| r * u).collect()
        }
        Norm::Linf => (0..d).map(|_| rng.uniform_range(-config.epsilon, config.epsilon)).collect(),
    };
    let mut x: Vec<f64> = x0.iter().zip(&delta).map(|(a, b)| a + b).collect();
    project(&mut x, x0, config);
    x
}

/// PGD: ascend the loss on `y` (or descend on the target class) with
/// normalized steps, projecting onto the ball and then clamping to `[0, 1]`.
///
/// A proposal that would worsen the objective is rejected and the step size
/// halved, so the objective is monotone across accepted iterates.
pub fn pgd_attack<T: AttackTarget + ?Sized>(
    target: &T,
    x: &[f64],
    y: usize,
    config: &AttackConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    config.validate()?;
    if x.len() != target.input_dim() {
        return Err(Error::Shape(format!(
            "attack input has length {}, target expects {}",
            x.len(),
            target.input_dim()
        )));
    }
    if y >= target.classes() {
        return Err(Error::InvalidInput(format!("label {y} out of range")));
    }
    if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidInput("attack input outside [0, 1]".into()));
    }
    if config.epsilon == 0.0 {
        return Ok(x.to_vec());
    }
    let mut current = if config.random_start {
        random_start(x, config, rng)
    } else {
        x.to_vec()
    };
    if config.steps == 0 {
        return Ok(current);
    }
    let (label, sign) = match config.targeted {
        Some(t) if t >= target.classes() => {
            return Err(Error::InvalidInput(format!("target class {t} out of range")))
        }
        Some(t) => (t, -1.0),
        None => (y, 1.0),
    };
    let objective = |z: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (l, g) = target.loss_and_input_grad(z, label)?;
        Ok((sign * l, g.into_iter().map(|v| sign * v).collect()))
    };
    let (mut value, mut grad) = objective(&current)?;
    let mut step = config.step_size;
    for _ in 0..config.steps {
        let direction: Vec<f64> = match config.norm {
            Norm::L2 => {
                let n = vector::norm(&grad);
                if n == 0.0 {
                    break;
                }
                grad.iter().map(|g| g / n).collect()
            }
            Norm::Linf => {
                if grad.iter().all(|g| *g == 0.0) {
                    break;
                }
                grad.iter().map(|g| if *g == 0.0 { 0.0 } else { g.signum() }).collect()
            }
        };
        let mut proposal: Vec<f64> = current.iter().zip(&direction).map(|(c, d)| c + step * d).collect();
        project(&mut proposal, x, config);
        let (v, g) = objective(&proposal)?;
        if v >= value {
            current = proposal;
            value = v;
            grad = g;
        } else {
            step *= 0.5;
        }
    }
    Ok(current)
}

/// PGD over a batch in parallel; each sample's randomness is keyed by its
/// content so results do not depend on batch order.
pub fn pgd_batch<T: AttackTarget + ?Sized>(
    target: &T,
    xs: &[Vec<f64>],
    ys: &[usize],
    config: &AttackConfig,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidInput("one label per input required".into()));
    }
    xs.par_iter()
        .zip(ys.par_iter())
        .map(|(x, &y)| pgd_attack(target, x, y, config, &mut Rng::for_sample(seed, x, y)))
        .collect()
}
