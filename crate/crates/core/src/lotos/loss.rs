use std::collections::BTreeMap;

use rayon::prelude::*;

use super::config::{LayerSelection, LotosConfig};
use super::similarity::pair_similarity;
use crate::error::{Error, Result};
use crate::nets::{batch_loss_and_grad, Gradients, Model};
use crate::numerics::vector;

/// Replacement vectors for one `(z, j, layer)` pair: `f` stands in for model
/// `z`'s singular vectors, `g` for model `j`'s.
#[derive(Clone, Debug, PartialEq)]
pub struct PairVectors {
    pub f: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
}

/// Where the vectors inside `S_k` come from.
#[derive(Clone, Copy, Debug)]
pub enum VectorSource<'a> {
    /// Each model's current [`crate::numerics::SpectralState`].
    Spectral,
    /// Fixed vectors keyed by `(z, j, layer)` with `z < j`.
    Fixed(&'a BTreeMap<(usize, usize, usize), PairVectors>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LotosLoss {
    pub total: f64,
    /// Mean batch cross-entropy of each model.
    pub ce_terms: Vec<f64>,
    /// `lambda / (M N (N - 1)) * sum S_k`; zero for a single model.
    pub ortho_term: f64,
    /// Every monitored `|A v'_i|` and `|B v_i|`, pair-major.
    pub cross_norms: Vec<f64>,
}

impl LotosLoss {
    pub fn mean_ce(&self) -> f64 {
        self.ce_terms.iter().sum::<f64>() / self.ce_terms.len() as f64
    }
}

/// Indices of the layers taking part in orthogonalization, after checking
/// that they pair up across all models.
pub(crate) fn selected_layers(models: &[Model], config: &LotosConfig) -> Result<Vec<usize>> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidInput("empty ensemble".into()))?;
    let layers: Vec<usize> = match config.layer_selection {
        LayerSelection::FirstOnly => vec![0],
        LayerSelection::AllAffine => {
            if models.iter().any(|m| m.layers.len() != first.layers.len()) {
                return Err(Error::Shape(
                    "all-layer orthogonalization needs equal layer counts; use first_only".into(),
                ));
            }
            (0..first.layers.len()).collect()
        }
    };
    for &l in &layers {
        if models.iter().any(|m| m.layers[l].in_dim() != first.layers[l].in_dim()) {
            return Err(Error::Shape(format!("layer {l} input sizes differ across models")));
        }
    }
    Ok(layers)
}

fn spectral_vectors(model: &Model, layer: usize, k: usize) -> Result<Vec<Vec<f64>>> {
    match model.spectral.get(layer).and_then(Option::as_ref) {
        Some(s) if s.triples.len() >= k => Ok(s.right_vectors()),
        _ => Err(Error::InvalidInput(format!(
            "model {} has no top-{k} spectral state for layer {layer}",
            model.seed
        ))),
    }
}

/// Raw `sum S_k`, the monitored norms, and per-model gradients of the raw sum.
pub(crate) fn ortho_sum(
    models: &[Model],
    config: &LotosConfig,
    source: VectorSource<'_>,
    with_grad: bool,
) -> Result<(f64, Vec<f64>, Vec<Gradients>)> {
    let layers = selected_layers(models, config)?;
    let weights = config.weights();
    let mut total = 0.0;
    let mut norms = Vec::new();
    let mut grads: Vec<Gradients> = if with_grad {
        models.iter().map(Gradients::zeros_like).collect()
    } else {
        Vec::new()
    };
    for z in 0..models.len() {
        for j in z + 1..models.len() {
            for &l in &layers {
                let (vf, vg) = match source {
                    VectorSource::Spectral => (
                        spectral_vectors(&models[z], l, config.k)?,
                        spectral_vectors(&models[j], l, config.k)?,
                    ),
                    VectorSource::Fixed(map) => {
                        let p = map.get(&(z, j, l)).ok_or_else(|| {
                            Error::InvalidInput(format!("no control vectors for pair ({z}, {j}) layer {l}"))
                        })?;
                        (p.f.clone(), p.g.clone())
                    }
                };
                let s = pair_similarity(&models[z].layers[l], &models[j].layers[l], &vf, &vg, &weights, config.mal)?;
                total += s.value;
                norms.extend_from_slice(&s.norms_f);
                norms.extend_from_slice(&s.norms_g);
                if with_grad {
                    vector::axpy(1.0, &s.grad_f, &mut grads[z].layers[l]);
                    vector::axpy(1.0, &s.grad_g, &mut grads[j].layers[l]);
                }
            }
        }
    }
    Ok((total, norms, grads))
}

/// `lambda / (M N (N - 1))`, or zero when there are no pairs.
pub(crate) fn ortho_coefficient(n: usize, m: usize, lambda: f64) -> f64 {
    if n < 2 || m == 0 {
        0.0
    } else {
        lambda / (m * n * (n - 1)) as f64
    }
}

fn check_batch(xs: &[&[f64]], ys: &[usize]) -> Result<()> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::InvalidInput("batch must be non-empty with one label per input".into()));
    }
    Ok(())
}

/// Per-model mean CE and CE gradients, computed in parallel in model order.
pub(crate) fn ce_parts(models: &[Model], xs: &[&[f64]], ys: &[usize]) -> Result<Vec<(f64, Gradients)>> {
    models.par_iter().map(|m| batch_loss_and_grad(m, xs, ys)).collect()
}

/// The ensemble loss on a batch.
pub fn lotos_loss(
    models: &[Model],
    xs: &[&[f64]],
    ys: &[usize],
    config: &LotosConfig,
    source: VectorSource<'_>,
) -> Result<LotosLoss> {
    config.validate()?;
    check_batch(xs, ys)?;
    let ce_terms = models
        .par_iter()
        .map(|m| {
            let mut s = 0.0;
            for (x, &y) in xs.iter().zip(ys) {
                s += m.loss(x, y)?;
            }
            Ok(s / xs.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let m = selected_layers(models, config)?.len();
    let coef = ortho_coefficient(models.len(), m, config.lambda);
    let (raw, cross_norms) = if models.len() > 1 {
        let (raw, norms, _) = ortho_sum(models, config, source, false)?;
        (raw, norms)
    } else {
        (0.0, Vec::new())
    };
    let ortho_term = coef * raw;
    let mean_ce = ce_terms.iter().sum::<f64>() / ce_terms.len() as f64;
    Ok(LotosLoss {
        total: mean_ce + ortho_term,
        ce_terms,
        ortho_term,
        cross_norms,
    })
}

/// The ensemble loss and its exact gradient for every model, with the
/// singular vectors held fixed.
pub fn lotos_loss_grad(
    models: &[Model],
    xs: &[&[f64]],
    ys: &[usize],
    config: &LotosConfig,
    source: VectorSource<'_>,
) -> Result<(LotosLoss, Vec<Gradients>)> {
    let (loss, ce_grads, ortho_grads, coef) = loss_parts(models, xs, ys, config, source)?;
    let n = models.len() as f64;
    let grads = ce_grads
        .into_iter()
        .enumerate()
        .map(|(i, mut g)| {
            g.scale(1.0 / n);
            if let Some(o) = &ortho_grads {
                g.add_scaled(coef, &o[i]);
            }
            g
        })
        .collect();
    Ok((loss, grads))
}

/// Per-model update directions: `N` times the exact gradient, so each
/// member sees its own CE gradient at unit scale. With `lambda = 0` this is
/// exactly the single-model gradient.
pub(crate) fn training_gradients(
    models: &[Model],
    xs: &[&[f64]],
    ys: &[usize],
    config: &LotosConfig,
    source: VectorSource<'_>,
) -> Result<(LotosLoss, Vec<Gradients>)> {
    let (loss, mut grads, ortho_grads, coef) = loss_parts(models, xs, ys, config, source)?;
    if let Some(o) = ortho_grads {
        let scaled = coef * models.len() as f64;
        for (g, og) in grads.iter_mut().zip(&o) {
            g.add_scaled(scaled, og);
        }
    }
    Ok((loss, grads))
}

type Parts = (LotosLoss, Vec<Gradients>, Option<Vec<Gradients>>, f64);

fn loss_parts(
    models: &[Model],
    xs: &[&[f64]],
    ys: &[usize],
    config: &LotosConfig,
    source: VectorSource<'_>,
) -> Result<Parts> {
    config.validate()?;
    check_batch(xs, ys)?;
    let ce = ce_parts(models, xs, ys)?;
    let m = selected_layers(models, config)?.len();
    let coef = ortho_coefficient(models.len(), m, config.lambda);
    let (raw, cross_norms, ortho_grads) = if models.len() > 1 {
        let (raw, norms, g) = ortho_sum(models, config, source, config.lambda > 0.0)?;
        (raw, norms, (config.lambda > 0.0).then_some(g))
    } else {
        (0.0, Vec::new(), None)
    };
    let ce_terms: Vec<f64> = ce.iter().map(|c| c.0).collect();
    let ortho_term = coef * raw;
    let mean_ce = ce_terms.iter().sum::<f64>() / ce_terms.len() as f64;
    let loss = LotosLoss {
        total: mean_ce + ortho_term,
        ce_terms,
        ortho_term,
        cross_norms,
    };
    Ok((loss, ce.into_iter().map(|c| c.1).collect(), ortho_grads, coef))
}
