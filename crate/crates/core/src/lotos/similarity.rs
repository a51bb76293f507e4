use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::numerics::{vector, LinearOperator};

/// `S_k` for one layer pair with its gradients and the monitored norms.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSimilarity {
    pub value: f64,
    /// Gradient for `layer_f` in its flat parameter layout (bias slots zero).
    pub grad_f: Vec<f64>,
    pub grad_g: Vec<f64>,
    /// `|A v'_i|` for each `i`.
    pub norms_f: Vec<f64>,
    /// `|B v_i|` for each `i`.
    pub norms_g: Vec<f64>,
}

/// One side of `S_k`: `sum_i w_i relu(|A u_i| - mal)` and its gradient in `A`.
fn one_side(layer: &Layer, vectors: &[Vec<f64>], weights: &[f64], mal: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let mut value = 0.0;
    let mut grad = vec![0.0; layer.param_count()];
    let mut norms = Vec::with_capacity(vectors.len());
    for (u, &w) in vectors.iter().zip(weights) {
        if u.len() != layer.in_dim() {
            return Err(Error::Shape(format!(
                "singular vector of length {} for a layer with input {}",
                u.len(),
                layer.in_dim()
            )));
        }
        let au = layer.apply(u);
        let n = vector::norm(&au);
        norms.push(n);
        if n > mal {
            value += w * (n - mal);
            let dir: Vec<f64> = au.iter().map(|v| v / n).collect();
            vector::axpy(w, &layer.linear_param_grad(u, &dir)?, &mut grad);
        }
    }
    Ok((value, grad, norms))
}

/// `S_k(f, g)` on the linear parts of two corresponding layers.
///
/// `vectors_f` are the top right singular vectors of `layer_f` (applied to
/// `layer_g`), `vectors_g` those of `layer_g` (applied to `layer_f`). Exactly
/// at `mal` the subgradient 0 is used.
pub fn pair_similarity(
    layer_f: &Layer,
    layer_g: &Layer,
    vectors_f: &[Vec<f64>],
    vectors_g: &[Vec<f64>],
    weights: &[f64],
    mal: f64,
) -> Result<PairSimilarity> {
    if layer_f.in_dim() != layer_g.in_dim() {
        return Err(Error::Shape(format!(
            "paired layers take inputs of length {} and {}",
            layer_f.in_dim(),
            layer_g.in_dim()
        )));
    }
    if vectors_f.len() < weights.len() || vectors_g.len() < weights.len() {
        return Err(Error::InvalidInput(format!(
            "need {} singular vectors per layer, got {} and {}",
            weights.len(),
            vectors_f.len(),
            vectors_g.len()
        )));
    }
    let (vf, grad_f, norms_f) = one_side(layer_f, vectors_g, weights, mal)?;
    let (vg, grad_g, norms_g) = one_side(layer_g, vectors_f, weights, mal)?;
    Ok(PairSimilarity {
        value: vf + vg,
        grad_f,
        grad_g,
        norms_f,
        norms_g,
    })
}
