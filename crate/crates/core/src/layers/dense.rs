use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// `y = W x + b` with `W` of shape `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Option<Vec<f64>>,
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Option<Vec<f64>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weights.rows() {
                return Err(Error::Shape(format!(
                    "bias length {} does not match {} output rows",
                    b.len(),
                    weights.rows()
                )));
            }
        }
        if !weights.is_finite() || bias.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("dense layer parameters must be finite".into()));
        }
        Ok(Self { weights, bias })
    }

    pub(super) fn weight_grad(&self, x: &[f64], g: &[f64], out: &mut [f64]) {
        let cols = self.weights.cols();
        for (i, &gi) in g.iter().enumerate() {
            let row = &mut out[i * cols..(i + 1) * cols];
            for (o, xj) in row.iter_mut().zip(x) {
                *o = gi * xj;
            }
        }
    }
}
