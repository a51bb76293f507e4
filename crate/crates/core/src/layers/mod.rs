//! Affine layers with exact backward passes and a spectral view of their
//! linear part.
//!
//! Parameters are exposed as one flat vector per layer (linear weights first,
//! bias last) so the optimizer and the checkpoint format never need to know
//! the layer type. Gradients use the same layout.
//!
//! Circular 1-D convolution follows the correlation convention
//! `(A v)_i = sum_t f_t v_{(i + t) mod n}`.

mod conv1d;
mod conv2d;
mod dense;

pub use conv1d::{Conv1dCircular, ConvFilter};
pub use conv2d::{Conv2dLayer, Padding};
pub use dense::DenseLayer;

use crate::error::{Error, Result};
use crate::numerics::{LinearOperator, Matrix};

/// Largest `in_dim * out_dim` that [`Layer::materialize`] will build.
pub const MATERIALIZE_LIMIT: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Conv1d(Conv1dCircular),
    Conv2d(Conv2dLayer),
}

/// Gradients of one layer for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub input_grad: Vec<f64>,
    /// Same layout as [`Layer::params`].
    pub param_grad: Vec<f64>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        match self {
            Layer::Dense(l) => l.weights.cols(),
            Layer::Conv1d(l) => l.n,
            Layer::Conv2d(l) => l.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Layer::Dense(l) => l.weights.rows(),
            Layer::Conv1d(l) => l.n,
            Layer::Conv2d(l) => l.out_dim(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv1d(_) => "conv1d_circular",
            Layer::Conv2d(_) => "conv2d",
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.in_dim() {
            return Err(Error::Shape(format!(
                "{} layer expects input of length {}, got {}",
                self.kind(),
                self.in_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    fn check_output(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.out_dim() {
            return Err(Error::Shape(format!(
                "{} layer expects upstream gradient of length {}, got {}",
                self.kind(),
                self.out_dim(),
                y.len()
            )));
        }
        Ok(())
    }

    /// Affine map including bias.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut y = self.apply_linear(x);
        self.add_bias(&mut y);
        Ok(y)
    }

    /// Exact gradients of `<upstream, forward(x)>` with respect to input and parameters.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<LayerGrad> {
        self.check_input(x)?;
        self.check_output(upstream)?;
        let input_grad = self.apply_adjoint_linear(upstream);
        let mut param_grad = self.linear_param_grad_unchecked(x, upstream);
        self.bias_grad(upstream, &mut param_grad);
        Ok(LayerGrad {
            input_grad,
            param_grad,
        })
    }

    /// Gradient of `<upstream, A x>` with respect to the parameters, with the
    /// bias slots left at zero.
    pub fn linear_param_grad(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.check_output(upstream)?;
        Ok(self.linear_param_grad_unchecked(x, upstream))
    }

    fn apply_linear(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Layer::Dense(l) => l.weights.matvec(x),
            Layer::Conv1d(l) => l.apply_linear(x),
            Layer::Conv2d(l) => l.apply_linear(x),
        }
    }

    fn apply_adjoint_linear(&self, y: &[f64]) -> Vec<f64> {
        match self {
            Layer::Dense(l) => l.weights.matvec_t(y),
            Layer::Conv1d(l) => l.apply_adjoint(y),
            Layer::Conv2d(l) => l.apply_adjoint(y),
        }
    }

    fn linear_param_grad_unchecked(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.param_count()];
        match self {
            Layer::Dense(l) => l.weight_grad(x, g, &mut out),
            Layer::Conv1d(l) => l.filter_grad(x, g, &mut out),
            Layer::Conv2d(l) => l.kernel_grad(x, g, &mut out),
        }
        out
    }

    fn add_bias(&self, y: &mut [f64]) {
        match self {
            Layer::Dense(l) => {
                if let Some(b) = &l.bias {
                    for (yi, bi) in y.iter_mut().zip(b) {
                        *yi += bi;
                    }
                }
            }
            Layer::Conv1d(l) => {
                if let Some(b) = l.bias {
                    y.iter_mut().for_each(|v| *v += b);
                }
            }
            Layer::Conv2d(l) => l.add_bias(y),
        }
    }

    fn bias_grad(&self, g: &[f64], out: &mut [f64]) {
        let linear = self.linear_param_count();
        match self {
            Layer::Dense(l) => {
                if l.bias.is_some() {
                    out[linear..].copy_from_slice(g);
                }
            }
            Layer::Conv1d(l) => {
                if l.bias.is_some() {
                    out[linear] = g.iter().sum();
                }
            }
            Layer::Conv2d(l) => l.bias_grad(g, &mut out[linear..]),
        }
    }

    /// Number of parameters in the linear part.
    pub fn linear_param_count(&self) -> usize {
        match self {
            Layer::Dense(l) => l.weights.rows() * l.weights.cols(),
            Layer::Conv1d(l) => l.filter.len(),
            Layer::Conv2d(l) => l.kernel().len(),
        }
    }

    pub fn param_count(&self) -> usize {
        let bias = match self {
            Layer::Dense(l) => l.bias.as_ref().map_or(0, Vec::len),
            Layer::Conv1d(l) => usize::from(l.bias.is_some()),
            Layer::Conv2d(l) => l.bias.as_ref().map_or(0, Vec::len),
        };
        self.linear_param_count() + bias
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        match self {
            Layer::Dense(l) => {
                p.extend_from_slice(l.weights.as_slice());
                if let Some(b) = &l.bias {
                    p.extend_from_slice(b);
                }
            }
            Layer::Conv1d(l) => {
                p.extend_from_slice(l.filter.taps());
                p.extend(l.bias);
            }
            Layer::Conv2d(l) => {
                p.extend_from_slice(l.kernel());
                if let Some(b) = &l.bias {
                    p.extend_from_slice(b);
                }
            }
        }
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} layer has {} parameters, got {}",
                self.kind(),
                self.param_count(),
                params.len()
            )));
        }
        let linear = self.linear_param_count();
        let (w, b) = params.split_at(linear);
        match self {
            Layer::Dense(l) => {
                l.weights.as_mut_slice().copy_from_slice(w);
                if let Some(bias) = &mut l.bias {
                    bias.copy_from_slice(b);
                }
            }
            Layer::Conv1d(l) => {
                l.filter = ConvFilter::new(w.to_vec())?;
                if let Some(bias) = &mut l.bias {
                    *bias = b[0];
                }
            }
            Layer::Conv2d(l) => {
                l.kernel_mut().copy_from_slice(w);
                if let Some(bias) = &mut l.bias {
                    bias.copy_from_slice(b);
                }
            }
        }
        Ok(())
    }

    /// Multiplies the linear part by `alpha`; the bias is untouched.
    pub fn scale_linear(&mut self, alpha: f64) {
        match self {
            Layer::Dense(l) => crate::numerics::vector::scale(l.weights.as_mut_slice(), alpha),
            Layer::Conv1d(l) => l.filter.scale(alpha),
            Layer::Conv2d(l) => crate::numerics::vector::scale(l.kernel_mut(), alpha),
        }
    }

    /// Explicit matrix of the linear part, built column by column from basis vectors.
    pub fn materialize(&self) -> Result<Matrix> {
        let (rows, cols) = (self.out_dim(), self.in_dim());
        if rows.saturating_mul(cols) > MATERIALIZE_LIMIT {
            return Err(Error::TooLarge {
                rows,
                cols,
                limit: MATERIALIZE_LIMIT,
            });
        }
        if let Layer::Dense(l) = self {
            return Ok(l.weights.clone());
        }
        let mut m = Matrix::zeros(rows, cols);
        let mut e = vec![0.0; cols];
        for j in 0..cols {
            e[j] = 1.0;
            let col = self.apply_linear(&e);
            e[j] = 0.0;
            for (i, v) in col.into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }

    /// The linear part (bias excluded) as an operator.
    pub fn as_operator(&self) -> &dyn LinearOperator {
        self
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }
}

impl LinearOperator for Layer {
    fn in_dim(&self) -> usize {
        Layer::in_dim(self)
    }

    fn out_dim(&self) -> usize {
        Layer::out_dim(self)
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.apply_linear(x)
    }

    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        self.apply_adjoint_linear(y)
    }
}

impl From<DenseLayer> for Layer {
    fn from(l: DenseLayer) -> Self {
        Layer::Dense(l)
    }
}

impl From<Conv1dCircular> for Layer {
    fn from(l: Conv1dCircular) -> Self {
        Layer::Conv1d(l)
    }
}

impl From<Conv2dLayer> for Layer {
    fn from(l: Conv2dLayer) -> Self {
        Layer::Conv2d(l)
    }
}
