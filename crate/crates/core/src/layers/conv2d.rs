use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Circular,
    Zero,
}

/// Multi-channel 2-D convolution, stride 1, "same" output size.
///
/// Input and output are flattened channel-major: `x[c * H * W + i * W + j]`.
/// Kernel index order is `(out, in, kh, kw)`; the kernel is centred at
/// offset `((kh - 1) / 2, (kw - 1) / 2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dLayer {
    kernel: Vec<f64>,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub padding: Padding,
    pub height: usize,
    pub width: usize,
    pub bias: Option<Vec<f64>>,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kernel: Vec<f64>,
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        padding: Padding,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if [out_channels, in_channels, kh, kw, height, width].contains(&0) {
            return Err(Error::InvalidInput("conv2d dimensions must be >= 1".into()));
        }
        if kernel.len() != out_channels * in_channels * kh * kw {
            return Err(Error::Shape(format!(
                "kernel has {} entries, expected {out_channels}x{in_channels}x{kh}x{kw}",
                kernel.len()
            )));
        }
        if kernel.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("conv2d kernel must be finite".into()));
        }
        if padding == Padding::Circular && (kh > height || kw > width) {
            return Err(Error::InvalidInput("circular kernel larger than input".into()));
        }
        Ok(Self {
            kernel,
            out_channels,
            in_channels,
            kh,
            kw,
            padding,
            height,
            width,
            bias: None,
        })
    }

    pub fn with_bias(mut self, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != self.out_channels {
            return Err(Error::Shape("conv2d bias needs one entry per output channel".into()));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub(crate) fn kernel_mut(&mut self) -> &mut [f64] {
        &mut self.kernel
    }

    pub fn in_dim(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn out_dim(&self) -> usize {
        self.out_channels * self.height * self.width
    }

    fn k_index(&self, o: usize, c: usize, a: usize, b: usize) -> usize {
        ((o * self.in_channels + c) * self.kh + a) * self.kw + b
    }

    /// Source pixel for output `(i, j)` under kernel offset `(a, b)`, if any.
    fn source(&self, i: usize, j: usize, a: usize, b: usize) -> Option<usize> {
        let (h, w) = (self.height as isize, self.width as isize);
        let si = i as isize + a as isize - ((self.kh - 1) / 2) as isize;
        let sj = j as isize + b as isize - ((self.kw - 1) / 2) as isize;
        match self.padding {
            Padding::Circular => Some((si.rem_euclid(h) * w + sj.rem_euclid(w)) as usize),
            Padding::Zero => {
                if (0..h).contains(&si) && (0..w).contains(&sj) {
                    Some((si * w + sj) as usize)
                } else {
                    None
                }
            }
        }
    }

    /// Calls `f(out_index, in_index, kernel_index)` for every active tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let hw = self.height * self.width;
        for o in 0..self.out_channels {
            for c in 0..self.in_channels {
                for a in 0..self.kh {
                    for b in 0..self.kw {
                        let k = self.k_index(o, c, a, b);
                        for i in 0..self.height {
                            for j in 0..self.width {
                                if let Some(s) = self.source(i, j, a, b) {
                                    f(o * hw + i * self.width + j, c * hw + s, k);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub(super) fn apply_linear(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.out_dim()];
        self.for_each_tap(|yo, xi, k| y[yo] += self.kernel[k] * x[xi]);
        y
    }

    pub(super) fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.in_dim()];
        self.for_each_tap(|yo, xi, k| x[xi] += self.kernel[k] * y[yo]);
        x
    }

    pub(super) fn kernel_grad(&self, x: &[f64], g: &[f64], out: &mut [f64]) {
        self.for_each_tap(|yo, xi, k| out[k] += g[yo] * x[xi]);
    }

    pub(super) fn add_bias(&self, y: &mut [f64]) {
        if let Some(b) = &self.bias {
            let hw = self.height * self.width;
            for (o, bo) in b.iter().enumerate() {
                y[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v += bo);
            }
        }
    }

    pub(super) fn bias_grad(&self, g: &[f64], out: &mut [f64]) {
        if self.bias.is_some() {
            let hw = self.height * self.width;
            for (o, slot) in out.iter_mut().enumerate() {
                *slot = g[o * hw..(o + 1) * hw].iter().sum();
            }
        }
    }
}
