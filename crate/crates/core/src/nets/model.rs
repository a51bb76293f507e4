use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv1dCircular, Conv2dLayer, ConvFilter, DenseLayer, Layer, Padding};
use crate::numerics::{vector, Matrix, Rng, SpectralState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

impl Activation {
    /// Logit layers start at a quarter of the He scale; large initial
    /// logits push the shared convolution biases below the ReLU threshold.
    fn init_gain(self) -> f64 {
        match self {
            Activation::Relu => 1.0,
            Activation::None => 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Conv1dCircular {
        n: usize,
        taps: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kh: usize,
        kw: usize,
        height: usize,
        width: usize,
        padding: Padding,
        #[serde(default = "default_true")]
        bias: bool,
    },
}

fn default_true() -> bool {
    true
}

impl LayerSpec {
    pub fn in_dim(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv1dCircular { n, .. } => n,
            LayerSpec::Conv2d {
                in_channels,
                height,
                width,
                ..
            } => in_channels * height * width,
        }
    }

    pub fn out_dim(&self) -> usize {
        match *self {
            LayerSpec::Dense { outputs, .. } => outputs,
            LayerSpec::Conv1dCircular { n, .. } => n,
            LayerSpec::Conv2d {
                out_channels,
                height,
                width,
                ..
            } => out_channels * height * width,
        }
    }

    /// He-normal weights times `gain`, zero bias. Circular convolutions start
    /// from the identity filter plus `0.3 / sqrt(T)` noise instead: inputs are
    /// nonnegative, so a filter with a negative tap sum would silence the
    /// following ReLU.
    fn init(&self, gain: f64, rng: &mut Rng) -> Result<Layer> {
        Ok(match *self {
            LayerSpec::Dense {
                inputs,
                outputs,
                bias,
            } => {
                let std = gain * (2.0 / inputs as f64).sqrt();
                let w = Matrix::from_fn(outputs, inputs, |_, _| std * rng.normal());
                DenseLayer::new(w, bias.then(|| vec![0.0; outputs]))?.into()
            }
            LayerSpec::Conv1dCircular { n, taps, bias } => {
                let std = 0.3 / (taps as f64).sqrt();
                let mut taps: Vec<f64> = (0..taps).map(|_| std * rng.normal()).collect();
                taps[0] += 1.0;
                let layer = Conv1dCircular::new(ConvFilter::new(taps)?, n)?;
                if bias {
                    layer.with_bias(0.0).into()
                } else {
                    layer.into()
                }
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kh,
                kw,
                height,
                width,
                padding,
                bias,
            } => {
                let fan_in = in_channels * kh * kw;
                let std = gain * (2.0 / fan_in as f64).sqrt();
                let kernel = (0..out_channels * fan_in).map(|_| std * rng.normal()).collect();
                let layer = Conv2dLayer::new(
                    kernel,
                    out_channels,
                    in_channels,
                    kh,
                    kw,
                    padding,
                    height,
                    width,
                )?;
                if bias {
                    layer.with_bias(vec![0.0; out_channels])?.into()
                } else {
                    layer.into()
                }
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDesc {
    #[serde(flatten)]
    pub layer: LayerSpec,
    pub activation: Activation,
}

/// Ordered layer descriptors of a classifier with `classes` logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub classes: usize,
    pub layers: Vec<LayerDesc>,
}

impl ModelSpec {
    /// Conv1d(T=3) -> ReLU -> Conv1d(T=3) -> ReLU -> Dense on length-`n` signals.
    pub fn default_cnn(n: usize, classes: usize) -> Self {
        Self {
            input_dim: n,
            classes,
            layers: vec![
                LayerDesc {
                    layer: LayerSpec::Conv1dCircular { n, taps: 3, bias: true },
                    activation: Activation::Relu,
                },
                LayerDesc {
                    layer: LayerSpec::Conv1dCircular { n, taps: 3, bias: true },
                    activation: Activation::Relu,
                },
                LayerDesc {
                    layer: LayerSpec::Dense {
                        inputs: n,
                        outputs: classes,
                        bias: true,
                    },
                    activation: Activation::None,
                },
            ],
        }
    }

    /// A single dense layer from `input_dim` to `classes` logits.
    pub fn linear(input_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            classes,
            layers: vec![LayerDesc {
                layer: LayerSpec::Dense {
                    inputs: input_dim,
                    outputs: classes,
                    bias: true,
                },
                activation: Activation::None,
            }],
        }
    }

    /// Dense layers with ReLU between them; `widths` excludes input and output.
    pub fn mlp(input_dim: usize, widths: &[usize], classes: usize) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(widths);
        dims.push(classes);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerDesc {
                layer: LayerSpec::Dense {
                    inputs: w[0],
                    outputs: w[1],
                    bias: true,
                },
                activation: if i + 2 < dims.len() {
                    Activation::Relu
                } else {
                    Activation::None
                },
            })
            .collect();
        Self {
            input_dim,
            classes,
            layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("model needs at least two classes".into()));
        }
        let mut dim = self.input_dim;
        for (i, d) in self.layers.iter().enumerate() {
            if d.layer.in_dim() != dim {
                return Err(Error::Config(format!(
                    "layer {i} expects input {} but receives {dim}",
                    d.layer.in_dim()
                )));
            }
            if let LayerSpec::Conv1dCircular { n, taps, .. } = d.layer {
                if taps == 0 || taps > n {
                    return Err(Error::Config(format!("layer {i}: need 1 <= taps <= n")));
                }
            }
            dim = d.layer.out_dim();
        }
        if dim != self.classes {
            return Err(Error::Config(format!(
                "final layer outputs {dim} values for {} classes",
                self.classes
            )));
        }
        Ok(())
    }
}

/// Parameter gradients, one flat vector per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            layers: model.layers.iter().map(|l| vec![0.0; l.param_count()]).collect(),
        }
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            vector::axpy(alpha, b, a);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.layers.iter_mut().for_each(|g| vector::scale(g, alpha));
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers.concat()
    }
}

/// Cached activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// Input to each layer; `inputs[0]` is the sample.
    pub inputs: Vec<Vec<f64>>,
    /// Affine output of each layer before its activation.
    pub pre_activations: Vec<Vec<f64>>,
}

impl ForwardPass {
    pub fn predicted(&self) -> usize {
        vector::argmax(&self.logits)
    }

    /// Cross-entropy through a log-sum-exp of the logits.
    pub fn loss(&self, label: usize) -> f64 {
        let max = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + self.logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        lse - self.logits[label]
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-ln p_y`
pub fn cross_entropy(probabilities: &[f64], label: usize) -> Result<f64> {
    match probabilities.get(label) {
        Some(p) => Ok(-p.ln()),
        None => Err(Error::InvalidInput(format!(
            "label {label} out of range for {} classes",
            probabilities.len()
        ))),
    }
}

/// A classifier: spec, layers, and per-layer spectral estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<Layer>,
    pub spectral: Vec<Option<SpectralState>>,
    /// Seed the parameters were drawn from; also keys the model's private RNG stream.
    pub seed: u64,
}

impl Model {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::new(seed);
        let layers = spec
            .layers
            .iter()
            .map(|d| d.layer.init(d.activation.init_gain(), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let spectral = vec![None; layers.len()];
        Ok(Self {
            spec,
            layers,
            spectral,
            seed,
        })
    }

    /// Builds a model from explicit layers; shapes are checked against the spec.
    pub fn from_layers(spec: ModelSpec, layers: Vec<Layer>, seed: u64) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.layers.len() {
            return Err(Error::SpecMismatch(format!(
                "spec lists {} layers, got {}",
                spec.layers.len(),
                layers.len()
            )));
        }
        for (i, (l, d)) in layers.iter().zip(&spec.layers).enumerate() {
            if l.in_dim() != d.layer.in_dim() || l.out_dim() != d.layer.out_dim() {
                return Err(Error::SpecMismatch(format!("layer {i} shape differs from spec")));
            }
        }
        let spectral = vec![None; layers.len()];
        Ok(Self {
            spec,
            layers,
            spectral,
            seed,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardPass> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "model expects input of length {}, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut a = x.to_vec();
        for (layer, desc) in self.layers.iter().zip(&self.spec.layers) {
            let z = layer.forward(&a)?;
            inputs.push(a);
            a = match desc.activation {
                Activation::Relu => z.iter().map(|v| v.max(0.0)).collect(),
                Activation::None => z.clone(),
            };
            pre_activations.push(z);
        }
        let probabilities = softmax(&a);
        Ok(ForwardPass {
            logits: a,
            probabilities,
            inputs,
            pre_activations,
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(self.forward(x)?.predicted())
    }

    /// Backpropagates a logit gradient; returns parameter and input gradients.
    pub fn backward(&self, pass: &ForwardPass, logit_grad: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        let mut grads = vec![Vec::new(); self.layers.len()];
        let mut upstream = logit_grad.to_vec();
        for i in (0..self.layers.len()).rev() {
            if self.spec.layers[i].activation == Activation::Relu {
                for (g, z) in upstream.iter_mut().zip(&pass.pre_activations[i]) {
                    if *z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let lg = self.layers[i].backward(&pass.inputs[i], &upstream)?;
            grads[i] = lg.param_grad;
            upstream = lg.input_grad;
        }
        Ok((Gradients { layers: grads }, upstream))
    }

    /// Cross-entropy of one sample with parameter and input gradients.
    pub fn loss_and_grad(&self, x: &[f64], label: usize) -> Result<(f64, Gradients, Vec<f64>)> {
        if label >= self.classes() {
            return Err(Error::InvalidInput(format!(
                "label {label} out of range for {} classes",
                self.classes()
            )));
        }
        let pass = self.forward(x)?;
        let loss = pass.loss(label);
        let mut dz = pass.probabilities.clone();
        dz[label] -= 1.0;
        let (g, gx) = self.backward(&pass, &dz)?;
        Ok((loss, g, gx))
    }

    pub fn loss(&self, x: &[f64], label: usize) -> Result<f64> {
        if label >= self.classes() {
            return Err(Error::InvalidInput(format!("label {label} out of range")));
        }
        Ok(self.forward(x)?.loss(label))
    }

    pub fn params(&self) -> Vec<Vec<f64>> {
        self.layers.iter().map(Layer::params).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Layer::is_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_layer(seed: u64) -> Model {
        Model::init(ModelSpec::mlp(4, &[5], 3), seed).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let mut m = two_layer(0);
        for l in &mut m.layers {
            let p = vec![0.0; l.param_count()];
            l.set_params(&p).unwrap();
        }
        let pass = m.forward(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        for p in pass.probabilities {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_dense_softmax() {
        let spec = ModelSpec::linear(2, 2);
        let layer = DenseLayer::new(Matrix::identity(2), Some(vec![0.0, 0.0])).unwrap();
        let m = Model::from_layers(spec, vec![layer.into()], 0).unwrap();
        let p = m.forward(&[10.0, 0.0]).unwrap().probabilities;
        assert!((p[0] - 1.0 / (1.0 + (-10f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let m = Model::init(ModelSpec::default_cnn(16, 4), 3).unwrap();
        let mut rng = Rng::new(1);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..16).map(|_| rng.uniform()).collect();
            let s: f64 = m.forward(&x).unwrap().probabilities.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_cases() {
        assert!((cross_entropy(&[0.25; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert_eq!(cross_entropy(&[1.0, 0.0], 0).unwrap(), 0.0);
        assert!(cross_entropy(&[0.5, 0.5], 2).is_err());
        let m = two_layer(1);
        assert!(m.loss_and_grad(&[0.0; 4], 3).is_err());
    }

    #[test]
    fn saturated_label_has_zero_logit_gradient() {
        let spec = ModelSpec::linear(2, 2);
        let layer = DenseLayer::new(Matrix::zeros(2, 2), Some(vec![800.0, 0.0])).unwrap();
        let m = Model::from_layers(spec, vec![layer.into()], 0).unwrap();
        let (loss, g, gx) = m.loss_and_grad(&[0.3, 0.7], 0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.flatten().iter().all(|v| *v == 0.0));
        assert!(gx.iter().all(|v| *v == 0.0));
    }

    /// Central differences (h = 1e-5) on a 2-layer net for every parameter and input.
    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-5;
        let mut rng = Rng::new(7);
        for seed in 0..5 {
            let m = two_layer(seed);
            let x: Vec<f64> = (0..4).map(|_| rng.uniform()).collect();
            let y = seed as usize % 3;
            let (_, g, gx) = m.loss_and_grad(&x, y).unwrap();
            for i in 0..x.len() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += h;
                xm[i] -= h;
                let fd = (m.loss(&xp, y).unwrap() - m.loss(&xm, y).unwrap()) / (2.0 * h);
                assert!((fd - gx[i]).abs() <= 1e-6 * gx[i].abs().max(1e-3), "{fd} vs {}", gx[i]);
            }
            for l in 0..m.layers.len() {
                let p = m.layers[l].params();
                for i in 0..p.len() {
                    let (mut mp, mut mm) = (m.clone(), m.clone());
                    let (mut pp, mut pm) = (p.clone(), p.clone());
                    pp[i] += h;
                    pm[i] -= h;
                    mp.layers[l].set_params(&pp).unwrap();
                    mm.layers[l].set_params(&pm).unwrap();
                    let fd = (mp.loss(&x, y).unwrap() - mm.loss(&x, y).unwrap()) / (2.0 * h);
                    let an = g.layers[l][i];
                    assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "{fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn spec_validation() {
        let mut spec = ModelSpec::default_cnn(8, 3);
        assert!(spec.validate().is_ok());
        spec.classes = 4;
        assert!(spec.validate().is_err());
        let bad = ModelSpec {
            input_dim: 5,
            ..ModelSpec::default_cnn(8, 3)
        };
        assert!(bad.validate().is_err());
        assert!(Model::init(bad, 0).is_err());
        let m = Model::init(ModelSpec::default_cnn(8, 3), 0).unwrap();
        assert!(matches!(m.forward(&[0.0; 3]), Err(Error::Shape(_))));
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = ModelSpec::default_cnn(32, 4);
        let s = serde_json::to_string(&spec).unwrap();
        assert!(s.contains("\"type\":\"conv1d_circular\""));
        let back: ModelSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, spec);
    }
}
