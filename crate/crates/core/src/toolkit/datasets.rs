use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{vector, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Inputs in `[0, 1]^d` with labels in `0..classes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub classes: usize,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
}

impl LabeledDataset {
    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.labels.len() != self.inputs.len() || self.splits.len() != self.inputs.len() {
            return Err(Error::InvalidInput("inputs, labels and splits differ in length".into()));
        }
        if self.classes < 2 {
            return Err(Error::InvalidInput("dataset needs at least two classes".into()));
        }
        for (i, (x, &y)) in self.inputs.iter().zip(&self.labels).enumerate() {
            if x.len() != d {
                return Err(Error::InvalidInput(format!("sample {i} has length {} (expected {d})", x.len())));
            }
            if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidInput(format!("sample {i} leaves [0, 1]")));
            }
            if y >= self.classes {
                return Err(Error::InvalidInput(format!("sample {i} has label {y} >= {}", self.classes)));
            }
        }
        Ok(())
    }

    /// Inputs and labels of one split, in dataset order.
    pub fn split(&self, which: Split) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..self.len() {
            if self.splits[i] == which {
                xs.push(self.inputs[i].clone());
                ys.push(self.labels[i]);
            }
        }
        (xs, ys)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ds: LabeledDataset = serde_json::from_str(&text).map_err(|e| Error::MalformedFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::InvalidInput(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Generator name and parameters, or a file to read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Isotropic Gaussian classes whose means sit `separation` noise
    /// standard deviations apart.
    GaussianBlobs {
        classes: usize,
        dim: usize,
        separation: f64,
        train: usize,
        test: usize,
    },
    /// Noisy circles of increasing radius in the first two coordinates.
    ConcentricRings {
        classes: usize,
        dim: usize,
        train: usize,
        test: usize,
    },
    /// Length-`n` signals built from three class-coded sinusoids with fixed
    /// class phases: a strong low band whose class is replaced by a random
    /// one with probability `band_flip`, and two weak but always reliable
    /// bands at higher frequencies.
    PatchTextures {
        classes: usize,
        n: usize,
        train: usize,
        test: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default = "default_strong")]
        strong_amplitude: [f64; 2],
        #[serde(default = "default_weak")]
        weak_amplitude: f64,
        #[serde(default = "default_flip")]
        band_flip: f64,
        /// Phase jitter as a fraction of a full turn.
        #[serde(default = "default_jitter")]
        phase_jitter: f64,
    },
    File {
        path: PathBuf,
    },
}

fn default_noise() -> f64 {
    0.05
}

fn default_strong() -> [f64; 2] {
    [0.15, 0.25]
}

fn default_weak() -> f64 {
    0.05
}

fn default_flip() -> f64 {
    0.2
}

fn default_jitter() -> f64 {
    0.2
}

impl DatasetSpec {
    /// The desk-scale default: 4-class textures of length 32, 2000 / 1000.
    pub fn desk() -> Self {
        DatasetSpec::PatchTextures {
            classes: 4,
            n: 32,
            train: 2000,
            test: 1000,
            noise: default_noise(),
            strong_amplitude: default_strong(),
            weak_amplitude: default_weak(),
            band_flip: default_flip(),
            phase_jitter: default_jitter(),
        }
    }
}

const BLOB_STD: f64 = 0.03;

fn clamp01(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Builds a dataset deterministically from `spec` and `seed`.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<LabeledDataset> {
    let ds = match *spec {
        DatasetSpec::GaussianBlobs {
            classes,
            dim,
            separation,
            train,
            test,
        } => blobs(classes, dim, separation, train, test, seed)?,
        DatasetSpec::ConcentricRings {
            classes,
            dim,
            train,
            test,
        } => rings(classes, dim, train, test, seed)?,
        DatasetSpec::PatchTextures {
            classes,
            n,
            train,
            test,
            noise,
            strong_amplitude,
            weak_amplitude,
            band_flip,
            phase_jitter,
        } => textures(
            &TextureParams {
                classes,
                n,
                noise,
                strong: strong_amplitude,
                weak: weak_amplitude,
                flip: band_flip,
                jitter: phase_jitter,
            },
            train,
            test,
            seed,
        )?,
        DatasetSpec::File { ref path } => return LabeledDataset::load(path),
    };
    ds.validate()?;
    Ok(ds)
}

fn assemble(classes: usize, train: usize, test: usize, mut sample: impl FnMut(usize) -> Vec<f64>) -> LabeledDataset {
    let total = train + test;
    let mut ds = LabeledDataset {
        classes,
        inputs: Vec::with_capacity(total),
        labels: Vec::with_capacity(total),
        splits: Vec::with_capacity(total),
    };
    for i in 0..total {
        let y = i % classes;
        let mut x = sample(y);
        clamp01(&mut x);
        ds.inputs.push(x);
        ds.labels.push(y);
        ds.splits.push(if i < train { Split::Train } else { Split::Test });
    }
    ds
}

fn check_common(classes: usize, train: usize, test: usize) -> Result<()> {
    if classes < 2 || train == 0 || test == 0 {
        return Err(Error::Config("need >= 2 classes and non-empty splits".into()));
    }
    Ok(())
}

fn blobs(classes: usize, dim: usize, separation: f64, train: usize, test: usize, seed: u64) -> Result<LabeledDataset> {
    check_common(classes, train, test)?;
    if dim == 0 || !(separation >= 0.0) {
        return Err(Error::Config("blobs need dim >= 1 and separation >= 0".into()));
    }
    let mut rng = Rng::new(seed);
    // Orthonormal offsets while they fit, random unit ones after.
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for _ in 0..classes {
        let mut u = rng.unit_vector(dim);
        if dirs.len() < dim {
            for d in &dirs {
                let p = vector::dot(&u, d);
                vector::axpy(-p, d, &mut u);
            }
            vector::normalize(&mut u);
        }
        dirs.push(u);
    }
    let radius = separation * BLOB_STD / std::f64::consts::SQRT_2;
    let centres: Vec<Vec<f64>> = dirs.iter().map(|u| u.iter().map(|v| 0.5 + radius * v).collect()).collect();
    Ok(assemble(classes, train, test, |y| {
        centres[y].iter().map(|c| c + BLOB_STD * rng.normal()).collect()
    }))
}

fn rings(classes: usize, dim: usize, train: usize, test: usize, seed: u64) -> Result<LabeledDataset> {
    check_common(classes, train, test)?;
    if dim < 2 {
        return Err(Error::Config("rings need dim >= 2".into()));
    }
    let mut rng = Rng::new(seed);
    Ok(assemble(classes, train, test, |y| {
        let r = 0.45 * (y + 1) as f64 / classes as f64 + 0.01 * rng.normal();
        let a = TAU * rng.uniform();
        let mut x = vec![0.5 + r * a.cos(), 0.5 + r * a.sin()];
        x.extend((2..dim).map(|_| 0.5 + 0.01 * rng.normal()));
        x
    }))
}

struct TextureParams {
    classes: usize,
    n: usize,
    noise: f64,
    strong: [f64; 2],
    weak: f64,
    flip: f64,
    jitter: f64,
}

/// Frequency of band `b` (0 strong, 1 and 2 weak) for class `y`.
fn texture_frequency(classes: usize, b: usize, y: usize) -> f64 {
    (1 + y + b * classes) as f64
}

fn textures(p: &TextureParams, train: usize, test: usize, seed: u64) -> Result<LabeledDataset> {
    check_common(p.classes, train, test)?;
    if p.n <= 2 * texture_frequency(p.classes, 2, p.classes - 1) as usize {
        return Err(Error::Config(format!(
            "textures with {} classes need n > {}",
            p.classes,
            2 * texture_frequency(p.classes, 2, p.classes - 1) as usize
        )));
    }
    let valid = p.noise >= 0.0
        && p.weak >= 0.0
        && 0.0 <= p.strong[0]
        && p.strong[0] <= p.strong[1]
        && (0.0..=1.0).contains(&p.flip)
        && (0.0..=1.0).contains(&p.jitter);
    if !valid {
        return Err(Error::Config("invalid texture amplitudes, flip rate or jitter".into()));
    }
    let m = p.classes as f64;
    let mut rng = Rng::new(seed);
    Ok(assemble(p.classes, train, test, |y| {
        let strong_class = if rng.uniform() < p.flip {
            rng.int_range(0, p.classes - 1)
        } else {
            y
        };
        let bands: Vec<(f64, f64, f64)> = (0..3)
            .map(|b| {
                let c = if b == 0 { strong_class } else { y };
                let phase = TAU * (c as f64 + 0.37 * b as f64) / m + p.jitter * TAU * (rng.uniform() - 0.5);
                let amp = if b == 0 {
                    rng.uniform_range(p.strong[0], p.strong[1])
                } else {
                    p.weak
                };
                (texture_frequency(p.classes, b, c), phase, amp)
            })
            .collect();
        (0..p.n)
            .map(|t| {
                let s = t as f64 / p.n as f64;
                let signal: f64 = bands.iter().map(|(f, ph, a)| a * (TAU * f * s + ph).cos()).sum();
                0.5 + signal + p.noise * rng.normal()
            })
            .collect()
    }))
}
