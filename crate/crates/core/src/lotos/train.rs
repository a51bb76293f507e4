use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::LotosConfig;
use super::loss::{selected_layers, training_gradients, PairVectors, VectorSource};
use crate::error::{Error, Result};
use crate::nets::{epoch_batches, sgd_step, Model, Sgd, TrainConfig, MODEL_STREAM};
use crate::numerics::{deflated_topk, Rng};

const SPECTRAL_STREAM: u64 = 0x7370_6563;
const CONTROL_STREAM: u64 = 0x6374_726c;

/// CSV header of [`EnsembleHistory`].
pub const HISTORY_COLUMNS: [&str; 6] = [
    "iter",
    "total_loss",
    "ce_loss",
    "ortho_loss",
    "max_sigma",
    "mean_cross_norm",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iter: usize,
    pub total_loss: f64,
    /// Mean over models of the batch cross-entropy.
    pub ce_loss: f64,
    pub ortho_loss: f64,
    /// Largest post-step `sigma_1` over models and layers when clipping,
    /// otherwise the largest tracked estimate; NaN when nothing is tracked.
    pub max_sigma: f64,
    /// Mean of the monitored `|A v'_i|`, `|B v_i|`; NaN for a single model.
    pub mean_cross_norm: f64,
    /// Largest tracked `sigma_1` per selected layer, across models.
    #[serde(skip)]
    pub layer_sigma: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EnsembleHistory {
    pub records: Vec<HistoryRecord>,
}

impl EnsembleHistory {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if self.records.is_empty() {
            w.write_record(HISTORY_COLUMNS)?;
        }
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io("<history>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let records = r.deserialize().collect::<std::result::Result<Vec<HistoryRecord>, _>>()?;
        Ok(Self { records })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Penalize responses to the other members' top singular vectors.
    Lotos,
    /// Same loop with random unit vectors per pair, redrawn every epoch.
    RandomControl,
}

/// Trains an ensemble on the orthogonalization-regularized loss.
///
/// Each member steps with its own CE gradient plus `lambda / (M (N - 1))`
/// times the gradient of its `S_k` terms, so `lambda = 0` reproduces
/// independent [`crate::nets::train_model`] runs parameter for parameter.
pub fn train_ensemble(
    models: &mut [Model],
    inputs: &[Vec<f64>],
    labels: &[usize],
    train: &TrainConfig,
    lotos: &LotosConfig,
) -> Result<EnsembleHistory> {
    run(models, inputs, labels, train, lotos, TrainMode::Lotos)
}

/// [`train_ensemble`] with random vectors in place of singular vectors.
pub fn random_vector_control(
    models: &mut [Model],
    inputs: &[Vec<f64>],
    labels: &[usize],
    train: &TrainConfig,
    lotos: &LotosConfig,
) -> Result<EnsembleHistory> {
    run(models, inputs, labels, train, lotos, TrainMode::RandomControl)
}

fn refresh_spectral(
    model: &mut Model,
    layers: &[usize],
    config: &LotosConfig,
    iter: usize,
    rng: &mut Rng,
) -> Result<()> {
    for &l in layers {
        let op = model.layers[l].as_operator();
        let full = iter % config.reconverge_every == 0;
        let state = match model.spectral[l].take() {
            Some(mut s) if !full && s.k == config.k => {
                s.refresh(op, config.refresh_steps, rng)?;
                s
            }
            prev => deflated_topk(
                op,
                config.k,
                config.reconverge_tol,
                config.reconverge_max_iters,
                prev.as_ref().filter(|s| s.k == config.k),
                rng,
            )?,
        };
        model.spectral[l] = Some(state);
    }
    Ok(())
}

fn control_vectors(
    models: &[Model],
    layers: &[usize],
    k: usize,
    rng: &mut Rng,
) -> BTreeMap<(usize, usize, usize), PairVectors> {
    let mut map = BTreeMap::new();
    for z in 0..models.len() {
        for j in z + 1..models.len() {
            for &l in layers {
                let d = models[z].layers[l].in_dim();
                let f = (0..k).map(|_| rng.unit_vector(d)).collect();
                let g = (0..k).map(|_| rng.unit_vector(d)).collect();
                map.insert((z, j, l), PairVectors { f, g });
            }
        }
    }
    map
}

fn run(
    models: &mut [Model],
    inputs: &[Vec<f64>],
    labels: &[usize],
    train: &TrainConfig,
    lotos: &LotosConfig,
    mode: TrainMode,
) -> Result<EnsembleHistory> {
    train.validate()?;
    lotos.validate()?;
    if inputs.is_empty() || inputs.len() != labels.len() {
        return Err(Error::InvalidInput("dataset must be non-empty with one label per input".into()));
    }
    let layers = selected_layers(models, lotos)?;
    let n = models.len();
    let monitor = n > 1;
    let mut data_rng = Rng::new(train.seed);
    let mut control_rng = Rng::new(train.seed).derive(CONTROL_STREAM);
    let mut model_rngs: Vec<Rng> = models.iter().map(|m| Rng::new(m.seed).derive(MODEL_STREAM)).collect();
    let mut spectral_rngs: Vec<Rng> = models.iter().map(|m| Rng::new(m.seed).derive(SPECTRAL_STREAM)).collect();
    let mut opts: Vec<Sgd> = models.iter().map(Sgd::new).collect();
    let mut history = EnsembleHistory::default();
    let mut iter = 0;
    for _ in 0..train.epochs {
        let control = (mode == TrainMode::RandomControl && monitor)
            .then(|| control_vectors(models, &layers, lotos.k, &mut control_rng));
        for batch in epoch_batches(inputs.len(), train.batch_size, &mut data_rng) {
            if monitor {
                models
                    .par_iter_mut()
                    .zip(spectral_rngs.par_iter_mut())
                    .try_for_each(|(m, rng)| refresh_spectral(m, &layers, lotos, iter, rng))?;
            }
            let xs: Vec<&[f64]> = batch.iter().map(|&i| inputs[i].as_slice()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let source = match &control {
                Some(map) => VectorSource::Fixed(map),
                None => VectorSource::Spectral,
            };
            let (loss, grads) = training_gradients(models, &xs, &ys, lotos, source)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "ensemble loss at iteration {iter}: ce {:?}, ortho {}",
                    loss.ce_terms, loss.ortho_term
                )));
            }
            let layer_sigma: Vec<f64> = if monitor {
                layers
                    .iter()
                    .map(|&l| {
                        models
                            .iter()
                            .filter_map(|m| m.spectral[l].as_ref().map(|s| s.sigma_max()))
                            .fold(0.0, f64::max)
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let reports = models
                .par_iter_mut()
                .zip(grads.par_iter())
                .zip(opts.par_iter_mut())
                .zip(model_rngs.par_iter_mut())
                .map(|(((m, g), opt), rng)| sgd_step(m, g, train, opt, rng))
                .collect::<Result<Vec<_>>>()?;
            let clipped: Vec<f64> = reports.iter().flatten().map(|r| r.final_sigma).collect();
            let max_sigma = if !clipped.is_empty() {
                clipped.iter().copied().fold(0.0, f64::max)
            } else if !layer_sigma.is_empty() {
                layer_sigma.iter().copied().fold(0.0, f64::max)
            } else {
                f64::NAN
            };
            let mean_cross_norm = if loss.cross_norms.is_empty() {
                f64::NAN
            } else {
                loss.cross_norms.iter().sum::<f64>() / loss.cross_norms.len() as f64
            };
            history.records.push(HistoryRecord {
                iter,
                total_loss: loss.total,
                ce_loss: loss.mean_ce(),
                ortho_loss: loss.ortho_term,
                max_sigma,
                mean_cross_norm,
                layer_sigma,
            });
            iter += 1;
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lotos::LayerSelection;
    use crate::nets::{train_model, ModelSpec};

    fn signals(seed: u64, n: usize, d: usize, m: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = Rng::new(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let c = i % m;
            let freq = 1.0 + c as f64;
            let phase = rng.uniform() * std::f64::consts::TAU;
            xs.push(
                (0..d)
                    .map(|t| {
                        let v = 0.5 + 0.3 * (freq * t as f64 * std::f64::consts::TAU / d as f64 + phase).cos();
                        (v + 0.05 * rng.normal()).clamp(0.0, 1.0)
                    })
                    .collect(),
            );
            ys.push(c);
        }
        (xs, ys)
    }

    fn ensemble(spec: &ModelSpec, n: u64) -> Vec<Model> {
        (0..n).map(|s| Model::init(spec.clone(), 100 + s).unwrap()).collect()
    }

    #[test]
    fn zero_lambda_matches_independent_runs() {
        let (xs, ys) = signals(1, 96, 8, 3);
        let spec = ModelSpec::default_cnn(8, 3);
        let train = TrainConfig {
            epochs: 2,
            batch_size: 16,
            clip: Some(1.0),
            ..TrainConfig::default()
        };
        let lotos = LotosConfig {
            lambda: 0.0,
            ..LotosConfig::default()
        };
        let mut joint = ensemble(&spec, 3);
        let h = train_ensemble(&mut joint, &xs, &ys, &train, &lotos).unwrap();
        assert!(h.records.iter().all(|r| r.ortho_loss == 0.0));
        let mut control = ensemble(&spec, 3);
        random_vector_control(&mut control, &xs, &ys, &train, &lotos).unwrap();
        for (i, m) in joint.iter().enumerate() {
            let mut solo = ensemble(&spec, 3).swap_remove(i);
            train_model(&mut solo, &xs, &ys, &train, None).unwrap();
            assert_eq!(m.params(), solo.params());
            assert_eq!(control[i].params(), solo.params());
        }
    }

    #[test]
    fn control_history_is_finite() {
        let (xs, ys) = signals(2, 64, 8, 3);
        let mut models = ensemble(&ModelSpec::default_cnn(8, 3), 3);
        let train = TrainConfig {
            epochs: 2,
            batch_size: 16,
            clip: Some(1.0),
            ..TrainConfig::default()
        };
        let h = random_vector_control(&mut models, &xs, &ys, &train, &LotosConfig::default()).unwrap();
        assert_eq!(h.records.len(), 8);
        assert!(h.records.iter().all(|r| r.total_loss.is_finite() && r.max_sigma <= 1.01));
    }

    #[test]
    fn cross_norms_fall_below_mal() {
        let (xs, ys) = signals(3, 192, 16, 3);
        let mut models = ensemble(&ModelSpec::default_cnn(16, 3), 3);
        let train = TrainConfig {
            epochs: 6,
            batch_size: 16,
            clip: Some(1.0),
            ..TrainConfig::default()
        };
        let lotos = LotosConfig {
            mal: 0.5,
            ..LotosConfig::default()
        };
        let h = train_ensemble(&mut models, &xs, &ys, &train, &lotos).unwrap();
        let mean = |r: &[HistoryRecord]| r.iter().map(|x| x.mean_cross_norm).sum::<f64>() / r.len() as f64;
        let first = mean(&h.records[..10]);
        let last = mean(&h.records[h.records.len() - 10..]);
        assert!(last < first, "{first} -> {last}");
        assert!(last < 0.5 + 0.05, "{last}");
    }

    #[test]
    fn heterogeneous_first_layer_training() {
        let (xs, ys) = signals(4, 64, 8, 2);
        let mut models = vec![
            Model::init(ModelSpec::default_cnn(8, 2), 1).unwrap(),
            Model::init(ModelSpec::mlp(8, &[6], 2), 2).unwrap(),
        ];
        let train = TrainConfig {
            epochs: 1,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let lotos = LotosConfig {
            layer_selection: LayerSelection::FirstOnly,
            ..LotosConfig::default()
        };
        assert!(train_ensemble(&mut models, &xs, &ys, &train, &lotos).is_ok());
    }

    #[test]
    fn sequential_and_parallel_agree_and_history_round_trips() {
        let (xs, ys) = signals(5, 64, 8, 3);
        let train = TrainConfig {
            epochs: 2,
            batch_size: 16,
            clip: Some(1.0),
            ..TrainConfig::default()
        };
        let go = || {
            let mut m = ensemble(&ModelSpec::default_cnn(8, 3), 3);
            train_ensemble(&mut m, &xs, &ys, &train, &LotosConfig::default()).unwrap()
        };
        let par = go();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let seq = pool.install(go);
        assert_eq!(par, seq);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        par.save_csv(&path).unwrap();
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with(&HISTORY_COLUMNS.join(",")));
        let back = EnsembleHistory::load_csv(&path).unwrap();
        for (a, b) in back.records.iter().zip(&par.records) {
            assert_eq!(a.iter, b.iter);
            assert_eq!(a.total_loss, b.total_loss);
        }
    }
}
