use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use super::datasets::{generate_dataset, LabeledDataset, Split};
use crate::attacks::AttackConfig;
use crate::error::{Error, Result};
use crate::evaluation::{blackbox_robust_accuracy, ensemble_predict, ensemble_transfer_rate};
use crate::lotos::{random_vector_control, train_ensemble, EnsembleHistory, LotosConfig};
use crate::nets::{train_model, Model, TrainConfig};
use crate::numerics::Rng;

const MEMBER_STREAM: u64 = 0x6d65_6d62;
const SURROGATE_STREAM: u64 = 0x7375_7267;

/// Initialization seed of ensemble member `i` under experiment seed `seed`.
pub fn member_seed(seed: u64, i: usize) -> u64 {
    Rng::new(seed).derive(MEMBER_STREAM + i as u64).seed()
}

/// Initialization seed of surrogate `i` under experiment seed `seed`.
pub fn surrogate_seed(seed: u64, i: usize) -> u64 {
    Rng::new(seed).derive(SURROGATE_STREAM + i as u64).seed()
}

/// Train and (possibly truncated) test split of a generated dataset.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub dataset: LabeledDataset,
    pub train_x: Vec<Vec<f64>>,
    pub train_y: Vec<usize>,
    pub test_x: Vec<Vec<f64>>,
    pub test_y: Vec<usize>,
}

impl PreparedData {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let dataset = generate_dataset(&config.dataset, config.dataset_seed)?;
        let (train_x, train_y) = dataset.split(Split::Train);
        let (mut test_x, mut test_y) = dataset.split(Split::Test);
        if let Some(n) = config.eval_samples {
            test_x.truncate(n);
            test_y.truncate(n);
        }
        if train_x.is_empty() || test_x.is_empty() {
            return Err(Error::Config("dataset needs non-empty train and test splits".into()));
        }
        Ok(Self {
            dataset,
            train_x,
            train_y,
            test_x,
            test_y,
        })
    }
}

/// A training method with its orthogonalization and clipping overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub method: Method,
    /// Overrides `LotosConfig::k`.
    #[serde(default)]
    pub k: Option<usize>,
    /// Overrides the clip value; infinity disables clipping.
    #[serde(default)]
    pub clip: Option<f64>,
}

impl Variant {
    pub fn of(method: Method) -> Self {
        Self {
            label: method.name().to_string(),
            method,
            k: None,
            clip: None,
        }
    }

    fn train_config(&self, config: &ExperimentConfig, seed: u64) -> TrainConfig {
        let mut train = config.train_for(self.method);
        if let Some(c) = self.clip {
            train.clip = c.is_finite().then_some(c);
        }
        train.seed = seed;
        train
    }

    fn lotos_config(&self, config: &ExperimentConfig) -> LotosConfig {
        let mut lotos = config.lotos_for(self.method);
        if let Some(k) = self.k {
            lotos.k = k;
        }
        lotos
    }
}

/// Trains one ensemble of `config.ensemble_size` members for `seed`.
pub fn train_variant(
    config: &ExperimentConfig,
    variant: &Variant,
    seed: u64,
    data: &PreparedData,
) -> Result<(Vec<Model>, EnsembleHistory)> {
    let spec = config.model_spec(&data.dataset);
    let mut models = (0..config.ensemble_size)
        .map(|i| Model::init(spec.clone(), member_seed(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    let train = variant.train_config(config, seed);
    let lotos = variant.lotos_config(config);
    let adv = config.adv_train.as_ref().filter(|a| a.enabled);
    let history = match (variant.method, adv) {
        (Method::Orig | Method::Clip, Some(adv)) => {
            models
                .par_iter_mut()
                .try_for_each(|m| train_model(m, &data.train_x, &data.train_y, &train, Some(adv)).map(|_| ()))?;
            EnsembleHistory::default()
        }
        (_, Some(_)) => {
            return Err(Error::Config(
                "adversarial training is only available for the orig and clip methods".into(),
            ))
        }
        (Method::RandomControl, None) => {
            random_vector_control(&mut models, &data.train_x, &data.train_y, &train, &lotos)?
        }
        (_, None) => train_ensemble(&mut models, &data.train_x, &data.train_y, &train, &lotos)?,
    };
    Ok((models, history))
}

/// Trains the single surrogate `i` of a given method for `seed`.
pub fn train_surrogate(
    config: &ExperimentConfig,
    method: Method,
    seed: u64,
    i: usize,
    data: &PreparedData,
) -> Result<Model> {
    let spec = config.model_spec(&data.dataset);
    let s = surrogate_seed(seed, i);
    let mut model = Model::init(spec, s)?;
    let train = TrainConfig {
        seed: s,
        ..config.train_for(method)
    };
    train_model(&mut model, &data.train_x, &data.train_y, &train, None)?;
    Ok(model)
}

/// Clean and white-box numbers for one trained ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleEval {
    /// Mean over members of clean test accuracy.
    pub individual_accuracy: f64,
    /// Mean over members of white-box robust accuracy on their clean-correct samples.
    pub individual_robust_accuracy: f64,
    pub ensemble_accuracy: f64,
    /// Mean ordered-pair transfer rate; NaN when undefined.
    pub trate: f64,
}

pub fn evaluate_ensemble(models: &[Model], data: &PreparedData, attack: &AttackConfig, seed: u64) -> Result<EnsembleEval> {
    let (xs, ys) = (&data.test_x, &data.test_y);
    let mut acc = 0.0;
    let mut robust = 0.0;
    for m in models {
        let r = blackbox_robust_accuracy(m, std::slice::from_ref(m), xs, ys, attack, seed, "self")?;
        acc += r.clean_accuracy;
        robust += r.robust_accuracy.unwrap_or(0.0);
    }
    let n = models.len() as f64;
    let correct = xs
        .par_iter()
        .zip(ys.par_iter())
        .map(|(x, &y)| Ok(ensemble_predict(models, x)?.0 == y))
        .collect::<Result<Vec<bool>>>()?
        .into_iter()
        .filter(|c| *c)
        .count();
    let trate = if models.len() > 1 {
        ensemble_transfer_rate(models, xs, ys, attack, seed)?.mean_rate.unwrap_or(f64::NAN)
    } else {
        f64::NAN
    };
    Ok(EnsembleEval {
        individual_accuracy: acc / n,
        individual_robust_accuracy: robust / n,
        ensemble_accuracy: correct as f64 / xs.len() as f64,
        trate,
    })
}

/// CSV header of [`SweepRow`].
pub const SWEEP_COLUMNS: [&str; 6] = [
    "clip",
    "seed",
    "individual_accuracy",
    "individual_robust_accuracy",
    "ensemble_accuracy",
    "trate",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `inf` for the unclipped column.
    pub clip: f64,
    pub seed: u64,
    pub individual_accuracy: f64,
    pub individual_robust_accuracy: f64,
    pub ensemble_accuracy: f64,
    pub trate: f64,
}

/// Clip-value sweep of `config.method` (orig/clip ensembles, or LOTOS at
/// each `C`). Rows are value-major, then seed order.
pub fn sweep_clip(config: &ExperimentConfig, values: &[f64]) -> Result<Vec<SweepRow>> {
    config.validate()?;
    if values.is_empty() || values.iter().any(|c| !(*c > 0.0)) {
        return Err(Error::Config("clip values must be positive (inf allowed)".into()));
    }
    let data = PreparedData::new(config)?;
    let jobs: Vec<(f64, u64)> = values
        .iter()
        .flat_map(|&c| config.seeds.iter().map(move |&s| (c, s)))
        .collect();
    jobs.par_iter()
        .map(|&(c, seed)| {
            let method = match (config.method, c.is_finite()) {
                (_, false) => Method::Orig,
                (Method::Orig, true) => Method::Clip,
                (m, true) => m,
            };
            let variant = Variant {
                clip: Some(c),
                ..Variant::of(method)
            };
            let (models, _) = train_variant(config, &variant, seed, &data)?;
            let e = evaluate_ensemble(&models, &data, &config.attack, seed)?;
            Ok(SweepRow {
                clip: c,
                seed,
                individual_accuracy: e.individual_accuracy,
                individual_robust_accuracy: e.individual_robust_accuracy,
                ensemble_accuracy: e.ensemble_accuracy,
                trate: e.trate,
            })
        })
        .collect()
}

/// The variants of the method comparison: orig, clip, LOTOS, the random
/// vector control and LOTOS with `k = 3`.
pub fn default_variants() -> Vec<Variant> {
    vec![
        Variant::of(Method::Orig),
        Variant::of(Method::Clip),
        Variant::of(Method::Lotos),
        Variant::of(Method::RandomControl),
        Variant {
            label: "lotos_k3".into(),
            k: Some(3),
            ..Variant::of(Method::Lotos)
        },
    ]
}

/// CSV header of [`CompareRow`].
pub const COMPARE_COLUMNS: [&str; 9] = [
    "variant",
    "seed",
    "individual_accuracy",
    "individual_robust_accuracy",
    "ensemble_accuracy",
    "trate",
    "blackbox_orig",
    "blackbox_clip",
    "blackbox_mean",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub variant: String,
    pub seed: u64,
    pub individual_accuracy: f64,
    pub individual_robust_accuracy: f64,
    pub ensemble_accuracy: f64,
    pub trate: f64,
    /// Black-box robust accuracy against unclipped surrogates.
    pub blackbox_orig: f64,
    /// Black-box robust accuracy against clipped surrogates.
    pub blackbox_clip: f64,
    pub blackbox_mean: f64,
}

/// Trains every variant for every seed and scores it, including black-box
/// transfers from independently trained orig and clip surrogates.
/// Rows are variant-major, then seed order.
pub fn compare(config: &ExperimentConfig, variants: &[Variant]) -> Result<Vec<CompareRow>> {
    config.validate()?;
    if config.surrogates == 0 {
        return Err(Error::Config("compare needs at least one surrogate per type".into()));
    }
    let data = PreparedData::new(config)?;
    let surrogates = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let train = |method| {
                (0..config.surrogates)
                    .map(|i| train_surrogate(config, method, seed, i, &data))
                    .collect::<Result<Vec<_>>>()
            };
            Ok((train(Method::Orig)?, train(Method::Clip)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..variants.len())
        .flat_map(|v| (0..config.seeds.len()).map(move |s| (v, s)))
        .collect();
    jobs.par_iter()
        .map(|&(v, s)| {
            let seed = config.seeds[s];
            let variant = &variants[v];
            let (models, _) = train_variant(config, variant, seed, &data)?;
            let e = evaluate_ensemble(&models, &data, &config.attack, seed)?;
            let blackbox = |surr: &[Model], name: &str| -> Result<f64> {
                let mut total = 0.0;
                for m in surr {
                    let r = blackbox_robust_accuracy(m, &models, &data.test_x, &data.test_y, &config.attack, seed, name)?;
                    total += r.robust_accuracy.unwrap_or(f64::NAN);
                }
                Ok(total / surr.len() as f64)
            };
            let (orig, clip) = &surrogates[s];
            let bo = blackbox(orig, "orig")?;
            let bc = blackbox(clip, "clip")?;
            Ok(CompareRow {
                variant: variant.label.clone(),
                seed,
                individual_accuracy: e.individual_accuracy,
                individual_robust_accuracy: e.individual_robust_accuracy,
                ensemble_accuracy: e.ensemble_accuracy,
                trate: e.trate,
                blackbox_orig: bo,
                blackbox_clip: bc,
                blackbox_mean: 0.5 * (bo + bc),
            })
        })
        .collect()
}

/// Writes serializable rows as CSV with their struct field names as header.
pub fn write_rows<T: Serialize>(rows: &[T], header: &[&str], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

/// Mean of the finite entries; NaN when there are none.
pub fn finite_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .filter(|v| v.is_finite())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Spearman rank correlation with average ranks for ties; NaN when either
/// side is constant or the lengths differ.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    if xs.len() != ys.len() || xs.len() < 2 {
        return f64::NAN;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}
