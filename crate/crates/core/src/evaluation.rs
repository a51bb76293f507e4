//! Ensemble prediction, conditional transferability rates, black-box robust
//! accuracy, and an empirical check of the risk-gap inequality
//! `|R_F(adv) - R_G(adv)| <= 2 L eps + |R_F(x) - R_G(x)|`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_attack, AttackConfig, Norm};
use crate::error::{Error, Result};
use crate::nets::{loss_lipschitz_bound, Model};
use crate::numerics::{vector, Rng};

/// Mean member softmax and its argmax (lowest index wins ties).
pub fn ensemble_predict(models: &[Model], x: &[f64]) -> Result<(usize, Vec<f64>)> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidInput("empty ensemble".into()))?;
    let mut mean = vec![0.0; first.classes()];
    for m in models {
        let p = m.forward(x)?.probabilities;
        if p.len() != mean.len() {
            return Err(Error::Shape("ensemble members disagree on class count".into()));
        }
        vector::axpy(1.0, &p, &mut mean);
    }
    vector::scale(&mut mean, 1.0 / models.len() as f64);
    Ok((vector::argmax(&mean), mean))
}

/// One ordered (source, target) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub source: usize,
    pub target: usize,
    pub eligible_count: usize,
    pub transferred_count: usize,
    /// `None` when no sample is eligible.
    pub rate: Option<f64>,
}

impl TransferRecord {
    fn new(source: usize, target: usize, eligible_count: usize, transferred_count: usize) -> Self {
        Self {
            source,
            target,
            eligible_count,
            transferred_count,
            rate: (eligible_count > 0).then(|| transferred_count as f64 / eligible_count as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub pairs: Vec<TransferRecord>,
    /// Mean over pairs with a defined rate.
    pub mean_rate: Option<f64>,
    pub attack: AttackConfig,
}

fn check_dataset(xs: &[Vec<f64>], ys: &[usize]) -> Result<()> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::InvalidInput("dataset must be non-empty with one label per input".into()));
    }
    Ok(())
}

/// Per-sample predicate outcome for one pair.
fn transfer_predicate(
    source_clean: usize,
    target_clean: usize,
    source_adv: usize,
    target_adv: usize,
    y: usize,
    targeted: Option<usize>,
) -> (bool, bool) {
    let both_correct = source_clean == y && target_clean == y;
    match targeted {
        None => (both_correct && source_adv != y, target_adv != y),
        Some(t) => (both_correct && t != y && source_adv == t, target_adv == t),
    }
}

fn adversarial_set(
    source: &Model,
    xs: &[Vec<f64>],
    ys: &[usize],
    attack: &AttackConfig,
    seed: u64,
    only: &[bool],
) -> Result<Vec<Option<Vec<f64>>>> {
    xs.par_iter()
        .zip(ys.par_iter())
        .zip(only.par_iter())
        .map(|((x, &y), &go)| {
            if !go {
                return Ok(None);
            }
            pgd_attack(source, x, y, attack, &mut Rng::for_sample(seed, x, y)).map(Some)
        })
        .collect()
}

fn predictions(model: &Model, xs: &[Vec<f64>]) -> Result<Vec<usize>> {
    xs.par_iter().map(|x| model.predict(x)).collect()
}

fn count_pair(
    source_clean: &[usize],
    target_clean: &[usize],
    adv: &[Option<Vec<f64>>],
    source: &Model,
    target: &Model,
    ys: &[usize],
    targeted: Option<usize>,
) -> Result<(usize, usize)> {
    let outcomes = (0..ys.len())
        .into_par_iter()
        .map(|i| {
            let Some(a) = &adv[i] else {
                return Ok((false, false));
            };
            let (e, t) = transfer_predicate(
                source_clean[i],
                target_clean[i],
                source.predict(a)?,
                target.predict(a)?,
                ys[i],
                targeted,
            );
            Ok((e, e && t))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        outcomes.iter().filter(|o| o.0).count(),
        outcomes.iter().filter(|o| o.1).count(),
    ))
}

/// Conditional transfer rate from `source` to `target`; see [`TransferRecord`].
///
/// Untargeted: among samples both models classify correctly and whose attack
/// fools the source, the fraction that also fool the target. Targeted: among
/// samples both classify correctly and whose attack reaches the target class
/// on the source, the fraction the target also assigns to it. Each sample's
/// attack randomness is keyed by its content and `seed`.
pub fn transfer_rate(
    source: &Model,
    target: &Model,
    xs: &[Vec<f64>],
    ys: &[usize],
    attack: &AttackConfig,
    seed: u64,
) -> Result<TransferRecord> {
    check_dataset(xs, ys)?;
    let sc = predictions(source, xs)?;
    let tc = predictions(target, xs)?;
    let go: Vec<bool> = (0..ys.len()).map(|i| sc[i] == ys[i] && tc[i] == ys[i]).collect();
    let adv = adversarial_set(source, xs, ys, attack, seed, &go)?;
    let (e, t) = count_pair(&sc, &tc, &adv, source, target, ys, attack.targeted)?;
    Ok(TransferRecord::new(0, 1, e, t))
}

/// Transfer rates over all `N (N - 1)` ordered pairs, source-major.
pub fn ensemble_transfer_rate(
    models: &[Model],
    xs: &[Vec<f64>],
    ys: &[usize],
    attack: &AttackConfig,
    seed: u64,
) -> Result<TransferReport> {
    check_dataset(xs, ys)?;
    let clean = models
        .iter()
        .map(|m| predictions(m, xs))
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::new();
    for (s, source) in models.iter().enumerate() {
        let go: Vec<bool> = (0..ys.len()).map(|i| clean[s][i] == ys[i]).collect();
        let adv = adversarial_set(source, xs, ys, attack, seed, &go)?;
        for (t, target) in models.iter().enumerate() {
            if t == s {
                continue;
            }
            let (e, n) = count_pair(&clean[s], &clean[t], &adv, source, target, ys, attack.targeted)?;
            pairs.push(TransferRecord::new(s, t, e, n));
        }
    }
    let defined: Vec<f64> = pairs.iter().filter_map(|p| p.rate).collect();
    let mean_rate = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(TransferReport {
        pairs,
        mean_rate,
        attack: attack.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustAccuracyReport {
    pub total: usize,
    pub clean_accuracy: f64,
    /// Samples the ensemble classifies correctly when clean.
    pub eligible_count: usize,
    pub robust_correct_count: usize,
    /// `None` when no sample is eligible.
    pub robust_accuracy: Option<f64>,
    pub surrogate: String,
    pub attack: AttackConfig,
}

/// Attacks `surrogate` and scores `ensemble` on the clean-correct samples.
pub fn blackbox_robust_accuracy(
    surrogate: &Model,
    ensemble: &[Model],
    xs: &[Vec<f64>],
    ys: &[usize],
    attack: &AttackConfig,
    seed: u64,
    surrogate_name: &str,
) -> Result<RobustAccuracyReport> {
    check_dataset(xs, ys)?;
    let outcomes = xs
        .par_iter()
        .zip(ys.par_iter())
        .map(|(x, &y)| {
            if ensemble_predict(ensemble, x)?.0 != y {
                return Ok((false, false));
            }
            let a = pgd_attack(surrogate, x, y, attack, &mut Rng::for_sample(seed, x, y))?;
            Ok((true, ensemble_predict(ensemble, &a)?.0 == y))
        })
        .collect::<Result<Vec<_>>>()?;
    let eligible = outcomes.iter().filter(|o| o.0).count();
    let robust = outcomes.iter().filter(|o| o.1).count();
    Ok(RobustAccuracyReport {
        total: xs.len(),
        clean_accuracy: eligible as f64 / xs.len() as f64,
        eligible_count: eligible,
        robust_correct_count: robust,
        robust_accuracy: (eligible > 0).then(|| robust as f64 / eligible as f64),
        surrogate: surrogate_name.to_string(),
        attack: attack.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskGapBatch {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskGapReport {
    pub batches: Vec<RiskGapBatch>,
    pub lipschitz: f64,
    pub epsilon: f64,
}

impl RiskGapReport {
    pub fn all_hold(&self) -> bool {
        self.batches.iter().all(|b| b.holds)
    }
}

/// Per batch, compares `|R_F(adv) - R_G(adv)|` against
/// `2 L eps + |R_F(x) - R_G(x)|` with adversarial inputs crafted against `F`
/// and `L` the larger of the two models' loss Lipschitz bounds.
pub fn proposition1_check(
    f: &Model,
    g: &Model,
    xs: &[Vec<f64>],
    ys: &[usize],
    attack: &AttackConfig,
    batch_size: usize,
    seed: u64,
) -> Result<RiskGapReport> {
    check_dataset(xs, ys)?;
    if attack.norm != Norm::L2 {
        return Err(Error::Config("the risk-gap check needs an L2 attack".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let lipschitz = loss_lipschitz_bound(f)?.max(loss_lipschitz_bound(g)?);
    let per_sample = xs
        .par_iter()
        .zip(ys.par_iter())
        .map(|(x, &y)| {
            let a = pgd_attack(f, x, y, attack, &mut Rng::for_sample(seed, x, y))?;
            Ok([f.loss(x, y)?, g.loss(x, y)?, f.loss(&a, y)?, g.loss(&a, y)?])
        })
        .collect::<Result<Vec<_>>>()?;
    let batches = per_sample
        .chunks(batch_size)
        .map(|chunk| {
            let mut r = [0.0; 4];
            for s in chunk {
                for k in 0..4 {
                    r[k] += s[k];
                }
            }
            let n = chunk.len() as f64;
            let lhs = (r[2] - r[3]).abs() / n;
            let rhs = 2.0 * lipschitz * attack.epsilon + (r[0] - r[1]).abs() / n;
            RiskGapBatch {
                lhs,
                rhs,
                holds: lhs <= rhs + 1e-9,
            }
        })
        .collect();
    Ok(RiskGapReport {
        batches,
        lipschitz,
        epsilon: attack.epsilon,
    })
}
