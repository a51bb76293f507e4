use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use lotos_core::attacks::{pgd_attack, AttackConfig, Norm};
use lotos_core::evaluation::{blackbox_robust_accuracy, ensemble_predict, ensemble_transfer_rate, proposition1_check};
use lotos_core::layers::ConvFilter;
use lotos_core::nets::Model;
use lotos_core::numerics::Rng;
use lotos_core::spectral::{circulant_spectrum, run_bound_trials};
use lotos_core::toolkit::{
    compare, default_variants, finite_mean, generate_dataset, load_checkpoint, save_checkpoint, spearman,
    sweep_clip, train_variant, write_rows, CompareRow, DatasetSpec, ExperimentConfig, LabeledDataset, Manifest,
    Method, PreparedData, Split, SweepRow, Variant, COMPARE_COLUMNS, MANIFEST_FILE, SWEEP_COLUMNS,
};
use lotos_core::Error;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::Command;

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    /// A check ran to completion and reported a violation or mismatch.
    Verification(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Verification(msg) => write!(f, "verification failed: {msg}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// A fully resolved command: config files inlined, input paths absolute.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Invocation {
    GenData {
        dataset: DatasetSpec,
        seed: u64,
    },
    Train {
        config: ExperimentConfig,
    },
    Attack {
        checkpoint: PathBuf,
        dataset: PathBuf,
        attack: AttackConfig,
        seed: u64,
    },
    Transfer {
        ensemble: PathBuf,
        dataset: PathBuf,
        attack: AttackConfig,
        seed: u64,
    },
    Blackbox {
        surrogate: PathBuf,
        member: usize,
        ensemble: PathBuf,
        dataset: PathBuf,
        attack: AttackConfig,
        seed: u64,
    },
    Spectrum {
        filter: Vec<f64>,
        n: usize,
    },
    VerifyBounds {
        trials: usize,
        seed: u64,
        tmax: usize,
        nmax: usize,
    },
    SweepClip {
        /// Written as text so `inf` survives JSON.
        values: Vec<String>,
        config: ExperimentConfig,
    },
    Prop1 {
        model_f: PathBuf,
        model_g: PathBuf,
        dataset: PathBuf,
        attack: AttackConfig,
        batch_size: usize,
        seed: u64,
    },
    Compare {
        config: ExperimentConfig,
    },
}

fn absolute(path: PathBuf) -> Result<PathBuf> {
    fs::canonicalize(&path).map_err(|e| Error::Io { path, source: e }.into())
}

fn load_config(path: Option<PathBuf>, method: Method) -> Result<ExperimentConfig> {
    match path {
        Some(p) => Ok(ExperimentConfig::load(&p)?),
        None => Ok(ExperimentConfig::desk(method)),
    }
}

impl Invocation {
    pub fn resolve(command: Command) -> Result<Self> {
        Ok(match command {
            Command::GenData { config, seed } => {
                let config = load_config(config, Method::Clip)?;
                Invocation::GenData {
                    seed: seed.unwrap_or(config.dataset_seed),
                    dataset: config.dataset,
                }
            }
            Command::Train { config } => Invocation::Train {
                config: ExperimentConfig::load(&config)?,
            },
            Command::Attack {
                checkpoint,
                dataset,
                attack,
            } => Invocation::Attack {
                checkpoint: absolute(checkpoint)?,
                dataset: absolute(dataset)?,
                seed: attack.seed,
                attack: attack.config(),
            },
            Command::Transfer {
                ensemble,
                dataset,
                attack,
            } => Invocation::Transfer {
                ensemble: absolute(ensemble)?,
                dataset: absolute(dataset)?,
                seed: attack.seed,
                attack: attack.config(),
            },
            Command::Blackbox {
                surrogate,
                member,
                ensemble,
                dataset,
                attack,
            } => Invocation::Blackbox {
                surrogate: absolute(surrogate)?,
                member,
                ensemble: absolute(ensemble)?,
                dataset: absolute(dataset)?,
                seed: attack.seed,
                attack: attack.config(),
            },
            Command::Spectrum { filter, n } => Invocation::Spectrum { filter, n },
            Command::VerifyBounds {
                trials,
                seed,
                tmax,
                nmax,
            } => Invocation::VerifyBounds {
                trials,
                seed,
                tmax,
                nmax,
            },
            Command::SweepClip { values, config } => Invocation::SweepClip {
                values: values.iter().map(f64::to_string).collect(),
                config: load_config(config, Method::Clip)?,
            },
            Command::Prop1 {
                model_f,
                model_g,
                dataset,
                eps,
                steps,
                batch_size,
                seed,
            } => Invocation::Prop1 {
                model_f: absolute(model_f)?,
                model_g: absolute(model_g)?,
                dataset: absolute(dataset)?,
                attack: AttackConfig::new(eps, steps, Norm::L2),
                batch_size,
                seed,
            },
            Command::Compare { config } => Invocation::Compare {
                config: load_config(config, Method::Lotos)?,
            },
            Command::Rerun { .. } => unreachable!("rerun is dispatched before resolution"),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Invocation::GenData { .. } => "gen-data",
            Invocation::Train { .. } => "train",
            Invocation::Attack { .. } => "attack",
            Invocation::Transfer { .. } => "transfer",
            Invocation::Blackbox { .. } => "blackbox",
            Invocation::Spectrum { .. } => "spectrum",
            Invocation::VerifyBounds { .. } => "verify-bounds",
            Invocation::SweepClip { .. } => "sweep-clip",
            Invocation::Prop1 { .. } => "prop1",
            Invocation::Compare { .. } => "compare",
        }
    }

    pub fn config_output_dir(&self) -> Option<PathBuf> {
        match self {
            Invocation::Train { config } | Invocation::SweepClip { config, .. } | Invocation::Compare { config } => {
                config.output_dir.clone()
            }
            _ => None,
        }
    }

    fn seeds(&self) -> Vec<u64> {
        match self {
            Invocation::GenData { seed, .. }
            | Invocation::Attack { seed, .. }
            | Invocation::Transfer { seed, .. }
            | Invocation::Blackbox { seed, .. }
            | Invocation::VerifyBounds { seed, .. }
            | Invocation::Prop1 { seed, .. } => vec![*seed],
            Invocation::Train { config } | Invocation::SweepClip { config, .. } | Invocation::Compare { config } => {
                config.seeds.clone()
            }
            Invocation::Spectrum { .. } => Vec::new(),
        }
    }
}

/// What a command left behind.
struct Outcome {
    outputs: Vec<String>,
    /// Set when the command's check failed; outputs are still recorded.
    violation: Option<String>,
}

impl Outcome {
    fn files(outputs: Vec<String>) -> Self {
        Self {
            outputs,
            violation: None,
        }
    }
}

fn write_json<T: Serialize>(value: &T, dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidInput(format!("serializing {name}: {e}")))?;
    fs::write(&path, text + "\n").map_err(|e| Error::Io { path, source: e })?;
    Ok(name.to_string())
}

fn write_csv_rows<T: Serialize>(rows: &[T], header: &[&str], dir: &Path, name: &str) -> Result<String> {
    write_rows(rows, header, &dir.join(name))?;
    Ok(name.to_string())
}

fn test_split(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let ds = LabeledDataset::load(path)?;
    let (xs, ys) = ds.split(Split::Test);
    if xs.is_empty() {
        return Err(Error::Config(format!("{} has no test samples", path.display())).into());
    }
    Ok((xs, ys))
}

fn models(path: &Path) -> Result<Vec<Model>> {
    Ok(load_checkpoint(path)?.models)
}

#[derive(Serialize)]
struct AttackStats {
    total: usize,
    clean_correct: usize,
    /// Clean-correct samples whose adversarial version is misclassified
    /// (untargeted) or lands on the target class (targeted).
    success_count: usize,
    success_rate: Option<f64>,
    /// Mean perturbation size in the attack norm over all samples.
    mean_perturbation: f64,
    attack: AttackConfig,
}

fn perturbation(norm: Norm, x: &[f64], a: &[f64]) -> f64 {
    let d = x.iter().zip(a).map(|(u, v)| v - u);
    match norm {
        Norm::L2 => d.map(|v| v * v).sum::<f64>().sqrt(),
        Norm::Linf => d.map(f64::abs).fold(0.0, f64::max),
    }
}

fn run_attack(checkpoint: &Path, dataset: &Path, attack: &AttackConfig, seed: u64, dir: &Path) -> Result<Outcome> {
    let ms = models(checkpoint)?;
    let (xs, ys) = test_split(dataset)?;
    let classes = ms[0].classes();
    let results = xs
        .par_iter()
        .zip(ys.par_iter())
        .map(|(x, &y)| {
            let clean = ensemble_predict(&ms, x)?.0;
            let adv = pgd_attack(ms.as_slice(), x, y, attack, &mut Rng::for_sample(seed, x, y))?;
            let pred = ensemble_predict(&ms, &adv)?.0;
            Ok((clean == y, pred, adv))
        })
        .collect::<std::result::Result<Vec<_>, Error>>()?;
    let clean_correct = results.iter().filter(|r| r.0).count();
    let success = results
        .iter()
        .zip(&ys)
        .filter(|((ok, pred, _), &y)| *ok && attack.targeted.map_or(*pred != y, |t| *pred == t))
        .count();
    let mean_perturbation = finite_mean(xs.iter().zip(&results).map(|(x, r)| perturbation(attack.norm, x, &r.2)));
    let adversarial = LabeledDataset {
        classes,
        labels: ys.clone(),
        splits: vec![Split::Test; ys.len()],
        inputs: results.into_iter().map(|r| r.2).collect(),
    };
    adversarial.save(&dir.join("adversarial.json"))?;
    let stats = AttackStats {
        total: xs.len(),
        clean_correct,
        success_count: success,
        success_rate: (clean_correct > 0).then(|| success as f64 / clean_correct as f64),
        mean_perturbation,
        attack: attack.clone(),
    };
    println!(
        "attacked {} samples: {} clean-correct, {} successful",
        stats.total, stats.clean_correct, stats.success_count
    );
    let stats_file = write_json(&stats, dir, "attack_stats.json")?;
    Ok(Outcome::files(vec!["adversarial.json".into(), stats_file]))
}

#[derive(Serialize, Deserialize)]
struct SpectrumRow {
    fourier_index: usize,
    squared_singular_value: f64,
    singular_value: f64,
}

#[derive(Serialize, Deserialize)]
struct SortedRow {
    rank: usize,
    fourier_index: usize,
    singular_value: f64,
}

fn run_spectrum(filter: &[f64], n: usize, dir: &Path) -> Result<Outcome> {
    let spec = circulant_spectrum(&ConvFilter::new(filter.to_vec())?, n)?;
    let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
    println!("n: {}", spec.n);
    println!("coeffs: {}", join(&spec.coeffs));
    println!("squared_singular_values: {}", join(&spec.values));
    println!("sorted_singular_values: {}", join(&spec.sorted_singular_values()));
    let rows: Vec<SpectrumRow> = spec
        .values
        .iter()
        .enumerate()
        .map(|(j, &v)| SpectrumRow {
            fourier_index: j,
            squared_singular_value: v,
            singular_value: v.sqrt(),
        })
        .collect();
    let sorted: Vec<SortedRow> = spec
        .ranked_indices()
        .into_iter()
        .enumerate()
        .map(|(rank, j)| SortedRow {
            rank: rank + 1,
            fourier_index: j,
            singular_value: spec.values[j].sqrt(),
        })
        .collect();
    Ok(Outcome::files(vec![
        write_csv_rows(&rows, &["fourier_index", "squared_singular_value", "singular_value"], dir, "spectrum.csv")?,
        write_csv_rows(&sorted, &["rank", "fourier_index", "singular_value"], dir, "sorted.csv")?,
    ]))
}

fn run_verify_bounds(trials: usize, seed: u64, tmax: usize, nmax: usize, dir: &Path) -> Result<Outcome> {
    let s = run_bound_trials(trials, seed, tmax, nmax)?;
    println!(
        "{} trials: lemma violations {}, corollary violations {}, cross-bound violations {} ({} in the frequency neighbourhood)",
        s.trials, s.lemma_violations, s.corollary_violations, s.theorem_violations, s.neighbourhood_violations
    );
    let file = write_json(&s, dir, "bounds.json")?;
    let violation = (!s.all_hold()).then(|| {
        let (t, n, _, _) = s.first_failure.clone().unwrap_or_default();
        format!("bound violated, first at T = {t}, n = {n}; see bounds.json")
    });
    Ok(Outcome {
        outputs: vec![file],
        violation,
    })
}

fn run_train(config: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    config.validate()?;
    let data = PreparedData::new(config)?;
    let variant = Variant::of(config.method);
    let mut outputs = Vec::new();
    for &seed in &config.seeds {
        let (ms, history) = train_variant(config, &variant, seed, &data)?;
        let ck = format!("ensemble_seed{seed}.json");
        save_checkpoint(&ms, config.method, &dir.join(&ck))?;
        let hist = format!("history_seed{seed}.csv");
        history.save_csv(&dir.join(&hist))?;
        println!("seed {seed}: trained {} models ({})", ms.len(), config.method.name());
        outputs.extend([ck, hist]);
    }
    Ok(Outcome::files(outputs))
}

#[derive(Serialize)]
struct SweepSummaryRow {
    clip: f64,
    individual_accuracy: f64,
    individual_robust_accuracy: f64,
    ensemble_accuracy: f64,
    trate: f64,
}

fn parse_clip_values(values: &[String]) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|v| {
            v.parse::<f64>()
                .map_err(|_| CliError::Core(Error::Config(format!("bad clip value '{v}'"))))
        })
        .collect()
}

fn run_sweep(values: &[String], config: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let cs = parse_clip_values(values)?;
    let rows: Vec<SweepRow> = sweep_clip(config, &cs)?;
    let summary: Vec<SweepSummaryRow> = cs
        .iter()
        .map(|&c| {
            let of = |f: fn(&SweepRow) -> f64| finite_mean(rows.iter().filter(|r| r.clip == c).map(f));
            SweepSummaryRow {
                clip: c,
                individual_accuracy: of(|r| r.individual_accuracy),
                individual_robust_accuracy: of(|r| r.individual_robust_accuracy),
                ensemble_accuracy: of(|r| r.ensemble_accuracy),
                trate: of(|r| r.trate),
            }
        })
        .collect();
    for s in &summary {
        println!(
            "C = {}: accuracy {:.4}, robust accuracy {:.4}, T_rate {:.4}",
            s.clip, s.individual_accuracy, s.individual_robust_accuracy, s.trate
        );
    }
    let robust: Vec<f64> = summary.iter().map(|s| s.individual_robust_accuracy).collect();
    let trate: Vec<f64> = summary.iter().map(|s| s.trate).collect();
    println!(
        "spearman(C, robust accuracy) = {:.3}, spearman(C, T_rate) = {:.3}",
        spearman(&cs, &robust),
        spearman(&cs, &trate)
    );
    Ok(Outcome::files(vec![
        write_csv_rows(&rows, &SWEEP_COLUMNS, dir, "sweep.csv")?,
        write_csv_rows(
            &summary,
            &["clip", "individual_accuracy", "individual_robust_accuracy", "ensemble_accuracy", "trate"],
            dir,
            "sweep_summary.csv",
        )?,
    ]))
}

#[derive(Serialize)]
struct CompareSummaryRow {
    variant: String,
    individual_accuracy: f64,
    individual_robust_accuracy: f64,
    ensemble_accuracy: f64,
    trate: f64,
    blackbox_orig: f64,
    blackbox_clip: f64,
    blackbox_mean: f64,
}

fn run_compare(config: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let variants = default_variants();
    let rows: Vec<CompareRow> = compare(config, &variants)?;
    let summary: Vec<CompareSummaryRow> = variants
        .iter()
        .map(|v| {
            let of = |f: fn(&CompareRow) -> f64| finite_mean(rows.iter().filter(|r| r.variant == v.label).map(f));
            CompareSummaryRow {
                variant: v.label.clone(),
                individual_accuracy: of(|r| r.individual_accuracy),
                individual_robust_accuracy: of(|r| r.individual_robust_accuracy),
                ensemble_accuracy: of(|r| r.ensemble_accuracy),
                trate: of(|r| r.trate),
                blackbox_orig: of(|r| r.blackbox_orig),
                blackbox_clip: of(|r| r.blackbox_clip),
                blackbox_mean: of(|r| r.blackbox_mean),
            }
        })
        .collect();
    for s in &summary {
        println!(
            "{:<16} accuracy {:.4}  T_rate {:.4}  black-box robust accuracy {:.4}",
            s.variant, s.individual_accuracy, s.trate, s.blackbox_mean
        );
    }
    let mut header = COMPARE_COLUMNS.to_vec();
    header.remove(1);
    Ok(Outcome::files(vec![
        write_csv_rows(&rows, &COMPARE_COLUMNS, dir, "compare.csv")?,
        write_csv_rows(&summary, &header, dir, "compare_summary.csv")?,
    ]))
}

fn execute(inv: &Invocation, dir: &Path) -> Result<Outcome> {
    match inv {
        Invocation::GenData { dataset, seed } => {
            let ds = generate_dataset(dataset, *seed)?;
            ds.save(&dir.join("dataset.json"))?;
            println!("generated {} samples of dimension {}", ds.len(), ds.dim());
            Ok(Outcome::files(vec!["dataset.json".into()]))
        }
        Invocation::Train { config } => run_train(config, dir),
        Invocation::Attack {
            checkpoint,
            dataset,
            attack,
            seed,
        } => run_attack(checkpoint, dataset, attack, *seed, dir),
        Invocation::Transfer {
            ensemble,
            dataset,
            attack,
            seed,
        } => {
            let ms = models(ensemble)?;
            let (xs, ys) = test_split(dataset)?;
            let report = ensemble_transfer_rate(&ms, &xs, &ys, attack, *seed)?;
            match report.mean_rate {
                Some(r) => println!("mean transfer rate {r:.4} over {} pairs", report.pairs.len()),
                None => println!("no eligible samples"),
            }
            Ok(Outcome::files(vec![write_json(&report, dir, "transfer.json")?]))
        }
        Invocation::Blackbox {
            surrogate,
            member,
            ensemble,
            dataset,
            attack,
            seed,
        } => {
            let surr = models(surrogate)?;
            let s = surr.get(*member).ok_or_else(|| {
                Error::Config(format!("surrogate checkpoint has {} models, asked for {member}", surr.len()))
            })?;
            let ms = models(ensemble)?;
            let (xs, ys) = test_split(dataset)?;
            let name = format!("{}#{member}", surrogate.display());
            let report = blackbox_robust_accuracy(s, &ms, &xs, &ys, attack, *seed, &name)?;
            println!(
                "robust accuracy {} ({} of {} clean-correct)",
                report.robust_accuracy.map_or("undefined".into(), |r| format!("{r:.4}")),
                report.robust_correct_count,
                report.eligible_count
            );
            Ok(Outcome::files(vec![write_json(&report, dir, "blackbox.json")?]))
        }
        Invocation::Spectrum { filter, n } => run_spectrum(filter, *n, dir),
        Invocation::VerifyBounds {
            trials,
            seed,
            tmax,
            nmax,
        } => run_verify_bounds(*trials, *seed, *tmax, *nmax, dir),
        Invocation::SweepClip { values, config } => run_sweep(values, config, dir),
        Invocation::Prop1 {
            model_f,
            model_g,
            dataset,
            attack,
            batch_size,
            seed,
        } => {
            let f = models(model_f)?;
            let g = models(model_g)?;
            let (xs, ys) = test_split(dataset)?;
            let report = proposition1_check(&f[0], &g[0], &xs, &ys, attack, *batch_size, *seed)?;
            let held = report.batches.iter().filter(|b| b.holds).count();
            println!("risk-gap inequality held on {held} of {} batches", report.batches.len());
            let file = write_json(&report, dir, "prop1.json")?;
            Ok(Outcome {
                outputs: vec![file],
                violation: (!report.all_hold()).then(|| "risk-gap inequality violated; see prop1.json".to_string()),
            })
        }
        Invocation::Compare { config } => run_compare(config, dir),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| {
        CliError::Core(Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

fn record(inv: &Invocation, argv: Vec<String>, dir: &Path) -> Result<Outcome> {
    create_dir(dir)?;
    let outcome = execute(inv, dir)?;
    let invocation = serde_json::to_value(inv).map_err(|e| Error::InvalidInput(format!("serializing invocation: {e}")))?;
    let mut manifest = Manifest::new(inv.name(), argv, invocation, inv.seeds());
    manifest.outputs = outcome.outputs.clone();
    manifest.save(dir)?;
    Ok(outcome)
}

/// Runs `inv`, writing its outputs and a manifest into `dir`.
pub fn execute_and_record(inv: &Invocation, argv: Vec<String>, dir: &Path) -> Result<()> {
    match record(inv, argv, dir)?.violation {
        Some(msg) => Err(CliError::Verification(msg)),
        None => Ok(()),
    }
}

/// Re-executes a recorded run into `out` (default: `rerun/` beside the
/// manifest) and compares every recorded output byte for byte.
pub fn rerun(manifest_path: &Path, out: Option<PathBuf>) -> Result<()> {
    let manifest = Manifest::load(manifest_path)?;
    let original = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let inv: Invocation = serde_json::from_value(manifest.invocation.clone()).map_err(|e| Error::MalformedFile {
        path: manifest_path.to_path_buf(),
        reason: format!("invocation: {e}"),
    })?;
    let dir = out.unwrap_or_else(|| original.join("rerun"));
    if dir.join(MANIFEST_FILE) == manifest_path {
        return Err(Error::Config("rerun output directory must differ from the original".into()).into());
    }
    let outcome = record(&inv, manifest.argv.clone(), &dir)?;
    if outcome.outputs != manifest.outputs {
        return Err(CliError::Verification(format!(
            "rerun produced files {:?}, manifest lists {:?}",
            outcome.outputs, manifest.outputs
        )));
    }
    let differ = manifest.differing_outputs(&original, &dir)?;
    if differ.is_empty() {
        println!("reproduced {} files exactly", manifest.outputs.len());
        Ok(())
    } else {
        Err(CliError::Verification(format!("outputs differ: {}", differ.join(", "))))
    }
}
