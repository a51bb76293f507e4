//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Outcomes are reported, not asserted, so a criterion the desk experiment
//! does not reproduce shows up as FAIL without hiding the others. Set
//! `LOTOS_ACCEPTANCE_STRICT=1` to exit non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use lotos_core::attacks::{pgd_attack, AttackConfig, Norm};
use lotos_core::evaluation::{proposition1_check, transfer_rate};
use lotos_core::layers::{Conv1dCircular, Conv2dLayer, ConvFilter, DenseLayer, Layer, Padding};
use lotos_core::lotos::{lotos_loss, lotos_loss_grad, LotosConfig, VectorSource};
use lotos_core::nets::{clip_model, Model, ModelSpec};
use lotos_core::numerics::{deflated_topk, svd_oracle, Matrix, Rng};
use lotos_core::spectral::{circulant_spectrum, clip_spectral_norm, run_bound_trials, ClipConfig};
use lotos_core::toolkit::{read_rows, CompareRow, SweepRow};
use serde_json::json;

struct Suite {
    results: Vec<(usize, bool)>,
}

impl Suite {
    fn report(&mut self, n: usize, name: &str, pass: bool, detail: String, started: Instant) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!(
            "{tag} criterion {n:>2}: {name}: {detail} [{:.1} s]",
            started.elapsed().as_secs_f64()
        );
        self.results.push((n, pass));
    }
}

fn sigma1(layer: &Layer) -> f64 {
    svd_oracle(&layer.materialize().unwrap()).unwrap().singular_values[0]
}

fn spectrum_exactness(suite: &mut Suite) {
    let t0 = Instant::now();
    let mut rng = Rng::new(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let t = rng.int_range(2, 5);
        let n = rng.int_range(8, 64);
        let f = ConvFilter::new(rng.normal_vec(t)).unwrap();
        let closed = circulant_spectrum(&f, n).unwrap().sorted_singular_values();
        let layer: Layer = Conv1dCircular::new(f, n).unwrap().into();
        let oracle = svd_oracle(&layer.materialize().unwrap()).unwrap().singular_values;
        for (a, b) in closed.iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    suite.report(
        1,
        "closed-form circulant spectrum vs SVD oracle",
        worst <= 1e-8 && secs < 60.0,
        format!("1000 filters, max abs error {worst:.2e}"),
        t0,
    );
}

fn bound_theorems(suite: &mut Suite) {
    let t0 = Instant::now();
    let s = run_bound_trials(1000, 2, 5, 64).unwrap();
    let detail = format!(
        "1000 pairs: gap-bound violations {}, product-bound violations {}, cross-layer violations {} ({} inside the frequency neighbourhood)",
        s.lemma_violations, s.corollary_violations, s.theorem_violations, s.neighbourhood_violations
    );
    suite.report(2, "gap and cross-layer bounds on random filter pairs", s.all_hold(), detail, t0);
}

fn random_layer(rng: &mut Rng, i: usize) -> Layer {
    let scale = 0.3 + 3.0 * rng.uniform();
    match i % 4 {
        0 | 1 => {
            let (r, c) = (rng.int_range(2, 16), rng.int_range(2, 16));
            let m = Matrix::from_fn(r, c, |_, _| scale * rng.normal());
            DenseLayer::new(m, Some(rng.normal_vec(r))).unwrap().into()
        }
        2 => {
            let t = rng.int_range(2, 5);
            let taps = rng.normal_vec(t).into_iter().map(|v| scale * v).collect();
            Conv1dCircular::new(ConvFilter::new(taps).unwrap(), rng.int_range(8, 32)).unwrap().into()
        }
        _ => {
            let (co, ci) = (rng.int_range(1, 3), rng.int_range(1, 3));
            let kernel = (0..co * ci * 9).map(|_| scale * rng.normal()).collect();
            let padding = if rng.uniform() < 0.5 { Padding::Circular } else { Padding::Zero };
            Conv2dLayer::new(kernel, co, ci, 3, 3, padding, 5, 5).unwrap().into()
        }
    }
}

fn clipping(suite: &mut Suite) {
    let t0 = Instant::now();
    let mut rng = Rng::new(3);
    let cfg = ClipConfig::new(1.0, 1e-2);
    let (mut worst_sigma, mut worst_change): (f64, f64) = (0.0, 0.0);
    for i in 0..100 {
        let mut layer = random_layer(&mut rng, i);
        clip_spectral_norm(&mut layer, &cfg, None, &mut rng).unwrap();
        worst_sigma = worst_sigma.max(sigma1(&layer));
        let once = layer.params();
        clip_spectral_norm(&mut layer, &cfg, None, &mut rng).unwrap();
        let change = once.iter().zip(layer.params()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_change = worst_change.max(change);
    }
    suite.report(
        3,
        "spectral clipping bound and idempotence",
        worst_sigma <= 1.01 && worst_change < 1e-9,
        format!("100 dense/conv layers, max sigma_1 {worst_sigma:.6}, max second-clip change {worst_change:.2e}"),
        t0,
    );
}

fn with_spectral(mut m: Model, k: usize) -> Model {
    for l in 0..m.layers.len() {
        let st = deflated_topk(m.layers[l].as_operator(), k, 1e-13, 50_000, None, &mut Rng::new(l as u64)).unwrap();
        m.spectral[l] = Some(st);
    }
    m
}

fn gradient_check(suite: &mut Suite) {
    let t0 = Instant::now();
    let mut rng = Rng::new(4);
    let spec = ModelSpec::mlp(4, &[5], 3);
    let mut worst: f64 = 0.0;
    let (mut active, mut inactive) = (0usize, 0usize);
    for c in 0..20u64 {
        let k = 1 + (c as usize % 2);
        let models: Vec<Model> = (0..2).map(|s| with_spectral(Model::init(spec.clone(), 100 * c + s).unwrap(), k)).collect();
        let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| rng.uniform()).collect()).collect();
        let ys: Vec<usize> = (0..4).map(|_| rng.int_range(0, 2)).collect();
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let probe = LotosConfig { k, mal: 0.0, ..LotosConfig::default() };
        let mut norms = lotos_loss(&models, &refs, &ys, &probe, VectorSource::Spectral).unwrap().cross_norms;
        norms.sort_by(f64::total_cmp);
        // Thresholds: all terms active, a split between two monitored norms, none active.
        let mid = norms.len() / 2;
        let mal = match c % 3 {
            0 => 0.0,
            1 => 0.5 * (norms[mid - 1] + norms[mid]),
            _ => norms[norms.len() - 1] + 1.0,
        };
        active += norms.iter().filter(|&&v| v > mal).count();
        inactive += norms.iter().filter(|&&v| v <= mal).count();
        let cfg = LotosConfig {
            k,
            mal,
            lambda: 0.5 + 2.0 * rng.uniform(),
            ..LotosConfig::default()
        };
        let (_, grads) = lotos_loss_grad(&models, &refs, &ys, &cfg, VectorSource::Spectral).unwrap();
        let f = |ms: &[Model]| lotos_loss(ms, &refs, &ys, &cfg, VectorSource::Spectral).unwrap().total;
        let h = 1e-5;
        for i in 0..2 {
            for l in 0..2 {
                let p = models[i].layers[l].params();
                for q in 0..p.len() {
                    let (mut mp, mut mm) = (models.clone(), models.clone());
                    let (mut pp, mut pm) = (p.clone(), p.clone());
                    pp[q] += h;
                    pm[q] -= h;
                    mp[i].layers[l].set_params(&pp).unwrap();
                    mm[i].layers[l].set_params(&pm).unwrap();
                    let fd = (f(&mp) - f(&mm)) / (2.0 * h);
                    let an = grads[i].layers[l][q];
                    worst = worst.max((fd - an).abs() / an.abs().max(fd.abs()).max(1e-3));
                }
            }
        }
    }
    suite.report(
        4,
        "orthogonalization loss gradient vs central differences",
        worst <= 1e-5 && active > 0 && inactive > 0,
        format!("20 configurations, {active} active / {inactive} inactive hinge terms, max relative error {worst:.2e}"),
        t0,
    );
}

fn risk_gap(suite: &mut Suite) {
    let t0 = Instant::now();
    let mut rng = Rng::new(5);
    let spec = ModelSpec::default_cnn(16, 4);
    let clip = ClipConfig::new(1.0, 1e-2);
    let (mut batches, mut held) = (0usize, 0usize);
    for pair in 0..100u64 {
        let mut f = Model::init(spec.clone(), 2 * pair).unwrap();
        let mut g = Model::init(spec.clone(), 2 * pair + 1).unwrap();
        clip_model(&mut f, &clip, &mut rng).unwrap();
        clip_model(&mut g, &clip, &mut rng).unwrap();
        let xs: Vec<Vec<f64>> = (0..50).map(|_| (0..16).map(|_| rng.uniform()).collect()).collect();
        let ys: Vec<usize> = (0..50).map(|_| rng.int_range(0, 3)).collect();
        for eps in [0.01, 0.04, 0.1] {
            let r = proposition1_check(&f, &g, &xs, &ys, &AttackConfig::new(eps, 10, Norm::L2), 5, pair).unwrap();
            batches += r.batches.len();
            held += r.batches.iter().filter(|b| b.holds).count();
        }
    }
    suite.report(
        5,
        "risk-gap inequality on clipped model pairs",
        held == batches && batches == 100 * 10 * 3,
        format!("{held} of {batches} batches (100 pairs x 10 batches x 3 radii)"),
        t0,
    );
}

/// Counts the conditional-transfer predicate sample by sample.
fn brute_force_counts(s: &Model, t: &Model, xs: &[Vec<f64>], ys: &[usize], attack: &AttackConfig, seed: u64) -> (usize, usize) {
    let (mut eligible, mut transferred) = (0, 0);
    for (x, &y) in xs.iter().zip(ys) {
        if s.predict(x).unwrap() != y || t.predict(x).unwrap() != y {
            continue;
        }
        let a = pgd_attack(s, x, y, attack, &mut Rng::for_sample(seed, x, y)).unwrap();
        let (ps, pt) = (s.predict(&a).unwrap(), t.predict(&a).unwrap());
        let (fooled_s, fooled_t) = match attack.targeted {
            None => (ps != y, pt != y),
            Some(c) => (ps == c, pt == c),
        };
        if fooled_s {
            eligible += 1;
            transferred += usize::from(fooled_t);
        }
    }
    (eligible, transferred)
}

fn transfer_recount(suite: &mut Suite) {
    let t0 = Instant::now();
    // A 20 x 10 grid over the unit square, labelled by quadrant-ish bands.
    let xs: Vec<Vec<f64>> = (0..20)
        .flat_map(|i| (0..10).map(move |j| vec![(i as f64 + 0.5) / 20.0, (j as f64 + 0.5) / 10.0]))
        .collect();
    let ys: Vec<usize> = xs.iter().map(|x| usize::from(x[0] > 0.5) + 2 * usize::from(x[1] > 0.6)).collect();
    let (mut instances, mut matches) = (0, 0);
    for inst in 0..12u64 {
        let spec = if inst % 2 == 0 { ModelSpec::linear(2, 4) } else { ModelSpec::mlp(2, &[8], 4) };
        let s = Model::init(spec.clone(), inst).unwrap();
        let t = Model::init(spec, inst + 100).unwrap();
        let mut attack = AttackConfig::new(0.1 + 0.05 * inst as f64, 10, if inst % 3 == 0 { Norm::Linf } else { Norm::L2 });
        if inst % 4 == 3 {
            attack.targeted = Some((inst as usize) % 4);
        }
        let r = transfer_rate(&s, &t, &xs, &ys, &attack, inst).unwrap();
        let (e, n) = brute_force_counts(&s, &t, &xs, &ys, &attack, inst);
        instances += 1;
        matches += usize::from(r.eligible_count == e && r.transferred_count == n);
    }
    suite.report(
        6,
        "transfer rate equals brute-force predicate recount",
        matches == instances,
        format!("{matches} of {instances} 200-sample instances match exactly"),
        t0,
    );
}

fn lotos_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lotos"))
}

fn run_cli(args: &[&str]) -> (i32, String) {
    let out = lotos_bin().args(args).env_remove("LOTOS_OUT_DIR").output().expect("lotos runs");
    let text = format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    (out.status.code().unwrap_or(-1), text)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Average-rank Pearson correlation.
fn rank_correlation(xs: &[f64], ys: &[f64]) -> f64 {
    let ranks = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                let below = v.iter().filter(|b| *b < a).count() as f64;
                let equal = v.iter().filter(|b| *b == a).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn mean_of<'a>(values: impl Iterator<Item = &'a f64>) -> f64 {
    let finite: Vec<f64> = values.copied().filter(|v| v.is_finite()).collect();
    finite.iter().sum::<f64>() / finite.len() as f64
}

fn clip_sweep(suite: &mut Suite, dir: &Path) -> Option<PathBuf> {
    let t0 = Instant::now();
    let out = dir.join("sweep");
    let (code, text) = run_cli(&["--threads", "2", "sweep-clip", "--values", "0.8,1.0,1.2,1.5,inf", "--out", p(&out)]);
    if code != 0 {
        suite.report(7, "clip sweep trade-off", false, format!("sweep-clip exited {code}: {text}"), t0);
        return None;
    }
    let rows: Vec<SweepRow> = read_rows(&out.join("sweep.csv")).unwrap();
    let cs = [0.8, 1.0, 1.2, 1.5, f64::INFINITY];
    let robust: Vec<f64> = cs.iter().map(|&c| mean_of(rows.iter().filter(|r| r.clip == c).map(|r| &r.individual_robust_accuracy))).collect();
    let trate: Vec<f64> = cs.iter().map(|&c| mean_of(rows.iter().filter(|r| r.clip == c).map(|r| &r.trate))).collect();
    let (rho_r, rho_t) = (rank_correlation(&cs, &robust), rank_correlation(&cs, &trate));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ");
    suite.report(
        7,
        "clip sweep trade-off (robust accuracy and T_rate fall as C grows)",
        rho_r <= -0.8 && rho_t <= -0.8 && t0.elapsed().as_secs() < 20 * 60,
        format!(
            "C = 0.8, 1, 1.2, 1.5, inf; robust accuracy [{}] rho {rho_r:.2}; T_rate [{}] rho {rho_t:.2}",
            fmt(&robust),
            fmt(&trate)
        ),
        t0,
    );
    Some(out)
}

fn method_comparison(suite: &mut Suite, dir: &Path) -> Option<PathBuf> {
    let t0 = Instant::now();
    let out = dir.join("compare");
    let (code, text) = run_cli(&["--threads", "2", "compare", "--out", p(&out)]);
    if code != 0 {
        for (n, name) in [(8, "LOTOS vs clip-only"), (9, "random-vector control"), (10, "k ablation")] {
            suite.report(n, name, false, format!("compare exited {code}: {text}"), t0);
        }
        return None;
    }
    let rows: Vec<CompareRow> = read_rows(&out.join("compare.csv")).unwrap();
    let mut by: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for v in ["orig", "clip", "lotos", "random_control", "lotos_k3"] {
        let sel: Vec<&CompareRow> = rows.iter().filter(|r| r.variant == v).collect();
        by.insert(v, (mean_of(sel.iter().map(|r| &r.trate)), mean_of(sel.iter().map(|r| &r.blackbox_mean))));
    }
    let (orig, clip, lotos, control, k3) = (by["orig"], by["clip"], by["lotos"], by["random_control"], by["lotos_k3"]);
    let elapsed = t0;
    suite.report(
        8,
        "LOTOS lowers T_rate vs clip-only and keeps the black-box ordering",
        lotos.0 <= clip.0 - 0.03 && lotos.1 >= clip.1 && clip.1 >= orig.1,
        format!(
            "T_rate lotos {:.3} vs clip {:.3} (gap {:.1} pp); black-box robust accuracy lotos {:.3}, clip {:.3}, orig {:.3}",
            lotos.0,
            clip.0,
            100.0 * (clip.0 - lotos.0),
            lotos.1,
            clip.1,
            orig.1
        ),
        elapsed,
    );
    let (lo, hi) = (lotos.0.min(clip.0), lotos.0.max(clip.0));
    suite.report(
        9,
        "random-vector control sits between clip-only and LOTOS",
        (lo..=hi).contains(&control.0),
        format!("T_rate control {:.3}, clip {:.3}, lotos {:.3}", control.0, clip.0, lotos.0),
        Instant::now(),
    );
    let diff = (k3.0 - lotos.0).abs();
    suite.report(
        10,
        "k = 3 vs k = 1 T_rate within 2 pp",
        diff <= 0.02,
        format!("T_rate k=1 {:.3}, k=3 {:.3}, |diff| {:.1} pp", lotos.0, k3.0, 100.0 * diff),
        Instant::now(),
    );
    Some(out)
}

fn determinism(suite: &mut Suite, dir: &Path, heavy: &[PathBuf]) {
    let t0 = Instant::now();
    let config = json!({
        "schema_version": 1,
        "dataset": {"generator": "patch_textures", "classes": 4, "n": 32, "train": 400, "test": 100},
        "method": "lotos",
        "train": {"epochs": 3, "clip": 1.0},
        "attack": {"epsilon": 0.25, "steps": 20, "step_size": 0.03125, "random_start": true},
        "lotos": {},
        "seeds": [0, 1],
        "eval_samples": 40
    });
    let cfg_path = dir.join("small.json");
    std::fs::write(&cfg_path, config.to_string()).unwrap();
    let d = |name: &str| dir.join(name);
    let ck = d("train").join("ensemble_seed0.json");
    let ck1 = d("train").join("ensemble_seed1.json");
    let data = d("data").join("dataset.json");
    let runs: Vec<(String, Vec<String>)> = vec![
        ("data", vec!["gen-data", "--config", p(&cfg_path)]),
        ("train", vec!["train", "--config", p(&cfg_path)]),
        ("spectrum", vec!["spectrum", "--filter", "0.3,-1.2,0.5", "--n", "16"]),
        ("bounds", vec!["verify-bounds", "--trials", "10", "--seed", "7"]),
        ("attack", vec!["attack", "--checkpoint", p(&ck), "--dataset", p(&data), "--random-start"]),
        ("transfer", vec!["transfer", "--ensemble", p(&ck), "--dataset", p(&data)]),
        ("blackbox", vec!["blackbox", "--surrogate", p(&ck1), "--ensemble", p(&ck), "--dataset", p(&data)]),
        ("prop1", vec!["prop1", "--model-f", p(&ck), "--model-g", p(&ck1), "--dataset", p(&data)]),
        ("sweep_small", vec!["sweep-clip", "--values", "0.8,inf", "--config", p(&cfg_path)]),
        ("compare_small", vec!["compare", "--config", p(&cfg_path)]),
    ]
    .into_iter()
    .map(|(n, a)| (n.to_string(), a.into_iter().map(str::to_string).collect()))
    .collect();
    let mut manifests = Vec::new();
    let mut failures = Vec::new();
    for (name, args) in &runs {
        let out = d(name);
        let mut full = vec!["--threads".to_string(), "3".into(), "--out".into(), p(&out).to_string()];
        full.extend(args.iter().cloned());
        let refs: Vec<&str> = full.iter().map(String::as_str).collect();
        let (code, text) = run_cli(&refs);
        if code != 0 {
            failures.push(format!("{name} exited {code}: {}", text.trim()));
        }
        manifests.push((name.clone(), out.join("manifest.json")));
    }
    for h in heavy {
        manifests.push((h.file_name().unwrap().to_string_lossy().into_owned(), h.join("manifest.json")));
    }
    for (name, m) in &manifests {
        let again = m.parent().unwrap().join("sequential");
        let (code, text) = run_cli(&["rerun", "--manifest", p(m), "--out", p(&again)]);
        if code != 0 {
            failures.push(format!("rerun of {name} exited {code}: {}", text.trim()));
        }
    }
    let detail = if failures.is_empty() {
        format!("{} runs (3 threads) reproduced byte for byte by sequential reruns", manifests.len())
    } else {
        failures.join("; ")
    };
    suite.report(11, "CLI runs reproduce exactly from their manifests", failures.is_empty(), detail, t0);
}

fn main() {
    let mut suite = Suite { results: Vec::new() };
    let tmp = tempfile::tempdir().unwrap();
    println!("acceptance suite (desk experiment: 3 x default CNN, 4-class textures, 5 seeds)");
    spectrum_exactness(&mut suite);
    bound_theorems(&mut suite);
    clipping(&mut suite);
    gradient_check(&mut suite);
    risk_gap(&mut suite);
    transfer_recount(&mut suite);
    let mut heavy = Vec::new();
    heavy.extend(clip_sweep(&mut suite, tmp.path()));
    heavy.extend(method_comparison(&mut suite, tmp.path()));
    determinism(&mut suite, tmp.path(), &heavy);
    let passed = suite.results.iter().filter(|r| r.1).count();
    println!("{passed} of {} criteria passed", suite.results.len());
    let strict = std::env::var_os("LOTOS_ACCEPTANCE_STRICT").is_some_and(|v| v == "1");
    if strict && passed < suite.results.len() {
        std::process::exit(1);
    }
}
