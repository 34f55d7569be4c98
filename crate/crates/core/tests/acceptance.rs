//! Acceptance criteria 1–10. Each prints one PASS/FAIL line; the binary
//! exits nonzero if any criterion fails.
//!
//! Criteria 6 and 7 also compare against the seeded reference run in
//! `tests/data/acceptance_reference.json`. Set `MMTTA_BLESS=1` to rewrite it.

mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use mmtta::adaptation::{
    adapt_step, diversity_loss, entropy_loss, kl_loss, select_for, AdaptConfig, OptimizerState, Strategy,
};
use mmtta::datagen::Protocol;
use mmtta::harness::{
    ablation_matrix_with, prepare_source, run_with_source, severity_sweep, write_report, AblationMode,
    AblationTable, ExperimentConfig,
};
use mmtta::model::AdapterBank;
use mmtta::redundancy::{analytic_shift_correlation, correlation_matrix, redundancy_of_shifted, redundancy_score};
use mmtta::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const SUITE_BUDGET: Duration = Duration::from_secs(600);
const REFERENCE_TOLERANCE: f64 = 1e-9;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct SeverityPoint {
    severity: u8,
    precision: f64,
    recall: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Reference {
    diagnosis: Vec<SeverityPoint>,
    full_accuracy: f64,
    source_only_accuracy: f64,
}

fn reference_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/acceptance_reference.json")
}

fn blessing() -> bool {
    std::env::var("MMTTA_BLESS").is_ok_and(|v| v == "1")
}

fn load_reference() -> Option<Reference> {
    let text = std::fs::read_to_string(reference_path()).ok()?;
    serde_json::from_str(&text).ok()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= REFERENCE_TOLERANCE
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::normal(&[rows, cols], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn rank1_shift(z: &Tensor, v: &[f64], sigma: f64, seed: u64) -> Tensor {
    let alpha = Tensor::normal(&[z.rows(), 1], sigma, &mut ChaCha8Rng::seed_from_u64(seed));
    z.add(&alpha.matmul(&Tensor::from_rows(&[v])).unwrap()).unwrap()
}

fn max_off_diagonal_gap(a: &Tensor, b: &Tensor) -> f64 {
    let d = a.rows();
    let mut worst: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                worst = worst.max((a.get(i, j) - b.get(i, j)).abs());
            }
        }
    }
    worst
}

fn c1_redundancy_theorem() -> Verdict {
    let z = gaussian(10_000, 16, 1);
    let r0 = redundancy_score(&z).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let raw = Tensor::normal(&[16], 1.0, &mut rng).into_data();
    let sign: Vec<f64> = raw.iter().map(|x| x.signum()).collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    let unit: Vec<f64> = raw.iter().map(|x| x / norm).collect();

    let mut pass = r0 < 0.01;
    let mut detail = format!("R(Z)={r0:.4}");
    for (name, v, need) in [("±1 v", sign, 0.05), ("unit v", unit, r0)] {
        let shifted = rank1_shift(&z, &v, 1.0, 3);
        let r = redundancy_score(&shifted).unwrap();
        let gap = max_off_diagonal_gap(
            &correlation_matrix(&shifted).unwrap(),
            &analytic_shift_correlation(&Tensor::vector(v), 1.0),
        );
        pass &= r > need && gap <= 0.05;
        detail += &format!("; {name}: R={r:.4} (> {need:.4}), max |C-C~|={gap:.4}");
    }
    verdict(pass, detail)
}

fn c2_analytic_spot_value() -> Verdict {
    let r = redundancy_of_shifted(&Tensor::vector(vec![1.0, 1.0, 1.0]), 1.0);
    verdict((r - 0.25).abs() <= 1e-12, format!("R = {r:.15}"))
}

fn c3_gradient_suite() -> Verdict {
    let cfg = AdaptConfig::default();
    let cases = [
        (Strategy::Asymmetric, set(&[0])),
        (Strategy::Asymmetric, set(&[1])),
        (Strategy::Asymmetric, set(&[])),
        (Strategy::Symmetric, set(&[])),
    ];
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let config = small_config();
        let model = random_model(config.clone(), seed);
        let z = random_batch(&config, 8, 1000 + seed).encode(&model).unwrap();
        for (strategy, g) in &cases {
            let mut adapters = busy_adapters(&config, seed);
            let selection = select_for(*strategy, &mut adapters, g);
            worst = worst.max(max_gradient_error(&model, &adapters, &z, &selection, &cfg, 1e-5));
        }
    }
    verdict(worst <= 1e-4, format!("max relative error {worst:.2e} over 20 seeds"))
}

fn c4_loss_anchors() -> Verdict {
    let uniform = Tensor::full(&[4, 10], 0.1);
    let ent = entropy_loss(&uniform).unwrap();
    let div = diversity_loss(&uniform).unwrap();
    let p = Tensor::from_rows(&[[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]]);
    let kl = kl_loss(&p, &p).unwrap();
    let ln10 = 10f64.ln();
    let pass = (ent - ln10).abs() <= 1e-9 && (div + ln10).abs() <= 1e-9 && kl.abs() <= 1e-12;
    verdict(pass, format!("entropy {ent:.12}, diversity {div:.12}, KL(p||p) {kl:e}"))
}

fn c5_freeze_invariant() -> Verdict {
    let config = small_config();
    let model = random_model(config.clone(), 21);
    let cfg = AdaptConfig {
        learning_rate: 1e-2,
        ..AdaptConfig::default()
    };
    let mut adapters = AdapterBank::fresh(&config, 21);
    let mut opt = OptimizerState::new();
    let mut violations = 0;
    let mut seen: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for step in 0..200u64 {
        let target = ((step / 10) % 2) as usize;
        let batch = rank1_batch(&config, 64, target, 4.0, 500 + step);
        let before = adapters.clone();
        let out = adapt_step(&model, &mut adapters, &mut opt, &batch, &cfg).unwrap();
        *seen.entry(out.biased.clone()).or_default() += 1;
        for m in 0..config.num_modalities() {
            let (a, b) = (&before.pairs[m], &adapters.pairs[m]);
            let ok = if out.biased.contains(&m) {
                a.stable.down.bit_eq(&b.stable.down) && a.stable.up.bit_eq(&b.stable.up)
            } else {
                a.plastic.bit_eq(&b.plastic)
            };
            violations += usize::from(!ok);
        }
    }
    let oscillated = seen.contains_key(&vec![0]) && seen.contains_key(&vec![1]);
    verdict(
        violations == 0 && oscillated,
        format!("{violations} violations over 200 steps; diagnosed sets {seen:?}"),
    )
}

fn base_config(seed: u64, protocol: Protocol) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    cfg.stream.protocol = protocol;
    cfg
}

fn c6_diagnosis_quality(reference: &mut Reference, stored: Option<&Reference>) -> Verdict {
    let cfg = base_config(0, Protocol::Interleaved);
    let source = prepare_source(&cfg).unwrap();
    let sweep = severity_sweep(&cfg, &source).unwrap();
    let points: Vec<SeverityPoint> = sweep
        .iter()
        .map(|(s, r)| SeverityPoint {
            severity: *s,
            precision: r.precision,
            recall: r.recall.unwrap_or(0.0),
        })
        .collect();
    let top = &points[4];
    let inversions = points.windows(2).filter(|w| w[1].recall < w[0].recall).count();
    let matches = stored.is_none_or(|r| {
        r.diagnosis.len() == points.len()
            && r.diagnosis.iter().zip(&points).all(|(a, b)| {
                a.severity == b.severity && close(a.precision, b.precision) && close(a.recall, b.recall)
            })
    });
    let pass = top.recall >= 0.95 && top.precision >= 0.90 && inversions <= 1 && matches;
    let recalls: Vec<String> = points.iter().map(|p| format!("{:.3}", p.recall)).collect();
    reference.diagnosis = points.clone();
    verdict(
        pass,
        format!(
            "severity 5 recall {:.3} precision {:.3}; recall by severity [{}], {inversions} inversions; reference {}",
            top.recall,
            top.precision,
            recalls.join(", "),
            if matches { "matches" } else { "differs" }
        ),
    )
}

fn c7_plasticity_gain(reference: &mut Reference, stored: Option<&Reference>) -> Verdict {
    let cfg = base_config(0, Protocol::Episodic);
    let source = prepare_source(&cfg).unwrap();
    let full = run_with_source(&cfg, &source).unwrap();
    let frozen = run_with_source(
        &ExperimentConfig {
            ablation: AblationMode::SourceOnly,
            ..cfg.clone()
        },
        &source,
    )
    .unwrap();
    let margin = full.mean_accuracy - frozen.mean_accuracy;
    reference.full_accuracy = full.mean_accuracy;
    reference.source_only_accuracy = frozen.mean_accuracy;
    let matches = stored.is_none_or(|r| {
        close(r.full_accuracy, full.mean_accuracy) && close(r.source_only_accuracy, frozen.mean_accuracy)
    });
    verdict(
        margin >= 5.0 && matches,
        format!(
            "full {:.2} vs source_only {:.2}: +{margin:.2} points; pinned margin {}",
            full.mean_accuracy,
            frozen.mean_accuracy,
            if matches { "matches" } else { "differs" }
        ),
    )
}

fn c8_stability_bound(table: &AblationTable) -> Verdict {
    let delta = |mode| table.get(mode).unwrap().forgetting.as_ref().unwrap().joint;
    let full = delta(AblationMode::Full);
    let sym = delta(AblationMode::SymmetricAll);
    verdict(
        full <= 1.0 && sym > full,
        format!("forgetting full {full:.2} (≤ 1.00), symmetric_all {sym:.2} (must exceed full)"),
    )
}

fn c9_ablation_ordering(tables: &[AblationTable]) -> Verdict {
    let order = [
        AblationMode::Full,
        AblationMode::NoStable,
        AblationMode::NoPlastic,
        AblationMode::SymmetricAll,
        AblationMode::AsymmetricOpposite,
    ];
    let means: Vec<f64> = order
        .iter()
        .map(|&m| tables.iter().map(|t| t.get(m).unwrap().mean_accuracy).sum::<f64>() / tables.len() as f64)
        .collect();
    let broken: Vec<String> = order
        .windows(2)
        .zip(means.windows(2))
        .filter(|(_, v)| v[0] + 0.5 < v[1])
        .map(|(m, v)| format!("{} {:.2} < {} {:.2}", m[0].as_str(), v[0], m[1].as_str(), v[1]))
        .collect();
    let listing: Vec<String> = order
        .iter()
        .zip(&means)
        .map(|(m, v)| format!("{} {v:.2}", m.as_str()))
        .collect();
    let mut detail = listing.join(" ≥ ");
    if !broken.is_empty() {
        detail += &format!("; broken: {}", broken.join(", "));
    }
    verdict(broken.is_empty(), detail)
}

fn c10_determinism() -> Verdict {
    let cfg = base_config(3, Protocol::Continual);
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let source = prepare_source(&cfg).unwrap();
        let report = run_with_source(&cfg, &source).unwrap();
        write_report(&report, dir.path().join(name)).unwrap();
    }
    let read = |name: &str| std::fs::read(dir.path().join(name).join("report.json")).unwrap();
    let (a, b) = (read("a"), read("b"));
    verdict(a == b, format!("report.json {} bytes, identical: {}", a.len(), a == b))
}

fn main() -> ExitCode {
    let suite = Instant::now();
    let stored = if blessing() { None } else { load_reference() };
    let mut reference = Reference::default();
    let mut failures = 0;
    let mut report = |n: usize, name: &str, budget: Option<Duration>, run: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let mut v = run();
        let elapsed = start.elapsed();
        if let Some(limit) = budget {
            if elapsed > limit {
                v.pass = false;
                v.detail += &format!("; over the {}s budget", limit.as_secs());
            }
        }
        failures += usize::from(!v.pass);
        println!(
            "criterion {n:>2} {}  {name}: {} ({:.1}s)",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            elapsed.as_secs_f64()
        );
    };

    report(1, "redundancy rises under rank-1 shift", Some(Duration::from_secs(5)), &mut c1_redundancy_theorem);
    report(2, "analytic spot value", None, &mut c2_analytic_spot_value);
    report(3, "objective gradient suite", Some(Duration::from_secs(30)), &mut c3_gradient_suite);
    report(4, "loss anchors", None, &mut c4_loss_anchors);
    report(5, "asymmetry freeze invariant", Some(Duration::from_secs(60)), &mut c5_freeze_invariant);
    report(6, "diagnosis quality", None, &mut || c6_diagnosis_quality(&mut reference, stored.as_ref()));
    report(7, "plasticity gain", Some(Duration::from_secs(180)), &mut || {
        c7_plasticity_gain(&mut reference, stored.as_ref())
    });

    let tables: Vec<AblationTable> = (0..3)
        .map(|seed| {
            let cfg = base_config(seed, Protocol::Interleaved);
            let source = prepare_source(&cfg).unwrap();
            ablation_matrix_with(&cfg, &source).unwrap()
        })
        .collect();
    report(8, "stability bound (interleaved, seed 0)", None, &mut || c8_stability_bound(&tables[0]));
    report(9, "ablation ordering (interleaved, 3 seeds)", None, &mut || c9_ablation_ordering(&tables));
    report(10, "determinism", None, &mut c10_determinism);

    let total = suite.elapsed();
    let in_budget = total <= SUITE_BUDGET;
    println!(
        "suite runtime {:.1}s ({} the {}s budget)",
        total.as_secs_f64(),
        if in_budget { "within" } else { "over" },
        SUITE_BUDGET.as_secs()
    );
    if blessing() {
        std::fs::create_dir_all(reference_path().parent().unwrap()).unwrap();
        std::fs::write(reference_path(), serde_json::to_string_pretty(&reference).unwrap() + "\n").unwrap();
        println!("wrote {}", reference_path().display());
    } else if stored.is_none() {
        println!("no reference file at {}; criteria 6 and 7 ran without it", reference_path().display());
        failures += 1;
    }
    failures += usize::from(!in_budget);
    println!("{failures} failing");
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
