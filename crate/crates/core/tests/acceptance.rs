//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use protoadapt_core::autodiff::{Tape, Tensor};
use protoadapt_core::checks::{gradcheck_suite, CheckedLoss, GRADCHECK_EPS, GRADCHECK_FIXTURES, GRADCHECK_TOLERANCE};
use protoadapt_core::eval::{coco_thresholds, mean_average_precision, run_stage, Stage};
use protoadapt_core::finetune::{finetune, init_params, instance_weights_of, prototypes_of, sgd_step, DEFAULT_LR};
use protoadapt_core::metrics::{ib_level, icv_level, IbLevel, IcvLevel};
use protoadapt_core::prompter::{domain_diversity_loss, init_domains, DpConfig};
use protoadapt_core::synth::{mean_pairwise_cosine, plant_outlier};
use protoadapt_core::{sample_episode, synth_pack, Episode, EpisodeSpec, FinetuneConfig, SynthConfig};

const SEEDS: u64 = 10;
const N_WAY: usize = 5;
const K_SHOT: usize = 5;
const N_BG: usize = 530;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn synth_episode(seed: u64) -> Episode {
    let pack = synth_pack(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })
    .expect("synth pack");
    sample_episode(&pack, &EpisodeSpec::new(N_WAY, K_SHOT, N_BG, seed)).expect("synth episode")
}

fn base_config(seed: u64) -> FinetuneConfig {
    FinetuneConfig {
        seed,
        ..FinetuneConfig::default()
    }
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let reports = gradcheck_suite(&CheckedLoss::ALL, GRADCHECK_FIXTURES, GRADCHECK_EPS, GRADCHECK_TOLERANCE)
        .expect("gradcheck suite runs");
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.max_error).fold(0.0, f64::max);
    let detail: Vec<String> = reports.iter().map(|r| format!("{}={:.1e}", r.loss.name(), r.max_error)).collect();
    outcome(
        reports.iter().all(|r| r.passed) && elapsed < Duration::from_secs(60),
        format!("max rel err {worst:.1e} [{}] in {:.1}s", detail.join(" "), elapsed.as_secs_f64()),
    )
}

fn diversity(rows: &[&[f64]]) -> f64 {
    let tape = Tape::new();
    let d = tape.constant(Tensor::from_rows(rows).unwrap()).unwrap();
    tape.scalar_value(domain_diversity_loss(&tape, d, 0.1).unwrap())
}

fn infonce_closed_forms() -> Outcome {
    let single = diversity(&[&[0.4, -0.3]]);
    let row = [0.6, 0.8];
    let four = diversity(&[&row, &row, &row, &row]);
    let ortho = diversity(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let want_ortho = (1.0 + (-10f64).exp()).ln();
    let ok = single == 0.0 && (four - 4f64.ln()).abs() <= 1e-9 && (ortho - want_ortho).abs() <= 1e-9;
    outcome(ok, format!("N_dom=1 -> {single}, identical x4 -> {four:.12}, orthonormal -> {ortho:.12}"))
}

fn metric_tables() -> Outcome {
    let ib = [
        (0.278, IbLevel::Slight),
        (0.804, IbLevel::Slight),
        (0.718, IbLevel::Slight),
        (3.800, IbLevel::Moderate),
        (4.660, IbLevel::Significant),
        (5.010, IbLevel::Significant),
    ];
    let icv = [
        (0.138, IcvLevel::Small),
        (0.171, IcvLevel::Large),
        (0.155, IcvLevel::Medium),
        (0.183, IcvLevel::Large),
        (0.132, IcvLevel::Small),
    ];
    let ib_ok = ib.iter().filter(|(v, l)| ib_level(*v).ok() == Some(*l)).count();
    let icv_ok = icv.iter().filter(|(v, l)| icv_level(*v) == *l).count();
    outcome(ib_ok == 6 && icv_ok == 5, format!("IB {ib_ok}/6, ICV {icv_ok}/5 published levels"))
}

/// Accuracies per stage for one seed plus the LIF cosine check.
struct SeedRun {
    accuracy: [f64; 4],
    frozen_full_time: Duration,
    lif_cos: (f64, f64),
}

const STAGES: [Stage; 4] = [Stage::Frozen, Stage::FtHeads, Stage::Lif, Stage::Full];

fn run_seed(seed: u64) -> SeedRun {
    let episode = synth_episode(seed);
    let base = base_config(seed);
    let mut accuracy = [0.0; 4];
    let mut frozen_full_time = Duration::ZERO;
    let mut lif_cos = (0.0, 0.0);
    for (i, stage) in STAGES.iter().enumerate() {
        let start = Instant::now();
        let (params, report) = run_stage(&episode, &base, *stage, &[0.5]).expect("stage runs");
        if matches!(stage, Stage::Frozen | Stage::Full) {
            frozen_full_time += start.elapsed();
        }
        accuracy[i] = report.accuracy;
        if *stage == Stage::Lif {
            let config = base.clone().with_modules(stage.modules());
            let before = prototypes_of(&init_params(&episode, &config).unwrap()).unwrap();
            let after = prototypes_of(&params).unwrap();
            lif_cos = (
                mean_pairwise_cosine(&before.object_prototypes),
                mean_pairwise_cosine(&after.object_prototypes),
            );
        }
    }
    SeedRun {
        accuracy,
        frozen_full_time,
        lif_cos,
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn synthetic_benchmark(runs: &[SeedRun]) -> Outcome {
    let frozen = mean(runs.iter().map(|r| r.accuracy[0]));
    let full = mean(runs.iter().map(|r| r.accuracy[3]));
    let time: Duration = runs.iter().map(|r| r.frozen_full_time).sum();
    let gain = full - frozen;
    outcome(
        gain >= 0.10 && time < Duration::from_secs(120),
        format!(
            "frozen {:.4}, full {:.4}, gain {:+.2} pp (need >= +10), {:.1}s",
            frozen,
            full,
            100.0 * gain,
            time.as_secs_f64()
        ),
    )
}

fn ablation_ordering(runs: &[SeedRun]) -> Outcome {
    let m: Vec<f64> = (0..4).map(|i| mean(runs.iter().map(|r| r.accuracy[i]))).collect();
    let ok = m[0] < m[1] && m[1] <= m[2] && m[2] <= m[3];
    outcome(
        ok,
        format!("frozen {:.4}, ft-heads {:.4}, +lif {:.4}, full {:.4}", m[0], m[1], m[2], m[3]),
    )
}

fn lif_property(runs: &[SeedRun]) -> Outcome {
    let held = runs.iter().filter(|r| r.lif_cos.1 <= r.lif_cos.0).count();
    let worst = runs.iter().map(|r| r.lif_cos.1 - r.lif_cos.0).fold(f64::NEG_INFINITY, f64::max);
    outcome(
        held == runs.len(),
        format!("cosine did not increase in {held}/{} seeds (largest change {worst:+.2e})", runs.len()),
    )
}

fn ir_property() -> Outcome {
    let mut below = 0;
    let mut weights = Vec::new();
    for seed in 0..SEEDS {
        let mut episode = synth_episode(seed);
        let row = plant_outlier(&mut episode, 0, 1).expect("outlier planted");
        let config = base_config(seed).resolved_for(episode.n_way());
        let (params, _) = finetune(&episode, &config).expect("finetune");
        let w = instance_weights_of(&params).unwrap().get(0, row);
        weights.push(format!("{w:.4}"));
        if w < 1.0 / K_SHOT as f64 {
            below += 1;
        }
    }
    outcome(
        below >= 8,
        format!("outlier weight < 1/K in {below}/{SEEDS} seeds (need >= 8): [{}]", weights.join(" ")),
    )
}

fn dp_diversity() -> Outcome {
    let mut held = 0;
    let mut changes = Vec::new();
    for seed in 0..SEEDS {
        let cfg = DpConfig::default();
        let mut domains = init_domains(N_WAY, 64, &cfg, seed).unwrap().matrix;
        let before = mean_pairwise_cosine(&domains);
        for _ in 0..200 {
            let tape = Tape::new();
            let d = tape.leaf(domains.clone(), true).unwrap();
            let loss = domain_diversity_loss(&tape, d, cfg.tau_domain).unwrap();
            let grads = tape.backward(loss).unwrap();
            sgd_step(&mut domains, &grads.get(d), DEFAULT_LR).unwrap();
        }
        let after = mean_pairwise_cosine(&domains);
        changes.push(after - before);
        if after < before {
            held += 1;
        }
    }
    let worst = changes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    outcome(
        held == SEEDS as usize,
        format!("mean off-diagonal cosine decreased in {held}/{SEEDS} seeds (smallest decrease {:.3e})", -worst),
    )
}

fn map_oracle() -> Outcome {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    let thresholds = coco_thresholds();
    let mut equal = 0;
    for _ in 0..50 {
        let (dets, gts) = common::tiny_fixture(&mut rng);
        let got = mean_average_precision(&dets, &gts, 2, &thresholds).unwrap().map;
        let want = common::brute_force_map(&dets, &gts, 2, &thresholds);
        if got.to_bits() == want.to_bits() {
            equal += 1;
        }
    }
    outcome(equal == 50, format!("{equal}/50 fixtures bit-identical to the exhaustive oracle"))
}

fn determinism() -> Outcome {
    let episode = synth_episode(3);
    let config = base_config(3).resolved_for(episode.n_way());
    let (p1, l1) = finetune(&episode, &config).unwrap();
    let (p2, l2) = finetune(&episode, &config).unwrap();
    let worst = l1
        .totals()
        .iter()
        .zip(l2.totals())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let same_bytes = p1.checkpoint_bytes().unwrap() == p2.checkpoint_bytes().unwrap();
    let same_len = l1.epochs.len() == l2.epochs.len();
    outcome(
        worst <= 1e-12 && same_bytes && same_len,
        format!(
            "{} epochs, max loss diff {worst:.1e}, checkpoints {}",
            l1.epochs.len(),
            if same_bytes { "byte-identical" } else { "differ" }
        ),
    )
}

fn main() {
    let start = Instant::now();

    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n:>2} {:<28} {}  {}", name, if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };

    report(1, "gradient fidelity", gradient_fidelity());
    report(2, "InfoNCE closed forms", infonce_closed_forms());
    report(3, "metric table round-trip", metric_tables());

    let runs: Vec<SeedRun> = (0..SEEDS).map(run_seed).collect();
    report(4, "synthetic benchmark gain", synthetic_benchmark(&runs));
    report(5, "ablation ordering", ablation_ordering(&runs));
    report(6, "LIF prototype cosine", lif_property(&runs));
    report(7, "IR outlier weight", ir_property());
    report(8, "DP domain diversity", dp_diversity());
    report(9, "mAP oracle equivalence", map_oracle());
    report(10, "determinism", determinism());

    let failed: BTreeSet<usize> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} passed in {:.1}s{}",
        results.len() - failed.len(),
        results.len(),
        start.elapsed().as_secs_f64(),
        if failed.is_empty() { String::new() } else { format!(", failing {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
