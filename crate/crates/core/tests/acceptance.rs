//! One PASS/FAIL line per acceptance criterion. Exits nonzero if any fail.

mod common;

use std::time::{Duration, Instant};

use common::fixtures::{corrupted, fixture};
use common::gradients::gradient_check;
use kfusion::fusion::{fit_plan, fuse, horizontal_ensemble, FitOptions, FusedProbs, ReferenceChoice};
use kfusion::lab::{forget_analysis, gd_trajectory, gd_trajectory_with, margins, synthetic_data, LabDataSpec, LabInit};
use kfusion::metrics::forget_report_at;
use kfusion::trainer::{
    accuracy, distill, run, teacher_from_probs, DatasetSpec, DistillConfig, ExperimentConfig, ModelSpec, NoiseKind,
    NoiseSpec, RunArtifacts, TrainingSpec,
};
use kfusion::{Activation, PredictionLog};

const IDENTITY_LOGS: u64 = 1000;
const NON_DEGRADATION_RUNS: u64 = 50;
const NOISY_SEEDS: u64 = 5;
const KF_MARGIN: f64 = 0.010;
const STUDENT_MARGIN: f64 = 0.005;
const EXACT_TOLERANCE: f64 = 1e-6;
const DEPTH_TOLERANCE: f64 = 0.05;
const DEPTH_SEEDS: u64 = 50;
const DEPTH_STEPS: usize = 1500;
const NEAR_ANGLE: f64 = 0.5;
const RATE_CONSTANT: f64 = 60.0;
const GRADIENT_TOLERANCE: f64 = 1e-4;
const ROUND_TRIPS: u64 = 100;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(name: &str, budget: Duration, body: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = body();
    let elapsed = start.elapsed();
    let in_time = elapsed <= budget;
    let pass = outcome.pass && in_time;
    println!(
        "{} {name}: {} [{:.1} s of {} s{}]",
        if pass { "PASS" } else { "FAIL" },
        outcome.detail,
        elapsed.as_secs_f64(),
        budget.as_secs(),
        if in_time { "" } else { ", over budget" }
    );
    pass
}

fn metric_identity() -> Outcome {
    let mut checked = 0usize;
    let mut failures = 0usize;
    for seed in 0..IDENTITY_LOGS {
        let log = common::random_log(seed);
        let last = log.epochs() - 1;
        let report = forget_report_at(&log, last).unwrap();
        let reference = common::correct_bits(&log, last);
        let acc_ref = reference.iter().filter(|&&b| b).count() as i64;
        for e in 0..log.epochs() {
            let bits = common::correct_bits(&log, e);
            let acc_e = bits.iter().filter(|&&b| b).count() as i64;
            let forgot = bits.iter().zip(&reference).filter(|(b, r)| **b && !**r).count();
            let learned = bits.iter().zip(&reference).filter(|(b, r)| !**b && **r).count();
            let ok = report.forget_counts[e] == forgot
                && report.learn_counts[e] == learned
                && acc_ref - acc_e == report.learn_counts[e] as i64 - report.forget_counts[e] as i64;
            failures += usize::from(!ok);
            checked += 1;
        }
    }
    Outcome {
        pass: failures == 0,
        detail: format!("{checked} epochs over {IDENTITY_LOGS} logs, {failures} violations"),
    }
}

fn small_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        dataset: DatasetSpec {
            classes: 5,
            dim: 10,
            mean_scale: 2.0,
            noise_std: 1.0,
            train: 800,
            validation: 300,
            test: 300,
        },
        noise: NoiseSpec { kind: NoiseKind::Symmetric, fraction: 0.3 },
        model: ModelSpec { hidden: vec![32], activation: Activation::Relu, bias: true },
        training: TrainingSpec {
            epochs: 15,
            lr: 0.05,
            batch_size: 64,
            momentum: 0.9,
            step_decay: None,
            ema_decay: None,
        },
    }
}

fn epoch_accuracy(log: &PredictionLog, epoch: usize) -> f64 {
    FusedProbs { examples: log.examples(), classes: log.classes(), probs: log.epoch_f64(epoch) }.accuracy(log.labels())
}

fn non_degradation() -> Outcome {
    let options = FitOptions { reference: ReferenceChoice::BestAccuracy, ..Default::default() };
    let mut held = 0;
    let mut gain = 0.0;
    for seed in 0..NON_DEGRADATION_RUNS {
        let artifacts = run(&small_config(seed)).unwrap();
        let val = &artifacts.validation_log;
        let plan = fit_plan(val, &options).unwrap();
        let reference = epoch_accuracy(val, plan.reference_epoch);
        let fused = fuse(&plan, val).unwrap().accuracy(val.labels());
        if fused >= reference {
            held += 1;
        }
        gain += fused - reference;
    }
    Outcome {
        pass: held == NON_DEGRADATION_RUNS,
        detail: format!(
            "{held}/{NON_DEGRADATION_RUNS} runs fused >= early-stopped, mean gain {:.2} points",
            100.0 * gain / NON_DEGRADATION_RUNS as f64
        ),
    }
}

fn noisy_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        dataset: DatasetSpec {
            classes: 10,
            dim: 50,
            mean_scale: 3.0,
            noise_std: 1.0,
            train: 20_000,
            validation: 2_000,
            test: 2_000,
        },
        noise: NoiseSpec { kind: NoiseKind::Symmetric, fraction: 0.4 },
        model: ModelSpec { hidden: vec![256], activation: Activation::Relu, bias: true },
        training: TrainingSpec {
            epochs: 60,
            lr: 0.05,
            batch_size: 128,
            momentum: 0.9,
            step_decay: None,
            ema_decay: None,
        },
    }
}

struct NoisyRun {
    artifacts: RunArtifacts,
    baseline: f64,
    kf: f64,
    horizontal: f64,
    teacher: ndarray::Array2<f64>,
}

fn noisy_runs() -> Vec<NoisyRun> {
    (0..NOISY_SEEDS)
        .map(|seed| {
            let artifacts = run(&noisy_config(seed)).unwrap();
            let test = &artifacts.test_log;
            let baseline = epoch_accuracy(test, artifacts.best_validation_epoch());
            let plan = fit_plan(&artifacts.validation_log, &FitOptions::default()).unwrap();
            let kf = fuse(&plan, test).unwrap().accuracy(test.labels());
            let k = plan.checkpoints(test.epochs()).len();
            let horizontal = horizontal_ensemble(test, k).unwrap().accuracy(test.labels());
            let teacher = teacher_from_probs(&fuse(&plan, &artifacts.train_log).unwrap());
            NoisyRun { artifacts, baseline, kf, horizontal, teacher }
        })
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn noisy_improvement(runs: &[NoisyRun]) -> Outcome {
    let baseline = mean(runs.iter().map(|r| r.baseline));
    let kf = mean(runs.iter().map(|r| r.kf));
    let horizontal = mean(runs.iter().map(|r| r.horizontal));
    let per_seed = runs.iter().all(|r| r.kf > r.horizontal);
    Outcome {
        pass: kf - baseline >= KF_MARGIN && kf > horizontal && per_seed,
        detail: format!(
            "test accuracy KF {:.2}, early-stopped {:.2} (+{:.2} points), horizontal {:.2}",
            100.0 * kf,
            100.0 * baseline,
            100.0 * (kf - baseline),
            100.0 * horizontal
        ),
    }
}

fn distillation(runs: &[NoisyRun]) -> Outcome {
    let baseline = mean(runs.iter().map(|r| r.baseline));
    let mut cells = Vec::new();
    let mut headline = f64::NAN;
    for temperature in [1.0, 2.5, 4.0] {
        for alpha in [0.5, 0.9] {
            let student = mean(runs.iter().map(|r| {
                let cfg = DistillConfig { temperature, alpha, ..DistillConfig::like(&r.artifacts.config) };
                let w = distill(&r.teacher, &r.artifacts.splits.train, &cfg).unwrap();
                accuracy(&w, &r.artifacts.splits.test).unwrap()
            }));
            if temperature == 2.5 && alpha == 0.9 {
                headline = student;
            }
            cells.push(format!("T={temperature} a={alpha}: {:.2}", 100.0 * student));
        }
    }
    Outcome {
        pass: headline - baseline >= STUDENT_MARGIN,
        detail: format!(
            "student (T=2.5, a=0.9) {:.2} vs early-stopped {:.2} (+{:.2} points); sweep {}",
            100.0 * headline,
            100.0 * baseline,
            100.0 * (headline - baseline),
            cells.join(", ")
        ),
    }
}

fn depth_one_exactness() -> Outcome {
    let spec = LabDataSpec { points: 300, dim: 20, spectrum_decay: 0.85, label_flip: 0.1, unit_optimum: true };
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let (x, y) = synthetic_data(&spec, seed).unwrap();
        let r = gd_trajectory(x.view(), &y, 1, 1e-3, 200, seed).unwrap();
        worst = worst.max(r.max_component_error());
    }
    Outcome {
        pass: worst <= EXACT_TOLERANCE,
        detail: format!("10 datasets, worst relative component error {worst:.2e}"),
    }
}

fn depth_regime() -> Outcome {
    let spec = LabDataSpec { points: 300, dim: 20, spectrum_decay: 0.85, label_flip: 0.1, unit_optimum: true };
    let gamma = 1e-3;
    let (mut deviation, mut rate_gap) = (0.0f64, 0.0f64);
    let (mut cases, mut claim_held, mut flagged) = (0, 0, 0);
    for seed in 0..DEPTH_SEEDS {
        let (x, y) = synthetic_data(&spec, seed).unwrap();
        for depth in [2, 3] {
            let init = LabInit::Near { seed: seed + 1000, angle: NEAR_ANGLE };
            let r = gd_trajectory_with(x.view(), &y, depth, gamma, DEPTH_STEPS, init).unwrap();
            deviation = deviation.max(r.max_relative_deviation());
            let points = r.eigen.rotated.clone();
            let predictions = forget_analysis(&r, points.view(), &y);
            let mut held = predictions.iter().any(|p| p.forgotten);
            for (i, p) in predictions.iter().enumerate() {
                let m = margins(&r, points.row(i).as_slice().unwrap(), y[i]);
                rate_gap = rate_gap.max(((m[1] - m[0]) - p.rate).abs());
                if p.forgotten {
                    flagged += 1;
                    held &= p.forget_time.is_some_and(|t| t <= DEPTH_STEPS && m[t] <= 0.0);
                }
            }
            cases += 1;
            claim_held += usize::from(held);
        }
    }
    let bound = RATE_CONSTANT * gamma * gamma;
    Outcome {
        pass: deviation <= DEPTH_TOLERANCE && claim_held == cases && rate_gap <= bound,
        detail: format!(
            "max deviation {:.2}% over {DEPTH_STEPS} steps; finite forget time in {claim_held}/{cases} cases \
             ({flagged} forgotten points); one-step rate gap {rate_gap:.2e} <= {bound:.1e}",
            100.0 * deviation
        ),
    }
}

fn gradient_oracle() -> Outcome {
    let errors: Vec<(&str, f64)> = [("squared", 11), ("cross_entropy", 12), ("distill", 13)]
        .into_iter()
        .map(|(kind, seed)| (kind, gradient_check(kind, 50, seed)))
        .collect();
    Outcome {
        pass: errors.iter().all(|(_, e)| *e <= GRADIENT_TOLERANCE),
        detail: errors.iter().map(|(k, e)| format!("{k} {e:.1e}")).collect::<Vec<_>>().join(", "),
    }
}

fn format_round_trip() -> Outcome {
    let exact = (0..ROUND_TRIPS)
        .filter(|&seed| {
            let log = common::random_log(10_000 + seed);
            let bytes = log.to_bytes();
            PredictionLog::from_bytes(&bytes).is_ok_and(|back| back == log && back.to_bytes() == bytes)
        })
        .count();
    let cases = corrupted();
    let classified = cases
        .iter()
        .filter(|(name, check)| PredictionLog::from_bytes(&fixture(name)).is_err_and(|e| check(&e)))
        .count();
    Outcome {
        pass: exact == ROUND_TRIPS as usize && classified == cases.len(),
        detail: format!(
            "{exact}/{ROUND_TRIPS} bit-exact round trips, {classified}/{} corrupted fixtures classified",
            cases.len()
        ),
    }
}

fn main() {
    let secs = Duration::from_secs;
    let mut all = true;
    all &= check("metric identity", secs(10), metric_identity);
    all &= check("non-degradation", secs(120), non_degradation);
    let mut runs = Vec::new();
    all &= check("noisy-label improvement", secs(600), || {
        runs = noisy_runs();
        noisy_improvement(&runs)
    });
    all &= check("distillation non-inferiority", secs(600), || distillation(&runs));
    all &= check("theory L=1 exactness", secs(5), depth_one_exactness);
    all &= check("theory depth", secs(30), depth_regime);
    all &= check("gradient oracle", secs(30), gradient_oracle);
    all &= check("format", secs(30), format_round_trip);
    if !all {
        std::process::exit(1);
    }
}
