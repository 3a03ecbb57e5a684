//! Acceptance suite. Each criterion prints one PASS/FAIL line; run with
//! `cargo test --test acceptance -- --nocapture` to see them.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ber_core::augment::{
    apply_plan, apply_plan_traced, center_crop, AugmentPlan, RasterImage, NORMALIZE_MEAN,
    NORMALIZE_STD,
};
use ber_core::config::{Method, RunConfig};
use ber_core::harness::{self, AblationMatrix};
use ber_core::learner::{gradient, FrozenFeaturizer, LearnerParams};
use ber_core::memory::ReplayMemory;
use ber_core::rng;
use ber_core::stream::{LabeledExample, StreamBatch};
use common::{joint_training, mean, mt_config, ni_config, nic_config};
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {id} [{}] {name}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

#[test]
fn criterion_1_ni_ablation_ordering() {
    let start = Instant::now();
    let matrix = AblationMatrix {
        config: PathBuf::new(),
        methods: vec![Method::Baseline, Method::Ber, Method::BerReview],
        seeds: (0..5).collect(),
        out: None,
    };
    let (_, rows) = harness::ablation(&ni_config(Method::Baseline, 0), &matrix).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let [base, ber, review] = [0, 1, 2].map(|i| rows[i].final_val_acc.0);
    let calibrated = (0.55..=0.80).contains(&base);
    let pass = calibrated && base + 0.05 <= ber && review >= ber - 0.01 && elapsed < 60.0;
    report(
        1,
        "NI ablation ordering",
        pass,
        &format!(
            "baseline {base:.4}, ber {ber:.4}, ber_review {review:.4} (mean final val acc over 5 seeds), {elapsed:.1} s"
        ),
    );
}

#[test]
fn criterion_2_nic_baseline_collapse() {
    let start = Instant::now();
    let classes = 10.0;
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in 0..3 {
        let baseline = harness::execute(&nic_config(Method::Baseline, seed), None, false)
            .unwrap()
            .0
            .final_val_acc;
        let review = harness::execute(&nic_config(Method::BerReview, seed), None, false)
            .unwrap()
            .0
            .final_val_acc;
        let joint = joint_training(&nic_config(Method::Baseline, seed), 10)
            .log
            .final_val_acc()
            .unwrap();
        pass &= baseline <= 1.5 / classes && review > 0.6 && joint > 0.9;
        lines.push(format!(
            "seed {seed}: baseline {baseline:.4}, ber_review {review:.4}, joint {joint:.4}"
        ));
    }
    let elapsed = start.elapsed().as_secs_f64();
    pass &= elapsed < 120.0;
    report(
        2,
        "NIC baseline collapse",
        pass,
        &format!("{}; {elapsed:.1} s", lines.join("; ")),
    );
}

#[test]
fn criterion_3_mt_nc_gap() {
    let run = |m: Method| -> Vec<f64> {
        (0..5)
            .map(|s| {
                harness::execute(&mt_config(m, s), None, false)
                    .unwrap()
                    .0
                    .final_test_acc
            })
            .collect()
    };
    let base = mean(&run(Method::Baseline));
    let ind = mean(&run(Method::IndModel));
    report(
        3,
        "MT-NC independent models vs shared head",
        ind - base >= 0.20,
        &format!(
            "ind_model {ind:.4}, baseline {base:.4}, gap {:.1} points",
            100.0 * (ind - base)
        ),
    );
}

#[test]
fn criterion_4_oracle_equivalence() {
    let mut cfg = ni_config(Method::Ber, 0);
    cfg.scenario.classes = 5;
    cfg.scenario.sessions = 4;
    cfg.scenario.dim = 16;
    cfg.epochs = 10;
    let total = 5 * 4 * cfg.scenario.per_cell;
    cfg.replay.mem_sz = Some(total);
    cfg.replay.replay_sz = Some(total);
    let (ber, result) = harness::execute(&cfg, None, false).unwrap();
    let memory = result.memory.as_ref().unwrap();
    let joint = joint_training(&cfg, 10).log.final_acc().unwrap();
    let gap = (ber.final_test_acc - joint).abs();
    report(
        4,
        "oracle equivalence with joint training",
        gap <= 0.02 && memory.len() == total,
        &format!(
            "ber {:.4}, joint {joint:.4}, |diff| {:.2} points, memory {}/{total}",
            ber.final_test_acc,
            100.0 * gap,
            memory.len()
        ),
    );
}

#[test]
fn criterion_5_memory_invariants() {
    let mut runner = TestRunner::new(PtConfig {
        cases: 200,
        failure_persistence: None,
        ..PtConfig::default()
    });
    let strategy = (
        1usize..400,
        1usize..12,
        prop::collection::vec(1usize..80, 12),
        any::<u64>(),
    );
    let outcome = runner.run(&strategy, |(mem_sz, n, sizes, seed)| {
        let mut memory = ReplayMemory::new(mem_sz, n).unwrap();
        let quota = mem_sz / n;
        let mut r = rng::stream(seed, "update", &[]);
        for t in 1..=n {
            let batch = StreamBatch {
                index: t,
                examples: (0..sizes[t - 1])
                    .map(|i| LabeledExample::vector(vec![i as f64, t as f64], i % 3, 0))
                    .collect(),
                task_label: None,
            };
            memory.update(&batch, &mut r).unwrap();
            prop_assert!(memory.len() <= mem_sz);
        }
        for t in 1..=n {
            prop_assert_eq!(memory.count_from_batch(t), quota.min(sizes[t - 1]));
        }
        prop_assert!(memory.warnings().is_empty());
        Ok(())
    });
    report(
        5,
        "memory capacity and per-batch quota",
        outcome.is_ok(),
        &match &outcome {
            Ok(()) => "200 random (mem_sz, n, batch sizes) configurations".to_string(),
            Err(e) => e.to_string(),
        },
    );
}

#[test]
fn criterion_6_gradient_finite_differences() {
    let mut r = rng::stream(6, "gradient-check", &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = r.random_range(2..8);
        let h = r.random_range(2..10);
        let c = r.random_range(2..6);
        let m = r.random_range(1..6);
        let feat = FrozenFeaturizer::new(d, h, r.random());
        let mut params = LearnerParams::zeros(c, h);
        for v in params.weights.iter_mut().chain(params.bias.iter_mut()) {
            let z: f64 = StandardNormal.sample(&mut r);
            *v = z;
        }
        let data: Vec<LabeledExample> = (0..m)
            .map(|_| {
                let x = (0..d)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        z
                    })
                    .collect();
                LabeledExample::vector(x, r.random_range(0..c), 0)
            })
            .collect();
        let refs: Vec<&LabeledExample> = data.iter().collect();
        let (g, _) = gradient(&params, &feat, &refs).unwrap();
        let analytic: Vec<f64> = g.weights.iter().chain(&g.bias).copied().collect();
        let eps = 1e-6;
        let mut numeric = Vec::with_capacity(analytic.len());
        for k in 0..analytic.len() {
            let loss_at = |delta: f64| {
                let mut p = params.clone();
                let nw = p.weights.len();
                if k < nw {
                    p.weights[k] += delta;
                } else {
                    p.bias[k - nw] += delta;
                }
                gradient(&p, &feat, &refs).unwrap().1
            };
            numeric.push((loss_at(eps) - loss_at(-eps)) / (2.0 * eps));
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = analytic
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt())
            .max(1e-12);
        worst = worst.max(diff / scale);
    }
    report(
        6,
        "analytic vs central-difference gradients",
        worst < 1e-5,
        &format!("worst relative error {worst:.2e} over 100 instances"),
    );
}

fn noise_image(w: usize, h: usize, seed: u64) -> RasterImage {
    let mut r = rng::stream(seed, "test-image", &[]);
    let data = (0..w * h * 3)
        .map(|_| r.random_range(0..=255u8) as f32)
        .collect();
    RasterImage::new(w, h, data).unwrap()
}

#[test]
fn criterion_7_augmentation() {
    let mut details = Vec::new();
    let plan = AugmentPlan::default();

    let img = noise_image(128, 128, 1);
    let a = apply_plan(&img, &plan, &mut rng::stream(42, "augment", &[0]), true).unwrap();
    let b = apply_plan(&img, &plan, &mut rng::stream(42, "augment", &[0]), true).unwrap();
    let bitwise = a
        .data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    details.push(format!("bit-reproducible {bitwise}"));

    let expected = plan.step_probabilities();
    let small = AugmentPlan::with_geometry(12, 12);
    let trials = 10_000;
    let src = noise_image(16, 16, 2);
    let mut counts = [0usize; 6];
    let mut r = rng::stream(7, "firing", &[]);
    for _ in 0..trials {
        let (_, steps) = apply_plan_traced(&src, &small, &mut r, true).unwrap();
        for (c, f) in counts.iter_mut().zip(steps.fired()) {
            *c += usize::from(f);
        }
    }
    let rates_ok = counts
        .iter()
        .zip(small.step_probabilities())
        .all(|(&c, p)| {
            let rate = c as f64 / trials as f64;
            let sigma = (p * (1.0 - p) / trials as f64).sqrt();
            (rate - p).abs() <= 3.0 * sigma
        });
    let configured = expected == [1.0, 0.5, 0.5, 0.3, 1.0, 1.0];
    details.push(format!("firing counts {counts:?} of {trials}"));

    let mut coords = RasterImage::filled(128, 128, 0.0);
    for y in 0..128 {
        for x in 0..128 {
            coords.set(x, y, 0, x as f32);
            coords.set(x, y, 1, y as f32);
        }
    }
    let crop = center_crop(&coords, 100, 100).unwrap();
    let offset = (crop.get(0, 0, 0), crop.get(0, 0, 1));
    let crop_ok =
        offset == (14.0, 14.0) && (crop.get(99, 99, 0), crop.get(99, 99, 1)) == (113.0, 113.0);
    details.push(format!("crop offset {offset:?}"));

    let norm_ok = plan.mean == [0.485, 0.456, 0.406]
        && plan.std == [0.229, 0.224, 0.225]
        && NORMALIZE_MEAN == plan.mean
        && NORMALIZE_STD == plan.std;
    report(
        7,
        "augmentation determinism and calibration",
        bitwise && rates_ok && configured && crop_ok && norm_ok,
        &details.join(", "),
    );
}

fn strip_elapsed(csv: &str) -> String {
    csv.lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split(',').collect();
            f.remove(3);
            f.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn strip_timing(json: &str) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(json).unwrap();
    let obj = v.as_object_mut().unwrap();
    obj.remove("timing");
    obj.remove("os_rss_peak_bytes");
    v
}

fn artifacts(cfg: &RunConfig, dir: &Path) -> (String, serde_json::Value, Vec<u8>, Vec<u8>) {
    harness::run(cfg, dir, false).unwrap();
    let read = |f: &str| fs::read(dir.join(f)).unwrap();
    (
        strip_elapsed(&String::from_utf8(read("metrics.csv")).unwrap()),
        strip_timing(&String::from_utf8(read("run.json")).unwrap()),
        read("checkpoint.bin"),
        read("memory.bin"),
    )
}

#[test]
fn criterion_8_reproducibility() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ni_config(Method::BerReview, 3);
    cfg.output.checkpoints = true;
    let first = artifacts(&cfg, &tmp.path().join("a"));
    let second = artifacts(&cfg, &tmp.path().join("b"));
    fs::remove_dir_all(tmp.path().join("a")).unwrap();
    let rerun = artifacts(&cfg, &tmp.path().join("a"));
    report(
        8,
        "reproducible artifacts",
        first == second && first == rerun,
        "metrics.csv, run.json, checkpoint.bin and memory.bin identical across runs (timing excluded)",
    );
}
