#![allow(dead_code)]

use ber_core::config::{Method, RunConfig, ScenarioSection};
use ber_core::harness::RunData;
use ber_core::learner::DEFAULT_WIDTH;
use ber_core::stream::{ScenarioKind, StreamBatch};
use ber_core::trainer::{Encoder, RunResult, Trainer};

/// Desk NI benchmark: C=10, S=8, d=32 with the calibrated drift.
pub fn ni_config(method: Method, seed: u64) -> RunConfig {
    let mut c = RunConfig::new(method, ScenarioSection::of_kind(ScenarioKind::Ni));
    c.replay.mem_sz = Some(2000);
    c.replay.replay_sz = Some(1000);
    c.review.size = Some(2000);
    c.seeds.base = seed;
    c.output.checkpoints = false;
    c
}

/// Desk NIC stream: C=10, S=4 (40 single-cell batches) with a strong common
/// feature component.
pub fn nic_config(method: Method, seed: u64) -> RunConfig {
    let mut sc = ScenarioSection::of_kind(ScenarioKind::Nic);
    sc.sessions = 4;
    sc.drift = 2.0;
    sc.noise = 1.0;
    sc.shared = 8.0;
    let mut c = RunConfig::new(method, sc);
    c.replay.mem_sz = Some(50 * 40);
    c.replay.replay_sz = Some(300);
    c.review.size = Some(2000);
    c.seeds.base = seed;
    c.output.checkpoints = false;
    c
}

/// Desk MT-NC stream: 10 classes in 4 tasks of sizes [4, 2, 2, 2].
pub fn mt_config(method: Method, seed: u64) -> RunConfig {
    let mut sc = ScenarioSection::of_kind(ScenarioKind::MtNc);
    sc.batches = Some(4);
    sc.sessions = 4;
    let mut c = RunConfig::new(method, sc);
    c.epochs = 1;
    c.seeds.base = seed;
    c.output.checkpoints = false;
    c
}

/// Offline joint training on the union of all stream batches, evaluated on the
/// scenario's held-out sets.
pub fn joint_training(cfg: &RunConfig, epochs: usize) -> RunResult {
    let data = RunData::load(cfg).unwrap();
    let RunData::Eager(sc) = &data else {
        panic!("joint oracle needs an eager scenario")
    };
    let pooled = vec![StreamBatch {
        index: 1,
        examples: sc
            .batches
            .iter()
            .flat_map(|b| b.examples.iter().cloned())
            .collect(),
        task_label: None,
    }];
    let mut tc = cfg.trainer_config();
    tc.epochs = epochs;
    let trainer = Trainer::new(tc, cfg.seeds(), Encoder::Identity);
    let learner = trainer
        .fresh_learner(&pooled, sc.classes, DEFAULT_WIDTH)
        .unwrap();
    trainer
        .train_finetune_baseline(&pooled, learner, &data.eval())
        .unwrap()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
