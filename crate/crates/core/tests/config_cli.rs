mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ber_core::config::{Method, RunConfig, ScenarioSection};
use ber_core::harness;
use ber_core::stream::ScenarioKind;
use proptest::prelude::*;

fn ber(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ber"))
        .args(args)
        .env("BER_LOG", "error")
        .output()
        .unwrap()
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn arb_method() -> impl Strategy<Value = Method> {
    prop::sample::select(Method::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn config_round_trips(
        method in arb_method(),
        kind in prop::sample::select(vec![ScenarioKind::Ni, ScenarioKind::Nic, ScenarioKind::MtNc]),
        batch in 1usize..256,
        epochs in 1usize..5,
        lr in 1e-4f64..1.0,
        mem in prop::option::of(1usize..100_000),
        replay in prop::option::of(0usize..10_000),
        review in prop::option::of(0usize..50_000),
        decay in 0.0f64..1.0,
        seed in 0u64..(i64::MAX as u64),
        drift in 0.0f64..5.0,
    ) {
        let mut cfg = RunConfig::new(method, ScenarioSection::of_kind(kind));
        cfg.batch_size = batch;
        cfg.epochs = epochs;
        cfg.lr = lr;
        cfg.replay.mem_sz = mem;
        cfg.replay.replay_sz = replay;
        cfg.review.size = review;
        cfg.review.lr_decay_factor = decay;
        cfg.seeds.base = seed;
        cfg.scenario.drift = drift;
        let text = cfg.to_toml().unwrap();
        match cfg.validate() {
            Ok(()) => prop_assert_eq!(RunConfig::parse(&text).unwrap(), cfg),
            Err(_) => prop_assert!(RunConfig::parse(&text).is_err()),
        }
    }
}

#[test]
fn shipped_configs_validate() {
    for name in ["ni", "nic", "mt_nc", "raster_ni"] {
        let cfg = harness::read_config(&configs_dir().join(format!("{name}.toml"))).unwrap();
        cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn missing_memory_size_exits_with_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, "method = \"ber\"\n[scenario]\nkind = \"NI\"\n").unwrap();
    let out = ber(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("replay.mem_sz"));

    fs::write(&path, "method = \"ber\"\nbogus = 1\n").unwrap();
    let out = ber(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let out = ber(&[
        "run",
        "--config",
        tmp.path().join("absent.toml").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn run_then_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let cfg = configs_dir().join("mt_nc.toml");
    let out = ber(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        harness::METRICS_FILE,
        harness::SUMMARY_FILE,
        harness::CONFIG_FILE,
    ] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    let saved = RunConfig::read(&dir.join(harness::CONFIG_FILE)).unwrap();
    assert_eq!(saved.seeds.base, 3);
    assert_eq!(saved.method, Method::IndModel);

    let csv = fs::read_to_string(dir.join(harness::METRICS_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);

    let shown = ber(&["inspect", "--run", dir.to_str().unwrap()]);
    assert!(shown.status.success());
    let text = String::from_utf8_lossy(&shown.stdout);
    assert!(text.contains("ind_model") && text.contains("final test acc"));

    assert_eq!(
        ber(&[
            "inspect",
            "--run",
            tmp.path().join("nope").to_str().unwrap()
        ])
        .status
        .code(),
        Some(1)
    );
}

#[test]
fn empty_matrix_prints_header_only() {
    let tmp = tempfile::tempdir().unwrap();
    let matrix = tmp.path().join("m.toml");
    let base = configs_dir().join("ni.toml");
    fs::write(
        &matrix,
        format!("config = {:?}\nmethods = []\nseeds = []\n", base),
    )
    .unwrap();
    let out = ber(&["ablation", "--matrix", matrix.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("method"));
}

#[test]
fn matrix_runs_every_arm() {
    let base = common::ni_config(Method::Baseline, 0);
    let matrix = harness::AblationMatrix {
        config: PathBuf::new(),
        methods: vec![
            Method::Baseline,
            Method::Ber,
            Method::BerReview,
            Method::Ber,
        ],
        seeds: (0..5).collect(),
        out: None,
    };
    let (runs, rows) = harness::ablation(&base, &matrix).unwrap();
    assert_eq!(runs.len(), 15);
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.runs == 5));
    let again = harness::ablation(&base, &matrix).unwrap().1;
    assert_eq!(rows, again);
    let table = harness::render_table(&rows);
    assert_eq!(table.lines().count(), 4);
}
