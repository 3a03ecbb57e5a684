//! Orchestration: single runs, ablation matrices and run inspection.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Method, ModalityKind, RunConfig};
use crate::error::{Error, Result};
use crate::memory::ReplayMemory;
use crate::metrics::RunSummary;
use crate::stream::{
    generate_scenario, load_corpus, scenario_from_corpus, BatchSource, Features, LabeledExample,
    LazyCorpusStream, Manifest, Scenario, SyntheticDriftModel,
};
use crate::trainer::{EvalSets, RunResult, Trainer, MEMORY_FILE, STATE_FILE};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "run.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Stream and held-out sets of a run.
pub enum RunData {
    Eager(Scenario),
    Lazy {
        stream: LazyCorpusStream,
        validation: Vec<LabeledExample>,
        test: Vec<LabeledExample>,
    },
}

impl RunData {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let sc = &cfg.scenario;
        let seed = cfg.seeds().data;
        match &sc.corpus {
            Some(path) => {
                let tasks = sc.batches.unwrap_or(0);
                if cfg.preload_data {
                    let examples = load_corpus(path)?;
                    Ok(RunData::Eager(scenario_from_corpus(
                        sc.kind,
                        tasks,
                        examples,
                        sc.hold_out(),
                        seed,
                    )?))
                } else {
                    let manifest = Manifest::read(path)?;
                    let stream =
                        LazyCorpusStream::new(manifest, sc.kind, tasks, sc.hold_out(), seed)?;
                    let (validation, test) = stream.held_out()?;
                    Ok(RunData::Lazy {
                        stream,
                        validation,
                        test,
                    })
                }
            }
            None => {
                let spec = sc.spec(seed)?;
                let model = SyntheticDriftModel::random(
                    sc.classes,
                    sc.sessions,
                    sc.dim,
                    sc.scales(),
                    cfg.model_seed(),
                )?;
                Ok(RunData::Eager(generate_scenario(&spec, &model)?))
            }
        }
    }

    pub fn stream(&self) -> &dyn BatchSource {
        match self {
            RunData::Eager(s) => &s.batches,
            RunData::Lazy { stream, .. } => stream,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            RunData::Eager(s) => s.classes,
            RunData::Lazy { stream, .. } => stream.classes(),
        }
    }

    pub fn eval(&self) -> EvalSets<'_> {
        match self {
            RunData::Eager(s) => EvalSets {
                validation: &s.validation,
                test: &s.test,
            },
            RunData::Lazy {
                validation, test, ..
            } => EvalSets { validation, test },
        }
    }

    fn is_raster(&self) -> bool {
        let eval = self.eval();
        eval.test
            .first()
            .is_some_and(|e| matches!(e.features, Features::Image(_)))
    }
}

/// Train as configured. Checkpoints go to `out` when given and enabled; with
/// `resume`, training continues from the state saved there.
pub fn execute(
    cfg: &RunConfig,
    out: Option<&Path>,
    resume: bool,
) -> Result<(RunSummary, RunResult)> {
    cfg.validate()?;
    let data = RunData::load(cfg)?;
    let stream = data.stream();
    let eval = data.eval();
    let raster = data.is_raster();
    if cfg.scenario.corpus.is_none() && (cfg.scenario.modality == ModalityKind::Raster) != raster {
        return Err(Error::config(
            "scenario.modality does not match the generated inputs",
        ));
    }
    let mut trainer = Trainer::new(cfg.trainer_config(), cfg.seeds(), cfg.encoder(raster));
    trainer.os_probe = cfg.output.os_ram_probe;
    if cfg.output.checkpoints {
        trainer.checkpoint_dir = out.map(Path::to_path_buf);
    }
    let width = cfg.featurizer.width;
    let result = match cfg.method {
        Method::IndModel | Method::IndModelPreproc => {
            if resume {
                return Err(Error::config(
                    "--resume is supported for shared-head methods only",
                ));
            }
            trainer.train_multitask_nc(stream, &eval, width)?
        }
        method => {
            let learner = trainer.fresh_learner(stream, data.classes(), width)?;
            let dir = out.filter(|d| d.join(STATE_FILE).is_file());
            match (resume, dir) {
                (true, Some(dir)) if cfg.output.checkpoints => {
                    info!("resuming from {}", dir.display());
                    trainer.resume_ber(stream, dir, learner.featurizer, &eval, method.reviews())?
                }
                (true, _) => return Err(Error::config(
                    "--resume needs checkpoints enabled and a saved state in the output directory",
                )),
                (false, _) if method.uses_memory() => {
                    let memory = ReplayMemory::new(trainer.config.mem_sz, stream.num_batches())?;
                    trainer.train_ber(stream, learner, memory, &eval, method.reviews())?
                }
                (false, _) => trainer.train_finetune_baseline(stream, learner, &eval)?,
            }
        }
    };
    let summary = summarize(cfg, &result)?;
    Ok((summary, result))
}

pub fn summarize(cfg: &RunConfig, result: &RunResult) -> Result<RunSummary> {
    let log = &result.log;
    let report = log.resource_report();
    Ok(RunSummary {
        method: cfg.method.to_string(),
        scenario: cfg.scenario.kind.to_string(),
        seed: cfg.seeds.base,
        final_test_acc: log.final_acc()?,
        final_val_acc: log.final_val_acc()?,
        avg_val_acc: log.avg_val_acc()?,
        val_acc_per_batch: log.stream_records().map(|r| r.val_acc).collect(),
        ram_peak_bytes: report.ram_peak_bytes,
        ram_mean_bytes: report.ram_mean_bytes,
        disk_bytes: report.disk_bytes,
        warnings: result.warnings.clone(),
        timing: log.timing.clone(),
        os_rss_peak_bytes: log.os_rss_peak_bytes,
    })
}

/// Execute and write `metrics.csv`, `run.json`, `config.toml` and the final
/// memory snapshot into `out`.
pub fn run(cfg: &RunConfig, out: &Path, resume: bool) -> Result<RunSummary> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (summary, result) = execute(cfg, Some(out), resume)?;
    write_artifacts(cfg, out, &summary, &result)?;
    Ok(summary)
}

fn write_artifacts(
    cfg: &RunConfig,
    out: &Path,
    summary: &RunSummary,
    result: &RunResult,
) -> Result<()> {
    result.log.write_csv(&out.join(METRICS_FILE))?;
    let json = serde_json::to_string_pretty(summary).map_err(|e| Error::Format {
        kind: "summary",
        message: e.to_string(),
    })?;
    let path = out.join(SUMMARY_FILE);
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    let path = out.join(CONFIG_FILE);
    fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
    if let Some(m) = &result.memory {
        let mut buf = Vec::new();
        m.write_snapshot(&mut buf)?;
        let path = out.join(MEMORY_FILE);
        fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Read back the summary of a finished run.
pub fn inspect(dir: &Path) -> Result<RunSummary> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        kind: "summary",
        message: e.to_string(),
    })
}

/// Cross product of methods and seeds over one base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationMatrix {
    /// Base run config, relative to the matrix file.
    pub config: PathBuf,
    #[serde(default)]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Per-run artifacts go to `out/<method>/seed-<n>` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl AblationMatrix {
    pub fn read(path: &Path) -> Result<(Self, RunConfig)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: AblationMatrix =
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if m.config.is_relative() {
            m.config = base.join(&m.config);
        }
        if let Some(out) = &m.out {
            if out.is_relative() {
                m.out = Some(base.join(out));
            }
        }
        let cfg = read_config(&m.config)?;
        Ok((m, cfg))
    }
}

/// Read a run config, resolving a relative corpus path against the config's directory.
pub fn read_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::read(path)?;
    if let Some(corpus) = &cfg.scenario.corpus {
        if corpus.is_relative() {
            cfg.scenario.corpus = Some(path.parent().unwrap_or(Path::new(".")).join(corpus));
        }
    }
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub method: Method,
    pub seed: u64,
    pub summary: RunSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: Method,
    pub runs: usize,
    pub avg_val_acc: (f64, f64),
    pub final_val_acc: (f64, f64),
    pub final_test_acc: (f64, f64),
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Run every (method, seed) arm in parallel; results come back ordered by
/// method, then seed.
pub fn ablation(
    base: &RunConfig,
    matrix: &AblationMatrix,
) -> Result<(Vec<AblationRun>, Vec<AblationRow>)> {
    let mut methods = matrix.methods.clone();
    methods.sort_unstable();
    methods.dedup();
    let mut seeds = matrix.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    let arms: Vec<(Method, u64)> = methods
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let runs = arms
        .par_iter()
        .map(|&(method, seed)| {
            let mut cfg = base.clone();
            cfg.method = method;
            cfg.seeds.base = seed;
            let summary = match &matrix.out {
                Some(out) => {
                    let dir = out.join(method.as_str()).join(format!("seed-{seed}"));
                    cfg.output.dir = dir.clone();
                    run(&cfg, &dir, false)?
                }
                None => execute(&cfg, None, false)?.0,
            };
            info!(
                "{method} seed {seed}: final val {:.4}",
                summary.final_val_acc
            );
            Ok(AblationRun {
                method,
                seed,
                summary,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = methods
        .iter()
        .map(|&method| {
            let of = |f: fn(&RunSummary) -> f64| -> Vec<f64> {
                runs.iter()
                    .filter(|r| r.method == method)
                    .map(|r| f(&r.summary))
                    .collect()
            };
            AblationRow {
                method,
                runs: runs.iter().filter(|r| r.method == method).count(),
                avg_val_acc: mean_std(&of(|s| s.avg_val_acc)),
                final_val_acc: mean_std(&of(|s| s.final_val_acc)),
                final_test_acc: mean_std(&of(|s| s.final_test_acc)),
            }
        })
        .collect();
    Ok((runs, rows))
}

/// Comparison table in percent, mean ± std over seeds.
pub fn render_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<20} {:>5} {:>18} {:>18} {:>18}\n",
        "method", "runs", "avg_val_acc", "final_val_acc", "final_test_acc"
    );
    let cell = |(m, s): (f64, f64)| format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s);
    for r in rows {
        let _ = writeln!(
            out,
            "{:<20} {:>5} {:>18} {:>18} {:>18}",
            r.method.as_str(),
            r.runs,
            cell(r.avg_val_acc),
            cell(r.final_val_acc),
            cell(r.final_test_acc)
        );
    }
    out
}
