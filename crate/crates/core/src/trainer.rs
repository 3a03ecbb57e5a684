//! Training strategies over a stream of batches.
//!
//! [`Trainer::train_ber`] is batch-level experience replay: for every batch `t`
//! and every epoch, a fresh replay sample `D_M` of `replay_sz` examples is drawn
//! from memory (only when `t > 1`), concatenated with `D_t`, and one shuffled SGD
//! pass is made over the union at `lr_replay`. After the last epoch of `t` the
//! memory receives its quota of `D_t`. After the whole stream, an optional review
//! pass trains on a `review_sz` sample of memory at `lr_replay * review_lr_decay`.
//!
//! [`Trainer::train_finetune_baseline`] runs the same loop with no memory, replay
//! or review. [`Trainer::train_multitask_nc`] trains an independent head per task
//! on top of the shared frozen featurizer and routes predictions by task label.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_plan, AugmentPlan};
use crate::error::{Error, Result};
use crate::learner::{
    argmax, evaluate, fresh_learner, sgd_epoch, FrozenFeaturizer, LearnerParams, SgdConfig,
};
use crate::memory::{record_bytes, ReplayMemory};
use crate::metrics::{os_rss_bytes, BatchRecord, MetricsLog, Phase};
use crate::rng::{self, derive_seed};
use crate::stream::{BatchSource, Features, LabeledExample, StreamBatch};

/// Seed of the shared frozen featurizer, the stand-in for pretrained weights that
/// every fresh learner starts from.
pub const PRETRAINED_SEED: u64 = 161;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub mem_sz: usize,
    pub replay_sz: usize,
    pub review_sz: usize,
    pub batch_sz: usize,
    pub lr_replay: f64,
    pub review_lr_decay: f64,
    pub epochs: usize,
    pub review_epochs: usize,
    pub momentum: f64,
}

impl TrainerConfig {
    /// NI column of the published hyper-parameter table. The learning rate is not
    /// published; 0.01 is a placeholder.
    pub fn ni_published() -> Self {
        Self {
            mem_sz: 10_000,
            replay_sz: 10_000,
            review_sz: 20_000,
            batch_sz: 32,
            lr_replay: 0.01,
            review_lr_decay: 0.5,
            epochs: 2,
            review_epochs: 1,
            momentum: 0.0,
        }
    }

    /// NIC column: 200 stored examples per batch over 391 batches, 600 replayed.
    pub fn nic_published() -> Self {
        Self {
            mem_sz: 200 * 391,
            replay_sz: 600,
            ..Self::ni_published()
        }
    }

    pub fn lr_review(&self) -> f64 {
        self.lr_replay * self.review_lr_decay
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr_replay,
            batch_sz: self.batch_sz,
            momentum: self.momentum,
        }
    }

    /// Checks shared by every strategy.
    pub fn validate_common(&self) -> Result<()> {
        if self.batch_sz == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if !(self.lr_replay > 0.0 && self.lr_replay.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        self.sgd().validate()
    }

    /// Additional checks for replay strategies.
    pub fn validate_replay(&self, review: bool) -> Result<()> {
        self.validate_common()?;
        if self.mem_sz == 0 {
            return Err(Error::config("replay.mem_sz must be positive"));
        }
        if review {
            if self.review_sz == 0 {
                return Err(Error::config("review.size must be positive"));
            }
            if self.review_epochs == 0 {
                return Err(Error::config("review.epochs must be positive"));
            }
            if !(self.review_lr_decay > 0.0 && self.review_lr_decay <= 1.0) {
                return Err(Error::config("review.lr_decay_factor must lie in (0, 1]"));
            }
        }
        Ok(())
    }
}

/// Independent named seed streams of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub memory: u64,
    pub sgd: u64,
    pub augment: u64,
    pub featurizer: u64,
}

impl Seeds {
    pub fn from_base(base: u64) -> Self {
        Self {
            data: derive_seed(base, "data", &[]),
            memory: derive_seed(base, "memory", &[]),
            sgd: derive_seed(base, "sgd", &[]),
            augment: derive_seed(base, "augment", &[]),
            featurizer: PRETRAINED_SEED,
        }
    }
}

/// Maps stream examples to the vectors the learner consumes.
#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    /// Feature vectors pass through unchanged.
    Identity,
    /// Images are flattened to pixel values scaled to [0, 1].
    Pixels,
    /// Images go through the crop / augment / resize / normalize chain.
    Augment(AugmentPlan),
}

impl Encoder {
    fn encode_one(
        &self,
        ex: &LabeledExample,
        training: bool,
        seed: u64,
        path: &[u64],
    ) -> Result<LabeledExample> {
        let features = match (self, &ex.features) {
            (Encoder::Identity, Features::Vector(v)) => Features::Vector(v.clone()),
            (Encoder::Identity, Features::Image(_)) => {
                return Err(Error::config(
                    "raster inputs need a pixel or augmentation encoder",
                ))
            }
            (_, Features::Vector(_)) => {
                return Err(Error::config(
                    "preprocessing strategies need raster inputs (scenario.modality = raster or an image corpus)",
                ))
            }
            (Encoder::Pixels, Features::Image(img)) => {
                Features::Vector(img.data().iter().map(|&v| f64::from(v) / 255.0).collect())
            }
            (Encoder::Augment(plan), Features::Image(img)) => {
                let mut r = rng::stream(seed, "augment", path);
                let out = apply_plan(img, plan, &mut r, training)?;
                Features::Vector(out.data().iter().map(|&v| f64::from(v)).collect())
            }
        };
        Ok(LabeledExample {
            features,
            label: ex.label,
            session: ex.session,
            task: ex.task,
        })
    }

    /// Encode a dataset. Each example gets its own augmentation stream keyed by
    /// `path ++ [position]`, so the result does not depend on thread scheduling.
    pub fn encode_all<'a>(
        &self,
        data: &'a [LabeledExample],
        training: bool,
        seed: u64,
        path: &[u64],
    ) -> Result<Cow<'a, [LabeledExample]>> {
        if *self == Encoder::Identity {
            if data
                .iter()
                .any(|e| matches!(e.features, Features::Image(_)))
            {
                return Err(Error::config(
                    "raster inputs need a pixel or augmentation encoder",
                ));
            }
            return Ok(Cow::Borrowed(data));
        }
        data.par_iter()
            .enumerate()
            .map(|(i, ex)| {
                let mut p = path.to_vec();
                p.push(i as u64);
                self.encode_one(ex, training, seed, &p)
            })
            .collect::<Result<Vec<_>>>()
            .map(Cow::Owned)
    }

    /// Learner input dimension for examples shaped like `sample`.
    pub fn input_dim(&self, sample: &LabeledExample) -> Result<usize> {
        Ok(self.encode_one(sample, false, 0, &[])?.features.len())
    }
}

/// A frozen featurizer with one trainable head.
#[derive(Clone, Debug, PartialEq)]
pub struct Learner {
    pub featurizer: FrozenFeaturizer,
    pub params: LearnerParams,
}

impl Learner {
    pub fn fresh(input_dim: usize, width: usize, classes: usize, seed: u64) -> Self {
        let (featurizer, params) = fresh_learner(input_dim, width, classes, seed);
        Self { featurizer, params }
    }

    pub fn param_bytes(&self) -> u64 {
        self.featurizer.param_bytes() + self.params.param_bytes()
    }
}

/// Head of one task: the task's global class ids and a head over them.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHead {
    pub classes: Vec<usize>,
    pub params: LearnerParams,
}

/// Independent per-task heads over a shared frozen featurizer.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskModels {
    pub featurizer: FrozenFeaturizer,
    pub heads: BTreeMap<usize, TaskHead>,
}

impl TaskModels {
    /// Global class prediction for an encoded example, routed by its task label.
    pub fn predict(&self, ex: &LabeledExample) -> Result<usize> {
        let task = ex
            .task
            .ok_or_else(|| Error::config("multi-task prediction needs a task label"))?;
        let head = self.heads.get(&task).ok_or(Error::Routing(task))?;
        let phi = self.featurizer.features(ex.features.as_vector()?)?;
        Ok(head.classes[argmax(&head.params.logits(&phi))])
    }

    /// Accuracy; queries whose task has no head yet count as errors when
    /// `allow_untrained` is set, and are a routing error otherwise.
    pub fn evaluate(&self, data: &[LabeledExample], allow_untrained: bool) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty("evaluate over an empty dataset"));
        }
        let correct = data
            .par_iter()
            .map(|ex| match self.predict(ex) {
                Ok(c) => Ok(usize::from(c == ex.label)),
                Err(Error::Routing(_)) if allow_untrained => Ok(0),
                Err(e) => Err(e),
            })
            .collect::<Result<Vec<usize>>>()?
            .into_iter()
            .sum::<usize>();
        Ok(correct as f64 / data.len() as f64)
    }

    pub fn param_bytes(&self) -> u64 {
        self.featurizer.param_bytes()
            + self
                .heads
                .values()
                .map(|h| h.params.param_bytes())
                .sum::<u64>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainedModel {
    Shared(Learner),
    PerTask(TaskModels),
}

impl TrainedModel {
    pub fn evaluate(&self, data: &[LabeledExample]) -> Result<f64> {
        match self {
            TrainedModel::Shared(l) => evaluate(&l.params, &l.featurizer, data),
            TrainedModel::PerTask(m) => m.evaluate(data, false),
        }
    }

    pub fn shared(&self) -> Option<&Learner> {
        match self {
            TrainedModel::Shared(l) => Some(l),
            TrainedModel::PerTask(_) => None,
        }
    }
}

/// One SGD pass as seen by the trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub t: usize,
    pub phase: Phase,
    pub epoch: usize,
    /// Examples drawn from memory for this pass.
    pub replay_drawn: usize,
    pub train_size: usize,
    pub loss: f64,
    /// Memory size when the pass ran.
    pub memory_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryUpdate {
    pub t: usize,
    /// Number of SGD passes of batch `t` completed before the update.
    pub after_epoch: usize,
    pub inserted: usize,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub model: TrainedModel,
    pub log: MetricsLog,
    pub trace: Vec<EpochTrace>,
    pub memory_updates: Vec<MemoryUpdate>,
    pub memory: Option<ReplayMemory>,
    pub warnings: Vec<String>,
}

pub struct EvalSets<'a> {
    pub validation: &'a [LabeledExample],
    pub test: &'a [LabeledExample],
}

/// Progress saved after every stream batch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResumeState {
    pub completed: usize,
    pub log: MetricsLog,
    pub trace: Vec<EpochTrace>,
    pub memory_updates: Vec<MemoryUpdate>,
    pub warnings: Vec<String>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MEMORY_FILE: &str = "memory.bin";
pub const STATE_FILE: &str = "state.json";

struct Encoded<'a> {
    validation: Cow<'a, [LabeledExample]>,
    test: Cow<'a, [LabeledExample]>,
    resident_bytes: u64,
}

struct Clock {
    start: Instant,
    train: f64,
    review: f64,
    test: f64,
}

impl Clock {
    fn new() -> Self {
        Self {
            start: Instant::now(),
            train: 0.0,
            review: 0.0,
            test: 0.0,
        }
    }

    fn elapsed_ms(&self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1e3
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn bytes_of(data: &[LabeledExample]) -> u64 {
    data.iter().map(record_bytes).sum()
}

pub struct Trainer {
    pub config: TrainerConfig,
    pub seeds: Seeds,
    pub encoder: Encoder,
    /// Directory for per-batch checkpoints; none are written when unset.
    pub checkpoint_dir: Option<PathBuf>,
    /// Also sample OS resident set size.
    pub os_probe: bool,
}

impl Trainer {
    pub fn new(config: TrainerConfig, seeds: Seeds, encoder: Encoder) -> Self {
        Self {
            config,
            seeds,
            encoder,
            checkpoint_dir: None,
            os_probe: false,
        }
    }

    /// A fresh shared learner sized for the first example of `stream`.
    pub fn fresh_learner(
        &self,
        stream: &dyn BatchSource,
        classes: usize,
        width: usize,
    ) -> Result<Learner> {
        let first = stream.batch(1)?;
        let sample = first
            .examples
            .first()
            .ok_or(Error::Empty("first stream batch is empty"))?;
        let dim = self.encoder.input_dim(sample)?;
        Ok(Learner::fresh(dim, width, classes, self.seeds.featurizer))
    }

    fn encode_eval<'a>(&self, eval: &EvalSets<'a>) -> Result<Encoded<'a>> {
        if eval.validation.is_empty() || eval.test.is_empty() {
            return Err(Error::Empty("validation and test sets must be non-empty"));
        }
        Ok(Encoded {
            resident_bytes: bytes_of(eval.validation) + bytes_of(eval.test),
            validation: self.encoder.encode_all(
                eval.validation,
                false,
                self.seeds.augment,
                &[u64::MAX, 0],
            )?,
            test: self
                .encoder
                .encode_all(eval.test, false, self.seeds.augment, &[u64::MAX, 1])?,
        })
    }

    /// Batch-level experience replay, with the review pass when `review` is set.
    pub fn train_ber(
        &self,
        stream: &dyn BatchSource,
        learner: Learner,
        memory: ReplayMemory,
        eval: &EvalSets<'_>,
        review: bool,
    ) -> Result<RunResult> {
        self.config.validate_replay(review)?;
        if memory.declared_batches() != stream.num_batches() {
            warn!(
                "memory declared for {} batches but the stream has {}",
                memory.declared_batches(),
                stream.num_batches()
            );
        }
        self.run_stream(stream, learner, Some(memory), eval, review, None)
    }

    /// Continue a run from the state saved in `dir` after its last completed batch.
    pub fn resume_ber(
        &self,
        stream: &dyn BatchSource,
        dir: &Path,
        featurizer: FrozenFeaturizer,
        eval: &EvalSets<'_>,
        review: bool,
    ) -> Result<RunResult> {
        let (params, memory, state) = load_checkpoint(dir)?;
        let learner = Learner { featurizer, params };
        self.run_stream(stream, learner, memory, eval, review, Some(state))
    }

    /// Sequential fine-tuning with no memory, replay or review.
    pub fn train_finetune_baseline(
        &self,
        stream: &dyn BatchSource,
        learner: Learner,
        eval: &EvalSets<'_>,
    ) -> Result<RunResult> {
        self.config.validate_common()?;
        self.run_stream(stream, learner, None, eval, false, None)
    }

    fn run_stream(
        &self,
        stream: &dyn BatchSource,
        mut learner: Learner,
        mut memory: Option<ReplayMemory>,
        eval: &EvalSets<'_>,
        review: bool,
        resume: Option<ResumeState>,
    ) -> Result<RunResult> {
        let num_batches = stream.num_batches();
        if num_batches == 0 {
            return Err(Error::Empty("stream has no batches"));
        }
        let mut clock = Clock::new();
        let t0 = Instant::now();
        let encoded = self.encode_eval(eval)?;
        clock.test += ms_since(t0);
        let sgd = self.config.sgd();
        let (start, mut log, mut trace, mut memory_updates, mut warnings) = match resume {
            Some(s) => (
                s.completed + 1,
                s.log,
                s.trace,
                s.memory_updates,
                s.warnings,
            ),
            None => (1, MetricsLog::default(), Vec::new(), Vec::new(), Vec::new()),
        };
        let mut rss_peak = 0u64;

        for t in start..=num_batches {
            let batch = stream.batch(t)?;
            if batch.is_empty() {
                return Err(Error::config(format!("stream batch {t} is empty")));
            }
            let t_train = Instant::now();
            let mut losses = Vec::with_capacity(self.config.epochs);
            for epoch in 0..self.config.epochs {
                let replay = match memory.as_ref() {
                    Some(m) if t > 1 => m.sample_capped(
                        self.config.replay_sz,
                        &mut rng::stream(self.seeds.memory, "replay", &[t as u64, epoch as u64]),
                    ),
                    _ => Vec::new(),
                };
                let replay_drawn = replay.len();
                let mut d_train = replay;
                d_train.extend(batch.examples.iter().cloned());
                let inputs = self.encoder.encode_all(
                    &d_train,
                    true,
                    self.seeds.augment,
                    &[t as u64, epoch as u64],
                )?;
                let loss = sgd_epoch(
                    &mut learner.params,
                    &learner.featurizer,
                    &inputs,
                    &sgd,
                    &mut rng::stream(self.seeds.sgd, "sgd", &[t as u64, epoch as u64]),
                )?;
                let memory_bytes = memory.as_ref().map_or(0, ReplayMemory::footprint);
                log.ram_samples.push(
                    memory_bytes
                        + learner.param_bytes()
                        + bytes_of(&d_train)
                        + encoded.resident_bytes,
                );
                if self.os_probe {
                    rss_peak = rss_peak.max(os_rss_bytes().unwrap_or(0));
                }
                trace.push(EpochTrace {
                    t,
                    phase: Phase::Train,
                    epoch,
                    replay_drawn,
                    train_size: d_train.len(),
                    loss,
                    memory_len: memory.as_ref().map_or(0, ReplayMemory::len),
                });
                losses.push(loss);
            }
            if let Some(m) = memory.as_mut() {
                let inserted = m.update(
                    &batch,
                    &mut rng::stream(self.seeds.memory, "update", &[t as u64]),
                )?;
                memory_updates.push(MemoryUpdate {
                    t,
                    after_epoch: self.config.epochs,
                    inserted,
                });
            }
            clock.train += ms_since(t_train);

            let t_eval = Instant::now();
            let val_acc = evaluate(&learner.params, &learner.featurizer, &encoded.validation)?;
            clock.test += ms_since(t_eval);
            let disk = self.checkpoint(t, &learner.params, memory.as_ref(), &mut log)?;
            log.records.push(BatchRecord {
                t,
                phase: Phase::Train,
                val_acc,
                loss: losses.iter().sum::<f64>() / losses.len() as f64,
                elapsed_ms: clock.elapsed_ms(),
                ram_bytes: log.ram_samples.last().copied().unwrap_or(0),
                disk_bytes: disk,
            });
            debug!("batch {t}/{num_batches}: val_acc {val_acc:.4}");
            if let Some(dir) = &self.checkpoint_dir {
                let state = ResumeState {
                    completed: t,
                    log: log.clone(),
                    trace: trace.clone(),
                    memory_updates: memory_updates.clone(),
                    warnings: warnings.clone(),
                };
                write_state(dir, &state)?;
            }
        }

        if review {
            let t_review = Instant::now();
            let mem = memory.as_ref().expect("review requires a memory");
            match self.review(&mut learner, mem)? {
                Some((loss, size)) => {
                    clock.review += ms_since(t_review);
                    log.ram_samples.push(
                        mem.footprint()
                            + learner.param_bytes()
                            + size as u64 * mem.record_bytes()
                            + encoded.resident_bytes,
                    );
                    trace.push(EpochTrace {
                        t: num_batches,
                        phase: Phase::Review,
                        epoch: 0,
                        replay_drawn: size,
                        train_size: size,
                        loss,
                        memory_len: mem.len(),
                    });
                    let t_eval = Instant::now();
                    let val_acc =
                        evaluate(&learner.params, &learner.featurizer, &encoded.validation)?;
                    clock.test += ms_since(t_eval);
                    let disk =
                        self.checkpoint(num_batches, &learner.params, memory.as_ref(), &mut log)?;
                    log.records.push(BatchRecord {
                        t: num_batches,
                        phase: Phase::Review,
                        val_acc,
                        loss,
                        elapsed_ms: clock.elapsed_ms(),
                        ram_bytes: log.ram_samples.last().copied().unwrap_or(0),
                        disk_bytes: disk,
                    });
                }
                None => {
                    let msg = "review skipped: replay memory is empty".to_string();
                    warn!("{msg}");
                    warnings.push(msg);
                }
            }
        }

        let t_test = Instant::now();
        log.final_test_acc = Some(evaluate(
            &learner.params,
            &learner.featurizer,
            &encoded.test,
        )?);
        clock.test += ms_since(t_test);
        if let Some(m) = &memory {
            warnings.extend(m.warnings().iter().cloned());
            log.memory_snapshot_bytes = m.footprint();
        }
        log.timing.train_ms = clock.train;
        log.timing.review_ms = clock.review;
        log.timing.test_ms = clock.test;
        log.timing.total_ms = clock.elapsed_ms();
        if self.os_probe {
            log.os_rss_peak_bytes = Some(rss_peak.max(os_rss_bytes().unwrap_or(0)));
        }
        info!(
            "finished {num_batches} batches: final test acc {:.4}",
            log.final_test_acc.unwrap_or(f64::NAN)
        );
        Ok(RunResult {
            model: TrainedModel::Shared(learner),
            log,
            trace,
            memory_updates,
            memory,
            warnings,
        })
    }

    /// Review pass: one `review_sz` sample of memory, `review_epochs` SGD passes
    /// over it at the decayed rate. Returns `(mean loss, sample size)`, or `None`
    /// when memory is empty.
    pub fn review(
        &self,
        learner: &mut Learner,
        memory: &ReplayMemory,
    ) -> Result<Option<(f64, usize)>> {
        if memory.is_empty() {
            return Ok(None);
        }
        let d_review = memory.sample(
            self.config.review_sz,
            &mut rng::stream(self.seeds.memory, "review", &[]),
        )?;
        let cfg = SgdConfig {
            lr: self.config.lr_review(),
            ..self.config.sgd()
        };
        let mut total = 0.0;
        for epoch in 0..self.config.review_epochs {
            let inputs = self.encoder.encode_all(
                &d_review,
                true,
                self.seeds.augment,
                &[u64::MAX - 1, epoch as u64],
            )?;
            total += sgd_epoch(
                &mut learner.params,
                &learner.featurizer,
                &inputs,
                &cfg,
                &mut rng::stream(self.seeds.sgd, "review", &[epoch as u64]),
            )?;
        }
        Ok(Some((
            total / self.config.review_epochs.max(1) as f64,
            d_review.len(),
        )))
    }

    /// Writes checkpoint and memory snapshot (when a directory is configured) and
    /// returns the disk bytes accounted after this batch.
    fn checkpoint(
        &self,
        t: usize,
        params: &LearnerParams,
        memory: Option<&ReplayMemory>,
        log: &mut MetricsLog,
    ) -> Result<u64> {
        let snapshot = memory.map_or(0, ReplayMemory::footprint);
        let Some(dir) = &self.checkpoint_dir else {
            return Ok(snapshot);
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ckpt_path = dir.join(CHECKPOINT_FILE);
        let mut buf = Vec::new();
        let ckpt = params.write_checkpoint(&mut buf)?;
        fs::write(&ckpt_path, &buf).map_err(|e| Error::io(&ckpt_path, e))?;
        if let Some(m) = memory {
            let mem_path = dir.join(MEMORY_FILE);
            let mut buf = Vec::new();
            m.write_snapshot(&mut buf)?;
            fs::write(&mem_path, &buf).map_err(|e| Error::io(&mem_path, e))?;
        }
        debug!("checkpoint after batch {t}: {ckpt} + {snapshot} bytes");
        log.checkpoint_bytes = ckpt;
        log.disk_sizes.push(ckpt + snapshot);
        Ok(ckpt + snapshot)
    }

    /// One independent head per task over the shared frozen featurizer. Each head
    /// covers only its task's classes and is trained on its own batch alone.
    pub fn train_multitask_nc(
        &self,
        stream: &dyn BatchSource,
        eval: &EvalSets<'_>,
        width: usize,
    ) -> Result<RunResult> {
        self.config.validate_common()?;
        let num_batches = stream.num_batches();
        if num_batches == 0 {
            return Err(Error::Empty("stream has no batches"));
        }
        let mut clock = Clock::new();
        let t0 = Instant::now();
        let encoded = self.encode_eval(eval)?;
        clock.test += ms_since(t0);
        let sgd = self.config.sgd();
        let mut log = MetricsLog::default();
        let mut trace = Vec::new();
        let mut models: Option<TaskModels> = None;

        for t in 1..=num_batches {
            let batch = stream.batch(t)?;
            let task = batch.task_label.ok_or_else(|| {
                Error::config(format!(
                    "multi-task strategy needs task labels; batch {t} has none"
                ))
            })?;
            let t_train = Instant::now();
            let (head, losses, resident) =
                self.train_task_head(&batch, t, width, &sgd, &mut models)?;
            let m = models.as_mut().expect("initialised by train_task_head");
            if m.heads.insert(task, head).is_some() {
                return Err(Error::config(format!(
                    "task {task} appears in more than one batch"
                )));
            }
            for (epoch, &loss) in losses.iter().enumerate() {
                trace.push(EpochTrace {
                    t,
                    phase: Phase::Train,
                    epoch,
                    replay_drawn: 0,
                    train_size: batch.len(),
                    loss,
                    memory_len: 0,
                });
            }
            log.ram_samples
                .push(m.param_bytes() + resident + encoded.resident_bytes);
            clock.train += ms_since(t_train);

            let t_eval = Instant::now();
            let val_acc = m.evaluate(&encoded.validation, true)?;
            clock.test += ms_since(t_eval);
            let disk = self.checkpoint_heads(m, &mut log)?;
            log.records.push(BatchRecord {
                t,
                phase: Phase::Train,
                val_acc,
                loss: losses.iter().sum::<f64>() / losses.len() as f64,
                elapsed_ms: clock.elapsed_ms(),
                ram_bytes: log.ram_samples.last().copied().unwrap_or(0),
                disk_bytes: disk,
            });
        }
        let models = models.expect("at least one batch");
        let t_test = Instant::now();
        log.final_test_acc = Some(models.evaluate(&encoded.test, false)?);
        clock.test += ms_since(t_test);
        log.timing.train_ms = clock.train;
        log.timing.test_ms = clock.test;
        log.timing.total_ms = clock.elapsed_ms();
        Ok(RunResult {
            model: TrainedModel::PerTask(models),
            log,
            trace,
            memory_updates: Vec::new(),
            memory: None,
            warnings: Vec::new(),
        })
    }

    fn train_task_head(
        &self,
        batch: &StreamBatch,
        t: usize,
        width: usize,
        sgd: &SgdConfig,
        models: &mut Option<TaskModels>,
    ) -> Result<(TaskHead, Vec<f64>, u64)> {
        let classes: Vec<usize> = batch.classes().into_iter().collect();
        let local: BTreeMap<usize, usize> =
            classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let sample = batch
            .examples
            .first()
            .ok_or(Error::Empty("task batch is empty"))?;
        let dim = self.encoder.input_dim(sample)?;
        let (featurizer, mut params) =
            fresh_learner(dim, width, classes.len(), self.seeds.featurizer);
        let models = models.get_or_insert_with(|| TaskModels {
            featurizer: featurizer.clone(),
            heads: BTreeMap::new(),
        });
        if models.featurizer != featurizer {
            return Err(Error::config("task batches have inconsistent input shapes"));
        }
        let mut losses = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            let inputs = self.encoder.encode_all(
                &batch.examples,
                true,
                self.seeds.augment,
                &[t as u64, epoch as u64],
            )?;
            let relabeled: Vec<LabeledExample> = inputs
                .iter()
                .map(|e| LabeledExample {
                    label: local[&e.label],
                    ..e.clone()
                })
                .collect();
            losses.push(sgd_epoch(
                &mut params,
                &models.featurizer,
                &relabeled,
                sgd,
                &mut rng::stream(self.seeds.sgd, "sgd", &[t as u64, epoch as u64]),
            )?);
        }
        Ok((
            TaskHead { classes, params },
            losses,
            bytes_of(&batch.examples),
        ))
    }

    fn checkpoint_heads(&self, models: &TaskModels, log: &mut MetricsLog) -> Result<u64> {
        let total: u64 = models
            .heads
            .values()
            .map(|h| h.params.checkpoint_bytes())
            .sum();
        let Some(dir) = &self.checkpoint_dir else {
            return Ok(0);
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (task, head) in &models.heads {
            let path = dir.join(format!("head-{task}.bin"));
            let mut buf = Vec::new();
            head.params.write_checkpoint(&mut buf)?;
            fs::write(&path, &buf).map_err(|e| Error::io(&path, e))?;
        }
        log.checkpoint_bytes = total;
        log.disk_sizes.push(total);
        Ok(total)
    }
}

fn write_state(dir: &Path, state: &ResumeState) -> Result<()> {
    let path = dir.join(STATE_FILE);
    let json = serde_json::to_string(state).map_err(|e| Error::Format {
        kind: "state",
        message: e.to_string(),
    })?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Head parameters, memory (if any) and progress saved in `dir`.
pub fn load_checkpoint(dir: &Path) -> Result<(LearnerParams, Option<ReplayMemory>, ResumeState)> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let params = LearnerParams::read_checkpoint(&mut read(CHECKPOINT_FILE)?.as_slice())?;
    let memory = if dir.join(MEMORY_FILE).is_file() {
        Some(ReplayMemory::read_snapshot(
            &mut read(MEMORY_FILE)?.as_slice(),
        )?)
    } else {
        None
    };
    let state: ResumeState =
        serde_json::from_slice(&read(STATE_FILE)?).map_err(|e| Error::Format {
            kind: "state",
            message: e.to_string(),
        })?;
    Ok((params, memory, state))
}

/// Distinct labels of a dataset.
pub fn label_set(data: &[LabeledExample]) -> BTreeSet<usize> {
    data.iter().map(|e| e.label).collect()
}
