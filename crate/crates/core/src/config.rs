//! Run configuration.
//!
//! Configs are TOML. Keys may be written dotted (`review.lr_decay_factor = 0.5`)
//! or as sections; both parse to the same [`RunConfig`]. [`RunConfig::to_toml`]
//! always emits the flat dotted form, one key per line.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentPlan;
use crate::error::{Error, Result};
use crate::learner::DEFAULT_WIDTH;
use crate::rng::derive_seed;
use crate::stream::{DriftScales, HoldOut, Modality, ScenarioKind, ScenarioSpec};
use crate::trainer::{Encoder, Seeds, TrainerConfig, PRETRAINED_SEED};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Ber,
    BerReview,
    BerReviewPreproc,
    IndModel,
    IndModelPreproc,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Baseline,
        Method::Ber,
        Method::BerReview,
        Method::BerReviewPreproc,
        Method::IndModel,
        Method::IndModelPreproc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Ber => "ber",
            Method::BerReview => "ber_review",
            Method::BerReviewPreproc => "ber_review_preproc",
            Method::IndModel => "ind_model",
            Method::IndModelPreproc => "ind_model_preproc",
        }
    }

    pub fn uses_memory(self) -> bool {
        matches!(
            self,
            Method::Ber | Method::BerReview | Method::BerReviewPreproc
        )
    }

    pub fn reviews(self) -> bool {
        matches!(self, Method::BerReview | Method::BerReviewPreproc)
    }

    pub fn preprocesses(self) -> bool {
        matches!(self, Method::BerReviewPreproc | Method::IndModelPreproc)
    }

    pub fn per_task(self) -> bool {
        matches!(self, Method::IndModel | Method::IndModelPreproc)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    #[default]
    #[serde(rename = "SGD")]
    Sgd,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityKind {
    #[default]
    Vector,
    Raster,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturizerSection {
    #[serde(default = "default_width")]
    pub width: usize,
}

impl Default for FeaturizerSection {
    fn default() -> Self {
        Self {
            width: DEFAULT_WIDTH,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplaySection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mem_sz: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_sz: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[serde(default = "one")]
    pub epochs: usize,
    #[serde(default = "half")]
    pub lr_decay_factor: f64,
}

impl Default for ReviewSection {
    fn default() -> Self {
        Self {
            size: None,
            epochs: 1,
            lr_decay_factor: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub kind: ScenarioKind,
    /// Number of stream batches; for MT-NC, the number of tasks. Defaults to the
    /// protocol's natural count for NI and NIC.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batches: Option<usize>,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_sessions")]
    pub sessions: usize,
    #[serde(default = "default_per_cell")]
    pub per_cell: usize,
    #[serde(default = "default_held_out")]
    pub val_per_cell: usize,
    #[serde(default = "default_held_out")]
    pub test_per_cell: usize,
    #[serde(default)]
    pub modality: ModalityKind,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_class_sep")]
    pub class_sep: f64,
    #[serde(default = "default_drift")]
    pub drift: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub shared: f64,
    /// Manifest of an on-disk corpus; replaces the synthetic generator when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(default = "default_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_fraction")]
    pub test_fraction: f64,
}

impl ScenarioSection {
    pub fn of_kind(kind: ScenarioKind) -> Self {
        Self {
            kind,
            batches: None,
            classes: default_classes(),
            sessions: default_sessions(),
            per_cell: default_per_cell(),
            val_per_cell: default_held_out(),
            test_per_cell: default_held_out(),
            modality: ModalityKind::Vector,
            dim: default_dim(),
            image_size: default_image_size(),
            class_sep: default_class_sep(),
            drift: default_drift(),
            noise: default_noise(),
            shared: 0.0,
            corpus: None,
            val_fraction: default_fraction(),
            test_fraction: default_fraction(),
        }
    }

    pub fn resolved_batches(&self) -> Result<usize> {
        match (self.batches, self.kind) {
            (Some(b), _) => Ok(b),
            (None, ScenarioKind::Ni) => Ok(self.sessions),
            (None, ScenarioKind::Nic) => Ok(self.classes * self.sessions),
            (None, ScenarioKind::MtNc) => Err(Error::config(
                "missing key scenario.batches (number of tasks) for MT-NC",
            )),
        }
    }

    pub fn spec(&self, seed: u64) -> Result<ScenarioSpec> {
        let spec = ScenarioSpec {
            kind: self.kind,
            batches: self.resolved_batches()?,
            classes: self.classes,
            sessions: self.sessions,
            per_cell: self.per_cell,
            val_per_cell: self.val_per_cell,
            test_per_cell: self.test_per_cell,
            modality: match self.modality {
                ModalityKind::Vector => Modality::Vector,
                ModalityKind::Raster => Modality::Raster {
                    size: self.image_size,
                },
            },
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn scales(&self) -> DriftScales {
        DriftScales {
            class_sep: self.class_sep,
            drift: self.drift,
            noise: self.noise,
            shared: self.shared,
        }
    }

    pub fn hold_out(&self) -> HoldOut {
        HoldOut {
            validation: self.val_fraction,
            test: self.test_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    #[serde(default = "default_crop")]
    pub crop_size: usize,
    #[serde(default = "default_resize")]
    pub resize: usize,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self {
            crop_size: default_crop(),
            resize: default_resize(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSection {
    #[serde(default)]
    pub base: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sgd: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub featurizer: Option<u64>,
}

impl SeedSection {
    pub fn resolve(&self) -> Seeds {
        let d = Seeds::from_base(self.base);
        Seeds {
            data: self.data.unwrap_or(d.data),
            memory: self.memory.unwrap_or(d.memory),
            sgd: self.sgd.unwrap_or(d.sgd),
            augment: self.augment.unwrap_or(d.augment),
            featurizer: self.featurizer.unwrap_or(PRETRAINED_SEED),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
    #[serde(default = "yes")]
    pub checkpoints: bool,
    #[serde(default)]
    pub os_ram_probe: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: default_out(),
            checkpoints: true,
            os_ram_probe: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "yes")]
    pub preload_data: bool,
    #[serde(default)]
    pub featurizer: FeaturizerSection,
    #[serde(default)]
    pub replay: ReplaySection,
    #[serde(default)]
    pub review: ReviewSection,
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub seeds: SeedSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_width() -> usize {
    DEFAULT_WIDTH
}
fn one() -> usize {
    1
}
fn half() -> f64 {
    0.5
}
fn yes() -> bool {
    true
}
fn default_classes() -> usize {
    10
}
fn default_sessions() -> usize {
    8
}
fn default_per_cell() -> usize {
    100
}
fn default_held_out() -> usize {
    20
}
fn default_dim() -> usize {
    32
}
fn default_image_size() -> usize {
    128
}
fn default_class_sep() -> f64 {
    1.0
}
fn default_drift() -> f64 {
    2.0
}
fn default_noise() -> f64 {
    1.5
}
fn default_fraction() -> f64 {
    0.1
}
fn default_crop() -> usize {
    100
}
fn default_resize() -> usize {
    224
}
fn default_out() -> PathBuf {
    PathBuf::from("runs/latest")
}
fn default_batch_size() -> usize {
    32
}
fn default_epochs() -> usize {
    2
}
fn default_lr() -> f64 {
    0.05
}

impl RunConfig {
    /// Config with every optional key at its default.
    pub fn new(method: Method, scenario: ScenarioSection) -> Self {
        Self {
            method,
            optimizer: Optimizer::Sgd,
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            lr: default_lr(),
            momentum: 0.0,
            preload_data: true,
            featurizer: FeaturizerSection::default(),
            replay: ReplaySection::default(),
            review: ReviewSection::default(),
            scenario,
            augment: AugmentSection::default(),
            seeds: SeedSection::default(),
            output: OutputSection::default(),
        }
    }

    /// The published NI hyper-parameters on the desk NI scenario.
    pub fn ni_published() -> Self {
        let t = TrainerConfig::ni_published();
        let mut c = Self::new(
            Method::BerReview,
            ScenarioSection::of_kind(ScenarioKind::Ni),
        );
        c.batch_size = t.batch_sz;
        c.epochs = t.epochs;
        c.lr = t.lr_replay;
        c.replay = ReplaySection {
            mem_sz: Some(t.mem_sz),
            replay_sz: Some(t.replay_sz),
        };
        c.review = ReviewSection {
            size: Some(t.review_sz),
            epochs: t.review_epochs,
            lr_decay_factor: t.review_lr_decay,
        };
        c.preload_data = false;
        c
    }

    /// Parse and validate.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Flat `key = value` lines with dotted keys, sorted by section.
    pub fn to_toml(&self) -> Result<String> {
        let value = toml::Value::try_from(self).map_err(|e| Error::config(e.to_string()))?;
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(&k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.featurizer.width == 0 {
            return Err(Error::config("featurizer.width must be positive"));
        }
        for (key, v) in [
            ("seeds.base", Some(self.seeds.base)),
            ("seeds.data", self.seeds.data),
            ("seeds.memory", self.seeds.memory),
            ("seeds.sgd", self.seeds.sgd),
            ("seeds.augment", self.seeds.augment),
            ("seeds.featurizer", self.seeds.featurizer),
        ] {
            if v.is_some_and(|s| s > i64::MAX as u64) {
                return Err(Error::config(format!("{key} must not exceed {}", i64::MAX)));
            }
        }
        if self.method.uses_memory() {
            let mem = self.replay.mem_sz.ok_or_else(|| {
                Error::config(format!(
                    "missing key replay.mem_sz for method {}",
                    self.method
                ))
            })?;
            if mem == 0 {
                return Err(Error::config("replay.mem_sz must be positive"));
            }
            self.replay.replay_sz.ok_or_else(|| {
                Error::config(format!(
                    "missing key replay.replay_sz for method {}",
                    self.method
                ))
            })?;
        }
        if self.method.reviews() {
            match self.review.size {
                None => {
                    return Err(Error::config(format!(
                        "missing key review.size for method {}",
                        self.method
                    )))
                }
                Some(0) => return Err(Error::config("review.size must be positive")),
                Some(_) => {}
            }
            if self.review.epochs == 0 {
                return Err(Error::config("review.epochs must be positive"));
            }
            if !(self.review.lr_decay_factor > 0.0 && self.review.lr_decay_factor <= 1.0) {
                return Err(Error::config("review.lr_decay_factor must lie in (0, 1]"));
            }
        }
        if self.method.per_task() && self.scenario.kind != ScenarioKind::MtNc {
            return Err(Error::config(format!(
                "method {} requires scenario.kind = \"MT-NC\", got {}",
                self.method, self.scenario.kind
            )));
        }
        let sc = &self.scenario;
        if sc.corpus.is_none() {
            if sc.val_per_cell == 0 || sc.test_per_cell == 0 {
                return Err(Error::config(
                    "scenario.val_per_cell and scenario.test_per_cell must be positive",
                ));
            }
            if !(sc.noise > 0.0) {
                return Err(Error::config("scenario.noise must be positive"));
            }
            if !(sc.class_sep >= 0.0 && sc.drift >= 0.0 && sc.shared >= 0.0) {
                return Err(Error::config(
                    "scenario.class_sep, scenario.drift and scenario.shared must be non-negative",
                ));
            }
            if sc.dim == 0 {
                return Err(Error::config("scenario.dim must be positive"));
            }
            sc.spec(0)?;
            if self.method.preprocesses() && sc.modality != ModalityKind::Raster {
                return Err(Error::config(format!(
                    "method {} needs raster inputs: set scenario.modality = \"raster\" or scenario.corpus",
                    self.method
                )));
            }
            if sc.modality == ModalityKind::Raster
                && self.method.preprocesses()
                && sc.image_size < self.augment.crop_size
            {
                return Err(Error::config(format!(
                    "augment.crop_size ({}) exceeds scenario.image_size ({})",
                    self.augment.crop_size, sc.image_size
                )));
            }
        } else {
            if sc.kind == ScenarioKind::MtNc && sc.batches.is_none() {
                return Err(Error::config(
                    "missing key scenario.batches (number of tasks) for MT-NC",
                ));
            }
            let fractions = [sc.val_fraction, sc.test_fraction];
            if fractions.iter().any(|f| !(0.0..1.0).contains(f))
                || sc.val_fraction + sc.test_fraction >= 1.0
            {
                return Err(Error::config(
                    "scenario.val_fraction and scenario.test_fraction must be in [0, 1) and sum below 1",
                ));
            }
        }
        if self.method.preprocesses() {
            self.augment_plan().validate()?;
        }
        Ok(())
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            mem_sz: self.replay.mem_sz.unwrap_or(0),
            replay_sz: self.replay.replay_sz.unwrap_or(0),
            review_sz: self.review.size.unwrap_or(0),
            batch_sz: self.batch_size,
            lr_replay: self.lr,
            review_lr_decay: self.review.lr_decay_factor,
            epochs: self.epochs,
            review_epochs: self.review.epochs,
            momentum: self.momentum,
        }
    }

    pub fn augment_plan(&self) -> AugmentPlan {
        AugmentPlan::with_geometry(self.augment.crop_size, self.augment.resize)
    }

    /// Encoder for this method given whether the inputs are rasters.
    pub fn encoder(&self, raster: bool) -> Encoder {
        match (raster, self.method.preprocesses()) {
            (_, true) => Encoder::Augment(self.augment_plan()),
            (true, false) => Encoder::Pixels,
            (false, false) => Encoder::Identity,
        }
    }

    pub fn seeds(&self) -> Seeds {
        self.seeds.resolve()
    }

    /// Seed of the synthetic drift model, derived from the data seed.
    pub fn model_seed(&self) -> u64 {
        derive_seed(self.seeds().data, "drift-model", &[])
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) {
    match value {
        toml::Value::Table(t) => {
            let (leaves, tables): (Vec<_>, Vec<_>) = t.iter().partition(|(_, v)| !v.is_table());
            for (k, v) in leaves.into_iter().chain(tables) {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}
