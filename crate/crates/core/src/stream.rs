//! Dataset model and the three stream protocols.
//!
//! - **NI** (new instances): one batch per session, every batch holds every class.
//! - **MT-NC** (multi-task new classes): disjoint class groups, the first twice as
//!   large as the others, each batch tagged with its task label.
//! - **NIC** (new instances and classes): one batch per (class, session) pair, in a
//!   seed-shuffled order.
//!
//! Streams are built either from a [`SyntheticDriftModel`] (class means shifted by
//! per-session offsets) or from an on-disk corpus described by a CSV manifest.

use std::borrow::Cow;
use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::RasterImage;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub enum Features {
    Vector(Vec<f64>),
    Image(RasterImage),
}

impl Features {
    /// Number of scalar inputs (vector length, or `w * h * 3` for images).
    pub fn len(&self) -> usize {
        match self {
            Features::Vector(v) => v.len(),
            Features::Image(img) => img.data().len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_vector(&self) -> Result<&[f64]> {
        match self {
            Features::Vector(v) => Ok(v),
            Features::Image(_) => Err(Error::config(
                "raster example reached the learner; encode images to vectors first",
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub features: Features,
    pub label: usize,
    pub session: usize,
    /// Task label, only set for multi-task streams.
    pub task: Option<usize>,
}

impl LabeledExample {
    pub fn vector(features: Vec<f64>, label: usize, session: usize) -> Self {
        Self {
            features: Features::Vector(features),
            label,
            session,
            task: None,
        }
    }
}

/// One batch `D_t` of the stream. `index` is 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamBatch {
    pub index: usize,
    pub examples: Vec<LabeledExample>,
    pub task_label: Option<usize>,
}

impl StreamBatch {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn classes(&self) -> BTreeSet<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }
}

/// Source of stream batches. Implemented by in-memory batch lists and by
/// [`LazyCorpusStream`], which reads files only when a batch is requested.
pub trait BatchSource: Sync {
    fn num_batches(&self) -> usize;
    /// Batch `t` (1-based).
    fn batch(&self, t: usize) -> Result<Cow<'_, StreamBatch>>;
}

impl BatchSource for [StreamBatch] {
    fn num_batches(&self) -> usize {
        self.len()
    }

    fn batch(&self, t: usize) -> Result<Cow<'_, StreamBatch>> {
        t.checked_sub(1)
            .and_then(|i| self.get(i))
            .map(Cow::Borrowed)
            .ok_or_else(|| Error::config(format!("stream has no batch {t}")))
    }
}

impl BatchSource for Vec<StreamBatch> {
    fn num_batches(&self) -> usize {
        self.len()
    }

    fn batch(&self, t: usize) -> Result<Cow<'_, StreamBatch>> {
        self.as_slice().batch(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioKind {
    #[serde(rename = "NI")]
    Ni,
    #[serde(rename = "MT-NC")]
    MtNc,
    #[serde(rename = "NIC")]
    Nic,
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScenarioKind::Ni => "NI",
            ScenarioKind::MtNc => "MT-NC",
            ScenarioKind::Nic => "NIC",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    /// Plain feature vectors of the drift model's dimension.
    Vector,
    /// Square RGB rasters of the given side, rendered from the drift model.
    Raster { size: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    /// Number of stream batches `T`.
    pub batches: usize,
    pub classes: usize,
    pub sessions: usize,
    /// Training examples drawn per (class, session) cell.
    pub per_cell: usize,
    pub val_per_cell: usize,
    pub test_per_cell: usize,
    pub modality: Modality,
    pub seed: u64,
}

impl ScenarioSpec {
    /// Desk-scale NI defaults: 10 classes, 8 sessions, 100 examples per cell.
    pub fn desk_ni(seed: u64) -> Self {
        Self {
            kind: ScenarioKind::Ni,
            batches: 8,
            classes: 10,
            sessions: 8,
            per_cell: 100,
            val_per_cell: 20,
            test_per_cell: 20,
            modality: Modality::Vector,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("scenario.batches", self.batches),
            ("scenario.classes", self.classes),
            ("scenario.sessions", self.sessions),
            ("scenario.per_cell", self.per_cell),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{key} must be positive")));
            }
        }
        match self.kind {
            ScenarioKind::Ni if self.batches != self.sessions => Err(Error::config(format!(
                "NI needs one batch per session: batches ({}) != sessions ({})",
                self.batches, self.sessions
            ))),
            ScenarioKind::Nic if self.batches != self.classes * self.sessions => {
                Err(Error::config(format!(
                    "NIC needs one batch per (class, session) pair: batches ({}) != classes x sessions ({})",
                    self.batches,
                    self.classes * self.sessions
                )))
            }
            ScenarioKind::MtNc => task_group_sizes(self.classes, self.batches).map(|_| ()),
            _ => Ok(()),
        }
    }
}

/// Group sizes for a multi-task split: the first group is twice the size of the
/// others, so `classes` must be a multiple of `tasks + 1`.
pub fn task_group_sizes(classes: usize, tasks: usize) -> Result<Vec<usize>> {
    if tasks == 0 || !classes.is_multiple_of(tasks + 1) {
        return Err(Error::config(format!(
            "MT-NC class partition: {classes} classes cannot be split into {tasks} tasks \
             with a double-sized first task (classes must be a multiple of tasks + 1)"
        )));
    }
    let k = classes / (tasks + 1);
    let mut sizes = vec![k; tasks];
    sizes[0] = 2 * k;
    Ok(sizes)
}

/// Seeded partition of `0..classes` into task groups (each group sorted).
pub fn task_partition(classes: usize, tasks: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let sizes = task_group_sizes(classes, tasks)?;
    let mut order: Vec<usize> = (0..classes).collect();
    order.shuffle(&mut rng::stream(seed, "task-partition", &[]));
    let mut groups = Vec::with_capacity(tasks);
    let mut rest = order.as_slice();
    for s in sizes {
        let (head, tail) = rest.split_at(s);
        let mut g = head.to_vec();
        g.sort_unstable();
        groups.push(g);
        rest = tail;
    }
    Ok(groups)
}

/// Class means shifted by per-session offsets plus isotropic Gaussian noise.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDriftModel {
    pub class_means: Vec<Vec<f64>>,
    pub session_offsets: Vec<Vec<f64>>,
    pub noise: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftScales {
    /// Standard deviation of each class-mean coordinate.
    pub class_sep: f64,
    /// Standard deviation of each session-offset coordinate.
    pub drift: f64,
    pub noise: f64,
    /// Standard deviation of a component common to every class mean.
    #[serde(default)]
    pub shared: f64,
}

impl SyntheticDriftModel {
    pub fn random(
        classes: usize,
        sessions: usize,
        dim: usize,
        scales: DriftScales,
        seed: u64,
    ) -> Result<Self> {
        if !(scales.noise > 0.0) {
            return Err(Error::config("scenario.noise must be positive"));
        }
        let mut r = rng::stream(seed, "drift-model", &[]);
        let mut draw = |n: usize, scale: f64| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| {
                    (0..dim)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut r);
                            scale * z
                        })
                        .collect()
                })
                .collect()
        };
        let mut class_means = draw(classes, scales.class_sep);
        let session_offsets = draw(sessions, scales.drift);
        let common = draw(1, scales.shared).remove(0);
        for mean in &mut class_means {
            for (m, c) in mean.iter_mut().zip(&common) {
                *m += c;
            }
        }
        Ok(Self {
            class_means,
            session_offsets,
            noise: scales.noise,
        })
    }

    pub fn dim(&self) -> usize {
        self.class_means.first().map_or(0, Vec::len)
    }

    pub fn sample<R: Rng + ?Sized>(&self, class: usize, session: usize, rng: &mut R) -> Vec<f64> {
        self.class_means[class]
            .iter()
            .zip(&self.session_offsets[session])
            .map(|(m, d)| {
                let e: f64 = StandardNormal.sample(rng);
                m + d + self.noise * e
            })
            .collect()
    }

    /// Render a square raster: the class mean is an object texture filling the
    /// central 60% of the frame, the session offset a background texture over the
    /// whole frame that also tints the object. Both textures are coarse `g × g × 3`
    /// grids, so the model dimension must be `3 g^2`.
    pub fn render<R: Rng + ?Sized>(
        &self,
        class: usize,
        session: usize,
        size: usize,
        rng: &mut R,
    ) -> Result<RasterImage> {
        let g = texture_grid(self.dim())?;
        let obj_lo = size as f64 * 0.2;
        let obj_hi = size as f64 * 0.8;
        let mu = &self.class_means[class];
        let delta = &self.session_offsets[session];
        let cell = |pos: f64, lo: f64, span: f64| -> usize {
            (((pos - lo) / span * g as f64) as usize).min(g - 1)
        };
        let mut data = Vec::with_capacity(size * size * 3);
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let bg = (cell(py, 0.0, size as f64) * g + cell(px, 0.0, size as f64)) * 3;
                let inside = (obj_lo..obj_hi).contains(&px) && (obj_lo..obj_hi).contains(&py);
                for c in 0..3 {
                    let signal = if inside {
                        let span = obj_hi - obj_lo;
                        let o = (cell(py, obj_lo, span) * g + cell(px, obj_lo, span)) * 3;
                        mu[o + c] + 0.25 * delta[bg + c]
                    } else {
                        delta[bg + c]
                    };
                    let e: f64 = StandardNormal.sample(rng);
                    let v = 128.0 + 48.0 * (signal + self.noise * e);
                    data.push(v.round().clamp(0.0, 255.0) as f32);
                }
            }
        }
        RasterImage::new(size, size, data)
    }
}

fn texture_grid(dim: usize) -> Result<usize> {
    let g = ((dim / 3) as f64).sqrt().round() as usize;
    if g == 0 || 3 * g * g != dim {
        return Err(Error::config(format!(
            "raster rendering needs scenario.dim = 3 g^2, got {dim}"
        )));
    }
    Ok(g)
}

/// A generated or loaded scenario: the training stream plus held-out sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub classes: usize,
    pub batches: Vec<StreamBatch>,
    pub validation: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    /// Class groups per task (MT-NC only).
    pub tasks: Option<Vec<Vec<usize>>>,
}

fn task_of(groups: Option<&Vec<Vec<usize>>>, label: usize) -> Option<usize> {
    groups.and_then(|g| g.iter().position(|grp| grp.contains(&label)))
}

/// Build the stream for `spec` from the synthetic model. Pure in `spec.seed`:
/// every (split, class, session) cell draws from its own derived random stream.
pub fn generate_scenario(spec: &ScenarioSpec, model: &SyntheticDriftModel) -> Result<Scenario> {
    spec.validate()?;
    if model.class_means.len() != spec.classes {
        return Err(Error::Dimension {
            context: "drift model classes",
            expected: spec.classes,
            actual: model.class_means.len(),
        });
    }
    if model.session_offsets.len() != spec.sessions {
        return Err(Error::Dimension {
            context: "drift model sessions",
            expected: spec.sessions,
            actual: model.session_offsets.len(),
        });
    }
    if let Modality::Raster { .. } = spec.modality {
        texture_grid(model.dim())?;
    }
    let tasks = match spec.kind {
        ScenarioKind::MtNc => Some(task_partition(spec.classes, spec.batches, spec.seed)?),
        _ => None,
    };
    let cell = |split: &str, split_id: u64, class: usize, session: usize, count: usize| {
        let mut r = rng::stream(spec.seed, split, &[split_id, class as u64, session as u64]);
        (0..count)
            .map(|_| {
                let features = match spec.modality {
                    Modality::Vector => Features::Vector(model.sample(class, session, &mut r)),
                    Modality::Raster { size } => {
                        Features::Image(model.render(class, session, size, &mut r)?)
                    }
                };
                Ok(LabeledExample {
                    features,
                    label: class,
                    session,
                    task: task_of(tasks.as_ref(), class),
                })
            })
            .collect::<Result<Vec<_>>>()
    };

    let mut cells: Vec<Vec<(usize, usize)>> = match spec.kind {
        ScenarioKind::Ni => (0..spec.sessions)
            .map(|s| (0..spec.classes).map(|c| (c, s)).collect())
            .collect(),
        ScenarioKind::Nic => {
            let mut pairs: Vec<(usize, usize)> = (0..spec.classes)
                .flat_map(|c| (0..spec.sessions).map(move |s| (c, s)))
                .collect();
            pairs.shuffle(&mut rng::stream(spec.seed, "nic-order", &[]));
            pairs.into_iter().map(|p| vec![p]).collect()
        }
        ScenarioKind::MtNc => tasks
            .as_ref()
            .expect("partition built above")
            .iter()
            .map(|g| {
                g.iter()
                    .flat_map(|&c| (0..spec.sessions).map(move |s| (c, s)))
                    .collect()
            })
            .collect(),
    };

    let mut batches = Vec::with_capacity(cells.len());
    for (i, group) in cells.drain(..).enumerate() {
        let mut examples = Vec::with_capacity(group.len() * spec.per_cell);
        for (c, s) in group {
            examples.extend(cell("train", 0, c, s, spec.per_cell)?);
        }
        batches.push(StreamBatch {
            index: i + 1,
            examples,
            task_label: (spec.kind == ScenarioKind::MtNc).then_some(i),
        });
    }

    let held_out = |split: &str, id: u64, count: usize| -> Result<Vec<LabeledExample>> {
        let mut out = Vec::with_capacity(spec.classes * spec.sessions * count);
        for c in 0..spec.classes {
            for s in 0..spec.sessions {
                out.extend(cell(split, id, c, s, count)?);
            }
        }
        Ok(out)
    };

    Ok(Scenario {
        kind: spec.kind,
        classes: spec.classes,
        batches,
        validation: held_out("validation", 1, spec.val_per_cell)?,
        test: held_out("test", 2, spec.test_per_cell)?,
        tasks,
    })
}

/// One parsed manifest row.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    /// 1-based line number in the manifest file.
    pub line: usize,
    pub path: PathBuf,
    pub label: usize,
    pub session: usize,
}

/// A corpus manifest: CSV with header `path,label,session`, optionally preceded by
/// a `# classes=C sessions=S` declaration. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub classes: Option<usize>,
    pub sessions: Option<usize>,
    pub rows: Vec<ManifestRow>,
}

fn parse_declaration(line: &str, row: usize) -> Result<(Option<usize>, Option<usize>)> {
    let mut classes = None;
    let mut sessions = None;
    for tok in line.trim_start_matches('#').split_whitespace() {
        let Some((k, v)) = tok.split_once('=') else {
            continue;
        };
        let parsed = v.parse::<usize>().map_err(|_| Error::Load {
            row,
            message: format!("bad declaration value `{tok}`"),
        });
        match k {
            "classes" => classes = Some(parsed?),
            "sessions" => sessions = Some(parsed?),
            _ => {}
        }
    }
    Ok((classes, sessions))
}

impl Manifest {
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut classes = None;
        let mut sessions = None;
        let mut header_seen = false;
        let mut rows = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('#') {
                let (c, s) = parse_declaration(line, line_no)?;
                classes = classes.or(c);
                sessions = sessions.or(s);
                continue;
            }
            if !header_seen {
                let cols: Vec<_> = line.split(',').map(str::trim).collect();
                if cols != ["path", "label", "session"] {
                    return Err(Error::Load {
                        row: line_no,
                        message: format!("expected header `path,label,session`, got `{line}`"),
                    });
                }
                header_seen = true;
                continue;
            }
            let cols: Vec<_> = line.split(',').map(str::trim).collect();
            let [path, label, session] = cols.as_slice() else {
                return Err(Error::Load {
                    row: line_no,
                    message: format!("expected 3 columns, got {}", cols.len()),
                });
            };
            let num = |field: &str, v: &str| {
                v.parse::<usize>().map_err(|_| Error::Load {
                    row: line_no,
                    message: format!("{field} `{v}` is not a non-negative integer"),
                })
            };
            let label = num("label", label)?;
            let session = num("session", session)?;
            if let Some(c) = classes.filter(|&c| label >= c) {
                return Err(Error::Load {
                    row: line_no,
                    message: format!("label {label} out of range for {c} declared classes"),
                });
            }
            if let Some(s) = sessions.filter(|&s| session >= s) {
                return Err(Error::Load {
                    row: line_no,
                    message: format!("session {session} out of range for {s} declared sessions"),
                });
            }
            rows.push(ManifestRow {
                line: line_no,
                path: PathBuf::from(path),
                label,
                session,
            });
        }
        Ok(Self {
            root: root.into(),
            classes,
            sessions,
            rows,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    /// Check every referenced file exists without reading it.
    pub fn check_files(&self) -> Result<()> {
        for row in &self.rows {
            let p = self.root.join(&row.path);
            if !p.is_file() {
                return Err(Error::Load {
                    row: row.line,
                    message: format!("missing file {}", p.display()),
                });
            }
        }
        Ok(())
    }

    pub fn load_row(&self, row: &ManifestRow) -> Result<LabeledExample> {
        let path = self.root.join(&row.path);
        let load_err = |message: String| Error::Load {
            row: row.line,
            message,
        };
        let features = match path.extension().and_then(|e| e.to_str()) {
            Some("ppm") => {
                let bytes =
                    fs::read(&path).map_err(|e| load_err(format!("{}: {e}", path.display())))?;
                Features::Image(
                    RasterImage::decode_ppm(&bytes).map_err(|e| load_err(e.to_string()))?,
                )
            }
            Some("csv") => {
                let text = fs::read_to_string(&path)
                    .map_err(|e| load_err(format!("{}: {e}", path.display())))?;
                let v = text
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|t| !t.is_empty())
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|_| load_err(format!("bad feature value `{t}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Features::Vector(v)
            }
            _ => {
                return Err(load_err(format!(
                    "unsupported file type {} (expected .ppm or .csv)",
                    path.display()
                )))
            }
        };
        Ok(LabeledExample {
            features,
            label: row.label,
            session: row.session,
            task: None,
        })
    }
}

fn shape_of(f: &Features) -> (usize, usize, bool) {
    match f {
        Features::Vector(v) => (v.len(), 0, false),
        Features::Image(img) => (img.width(), img.height(), true),
    }
}

/// Load every row of a manifest, in manifest order, checking that all examples
/// share one feature shape.
pub fn load_corpus(manifest_path: &Path) -> Result<Vec<LabeledExample>> {
    let manifest = Manifest::read(manifest_path)?;
    let mut out: Vec<LabeledExample> = Vec::with_capacity(manifest.rows.len());
    for row in &manifest.rows {
        let ex = manifest.load_row(row)?;
        if let Some(first) = out.first() {
            if shape_of(&first.features) != shape_of(&ex.features) {
                return Err(Error::Load {
                    row: row.line,
                    message: "feature shape differs from the first example".into(),
                });
            }
        }
        out.push(ex);
    }
    Ok(out)
}

/// Fractions of every (class, session) cell held out for evaluation when a
/// scenario is built from a corpus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HoldOut {
    pub validation: f64,
    pub test: f64,
}

#[derive(Clone, Debug)]
struct CorpusLayout {
    batches: Vec<(Option<usize>, Vec<usize>)>,
    validation: Vec<usize>,
    test: Vec<usize>,
    tasks: Option<Vec<Vec<usize>>>,
}

fn layout_corpus(
    kind: ScenarioKind,
    tasks_requested: usize,
    labels: &[(usize, usize)],
    classes: usize,
    sessions: usize,
    hold_out: HoldOut,
    seed: u64,
) -> Result<CorpusLayout> {
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); classes * sessions];
    for (i, &(c, s)) in labels.iter().enumerate() {
        cells[c * sessions + s].push(i);
    }
    let mut train_cells = vec![Vec::new(); cells.len()];
    let mut validation = Vec::new();
    let mut test = Vec::new();
    for (k, members) in cells.iter().enumerate() {
        let mut m = members.clone();
        m.shuffle(&mut rng::stream(seed, "corpus-split", &[k as u64]));
        let n_val = (m.len() as f64 * hold_out.validation).round() as usize;
        let n_test = (m.len() as f64 * hold_out.test).round() as usize;
        let n_val = n_val.min(m.len());
        let n_test = n_test.min(m.len() - n_val);
        validation.extend_from_slice(&m[..n_val]);
        test.extend_from_slice(&m[n_val..n_val + n_test]);
        train_cells[k] = m[n_val + n_test..].to_vec();
    }
    validation.sort_unstable();
    test.sort_unstable();
    let gather = |pairs: &[(usize, usize)]| -> Vec<usize> {
        let mut v: Vec<usize> = pairs
            .iter()
            .flat_map(|&(c, s)| train_cells[c * sessions + s].iter().copied())
            .collect();
        v.sort_unstable();
        v
    };
    let (batches, tasks) = match kind {
        ScenarioKind::Ni => (
            (0..sessions)
                .map(|s| {
                    (
                        None,
                        gather(&(0..classes).map(|c| (c, s)).collect::<Vec<_>>()),
                    )
                })
                .collect(),
            None,
        ),
        ScenarioKind::Nic => {
            let mut pairs: Vec<(usize, usize)> = (0..classes)
                .flat_map(|c| (0..sessions).map(move |s| (c, s)))
                .filter(|&(c, s)| !train_cells[c * sessions + s].is_empty())
                .collect();
            pairs.shuffle(&mut rng::stream(seed, "nic-order", &[]));
            (pairs.iter().map(|&p| (None, gather(&[p]))).collect(), None)
        }
        ScenarioKind::MtNc => {
            let groups = task_partition(classes, tasks_requested, seed)?;
            let batches = groups
                .iter()
                .enumerate()
                .map(|(t, g)| {
                    let pairs: Vec<_> = g
                        .iter()
                        .flat_map(|&c| (0..sessions).map(move |s| (c, s)))
                        .collect();
                    (Some(t), gather(&pairs))
                })
                .collect();
            (batches, Some(groups))
        }
    };
    Ok(CorpusLayout {
        batches,
        validation,
        test,
        tasks,
    })
}

fn corpus_dims(
    labels: &[(usize, usize)],
    classes: Option<usize>,
    sessions: Option<usize>,
) -> (usize, usize) {
    let c = classes.unwrap_or_else(|| labels.iter().map(|l| l.0 + 1).max().unwrap_or(0));
    let s = sessions.unwrap_or_else(|| labels.iter().map(|l| l.1 + 1).max().unwrap_or(0));
    (c, s)
}

/// Build a scenario of `kind` from loaded corpus examples. Every (class, session)
/// cell is split into train / validation / test by seeded shuffling; the train
/// part is grouped into batches by the same rules as the synthetic generator.
/// For MT-NC, `tasks` gives the number of tasks.
pub fn scenario_from_corpus(
    kind: ScenarioKind,
    tasks: usize,
    examples: Vec<LabeledExample>,
    hold_out: HoldOut,
    seed: u64,
) -> Result<Scenario> {
    let labels: Vec<_> = examples.iter().map(|e| (e.label, e.session)).collect();
    let (classes, sessions) = corpus_dims(&labels, None, None);
    let layout = layout_corpus(kind, tasks, &labels, classes, sessions, hold_out, seed)?;
    let tagged = |i: usize| {
        let mut e = examples[i].clone();
        e.task = task_of(layout.tasks.as_ref(), e.label);
        e
    };
    let batches = layout
        .batches
        .iter()
        .enumerate()
        .map(|(i, (task, idx))| StreamBatch {
            index: i + 1,
            examples: idx.iter().map(|&j| tagged(j)).collect(),
            task_label: *task,
        })
        .filter(|b| !b.examples.is_empty())
        .collect::<Vec<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, mut b)| {
            b.index = i + 1;
            b
        })
        .collect();
    Ok(Scenario {
        kind,
        classes,
        batches,
        validation: layout.validation.iter().map(|&i| tagged(i)).collect(),
        test: layout.test.iter().map(|&i| tagged(i)).collect(),
        tasks: layout.tasks,
    })
}

/// Corpus stream that defers reading example files until a batch is requested.
/// Held-out sets are loaded eagerly by [`LazyCorpusStream::held_out`].
pub struct LazyCorpusStream {
    manifest: Manifest,
    layout: CorpusLayout,
    classes: usize,
}

impl LazyCorpusStream {
    pub fn new(
        manifest: Manifest,
        kind: ScenarioKind,
        tasks: usize,
        hold_out: HoldOut,
        seed: u64,
    ) -> Result<Self> {
        manifest.check_files()?;
        let labels: Vec<_> = manifest.rows.iter().map(|r| (r.label, r.session)).collect();
        let (classes, sessions) = corpus_dims(&labels, manifest.classes, manifest.sessions);
        let mut layout = layout_corpus(kind, tasks, &labels, classes, sessions, hold_out, seed)?;
        layout.batches.retain(|b| !b.1.is_empty());
        Ok(Self {
            manifest,
            layout,
            classes,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn tasks(&self) -> Option<&Vec<Vec<usize>>> {
        self.layout.tasks.as_ref()
    }

    fn load(&self, idx: &[usize]) -> Result<Vec<LabeledExample>> {
        idx.iter()
            .map(|&i| {
                let mut e = self.manifest.load_row(&self.manifest.rows[i])?;
                e.task = task_of(self.layout.tasks.as_ref(), e.label);
                Ok(e)
            })
            .collect()
    }

    /// `(validation, test)` examples.
    pub fn held_out(&self) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
        Ok((
            self.load(&self.layout.validation)?,
            self.load(&self.layout.test)?,
        ))
    }
}

impl BatchSource for LazyCorpusStream {
    fn num_batches(&self) -> usize {
        self.layout.batches.len()
    }

    fn batch(&self, t: usize) -> Result<Cow<'_, StreamBatch>> {
        let (task, idx) = t
            .checked_sub(1)
            .and_then(|i| self.layout.batches.get(i))
            .ok_or_else(|| Error::config(format!("stream has no batch {t}")))?;
        Ok(Cow::Owned(StreamBatch {
            index: t,
            examples: self.load(idx)?,
            task_label: *task,
        }))
    }
}
