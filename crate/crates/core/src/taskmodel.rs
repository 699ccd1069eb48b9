//! Multi-task grasp model.
//!
//! Classes are identified by [`TaskSet`]s, subsets of the principle tasks. A
//! demonstrated pose carries the exact task combination it satisfies (its
//! zone); inclusive labelling copies it into the training set of every class
//! whose task set it covers, so the class `{U}` learns from the `{U}`,
//! `{U,T}`, `{U,H}` and `{U,T,H}` zones.

use std::collections::HashSet;
use std::fmt;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::{fit_with, FeatureVector, GaussianError, GaussianFitOptions, GaussianParams};

/// Largest supported number of principle tasks.
pub const MAX_TASKS: usize = 8;

/// Priors must sum to one within this tolerance.
pub const PRIOR_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("sample {index} has an empty zone label")]
    EmptyZoneLabel { index: usize },
    #[error("sample {index} has zone label {zone:#b} outside the {tasks} principle tasks")]
    ZoneOutOfRange { index: usize, zone: u8, tasks: usize },
    #[error("sample {index} with zone {zone} covers no class of the layout")]
    Unassignable { index: usize, zone: String },
    #[error("sample {index} has {actual} features, schema has {expected}")]
    SampleDimension {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("class {class} has no training samples")]
    EmptyClass { class: String },
    #[error("class {class}: {source}")]
    ClassFit {
        class: String,
        #[source]
        source: GaussianError,
    },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("feature vector has {actual} entries, model expects {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("feature vector contains non-finite values")]
    NonFiniteFeature,
    #[error("every class likelihood underflows at this pose (max log score {0})")]
    PosteriorUnderflow(f64),
}

/// Subset of the principle tasks as a bitmask; bit `i` is task `i`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskSet(u8);

impl TaskSet {
    pub const EMPTY: TaskSet = TaskSet(0);

    pub const fn from_bits(bits: u8) -> Self {
        TaskSet(bits)
    }

    pub const fn bits(self) -> u8 {
        self.0
    }

    pub fn single(task: usize) -> Self {
        assert!(task < MAX_TASKS, "task index {task} out of range");
        TaskSet(1 << task)
    }

    pub fn from_tasks<I: IntoIterator<Item = usize>>(tasks: I) -> Self {
        tasks.into_iter().fold(TaskSet::EMPTY, |acc, t| acc.with(t))
    }

    pub fn with(self, task: usize) -> Self {
        TaskSet(self.0 | TaskSet::single(task).0)
    }

    pub fn contains(self, task: usize) -> bool {
        task < MAX_TASKS && self.0 & (1 << task) != 0
    }

    pub fn is_superset_of(self, other: TaskSet) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn tasks(self) -> impl Iterator<Item = usize> {
        (0..MAX_TASKS).filter(move |&t| self.contains(t))
    }

    /// Whether every set bit is below `m`.
    pub fn fits(self, m: usize) -> bool {
        m >= MAX_TASKS || (self.0 as u16) < (1u16 << m)
    }

    /// Task names joined with `+`, or `none` for the empty set.
    pub fn label(self, names: &[String]) -> String {
        if self.is_empty() {
            return "none".to_string();
        }
        self.tasks()
            .map(|t| names.get(t).cloned().unwrap_or_else(|| format!("task{t}")))
            .collect::<Vec<_>>()
            .join("+")
    }
}

impl fmt::Debug for TaskSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TaskSet({:#b})", self.0)
    }
}

/// Sort key used for zone listings: fewer tasks first, then by bitmask.
/// For three tasks this is U, T, H, UT, UH, TH, UTH.
pub fn canonical_key(s: &TaskSet) -> (usize, u8) {
    (s.len(), s.bits())
}

/// Principle task names and the ordered zones a model contains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLayout", into = "RawLayout")]
pub struct ZoneLayout {
    tasks: Vec<String>,
    zones: Vec<TaskSet>,
}

#[derive(Serialize, Deserialize)]
struct RawLayout {
    tasks: Vec<String>,
    zones: Vec<TaskSet>,
}

impl TryFrom<RawLayout> for ZoneLayout {
    type Error = ModelError;
    fn try_from(raw: RawLayout) -> Result<Self, Self::Error> {
        ZoneLayout::new(raw.tasks, raw.zones)
    }
}

impl From<ZoneLayout> for RawLayout {
    fn from(l: ZoneLayout) -> Self {
        RawLayout {
            tasks: l.tasks,
            zones: l.zones,
        }
    }
}

impl ZoneLayout {
    pub fn new(tasks: Vec<String>, zones: Vec<TaskSet>) -> Result<Self, ModelError> {
        let m = tasks.len();
        if m == 0 || m > MAX_TASKS {
            return Err(ModelError::InvalidLayout(format!(
                "need 1..={MAX_TASKS} tasks, got {m}"
            )));
        }
        let mut names = HashSet::new();
        for t in &tasks {
            if t.is_empty() || !names.insert(t.as_str()) {
                return Err(ModelError::InvalidLayout(format!(
                    "task names must be unique and nonempty: {tasks:?}"
                )));
            }
        }
        if zones.is_empty() {
            return Err(ModelError::InvalidLayout("layout has no zones".into()));
        }
        let mut seen = HashSet::new();
        for z in &zones {
            if z.is_empty() {
                return Err(ModelError::InvalidLayout("the empty task set cannot be a zone".into()));
            }
            if !z.fits(m) {
                return Err(ModelError::InvalidLayout(format!(
                    "zone {:#b} exceeds {m} tasks",
                    z.bits()
                )));
            }
            if !seen.insert(*z) {
                return Err(ModelError::InvalidLayout(format!("duplicate zone {}", z.label(&tasks))));
            }
        }
        Ok(Self { tasks, zones })
    }

    /// Every nonempty subset of `tasks`, in canonical order.
    pub fn full(tasks: Vec<String>) -> Result<Self, ModelError> {
        let m = tasks.len();
        if m == 0 || m > MAX_TASKS {
            return Err(ModelError::InvalidLayout(format!(
                "need 1..={MAX_TASKS} tasks, got {m}"
            )));
        }
        let mut zones: Vec<TaskSet> = (1..(1u16 << m)).map(|b| TaskSet::from_bits(b as u8)).collect();
        zones.sort_by_key(canonical_key);
        Self::new(tasks, zones)
    }

    /// Keeps the zones of the full layout that are not listed in `omit`.
    pub fn full_without(tasks: Vec<String>, omit: &[TaskSet]) -> Result<Self, ModelError> {
        let full = Self::full(tasks)?;
        let zones = full.zones.iter().copied().filter(|z| !omit.contains(z)).collect();
        Self::new(full.tasks, zones)
    }

    /// All seven zones over Usage, Transfer and Handover.
    pub fn seven_zone() -> Self {
        Self::full(cup_tasks()).expect("valid")
    }

    /// Seven-zone without `{H}` and `{U,H}`.
    pub fn five_zone() -> Self {
        Self::full_without(cup_tasks(), &[TaskSet::from_bits(0b100), TaskSet::from_bits(0b101)]).expect("valid")
    }

    /// Five-zone without `{U}`: every zone contains Transfer.
    pub fn four_zone() -> Self {
        Self::full_without(
            cup_tasks(),
            &[
                TaskSet::from_bits(0b100),
                TaskSet::from_bits(0b101),
                TaskSet::from_bits(0b001),
            ],
        )
        .expect("valid")
    }

    pub fn tasks(&self) -> &[String] {
        &self.tasks
    }

    pub fn zones(&self) -> &[TaskSet] {
        &self.zones
    }

    /// Number of principle tasks `m`.
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Number of zones `K`.
    pub fn len(&self) -> usize {
        self.zones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zones.is_empty()
    }

    pub fn index_of(&self, zone: TaskSet) -> Option<usize> {
        self.zones.iter().position(|&z| z == zone)
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t == name)
    }

    pub fn label(&self, zone: TaskSet) -> String {
        zone.label(&self.tasks)
    }
}

/// Usage, Transfer, Handover.
pub fn cup_tasks() -> Vec<String> {
    vec!["Usage".into(), "Transfer".into(), "Handover".into()]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub name: String,
    pub unit: String,
}

/// Ordered feature descriptors plus index groups constrained to unit norm.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema", into = "RawSchema")]
pub struct FeatureSchema {
    features: Vec<FeatureDescriptor>,
    unit_norm_groups: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct RawSchema {
    features: Vec<FeatureDescriptor>,
    #[serde(default)]
    unit_norm_groups: Vec<Vec<usize>>,
}

impl TryFrom<RawSchema> for FeatureSchema {
    type Error = ModelError;
    fn try_from(raw: RawSchema) -> Result<Self, Self::Error> {
        FeatureSchema::new(raw.features, raw.unit_norm_groups)
    }
}

impl From<FeatureSchema> for RawSchema {
    fn from(s: FeatureSchema) -> Self {
        RawSchema {
            features: s.features,
            unit_norm_groups: s.unit_norm_groups,
        }
    }
}

impl FeatureSchema {
    pub fn new(features: Vec<FeatureDescriptor>, unit_norm_groups: Vec<Vec<usize>>) -> Result<Self, ModelError> {
        if features.is_empty() {
            return Err(ModelError::InvalidSchema("no features".into()));
        }
        let mut used = HashSet::new();
        for g in &unit_norm_groups {
            if g.is_empty() {
                return Err(ModelError::InvalidSchema("empty unit-norm group".into()));
            }
            for &i in g {
                if i >= features.len() {
                    return Err(ModelError::InvalidSchema(format!("unit-norm index {i} out of range")));
                }
                if !used.insert(i) {
                    return Err(ModelError::InvalidSchema(format!(
                        "feature {i} is in two unit-norm groups"
                    )));
                }
            }
        }
        Ok(Self {
            features,
            unit_norm_groups,
        })
    }

    /// Palm centre (m), palm direction (unit vector) and grip force (N).
    pub fn grasp_pose() -> Self {
        let f = |name: &str, unit: &str| FeatureDescriptor {
            name: name.into(),
            unit: unit.into(),
        };
        Self::new(
            vec![
                f("palm_x", "m"),
                f("palm_y", "m"),
                f("palm_z", "m"),
                f("palm_dir_x", "1"),
                f("palm_dir_y", "1"),
                f("palm_dir_z", "1"),
                f("grip_force", "N"),
            ],
            vec![vec![3, 4, 5]],
        )
        .expect("valid")
    }

    pub fn features(&self) -> &[FeatureDescriptor] {
        &self.features
    }

    pub fn unit_norm_groups(&self) -> &[Vec<usize>] {
        &self.unit_norm_groups
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// A demonstrated pose with the exact task combination it satisfies.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub x: FeatureVector,
    pub zone: TaskSet,
}

impl LabeledSample {
    pub fn new(x: FeatureVector, zone: TaskSet) -> Self {
        Self { x, zone }
    }
}

/// Inclusive training sets, one per class of a layout, in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTrainingSets {
    pub zones: Vec<TaskSet>,
    pub sets: Vec<Vec<FeatureVector>>,
}

impl ClassTrainingSets {
    pub fn get(&self, class: TaskSet) -> Option<&[FeatureVector]> {
        self.zones
            .iter()
            .position(|&z| z == class)
            .map(|i| self.sets[i].as_slice())
    }

    pub fn total(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }
}

/// Adds each sample to every class whose task set its zone covers.
pub fn expand_inclusive_labels(
    samples: &[LabeledSample],
    layout: &ZoneLayout,
) -> Result<ClassTrainingSets, ModelError> {
    let mut sets = vec![Vec::new(); layout.len()];
    for (index, s) in samples.iter().enumerate() {
        if s.zone.is_empty() {
            return Err(ModelError::EmptyZoneLabel { index });
        }
        if !s.zone.fits(layout.num_tasks()) {
            return Err(ModelError::ZoneOutOfRange {
                index,
                zone: s.zone.bits(),
                tasks: layout.num_tasks(),
            });
        }
        let mut assigned = false;
        for (set, &class) in sets.iter_mut().zip(layout.zones()) {
            if s.zone.is_superset_of(class) {
                set.push(s.x.clone());
                assigned = true;
            }
        }
        if !assigned {
            return Err(ModelError::Unassignable {
                index,
                zone: layout.label(s.zone),
            });
        }
    }
    Ok(ClassTrainingSets {
        zones: layout.zones().to_vec(),
        sets,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// Proportional to the inclusive training-set sizes.
    #[default]
    Inclusive,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FitConfig {
    #[serde(default)]
    pub gaussian: GaussianFitOptions,
    #[serde(default)]
    pub priors: PriorMode,
}

/// Per-feature box `[lower_i, upper_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl FeatureBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, ModelError> {
        if lower.len() != upper.len() {
            return Err(ModelError::InvalidModel("bound vectors differ in length".into()));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l.is_finite() && u.is_finite()) || l > u {
                return Err(ModelError::InvalidModel(format!(
                    "bad bounds for feature {i}: [{l}, {u}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// `[min − margin·range, max + margin·range]` per feature over `points`.
    pub fn from_data<'a, I>(points: I, margin: f64) -> Option<Self>
    where
        I: IntoIterator<Item = &'a FeatureVector>,
    {
        let mut it = points.into_iter();
        let first = it.next()?;
        let mut lo: Vec<f64> = first.iter().copied().collect();
        let mut hi = lo.clone();
        for p in it {
            for (i, v) in p.iter().enumerate() {
                lo[i] = lo[i].min(*v);
                hi[i] = hi[i].max(*v);
            }
        }
        let (lower, upper) = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| {
                let r = h - l;
                (l - margin * r, h + margin * r)
            })
            .unzip();
        Some(Self { lower, upper })
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn contains(&self, x: &FeatureVector, tol: f64) -> bool {
        x.len() == self.len()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= l - tol && *v <= u + tol)
    }
}

/// Fraction of the data range added on each side of the default bounds.
pub const DEFAULT_BOUNDS_MARGIN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassModel {
    pub zone: TaskSet,
    pub gaussian: GaussianParams,
    pub prior: f64,
}

/// Per-class Gaussians and priors over a layout's zones. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskModel {
    layout: ZoneLayout,
    schema: FeatureSchema,
    classes: Vec<ClassModel>,
    bounds: Option<FeatureBounds>,
    log_priors: Vec<f64>,
}

impl MultiTaskModel {
    pub fn new(
        layout: ZoneLayout,
        schema: FeatureSchema,
        classes: Vec<ClassModel>,
        bounds: Option<FeatureBounds>,
    ) -> Result<Self, ModelError> {
        if classes.len() != layout.len() {
            return Err(ModelError::InvalidModel(format!(
                "{} classes for a {}-zone layout",
                classes.len(),
                layout.len()
            )));
        }
        for (c, &z) in classes.iter().zip(layout.zones()) {
            if c.zone != z {
                return Err(ModelError::InvalidModel(format!(
                    "class {} out of layout order (expected {})",
                    layout.label(c.zone),
                    layout.label(z)
                )));
            }
            if c.gaussian.dim() != schema.len() {
                return Err(ModelError::InvalidModel(format!(
                    "class {} has dimension {}, schema has {}",
                    layout.label(c.zone),
                    c.gaussian.dim(),
                    schema.len()
                )));
            }
            if !(c.prior > 0.0 && c.prior.is_finite()) {
                return Err(ModelError::InvalidModel(format!(
                    "class {} has prior {}",
                    layout.label(c.zone),
                    c.prior
                )));
            }
        }
        let sum: f64 = classes.iter().map(|c| c.prior).sum();
        if (sum - 1.0).abs() > PRIOR_SUM_TOLERANCE {
            return Err(ModelError::InvalidModel(format!("priors sum to {sum}")));
        }
        if let Some(b) = &bounds {
            if b.len() != schema.len() {
                return Err(ModelError::InvalidModel("bounds do not match the schema".into()));
            }
        }
        let log_priors = classes.iter().map(|c| c.prior.ln()).collect();
        Ok(Self {
            layout,
            schema,
            classes,
            bounds,
            log_priors,
        })
    }

    pub fn layout(&self) -> &ZoneLayout {
        &self.layout
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn classes(&self) -> &[ClassModel] {
        &self.classes
    }

    pub fn class(&self, zone: TaskSet) -> Option<&ClassModel> {
        self.classes.iter().find(|c| c.zone == zone)
    }

    /// Bounds recorded from the training data, when available.
    pub fn bounds(&self) -> Option<&FeatureBounds> {
        self.bounds.as_ref()
    }

    /// Number of classes `K`.
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Feature dimension `d`.
    pub fn dim(&self) -> usize {
        self.schema.len()
    }

    pub fn check_features(&self, x: &FeatureVector) -> Result<(), ModelError> {
        if x.len() != self.dim() {
            return Err(ModelError::Dimension {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteFeature);
        }
        Ok(())
    }

    /// `ln P(x|k) + ln P(k)` for every class.
    pub fn log_scores(&self, x: &FeatureVector) -> Result<DVector<f64>, ModelError> {
        self.check_features(x)?;
        let mut out = DVector::zeros(self.len());
        for (k, c) in self.classes.iter().enumerate() {
            let lp = c.gaussian.log_pdf(x).map_err(|e| ModelError::ClassFit {
                class: self.layout.label(c.zone),
                source: e,
            })?;
            out[k] = lp + self.log_priors[k];
        }
        Ok(out)
    }

    /// Robot probability vector `P(k|x)`, normalised in log space.
    pub fn posterior_vector(&self, x: &FeatureVector) -> Result<DVector<f64>, ModelError> {
        let scores = self.log_scores(x)?;
        normalize_log_scores(&scores)
    }

    /// Highest-posterior class; ties go to the larger task set, then the
    /// lower zone index.
    pub fn classify(&self, x: &FeatureVector) -> Result<TaskSet, ModelError> {
        let scores = self.log_scores(x)?;
        let best = argmax_with_tiebreak(scores.as_slice(), self.layout.zones())
            .ok_or(ModelError::PosteriorUnderflow(f64::NEG_INFINITY))?;
        Ok(self.layout.zones()[best])
    }
}

/// Softmax of log scores with the max shifted out.
pub fn normalize_log_scores(scores: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(ModelError::PosteriorUnderflow(max));
    }
    let mut p = scores.map(|s| (s - max).exp());
    let z = p.sum();
    p /= z;
    Ok(p)
}

/// Index of the largest score; ties broken toward the class with more tasks,
/// then the lowest index. `None` when no score is comparable.
pub fn argmax_with_tiebreak(scores: &[f64], zones: &[TaskSet]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            continue;
        }
        best = match best {
            None => Some(k),
            Some(b) if s > scores[b] || (s == scores[b] && zones[k].len() > zones[b].len()) => Some(k),
            keep => keep,
        };
    }
    best
}

/// Fits one Gaussian per class on the inclusive training sets.
pub fn fit_model(
    samples: &[LabeledSample],
    layout: &ZoneLayout,
    schema: &FeatureSchema,
    config: &FitConfig,
) -> Result<MultiTaskModel, ModelError> {
    for (index, s) in samples.iter().enumerate() {
        if s.x.len() != schema.len() {
            return Err(ModelError::SampleDimension {
                index,
                expected: schema.len(),
                actual: s.x.len(),
            });
        }
    }
    let sets = expand_inclusive_labels(samples, layout)?;
    let total = sets.total() as f64;
    let mut classes = Vec::with_capacity(layout.len());
    for (&zone, set) in sets.zones.iter().zip(&sets.sets) {
        let class = layout.label(zone);
        if set.is_empty() {
            return Err(ModelError::EmptyClass { class });
        }
        let gaussian = fit_with(set, &config.gaussian).map_err(|source| ModelError::ClassFit { class, source })?;
        let prior = match config.priors {
            PriorMode::Inclusive => set.len() as f64 / total,
            PriorMode::Uniform => 1.0 / layout.len() as f64,
        };
        classes.push(ClassModel { zone, gaussian, prior });
    }
    let bounds = FeatureBounds::from_data(samples.iter().map(|s| &s.x), DEFAULT_BOUNDS_MARGIN);
    MultiTaskModel::new(layout.clone(), schema.clone(), classes, bounds)
}
