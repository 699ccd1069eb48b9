//! Versioned dataset and model files.
//!
//! Datasets are JSON lines: a header object followed by one `{"x": [...],
//! "zone": bits}` record per sample. Models are a single JSON document. Every
//! float is written with 17 significant digits so a load/save cycle
//! reproduces the file byte for byte. Writes go through a temporary file in
//! the destination directory and a rename.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::ser::Serialize;
use serde::{Deserialize, Serialize as SerializeDerive};
use serde_json::ser::{CompactFormatter, Formatter, PrettyFormatter};
use thiserror::Error;

use crate::gaussian::GaussianParams;
use crate::taskmodel::{ClassModel, FeatureBounds, FeatureSchema, LabeledSample, MultiTaskModel, TaskSet, ZoneLayout};

pub const DATASET_FORMAT: &str = "intentgrasp-dataset";
pub const MODEL_FORMAT: &str = "intentgrasp-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("malformed file (line {line}): {message}")]
    Malformed { line: usize, message: String },
    #[error("expected a {expected} file, found {found:?}")]
    WrongFormat { expected: &'static str, found: String },
    #[error("unsupported format version {0} (this build reads version {FORMAT_VERSION})")]
    Version(u32),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("invalid content: {0}")]
    Invalid(String),
}

impl PersistError {
    fn io(path: &Path, source: io::Error) -> Self {
        PersistError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    fn malformed(line: usize, e: impl std::fmt::Display) -> Self {
        PersistError::Malformed {
            line,
            message: e.to_string(),
        }
    }
}

/// Writes `f64` as `{:.16e}`; everything else is delegated.
struct Exact<F>(F);

macro_rules! delegate {
    ($($name:ident($($arg:ident: $ty:ty),*)),* $(,)?) => {
        $(
            fn $name<W: ?Sized + Write>(&mut self, w: &mut W $(, $arg: $ty)*) -> io::Result<()> {
                self.0.$name(w $(, $arg)*)
            }
        )*
    };
}

impl<F: Formatter> Formatter for Exact<F> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    delegate!(
        begin_array(),
        end_array(),
        begin_array_value(first: bool),
        end_array_value(),
        begin_object(),
        end_object(),
        begin_object_key(first: bool),
        end_object_key(),
        begin_object_value(),
        end_object_value(),
    );
}

fn to_exact_compact<T: Serialize>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Exact(CompactFormatter));
    value.serialize(&mut ser).expect("in-memory serialisation");
    String::from_utf8(buf).expect("JSON is UTF-8")
}

fn to_exact_pretty<T: Serialize>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Exact(PrettyFormatter::with_indent(b"  ")));
    value.serialize(&mut ser).expect("in-memory serialisation");
    String::from_utf8(buf).expect("JSON is UTF-8")
}

/// Replaces `path` atomically with `contents`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), PersistError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| PersistError::io(path, e))?;
    tmp.write_all(contents).map_err(|e| PersistError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| PersistError::io(path, e))?;
    tmp.persist(path).map_err(|e| PersistError::io(path, e.error))?;
    Ok(())
}

/// A labelled dataset with the layout and schema it was recorded under.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub object: String,
    pub layout: ZoneLayout,
    pub schema: FeatureSchema,
    pub samples: Vec<LabeledSample>,
}

#[derive(SerializeDerive, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    object: String,
    tasks: Vec<String>,
    zones: Vec<TaskSet>,
    schema: FeatureSchema,
    count: usize,
}

#[derive(SerializeDerive, Deserialize)]
struct Record {
    x: Vec<f64>,
    zone: TaskSet,
}

#[derive(Deserialize)]
struct Probe {
    format: String,
    version: u32,
}

fn check_format(value: &serde_json::Value, expected: &'static str, line: usize) -> Result<(), PersistError> {
    let probe: Probe = serde_json::from_value(value.clone()).map_err(|e| PersistError::malformed(line, e))?;
    if probe.format != expected {
        return Err(PersistError::WrongFormat {
            expected,
            found: probe.format,
        });
    }
    if probe.version != FORMAT_VERSION {
        return Err(PersistError::Version(probe.version));
    }
    Ok(())
}

pub fn dataset_to_string(dataset: &Dataset) -> String {
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: FORMAT_VERSION,
        object: dataset.object.clone(),
        tasks: dataset.layout.tasks().to_vec(),
        zones: dataset.layout.zones().to_vec(),
        schema: dataset.schema.clone(),
        count: dataset.samples.len(),
    };
    let mut out = to_exact_compact(&header);
    out.push('\n');
    for s in &dataset.samples {
        out.push_str(&to_exact_compact(&Record {
            x: s.x.as_slice().to_vec(),
            zone: s.zone,
        }));
        out.push('\n');
    }
    out
}

/// Parses a dataset file, optionally requiring a particular schema.
pub fn parse_dataset(text: &str, expected_schema: Option<&FeatureSchema>) -> Result<Dataset, PersistError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| PersistError::malformed(1, "empty file"))?;
    let raw: serde_json::Value = serde_json::from_str(first).map_err(|e| PersistError::malformed(1, e))?;
    check_format(&raw, DATASET_FORMAT, 1)?;
    let header: DatasetHeader = serde_json::from_value(raw).map_err(|e| PersistError::malformed(1, e))?;
    if let Some(expected) = expected_schema {
        if *expected != header.schema {
            return Err(PersistError::SchemaMismatch(
                "dataset schema differs from the expected one".into(),
            ));
        }
    }
    let layout = ZoneLayout::new(header.tasks, header.zones).map_err(|e| PersistError::Invalid(e.to_string()))?;
    let d = header.schema.len();
    let mut samples = Vec::with_capacity(header.count);
    for (i, line) in lines {
        let r: Record = serde_json::from_str(line).map_err(|e| PersistError::malformed(i + 1, e))?;
        if r.x.len() != d {
            return Err(PersistError::SchemaMismatch(format!(
                "line {}: {} features, schema has {d}",
                i + 1,
                r.x.len()
            )));
        }
        samples.push(LabeledSample::new(DVector::from_vec(r.x), r.zone));
    }
    if samples.len() != header.count {
        return Err(PersistError::malformed(
            samples.len() + 1,
            format!("header announces {} records, found {}", header.count, samples.len()),
        ));
    }
    Ok(Dataset {
        object: header.object,
        layout,
        schema: header.schema,
        samples,
    })
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<(), PersistError> {
    write_atomic(path, dataset_to_string(dataset).as_bytes())
}

pub fn load_dataset(path: &Path, expected_schema: Option<&FeatureSchema>) -> Result<Dataset, PersistError> {
    let text = fs::read_to_string(path).map_err(|e| PersistError::io(path, e))?;
    parse_dataset(&text, expected_schema)
}

#[derive(SerializeDerive, Deserialize)]
struct ClassRecord {
    zone: TaskSet,
    mean: Vec<f64>,
    /// Row-major.
    covariance: Vec<f64>,
    prior: f64,
}

#[derive(SerializeDerive, Deserialize)]
struct ModelDocument {
    format: String,
    version: u32,
    tasks: Vec<String>,
    zones: Vec<TaskSet>,
    schema: FeatureSchema,
    classes: Vec<ClassRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bounds: Option<FeatureBounds>,
}

pub fn model_to_string(model: &MultiTaskModel) -> String {
    let doc = ModelDocument {
        format: MODEL_FORMAT.into(),
        version: FORMAT_VERSION,
        tasks: model.layout().tasks().to_vec(),
        zones: model.layout().zones().to_vec(),
        schema: model.schema().clone(),
        classes: model
            .classes()
            .iter()
            .map(|c| {
                let cov = c.gaussian.covariance();
                let d = cov.nrows();
                ClassRecord {
                    zone: c.zone,
                    mean: c.gaussian.mean().as_slice().to_vec(),
                    covariance: (0..d * d).map(|k| cov[(k / d, k % d)]).collect(),
                    prior: c.prior,
                }
            })
            .collect(),
        bounds: model.bounds().cloned(),
    };
    let mut s = to_exact_pretty(&doc);
    s.push('\n');
    s
}

pub fn parse_model(text: &str, expected_schema: Option<&FeatureSchema>) -> Result<MultiTaskModel, PersistError> {
    let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| PersistError::malformed(e.line(), e))?;
    check_format(&raw, MODEL_FORMAT, 1)?;
    let doc: ModelDocument = serde_json::from_value(raw).map_err(|e| PersistError::malformed(1, e))?;
    if let Some(expected) = expected_schema {
        if *expected != doc.schema {
            return Err(PersistError::SchemaMismatch(
                "model schema differs from the expected one".into(),
            ));
        }
    }
    let invalid = |e: &dyn std::fmt::Display| PersistError::Invalid(e.to_string());
    let layout = ZoneLayout::new(doc.tasks, doc.zones).map_err(|e| invalid(&e))?;
    let d = doc.schema.len();
    let mut classes = Vec::with_capacity(doc.classes.len());
    for c in doc.classes {
        if c.mean.len() != d || c.covariance.len() != d * d {
            return Err(PersistError::SchemaMismatch(format!(
                "class {} does not have {d} features",
                layout.label(c.zone)
            )));
        }
        let gaussian = GaussianParams::new(DVector::from_vec(c.mean), DMatrix::from_row_slice(d, d, &c.covariance))
            .map_err(|e| PersistError::Invalid(format!("class {}: {e}", layout.label(c.zone))))?;
        classes.push(ClassModel {
            zone: c.zone,
            gaussian,
            prior: c.prior,
        });
    }
    MultiTaskModel::new(layout, doc.schema, classes, doc.bounds).map_err(|e| invalid(&e))
}

pub fn save_model(path: &Path, model: &MultiTaskModel) -> Result<(), PersistError> {
    write_atomic(path, model_to_string(model).as_bytes())
}

pub fn load_model(path: &Path, expected_schema: Option<&FeatureSchema>) -> Result<MultiTaskModel, PersistError> {
    let text = fs::read_to_string(path).map_err(|e| PersistError::io(path, e))?;
    parse_model(&text, expected_schema)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{builtin_spec, generate};
    use crate::taskmodel::{fit_model, FeatureDescriptor, FitConfig};

    fn cup7() -> Dataset {
        let spec = builtin_spec("cup7").unwrap();
        Dataset {
            object: spec.object.clone(),
            layout: spec.layout.clone(),
            schema: spec.schema.clone(),
            samples: generate(&spec).unwrap(),
        }
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE, 0.0, -0.0] {
            let s = to_exact_compact(&v);
            let back: f64 = serde_json::from_str(&s).unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{s}");
        }
        assert_eq!(to_exact_compact(&0.5), "5.0000000000000000e-1");
    }

    #[test]
    fn dataset_round_trip() {
        let d = cup7();
        let text = dataset_to_string(&d);
        let back = parse_dataset(&text, Some(&d.schema)).unwrap();
        assert_eq!(back, d);
        assert_eq!(dataset_to_string(&back), text);
    }

    #[test]
    fn dataset_failures() {
        let d = cup7();
        let text = dataset_to_string(&d);
        let cut = &text[..text.len() / 2];
        assert!(matches!(parse_dataset(cut, None), Err(PersistError::Malformed { .. })));
        // Cut on a line boundary: caught by the record count.
        let lines: Vec<&str> = text.lines().collect();
        let short = lines[..10].join("\n");
        assert!(matches!(
            parse_dataset(&short, None),
            Err(PersistError::Malformed { .. })
        ));
        assert!(matches!(parse_dataset("", None), Err(PersistError::Malformed { .. })));
        let v2 = text.replacen("\"version\":1", "\"version\":2", 1);
        assert!(matches!(parse_dataset(&v2, None), Err(PersistError::Version(2))));
        let other = FeatureSchema::new(
            vec![FeatureDescriptor {
                name: "x".into(),
                unit: "m".into(),
            }],
            vec![],
        )
        .unwrap();
        assert!(matches!(
            parse_dataset(&text, Some(&other)),
            Err(PersistError::SchemaMismatch(_))
        ));
        let m = model_to_string(&fit_model(&d.samples, &d.layout, &d.schema, &FitConfig::default()).unwrap());
        assert!(matches!(
            parse_dataset(&m.replace('\n', ""), None),
            Err(PersistError::WrongFormat { .. })
        ));
    }

    #[test]
    fn model_round_trip_is_exact() {
        let d = cup7();
        let model = fit_model(&d.samples, &d.layout, &d.schema, &FitConfig::default()).unwrap();
        let text = model_to_string(&model);
        let back = parse_model(&text, Some(&d.schema)).unwrap();
        assert_eq!(back, model);
        assert_eq!(model_to_string(&back), text);
        for s in d.samples.iter().step_by(37) {
            assert_eq!(
                back.posterior_vector(&s.x).unwrap(),
                model.posterior_vector(&s.x).unwrap()
            );
        }
        assert!(matches!(
            parse_model(&text[..text.len() - 20], None),
            Err(PersistError::Malformed { .. })
        ));
        let v9 = text.replacen("\"version\": 1", "\"version\": 9", 1);
        assert!(matches!(parse_model(&v9, None), Err(PersistError::Version(9))));
        assert!(matches!(
            parse_model(dataset_to_string(&d).lines().next().unwrap(), None),
            Err(PersistError::WrongFormat { .. })
        ));
    }

    #[test]
    fn model_without_bounds_loads() {
        let d = cup7();
        let model = fit_model(&d.samples, &d.layout, &d.schema, &FitConfig::default()).unwrap();
        let mut doc: serde_json::Value = serde_json::from_str(&model_to_string(&model)).unwrap();
        doc.as_object_mut().unwrap().remove("bounds");
        let back = parse_model(&doc.to_string(), None).unwrap();
        assert!(back.bounds().is_none());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(matches!(
            load_model(&dir.path().join("missing.json"), None),
            Err(PersistError::Io { .. })
        ));
    }
}
