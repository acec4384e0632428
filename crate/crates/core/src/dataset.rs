//! Dataset and prediction-file I/O, seeded splits and run manifests.
//!
//! Datasets are UTF-8 TSV with a header row; columns are located through a
//! [`ColumnMap`]. Prediction files are TSV with the columns
//! `ID, Label, Explanation, Fallback, Raw`; only `ID` and `Label` are
//! required when reading, so files produced by other tools can participate
//! in ensembles. An optional first line `#model_id=<id>` names the model.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label::{parse_label, EmotionLabel, Instance, ModelId, Prediction};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed TSV: {source}")]
    Tsv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: missing column {column:?}")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: duplicate id {id:?} at row {row}")]
    DuplicateId { path: PathBuf, id: String, row: usize },
    #[error("{path}: row {row}: {message}")]
    Row {
        path: PathBuf,
        row: usize,
        message: String,
    },
    #[error("n_train must be in 1..{len} (got {n_train})")]
    SplitOutOfRange { n_train: usize, len: usize },
    #[error("{0}")]
    Invalid(String),
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Logical field → column header name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub id: String,
    pub text: String,
    pub label: Option<String>,
    pub language: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            id: "ID".into(),
            text: "Texts".into(),
            label: Some("Labels".into()),
            language: None,
        }
    }
}

impl ColumnMap {
    pub fn unlabeled(mut self) -> Self {
        self.label = None;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub instances: Vec<Instance>,
    pub source_path: String,
    pub column_map: ColumnMap,
}

impl Dataset {
    /// Builds an in-memory dataset, enforcing unique ids and non-empty text.
    pub fn from_instances(instances: Vec<Instance>) -> Result<Self, DataError> {
        let mut seen = HashSet::new();
        for (i, inst) in instances.iter().enumerate() {
            if inst.text.is_empty() {
                return Err(DataError::Invalid(format!(
                    "instance {:?} has empty text",
                    inst.id
                )));
            }
            if !seen.insert(inst.id.as_str()) {
                return Err(DataError::DuplicateId {
                    path: PathBuf::new(),
                    id: inst.id.clone(),
                    row: i + 1,
                });
            }
        }
        Ok(Dataset {
            instances,
            source_path: String::new(),
            column_map: ColumnMap::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Instance> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn by_id(&self) -> HashMap<&str, &Instance> {
        self.instances.iter().map(|i| (i.id.as_str(), i)).collect()
    }

    fn with_instances(&self, instances: Vec<Instance>) -> Dataset {
        Dataset {
            instances,
            source_path: self.source_path.clone(),
            column_map: self.column_map.clone(),
        }
    }
}

fn tsv_reader<R: std::io::Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .has_headers(true)
        .flexible(true)
        .from_reader(r)
}

fn column_index(
    headers: &csv::StringRecord,
    name: &str,
    path: &Path,
) -> Result<usize, DataError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| DataError::MissingColumn {
            path: path.to_path_buf(),
            column: name.to_string(),
        })
}

/// Loads a dataset TSV. Row numbers in errors are 1-based data rows.
pub fn load_dataset(path: impl AsRef<Path>, columns: &ColumnMap) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut rdr = tsv_reader(BufReader::new(file));
    let headers = rdr
        .headers()
        .map_err(|e| DataError::Tsv {
            path: path.into(),
            source: e,
        })?
        .clone();
    let id_col = column_index(&headers, &columns.id, path)?;
    let text_col = column_index(&headers, &columns.text, path)?;
    let label_col = columns
        .label
        .as_deref()
        .map(|c| column_index(&headers, c, path))
        .transpose()?;
    let lang_col = columns
        .language
        .as_deref()
        .map(|c| column_index(&headers, c, path))
        .transpose()?;

    let mut instances = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| DataError::Tsv {
            path: path.into(),
            source: e,
        })?;
        let field = |idx: usize, name: &str| -> Result<String, DataError> {
            rec.get(idx).map(str::to_string).ok_or_else(|| DataError::Row {
                path: path.into(),
                row,
                message: format!("missing {name} field"),
            })
        };
        let id = field(id_col, "id")?.trim().to_string();
        let text = field(text_col, "text")?;
        if id.is_empty() {
            return Err(DataError::Row {
                path: path.into(),
                row,
                message: "empty id".into(),
            });
        }
        if text.is_empty() {
            return Err(DataError::Row {
                path: path.into(),
                row,
                message: "empty text".into(),
            });
        }
        let gold = match label_col {
            Some(c) => Some(parse_label(&field(c, "label")?).map_err(|e| DataError::Row {
                path: path.into(),
                row,
                message: e.to_string(),
            })?),
            None => None,
        };
        let language = match lang_col {
            Some(c) => Some(field(c, "language")?).filter(|s| !s.is_empty()),
            None => None,
        };
        if !seen.insert(id.clone()) {
            return Err(DataError::DuplicateId {
                path: path.into(),
                id,
                row,
            });
        }
        instances.push(Instance {
            id,
            text,
            language,
            gold,
        });
    }
    Ok(Dataset {
        instances,
        source_path: path.display().to_string(),
        column_map: columns.clone(),
    })
}

/// Writes a dataset TSV with the given column map. Fields are written
/// verbatim, so they may not contain tabs or line breaks.
pub fn write_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let cols = &d.column_map;
    let mut header = vec![cols.id.as_str(), cols.text.as_str()];
    header.extend(cols.label.as_deref());
    header.extend(cols.language.as_deref());
    let mut out = header.join("\t");
    out.push('\n');
    for (i, inst) in d.instances.iter().enumerate() {
        let mut fields = vec![inst.id.as_str(), inst.text.as_str()];
        if cols.label.is_some() {
            fields.push(inst.gold.map(|l| l.canonical_text()).unwrap_or(""));
        }
        if cols.language.is_some() {
            fields.push(inst.language.as_deref().unwrap_or(""));
        }
        if fields.iter().any(|f| f.contains(['\t', '\n', '\r'])) {
            return Err(DataError::Row {
                path: path.into(),
                row: i + 1,
                message: "field contains a tab or line break".into(),
            });
        }
        out.push_str(&fields.join("\t"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Seeded shuffle, then the first `n_train` instances form the train split.
pub fn split_dataset(d: &Dataset, n_train: usize, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    if n_train == 0 || n_train >= d.len() {
        return Err(DataError::SplitOutOfRange {
            n_train,
            len: d.len(),
        });
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| idx.iter().map(|&i| d.instances[i].clone()).collect();
    Ok((
        d.with_instances(pick(&order[..n_train])),
        d.with_instances(pick(&order[n_train..])),
    ))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionFile {
    pub model_id: ModelId,
    pub predictions: Vec<Prediction>,
}

impl PredictionFile {
    /// Rejects duplicate instance ids.
    pub fn new(model_id: ModelId, predictions: Vec<Prediction>) -> Result<Self, DataError> {
        let mut seen = HashSet::new();
        for p in &predictions {
            if !seen.insert(p.instance_id.as_str()) {
                return Err(DataError::Invalid(format!(
                    "duplicate prediction for instance {:?}",
                    p.instance_id
                )));
            }
        }
        Ok(PredictionFile {
            model_id,
            predictions,
        })
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn labels(&self) -> Vec<EmotionLabel> {
        self.predictions.iter().map(|p| p.label).collect()
    }

    pub fn label_map(&self) -> HashMap<&str, EmotionLabel> {
        self.predictions
            .iter()
            .map(|p| (p.instance_id.as_str(), p.label))
            .collect()
    }

    pub fn fallback_count(&self) -> usize {
        self.predictions.iter().filter(|p| p.fallback_applied()).count()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.predictions.iter().map(|p| p.instance_id.as_str()).collect()
    }
}

/// Escapes backslash, tab, newline and carriage return.
pub fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

const MODEL_ID_PREFIX: &str = "#model_id=";

/// Serializes a prediction file. Output is a pure function of the value.
pub fn render_predictions(pf: &PredictionFile) -> String {
    let mut out = String::new();
    out.push_str(MODEL_ID_PREFIX);
    out.push_str(&escape_field(pf.model_id.as_str()));
    out.push('\n');
    out.push_str("ID\tLabel\tExplanation\tFallback\tRaw\n");
    for p in &pf.predictions {
        out.push_str(&escape_field(&p.instance_id));
        out.push('\t');
        out.push_str(p.label.canonical_text());
        out.push('\t');
        out.push_str(&escape_field(p.explanation.as_deref().unwrap_or("")));
        out.push('\t');
        out.push_str(if p.fallback_applied() { "1" } else { "0" });
        out.push('\t');
        out.push_str(&escape_field(&p.raw_output));
        out.push('\n');
    }
    out
}

pub fn write_predictions(pf: &PredictionFile, path: impl AsRef<Path>) -> Result<(), DataError> {
    write_atomic(path.as_ref(), render_predictions(pf).as_bytes())
}

/// Reads a prediction file. Without a `#model_id=` line the model id is the
/// file stem.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<PredictionFile, DataError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader
        .read_line(&mut first)
        .map_err(|e| DataError::io(path, e))?;
    let (model_id, header_line) = match first.strip_prefix(MODEL_ID_PREFIX) {
        Some(rest) => (unescape_field(rest.trim_end_matches(['\n', '\r'])), None),
        None => (
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "predictions".into()),
            Some(first),
        ),
    };
    let model_id = ModelId::new(model_id)
        .map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())))?;
    let mut rest = String::new();
    if let Some(h) = header_line {
        rest.push_str(&h);
    }
    std::io::Read::read_to_string(&mut reader, &mut rest).map_err(|e| DataError::io(path, e))?;
    parse_predictions(path, model_id, &rest)
}

fn parse_predictions(path: &Path, model_id: ModelId, body: &str) -> Result<PredictionFile, DataError> {
    let mut rdr = tsv_reader(body.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| DataError::Tsv {
            path: path.into(),
            source: e,
        })?
        .clone();
    let id_col = column_index(&headers, "ID", path)?;
    let label_col = column_index(&headers, "Label", path)?;
    let opt = |name: &str| headers.iter().position(|h| h.trim() == name);
    let expl_col = opt("Explanation");
    let fb_col = opt("Fallback");
    let raw_col = opt("Raw");

    let mut preds = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| DataError::Tsv {
            path: path.into(),
            source: e,
        })?;
        let row_err = |message: String| DataError::Row {
            path: path.into(),
            row,
            message,
        };
        let id = unescape_field(rec.get(id_col).ok_or_else(|| row_err("missing ID".into()))?);
        let label_raw = rec.get(label_col).ok_or_else(|| row_err("missing Label".into()))?;
        let label = parse_label(label_raw).map_err(|e| row_err(e.to_string()))?;
        let get = |c: Option<usize>| c.and_then(|c| rec.get(c)).map(unescape_field);
        let fallback = match get(fb_col).as_deref() {
            None | Some("") | Some("0") | Some("false") => false,
            Some("1") | Some("true") => true,
            Some(other) => return Err(row_err(format!("bad Fallback value {other:?}"))),
        };
        let raw = get(raw_col).unwrap_or_default();
        let p = if fallback {
            if label != EmotionLabel::Neutral {
                return Err(row_err("fallback rows must be labeled Neutral".into()));
            }
            Prediction::fallback(id.clone(), model_id.clone(), raw)
        } else {
            Prediction::labeled(id.clone(), label, model_id.clone(), raw)
        };
        let p = p.with_explanation(get(expl_col).unwrap_or_default());
        if !seen.insert(id.clone()) {
            return Err(DataError::DuplicateId {
                path: path.into(),
                id,
                row,
            });
        }
        preds.push(p);
    }
    Ok(PredictionFile {
        model_id,
        predictions: preds,
    })
}

/// Write to a temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| DataError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| DataError::io(path, e))?;
    tmp.persist(path).map_err(|e| DataError::io(path, e.error))?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub instances: u64,
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub fallbacks: u64,
    /// Non-fatal flags: off-menu adjudications, failed correction stages,
    /// unparseable binary answers.
    pub flags: u64,
}

/// One JSON record per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub strategy: String,
    pub model_id: String,
    pub backend_model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: u64,
    pub started: DateTime<Utc>,
    pub finished: DateTime<Utc>,
    pub counts: RunCounts,
    /// Strategy-specific settings and resolved config (never credentials).
    #[serde(default)]
    pub settings: serde_json::Value,
    #[serde(default)]
    pub prompt_checksum: Option<String>,
}

impl RunManifest {
    pub fn new(strategy: impl Into<String>, model_id: impl Into<String>, seed: u64) -> Self {
        let now = Utc::now();
        let strategy = strategy.into();
        RunManifest {
            run_id: format!("{}-{}-{seed}", strategy, now.format("%Y%m%dT%H%M%S%.3fZ")),
            strategy,
            model_id: model_id.into(),
            backend_model: String::new(),
            temperature: 0.0,
            max_tokens: 0,
            seed,
            started: now,
            finished: now,
            counts: RunCounts::default(),
            settings: serde_json::Value::Null,
            prompt_checksum: None,
        }
    }

    pub fn finish(&mut self) {
        self.finished = Utc::now();
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.counts.fallbacks > self.counts.instances {
            return Err(DataError::Invalid(format!(
                "manifest {}: fallbacks ({}) exceed instances ({})",
                self.run_id, self.counts.fallbacks, self.counts.instances
            )));
        }
        Ok(())
    }

    /// Writes `<dir>/<run_id>.manifest.json` and returns the path.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<PathBuf, DataError> {
        let path = dir.as_ref().join(format!("{}.manifest.json", self.run_id));
        self.write(&path)?;
        Ok(path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        self.validate()?;
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| DataError::Invalid(e.to_string()))?;
        write_atomic(path.as_ref(), json.as_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())))
    }
}
