//! Exact cosine k-nearest-neighbour classification over sentence embeddings,
//! with k chosen by stratified cross-validation.
//!
//! Vectors are stored at unit L2 norm, so cosine similarity is a dot
//! product. Neighbours are ranked by similarity, then by ascending instance
//! id. A majority tie between labels goes to the tied label whose nearest
//! member ranks highest.

use std::fmt::Write as _;
use std::ops::RangeInclusive;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{escape_field, unescape_field, write_atomic, DataError};
use crate::eval::{evaluate_labels, EvalError};
use crate::gateway::{Gateway, GatewayError};
use crate::label::{parse_label, EmotionLabel};

#[derive(Debug, Error)]
pub enum KnnError {
    #[error("index is empty")]
    EmptyIndex,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("zero-length or zero-norm vector")]
    ZeroVector,
    #[error("k must be in 1..={max} (got {k})")]
    BadK { k: usize, max: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    pub model_id: String,
    pub truncated_from: Option<usize>,
}

fn unit(values: Vec<f64>) -> Result<Vec<f64>, KnnError> {
    let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
    if values.is_empty() || norm == 0.0 || !norm.is_finite() {
        return Err(KnnError::ZeroVector);
    }
    Ok(values.into_iter().map(|x| x / norm).collect())
}

impl EmbeddingVector {
    /// Normalizes `values` to unit length.
    pub fn new(values: Vec<f64>, model_id: impl Into<String>) -> Result<Self, KnnError> {
        Ok(EmbeddingVector {
            values: unit(values)?,
            model_id: model_id.into(),
            truncated_from: None,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Keeps the first `dim` coordinates and renormalizes.
    pub fn truncate(&self, dim: usize) -> Result<Self, KnnError> {
        if dim == 0 || dim > self.dim() {
            return Err(KnnError::DimensionMismatch(format!(
                "cannot truncate a {}-dim vector to {dim}",
                self.dim()
            )));
        }
        Ok(EmbeddingVector {
            values: unit(self.values[..dim].to_vec())?,
            model_id: self.model_id.clone(),
            truncated_from: Some(self.truncated_from.unwrap_or(self.dim())),
        })
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    /// Cosine similarity computed from scratch (norms included).
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        let na = self.values.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = other.values.iter().map(|x| x * x).sum::<f64>().sqrt();
        self.dot(other) / (na * nb)
    }
}

/// Fetches embeddings through the gateway, optionally truncating each to
/// `target_dim` coordinates.
pub fn embed_texts(
    gateway: &Gateway,
    texts: &[String],
    target_dim: Option<usize>,
) -> Result<Vec<EmbeddingVector>, KnnError> {
    if texts.is_empty() {
        return Err(KnnError::Invalid("no texts to embed".into()));
    }
    let raw = gateway.embed(texts)?;
    let model = gateway.embedding_model().to_string();
    raw.into_iter()
        .map(|v| {
            let provider_dim = v.len();
            match target_dim {
                Some(d) if d == 0 || d > provider_dim => Err(KnnError::DimensionMismatch(format!(
                    "target dim {d} exceeds provider dim {provider_dim}"
                ))),
                // truncate the raw coordinates so only one normalization happens
                Some(d) => {
                    let mut e = EmbeddingVector::new(v[..d].to_vec(), model.clone())?;
                    e.truncated_from = Some(provider_dim);
                    Ok(e)
                }
                None => EmbeddingVector::new(v, model.clone()),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub vector: EmbeddingVector,
    pub label: EmotionLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor<'a> {
    pub id: &'a str,
    pub label: EmotionLabel,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    entries: Vec<IndexEntry>,
    dim: usize,
}

impl EmbeddingIndex {
    /// All vectors must share dimension and model id.
    pub fn new(entries: Vec<IndexEntry>) -> Result<Self, KnnError> {
        let Some(first) = entries.first() else {
            return Err(KnnError::EmptyIndex);
        };
        let dim = first.vector.dim();
        let model = first.vector.model_id.clone();
        for e in &entries {
            if e.vector.dim() != dim {
                return Err(KnnError::DimensionMismatch(format!(
                    "entry {:?} has dim {}, expected {dim}",
                    e.id,
                    e.vector.dim()
                )));
            }
            if e.vector.model_id != model {
                return Err(KnnError::Invalid(format!(
                    "entry {:?} comes from model {:?}, expected {model:?}",
                    e.id, e.vector.model_id
                )));
            }
        }
        Ok(EmbeddingIndex { entries, dim })
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn model_id(&self) -> &str {
        &self.entries[0].vector.model_id
    }

    fn subset(&self, idx: &[usize]) -> EmbeddingIndex {
        EmbeddingIndex {
            entries: idx.iter().map(|&i| self.entries[i].clone()).collect(),
            dim: self.dim,
        }
    }

    /// The `k` most similar entries, nearest first.
    pub fn neighbors(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<Neighbor<'_>>, KnnError> {
        if self.entries.is_empty() {
            return Err(KnnError::EmptyIndex);
        }
        if query.dim() != self.dim {
            return Err(KnnError::DimensionMismatch(format!(
                "query dim {} vs index dim {}",
                query.dim(),
                self.dim
            )));
        }
        if k == 0 || k > self.entries.len() {
            return Err(KnnError::BadK {
                k,
                max: self.entries.len(),
            });
        }
        let mut scored: Vec<Neighbor<'_>> = self
            .entries
            .iter()
            .map(|e| Neighbor {
                id: &e.id,
                label: e.label,
                similarity: query.dot(&e.vector),
            })
            .collect();
        scored.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then_with(|| a.id.cmp(b.id)));
        scored.truncate(k);
        Ok(scored)
    }
}

/// Majority label among ranked neighbours; label ties go to the tied label
/// that appears first in rank order.
pub fn vote_ranked(ranked: &[Neighbor<'_>]) -> EmotionLabel {
    let mut counts = [0usize; 6];
    for n in ranked {
        counts[n.label.index()] += 1;
    }
    let top = *counts.iter().max().expect("six counters");
    ranked
        .iter()
        .find(|n| counts[n.label.index()] == top)
        .map(|n| n.label)
        .expect("non-empty neighbour list")
}

pub fn knn_classify(query: &EmbeddingVector, index: &EmbeddingIndex, k: usize) -> Result<EmotionLabel, KnnError> {
    Ok(vote_ranked(&index.neighbors(query, k)?))
}

/// Fold number for each item. Items are grouped by label in canonical
/// order, each group shuffled, then dealt round-robin across folds with
/// one running counter.
pub fn stratified_folds(labels: &[EmotionLabel], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; labels.len()];
    let mut counter = 0;
    for l in EmotionLabel::ALL {
        let mut group: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == l).collect();
        group.shuffle(&mut rng);
        for i in group {
            assignment[i] = counter % folds;
            counter += 1;
        }
    }
    assignment
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValReport {
    /// `(k, mean macro-F1 over folds)` in ascending k.
    pub per_k: Vec<(usize, f64)>,
    pub chosen_k: usize,
    pub folds: usize,
    pub seed: u64,
}

impl CrossValReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("{}-fold cross-validation (seed {})\n{:>4} {:>10}\n", self.folds, self.seed, "k", "macro-F1");
        for (k, f1) in &self.per_k {
            let mark = if *k == self.chosen_k { " <" } else { "" };
            let _ = writeln!(out, "{k:>4} {f1:>10.4}{mark}");
        }
        let _ = writeln!(out, "chosen k = {}", self.chosen_k);
        out
    }
}

/// Mean macro-F1 over stratified folds for every k in `k_range`; the
/// smallest k reaching the maximum is chosen.
pub fn select_k(
    train: &EmbeddingIndex,
    k_range: RangeInclusive<usize>,
    folds: usize,
    seed: u64,
) -> Result<CrossValReport, KnnError> {
    if folds < 2 || folds > train.len() {
        return Err(KnnError::Invalid(format!(
            "folds must be in 2..={} (got {folds})",
            train.len()
        )));
    }
    let (k_min, k_max) = (*k_range.start(), *k_range.end());
    let labels: Vec<EmotionLabel> = train.entries.iter().map(|e| e.label).collect();
    let assignment = stratified_folds(&labels, folds, seed);
    let min_train = (0..folds)
        .map(|f| assignment.iter().filter(|&&a| a != f).count())
        .min()
        .unwrap_or(0);
    if k_min == 0 || k_min > k_max || k_max > min_train {
        return Err(KnnError::BadK {
            k: if k_min == 0 { 0 } else { k_max },
            max: min_train,
        });
    }

    let mut sums = vec![0.0; k_max - k_min + 1];
    for f in 0..folds {
        let (test_idx, train_idx): (Vec<usize>, Vec<usize>) = (0..train.len()).partition(|&i| assignment[i] == f);
        let fold_train = train.subset(&train_idx);
        let ranked: Vec<Vec<Neighbor<'_>>> = test_idx
            .iter()
            .map(|&i| fold_train.neighbors(&train.entries[i].vector, k_max))
            .collect::<Result<_, _>>()?;
        let gold: Vec<EmotionLabel> = test_idx.iter().map(|&i| labels[i]).collect();
        for (slot, k) in (k_min..=k_max).enumerate() {
            let pred: Vec<EmotionLabel> = ranked.iter().map(|r| vote_ranked(&r[..k])).collect();
            sums[slot] += evaluate_labels(&gold, &pred)?.macro_f1;
        }
    }
    let per_k: Vec<(usize, f64)> = (k_min..=k_max)
        .zip(sums)
        .map(|(k, s)| (k, s / folds as f64))
        .collect();
    let mut chosen = per_k[0];
    for &(k, f1) in &per_k[1..] {
        if f1 > chosen.1 {
            chosen = (k, f1);
        }
    }
    Ok(CrossValReport {
        per_k,
        chosen_k: chosen.0,
        folds,
        seed,
    })
}

/// One row of an embedding table file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub id: String,
    pub label: Option<EmotionLabel>,
    pub vector: EmbeddingVector,
}

/// Builds an index from rows that all carry labels.
pub fn index_from_rows(rows: Vec<EmbeddingRow>) -> Result<EmbeddingIndex, KnnError> {
    let entries = rows
        .into_iter()
        .map(|r| {
            let label = r
                .label
                .ok_or_else(|| KnnError::Invalid(format!("row {:?} has no label", r.id)))?;
            Ok(IndexEntry {
                id: r.id,
                vector: r.vector,
                label,
            })
        })
        .collect::<Result<Vec<_>, KnnError>>()?;
    EmbeddingIndex::new(entries)
}

/// Embedding table TSV:
///
/// ```text
/// #model_id=<id>\tdim=<n>[\ttruncated_from=<m>]
/// ID\tLabel\tEmbedding
/// <id>\t<label or empty>\t<comma-separated floats>
/// ```
pub fn render_embeddings(rows: &[EmbeddingRow]) -> Result<String, KnnError> {
    let first = rows.first().ok_or(KnnError::EmptyIndex)?;
    let mut out = format!(
        "#model_id={}\tdim={}",
        escape_field(&first.vector.model_id),
        first.vector.dim()
    );
    if let Some(t) = first.vector.truncated_from {
        let _ = write!(out, "\ttruncated_from={t}");
    }
    out.push_str("\nID\tLabel\tEmbedding\n");
    for r in rows {
        if r.vector.dim() != first.vector.dim() || r.vector.model_id != first.vector.model_id {
            return Err(KnnError::DimensionMismatch(format!("row {:?} differs from the first row", r.id)));
        }
        out.push_str(&escape_field(&r.id));
        out.push('\t');
        out.push_str(r.label.map(|l| l.canonical_text()).unwrap_or(""));
        out.push('\t');
        let nums: Vec<String> = r.vector.values().iter().map(|x| x.to_string()).collect();
        out.push_str(&nums.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_embeddings(rows: &[EmbeddingRow], path: impl AsRef<Path>) -> Result<(), KnnError> {
    write_atomic(path.as_ref(), render_embeddings(rows)?.as_bytes())?;
    Ok(())
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<EmbeddingRow>, KnnError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.into(),
        source: e,
    })?;
    let bad = |row: usize, message: String| {
        KnnError::Data(DataError::Row {
            path: path.into(),
            row,
            message,
        })
    };
    let mut lines = text.lines();
    let meta = lines
        .next()
        .and_then(|l| l.strip_prefix('#'))
        .ok_or_else(|| bad(0, "missing #model_id line".into()))?;
    let mut model = None;
    let mut dim = None;
    let mut truncated_from = None;
    for kv in meta.split('\t') {
        match kv.split_once('=') {
            Some(("model_id", v)) => model = Some(unescape_field(v)),
            Some(("dim", v)) => dim = v.parse::<usize>().ok(),
            Some(("truncated_from", v)) => truncated_from = v.parse::<usize>().ok(),
            _ => {}
        }
    }
    let model = model.ok_or_else(|| bad(0, "missing model_id".into()))?;
    let dim = dim.ok_or_else(|| bad(0, "missing dim".into()))?;
    if lines.next().map(str::trim_end) != Some("ID\tLabel\tEmbedding") {
        return Err(bad(0, "expected header ID\\tLabel\\tEmbedding".into()));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        let mut parts = line.split('\t');
        let (Some(id), Some(label), Some(nums), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad(row, "expected 3 tab-separated fields".into()));
        };
        let label = if label.is_empty() {
            None
        } else {
            Some(parse_label(label).map_err(|e| bad(row, e.to_string()))?)
        };
        let values = nums
            .split(',')
            .map(|x| x.parse::<f64>().map_err(|e| bad(row, format!("bad float {x:?}: {e}"))))
            .collect::<Result<Vec<f64>, _>>()?;
        if values.len() != dim {
            return Err(bad(row, format!("expected {dim} values, got {}", values.len())));
        }
        let mut vector = EmbeddingVector::new(values, model.clone())?;
        vector.truncated_from = truncated_from;
        rows.push(EmbeddingRow {
            id: unescape_field(id),
            label,
            vector,
        });
    }
    Ok(rows)
}
