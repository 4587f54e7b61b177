//! Shared data model: samples, datasets, populations and embedding matrices.
//!
//! Datasets on disk are JSON Lines, one `{"text": ..., "label": ...}` object
//! per line, `label` optional.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of maximal runs of non-whitespace characters in `text`.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// One text record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "SampleRecord", into = "SampleRecord")]
pub struct Sample {
    text: String,
    label: Option<String>,
    word_count: usize,
    origin_iteration: usize,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default)]
    origin_iteration: usize,
}

impl From<SampleRecord> for Sample {
    fn from(r: SampleRecord) -> Self {
        Sample::new(r.text, r.label).with_origin(r.origin_iteration)
    }
}

impl From<Sample> for SampleRecord {
    fn from(s: Sample) -> Self {
        SampleRecord {
            text: s.text,
            label: s.label,
            origin_iteration: s.origin_iteration,
        }
    }
}

impl Sample {
    pub fn new(text: impl Into<String>, label: Option<String>) -> Self {
        let text = text.into();
        let word_count = word_count(&text);
        Sample {
            text,
            label,
            word_count,
            origin_iteration: 0,
        }
    }

    pub fn with_origin(mut self, iteration: usize) -> Self {
        self.origin_iteration = iteration;
        self
    }

    /// Replaces the text, keeping label and origin; the word count follows.
    pub fn with_text(&self, text: impl Into<String>) -> Self {
        let mut s = Sample::new(text, self.label.clone());
        s.origin_iteration = self.origin_iteration;
        s
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    pub fn word_count(&self) -> usize {
        self.word_count
    }

    pub fn origin_iteration(&self) -> usize {
        self.origin_iteration
    }
}

/// Dense row-major matrix of embeddings, one row per text.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: Vec<f64>,
    rows: usize,
    dim: usize,
    normalized: bool,
}

impl EmbeddingMatrix {
    /// Builds a matrix from rows; all rows must share one dimension and be finite.
    pub fn from_rows(rows: Vec<Vec<f64>>, normalized: bool) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        let n = rows.len();
        let mut data = Vec::with_capacity(n * dim);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != dim {
                return Err(Error::domain(format!(
                    "row {i} has dimension {} but expected {dim}",
                    row.len()
                )));
            }
            data.extend(row);
        }
        Self::from_flat(data, n, dim, normalized)
    }

    pub fn from_flat(data: Vec<f64>, rows: usize, dim: usize, normalized: bool) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::domain(format!(
                "flat buffer of length {} does not match {rows}x{dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!(
                "non-finite value in embedding row {}",
                pos / dim.max(1)
            )));
        }
        let m = EmbeddingMatrix {
            data,
            rows,
            dim,
            normalized,
        };
        if normalized {
            for i in 0..rows {
                let norm = l2_norm(m.row(i));
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::domain(format!(
                        "row {i} has norm {norm}, expected unit norm"
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1)).take(self.rows)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// New matrix made of the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        EmbeddingMatrix {
            data,
            rows: indices.len(),
            dim: self.dim,
            normalized: self.normalized,
        }
    }

    /// Stacks matrices vertically. All parts must share the dimension.
    pub fn vstack(parts: &[&EmbeddingMatrix]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::domain("vstack of zero matrices"))?;
        let dim = first.dim;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.dim != dim {
                return Err(Error::domain("vstack dimension mismatch"));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(EmbeddingMatrix {
            data,
            rows,
            dim,
            normalized: parts.iter().all(|p| p.normalized),
        })
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Squared Euclidean distance.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// An ordered synthetic sample set with optional aligned embeddings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Population {
    samples: Vec<Sample>,
    embeddings: Option<EmbeddingMatrix>,
}

impl Population {
    pub fn new(samples: Vec<Sample>) -> Self {
        Population {
            samples,
            embeddings: None,
        }
    }

    pub fn with_embeddings(samples: Vec<Sample>, embeddings: EmbeddingMatrix) -> Result<Self> {
        if embeddings.rows() != samples.len() {
            return Err(Error::domain(format!(
                "{} embedding rows for {} samples",
                embeddings.rows(),
                samples.len()
            )));
        }
        Ok(Population {
            samples,
            embeddings: Some(embeddings),
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }

    pub fn embeddings(&self) -> Option<&EmbeddingMatrix> {
        self.embeddings.as_ref()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn texts(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.text().to_string()).collect()
    }

    /// Picks samples (and their embedding rows) by index, in the given order.
    /// Indices may repeat.
    pub fn select(&self, indices: &[usize]) -> Population {
        Population {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            embeddings: self.embeddings.as_ref().map(|e| e.select_rows(indices)),
        }
    }

    /// Keeps samples matching `keep`, preserving order and embedding alignment.
    pub fn filter(&self, keep: impl Fn(&Sample) -> bool) -> Population {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(&self.samples[i])).collect();
        self.select(&idx)
    }

    /// Concatenates populations, dropping embeddings.
    pub fn concat(parts: Vec<Population>) -> Population {
        Population::new(parts.into_iter().flat_map(|p| p.samples).collect())
    }
}

/// The private corpus. Reads of the records are counted so tests can audit
/// how often the pipeline touches private data.
#[derive(Debug)]
pub struct PrivateDataset {
    samples: Vec<Sample>,
    label_set: Vec<String>,
    reads: AtomicUsize,
}

impl Clone for PrivateDataset {
    fn clone(&self) -> Self {
        PrivateDataset {
            samples: self.samples.clone(),
            label_set: self.label_set.clone(),
            reads: AtomicUsize::new(0),
        }
    }
}

impl PrivateDataset {
    /// Label set is taken in order of first appearance.
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut label_set = Vec::new();
        for l in samples.iter().filter_map(Sample::label) {
            if seen.insert(l.to_string()) {
                label_set.push(l.to_string());
            }
        }
        Self::with_labels(samples, label_set)
    }

    pub fn with_labels(samples: Vec<Sample>, label_set: Vec<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::domain("private dataset must contain at least one sample"));
        }
        let distinct: BTreeSet<&String> = label_set.iter().collect();
        if distinct.len() != label_set.len() {
            return Err(Error::domain("label set contains duplicates"));
        }
        for (i, s) in samples.iter().enumerate() {
            if let Some(l) = s.label() {
                if !label_set.iter().any(|x| x == l) {
                    return Err(Error::domain(format!(
                        "sample {i} has label {l:?} outside the label set"
                    )));
                }
            }
        }
        Ok(PrivateDataset {
            samples,
            label_set,
            reads: AtomicUsize::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn label_set(&self) -> &[String] {
        &self.label_set
    }

    /// Number of private records per label, in label-set order.
    pub fn label_counts(&self) -> Vec<usize> {
        self.label_set
            .iter()
            .map(|l| self.samples.iter().filter(|s| s.label() == Some(l)).count())
            .collect()
    }

    /// Access to the private records. Every call is counted.
    pub fn samples(&self) -> &[Sample] {
        self.reads.fetch_add(1, Ordering::SeqCst);
        &self.samples
    }

    pub fn read_count(&self) -> usize {
        self.reads.load(Ordering::SeqCst)
    }

    /// Splits by label (label-set order). Labels are public metadata, so the
    /// split does not count as a record read.
    pub fn partition(&self) -> Vec<(String, PrivateDataset)> {
        self.label_set
            .iter()
            .filter_map(|l| {
                let part: Vec<Sample> = self
                    .samples
                    .iter()
                    .filter(|s| s.label() == Some(l.as_str()))
                    .cloned()
                    .collect();
                PrivateDataset::with_labels(part, vec![l.clone()])
                    .ok()
                    .map(|d| (l.clone(), d))
            })
            .collect()
    }
}

/// Reads a JSON Lines dataset. Blank lines are skipped.
pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(Sample::new(rec.text, rec.label));
    }
    Ok(out)
}

/// Writes samples as JSON Lines with `text` and, when present, `label`.
pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut buf = Vec::new();
    for s in samples {
        let rec = JsonlRecord {
            text: s.text().to_string(),
            label: s.label().map(str::to_string),
        };
        serde_json::to_writer(&mut buf, &rec)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlRecord {
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}
