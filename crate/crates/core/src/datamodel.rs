//! Labeled feature-vector sequences, per-feature standardization, stratified
//! splitting, and the manifest/CSV file formats.
//!
//! A manifest is a JSON document
//!
//! ```json
//! { "classes": ["a", "b"], "sequences": [ { "path": "s0.csv", "label": "a" } ] }
//! ```
//!
//! where each `path` (relative to the manifest's directory) is a headerless CSV
//! of `T` rows by `D` columns.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DbmError, Result};

/// Smallest per-feature scale a [`Standardizer`] will divide by.
pub const SCALE_FLOOR: f64 = 1e-8;

/// Row-major `T x D` matrix of observation vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frames {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Frames {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(DbmError::Invalid(format!("frames must be at least 1x1, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(DbmError::Invalid(format!("frame buffer has {} values, expected {}", data.len(), rows * cols)));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(DbmError::Invalid(format!(
                "non-finite value at row {}, column {}",
                pos / cols + 1,
                pos % cols + 1
            )));
        }
        Ok(Frames { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(DbmError::Invalid("ragged rows".into()));
        }
        Frames::new(rows.len(), cols, rows.concat())
    }

    /// Number of frames `T`.
    #[inline]
    pub fn len(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    /// Feature dimension `D`.
    #[inline]
    pub fn dim(&self) -> usize {
        self.cols
    }

    /// Observation vector at zero-based frame `t`.
    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, t: usize, i: usize) -> f64 {
        self.data[t * self.cols + i]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub frames: Frames,
    pub label: String,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceDataset {
    pub sequences: Vec<Sequence>,
    pub classes: Vec<String>,
    pub dim: usize,
}

impl SequenceDataset {
    /// Builds a dataset, checking that labels are known and dimensions agree.
    pub fn new(sequences: Vec<Sequence>, classes: Vec<String>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(DbmError::EmptyDataset);
        }
        if classes.is_empty() {
            return Err(DbmError::Invalid("class list is empty".into()));
        }
        for (i, c) in classes.iter().enumerate() {
            if classes[..i].contains(c) {
                return Err(DbmError::Invalid(format!("duplicate class label {c:?}")));
            }
        }
        let dim = sequences[0].frames.dim();
        for (k, s) in sequences.iter().enumerate() {
            if s.frames.dim() != dim {
                return Err(DbmError::Invalid(format!(
                    "sequence {k} has dimension {}, expected {dim}",
                    s.frames.dim()
                )));
            }
            if !classes.contains(&s.label) {
                return Err(DbmError::Invalid(format!("sequence {k} has unknown label {:?}", s.label)));
            }
        }
        Ok(SequenceDataset { sequences, classes, dim })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    pub fn total_frames(&self) -> usize {
        self.sequences.iter().map(Sequence::len).sum()
    }

    /// Sequences of one class, in dataset order.
    pub fn of_class<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a Sequence> + 'a {
        self.sequences.iter().filter(move |s| s.label == label)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    classes: Vec<String>,
    sequences: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    path: PathBuf,
    label: String,
}

pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<SequenceDataset> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| DbmError::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DbmError::json(manifest_path, e))?;
    if manifest.sequences.is_empty() {
        return Err(DbmError::EmptyDataset);
    }
    if manifest.classes.is_empty() {
        return Err(DbmError::Invalid(format!("{}: class list is empty", manifest_path.display())));
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut dim: Option<usize> = None;
    let mut sequences = Vec::with_capacity(manifest.sequences.len());
    for entry in &manifest.sequences {
        let path = base.join(&entry.path);
        if !manifest.classes.contains(&entry.label) {
            return Err(DbmError::UnknownLabel { path, label: entry.label.clone() });
        }
        let frames = read_frames_csv(&path, dim)?;
        dim.get_or_insert(frames.dim());
        sequences.push(Sequence { frames, label: entry.label.clone() });
    }
    SequenceDataset::new(sequences, manifest.classes)
}

/// Reads one headerless CSV sequence file. When `expected_dim` is given, every
/// row must have exactly that many columns.
pub fn read_frames_csv(path: &Path, expected_dim: Option<usize>) -> Result<Frames> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, 0, e))?;

    let mut dim = expected_dim;
    let mut data = Vec::new();
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| csv_error(path, row, e))?;
        let expected = *dim.get_or_insert(record.len());
        if record.len() != expected {
            return Err(DbmError::DimensionMismatch { path: path.to_path_buf(), expected, found: record.len() });
        }
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| DbmError::Parse {
                path: path.to_path_buf(),
                row,
                message: format!("column {}: cannot parse {field:?} as a number", c + 1),
            })?;
            if !v.is_finite() {
                return Err(DbmError::NonFinite { path: path.to_path_buf(), row, column: c + 1 });
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(DbmError::Parse { path: path.to_path_buf(), row: 0, message: "sequence file has no rows".into() });
    }
    Frames::new(rows, dim.unwrap_or(0), data)
}

fn csv_error(path: &Path, row: usize, e: csv::Error) -> DbmError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => DbmError::io(path, source),
        other => DbmError::Parse { path: path.to_path_buf(), row, message: format!("{other:?}") },
    }
}

/// Writes frames as CSV using the shortest decimal text that round-trips each
/// value exactly.
pub fn write_frames_csv(path: &Path, frames: &Frames) -> Result<()> {
    let mut out = String::with_capacity(frames.as_slice().len() * 20);
    for row in frames.rows() {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&format!("{v:?}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| DbmError::io(path, e))
}

/// Saves `dataset` as `<dir>/<name>.json` plus one CSV per sequence and
/// returns the manifest path. Existing CSVs with the same names are overwritten.
pub fn save_dataset(dataset: &SequenceDataset, dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| DbmError::io(dir, e))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for (k, seq) in dataset.sequences.iter().enumerate() {
        let file = format!("{name}_{k:05}.csv");
        write_frames_csv(&dir.join(&file), &seq.frames)?;
        entries.push(ManifestEntry { path: PathBuf::from(file), label: seq.label.clone() });
    }
    let manifest = Manifest { classes: dataset.classes.clone(), sequences: entries };
    let path = dir.join(format!("{name}.json"));
    crate::io::write_json(&path, &manifest)?;
    Ok(path)
}

/// Per-feature affine map to pooled zero mean and unit (population) variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer { mean: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, frames: &Frames) -> Frames {
        let d = frames.dim();
        let data =
            frames.as_slice().iter().enumerate().map(|(k, &v)| (v - self.mean[k % d]) / self.scale[k % d]).collect();
        Frames { rows: frames.rows, cols: d, data }
    }

    pub fn inverse(&self, frames: &Frames) -> Frames {
        let d = frames.dim();
        let data =
            frames.as_slice().iter().enumerate().map(|(k, &v)| v * self.scale[k % d] + self.mean[k % d]).collect();
        Frames { rows: frames.rows, cols: d, data }
    }
}

pub fn fit_standardizer(dataset: &SequenceDataset) -> Result<Standardizer> {
    if dataset.is_empty() {
        return Err(DbmError::EmptyDataset);
    }
    let d = dataset.dim;
    let n = dataset.total_frames() as f64;
    let mut mean = vec![0.0; d];
    for seq in &dataset.sequences {
        for row in seq.frames.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for seq in &dataset.sequences {
        for row in seq.frames.rows() {
            for i in 0..d {
                let c = row[i] - mean[i];
                var[i] += c * c;
            }
        }
    }
    let scale = var
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let s = (v / n).sqrt();
            if s < SCALE_FLOOR {
                warn!("feature {i} is (nearly) constant; scale floored at {SCALE_FLOOR}");
                SCALE_FLOOR
            } else {
                s
            }
        })
        .collect();
    Ok(Standardizer { mean, scale })
}

pub fn apply_standardizer(dataset: &SequenceDataset, s: &Standardizer) -> Result<SequenceDataset> {
    if s.dim() != dataset.dim {
        return Err(DbmError::Invalid(format!("standardizer has dimension {}, dataset has {}", s.dim(), dataset.dim)));
    }
    Ok(SequenceDataset {
        sequences: dataset
            .sequences
            .iter()
            .map(|seq| Sequence { frames: s.transform(&seq.frames), label: seq.label.clone() })
            .collect(),
        classes: dataset.classes.clone(),
        dim: dataset.dim,
    })
}

/// Stratified train/test split. Within each class, `round(test_fraction * n)`
/// sequences (at least one, at most `n - 1`) go to the test side; the choice is
/// a seeded shuffle. Both halves keep the original dataset order.
pub fn split(dataset: &SequenceDataset, test_fraction: f64, seed: u64) -> Result<(SequenceDataset, SequenceDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DbmError::Invalid(format!("test fraction must lie in (0, 1), got {test_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_test = vec![false; dataset.len()];
    for class in &dataset.classes {
        let mut members: Vec<usize> =
            dataset.sequences.iter().enumerate().filter(|(_, s)| &s.label == class).map(|(k, _)| k).collect();
        let n = members.len();
        if n < 2 {
            return Err(DbmError::Invalid(format!("class {class:?} has {n} sequence(s); splitting needs at least 2")));
        }
        let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
        members.shuffle(&mut rng);
        for &k in &members[..n_test] {
            is_test[k] = true;
        }
    }
    let pick = |want: bool| -> Vec<Sequence> {
        dataset.sequences.iter().zip(&is_test).filter(|(_, &t)| t == want).map(|(s, _)| s.clone()).collect()
    };
    Ok((
        SequenceDataset::new(pick(false), dataset.classes.clone())?,
        SequenceDataset::new(pick(true), dataset.classes.clone())?,
    ))
}
