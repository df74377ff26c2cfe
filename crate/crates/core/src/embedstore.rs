//! Labeled, domain-tagged embedding sets and their on-disk interchange format.
//!
//! A set is stored as a JSON manifest next to a raw row-major `f32`
//! little-endian payload:
//!
//! ```json
//! {
//!   "count": 2, "dim": 3, "dtype": "f32le", "domain": "B",
//!   "normalize": false, "payload": "gallery.f32",
//!   "labels": "gallery.labels.csv"
//! }
//! ```
//!
//! `labels` is either a relative path to a headerless `id,class_id[,class_name]`
//! CSV file or an inline array of `{"id", "class_id", "class_name"?}` objects.
//! All paths resolve relative to the manifest's directory.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::Scalar;

pub const DTYPE_F32LE: &str = "f32le";

/// Acquisition domain of a set (e.g. sketch = A, photo = B).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub fn other(self) -> Domain {
        match self {
            Domain::A => Domain::B,
            Domain::B => Domain::A,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::A => f.write_str("A"),
            Domain::B => f.write_str("B"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Label {
    pub class_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_name: Option<String>,
}

impl Label {
    pub fn new(class_id: u32) -> Self {
        Label {
            class_id,
            class_name: None,
        }
    }

    pub fn named(class_id: u32, name: impl Into<String>) -> Self {
        Label {
            class_id,
            class_name: Some(name.into()),
        }
    }
}

/// A `count x dim` matrix of feature vectors with one id and one class label
/// per row. Immutable once constructed.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet<T> {
    vectors: Array2<T>,
    ids: Vec<String>,
    labels: Vec<Label>,
    domain: Domain,
}

impl<T: Scalar> EmbeddingSet<T> {
    /// Builds a set, checking shape agreement, id uniqueness and finiteness.
    pub fn new(
        vectors: Array2<T>,
        ids: Vec<String>,
        labels: Vec<Label>,
        domain: Domain,
    ) -> Result<Self> {
        let (rows, dim) = vectors.dim();
        if dim == 0 {
            return Err(Error::ZeroDimension);
        }
        if ids.len() != rows {
            return Err(Error::IdCountMismatch {
                rows,
                ids: ids.len(),
            });
        }
        if labels.len() != rows {
            return Err(Error::LabelCountMismatch {
                rows,
                labels: labels.len(),
            });
        }
        let mut seen = HashSet::with_capacity(rows);
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        for (row, id) in vectors.outer_iter().zip(&ids) {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { id: id.clone() });
            }
        }
        Ok(EmbeddingSet {
            vectors,
            ids,
            labels,
            domain,
        })
    }

    pub fn vectors(&self) -> &Array2<T> {
        &self.vectors
    }

    pub fn row(&self, index: usize) -> ArrayView1<'_, T> {
        self.vectors.row(index)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn class_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.labels.iter().map(|l| l.class_id)
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// True when every row has Euclidean norm within `tol` of one.
    pub fn is_unit_norm(&self, tol: T) -> bool {
        self.vectors
            .outer_iter()
            .all(|row| (row.dot(&row).sqrt() - T::one()).abs() < tol)
    }

    /// Returns a copy with every row scaled to unit Euclidean norm.
    pub fn normalized(&self) -> Result<Self> {
        l2_normalize(self)
    }

    /// Converts the stored values to another scalar type.
    pub fn cast<U: Scalar>(&self) -> EmbeddingSet<U> {
        EmbeddingSet {
            vectors: self
                .vectors
                .mapv(|v| U::from_f64(v.to_f64_lossy()).unwrap_or_else(U::nan)),
            ids: self.ids.clone(),
            labels: self.labels.clone(),
            domain: self.domain,
        }
    }
}

/// Scales every row to unit norm.
///
/// Rows already within a few ulps of unit norm are left untouched so that the
/// operation is exactly idempotent.
pub fn l2_normalize<T: Scalar>(set: &EmbeddingSet<T>) -> Result<EmbeddingSet<T>> {
    let dim = set.dim();
    let band = T::epsilon() * T::from_usize_lossy(dim).sqrt() * T::lit(4.0);
    let mut vectors = set.vectors.clone();
    for (mut row, id) in vectors.axis_iter_mut(Axis(0)).zip(&set.ids) {
        let norm = row.dot(&row).sqrt();
        if norm == T::zero() {
            return Err(Error::ZeroNormRow { id: id.clone() });
        }
        if (norm - T::one()).abs() <= band {
            continue;
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(EmbeddingSet {
        vectors,
        ids: set.ids.clone(),
        labels: set.labels.clone(),
        domain: set.domain,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub id: String,
    pub class_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_name: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelsRef {
    Inline(Vec<LabelRecord>),
    File(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub count: usize,
    pub dim: usize,
    pub dtype: String,
    pub domain: Domain,
    #[serde(default)]
    pub normalize: bool,
    pub payload: String,
    pub labels: LabelsRef,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Manifest> {
        let text = read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// How [`save_embedding_set`] writes the labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LabelStorage {
    #[default]
    CsvFile,
    Inline,
}

/// Loads and validates a set from a manifest.
///
/// Rows are re-normalized only when the manifest sets `normalize: true`.
pub fn load_embedding_set<T: Scalar>(manifest_path: impl AsRef<Path>) -> Result<EmbeddingSet<T>> {
    let manifest_path = manifest_path.as_ref();
    let manifest = Manifest::read(manifest_path)?;
    if manifest.dtype != DTYPE_F32LE {
        return Err(Error::UnsupportedDtype(manifest.dtype));
    }
    if manifest.dim == 0 {
        return Err(Error::ZeroDimension);
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new(""));

    let payload_path = base.join(&manifest.payload);
    let bytes = fs::read(&payload_path).map_err(|source| Error::Io {
        path: payload_path.clone(),
        source,
    })?;
    let expected = (manifest.count as u64) * (manifest.dim as u64) * 4;
    if bytes.len() as u64 != expected {
        return Err(Error::PayloadSizeMismatch {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let values: Vec<T> = bytes
        .chunks_exact(4)
        .map(|c| {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            T::from_f32(v).unwrap_or_else(T::nan)
        })
        .collect();
    let vectors = Array2::from_shape_vec((manifest.count, manifest.dim), values)
        .expect("payload length checked against count x dim");

    let records = match &manifest.labels {
        LabelsRef::Inline(records) => records.clone(),
        LabelsRef::File(rel) => read_labels_csv(base.join(rel))?,
    };
    if records.len() != manifest.count {
        return Err(Error::LabelCountMismatch {
            rows: manifest.count,
            labels: records.len(),
        });
    }
    let (ids, labels) = split_records(records);
    let set = EmbeddingSet::new(vectors, ids, labels, manifest.domain)?;
    if manifest.normalize {
        l2_normalize(&set)
    } else {
        Ok(set)
    }
}

/// Writes `<stem>.json`, `<stem>.f32` and (for [`LabelStorage::CsvFile`])
/// `<stem>.labels.csv` into `dir`. Returns the manifest path.
pub fn save_embedding_set<T: Scalar>(
    set: &EmbeddingSet<T>,
    dir: impl AsRef<Path>,
    stem: &str,
    storage: LabelStorage,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;

    let payload_name = format!("{stem}.f32");
    let mut payload = Vec::with_capacity(set.len() * set.dim() * 4);
    for v in set.vectors.iter() {
        let v = v.to_f32().unwrap_or(f32::NAN);
        payload.extend_from_slice(&v.to_le_bytes());
    }

    let records = records_of(set);
    let labels = match storage {
        LabelStorage::Inline => LabelsRef::Inline(records),
        LabelStorage::CsvFile => {
            let name = format!("{stem}.labels.csv");
            write_atomic(&dir.join(&name), &labels_csv_bytes(&records)?)?;
            LabelsRef::File(name)
        }
    };
    write_atomic(&dir.join(&payload_name), &payload)?;

    let manifest = Manifest {
        count: set.len(),
        dim: set.dim(),
        dtype: DTYPE_F32LE.to_string(),
        domain: set.domain,
        normalize: false,
        payload: payload_name,
        labels,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    let manifest_path = dir.join(format!("{stem}.json"));
    write_atomic(&manifest_path, text.as_bytes())?;
    Ok(manifest_path)
}

/// Reads a headerless `id,class_id[,class_name]` file.
pub fn read_labels_csv(path: impl AsRef<Path>) -> Result<Vec<LabelRecord>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_labels_csv(&bytes)
}

pub fn parse_labels_csv(bytes: &[u8]) -> Result<Vec<LabelRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes);
    let mut out = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let line = line + 1;
        let record = record?;
        if record.len() < 2 || record.len() > 3 {
            return Err(Error::Labels {
                line,
                message: format!("expected 2 or 3 fields, found {}", record.len()),
            });
        }
        let class_id = record[1].trim().parse::<u32>().map_err(|e| Error::Labels {
            line,
            message: format!("bad class id {:?}: {e}", &record[1]),
        })?;
        out.push(LabelRecord {
            id: record[0].to_string(),
            class_id,
            class_name: record.get(2).map(str::to_string),
        });
    }
    Ok(out)
}

pub fn labels_csv_bytes(records: &[LabelRecord]) -> Result<Vec<u8>> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_writer(Vec::new());
    for r in records {
        let class_id = r.class_id.to_string();
        match &r.class_name {
            Some(name) => writer.write_record([r.id.as_str(), &class_id, name])?,
            None => writer.write_record([r.id.as_str(), &class_id])?,
        }
    }
    writer
        .into_inner()
        .map_err(|e| Error::Csv(e.into_error().into()))
}

/// Id and label of every row, in row order.
pub fn records_of<T>(set: &EmbeddingSet<T>) -> Vec<LabelRecord> {
    set.ids
        .iter()
        .zip(&set.labels)
        .map(|(id, l)| LabelRecord {
            id: id.clone(),
            class_id: l.class_id,
            class_name: l.class_name.clone(),
        })
        .collect()
}

fn split_records(records: Vec<LabelRecord>) -> (Vec<String>, Vec<Label>) {
    records
        .into_iter()
        .map(|r| {
            (
                r.id,
                Label {
                    class_id: r.class_id,
                    class_name: r.class_name,
                },
            )
        })
        .unzip()
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Train/test class partition of a zero-shot benchmark.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train_classes: BTreeSet<u32>,
    pub test_classes: BTreeSet<u32>,
}

impl SplitManifest {
    /// Rejects partitions whose train and test classes overlap.
    pub fn new(train_classes: BTreeSet<u32>, test_classes: BTreeSet<u32>) -> Result<Self> {
        let shared: Vec<_> = train_classes.intersection(&test_classes).collect();
        if !shared.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "classes {shared:?} are in both train and test"
            )));
        }
        Ok(SplitManifest {
            train_classes,
            test_classes,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassLeak {
    pub class_id: u32,
    pub in_gallery: bool,
    pub in_queries: bool,
}

impl fmt::Display for ClassLeak {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "class {} leaks from train", self.class_id)
    }
}

/// Classes seen at evaluation time that were also trained on. Empty means the
/// zero-shot contract holds.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ZeroShotReport {
    pub leaks: Vec<ClassLeak>,
}

impl ZeroShotReport {
    pub fn is_clean(&self) -> bool {
        self.leaks.is_empty()
    }

    pub fn messages(&self) -> Vec<String> {
        self.leaks.iter().map(ToString::to_string).collect()
    }
}

pub fn validate_zero_shot<T: Scalar>(
    gallery: &EmbeddingSet<T>,
    queries: &EmbeddingSet<T>,
    split: &SplitManifest,
) -> ZeroShotReport {
    let gallery_classes: BTreeSet<u32> = gallery.class_ids().collect();
    let query_classes: BTreeSet<u32> = queries.class_ids().collect();
    let leaks = gallery_classes
        .union(&query_classes)
        .filter(|c| split.train_classes.contains(c))
        .map(|&class_id| ClassLeak {
            class_id,
            in_gallery: gallery_classes.contains(&class_id),
            in_queries: query_classes.contains(&class_id),
        })
        .collect();
    ZeroShotReport { leaks }
}
