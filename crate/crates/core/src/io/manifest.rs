//! Dataset manifests: class list with base/new tags, fold structure and
//! precomputed audio embeddings.
//!
//! Embeddings are stored inline as number arrays, or in a binary sidecar named
//! by `embeddings_file` (relative to the manifest). Sidecar layout, all
//! little-endian:
//!
//! ```text
//! u64 rows | u64 dim | rows*dim f64 values, row-major
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result, Violation};
use crate::prompting::{ClassSet, Split};
use crate::Vector;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub embedding: Vector,
    pub label: usize,
}

/// A validated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: ClassSet,
    pub dim: usize,
    pub folds: Vec<Fold>,
    pub samples: Vec<Sample>,
    /// Encoder the class-name side of this dataset is meant to be used with.
    pub encoder: Option<EncoderConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassEntry {
    name: String,
    split: Split,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleEntry {
    label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDocument {
    name: String,
    dim: usize,
    classes: Vec<ClassEntry>,
    folds: Vec<Fold>,
    samples: Vec<SampleEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embeddings_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    encoder: Option<EncoderConfig>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn fold(&self, f: usize) -> Result<&Fold> {
        self.folds
            .get(f)
            .ok_or_else(|| Error::Config(format!("fold {f} out of range; manifest has {} folds", self.folds.len())))
    }

    /// Indices from `indices` whose label has the given split.
    pub fn filter_split(&self, indices: &[usize], split: Split) -> Vec<usize> {
        indices.iter().copied().filter(|&i| self.classes.split(self.samples[i].label) == split).collect()
    }

    /// Same data with every class tagged base (cross-dataset training).
    pub fn with_all_base(&self) -> Self {
        Self { classes: self.classes.with_all_base(), ..self.clone() }
    }

    /// Runs the same checks as loading on an in-memory manifest.
    pub fn validated(self) -> Result<Self> {
        let doc = self.document(true);
        validate(doc, None)
    }

    /// Parses and validates a manifest document. `base_dir` resolves a
    /// relative sidecar path.
    pub fn from_json(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let doc: ManifestDocument = serde_json::from_str(text).map_err(|e| Error::Schema {
            doc: "manifest".into(),
            violations: vec![Violation { pointer: String::new(), message: e.to_string() }],
        })?;
        let sidecar = match &doc.embeddings_file {
            Some(f) => {
                let path = base_dir.map_or_else(|| PathBuf::from(f), |d| d.join(f));
                Some(read_sidecar(&path)?)
            }
            None => None,
        };
        validate(doc, sidecar)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path.parent())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.document(true))?)
    }

    fn document(&self, inline: bool) -> ManifestDocument {
        ManifestDocument {
            name: self.name.clone(),
            dim: self.dim,
            classes: self
                .classes
                .names()
                .iter()
                .zip(self.classes.splits())
                .map(|(n, &s)| ClassEntry { name: n.clone(), split: s })
                .collect(),
            folds: self.folds.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| SampleEntry { label: s.label, embedding: inline.then(|| s.embedding.as_slice().to_vec()) })
                .collect(),
            embeddings_file: None,
            encoder: self.encoder.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    /// Writes the manifest with embeddings moved to a binary sidecar next to it.
    pub fn save_with_sidecar(&self, path: impl AsRef<Path>, sidecar_name: &str) -> Result<()> {
        let path = path.as_ref();
        let dir = path.parent().unwrap_or(Path::new("."));
        let rows: Vec<&[f64]> = self.samples.iter().map(|s| s.embedding.as_slice()).collect();
        write_sidecar(&dir.join(sidecar_name), self.dim, &rows)?;
        let mut doc = self.document(false);
        doc.embeddings_file = Some(sidecar_name.to_string());
        std::fs::write(path, serde_json::to_string_pretty(&doc)? + "\n").map_err(|e| Error::io(path, e))
    }
}

fn validate(doc: ManifestDocument, sidecar: Option<(usize, Vec<Vec<f64>>)>) -> Result<DatasetManifest> {
    let mut v = Vec::new();
    let mut push = |pointer: String, message: String| v.push(Violation { pointer, message });
    if doc.name.trim().is_empty() {
        push("/name".into(), "must be non-empty".into());
    }
    if doc.dim == 0 {
        push("/dim".into(), "must be positive".into());
    }
    if doc.classes.is_empty() {
        push("/classes".into(), "must list at least one class".into());
    }
    let mut seen = HashSet::new();
    for (i, c) in doc.classes.iter().enumerate() {
        let key = c.name.trim().to_lowercase();
        if key.is_empty() {
            push(format!("/classes/{i}/name"), "must be non-empty".into());
        } else if !seen.insert(key) {
            push(format!("/classes/{i}/name"), format!("duplicate class name '{}'", c.name));
        }
    }
    let k = doc.classes.len();
    if let Some((dim, rows)) = &sidecar {
        if *dim != doc.dim {
            push("/embeddings_file".into(), format!("sidecar dimension {dim} does not match dim {}", doc.dim));
        }
        if rows.len() != doc.samples.len() {
            push("/embeddings_file".into(), format!("sidecar has {} rows for {} samples", rows.len(), doc.samples.len()));
        }
    }
    let mut embeddings = Vec::with_capacity(doc.samples.len());
    for (i, s) in doc.samples.iter().enumerate() {
        if s.label >= k {
            push(format!("/samples/{i}/label"), format!("label {} out of range for {k} classes", s.label));
        }
        let e = match (&s.embedding, &sidecar) {
            (Some(e), None) => Some(e.clone()),
            (None, Some((_, rows))) => rows.get(i).cloned(),
            (Some(_), Some(_)) => {
                push(format!("/samples/{i}/embedding"), "inline embedding conflicts with embeddings_file".into());
                None
            }
            (None, None) => {
                push(format!("/samples/{i}/embedding"), "missing".into());
                None
            }
        };
        if let Some(e) = &e {
            if e.len() != doc.dim {
                push(format!("/samples/{i}/embedding"), format!("length {} does not match dim {}", e.len(), doc.dim));
            } else if e.iter().any(|x| !x.is_finite()) {
                push(format!("/samples/{i}/embedding"), "contains a non-finite value".into());
            } else if e.iter().all(|&x| x == 0.0) {
                push(format!("/samples/{i}/embedding"), "is the zero vector".into());
            }
        }
        embeddings.push(e);
    }
    if doc.folds.is_empty() {
        push("/folds".into(), "must contain at least one fold".into());
    }
    let n = doc.samples.len();
    for (f, fold) in doc.folds.iter().enumerate() {
        for (part, idx) in [("train", &fold.train), ("test", &fold.test)] {
            let mut uniq = HashSet::new();
            for (j, &s) in idx.iter().enumerate() {
                if s >= n {
                    push(format!("/folds/{f}/{part}/{j}"), format!("sample {s} out of range for {n} samples"));
                } else if !uniq.insert(s) {
                    push(format!("/folds/{f}/{part}/{j}"), format!("sample {s} repeated"));
                }
            }
        }
        let train: HashSet<_> = fold.train.iter().collect();
        if let Some(s) = fold.test.iter().find(|s| train.contains(s)) {
            push(format!("/folds/{f}"), format!("train and test share sample {s}"));
        }
    }
    if !v.is_empty() {
        return Err(Error::Schema { doc: format!("manifest '{}'", doc.name), violations: v });
    }
    let classes = ClassSet::new(
        doc.classes.iter().map(|c| c.name.clone()).collect(),
        doc.classes.iter().map(|c| c.split).collect(),
    )?;
    let samples = doc
        .samples
        .iter()
        .zip(embeddings)
        .map(|(s, e)| Ok(Sample { embedding: Vector::new(e.expect("validated"))?, label: s.label }))
        .collect::<Result<_>>()?;
    Ok(DatasetManifest { name: doc.name, classes, dim: doc.dim, folds: doc.folds, samples, encoder: doc.encoder })
}

pub fn write_sidecar(path: &Path, dim: usize, rows: &[&[f64]]) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + rows.len() * dim * 8);
    bytes.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&(dim as u64).to_le_bytes());
    for r in rows {
        if r.len() != dim {
            return Err(Error::Shape(format!("sidecar row of length {} vs dim {dim}", r.len())));
        }
        for v in *r {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_sidecar(path: &Path) -> Result<(usize, Vec<Vec<f64>>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let word = |at: usize| -> Result<u64> {
        bytes
            .get(at..at + 8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .ok_or_else(|| Error::Data(format!("sidecar {} is truncated", path.display())))
    };
    let rows = word(0)? as usize;
    let dim = word(8)? as usize;
    if bytes.len() != 16 + rows * dim * 8 {
        return Err(Error::Data(format!(
            "sidecar {} has {} bytes, header implies {}",
            path.display(),
            bytes.len(),
            16 + rows * dim * 8
        )));
    }
    let values: Vec<f64> =
        bytes[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((dim, values.chunks(dim.max(1)).map(<[f64]>::to_vec).collect()))
}
