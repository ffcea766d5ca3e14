//! Activation-dump container: manifest, per-layer binary files and validated loading.
//!
//! A dump is a directory:
//!
//! ```text
//! <root>/manifest.json
//! <root>/layers/L0000.bin     row-major float32 LE, total_tokens x hidden_dim
//! <root>/attn/L0000.bin       per-sentence bucket distributions, float32 LE
//! <root>/labels/<task>.bin    per-token class ids, int32 LE
//! ```
//!
//! Every file is listed in the manifest with its byte length and CRC-32C.
//! [`read_dump`] verifies all of them before handing out a [`Dump`], which then
//! loads individual layers on demand.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_ATTENTION_BUCKETS: usize = 32;

/// Tolerance on the sum of a bucketed attention distribution.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing manifest: {0}")]
    MissingManifest(PathBuf),
    #[error("unsupported manifest schema version {0} (supported: {SCHEMA_VERSION})")]
    UnsupportedSchema(u32),
    #[error("malformed manifest {path}: {source}")]
    ManifestParse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("checksum mismatch in {path}: manifest {expected:08x}, file {actual:08x}")]
    ChecksumMismatch {
        path: PathBuf,
        expected: u32,
        actual: u32,
    },
    #[error("shape mismatch in {path}: expected {expected} bytes, found {actual}")]
    ShapeMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("non-finite activation in layer {layer} at flat index {index}")]
    NonFiniteValue { layer: usize, index: usize },
    #[error("inconsistent shape: {0}")]
    InconsistentShape(String),
    #[error("label length mismatch: {actual} labels for {expected} tokens")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("task {task}: label {label} at token {index} outside [0, {num_classes})")]
    LabelOutOfRange {
        task: String,
        index: usize,
        label: i64,
        num_classes: u32,
    },
    #[error("layer {layer}, sentence {sentence}: not a probability distribution (sum {sum})")]
    InvalidDistribution {
        layer: usize,
        sentence: usize,
        sum: f64,
    },
    #[error("layer {0} is not in this dump")]
    MissingLayer(usize),
    #[error("dump has no attention files")]
    MissingAttention,
    #[error("dump has no labels for task {0:?}")]
    MissingLabels(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    Float32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Endianness {
    #[default]
    Little,
}

/// One file referenced by the manifest, relative to the dump root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub byte_length: u64,
    pub checksum: u32,
    /// Label files only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub model_name: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_sentences: usize,
    pub token_counts: Vec<usize>,
    #[serde(default)]
    pub layer_files: Vec<FileEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_files: Option<Vec<FileEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_buckets: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_files: Option<BTreeMap<String, FileEntry>>,
    #[serde(default)]
    pub dtype: DType,
    #[serde(default)]
    pub endianness: Endianness,
    /// Free text describing where in the block activations were captured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capture_point: Option<String>,
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

impl DumpManifest {
    /// Header-only manifest; file entries are filled in by the writer.
    pub fn new(model_name: impl Into<String>, num_layers: usize, hidden_dim: usize, token_counts: Vec<usize>) -> Self {
        DumpManifest {
            schema_version: SCHEMA_VERSION,
            model_name: model_name.into(),
            num_layers,
            hidden_dim,
            num_sentences: token_counts.len(),
            token_counts,
            layer_files: Vec::new(),
            attention_files: None,
            attention_buckets: None,
            label_files: None,
            dtype: DType::Float32,
            endianness: Endianness::Little,
            capture_point: None,
        }
    }

    pub fn total_tokens(&self) -> usize {
        self.token_counts.iter().sum()
    }

    /// Bytes of one layer file.
    pub fn layer_byte_length(&self) -> u64 {
        (self.total_tokens() * self.hidden_dim * 4) as u64
    }

    /// `[0, c0, c0 + c1, ..., total_tokens]`.
    pub fn sentence_offsets(&self) -> Vec<usize> {
        offsets_from_counts(&self.token_counts)
    }

    fn check_header(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(DataError::UnsupportedSchema(self.schema_version));
        }
        if self.num_layers == 0 || self.hidden_dim == 0 || self.num_sentences == 0 {
            return Err(DataError::InconsistentShape(format!(
                "num_layers={}, hidden_dim={}, num_sentences={} must all be positive",
                self.num_layers, self.hidden_dim, self.num_sentences
            )));
        }
        if self.token_counts.len() != self.num_sentences {
            return Err(DataError::InconsistentShape(format!(
                "{} token counts for {} sentences",
                self.token_counts.len(),
                self.num_sentences
            )));
        }
        if let Some(s) = self.token_counts.iter().position(|&c| c == 0) {
            return Err(DataError::InconsistentShape(format!("sentence {s} has no tokens")));
        }
        Ok(())
    }
}

pub(crate) fn offsets_from_counts(counts: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(counts.len() + 1);
    let mut acc = 0;
    offsets.push(0);
    for &c in counts {
        acc += c;
        offsets.push(acc);
    }
    offsets
}

/// Hidden states of one layer, `total_tokens x hidden_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations {
    pub layer_index: usize,
    pub matrix: Array2<f32>,
    /// Sentence `s` spans rows `sentence_offsets[s]..sentence_offsets[s + 1]`.
    pub sentence_offsets: Vec<usize>,
}

impl LayerActivations {
    pub fn new(layer_index: usize, matrix: Array2<f32>, sentence_offsets: Vec<usize>) -> Result<Self> {
        let layer = LayerActivations {
            layer_index,
            matrix,
            sentence_offsets,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn total_tokens(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn num_sentences(&self) -> usize {
        self.sentence_offsets.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let offs = &self.sentence_offsets;
        if offs.len() < 2 || offs[0] != 0 {
            return Err(DataError::InconsistentShape(
                "sentence offsets must start at 0 and delimit at least one sentence".into(),
            ));
        }
        if offs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(DataError::InconsistentShape("sentence offsets not strictly increasing".into()));
        }
        if *offs.last().unwrap() != self.matrix.nrows() {
            return Err(DataError::InconsistentShape(format!(
                "last sentence offset {} != {} tokens",
                offs.last().unwrap(),
                self.matrix.nrows()
            )));
        }
        if let Some(index) = self.matrix.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFiniteValue {
                layer: self.layer_index,
                index,
            });
        }
        Ok(())
    }
}

/// Per-sentence attention mass over relative key-position buckets for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSummary {
    pub layer_index: usize,
    /// `num_sentences x buckets`; each row is a probability vector.
    pub distribution: Array2<f32>,
}

impl AttentionSummary {
    pub fn new(layer_index: usize, distribution: Array2<f32>) -> Result<Self> {
        let a = AttentionSummary {
            layer_index,
            distribution,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn buckets(&self) -> usize {
        self.distribution.ncols()
    }

    pub fn num_sentences(&self) -> usize {
        self.distribution.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        for (sentence, row) in self.distribution.rows().into_iter().enumerate() {
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            let negative = row.iter().any(|&v| !(v >= 0.0) || !v.is_finite());
            if negative || (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
                return Err(DataError::InvalidDistribution {
                    layer: self.layer_index,
                    sentence,
                    sum,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeLabels {
    pub task: String,
    pub labels: Vec<u32>,
    pub num_classes: u32,
}

impl ProbeLabels {
    pub fn new(task: impl Into<String>, labels: Vec<u32>, num_classes: u32) -> Result<Self> {
        let task = task.into();
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(DataError::LabelOutOfRange {
                task,
                index,
                label: label as i64,
                num_classes,
            });
        }
        Ok(ProbeLabels {
            task,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Confirms that a label set lines up token-for-token with the dump.
pub fn validate_alignment(manifest: &DumpManifest, labels: &ProbeLabels) -> Result<()> {
    let expected = manifest.total_tokens();
    if labels.len() != expected {
        return Err(DataError::LengthMismatch {
            expected,
            actual: labels.len(),
        });
    }
    Ok(())
}

pub fn layer_file_name(index: usize) -> String {
    format!("layers/L{index:04}.bin")
}

pub fn attention_file_name(index: usize) -> String {
    format!("attn/L{index:04}.bin")
}

pub fn label_file_name(task: &str) -> String {
    format!("labels/{task}.bin")
}

/// Writes dumps file by file. Layers must be supplied in index order.
pub struct DumpWriter {
    root: PathBuf,
    manifest: DumpManifest,
    offsets: Vec<usize>,
}

impl DumpWriter {
    pub fn create(root: impl AsRef<Path>, header: &DumpManifest) -> Result<Self> {
        header.check_header()?;
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("layers")).map_err(io_err(&root))?;
        let mut manifest = header.clone();
        manifest.schema_version = SCHEMA_VERSION;
        manifest.layer_files.clear();
        manifest.attention_files = None;
        manifest.attention_buckets = None;
        manifest.label_files = None;
        let offsets = manifest.sentence_offsets();
        Ok(DumpWriter {
            root,
            manifest,
            offsets,
        })
    }

    pub fn write_layer(&mut self, layer: &LayerActivations) -> Result<()> {
        let expected_index = self.manifest.layer_files.len();
        if layer.layer_index != expected_index || expected_index >= self.manifest.num_layers {
            return Err(DataError::InconsistentShape(format!(
                "got layer {} but expected layer {} of {}",
                layer.layer_index, expected_index, self.manifest.num_layers
            )));
        }
        if layer.matrix.dim() != (self.manifest.total_tokens(), self.manifest.hidden_dim) {
            return Err(DataError::InconsistentShape(format!(
                "layer {} is {:?}, manifest wants ({}, {})",
                layer.layer_index,
                layer.matrix.dim(),
                self.manifest.total_tokens(),
                self.manifest.hidden_dim
            )));
        }
        if layer.sentence_offsets != self.offsets {
            return Err(DataError::InconsistentShape(format!(
                "layer {} sentence offsets disagree with manifest token counts",
                layer.layer_index
            )));
        }
        layer.validate()?;
        let bytes: Vec<u8> = layer.matrix.iter().flat_map(|v| v.to_le_bytes()).collect();
        let entry = self.write_file(&layer_file_name(layer.layer_index), &bytes)?;
        self.manifest.layer_files.push(entry);
        Ok(())
    }

    pub fn write_attention(&mut self, attn: &AttentionSummary) -> Result<()> {
        let files = self.manifest.attention_files.get_or_insert_with(Vec::new);
        let expected_index = files.len();
        if attn.layer_index != expected_index || expected_index >= self.manifest.num_layers {
            return Err(DataError::InconsistentShape(format!(
                "got attention for layer {} but expected layer {}",
                attn.layer_index, expected_index
            )));
        }
        if attn.num_sentences() != self.manifest.num_sentences {
            return Err(DataError::InconsistentShape(format!(
                "attention has {} sentences, manifest {}",
                attn.num_sentences(),
                self.manifest.num_sentences
            )));
        }
        match self.manifest.attention_buckets {
            Some(b) if b != attn.buckets() => {
                return Err(DataError::InconsistentShape(format!(
                    "attention bucket count {} differs from earlier layers ({b})",
                    attn.buckets()
                )))
            }
            _ => self.manifest.attention_buckets = Some(attn.buckets()),
        }
        attn.validate()?;
        let bytes: Vec<u8> = attn.distribution.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::create_dir_all(self.root.join("attn")).map_err(io_err(&self.root))?;
        let entry = self.write_file(&attention_file_name(attn.layer_index), &bytes)?;
        self.manifest.attention_files.get_or_insert_with(Vec::new).push(entry);
        Ok(())
    }

    pub fn write_labels(&mut self, labels: &ProbeLabels) -> Result<()> {
        validate_alignment(&self.manifest, labels)?;
        if labels.task.is_empty() || labels.task.contains(['/', '\\']) {
            return Err(DataError::InconsistentShape(format!("bad task name {:?}", labels.task)));
        }
        let bytes: Vec<u8> = labels.labels.iter().flat_map(|&v| (v as i32).to_le_bytes()).collect();
        fs::create_dir_all(self.root.join("labels")).map_err(io_err(&self.root))?;
        let mut entry = self.write_file(&label_file_name(&labels.task), &bytes)?;
        entry.num_classes = Some(labels.num_classes);
        self.manifest
            .label_files
            .get_or_insert_with(BTreeMap::new)
            .insert(labels.task.clone(), entry);
        Ok(())
    }

    fn write_file(&self, rel: &str, bytes: &[u8]) -> Result<FileEntry> {
        let path = self.root.join(rel);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        Ok(FileEntry {
            path: rel.to_string(),
            byte_length: bytes.len() as u64,
            checksum: crc32c::crc32c(bytes),
            num_classes: None,
        })
    }

    /// Writes `manifest.json` and returns the completed manifest.
    pub fn finish(self) -> Result<DumpManifest> {
        if self.manifest.layer_files.len() != self.manifest.num_layers {
            return Err(DataError::InconsistentShape(format!(
                "wrote {} of {} layers",
                self.manifest.layer_files.len(),
                self.manifest.num_layers
            )));
        }
        if let Some(a) = &self.manifest.attention_files {
            if a.len() != self.manifest.num_layers {
                return Err(DataError::InconsistentShape(format!(
                    "wrote attention for {} of {} layers",
                    a.len(),
                    self.manifest.num_layers
                )));
            }
        }
        let path = self.root.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&path, json).map_err(io_err(&path))?;
        Ok(self.manifest)
    }
}

/// Writes a layers-only dump. `manifest` supplies the header; file entries are recomputed.
pub fn write_dump(manifest: &DumpManifest, layers: &[LayerActivations], root: impl AsRef<Path>) -> Result<DumpManifest> {
    if layers.len() != manifest.num_layers {
        return Err(DataError::InconsistentShape(format!(
            "{} layers supplied, manifest declares {}",
            layers.len(),
            manifest.num_layers
        )));
    }
    let mut w = DumpWriter::create(root, manifest)?;
    for layer in layers {
        w.write_layer(layer)?;
    }
    w.finish()
}

/// A validated dump. Matrices are read from disk on request.
#[derive(Debug, Clone)]
pub struct Dump {
    root: PathBuf,
    manifest: DumpManifest,
    offsets: Vec<usize>,
}

/// Opens and fully validates a dump directory.
pub fn read_dump(root: impl AsRef<Path>) -> Result<Dump> {
    let root = root.as_ref().to_path_buf();
    let mpath = root.join(MANIFEST_FILE);
    if !mpath.is_file() {
        return Err(DataError::MissingManifest(mpath));
    }
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: DumpManifest =
        serde_json::from_str(&text).map_err(|source| DataError::ManifestParse { path: mpath.clone(), source })?;
    manifest.check_header()?;
    if manifest.layer_files.len() != manifest.num_layers {
        return Err(DataError::InconsistentShape(format!(
            "manifest lists {} layer files for {} layers",
            manifest.layer_files.len(),
            manifest.num_layers
        )));
    }
    let dump = Dump {
        offsets: manifest.sentence_offsets(),
        root,
        manifest,
    };
    dump.verify_all()?;
    Ok(dump)
}

impl Dump {
    pub fn manifest(&self) -> &DumpManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn num_layers(&self) -> usize {
        self.manifest.num_layers
    }

    pub fn num_sentences(&self) -> usize {
        self.manifest.num_sentences
    }

    pub fn total_tokens(&self) -> usize {
        self.manifest.total_tokens()
    }

    pub fn sentence_offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn has_attention(&self) -> bool {
        self.manifest.attention_files.is_some()
    }

    pub fn label_tasks(&self) -> Vec<String> {
        self.manifest
            .label_files
            .as_ref()
            .map(|m| m.keys().cloned().collect())
            .unwrap_or_default()
    }

    pub fn layer(&self, index: usize) -> Result<LayerActivations> {
        let entry = self.manifest.layer_files.get(index).ok_or(DataError::MissingLayer(index))?;
        let bytes = self.read_entry(entry, self.manifest.layer_byte_length())?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFiniteValue { layer: index, index: i });
        }
        let matrix = Array2::from_shape_vec((self.total_tokens(), self.manifest.hidden_dim), values)
            .expect("byte length checked against shape");
        Ok(LayerActivations {
            layer_index: index,
            matrix,
            sentence_offsets: self.offsets.clone(),
        })
    }

    pub fn layers(&self) -> Result<Vec<LayerActivations>> {
        (0..self.num_layers()).map(|i| self.layer(i)).collect()
    }

    pub fn attention_buckets(&self) -> Option<usize> {
        let files = self.manifest.attention_files.as_ref()?;
        let first = files.first()?;
        Some(
            self.manifest
                .attention_buckets
                .unwrap_or((first.byte_length / 4) as usize / self.num_sentences()),
        )
    }

    pub fn attention(&self, index: usize) -> Result<AttentionSummary> {
        let files = self.manifest.attention_files.as_ref().ok_or(DataError::MissingAttention)?;
        let entry = files.get(index).ok_or(DataError::MissingLayer(index))?;
        let buckets = self.attention_buckets().ok_or(DataError::MissingAttention)?;
        let expected = (self.num_sentences() * buckets * 4) as u64;
        let bytes = self.read_entry(entry, expected)?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let distribution =
            Array2::from_shape_vec((self.num_sentences(), buckets), values).expect("byte length checked against shape");
        AttentionSummary::new(index, distribution)
    }

    pub fn attention_all(&self) -> Result<Vec<AttentionSummary>> {
        (0..self.num_layers()).map(|i| self.attention(i)).collect()
    }

    pub fn labels(&self, task: &str) -> Result<ProbeLabels> {
        let entry = self
            .manifest
            .label_files
            .as_ref()
            .and_then(|m| m.get(task))
            .ok_or_else(|| DataError::MissingLabels(task.to_string()))?;
        let bytes = self.read_entry(entry, (self.total_tokens() * 4) as u64)?;
        let num_classes = match entry.num_classes {
            Some(n) => n,
            None => {
                let max = bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .max()
                    .unwrap_or(0);
                (max.max(0) + 1) as u32
            }
        };
        let mut labels = Vec::with_capacity(bytes.len() / 4);
        for (index, c) in bytes.chunks_exact(4).enumerate() {
            let v = i32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if v < 0 || v as u32 >= num_classes {
                return Err(DataError::LabelOutOfRange {
                    task: task.to_string(),
                    index,
                    label: v as i64,
                    num_classes,
                });
            }
            labels.push(v as u32);
        }
        let labels = ProbeLabels {
            task: task.to_string(),
            labels,
            num_classes,
        };
        validate_alignment(&self.manifest, &labels)?;
        Ok(labels)
    }

    fn read_entry(&self, entry: &FileEntry, expected_len: u64) -> Result<Vec<u8>> {
        let path = self.root.join(&entry.path);
        if entry.byte_length != expected_len {
            return Err(DataError::ShapeMismatch {
                path,
                expected: expected_len,
                actual: entry.byte_length,
            });
        }
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if bytes.len() as u64 != expected_len {
            return Err(DataError::ShapeMismatch {
                path,
                expected: expected_len,
                actual: bytes.len() as u64,
            });
        }
        let actual = crc32c::crc32c(&bytes);
        if actual != entry.checksum {
            return Err(DataError::ChecksumMismatch {
                path,
                expected: entry.checksum,
                actual,
            });
        }
        Ok(bytes)
    }

    fn verify_all(&self) -> Result<()> {
        for i in 0..self.num_layers() {
            self.layer(i)?;
        }
        if let Some(files) = &self.manifest.attention_files {
            if files.len() != self.num_layers() {
                return Err(DataError::InconsistentShape(format!(
                    "manifest lists {} attention files for {} layers",
                    files.len(),
                    self.num_layers()
                )));
            }
            for i in 0..files.len() {
                self.attention(i)?;
            }
        }
        for task in self.label_tasks() {
            self.labels(&task)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_layers(num_layers: usize, counts: &[usize], dim: usize) -> Vec<LayerActivations> {
        let total: usize = counts.iter().sum();
        (0..num_layers)
            .map(|l| {
                let m = Array2::from_shape_fn((total, dim), |(i, j)| (l * 100 + i * dim + j) as f32 * 0.25 - 3.0);
                LayerActivations::new(l, m, offsets_from_counts(counts)).unwrap()
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let counts = [3, 2];
        let layers = tiny_layers(3, &counts, 4);
        let header = DumpManifest::new("tiny", 3, 4, counts.to_vec());
        let written = write_dump(&header, &layers, dir.path()).unwrap();
        let dump = read_dump(dir.path()).unwrap();
        assert_eq!(dump.manifest(), &written);
        for (i, l) in layers.iter().enumerate() {
            let back = dump.layer(i).unwrap();
            let a: Vec<u32> = l.matrix.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.matrix.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
            assert_eq!(back.sentence_offsets, vec![0, 3, 5]);
        }
    }

    #[test]
    fn single_token_layer_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let layers = tiny_layers(1, &[1], 7);
        let header = DumpManifest::new("one", 1, 7, vec![1]);
        write_dump(&header, &layers, dir.path()).unwrap();
        let len = fs::metadata(dir.path().join("layers/L0000.bin")).unwrap().len();
        assert_eq!(len, 7 * 4);
    }

    #[test]
    fn empty_sentence_list_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let header = DumpManifest::new("empty", 1, 4, vec![]);
        let err = write_dump(&header, &[], dir.path()).unwrap_err();
        assert!(matches!(err, DataError::InconsistentShape(_)), "{err}");
    }

    #[test]
    fn byte_length_off_by_four_is_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let header = DumpManifest::new("tiny", 2, 3, vec![2, 2]);
        write_dump(&header, &tiny_layers(2, &[2, 2], 3), dir.path()).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let mut m: DumpManifest = serde_json::from_str(&fs::read_to_string(&mpath).unwrap()).unwrap();
        m.layer_files[1].byte_length += 4;
        fs::write(&mpath, serde_json::to_string(&m).unwrap()).unwrap();
        match read_dump(dir.path()).unwrap_err() {
            DataError::ShapeMismatch { expected, actual, .. } => {
                assert_eq!(expected, 48);
                assert_eq!(actual, 52);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn corrupted_byte_is_checksum_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let header = DumpManifest::new("tiny", 2, 3, vec![2, 2]);
        write_dump(&header, &tiny_layers(2, &[2, 2], 3), dir.path()).unwrap();
        let p = dir.path().join("layers/L0001.bin");
        let mut bytes = fs::read(&p).unwrap();
        bytes[5] ^= 0x10;
        fs::write(&p, bytes).unwrap();
        match read_dump(dir.path()).unwrap_err() {
            DataError::ChecksumMismatch { path, .. } => assert!(path.ends_with("layers/L0001.bin")),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_dump(dir.path()), Err(DataError::MissingManifest(_))));
    }

    #[test]
    fn non_finite_rejected_at_construction_and_load() {
        let mut m = Array2::<f32>::zeros((2, 2));
        m[[1, 0]] = f32::NAN;
        match LayerActivations::new(4, m.clone(), vec![0, 2]).unwrap_err() {
            DataError::NonFiniteValue { layer, index } => assert_eq!((layer, index), (4, 2)),
            e => panic!("unexpected {e}"),
        }

        // Bypass the writer to plant an infinity on disk with a valid checksum.
        let dir = tempfile::tempdir().unwrap();
        let header = DumpManifest::new("tiny", 1, 2, vec![2]);
        write_dump(&header, &tiny_layers(1, &[2], 2), dir.path()).unwrap();
        let p = dir.path().join("layers/L0000.bin");
        let mut bytes = fs::read(&p).unwrap();
        bytes[12..16].copy_from_slice(&f32::INFINITY.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let mut man: DumpManifest = serde_json::from_str(&fs::read_to_string(&mpath).unwrap()).unwrap();
        man.layer_files[0].checksum = crc32c::crc32c(&bytes);
        fs::write(&mpath, serde_json::to_string(&man).unwrap()).unwrap();
        match read_dump(dir.path()).unwrap_err() {
            DataError::NonFiniteValue { layer, index } => assert_eq!((layer, index), (0, 3)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn label_alignment_and_range() {
        let man = DumpManifest::new("m", 1, 2, vec![2, 3]);
        let ok = ProbeLabels::new("pos", vec![0, 1, 0, 1, 1], 2).unwrap();
        validate_alignment(&man, &ok).unwrap();
        let short = ProbeLabels::new("pos", vec![0, 1, 0, 1], 2).unwrap();
        assert!(matches!(
            validate_alignment(&man, &short),
            Err(DataError::LengthMismatch { expected: 5, actual: 4 })
        ));
        assert!(matches!(
            ProbeLabels::new("pos", vec![0, 2], 2),
            Err(DataError::LabelOutOfRange { index: 1, .. })
        ));
    }

    #[test]
    fn label_class_id_out_of_range_fails_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let header = DumpManifest::new("m", 1, 2, vec![3]);
        let mut w = DumpWriter::create(dir.path(), &header).unwrap();
        w.write_layer(&tiny_layers(1, &[3], 2)[0]).unwrap();
        w.write_labels(&ProbeLabels::new("ner", vec![0, 1, 2], 3).unwrap()).unwrap();
        w.finish().unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let mut man: DumpManifest = serde_json::from_str(&fs::read_to_string(&mpath).unwrap()).unwrap();
        man.label_files.as_mut().unwrap().get_mut("ner").unwrap().num_classes = Some(2);
        fs::write(&mpath, serde_json::to_string(&man).unwrap()).unwrap();
        assert!(matches!(
            read_dump(dir.path()),
            Err(DataError::LabelOutOfRange { label: 2, num_classes: 2, .. })
        ));
    }

    #[test]
    fn attention_rows_must_be_distributions() {
        assert!(AttentionSummary::new(0, array![[0.5, 0.5], [0.25, 0.75]]).is_ok());
        assert!(matches!(
            AttentionSummary::new(0, array![[0.5, 0.5], [0.25, 0.7]]),
            Err(DataError::InvalidDistribution { sentence: 1, .. })
        ));
    }

    #[test]
    fn unknown_manifest_fields_are_ignored() {
        let json = r#"{"model_name":"x","num_layers":1,"hidden_dim":2,"num_sentences":1,
            "token_counts":[1],"layer_files":[],"dtype":"float32","endianness":"little",
            "extra":{"anything":true}}"#;
        let m: DumpManifest = serde_json::from_str(json).unwrap();
        assert_eq!(m.schema_version, SCHEMA_VERSION);
        assert_eq!(m.capture_point, None);
    }

    #[test]
    fn reading_does_not_modify_files() {
        let dir = tempfile::tempdir().unwrap();
        let header = DumpManifest::new("tiny", 2, 3, vec![2, 1]);
        write_dump(&header, &tiny_layers(2, &[2, 1], 3), dir.path()).unwrap();
        let snapshot = |p: &Path| -> Vec<u32> {
            let mut v: Vec<_> = ["manifest.json", "layers/L0000.bin", "layers/L0001.bin"]
                .iter()
                .map(|f| crc32c::crc32c(&fs::read(p.join(f)).unwrap()))
                .collect();
            v.sort();
            v
        };
        let before = snapshot(dir.path());
        let d = read_dump(dir.path()).unwrap();
        d.layers().unwrap();
        read_dump(dir.path()).unwrap();
        assert_eq!(before, snapshot(dir.path()));
    }
}
