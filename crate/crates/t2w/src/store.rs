//! Bit-exact persistence: the weight-pair corpus, model checkpoints,
//! precomputed embeddings, and small auxiliary artifacts.
//!
//! All binary framing is little-endian. Files are written to a temporary
//! sibling path and renamed into place, so readers never observe a partial
//! file. Floats are stored as f32 (the declared on-disk precision boundary);
//! in-memory math stays f64.

use crate::headtrainer::WeightRecord;
use crate::taskgen::{ClassUniverse, EmbeddingSource, TaskSpec, TextEmbedding, UniverseConfig};
use crate::weightspace::{ChunkSpec, FlatWeights, ParamSchema};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const DATASET_MAGIC: &[u8; 4] = b"T2W1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"T2WC";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"T2WW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic { path: String, expected: String, found: String },
    #[error("format version mismatch in {path}: file has {found}, reader supports {supported}")]
    VersionMismatch { path: String, found: u32, supported: u32 },
    #[error("truncated file {path}: needed {needed} more bytes")]
    Truncated { path: String, needed: usize },
    #[error("trailing bytes in {path}: {extra} bytes after declared content")]
    TrailingBytes { path: String, extra: usize },
    #[error("non-finite float in {path} ({context})")]
    NonFinite { path: String, context: String },
    #[error("header JSON error in {path}: {source}")]
    Header { path: String, source: serde_json::Error },
    #[error("duplicate embedding description `{0}`")]
    DuplicateEmbedding(String),
    #[error("embedding line {line} malformed: {detail}")]
    BadEmbeddingLine { line: usize, detail: String },
    #[error("inconsistent record in {path}: {detail}")]
    BadRecord { path: String, detail: String },
}

fn io_err(path: &Path, source: std::io::Error) -> StoreError {
    StoreError::Io { path: path.display().to_string(), source }
}

/// Writes via temp file + rename so concurrent readers see old or new bytes,
/// never a mix.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp-write");
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    let mut file = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    file.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    file.sync_all().map_err(|e| io_err(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], path: &Path) -> Self {
        Self { bytes, pos: 0, path: path.display().to_string() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        if self.pos + n > self.bytes.len() {
            return Err(StoreError::Truncated {
                path: self.path.clone(),
                needed: self.pos + n - self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, StoreError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>, StoreError> {
        let raw = self.take(4 * n)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn finish(&self) -> Result<(), StoreError> {
        if self.pos != self.bytes.len() {
            return Err(StoreError::TrailingBytes {
                path: self.path.clone(),
                extra: self.bytes.len() - self.pos,
            });
        }
        Ok(())
    }
}

/// Summary of the universe a dataset was built against, enough to rebuild it
/// deterministically and to refuse evaluation against the wrong one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniverseSummary {
    pub config: UniverseConfig,
    pub seed: u64,
    pub names: Vec<String>,
}

impl UniverseSummary {
    pub fn of(universe: &ClassUniverse) -> Self {
        Self { config: universe.config.clone(), seed: universe.seed, names: universe.names.clone() }
    }

    pub fn matches(&self, universe: &ClassUniverse) -> bool {
        self.config == universe.config && self.seed == universe.seed && self.names == universe.names
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub schema: ParamSchema,
    pub embed_dim: usize,
    /// Block layout with dataset-global per-block min/max (computed over the
    /// seen split), used to normalize weights for diffusion and to
    /// denormalize samples.
    pub chunk: ChunkSpec,
    pub universe: UniverseSummary,
    pub master_seed: u64,
    pub record_count: u64,
}

#[derive(Debug, Clone)]
pub struct WeightDataset {
    pub header: DatasetHeader,
    pub records: Vec<WeightRecord>,
}

fn push_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn write_dataset(path: &Path, dataset: &WeightDataset) -> Result<(), StoreError> {
    let mut header = dataset.header.clone();
    header.record_count = dataset.records.len() as u64;
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| StoreError::Header { path: path.display().to_string(), source: e })?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(DATASET_MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for record in &dataset.records {
        bytes.extend_from_slice(&record.task.task_id.to_le_bytes());
        bytes.extend_from_slice(&(record.task.k() as u32).to_le_bytes());
        for &c in &record.task.class_ids {
            bytes.extend_from_slice(&(c as u32).to_le_bytes());
        }
        push_f32s(&mut bytes, &record.embedding.vector);
        push_f32s(&mut bytes, &record.weights.values);
        bytes.extend_from_slice(&(record.train_accuracy as f32).to_le_bytes());
        bytes.extend_from_slice(&(record.test_accuracy as f32).to_le_bytes());
    }
    atomic_write(path, &bytes)
}

pub fn read_dataset(path: &Path) -> Result<WeightDataset, StoreError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut cursor = Cursor::new(&bytes, path);
    let magic = cursor.take(4)?;
    if magic != DATASET_MAGIC {
        return Err(StoreError::BadMagic {
            path: path.display().to_string(),
            expected: String::from_utf8_lossy(DATASET_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let header_len = cursor.u32()? as usize;
    let header_bytes = cursor.take(header_len)?;
    let header: DatasetHeader = serde_json::from_slice(header_bytes)
        .map_err(|e| StoreError::Header { path: path.display().to_string(), source: e })?;
    if header.format_version != FORMAT_VERSION {
        return Err(StoreError::VersionMismatch {
            path: path.display().to_string(),
            found: header.format_version,
            supported: FORMAT_VERSION,
        });
    }
    let d = header.schema.flat_len();
    let e = header.embed_dim;
    let mut records = Vec::with_capacity(header.record_count as usize);
    for _ in 0..header.record_count {
        let task_id = cursor.u64()?;
        let k = cursor.u32()? as usize;
        let mut class_ids = Vec::with_capacity(k);
        for _ in 0..k {
            class_ids.push(cursor.u32()? as usize);
        }
        let embedding = cursor.f32_vec(e)?;
        let weights = cursor.f32_vec(d)?;
        let train_acc = cursor.f32()?;
        let test_acc = cursor.f32()?;
        for (ctx, slice) in [("embedding", &embedding), ("weights", &weights)] {
            if slice.iter().any(|v| !v.is_finite()) {
                return Err(StoreError::NonFinite {
                    path: path.display().to_string(),
                    context: format!("task {task_id} {ctx}"),
                });
            }
        }
        if !train_acc.is_finite() || !test_acc.is_finite() {
            return Err(StoreError::NonFinite {
                path: path.display().to_string(),
                context: format!("task {task_id} accuracies"),
            });
        }
        let weights = FlatWeights::new(header.schema, weights.iter().map(|&v| v as f64).collect())
            .map_err(|e| StoreError::BadRecord {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
        records.push(WeightRecord {
            task: TaskSpec { task_id, class_ids },
            embedding: TextEmbedding {
                vector: embedding.iter().map(|&v| v as f64).collect(),
                source: EmbeddingSource::Synthetic,
            },
            weights,
            train_accuracy: train_acc as f64,
            test_accuracy: test_acc as f64,
        });
    }
    cursor.finish()?;
    Ok(WeightDataset { header, records })
}

/// Parameter tensors in declaration order, f32 with shape prefixes. The
/// header type is caller-defined (serde JSON).
pub fn write_checkpoint<H: Serialize>(
    path: &Path,
    header: &H,
    tensors: &[crate::matrix::DenseMatrix],
) -> Result<(), StoreError> {
    let header_json = serde_json::to_vec(header)
        .map_err(|e| StoreError::Header { path: path.display().to_string(), source: e })?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for tensor in tensors {
        bytes.extend_from_slice(&(tensor.rows() as u32).to_le_bytes());
        bytes.extend_from_slice(&(tensor.cols() as u32).to_le_bytes());
        push_f32s(&mut bytes, tensor.values());
    }
    atomic_write(path, &bytes)
}

pub fn read_checkpoint<H: DeserializeOwned>(
    path: &Path,
) -> Result<(H, Vec<crate::matrix::DenseMatrix>), StoreError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut cursor = Cursor::new(&bytes, path);
    let magic = cursor.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(StoreError::BadMagic {
            path: path.display().to_string(),
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = cursor.u32()?;
    if version != FORMAT_VERSION {
        return Err(StoreError::VersionMismatch {
            path: path.display().to_string(),
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let header_len = cursor.u32()? as usize;
    let header: H = serde_json::from_slice(cursor.take(header_len)?)
        .map_err(|e| StoreError::Header { path: path.display().to_string(), source: e })?;
    let count = cursor.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for t in 0..count {
        let rows = cursor.u32()? as usize;
        let cols = cursor.u32()? as usize;
        let values = cursor.f32_vec(rows * cols)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite {
                path: path.display().to_string(),
                context: format!("tensor {t}"),
            });
        }
        tensors.push(crate::matrix::DenseMatrix::from_vec_unchecked(
            rows,
            cols,
            values.iter().map(|&v| v as f64).collect(),
        ));
    }
    cursor.finish()?;
    Ok((header, tensors))
}

/// JSON-lines embeddings: `{"description": ..., "vector": [...]}` per line.
pub fn read_embeddings(path: &Path) -> Result<HashMap<String, Vec<f64>>, StoreError> {
    #[derive(Deserialize)]
    struct Line {
        description: String,
        vector: Vec<f64>,
    }
    let mut file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut text = String::new();
    file.read_to_string(&mut text).map_err(|e| io_err(path, e))?;
    let mut map = HashMap::new();
    let mut dim = None;
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(line).map_err(|e| StoreError::BadEmbeddingLine {
            line: idx + 1,
            detail: e.to_string(),
        })?;
        if parsed.vector.iter().any(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite {
                path: path.display().to_string(),
                context: format!("line {}", idx + 1),
            });
        }
        match dim {
            None => dim = Some(parsed.vector.len()),
            Some(d) if d != parsed.vector.len() => {
                return Err(StoreError::BadEmbeddingLine {
                    line: idx + 1,
                    detail: format!("vector length {} != {}", parsed.vector.len(), d),
                })
            }
            _ => {}
        }
        if map.insert(parsed.description.clone(), parsed.vector).is_some() {
            return Err(StoreError::DuplicateEmbedding(parsed.description));
        }
    }
    Ok(map)
}

pub fn write_embeddings(path: &Path, entries: &[(String, Vec<f64>)]) -> Result<(), StoreError> {
    #[derive(Serialize)]
    struct Line<'a> {
        description: &'a str,
        vector: &'a [f64],
    }
    let mut out = String::new();
    for (description, vector) in entries {
        let line = serde_json::to_string(&Line { description, vector })
            .map_err(|e| StoreError::Header { path: path.display().to_string(), source: e })?;
        out.push_str(&line);
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// Standalone sampled-weights artifact (CLI `sample` output).
pub fn write_weights(path: &Path, weights: &FlatWeights) -> Result<(), StoreError> {
    #[derive(Serialize)]
    struct Header {
        format_version: u32,
        schema: ParamSchema,
    }
    let header_json =
        serde_json::to_vec(&Header { format_version: FORMAT_VERSION, schema: weights.schema })
            .map_err(|e| StoreError::Header { path: path.display().to_string(), source: e })?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(WEIGHTS_MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    push_f32s(&mut bytes, &weights.values);
    atomic_write(path, &bytes)
}

pub fn read_weights(path: &Path) -> Result<FlatWeights, StoreError> {
    #[derive(Deserialize)]
    struct Header {
        format_version: u32,
        schema: ParamSchema,
    }
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut cursor = Cursor::new(&bytes, path);
    let magic = cursor.take(4)?;
    if magic != WEIGHTS_MAGIC {
        return Err(StoreError::BadMagic {
            path: path.display().to_string(),
            expected: String::from_utf8_lossy(WEIGHTS_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let header_len = cursor.u32()? as usize;
    let header: Header = serde_json::from_slice(cursor.take(header_len)?)
        .map_err(|e| StoreError::Header { path: path.display().to_string(), source: e })?;
    if header.format_version != FORMAT_VERSION {
        return Err(StoreError::VersionMismatch {
            path: path.display().to_string(),
            found: header.format_version,
            supported: FORMAT_VERSION,
        });
    }
    let values = cursor.f32_vec(header.schema.flat_len())?;
    cursor.finish()?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(StoreError::NonFinite {
            path: path.display().to_string(),
            context: "weights".into(),
        });
    }
    Ok(FlatWeights::new(header.schema, values.iter().map(|&v| v as f64).collect()).expect("length checked"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weightspace::chunk;
    use tempfile::tempdir;

    fn test_header(record_count: u64) -> DatasetHeader {
        let schema = ParamSchema::new(3, 2);
        let (_, mut spec) = chunk(&vec![0.0; schema.flat_len()], 4);
        spec.block_min = vec![-1.0; spec.block_count];
        spec.block_max = vec![1.0; spec.block_count];
        DatasetHeader {
            format_version: FORMAT_VERSION,
            schema,
            embed_dim: 4,
            chunk: spec,
            universe: UniverseSummary {
                config: UniverseConfig {
                    class_count: 5,
                    feature_dim: 3,
                    embed_dim: 4,
                    sigma_f: 0.1,
                    alignment: 0.5,
                },
                seed: 7,
                names: (0..5).map(|i| format!("class_{i:02}")).collect(),
            },
            master_seed: 42,
            record_count,
        }
    }

    fn test_record(task_id: u64) -> WeightRecord {
        let schema = ParamSchema::new(3, 2);
        WeightRecord {
            task: TaskSpec { task_id, class_ids: vec![0, 3] },
            embedding: TextEmbedding {
                vector: vec![0.25, -0.5, 0.125, 1.0],
                source: EmbeddingSource::Synthetic,
            },
            weights: FlatWeights::new(
                schema,
                (0..schema.flat_len()).map(|i| i as f64 * 0.125).collect(),
            )
            .unwrap(),
            train_accuracy: 0.75,
            test_accuracy: 0.5,
        }
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.t2w");
        let dataset = WeightDataset { header: test_header(0), records: vec![] };
        write_dataset(&path, &dataset).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.records.len(), 0);
        assert_eq!(back.header, dataset.header);
    }

    #[test]
    fn one_record_round_trip_is_byte_identical() {
        let dir = tempdir().unwrap();
        let path_a = dir.path().join("a.t2w");
        let path_b = dir.path().join("b.t2w");
        let dataset = WeightDataset { header: test_header(1), records: vec![test_record(9)] };
        write_dataset(&path_a, &dataset).unwrap();
        let back = read_dataset(&path_a).unwrap();
        write_dataset(&path_b, &back).unwrap();
        assert_eq!(fs::read(&path_a).unwrap(), fs::read(&path_b).unwrap());
        assert_eq!(back.records[0].task, dataset.records[0].task);
        assert_eq!(back.records[0].weights, dataset.records[0].weights);
    }

    #[test]
    fn corrupted_magic_is_named() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.t2w");
        let dataset = WeightDataset { header: test_header(0), records: vec![] };
        write_dataset(&path, &dataset).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        let err = read_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("T2W1"), "{err}");
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.t2w");
        let mut header = test_header(0);
        header.format_version = 99;
        write_dataset(&path, &WeightDataset { header, records: vec![] }).unwrap();
        let err = read_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("99") && err.contains('1'), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.t2w");
        let dataset = WeightDataset { header: test_header(1), records: vec![test_record(1)] };
        write_dataset(&path, &dataset).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_dataset(&path), Err(StoreError::Truncated { .. })));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.t2w");
        let dataset = WeightDataset { header: test_header(1), records: vec![test_record(1)] };
        write_dataset(&path, &dataset).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0, 1, 2]);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_dataset(&path), Err(StoreError::TrailingBytes { .. })));
    }

    #[test]
    fn non_finite_record_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("nf.t2w");
        let dataset = WeightDataset { header: test_header(1), records: vec![test_record(1)] };
        write_dataset(&path, &dataset).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // embedding floats sit right after task_id + k + 2 class ids
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let emb_offset = 8 + header_len + 8 + 4 + 8;
        bytes[emb_offset..emb_offset + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_dataset(&path), Err(StoreError::NonFinite { .. })));
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        #[derive(Serialize, Deserialize, PartialEq, Debug)]
        struct Header {
            step: u64,
            note: String,
        }
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let tensors = vec![
            crate::matrix::DenseMatrix::from_vec(2, 2, vec![0.5, -0.25, 1.0, 2.0]).unwrap(),
            crate::matrix::DenseMatrix::from_vec(1, 3, vec![0.125, 0.0, -8.0]).unwrap(),
        ];
        write_checkpoint(&a, &Header { step: 7, note: "x".into() }, &tensors).unwrap();
        let (header, loaded): (Header, _) = read_checkpoint(&a).unwrap();
        write_checkpoint(&b, &header, &loaded).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(header, Header { step: 7, note: "x".into() });
    }

    #[test]
    fn embeddings_round_trip_and_reject_duplicates() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        write_embeddings(
            &path,
            &[("A photo of otter".into(), vec![0.1, 0.2]), ("A photo of lamp".into(), vec![0.3, 0.4])],
        )
        .unwrap();
        let map = read_embeddings(&path).unwrap();
        assert_eq!(map["A photo of otter"], vec![0.1, 0.2]);

        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("{\"description\":\"A photo of otter\",\"vector\":[0.5,0.5]}\n");
        fs::write(&path, text).unwrap();
        assert!(matches!(read_embeddings(&path), Err(StoreError::DuplicateEmbedding(_))));
    }

    #[test]
    fn weights_artifact_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let schema = ParamSchema::new(2, 2);
        let w = FlatWeights::new(schema, vec![0.5, -0.5, 0.25, 0.75, 1.0, -1.0, 0.0, 2.0]).unwrap();
        write_weights(&path, &w).unwrap();
        let back = read_weights(&path).unwrap();
        assert_eq!(back, w);
    }
}
