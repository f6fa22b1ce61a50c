use std::fs;
use std::path::{Path, PathBuf};

use super::{DType, Dump, HeadLocator, LogitTensor, Manifest, TensorEntry, TensorKind, VectorTensor};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Validates `manifest` and writes it as `directory/manifest.json`.
///
/// Only the manifest is written; payload files are the caller's concern
/// (see [`Dump::write`]).
pub fn write_manifest(manifest: &Manifest, directory: &Path) -> Result<()> {
    manifest.validate()?;
    fs::create_dir_all(directory).map_err(|e| Error::io(directory, e))?;
    let path = directory.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(manifest).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

fn encode(values: impl Iterator<Item = f64>, dtype: DType, out: &mut Vec<u8>) {
    match dtype {
        DType::Float32 => values.for_each(|v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::Float64 => values.for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
}

fn decode(bytes: &[u8], dtype: DType) -> Vec<f64> {
    match dtype {
        DType::Float32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::Float64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    }
}

impl Dump {
    /// Writes `manifest.json` and every tensor payload into `directory`.
    pub fn write(&self, directory: &Path) -> Result<()> {
        self.check_shapes()?;
        let manifest = self.manifest();
        write_manifest(&manifest, directory)?;
        for entry in &manifest.tensors {
            let head = entry.locator();
            let mut bytes = Vec::with_capacity(entry.byte_len() as usize);
            match entry.kind {
                TensorKind::Logits => {
                    // masked entries go out as zeros, never as sentinels
                    let t = &self.logits[&head];
                    let n = t.total_len();
                    let rows = t.raw_rows().chunks_exact(n).zip(t.first_row()..);
                    let values = rows.flat_map(|(row, query)| {
                        row.iter()
                            .enumerate()
                            .map(move |(key, &v)| if key <= query { v } else { 0.0 })
                    });
                    encode(values, entry.dtype, &mut bytes);
                }
                TensorKind::Keys => encode(self.keys[&head].raw().iter().copied(), entry.dtype, &mut bytes),
                TensorKind::Values => encode(self.values[&head].raw().iter().copied(), entry.dtype, &mut bytes),
            }
            let path = directory.join(&entry.path);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    fn check_shapes(&self) -> Result<()> {
        for (head, t) in &self.logits {
            if t.total_len() != self.total_len || t.prompt_len() != self.prompt_len {
                return Err(Error::Manifest(format!(
                    "logits for {head} have lengths {}/{}, dump declares {}/{}",
                    t.prompt_len(),
                    t.total_len(),
                    self.prompt_len,
                    self.total_len
                )));
            }
            if t.first_row() != 0 && t.first_row() != self.prompt_len {
                return Err(Error::Manifest(format!(
                    "logits for {head} start at row {}, must be 0 or prompt_len",
                    t.first_row()
                )));
            }
        }
        for (head, t) in self.keys.iter().chain(self.values.iter()) {
            if t.rows() != self.total_len || t.dim() != self.head_dim {
                return Err(Error::Manifest(format!(
                    "vectors for {head} are [{}, {}], expected [{}, {}]",
                    t.rows(),
                    t.dim(),
                    self.total_len,
                    self.head_dim
                )));
            }
        }
        Ok(())
    }
}

/// Reads tensors from a dump directory on demand.
#[derive(Clone, Debug)]
pub struct DumpReader {
    dir: PathBuf,
    manifest: Manifest,
}

impl DumpReader {
    /// Parses and validates the manifest, and checks every payload's byte
    /// length against its declared shape.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json { path, source })?;
        manifest.validate()?;
        let reader = Self { dir, manifest };
        for entry in &reader.manifest.tensors {
            let path = reader.dir.join(&entry.path);
            let actual = fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
            if actual != entry.byte_len() {
                return Err(Error::ShapeMismatch {
                    path,
                    shape: entry.shape.clone(),
                    expected: entry.byte_len(),
                    actual,
                });
            }
        }
        Ok(reader)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn read(&self, head: HeadLocator, kind: TensorKind) -> Result<(&TensorEntry, Vec<f64>)> {
        let entry = self
            .manifest
            .entry(head, kind)
            .ok_or(Error::MissingEntry { head, kind })?;
        let path = self.dir.join(&entry.path);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() as u64 != entry.byte_len() {
            return Err(Error::ShapeMismatch {
                path,
                shape: entry.shape.clone(),
                expected: entry.byte_len(),
                actual: bytes.len() as u64,
            });
        }
        Ok((entry, decode(&bytes, entry.dtype)))
    }

    pub fn has(&self, head: HeadLocator, kind: TensorKind) -> bool {
        self.manifest.entry(head, kind).is_some()
    }

    pub fn load_logits(&self, head: HeadLocator) -> Result<LogitTensor> {
        let (entry, data) = self.read(head, TensorKind::Logits)?;
        let m = &self.manifest;
        let first_row = m.total_len - entry.shape[0];
        LogitTensor::from_rows(head, m.prompt_len, m.total_len, first_row, data)
    }

    pub fn load_keys(&self, head: HeadLocator) -> Result<VectorTensor> {
        let (_, data) = self.read(head, TensorKind::Keys)?;
        VectorTensor::new(head, self.manifest.head_dim, data)
    }

    pub fn load_values(&self, head: HeadLocator) -> Result<VectorTensor> {
        let (_, data) = self.read(head, TensorKind::Values)?;
        VectorTensor::new(head, self.manifest.head_dim, data)
    }

    /// Loads every tensor listed in the manifest.
    pub fn load_all(&self) -> Result<Dump> {
        let m = &self.manifest;
        let mut dump = Dump::empty(
            m.model_name.clone(),
            m.num_layers,
            m.num_heads,
            m.head_dim,
            m.prompt_len,
            m.total_len,
        );
        if let Some(first) = m.tensors.first() {
            dump.dtype = first.dtype;
        }
        for entry in &m.tensors {
            let head = entry.locator();
            match entry.kind {
                TensorKind::Logits => {
                    dump.logits.insert(head, self.load_logits(head)?);
                }
                TensorKind::Keys => {
                    dump.keys.insert(head, self.load_keys(head)?);
                }
                TensorKind::Values => {
                    dump.values.insert(head, self.load_values(head)?);
                }
            }
        }
        Ok(dump)
    }
}
