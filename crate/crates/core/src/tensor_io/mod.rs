//! On-disk tensor dumps and their in-memory counterparts.
//!
//! A dump is a directory holding `manifest.json` plus one raw little-endian
//! payload per tensor, named `L{layer}_H{head}_{kind}.bin`. Logit payloads
//! hold raw `<q_j, k_i>` products (no `1/sqrt(head_dim)` scaling). The causal
//! mask is structural: entries with key index above the query index are
//! written as zero and never read back.

mod format;
mod synth;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{write_manifest, DumpReader, MANIFEST_FILE};
pub use synth::{synth_logits, ContextualHead, GroundTruth, LogitLayout, SynthConfig, Synthetic};

/// Zero-based `(layer, head)` coordinate of an attention head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadLocator {
    pub layer: usize,
    pub head: usize,
}

impl HeadLocator {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadLocator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Logits,
    Keys,
    Values,
}

impl fmt::Display for TensorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TensorKind::Logits => "logits",
            TensorKind::Keys => "keys",
            TensorKind::Values => "values",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    Float32,
    Float64,
}

impl DType {
    pub const fn size(self) -> usize {
        match self {
            DType::Float32 => 4,
            DType::Float64 => 8,
        }
    }

    /// Rounds `v` to the nearest value representable in this dtype.
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            DType::Float32 => v as f32 as f64,
            DType::Float64 => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub layer: usize,
    pub head: usize,
    pub kind: TensorKind,
    pub path: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

impl TensorEntry {
    pub fn locator(&self) -> HeadLocator {
        HeadLocator::new(self.layer, self.head)
    }

    pub fn byte_len(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product::<u64>() * self.dtype.size() as u64
    }
}

/// Contents of `manifest.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub model_name: String,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Per-head dimension; softmax consumers scale logits by `1/sqrt(head_dim)`.
    pub head_dim: usize,
    pub prompt_len: usize,
    pub total_len: usize,
    #[serde(default)]
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn file_name(head: HeadLocator, kind: TensorKind) -> String {
        format!("L{}_H{}_{}.bin", head.layer, head.head, kind)
    }

    pub fn entry(&self, head: HeadLocator, kind: TensorKind) -> Option<&TensorEntry> {
        self.tensors.iter().find(|e| e.kind == kind && e.locator() == head)
    }

    /// All heads, layer-major.
    pub fn heads(&self) -> impl Iterator<Item = HeadLocator> + '_ {
        (0..self.num_layers).flat_map(move |l| (0..self.num_heads).map(move |h| HeadLocator::new(l, h)))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Manifest(msg));
        if self.num_layers == 0 || self.num_heads == 0 || self.head_dim == 0 {
            return bad("num_layers, num_heads and head_dim must be positive".into());
        }
        if self.total_len == 0 || self.prompt_len > self.total_len {
            return bad(format!(
                "need 0 <= prompt_len <= total_len and total_len > 0, got {} / {}",
                self.prompt_len, self.total_len
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.tensors {
            if e.layer >= self.num_layers || e.head >= self.num_heads {
                return bad(format!(
                    "tensor {} addresses layer {} head {} outside {}x{}",
                    e.path, e.layer, e.head, self.num_layers, self.num_heads
                ));
            }
            if !seen.insert((e.layer, e.head, e.kind)) {
                return bad(format!(
                    "duplicate {} entry for layer {} head {}",
                    e.kind, e.layer, e.head
                ));
            }
            let n = self.total_len;
            let ok = match e.kind {
                TensorKind::Logits => e.shape == [n, n] || e.shape == [n - self.prompt_len, n],
                TensorKind::Keys | TensorKind::Values => e.shape == [n, self.head_dim],
            };
            if !ok {
                return bad(format!(
                    "{} has shape {:?}, not valid for {} with n={} m={} head_dim={}",
                    e.path, e.shape, e.kind, n, self.prompt_len, self.head_dim
                ));
            }
        }
        Ok(())
    }
}

/// Raw attention logits of one head.
///
/// Stores query rows `first_row..total_len`, each `total_len` wide. Only the
/// causal prefix (`key <= query`) of a row is ever exposed.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitTensor {
    head: HeadLocator,
    prompt_len: usize,
    total_len: usize,
    first_row: usize,
    data: Vec<f64>,
}

impl LogitTensor {
    /// Builds a tensor from row-major storage of query rows
    /// `first_row..total_len`. Entries above the diagonal are ignored.
    pub fn from_rows(
        head: HeadLocator,
        prompt_len: usize,
        total_len: usize,
        first_row: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if prompt_len > total_len || first_row > total_len {
            return Err(Error::InvalidParameter(format!(
                "inconsistent lengths: prompt {prompt_len}, total {total_len}, first row {first_row}"
            )));
        }
        if data.len() != (total_len - first_row) * total_len {
            return Err(Error::InvalidParameter(format!(
                "logit storage holds {} values, expected {}",
                data.len(),
                (total_len - first_row) * total_len
            )));
        }
        let t = Self {
            head,
            prompt_len,
            total_len,
            first_row,
            data,
        };
        for query in first_row..total_len {
            if let Some(key) = t.row_unchecked(query).iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { query, key }.at(head));
            }
        }
        Ok(t)
    }

    /// Full causal square built from `f(key, query)`, evaluated only for
    /// `key <= query`.
    pub fn from_fn(
        head: HeadLocator,
        prompt_len: usize,
        total_len: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = vec![0.0; total_len * total_len];
        for query in 0..total_len {
            for key in 0..=query {
                data[query * total_len + key] = f(key, query);
            }
        }
        Self::from_rows(head, prompt_len, total_len, 0, data)
    }

    pub fn head(&self) -> HeadLocator {
        self.head
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    /// First stored query row: 0 for a full square, `prompt_len` for
    /// generation-rows-only storage.
    pub fn first_row(&self) -> usize {
        self.first_row
    }

    fn row_unchecked(&self, query: usize) -> &[f64] {
        let start = (query - self.first_row) * self.total_len;
        &self.data[start..=start + query]
    }

    /// Causal prefix of query row `query`: entries for keys `0..=query`.
    pub fn row(&self, query: usize) -> Option<&[f64]> {
        (query >= self.first_row && query < self.total_len).then(|| self.row_unchecked(query))
    }

    /// `<q_query, k_key>`, or `None` when masked or not stored.
    pub fn logit(&self, key: usize, query: usize) -> Option<f64> {
        self.row(query).and_then(|r| r.get(key).copied())
    }

    pub(crate) fn try_row(&self, query: usize) -> Result<&[f64]> {
        self.row(query).ok_or(Error::RowNotStored(query))
    }

    /// Same head with every logit multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    /// Same head with `f` applied to every stored logit.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub(crate) fn raw_rows(&self) -> &[f64] {
        &self.data
    }
}

/// Per-token vectors (keys or values) of one head, `[rows, dim]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorTensor {
    head: HeadLocator,
    dim: usize,
    data: Vec<f64>,
}

pub type KeyTensor = VectorTensor;
pub type ValueTensor = VectorTensor;

impl VectorTensor {
    pub fn new(head: HeadLocator, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidParameter(format!(
                "{} values do not form rows of width {dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                query: pos / dim,
                key: pos % dim,
            }
            .at(head));
        }
        Ok(Self { head, dim, data })
    }

    pub fn head(&self) -> HeadLocator {
        self.head
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub(crate) fn raw(&self) -> &[f64] {
        &self.data
    }
}

/// A complete dump held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dump {
    pub model_name: String,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub prompt_len: usize,
    pub total_len: usize,
    /// Payload dtype used when writing.
    pub dtype: DType,
    pub logits: BTreeMap<HeadLocator, LogitTensor>,
    pub keys: BTreeMap<HeadLocator, KeyTensor>,
    pub values: BTreeMap<HeadLocator, ValueTensor>,
}

impl Dump {
    pub fn empty(
        model_name: impl Into<String>,
        num_layers: usize,
        num_heads: usize,
        head_dim: usize,
        prompt_len: usize,
        total_len: usize,
    ) -> Self {
        Self {
            model_name: model_name.into(),
            num_layers,
            num_heads,
            head_dim,
            prompt_len,
            total_len,
            dtype: DType::Float32,
            logits: BTreeMap::new(),
            keys: BTreeMap::new(),
            values: BTreeMap::new(),
        }
    }

    /// Manifest describing this dump's tensors, in (layer, head, kind) order.
    pub fn manifest(&self) -> Manifest {
        let n = self.total_len;
        let mut tensors = Vec::new();
        for (head, t) in &self.logits {
            tensors.push(self.entry(*head, TensorKind::Logits, vec![n - t.first_row, n]));
        }
        for head in self.keys.keys() {
            tensors.push(self.entry(*head, TensorKind::Keys, vec![n, self.head_dim]));
        }
        for head in self.values.keys() {
            tensors.push(self.entry(*head, TensorKind::Values, vec![n, self.head_dim]));
        }
        tensors.sort_by_key(|e| (e.layer, e.head, e.kind));
        Manifest {
            model_name: self.model_name.clone(),
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            head_dim: self.head_dim,
            prompt_len: self.prompt_len,
            total_len: self.total_len,
            tensors,
        }
    }

    fn entry(&self, head: HeadLocator, kind: TensorKind, shape: Vec<usize>) -> TensorEntry {
        TensorEntry {
            layer: head.layer,
            head: head.head,
            kind,
            path: Manifest::file_name(head, kind),
            shape,
            dtype: self.dtype,
        }
    }

    pub fn heads(&self) -> impl Iterator<Item = HeadLocator> + '_ {
        self.logits.keys().copied()
    }
}
