//! Empirical samples of cross- and self-contextualization.
//!
//! Cross-contextualization collects the logits from a set of prompt keys to
//! a set of later queries. Self-contextualization collects the logits among
//! later tokens themselves, restricted to causal pairs (`key <= query`).
//! Both are uniform-weight multisets, so their empirical CDFs are the
//! conditional distributions used by the RC statistics.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::LogitTensor;

/// An ordered set of token positions.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSpan {
    indices: Vec<usize>,
}

impl TokenSpan {
    /// The contiguous span `[start, end)`.
    pub fn range(start: usize, end: usize) -> Self {
        Self {
            indices: (start..end).collect(),
        }
    }

    pub fn singleton(index: usize) -> Self {
        Self { indices: vec![index] }
    }

    /// Any index set; duplicates are dropped.
    pub fn from_indices(indices: impl IntoIterator<Item = usize>) -> Self {
        let mut indices: Vec<usize> = indices.into_iter().collect();
        indices.sort_unstable();
        indices.dedup();
        Self { indices }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn first(&self) -> Option<usize> {
        self.indices.first().copied()
    }

    pub fn last(&self) -> Option<usize> {
        self.indices.last().copied()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    pub fn is_contiguous(&self) -> bool {
        match (self.first(), self.last()) {
            (Some(a), Some(b)) => b - a + 1 == self.len(),
            _ => true,
        }
    }

    pub fn union(&self, other: &TokenSpan) -> TokenSpan {
        Self::from_indices(self.indices.iter().chain(&other.indices).copied())
    }

    pub fn intersects(&self, other: &TokenSpan) -> bool {
        other.indices.iter().any(|&i| self.contains(i))
    }

    fn check_within(&self, bounds: Range<usize>) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptySpan);
        }
        match self.indices.iter().find(|i| !bounds.contains(i)) {
            Some(&index) => Err(Error::SpanOutOfBounds {
                index,
                start: bounds.start,
                end: bounds.end,
            }),
            None => Ok(()),
        }
    }
}

/// JSON forms: `[start, end]`, `{"start": s, "end": e}`, or
/// `{"indices": [...]}`. Serializes to the range form when contiguous.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SpanRepr {
    Pair([usize; 2]),
    Range { start: usize, end: usize },
    Indices { indices: Vec<usize> },
}

impl Serialize for TokenSpan {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match (self.first(), self.last()) {
            (Some(a), Some(b)) if self.is_contiguous() => SpanRepr::Range { start: a, end: b + 1 },
            _ => SpanRepr::Indices {
                indices: self.indices.clone(),
            },
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TokenSpan {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let span = match SpanRepr::deserialize(d)? {
            SpanRepr::Pair([start, end]) | SpanRepr::Range { start, end } => {
                if end < start {
                    return Err(serde::de::Error::custom(format!(
                        "span end {end} precedes start {start}"
                    )));
                }
                TokenSpan::range(start, end)
            }
            SpanRepr::Indices { indices } => TokenSpan::from_indices(indices),
        };
        Ok(span)
    }
}

impl From<Range<usize>> for TokenSpan {
    fn from(r: Range<usize>) -> Self {
        Self::range(r.start, r.end)
    }
}

impl fmt::Display for TokenSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.first(), self.last()) {
            (Some(a), Some(b)) if self.is_contiguous() => write!(f, "[{a}, {})", b + 1),
            _ => write!(f, "{:?}", self.indices),
        }
    }
}

/// Boundary between the prompt `[0, m)` and the generation `[m, n)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceSplit {
    prompt_len: usize,
    total_len: usize,
}

impl SequenceSplit {
    pub fn new(prompt_len: usize, total_len: usize) -> Result<Self> {
        if prompt_len >= total_len {
            return Err(Error::InvalidParameter(format!(
                "prompt_len {prompt_len} must be below total_len {total_len}"
            )));
        }
        Ok(Self { prompt_len, total_len })
    }

    pub fn of(logits: &LogitTensor) -> Result<Self> {
        Self::new(logits.prompt_len(), logits.total_len())
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn prompt(&self) -> TokenSpan {
        TokenSpan::range(0, self.prompt_len)
    }

    pub fn generation(&self) -> TokenSpan {
        TokenSpan::range(self.prompt_len, self.total_len)
    }
}

/// Which positions may act as the later ("generated") side of a sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Queries come from the generation span `[m, n)`.
    #[default]
    Generation,
    /// Prompt analysis before decoding: an observation window inside the
    /// prompt stands in for the generation.
    PromptOnly,
}

impl SampleMode {
    fn later_bounds(self, logits: &LogitTensor) -> Range<usize> {
        match self {
            SampleMode::Generation => logits.prompt_len()..logits.total_len(),
            SampleMode::PromptOnly => 0..logits.prompt_len(),
        }
    }
}

/// A sorted multiset of finite reals with uniform weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalSample {
    values: Vec<f64>,
}

impl EmpiricalSample {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySample);
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("sample value {pos} is not finite")));
        }
        values.sort_unstable_by(f64::total_cmp);
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// Right-continuous empirical CDF: `#{v <= t} / len`.
    pub fn cdf_at(&self, t: f64) -> f64 {
        self.values.partition_point(|&v| v <= t) as f64 / self.values.len() as f64
    }

    /// Multiset union.
    pub fn merged(&self, other: &EmpiricalSample) -> EmpiricalSample {
        let mut values = Vec::with_capacity(self.len() + other.len());
        values.extend_from_slice(&self.values);
        values.extend_from_slice(&other.values);
        values.sort_unstable_by(f64::total_cmp);
        EmpiricalSample { values }
    }
}

/// Free-function form of [`EmpiricalSample::cdf_at`].
pub fn cdf_at(sample: &EmpiricalSample, t: f64) -> f64 {
    sample.cdf_at(t)
}

pub(crate) fn cross_values(
    logits: &LogitTensor,
    p1: &TokenSpan,
    gprime: &TokenSpan,
    mode: SampleMode,
) -> Result<Vec<f64>> {
    p1.check_within(0..logits.prompt_len())?;
    gprime.check_within(mode.later_bounds(logits))?;
    let (key, query) = (p1.last().unwrap(), gprime.first().unwrap());
    if key > query {
        return Err(Error::CausalViolation { key, query });
    }
    let mut values = Vec::with_capacity(p1.len() * gprime.len());
    for &j in gprime.indices() {
        let row = logits.try_row(j)?;
        values.extend(p1.indices().iter().map(|&i| row[i]));
    }
    Ok(values)
}

pub(crate) fn self_values(
    logits: &LogitTensor,
    g1: &TokenSpan,
    gprime: &TokenSpan,
    mode: SampleMode,
) -> Result<Vec<f64>> {
    let bounds = mode.later_bounds(logits);
    g1.check_within(bounds.clone())?;
    gprime.check_within(bounds)?;
    let mut values = Vec::new();
    for &j in gprime.indices() {
        let causal = &g1.indices()[..g1.indices().partition_point(|&i| i <= j)];
        if causal.is_empty() {
            continue;
        }
        let row = logits.try_row(j)?;
        values.extend(causal.iter().map(|&i| row[i]));
    }
    if values.is_empty() {
        return Err(Error::NoCausalPair);
    }
    Ok(values)
}

/// Logits `f(i, j)` for every key `i` in `p1` and query `j` in `gprime`.
///
/// `p1` must lie in the prompt. `gprime` must lie in the generation, or in
/// the prompt under [`SampleMode::PromptOnly`]; every pair must be causal.
/// The result has exactly `|p1| * |gprime|` values.
pub fn cross_samples(
    logits: &LogitTensor,
    p1: &TokenSpan,
    gprime: &TokenSpan,
    mode: SampleMode,
) -> Result<EmpiricalSample> {
    EmpiricalSample::new(cross_values(logits, p1, gprime, mode)?)
}

/// Logits `f(i, j)` for keys `i` in `g1` and queries `j` in `gprime` with
/// `i <= j`.
pub fn self_samples(
    logits: &LogitTensor,
    g1: &TokenSpan,
    gprime: &TokenSpan,
    mode: SampleMode,
) -> Result<EmpiricalSample> {
    EmpiricalSample::new(self_values(logits, g1, gprime, mode)?)
}
