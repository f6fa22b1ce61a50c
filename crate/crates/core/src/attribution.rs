//! Span attribution with RC-ranked heads.
//!
//! 1. Score every head by the expected RC of the whole prompt against the
//!    whole generation, and keep the top `k`.
//! 2. For each candidate prompt span, sum over the kept heads the RC of that
//!    span against the generation span of interest.
//! 3. Normalize the sums into scores that add up to one and report the best
//!    span.
//!
//! Long generations make the exact expectation costly, so the overlap-area
//! upper bound can replace it (see [`ModeChoice`]).

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contextualization::{cross_samples, self_samples, SampleMode, SequenceSplit, TokenSpan};
use crate::error::{invalid, Error, Result};
use crate::rc::{desc, expected_rc_exact, overlap_area_upper, rc_score, ExcessTable, RcMode};
use crate::tensor_io::{HeadLocator, LogitTensor, TensorKind};

pub const DEFAULT_K: usize = 20;
/// Longest generation scored exactly under [`ModeChoice::Auto`].
pub const DEFAULT_EXACT_LIMIT: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedHead {
    pub layer: usize,
    pub head: usize,
    pub score: f64,
}

impl RankedHead {
    pub fn locator(&self) -> HeadLocator {
        HeadLocator::new(self.layer, self.head)
    }
}

/// Heads ordered by descending score, ties by `(layer, head)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadRanking {
    pub heads: Vec<RankedHead>,
}

impl HeadRanking {
    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn top(&self, k: usize) -> Vec<HeadLocator> {
        self.heads.iter().take(k).map(RankedHead::locator).collect()
    }

    pub fn bottom(&self, k: usize) -> Vec<HeadLocator> {
        let skip = self.heads.len().saturating_sub(k);
        self.heads.iter().skip(skip).map(RankedHead::locator).collect()
    }
}

fn get(logits: &BTreeMap<HeadLocator, LogitTensor>, head: HeadLocator) -> Result<&LogitTensor> {
    logits.get(&head).ok_or(Error::MissingEntry {
        head,
        kind: TensorKind::Logits,
    })
}

/// Scores every head on the full `(prompt, generation)` pair and sorts.
pub fn rank_heads(
    logits: &BTreeMap<HeadLocator, LogitTensor>,
    split: SequenceSplit,
    mode: RcMode,
) -> Result<HeadRanking> {
    if logits.is_empty() {
        return Err(invalid("no heads to rank"));
    }
    if split.prompt_len() == 0 {
        return Err(Error::EmptySpan);
    }
    let (p, g) = (split.prompt(), split.generation());
    let mut heads = logits
        .par_iter()
        .map(|(&head, t)| {
            let run = || -> Result<f64> {
                let cross = cross_samples(t, &p, &g, SampleMode::Generation)?;
                let selfs = self_samples(t, &g, &g, SampleMode::Generation)?;
                Ok(rc_score(&cross, &selfs, mode))
            };
            let score = run().map_err(|e| e.at(head))?;
            Ok(RankedHead {
                layer: head.layer,
                head: head.head,
                score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    heads.sort_by(|a, b| desc(a.score, b.score).then((a.layer, a.head).cmp(&(b.layer, b.head))));
    Ok(HeadRanking { heads })
}

/// Raw span score: `Σ_h E[Z^h(span, gprime)]` over `heads`.
///
/// Per head, the cross sample pairs the span's keys with every generation
/// query, and the self sample pairs `gprime` keys with every later
/// generation query.
pub fn span_scores_raw(
    logits: &BTreeMap<HeadLocator, LogitTensor>,
    heads: &[HeadLocator],
    spans: &[TokenSpan],
    gprime: &TokenSpan,
    split: SequenceSplit,
    mode: RcMode,
) -> Result<Vec<f64>> {
    if spans.is_empty() {
        return Err(invalid("no spans to score"));
    }
    let g = split.generation();
    let per_head = heads
        .par_iter()
        .map(|&head| {
            let run = || -> Result<Vec<f64>> {
                let t = get(logits, head)?;
                let selfs = self_samples(t, gprime, &g, SampleMode::Generation)?;
                let table = ExcessTable::new(&selfs);
                spans
                    .iter()
                    .map(|span| {
                        let cross = cross_samples(t, span, &g, SampleMode::Generation)?;
                        Ok(match mode {
                            RcMode::Exact => table.mean_excess(cross.values()),
                            RcMode::UpperBound => overlap_area_upper(&cross, &selfs),
                        })
                    })
                    .collect()
            };
            run().map_err(|e| e.at(head))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut raw = vec![0.0; spans.len()];
    for scores in per_head {
        for (acc, s) in raw.iter_mut().zip(scores) {
            *acc += s;
        }
    }
    Ok(raw)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalized {
    pub scores: Vec<f64>,
    /// Every raw score was zero; scores fell back to uniform.
    pub degenerate: bool,
}

/// Divides each raw score by the grand total.
pub fn normalize_scores(raw: &[f64]) -> Result<Normalized> {
    if raw.is_empty() {
        return Err(invalid("no scores to normalize"));
    }
    if let Some(bad) = raw.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(invalid(format!(
            "raw attribution score {bad} is not a non-negative finite value"
        )));
    }
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        return Ok(Normalized {
            scores: vec![1.0 / raw.len() as f64; raw.len()],
            degenerate: true,
        });
    }
    Ok(Normalized {
        scores: raw.iter().map(|v| v / total).collect(),
        degenerate: false,
    })
}

/// Exact or upper-bound scoring, or a choice by generation length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeChoice {
    Exact,
    UpperBound,
    /// Exact when `|g| <= limit`, upper bound otherwise.
    Auto {
        limit: usize,
    },
}

impl Default for ModeChoice {
    fn default() -> Self {
        ModeChoice::Auto {
            limit: DEFAULT_EXACT_LIMIT,
        }
    }
}

impl ModeChoice {
    pub fn resolve(self, generation_len: usize) -> RcMode {
        match self {
            ModeChoice::Exact => RcMode::Exact,
            ModeChoice::UpperBound => RcMode::UpperBound,
            ModeChoice::Auto { limit } if generation_len <= limit => RcMode::Exact,
            ModeChoice::Auto { .. } => RcMode::UpperBound,
        }
    }
}

/// Which heads feed the span scores.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSelection {
    /// Highest-RC `k` heads of this sequence.
    Top(usize),
    /// Lowest-RC `k` heads; a negative control.
    Bottom(usize),
    /// A ranking frozen ahead of time, e.g. on a calibration set.
    Fixed(Vec<HeadLocator>),
}

impl Default for HeadSelection {
    fn default() -> Self {
        HeadSelection::Top(DEFAULT_K)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributionConfig {
    pub selection: HeadSelection,
    pub mode: ModeChoice,
    /// Reject overlapping spans.
    pub strict_disjoint: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanScore {
    pub span: TokenSpan,
    pub raw: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub selected_heads: Vec<HeadLocator>,
    pub spans: Vec<SpanScore>,
    /// Index into `spans`.
    pub best_span: usize,
    pub used_upper_bound: bool,
    pub degenerate: bool,
}

impl AttributionResult {
    pub fn best(&self) -> &SpanScore {
        &self.spans[self.best_span]
    }
}

fn select_heads(
    logits: &BTreeMap<HeadLocator, LogitTensor>,
    split: SequenceSplit,
    mode: RcMode,
    selection: &HeadSelection,
) -> Result<Vec<HeadLocator>> {
    let total = logits.len();
    let check_k = |k: usize| {
        if k == 0 || k > total {
            Err(invalid(format!(
                "k = {k} must be between 1 and the number of heads ({total})"
            )))
        } else {
            Ok(())
        }
    };
    match selection {
        HeadSelection::Top(k) => {
            check_k(*k)?;
            Ok(rank_heads(logits, split, mode)?.top(*k))
        }
        HeadSelection::Bottom(k) => {
            check_k(*k)?;
            Ok(rank_heads(logits, split, mode)?.bottom(*k))
        }
        HeadSelection::Fixed(heads) => {
            if heads.is_empty() {
                return Err(invalid("fixed head selection is empty"));
            }
            for &h in heads {
                get(logits, h)?;
            }
            Ok(heads.clone())
        }
    }
}

/// Runs head selection, span scoring and normalization.
///
/// The best span maximizes the normalized score; ties go to the span that
/// starts earliest.
pub fn attribute(
    logits: &BTreeMap<HeadLocator, LogitTensor>,
    split: SequenceSplit,
    spans: &[TokenSpan],
    gprime: &TokenSpan,
    config: &AttributionConfig,
) -> Result<AttributionResult> {
    if spans.is_empty() {
        return Err(invalid("no spans to attribute"));
    }
    if config.strict_disjoint {
        for (a, sa) in spans.iter().enumerate() {
            if let Some(b) = spans[a + 1..].iter().position(|sb| sa.intersects(sb)) {
                return Err(invalid(format!("spans {sa} and {} overlap", spans[a + 1 + b])));
            }
        }
    }
    let mode = config.mode.resolve(split.total_len() - split.prompt_len());
    let heads = select_heads(logits, split, mode, &config.selection)?;
    let raw = span_scores_raw(logits, &heads, spans, gprime, split, mode)?;
    let Normalized { scores, degenerate } = normalize_scores(&raw)?;

    let best_span = (0..spans.len())
        .max_by(|&a, &b| {
            scores[a]
                .total_cmp(&scores[b])
                .then_with(|| spans[b].first().cmp(&spans[a].first()))
                .then_with(|| b.cmp(&a))
        })
        .expect("spans is non-empty");

    Ok(AttributionResult {
        selected_heads: heads,
        spans: spans
            .iter()
            .zip(raw.iter().zip(&scores))
            .map(|(span, (&raw, &score))| SpanScore {
                span: span.clone(),
                raw,
                score,
            })
            .collect(),
        best_span,
        used_upper_bound: mode == RcMode::UpperBound,
        degenerate,
    })
}

/// Exact per-head RC of `span` against `gprime`, unsummed. Exposed for
/// diagnostics and cross-checks.
pub fn head_span_rc(t: &LogitTensor, span: &TokenSpan, gprime: &TokenSpan) -> Result<f64> {
    let g = SequenceSplit::of(t)?.generation();
    let cross = cross_samples(t, span, &g, SampleMode::Generation)?;
    let selfs = self_samples(t, gprime, &g, SampleMode::Generation)?;
    Ok(expected_rc_exact(&cross, &selfs))
}
