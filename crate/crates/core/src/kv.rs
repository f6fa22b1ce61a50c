//! Head-wise KV-cache eviction driven by relative contextualization.
//!
//! At prefill, the last `window` prompt tokens stand in for the unseen
//! generation. Each other prompt token `i` is scored with the expected RC of
//! `{i}` against that window, and evicted from a head when its score is at
//! most `c` times the head's aggregate score over the whole non-window
//! prompt. The first `sink` tokens and the window itself always stay.
//!
//! Baseline scorers (key norm, streaming, post-softmax window mass) share the
//! plan machinery but evict a fixed number of tokens per head instead of
//! using the threshold rule.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contextualization::{cross_values, self_values, SampleMode, TokenSpan};
use crate::error::{invalid, Error, Result};
use crate::rc::ExcessTable;
use crate::tensor_io::{HeadLocator, KeyTensor, LogitTensor, TensorKind, ValueTensor};

/// Values of `c` swept in the compression experiments.
pub const C_SWEEP: [f64; 7] = [0.2, 0.7, 0.8, 1.0, 1.2, 1.3, 1.8];
pub const DEFAULT_C: f64 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    #[default]
    RcstatExact,
    RcstatIot,
    Knorm,
    Streaming,
    Postsoftmax,
}

impl Scorer {
    pub const ALL: [Scorer; 5] = [
        Scorer::RcstatExact,
        Scorer::RcstatIot,
        Scorer::Knorm,
        Scorer::Streaming,
        Scorer::Postsoftmax,
    ];

    /// Whether plans use the adaptive `score <= c * aggregate` rule.
    pub fn is_rc(self) -> bool {
        matches!(self, Scorer::RcstatExact | Scorer::RcstatIot)
    }

    pub fn name(self) -> &'static str {
        match self {
            Scorer::RcstatExact => "rcstat_exact",
            Scorer::RcstatIot => "rcstat_iot",
            Scorer::Knorm => "knorm",
            Scorer::Streaming => "streaming",
            Scorer::Postsoftmax => "postsoftmax",
        }
    }
}

impl fmt::Display for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Scorer::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| invalid(format!("unknown scorer `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvictionConfig {
    /// Observation window: the last `window` prompt tokens.
    pub window: usize,
    pub threshold_c: f64,
    /// Always-kept prefix length.
    pub sink: usize,
    pub scorer: Scorer,
    /// Whether sink tokens count toward the aggregate score.
    pub sink_in_aggregate: bool,
}

impl Default for EvictionConfig {
    fn default() -> Self {
        Self {
            window: 8,
            threshold_c: DEFAULT_C,
            sink: 4,
            scorer: Scorer::RcstatExact,
            sink_in_aggregate: true,
        }
    }
}

impl EvictionConfig {
    pub fn validate(&self, prompt_len: usize) -> Result<()> {
        if self.window == 0 || self.window >= prompt_len {
            return Err(invalid(format!(
                "window {} must satisfy 0 < window < prompt_len ({prompt_len})",
                self.window
            )));
        }
        if self.sink + self.window > prompt_len {
            return Err(invalid(format!(
                "sink {} + window {} exceed prompt_len {prompt_len}",
                self.sink, self.window
            )));
        }
        if !(self.threshold_c >= 0.0 && self.threshold_c.is_finite()) {
            return Err(invalid(format!(
                "c must be a non-negative finite value, got {}",
                self.threshold_c
            )));
        }
        Ok(())
    }

    pub fn window_span(&self, prompt_len: usize) -> TokenSpan {
        TokenSpan::range(prompt_len - self.window, prompt_len)
    }

    /// Prompt positions eligible for eviction.
    pub fn scorable(&self, prompt_len: usize) -> Range<usize> {
        self.sink..prompt_len - self.window
    }

    fn aggregate_span(&self, prompt_len: usize) -> TokenSpan {
        let start = if self.sink_in_aggregate { 0 } else { self.sink };
        TokenSpan::range(start, prompt_len - self.window)
    }
}

/// Per-head inputs to the scorers.
#[derive(Clone, Copy, Debug)]
pub struct HeadInputs<'a> {
    pub logits: &'a LogitTensor,
    pub keys: Option<&'a KeyTensor>,
    pub head_dim: usize,
}

impl<'a> HeadInputs<'a> {
    pub fn new(logits: &'a LogitTensor, head_dim: usize) -> Self {
        Self {
            logits,
            keys: None,
            head_dim,
        }
    }

    pub fn with_keys(mut self, keys: &'a KeyTensor) -> Self {
        self.keys = Some(keys);
        self
    }
}

/// Per-row excess tables for the independent-output-token scorer.
fn iot_tables(logits: &LogitTensor, window: &TokenSpan) -> Result<Vec<(usize, ExcessTable)>> {
    window
        .indices()
        .iter()
        .map(|&j| {
            let row = TokenSpan::singleton(j);
            let values = self_values(logits, window, &row, SampleMode::PromptOnly)?;
            Ok((j, ExcessTable::from_unsorted(values)))
        })
        .collect()
}

fn iot_score(logits: &LogitTensor, tables: &[(usize, ExcessTable)], keys: &[usize]) -> f64 {
    let mut total = 0.0;
    for (j, table) in tables {
        let row = logits.row(*j).expect("window rows validated");
        let sum: f64 = keys.iter().map(|&i| table.total_excess(row[i])).sum();
        total += sum / (keys.len() * table.len()) as f64;
    }
    total / tables.len() as f64
}

/// RC score of every prompt token of one head; window and sink tokens get
/// `+inf`. Uses the exact or IOT expectation according to `cfg.scorer`.
pub fn eviction_scores(logits: &LogitTensor, cfg: &EvictionConfig) -> Result<Vec<f64>> {
    let m = logits.prompt_len();
    cfg.validate(m)?;
    let window = cfg.window_span(m);
    let mut scores = vec![f64::INFINITY; m];
    match cfg.scorer {
        Scorer::RcstatExact => {
            let table = ExcessTable::from_unsorted(self_values(logits, &window, &window, SampleMode::PromptOnly)?);
            for i in cfg.scorable(m) {
                let cross = cross_values(logits, &TokenSpan::singleton(i), &window, SampleMode::PromptOnly)?;
                scores[i] = table.mean_excess(&cross);
            }
        }
        Scorer::RcstatIot => {
            let tables = iot_tables(logits, &window)?;
            for i in cfg.scorable(m) {
                scores[i] = iot_score(logits, &tables, &[i]);
            }
        }
        other => return Err(invalid(format!("{other} is not an RC scorer"))),
    }
    Ok(scores)
}

/// `E[Z_p(p \ window, window)]`: the RC of the whole non-window prompt.
pub fn aggregate_score(logits: &LogitTensor, cfg: &EvictionConfig) -> Result<f64> {
    let m = logits.prompt_len();
    cfg.validate(m)?;
    let window = cfg.window_span(m);
    let span = cfg.aggregate_span(m);
    match cfg.scorer {
        Scorer::RcstatExact => {
            let table = ExcessTable::from_unsorted(self_values(logits, &window, &window, SampleMode::PromptOnly)?);
            let cross = cross_values(logits, &span, &window, SampleMode::PromptOnly)?;
            Ok(table.mean_excess(&cross))
        }
        Scorer::RcstatIot => {
            if span.is_empty() {
                return Err(Error::EmptySpan);
            }
            let tables = iot_tables(logits, &window)?;
            Ok(iot_score(logits, &tables, span.indices()))
        }
        other => Err(invalid(format!("{other} has no aggregate score"))),
    }
}

fn softmax_scaled(row: &[f64], head_dim: usize) -> Vec<f64> {
    let scale = 1.0 / (head_dim as f64).sqrt();
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = row.iter().map(|&z| ((z - max) * scale).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Scores from a baseline rule. Higher means more worth keeping.
///
/// - `knorm`: `||k_i||`, so small-norm keys go first.
/// - `streaming`: 0 everywhere outside the sink and window.
/// - `postsoftmax`: post-softmax attention mass received from the window rows.
pub fn baseline_scores(kind: Scorer, inputs: &HeadInputs<'_>, cfg: &EvictionConfig) -> Result<Vec<f64>> {
    let logits = inputs.logits;
    let m = logits.prompt_len();
    cfg.validate(m)?;
    let mut scores = vec![f64::INFINITY; m];
    let scorable = cfg.scorable(m);
    match kind {
        Scorer::Knorm => {
            let keys = inputs.keys.ok_or(Error::MissingEntry {
                head: logits.head(),
                kind: TensorKind::Keys,
            })?;
            for i in scorable {
                scores[i] = keys.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            }
        }
        Scorer::Streaming => scores[scorable].iter_mut().for_each(|s| *s = 0.0),
        Scorer::Postsoftmax => {
            let mut mass = vec![0.0; m];
            for &j in cfg.window_span(m).indices() {
                let w = softmax_scaled(logits.try_row(j)?, inputs.head_dim);
                for (acc, p) in mass.iter_mut().zip(&w) {
                    *acc += p;
                }
            }
            for i in scorable {
                scores[i] = mass[i];
            }
        }
        other => return Err(invalid(format!("{other} is not a baseline scorer"))),
    }
    Ok(scores)
}

/// Scores of one head under `cfg.scorer`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadScores {
    pub head: HeadLocator,
    /// One entry per prompt position; `+inf` marks protected tokens.
    pub scores: Vec<f64>,
    /// Present for RC scorers.
    pub aggregate: Option<f64>,
}

pub fn score_head(inputs: &HeadInputs<'_>, cfg: &EvictionConfig) -> Result<HeadScores> {
    let head = inputs.logits.head();
    let run = || -> Result<HeadScores> {
        if cfg.scorer.is_rc() {
            Ok(HeadScores {
                head,
                scores: eviction_scores(inputs.logits, cfg)?,
                aggregate: Some(aggregate_score(inputs.logits, cfg)?),
            })
        } else {
            Ok(HeadScores {
                head,
                scores: baseline_scores(cfg.scorer, inputs, cfg)?,
                aggregate: None,
            })
        }
    };
    run().map_err(|e| e.at(head))
}

/// Scores every head in parallel, preserving input order.
pub fn score_heads(heads: &[HeadInputs<'_>], cfg: &EvictionConfig) -> Result<Vec<HeadScores>> {
    heads.par_iter().map(|h| score_head(h, cfg)).collect()
}

/// Keep/evict decision for one head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadPlan {
    pub layer: usize,
    pub head: usize,
    /// `c * aggregate` for threshold plans; absent for ranked plans.
    pub threshold: Option<f64>,
    pub evicted: usize,
    /// One bit per prompt position, `1` = kept.
    #[serde(with = "bitmask")]
    pub keep: Vec<bool>,
}

impl HeadPlan {
    pub fn locator(&self) -> HeadLocator {
        HeadLocator::new(self.layer, self.head)
    }

    pub fn compression_ratio(&self) -> f64 {
        self.evicted as f64 / self.keep.len() as f64
    }

    pub fn evicted_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.keep.iter().enumerate().filter(|(_, &k)| !k).map(|(i, _)| i)
    }

    /// `keep[i]` is false for evicted prompt position `i`.
    pub fn new(head: HeadLocator, threshold: Option<f64>, keep: Vec<bool>) -> Self {
        Self {
            layer: head.layer,
            head: head.head,
            threshold,
            evicted: keep.iter().filter(|&&k| !k).count(),
            keep,
        }
    }
}

mod bitmask {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(mask: &[bool], s: S) -> Result<S::Ok, S::Error> {
        let bits: String = mask.iter().map(|&b| if b { '1' } else { '0' }).collect();
        s.serialize_str(&bits)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        String::deserialize(d)?
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(de::Error::custom(format!("invalid mask bit {other:?}"))),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvictionPlan {
    pub prompt_len: usize,
    pub window: usize,
    pub sink: usize,
    pub scorer: Scorer,
    /// Threshold multiplier for RC plans.
    pub c: Option<f64>,
    pub compression_ratio: f64,
    pub heads: Vec<HeadPlan>,
}

impl EvictionPlan {
    /// Collects per-head plans and computes the overall compression ratio.
    pub fn assemble(cfg: &EvictionConfig, prompt_len: usize, c: Option<f64>, heads: Vec<HeadPlan>) -> Self {
        let evicted: usize = heads.iter().map(|h| h.evicted).sum();
        let total = prompt_len * heads.len();
        Self {
            prompt_len,
            window: cfg.window,
            sink: cfg.sink,
            scorer: cfg.scorer,
            c,
            compression_ratio: if total == 0 { 0.0 } else { evicted as f64 / total as f64 },
            heads,
        }
    }

    pub fn head(&self, head: HeadLocator) -> Option<&HeadPlan> {
        self.heads.iter().find(|h| h.locator() == head)
    }

    pub fn evicted(&self) -> usize {
        self.heads.iter().map(|h| h.evicted).sum()
    }
}

fn prompt_len_of(scores: &[HeadScores]) -> Result<usize> {
    let m = scores
        .first()
        .map(|s| s.scores.len())
        .ok_or_else(|| invalid("no heads to plan"))?;
    if scores.iter().any(|s| s.scores.len() != m) {
        return Err(invalid("heads disagree on prompt length"));
    }
    Ok(m)
}

/// Applies `evict iff score <= c * aggregate` head by head.
///
/// A head whose aggregate is zero evicts nothing.
pub fn plan_threshold(scores: &[HeadScores], cfg: &EvictionConfig, c: f64) -> Result<EvictionPlan> {
    let m = prompt_len_of(scores)?;
    EvictionConfig {
        threshold_c: c,
        ..cfg.clone()
    }
    .validate(m)?;
    let heads = scores
        .iter()
        .map(|s| {
            let aggregate = s
                .aggregate
                .ok_or_else(|| invalid(format!("{} scores carry no aggregate", cfg.scorer)).at(s.head))?;
            let threshold = c * aggregate;
            let keep = s.scores.iter().map(|&v| !(aggregate > 0.0 && v <= threshold)).collect();
            Ok(HeadPlan::new(s.head, Some(threshold), keep))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvictionPlan::assemble(cfg, m, Some(c), heads))
}

/// Evicts the lowest-scoring `round(fraction * scorable)` tokens of every
/// head; ties go to the earlier position.
pub fn plan_ranked(scores: &[HeadScores], cfg: &EvictionConfig, fraction: f64) -> Result<EvictionPlan> {
    let m = prompt_len_of(scores)?;
    cfg.validate(m)?;
    if !(0.0..=1.0).contains(&fraction) {
        return Err(invalid(format!("eviction fraction {fraction} outside [0, 1]")));
    }
    let budget = (fraction * cfg.scorable(m).len() as f64).round() as usize;
    plan_budgeted(scores, cfg, &vec![budget; scores.len()])
}

/// Evicts the `budgets[h]` lowest-scoring scorable tokens of head `h`; ties
/// go to the earlier position.
pub fn plan_budgeted(scores: &[HeadScores], cfg: &EvictionConfig, budgets: &[usize]) -> Result<EvictionPlan> {
    let m = prompt_len_of(scores)?;
    cfg.validate(m)?;
    if budgets.len() != scores.len() {
        return Err(invalid(format!("{} budgets for {} heads", budgets.len(), scores.len())));
    }
    let scorable = cfg.scorable(m);
    if let Some(&b) = budgets.iter().find(|&&b| b > scorable.len()) {
        return Err(invalid(format!(
            "budget {b} exceeds the {} scorable tokens",
            scorable.len()
        )));
    }
    let heads = scores
        .iter()
        .zip(budgets)
        .map(|(s, &budget)| {
            let mut order: Vec<usize> = scorable.clone().collect();
            order.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]).then(a.cmp(&b)));
            let mut keep = vec![true; m];
            for &i in &order[..budget] {
                keep[i] = false;
            }
            HeadPlan::new(s.head, None, keep)
        })
        .collect();
    Ok(EvictionPlan::assemble(cfg, m, None, heads))
}

/// Scores every head and applies the threshold rule at `cfg.threshold_c`.
pub fn build_plan(heads: &[HeadInputs<'_>], cfg: &EvictionConfig) -> Result<EvictionPlan> {
    if !cfg.scorer.is_rc() {
        return Err(invalid(format!(
            "{} has no threshold rule; use plan_ranked with an eviction budget",
            cfg.scorer
        )));
    }
    let scores = score_heads(heads, cfg)?;
    plan_threshold(&scores, cfg, cfg.threshold_c)
}

/// Smallest `c` whose threshold plan reaches `target` compression, found by
/// bisection (compression is a non-decreasing step function of `c`).
pub fn c_for_ratio(scores: &[HeadScores], cfg: &EvictionConfig, target: f64) -> Result<f64> {
    let ratio = |c: f64| plan_threshold(scores, cfg, c).map(|p| p.compression_ratio);
    let mut hi = scores
        .iter()
        .filter_map(|s| {
            let agg = s.aggregate.filter(|&a| a > 0.0)?;
            s.scores
                .iter()
                .filter(|v| v.is_finite())
                .map(|v| v / agg)
                .reduce(f64::max)
        })
        .fold(0.0, f64::max);
    if ratio(0.0)? >= target {
        return Ok(0.0);
    }
    if ratio(hi)? < target {
        return Ok(hi);
    }
    let mut lo = 0.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if ratio(mid)? >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Attention output of query `query` when only positions with `keep[i]`
/// (prompt) or `i >= keep.len()` (generated) remain, softmax renormalized
/// over the kept keys.
pub fn values_under_eviction(
    logits: &LogitTensor,
    values: &ValueTensor,
    keep: &[bool],
    query: usize,
    head_dim: usize,
) -> Result<Vec<f64>> {
    let row = logits.try_row(query)?;
    let kept: Vec<usize> = (0..=query).filter(|&i| keep.get(i).copied().unwrap_or(true)).collect();
    if kept.is_empty() {
        return Err(Error::EmptyKeptSet(query));
    }
    let z: Vec<f64> = kept.iter().map(|&i| row[i]).collect();
    let weights = softmax_scaled(&z, head_dim);
    let mut out = vec![0.0; values.dim()];
    for (&i, w) in kept.iter().zip(weights) {
        for (o, v) in out.iter_mut().zip(values.row(i)) {
            *o += w * v;
        }
    }
    Ok(out)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadVer {
    pub layer: usize,
    pub head: usize,
    pub mean: f64,
    pub rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerReport {
    pub per_head: Vec<HeadVer>,
    /// Mean over every evaluated (head, row).
    pub mean: f64,
    pub samples: usize,
    /// Rows whose full-cache output had zero norm.
    pub skipped_rows: usize,
}

/// Value error rate `||v* - v̂|| / ||v*||`, averaged per head and overall.
pub fn ver(
    plan: &EvictionPlan,
    logits: &BTreeMap<HeadLocator, LogitTensor>,
    values: &BTreeMap<HeadLocator, ValueTensor>,
    rows: &TokenSpan,
    head_dim: usize,
) -> Result<VerReport> {
    if rows.is_empty() {
        return Err(Error::EmptySpan);
    }
    let per_head = plan
        .heads
        .par_iter()
        .map(|hp| {
            let head = hp.locator();
            let run = || -> Result<(HeadVer, f64, usize)> {
                let t = logits.get(&head).ok_or(Error::MissingEntry {
                    head,
                    kind: TensorKind::Logits,
                })?;
                let v = values.get(&head).ok_or(Error::MissingEntry {
                    head,
                    kind: TensorKind::Values,
                })?;
                let full = vec![true; hp.keep.len()];
                let (mut sum, mut count, mut skipped) = (0.0, 0usize, 0usize);
                for &j in rows.indices() {
                    let reference = values_under_eviction(t, v, &full, j, head_dim)?;
                    let norm = l2(&reference);
                    if norm == 0.0 {
                        skipped += 1;
                        continue;
                    }
                    let approx = values_under_eviction(t, v, &hp.keep, j, head_dim)?;
                    let diff: Vec<f64> = reference.iter().zip(&approx).map(|(a, b)| a - b).collect();
                    sum += l2(&diff) / norm;
                    count += 1;
                }
                let mean = if count == 0 { 0.0 } else { sum / count as f64 };
                Ok((
                    HeadVer {
                        layer: head.layer,
                        head: head.head,
                        mean,
                        rows: count,
                    },
                    sum,
                    skipped,
                ))
            };
            run().map_err(|e| e.at(head))
        })
        .collect::<Result<Vec<_>>>()?;
    let samples: usize = per_head.iter().map(|(h, _, _)| h.rows).sum();
    let total: f64 = per_head.iter().map(|(_, s, _)| s).sum();
    let skipped_rows = per_head.iter().map(|(_, _, k)| k).sum();
    Ok(VerReport {
        per_head: per_head.into_iter().map(|(h, _, _)| h).collect(),
        mean: if samples == 0 { 0.0 } else { total / samples as f64 },
        samples,
        skipped_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_io::VectorTensor;

    const H: HeadLocator = HeadLocator::new(0, 0);

    fn cfg(window: usize, sink: usize) -> EvictionConfig {
        EvictionConfig {
            window,
            sink,
            ..EvictionConfig::default()
        }
    }

    #[test]
    fn degenerate_single_token_window() {
        // prompt [0, 2), window {1}: f(0,1) = 3, f(1,1) = 1
        let t = LogitTensor::from_fn(H, 2, 2, |i, j| match (i, j) {
            (0, 1) => 3.0,
            (1, 1) => 1.0,
            _ => 0.0,
        })
        .unwrap();
        let c = cfg(1, 0);
        let s = eviction_scores(&t, &c).unwrap();
        assert_eq!(s, vec![2.0, f64::INFINITY]);
        assert_eq!(aggregate_score(&t, &c).unwrap(), 2.0);
    }

    #[test]
    fn tokens_below_all_window_logits_score_zero() {
        let t = LogitTensor::from_fn(H, 6, 6, |i, _| if i < 4 { -10.0 } else { 1.0 }).unwrap();
        let s = eviction_scores(&t, &cfg(2, 0)).unwrap();
        assert!(s[..4].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_token_window_brute_force() {
        // prompt [0, 4), sink {0}, window {2, 3}
        let f = |i: usize, j: usize| ((i * 7 + j * 3) % 5) as f64 - 1.5;
        let t = LogitTensor::from_fn(H, 4, 4, f).unwrap();
        let s = eviction_scores(&t, &cfg(2, 1)).unwrap();
        let selfs = [f(2, 2), f(2, 3), f(3, 3)];
        let cross = [f(1, 2), f(1, 3)];
        let mut acc = 0.0;
        for x in cross {
            for y in selfs {
                acc += f64::max(x - y, 0.0);
            }
        }
        assert!((s[1] - acc / 6.0).abs() < 1e-15);
        assert!(s[0].is_infinite() && s[2].is_infinite() && s[3].is_infinite());
    }

    #[test]
    fn aggregate_is_the_mean_of_equal_sized_token_scores() {
        let f = |i: usize, j: usize| ((i * 13 + j * 5) % 11) as f64 * 0.3;
        let t = LogitTensor::from_fn(H, 5, 5, f).unwrap();
        let c = cfg(3, 0);
        let s = eviction_scores(&t, &c).unwrap();
        let agg = aggregate_score(&t, &c).unwrap();
        assert!((agg - 0.5 * (s[0] + s[1])).abs() < 1e-14);
        let all_window = LogitTensor::from_fn(H, 3, 3, f).unwrap();
        assert!(aggregate_score(&all_window, &cfg(3, 0)).is_err());
    }

    #[test]
    fn iot_scores_match_the_rc_module() {
        let f = |i: usize, j: usize| ((i * 3 + j * 11) % 7) as f64 - 2.0;
        let t = LogitTensor::from_fn(H, 8, 8, f).unwrap();
        let c = EvictionConfig {
            scorer: Scorer::RcstatIot,
            ..cfg(3, 1)
        };
        let s = eviction_scores(&t, &c).unwrap();
        let w = c.window_span(8);
        for (i, &got) in s.iter().enumerate().take(5).skip(1) {
            let want = crate::rc::expected_rc_iot(&t, &TokenSpan::singleton(i), &w, SampleMode::PromptOnly).unwrap();
            assert!((got - want).abs() < 1e-14);
        }
        let agg = aggregate_score(&t, &c).unwrap();
        let want = crate::rc::expected_rc_iot(&t, &TokenSpan::range(0, 5), &w, SampleMode::PromptOnly).unwrap();
        assert!((agg - want).abs() < 1e-14);
    }

    fn scores(values: &[f64], aggregate: f64) -> HeadScores {
        HeadScores {
            head: H,
            scores: values.to_vec(),
            aggregate: Some(aggregate),
        }
    }

    #[test]
    fn threshold_edges() {
        let inf = f64::INFINITY;
        let c = cfg(1, 1);
        let s = [scores(&[inf, 0.0, 0.5, 2.0, inf], 1.0)];
        let zero = plan_threshold(&s, &c, 0.0).unwrap();
        assert_eq!(zero.heads[0].keep, vec![true, false, true, true, true]);
        assert_eq!(zero.compression_ratio, 0.2);
        let all = plan_threshold(&s, &c, 10.0).unwrap();
        assert_eq!(all.heads[0].keep, vec![true, false, false, false, true]);
        let flat = [scores(&[inf, 0.0, 0.0, 0.0, inf], 0.0)];
        assert_eq!(plan_threshold(&flat, &c, 5.0).unwrap().evicted(), 0);
    }

    #[test]
    fn streaming_keeps_sink_and_window() {
        let t = LogitTensor::from_fn(H, 5, 5, |_, _| 0.0).unwrap();
        let c = EvictionConfig {
            scorer: Scorer::Streaming,
            ..cfg(2, 1)
        };
        let s = score_head(&HeadInputs::new(&t, 4), &c).unwrap();
        let plan = plan_ranked(&[s], &c, 1.0).unwrap();
        assert_eq!(plan.heads[0].keep, vec![true, false, false, true, true]);
    }

    #[test]
    fn knorm_evicts_zero_norm_first() {
        let t = LogitTensor::from_fn(H, 6, 6, |_, _| 0.0).unwrap();
        let mut k = vec![1.0; 12];
        k[6] = 0.0;
        k[7] = 0.0;
        let keys = VectorTensor::new(H, 2, k).unwrap();
        let c = EvictionConfig {
            scorer: Scorer::Knorm,
            ..cfg(2, 0)
        };
        let s = score_head(&HeadInputs::new(&t, 2).with_keys(&keys), &c).unwrap();
        let plan = plan_ranked(&[s], &c, 0.25).unwrap();
        assert_eq!(plan.heads[0].evicted_positions().collect::<Vec<_>>(), vec![3]);
        let missing = score_head(&HeadInputs::new(&t, 2), &c).unwrap_err();
        assert!(missing.to_string().contains("no keys tensor"));
    }

    #[test]
    fn postsoftmax_on_uniform_rows() {
        let t = LogitTensor::from_fn(H, 6, 6, |_, _| 0.7).unwrap();
        let c = EvictionConfig {
            scorer: Scorer::Postsoftmax,
            ..cfg(2, 0)
        };
        let s = baseline_scores(Scorer::Postsoftmax, &HeadInputs::new(&t, 4), &c).unwrap();
        // window rows 4 and 5 spread mass 1/5 and 1/6 over their keys
        for &v in &s[..4] {
            assert!((v - (1.0 / 5.0 + 1.0 / 6.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn build_plan_refuses_baselines() {
        let t = LogitTensor::from_fn(H, 6, 6, |_, _| 0.0).unwrap();
        let c = EvictionConfig {
            scorer: Scorer::Knorm,
            ..cfg(2, 0)
        };
        assert!(build_plan(&[HeadInputs::new(&t, 2)], &c).is_err());
    }

    #[test]
    fn config_invariants() {
        assert!(cfg(0, 0).validate(4).is_err());
        assert!(cfg(4, 0).validate(4).is_err());
        assert!(cfg(3, 2).validate(4).is_err());
        cfg(3, 1).validate(4).unwrap();
        assert_eq!("rcstat-exact".parse::<Scorer>().unwrap(), Scorer::RcstatExact);
        assert_eq!("postsoftmax".parse::<Scorer>().unwrap(), Scorer::Postsoftmax);
        assert!("tova".parse::<Scorer>().is_err());
    }

    fn three_token_head() -> (LogitTensor, ValueTensor) {
        let t = LogitTensor::from_fn(H, 2, 3, |i, j| match (i, j) {
            (0, 2) => 2.0,
            (1, 2) => 0.0,
            (2, 2) => 1.0,
            _ => 0.0,
        })
        .unwrap();
        let v = VectorTensor::new(H, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        (t, v)
    }

    #[test]
    fn renormalized_mixture_by_hand() {
        let (t, v) = three_token_head();
        // head_dim 4 -> scale 1/2; keep keys 1 and 2: weights e^0, e^0.5
        let out = values_under_eviction(&t, &v, &[false, true], 2, 4).unwrap();
        let (a, b) = (1.0, 0.5f64.exp());
        let want = [b / (a + b), (a + b) / (a + b)];
        assert!((out[0] - want[0]).abs() < 1e-15 && (out[1] - want[1]).abs() < 1e-15);
        let full = values_under_eviction(&t, &v, &[true, true], 2, 4).unwrap();
        assert_eq!(full, values_under_eviction(&t, &v, &[], 2, 4).unwrap());
        assert!(matches!(
            values_under_eviction(&t, &v, &[false, false], 1, 4),
            Err(Error::EmptyKeptSet(1))
        ));
    }

    #[test]
    fn negligible_mass_eviction() {
        let t = LogitTensor::from_fn(H, 3, 5, |i, _| if i == 1 { -1e6 } else { (i as f64) * 0.3 }).unwrap();
        let v = VectorTensor::new(H, 2, (0..10).map(|x| x as f64 + 1.0).collect()).unwrap();
        let full = values_under_eviction(&t, &v, &[true; 3], 4, 2).unwrap();
        let cut = values_under_eviction(&t, &v, &[true, false, true], 4, 2).unwrap();
        let err = l2(&full.iter().zip(&cut).map(|(a, b)| a - b).collect::<Vec<_>>());
        assert!(err < 1e-6 * l2(&full));
    }

    #[test]
    fn ver_is_zero_without_eviction() {
        let (t, v) = three_token_head();
        let plan = EvictionPlan::assemble(&cfg(1, 0), 2, None, vec![HeadPlan::new(H, None, vec![true, true])]);
        let logits = BTreeMap::from([(H, t)]);
        let values = BTreeMap::from([(H, v)]);
        let r = ver(&plan, &logits, &values, &TokenSpan::singleton(2), 4).unwrap();
        assert_eq!(r.mean, 0.0);
        assert_eq!(r.samples, 1);
    }

    #[test]
    fn ver_can_fall_when_more_is_evicted() {
        // equal logits; values (1,.5), (-1,.5), (0,.5), (0,.5)
        let t = LogitTensor::from_fn(H, 4, 4, |_, _| 0.0).unwrap();
        let v = VectorTensor::new(H, 2, vec![1.0, 0.5, -1.0, 0.5, 0.0, 0.5, 0.0, 0.5]).unwrap();
        let values = BTreeMap::from([(H, v)]);
        let logits = BTreeMap::from([(H, t)]);
        let run = |keep: Vec<bool>| {
            let plan = EvictionPlan::assemble(&cfg(1, 0), 4, None, vec![HeadPlan::new(H, None, keep)]);
            ver(&plan, &logits, &values, &TokenSpan::singleton(3), 4).unwrap().mean
        };
        let one = run(vec![false, true, true, true]);
        let two = run(vec![false, false, true, true]);
        assert!((one - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(two, 0.0);
    }

    #[test]
    fn plan_json_uses_bit_strings() {
        let plan = EvictionPlan::assemble(
            &cfg(1, 0),
            3,
            Some(1.0),
            vec![HeadPlan::new(H, Some(0.5), vec![true, false, true])],
        );
        let json = serde_json::to_string(&plan).unwrap();
        assert!(json.contains("\"keep\":\"101\""));
        let back: EvictionPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);
    }
}
