use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::Context;
use rayon::prelude::*;
use serde::Serialize;

use rcstat::attribution::{attribute as run_attribution, AttributionConfig, HeadSelection, ModeChoice};
use rcstat::kv::{
    plan_budgeted, plan_threshold, score_heads, ver as run_ver, EvictionConfig, EvictionPlan, HeadInputs, HeadScores,
    Scorer, VerReport, DEFAULT_C,
};
use rcstat::rc::{four_areas, markov_tail_bound, AreaQuad};
use rcstat::tensor_io::{ContextualHead, GroundTruth};
use rcstat::{
    cross_samples, expected_rc_exact, self_samples, synth_logits, Dump, DumpReader, HeadLocator, SampleMode,
    SequenceSplit, SynthConfig, TokenSpan,
};

use crate::output::{num, opt, write_json, Table};
use crate::{usage, AttributeArgs, BoundsArgs, EvictArgs, Format, HeadsArgs, ModeArg, SynthArgs, VerArgs};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

fn load(input: &Path) -> anyhow::Result<Dump> {
    if !input.is_dir() {
        return Err(usage(format!("input directory {} does not exist", input.display())));
    }
    Ok(DumpReader::open(input)?.load_all()?)
}

fn split_of(dump: &Dump) -> anyhow::Result<SequenceSplit> {
    Ok(SequenceSplit::new(dump.prompt_len, dump.total_len)?)
}

/// Parses `start:end` into a half-open range.
fn parse_range(text: &str, flag: &str) -> anyhow::Result<TokenSpan> {
    let parsed = text
        .split_once(':')
        .and_then(|(s, e)| Some((s.trim().parse::<usize>().ok()?, e.trim().parse::<usize>().ok()?)));
    match parsed {
        Some((s, e)) if s < e => Ok(TokenSpan::range(s, e)),
        _ => Err(usage(format!(
            "--{flag} expects start:end with start < end, got {text:?}"
        ))),
    }
}

fn head_label(h: HeadLocator) -> String {
    format!("L{}H{}", h.layer, h.head)
}

pub fn synth(args: SynthArgs) -> anyhow::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing generator config {}", path.display()))?
        }
        None => SynthConfig::default(),
    };
    let overrides = [
        (&mut cfg.num_layers, args.layers),
        (&mut cfg.num_heads, args.heads),
        (&mut cfg.head_dim, args.head_dim),
        (&mut cfg.prompt_len, args.prompt_len),
        (&mut cfg.total_len, args.total_len),
    ];
    for (field, value) in overrides {
        if let Some(v) = value {
            *field = v;
        }
    }
    if !args.planted.is_empty() {
        cfg.planted = args.planted.clone();
    }
    if !args.contextual.is_empty() {
        cfg.contextual = args
            .contextual
            .iter()
            .map(|s| parse_contextual(s))
            .collect::<anyhow::Result<_>>()?;
    }
    if cfg.prompt_len < cfg.recent_len {
        cfg.recent_len = cfg.prompt_len;
    }
    let synthetic = synth_logits(&cfg, args.seed)?;
    synthetic.dump.write(&args.output)?;
    write_truth(&args.output.join(GROUND_TRUTH_FILE), &synthetic.truth)
}

fn write_truth(path: &Path, truth: &GroundTruth) -> anyhow::Result<()> {
    let mut json = serde_json::to_string_pretty(truth)?;
    json.push('\n');
    fs::write(path, json).with_context(|| format!("writing {}", path.display()))
}

fn parse_contextual(text: &str) -> anyhow::Result<ContextualHead> {
    let bad = || usage(format!("--contextual expects layer:head:boost[:offset], got {text:?}"));
    let parts: Vec<&str> = text.split(':').collect();
    if !(3..=4).contains(&parts.len()) {
        return Err(bad());
    }
    let layer = parts[0].parse().map_err(|_| bad())?;
    let head = parts[1].parse().map_err(|_| bad())?;
    let boost = parts[2].parse().map_err(|_| bad())?;
    let offset = match parts.get(3) {
        Some(p) => p.parse().map_err(|_| bad())?,
        None => 0.0,
    };
    Ok(ContextualHead::new(HeadLocator::new(layer, head), boost, offset))
}

#[derive(Serialize)]
struct HeadRow {
    layer: usize,
    head: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    exact: Option<f64>,
    #[serde(flatten)]
    areas: AreaQuad,
    above_tau: bool,
}

#[derive(Serialize)]
struct HeadsReport {
    tau: f64,
    count_above_tau: usize,
    heads: Vec<HeadRow>,
}

pub fn heads(args: HeadsArgs) -> anyhow::Result<()> {
    if args.tau.is_nan() {
        return Err(usage("--tau must be a number"));
    }
    let dump = load(&args.input)?;
    let split = split_of(&dump)?;
    let (p, g) = (split.prompt(), split.generation());
    let with_exact = args.mode != ModeArg::UpperBound;
    let rows = dump
        .logits
        .par_iter()
        .map(|(&h, t)| {
            let cross = cross_samples(t, &p, &g, SampleMode::Generation).map_err(|e| at(e, h))?;
            let selfs = self_samples(t, &g, &g, SampleMode::Generation).map_err(|e| at(e, h))?;
            let areas = four_areas(&cross, &selfs);
            Ok(HeadRow {
                layer: h.layer,
                head: h.head,
                exact: with_exact.then(|| expected_rc_exact(&cross, &selfs)),
                areas,
                above_tau: areas.ub_x_minus_y > args.tau,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let count = rows.iter().filter(|r| r.above_tau).count();
    let path = args.out.output.as_deref();
    match args.format {
        Format::Json => write_json(
            path,
            &HeadsReport {
                tau: args.tau,
                count_above_tau: count,
                heads: rows,
            },
        ),
        Format::Csv => {
            let mut table = Table::new([
                "layer",
                "head",
                "exact",
                "ub_x_minus_y",
                "lb_x_minus_y",
                "ub_y_minus_x",
                "lb_y_minus_x",
                "above_tau",
            ]);
            for r in &rows {
                let a = r.areas;
                table.push(vec![
                    r.layer.to_string(),
                    r.head.to_string(),
                    opt(r.exact),
                    num(a.ub_x_minus_y),
                    num(a.lb_x_minus_y),
                    num(a.ub_y_minus_x),
                    num(a.lb_y_minus_x),
                    r.above_tau.to_string(),
                ]);
            }
            table.write_csv(path)?;
            eprintln!("heads above tau = {}: {count}", args.tau);
            Ok(())
        }
    }
}

fn at(e: rcstat::Error, head: HeadLocator) -> anyhow::Error {
    anyhow::Error::new(e).context(format!("layer {} head {}", head.layer, head.head))
}

#[derive(Serialize)]
struct MarkovBound {
    delta: f64,
    bound: f64,
}

#[derive(Serialize)]
struct BoundsRow {
    layer: usize,
    head: usize,
    exact: f64,
    #[serde(flatten)]
    areas: AreaQuad,
    markov: Vec<MarkovBound>,
}

pub fn bounds(args: BoundsArgs) -> anyhow::Result<()> {
    if let Some(d) = args.delta.iter().find(|d| !(**d > 0.0 && **d <= 1.0)) {
        return Err(usage(format!("--delta {d} outside (0, 1]")));
    }
    let dump = load(&args.input)?;
    let split = split_of(&dump)?;
    let span = match &args.span {
        Some(s) => parse_range(s, "span")?,
        None => split.prompt(),
    };
    let gprime = match &args.gprime {
        Some(s) => parse_range(s, "gprime")?,
        None => split.generation(),
    };
    let rows = dump
        .logits
        .par_iter()
        .map(|(&h, t)| {
            let cross = cross_samples(t, &span, &gprime, SampleMode::Generation).map_err(|e| at(e, h))?;
            let selfs = self_samples(t, &gprime, &gprime, SampleMode::Generation).map_err(|e| at(e, h))?;
            let areas = four_areas(&cross, &selfs);
            let markov = args
                .delta
                .iter()
                .map(|&delta| {
                    Ok(MarkovBound {
                        delta,
                        bound: markov_tail_bound(areas.ub_x_minus_y, delta)?,
                    })
                })
                .collect::<rcstat::Result<_>>()?;
            Ok(BoundsRow {
                layer: h.layer,
                head: h.head,
                exact: expected_rc_exact(&cross, &selfs),
                areas,
                markov,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let path = args.out.output.as_deref();
    match args.format {
        Format::Json => write_json(path, &rows),
        Format::Csv => {
            let mut header: Vec<String> = [
                "layer",
                "head",
                "exact",
                "ub_x_minus_y",
                "lb_x_minus_y",
                "ub_y_minus_x",
                "lb_y_minus_x",
            ]
            .map(String::from)
            .to_vec();
            header.extend(args.delta.iter().map(|d| format!("markov_{d}")));
            let mut table = Table::new(header);
            for r in &rows {
                let a = r.areas;
                let mut row = vec![
                    r.layer.to_string(),
                    r.head.to_string(),
                    num(r.exact),
                    num(a.ub_x_minus_y),
                    num(a.lb_x_minus_y),
                    num(a.ub_y_minus_x),
                    num(a.lb_y_minus_x),
                ];
                row.extend(r.markov.iter().map(|m| num(m.bound)));
                table.push(row);
            }
            table.write_csv(path)
        }
    }
}

fn head_inputs(dump: &Dump) -> Vec<HeadInputs<'_>> {
    dump.logits
        .iter()
        .map(|(h, t)| {
            let inputs = HeadInputs::new(t, dump.head_dim);
            match dump.keys.get(h) {
                Some(k) => inputs.with_keys(k),
                None => inputs,
            }
        })
        .collect()
}

/// Plans for one scorer at every `c`. Baseline scorers have no threshold,
/// so each head evicts as many tokens as the exact RC plan does at that `c`.
struct Planner {
    cfg: EvictionConfig,
    rc_cfg: EvictionConfig,
    rc_scores: Vec<HeadScores>,
    scores: Option<Vec<HeadScores>>,
}

impl Planner {
    fn new(inputs: &[HeadInputs<'_>], cfg: EvictionConfig) -> anyhow::Result<Self> {
        let rc_cfg = if cfg.scorer.is_rc() {
            cfg.clone()
        } else {
            EvictionConfig {
                scorer: Scorer::RcstatExact,
                ..cfg.clone()
            }
        };
        let rc_scores = score_heads(inputs, &rc_cfg)?;
        let scores = if cfg.scorer.is_rc() {
            None
        } else {
            Some(score_heads(inputs, &cfg)?)
        };
        Ok(Self {
            cfg,
            rc_cfg,
            rc_scores,
            scores,
        })
    }

    fn plan(&self, c: f64) -> anyhow::Result<EvictionPlan> {
        let rc_plan = plan_threshold(&self.rc_scores, &self.rc_cfg, c)?;
        let Some(scores) = &self.scores else {
            return Ok(rc_plan);
        };
        let budgets: Vec<usize> = rc_plan.heads.iter().map(|h| h.evicted).collect();
        let mut plan = plan_budgeted(scores, &self.cfg, &budgets)?;
        plan.c = Some(c);
        Ok(plan)
    }
}

#[derive(Serialize)]
struct SweepHead {
    layer: usize,
    head: usize,
    evicted: usize,
    compression_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    ver: Option<f64>,
}

#[derive(Serialize)]
struct SweepRow {
    c: f64,
    default: bool,
    compression_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_ver: Option<f64>,
    heads: Vec<SweepHead>,
}

#[derive(Serialize)]
struct SweepReport {
    scorer: Scorer,
    window: usize,
    sink: usize,
    prompt_len: usize,
    rows: Vec<SweepRow>,
}

fn has_all_values(dump: &Dump) -> bool {
    dump.logits.keys().all(|h| dump.values.contains_key(h))
}

pub fn evict(args: EvictArgs) -> anyhow::Result<()> {
    if args.c.is_empty() {
        return Err(usage("--c needs at least one value"));
    }
    if let Some(c) = args.c.iter().find(|c| !(**c >= 0.0 && c.is_finite())) {
        return Err(usage(format!("--c {c} must be a non-negative number")));
    }
    let dump = load(&args.input)?;
    let cfg = EvictionConfig {
        window: args.window,
        sink: args.sink,
        scorer: args.scorer,
        ..EvictionConfig::default()
    };
    cfg.validate(dump.prompt_len)?;
    let inputs = head_inputs(&dump);
    let planner = Planner::new(&inputs, cfg.clone())?;
    let ver_rows = (!args.no_ver && has_all_values(&dump) && dump.total_len > dump.prompt_len)
        .then(|| TokenSpan::range(dump.prompt_len, dump.total_len));

    let mut rows = Vec::with_capacity(args.c.len());
    for &c in &args.c {
        let plan = planner.plan(c)?;
        let report = match &ver_rows {
            Some(r) => Some(run_ver(&plan, &dump.logits, &dump.values, r, dump.head_dim)?),
            None => None,
        };
        let heads = plan
            .heads
            .iter()
            .enumerate()
            .map(|(i, h)| SweepHead {
                layer: h.layer,
                head: h.head,
                evicted: h.evicted,
                compression_ratio: h.compression_ratio(),
                ver: report.as_ref().map(|r| r.per_head[i].mean),
            })
            .collect();
        rows.push(SweepRow {
            c,
            default: c == DEFAULT_C,
            compression_ratio: plan.compression_ratio,
            mean_ver: report.map(|r| r.mean),
            heads,
        });
    }

    if let Some(path) = &args.plan_out {
        write_json(Some(path), &planner.plan(DEFAULT_C)?)?;
    }

    let path = args.out.output.as_deref();
    match args.format {
        Format::Json => write_json(
            path,
            &SweepReport {
                scorer: cfg.scorer,
                window: cfg.window,
                sink: cfg.sink,
                prompt_len: dump.prompt_len,
                rows,
            },
        ),
        Format::Csv => {
            let mut header: Vec<String> = vec!["c".into(), "default".into(), "compression_ratio".into()];
            if ver_rows.is_some() {
                header.push("mean_ver".into());
            }
            header.extend(dump.logits.keys().map(|&h| head_label(h)));
            let mut table = Table::new(header);
            for r in &rows {
                let mut row = vec![num(r.c), r.default.to_string(), num(r.compression_ratio)];
                if ver_rows.is_some() {
                    row.push(opt(r.mean_ver));
                }
                row.extend(r.heads.iter().map(|h| num(h.compression_ratio)));
                table.push(row);
            }
            table.write_csv(path)
        }
    }
}

pub fn ver(args: VerArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&args.plan).with_context(|| format!("reading {}", args.plan.display()))?;
    let plan: EvictionPlan =
        serde_json::from_str(&text).with_context(|| format!("parsing plan {}", args.plan.display()))?;
    let dump = load(&args.input)?;
    if plan.prompt_len != dump.prompt_len {
        anyhow::bail!(
            "plan prompt length {} does not match dump prompt length {}",
            plan.prompt_len,
            dump.prompt_len
        );
    }
    let rows = split_of(&dump)?.generation();
    let report: VerReport = run_ver(&plan, &dump.logits, &dump.values, &rows, dump.head_dim)?;
    let path = args.out.output.as_deref();
    match args.format {
        Format::Json => write_json(path, &report),
        Format::Csv => {
            let mut table = Table::new(["layer", "head", "mean_ver", "rows"]);
            for h in &report.per_head {
                table.push(vec![
                    h.layer.to_string(),
                    h.head.to_string(),
                    num(h.mean),
                    h.rows.to_string(),
                ]);
            }
            table.write_csv(path)?;
            eprintln!("mean VER over {} rows: {}", report.samples, report.mean);
            Ok(())
        }
    }
}

pub fn attribute(args: AttributeArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&args.spans).with_context(|| format!("reading {}", args.spans.display()))?;
    let spans: Vec<TokenSpan> =
        serde_json::from_str(&text).with_context(|| format!("malformed span file {}", args.spans.display()))?;
    let dump = load(&args.input)?;
    let split = split_of(&dump)?;
    let gprime = match &args.gprime {
        Some(s) => parse_range(s, "gprime")?,
        None => split.generation(),
    };
    let config = AttributionConfig {
        selection: if args.bottom {
            HeadSelection::Bottom(args.k)
        } else {
            HeadSelection::Top(args.k)
        },
        mode: match args.mode {
            ModeArg::Exact => ModeChoice::Exact,
            ModeArg::UpperBound => ModeChoice::UpperBound,
            ModeArg::Auto => ModeChoice::default(),
        },
        strict_disjoint: args.strict,
    };
    let logits: &BTreeMap<HeadLocator, _> = &dump.logits;
    let result = run_attribution(logits, split, &spans, &gprime, &config)?;
    let path = args.out.output.as_deref();
    match args.format {
        Format::Json => write_json(path, &result),
        Format::Csv => {
            let mut table = Table::new(["span", "raw", "score", "best"]);
            for (i, s) in result.spans.iter().enumerate() {
                table.push(vec![
                    s.span.to_string(),
                    num(s.raw),
                    num(s.score),
                    (i == result.best_span).to_string(),
                ]);
            }
            table.write_csv(path)
        }
    }
}
