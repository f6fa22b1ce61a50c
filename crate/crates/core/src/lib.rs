//! Relative contextualization (RC) over pre-softmax attention logits.
//!
//! For a head with raw logits `f(i, j) = <q_j, k_i>`, RC compares the logits
//! a prompt span receives from generated queries (the *cross* sample) with
//! the logits generated tokens receive from each other (the *self* sample).
//! `Z = max(X - Y, 0)` for independent draws `X` and `Y`, and its
//! expectation is the core statistic. On top of it the crate provides
//!
//! - closed-form CDF-area bounds on `E[Z]` and a Markov tail bound ([`rc`]),
//! - RC-driven KV-cache eviction plans and value-error evaluation ([`kv`]),
//! - prompt-span attribution through RC-ranked heads ([`attribution`]),
//! - the logit dump format and a seeded synthetic generator ([`tensor_io`]).
//!
//! ```
//! use rcstat::{expected_rc_exact, EmpiricalSample};
//!
//! let x = EmpiricalSample::new(vec![0.0, 2.0])?;
//! let y = EmpiricalSample::new(vec![1.0, 3.0])?;
//! assert_eq!(expected_rc_exact(&x, &y), 0.25);
//! # Ok::<(), rcstat::Error>(())
//! ```

pub mod attribution;
pub mod contextualization;
pub mod error;
pub mod kv;
pub mod rc;
pub mod tensor_io;

pub use attribution::{
    attribute, rank_heads, AttributionConfig, AttributionResult, HeadRanking, HeadSelection, ModeChoice,
};
pub use contextualization::{cross_samples, self_samples, EmpiricalSample, SampleMode, SequenceSplit, TokenSpan};
pub use error::{Error, Result};
pub use kv::{build_plan, ver, EvictionConfig, EvictionPlan, Scorer};
pub use rc::{
    expected_rc_exact, expected_rc_iot, four_areas, markov_tail_bound, rc_bounds, rc_score, AreaQuad, ExcessTable,
    RcBounds, RcMode,
};
pub use tensor_io::{synth_logits, Dump, DumpReader, HeadLocator, LogitTensor, Manifest, SynthConfig, TensorKind};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/samples.md")]
    mod samples {}
    #[doc = include_str!("../../../book/src/bounds.md")]
    mod bounds {}
    #[doc = include_str!("../../../book/src/eviction.md")]
    mod eviction {}
    #[doc = include_str!("../../../book/src/attribution.md")]
    mod attribution {}
    #[doc = include_str!("../../../book/src/dump-format.md")]
    mod dump_format {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
