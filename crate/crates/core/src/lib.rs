//! Subtrajectory-balance alignment for autoregressive token policies.
//!
//! The crate trains a softmax next-token policy so that the probability of
//! each complete sequence becomes proportional to a sharpened internal reward
//! `p_ref(x)^(1/T)` computed from a frozen reference policy. Everything runs at
//! a scale where the full terminal distribution can be enumerated, so
//! alignment is checked exactly rather than estimated.
//!
//! Module map:
//!
//! - [`seq`] / [`dist`]: vocabulary, sequences, trajectories, finite
//!   distributions and log-space numerics.
//! - [`policy`]: tabular and k-gram softmax policies with analytic
//!   log-probability gradients.
//! - [`reward`]: sharpened reference reward and the temperature decay schedule.
//! - [`trainer`]: the subtrajectory-balance loss, its trajectory-balance
//!   ablation, Adam with warmup + cosine annealing, and collapse detection.
//! - [`sampling`]: decoding strategies (multinomial, low temperature, top-k,
//!   top-p, repetition aware).
//! - [`uncertainty`]: token/word/utterance entropy, UUR and correlation
//!   statistics.
//! - [`eval`]: exhaustive terminal enumeration, divergences, edit distance and
//!   the noisy-copy hallucination benchmark.
//! - [`io`]: run configuration, corpus text format, binary checkpoints and
//!   metrics records.

// `!(x > 0.0)` guards are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dist;
pub mod error;
pub mod eval;
pub mod io;
pub mod par;
pub mod policy;
pub mod reward;
pub mod sampling;
pub mod seq;
pub mod trainer;
pub mod uncertainty;

pub use dist::{entropy, log_sum_exp, normalize_logs, Distribution};
pub use error::{Error, Result};
pub use policy::{Backend, Conditioning, ContextKey, GradTable, ParametricPolicy, ReferenceModel, RowInit};
pub use reward::{RewardModel, TemperatureSchedule};
pub use seq::{Prompt, TokenId, TokenSequence, Trajectory, Vocabulary};
