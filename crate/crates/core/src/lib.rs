//! Dual-model marked temporal point process forecasting.
//!
//! Two models look at the same event stream at different scales:
//!
//! - an *event model* ([`event_model`]): a GRU over (mark, gap, hour)
//!   inputs that predicts a softmax over the next mark and a Gaussian over
//!   the next inter-arrival gap;
//! - a *count model* ([`count_model`]): a feed-forward network that
//!   predicts an independent Gaussian over the number of events in each
//!   future bin of width Δ.
//!
//! [`inference`] combines them bin by bin. The RNN states for a bin are
//! fixed by a mode rollout, and for every candidate count `c` a small
//! concave QP over the gaps places exactly `c` events in the bin. The
//! count maximizing gap likelihood plus count likelihood is found by
//! binary search. The same module hosts the event-only, count-only,
//! fixed-count and hierarchical decoders used as baselines.
//!
//! [`metrics`] implements the sequence Wasserstein distance, CountMAE and
//! BLEU; [`synthetic`] generates Hawkes, seasonal Poisson and
//! deterministic-gap streams; [`pipeline`] wires everything into a
//! reproducible end-to-end run.
//!
//! Instance-level work runs on rayon when the `parallel` feature is on
//! (default) and sequentially otherwise, see [`parallel`].

pub mod checkpoint;
pub mod count_model;
pub mod error;
pub mod event_model;
pub mod event_stream;
pub mod inference;
pub mod metrics;
pub mod neural;
pub mod parallel;
pub mod pipeline;
pub mod synthetic;

pub use error::{Error, Result};
pub use event_stream::{BinGrid, Event, EventSequence, ForecastInstance, MarkVocab};
pub use neural::GaussianParams;
