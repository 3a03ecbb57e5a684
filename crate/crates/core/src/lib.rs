//! Batch-level experience replay with review for continual learning.
//!
//! The crate is organised around the pieces of a continual-learning run:
//!
//! - [`stream`]: the data model and the NI / Multi-Task-NC / NIC stream protocols,
//!   either over a seeded synthetic drift model or a small on-disk corpus.
//! - [`memory`]: the capacity-bounded episodic buffer with per-batch quota insertion.
//! - [`learner`]: a frozen seeded featurizer with a trainable softmax head, trained by
//!   minibatch SGD on cross-entropy.
//! - [`trainer`]: batch-level experience replay with review, the fine-tuning baseline
//!   and the independent-model-per-task strategy.
//! - [`augment`]: the crop / flip / photometric / distortion / resize / normalize chain.
//! - [`metrics`]: accuracy-over-time, timing, RAM and disk accounting.
//! - [`config`] and [`harness`]: run configuration, orchestration and ablations.

pub mod augment;
pub mod config;
pub mod error;
pub mod harness;
pub mod learner;
pub mod memory;
pub mod metrics;
pub mod rng;
pub mod stream;
pub mod trainer;

pub use error::{Error, Result};
