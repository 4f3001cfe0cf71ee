//! Cross-scenario incremental-sample retrieval at desk scale.
//!
//! The crate covers the full offline loop for learning retrieval candidates
//! that existing retrievers miss:
//!
//! 1. [`event_log`] — parse cross-scenario interaction logs and materialize
//!    per-request contexts (profile, behavior sequence, exposed items,
//!    future order targets).
//! 2. [`sample_builder`] — simulate the existing multi-retrieval state with
//!    an item-to-item + popularity baseline, split targets into the
//!    retrieved (RTG) and incremental (ITG) groups, and assemble training
//!    examples with sampled negatives.
//! 3. [`model_core`] / [`losses`] — a shared item tower plus three user
//!    towers (basic, incremental, alignment) trained with sampled-softmax
//!    contrastive objectives and hand-written analytic gradients.
//! 4. [`trainer`] — AdaGrad optimization with seeded, bit-reproducible runs
//!    and binary checkpoints.
//! 5. [`retrieval`] — exact (and optional approximate) inner-product top-K
//!    over item vectors.
//! 6. [`eval`] — incremental hitrate, the Base/Sup/Inc@K protocol, and
//!    exposure hitrate.
//! 7. [`synth`] — a seeded generator for cross-scenario logs with planted
//!    hidden interests, so the pipeline is checkable end to end.

pub mod error;
pub mod eval;
pub mod event_log;
pub mod losses;
pub mod mat;
pub mod model_core;
pub mod retrieval;
pub mod sample_builder;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
