//! Caption training with a discriminability objective, on a synthetic scene world.
//!
//! The crate wires together three trainable pieces and the glue around them:
//!
//! * [`retrieval`] — a joint image/caption embedding scored by cosine
//!   similarity and trained with a hard-negative contrastive loss. Once
//!   trained it is frozen and reused as a proxy judge of how well a caption
//!   identifies its image.
//! * [`generator`] — conditional word-level caption models (a feature-seeded
//!   LSTM and an attention variant over region features) with greedy,
//!   sampled and beam decoding.
//! * [`training`] — maximum-likelihood pretraining followed by self-critical
//!   policy-gradient fine-tuning, where the reward can mix CIDEr-D with the
//!   frozen retrieval model's contrastive loss.
//!
//! Everything runs on CPU in `f64`; datasets are generated by [`synthworld`]
//! so the full pipeline is deterministic given its seeds.

pub mod error;
pub mod evalharness;
pub mod generator;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod retrieval;
pub mod synthworld;
pub mod textcore;
pub mod training;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
