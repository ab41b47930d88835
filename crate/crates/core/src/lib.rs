//! Incremental conversion-rate prediction on categorical event streams.
//!
//! The crate trains two models side by side on an interval-partitioned
//! stream of ad events:
//!
//! * a tabular auto-encoder trained on every conversion event (whether or
//!   not it is click-attributed), whose bounded low-dimensional *code*
//!   summarizes an event, and
//! * a factorization-style CVR model trained on click events only, which
//!   consumes the code — expanded through a random Fourier feature map —
//!   as an extra linear feature block.
//!
//! Keeping non-click-attributed conversions out of the CVR model's label
//! set preserves calibration; the code channel is how their information
//! still reaches the model.
//!
//! [`trainer`] orchestrates the per-interval procedure and owns the
//! checkpoint format, [`auction`] simulates ranking an ad catalog under a
//! per-taxonomy-category cache, and [`generator`] produces synthetic
//! streams with planted nonlinear conversion structure for end-to-end
//! evaluation.

pub mod auction;
pub mod autoencoder;
pub mod checkpoint;
pub mod cvr;
pub mod error;
pub mod events;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod rff;
pub mod rng;
pub mod schema;
pub mod trainer;

pub use auction::{compute_bid, latency_bench, rank_auction, Ad, AuctionMode, AuctionResult};
pub use autoencoder::{AeDims, Autoencoder};
pub use checkpoint::Checkpoint;
pub use cvr::{CodeMode, CvrEval, CvrModel, Prediction};
pub use error::Error;
pub use events::{load_events, make_random_dataset, Event, EventKind, IntervalDataset};
pub use generator::{gen_synthetic, gen_synthetic_with_debug, DebugRecord, GeneratorConfig};
pub use metrics::{eval_diff, eval_gen, eval_randratio, eval_recloss, MetricsReport};
pub use nn::OptimizerState;
pub use rff::RffTransform;
pub use schema::{ColumnSchema, Schema, Side};
pub use trainer::{IntervalOutcome, Pipeline, PipelineConfig, TrainFlags};
