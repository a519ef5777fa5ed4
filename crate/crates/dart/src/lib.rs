//! Dynamic adaptive region tokenizer.
//!
//! Splits an image into a fixed number of content-dependent rectangular
//! patches: a learnable score map is turned into row and column boundaries by
//! differentiable inverse-CDF quantiles, each region is bilinearly resampled
//! to a fixed patch size, and the whole pipeline carries analytic reverse
//! derivatives so region scores can be trained end to end. Uniform scores
//! reproduce the conventional fixed-grid tokenizer exactly.
//!
//! See the crate examples for runnable walkthroughs of each capability, and
//! the `dart` binary for the command-line surface.

pub mod cli;
pub mod error;
pub mod image;
pub mod partition;
pub mod pnm;
pub mod quantile;
pub mod resample;
pub mod scoremap;
pub mod tokenize;
pub mod toytrain;

pub use error::{DartError, Result};
pub use image::{FrameStack, Image};
pub use partition::{Partition, PartitionMode, PartitionSpec};
pub use quantile::{MassMode, PiecewiseDistribution, QuantileJacobian, QuantileSet};
pub use resample::{PatchTensor, PosEmbedMap, Rect};
pub use scoremap::{RawScoreMap, ScoreMap, Scorer};
pub use tokenize::{ProjectionWeights, TokenBatch, TokenizerConfig};
