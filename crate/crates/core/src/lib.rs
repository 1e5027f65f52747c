//! Coordinate-token contour extraction at desk scale.
//!
//! A small vision encoder, projector and decoder-only language model emit
//! building outlines as `[x..][y..]` coordinate tokens. The crate covers
//! geometry primitives, a synthetic building generator, the token codec,
//! the network with hand-written backpropagation, the three training stages
//! (pretraining, instruction fine-tuning, preference optimization) and
//! COCO-style polygon metrics.

pub mod codec;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod model;
pub mod synthdata;
pub mod training;

pub use codec::{PreferencePair, TokenId, TokenSequence, Vocab};
pub use error::{Error, Result};
pub use evaluation::{EvalMode, EvalResult};
pub use geometry::{BBox, Point, Polygon};
pub use synthdata::{CropSample, DataRecord, GenParams, GrayImage, Split};
