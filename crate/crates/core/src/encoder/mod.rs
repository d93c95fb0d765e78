//! Token encoder stacked under knowledgeable aggregators that fuse token
//! and entity streams.

pub mod config;
pub mod layers;
pub mod model;
pub mod params;

pub use config::ModelConfig;
pub use layers::{AlignmentMap, Dropout};
pub use model::{Encoder, EncoderInput, EncoderOutput, Layout};
pub use params::{Bound, ParamId, ParamStore};
