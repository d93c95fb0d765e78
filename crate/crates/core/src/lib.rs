//! Knowledge-enhanced language representation at desk scale.
//!
//! The crate covers the whole pipeline: TransE entity embeddings
//! ([`kg`]), token/entity aligned corpora and pretraining examples
//! ([`corpus`]), a two-stack encoder whose upper layers fuse token and
//! entity streams ([`encoder`]), the pretraining objectives
//! ([`objectives`]), and fine-tuning for entity typing and relation
//! classification ([`tasks`]). Everything runs on the small reverse-mode
//! tape in [`numerics`].

pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod ids;
pub mod kg;
pub mod numerics;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tasks;

pub use error::{Error, Result};
