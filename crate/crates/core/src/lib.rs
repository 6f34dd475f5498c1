//! Reliability classification of tweet cascades from text embeddings and
//! user-network representations.

pub mod cluster;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod m2v;
pub mod model;
pub mod netrep;
pub mod pipeline;
pub mod retrofit;

pub use error::{Error, ErrorClass, Result};
