pub mod corpus;
pub mod entity_memory;
pub mod error;
pub mod gradsuite;
pub mod heads;
pub mod mention_bio;
pub mod modelzoo;
pub mod nn;
pub mod numerics;
pub mod objectives;
pub mod probes;
pub mod training;

pub use error::{Error, Result};
