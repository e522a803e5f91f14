pub mod aggregation;
pub mod data;
pub mod embedding;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod seeds;
pub mod training;

pub use error::{Result, SegError};
