//! Loss corrections for class imbalance, confounding bias and unfair
//! classification, with the synthetic benchmark, trainers, group-wise
//! evaluation and sweep harness needed to compare them.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod losses;
pub mod model_io;
pub mod net;
pub mod report;
pub mod rng;
pub mod sweep;
pub mod synthdata;
pub mod train;

pub use dataset::{Dataset, Mode};
pub use error::{Error, Result};
