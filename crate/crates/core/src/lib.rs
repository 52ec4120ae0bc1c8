//! Object-aware video matting: a sequential, trimap-free pipeline that
//! predicts an alpha matte per frame from an initial coarse mask.

pub mod attention;
pub mod compositing;
pub mod config;
pub mod correction;
pub mod dataset;
pub mod error;
pub mod image;
pub mod manifest;
pub mod matching;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod pnm;
pub mod query;
pub mod rng;
pub mod selftest;
pub mod temporal;
pub mod tensor;

pub use error::{Error, Result};
