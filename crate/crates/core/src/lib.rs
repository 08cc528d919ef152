//! Object discovery in video with motion-guided slot attention and a
//! learned reconstruction space.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod decoders;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod hungarian;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod reconspace;
pub mod slots;
pub mod synthdata;
pub mod trainer;
pub mod visuals;

pub use error::{Error, Result};
