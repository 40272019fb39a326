//! Image captioning over bottom-up region features with residual top-down
//! attention at two levels: a region pooler that fuses each RoI grid into a
//! vector, and a two-LSTM decoder that attends over the pooled regions.

pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod decoder;
pub mod decoding;
pub mod experiment;
pub mod features;
pub mod gradcheck;
mod init;
pub mod io;
pub mod metrics;
pub mod planted;
pub mod synth;
pub mod threads;
pub mod training;
pub mod vocab;
