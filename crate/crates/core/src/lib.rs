//! Bar-level controllable style transfer for symbolic music.

pub mod attributes;
pub mod midi;
pub mod remi;
pub mod autodiff;
pub mod transformer;
pub mod bundle;
pub mod checkpoint;
pub mod config;
pub mod vae;
pub mod train;
pub mod corpus;
pub mod decode;
pub mod metrics;
pub mod experiments;
pub mod service;
