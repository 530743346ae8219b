//! Benchmark harness for continual scene graph generation.

pub mod baselines;
pub mod convert;
pub mod dataset;
pub mod exemplar;
pub mod graph;
pub mod metrics;
pub mod predictor;
pub mod protocols;
pub mod report;
pub mod ras;
pub mod runner;
pub mod sampling;
pub mod synth;
