pub mod baselines;
pub mod box_aggregator;
pub mod crowdsim;
pub mod dataset;
pub mod detectors;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod io;
pub mod label_aggregator;
pub mod matcher;
pub mod metrics;
pub mod pipeline;
pub mod special;
