pub mod codec;
pub mod error;
pub mod model;
pub mod target;
pub mod detector;
pub mod engine;
pub mod report;
pub mod sandbox;
pub mod aborts;
pub mod minimizer;
pub mod poc;
pub mod campaign;
