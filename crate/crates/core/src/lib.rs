pub mod backbones;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod optim;
pub mod registry;
pub mod segmentors;
pub mod util;
