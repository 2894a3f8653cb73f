pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod head;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod types;
