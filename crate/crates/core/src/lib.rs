pub mod advantage;
pub mod config;
pub mod envs;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod scheduler;
pub mod sim;
pub mod trainer;
pub mod traj;

pub use error::{Error, Result, TrainTarget};
