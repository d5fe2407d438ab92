pub mod calibration;
pub mod config;
pub mod consensus;
pub mod engine;
pub mod error;
pub mod gateway;
pub mod harness;
pub mod math;
pub mod optimizer;
pub mod roles;
pub mod solvers;
pub mod types;
