pub mod attest;
pub mod config;
pub mod contract;
pub mod dispute;
pub mod econ;
pub mod model_exec;
pub mod simnet;
