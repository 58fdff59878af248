pub mod error;
pub mod tensor;
pub mod network;
pub mod io;
pub mod synth;
pub mod adversary;
pub mod metrics;
pub mod profile;
pub mod data;
pub mod harness;
