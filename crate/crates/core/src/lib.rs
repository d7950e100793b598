pub mod tensor;
pub mod metrics;
pub mod data;
pub mod model;
pub mod training;
pub mod cli;
