pub mod codec;
pub mod entropy;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod rangecoder;
pub mod ssm;
pub mod tensor;
pub mod trainer;
pub mod transforms;
