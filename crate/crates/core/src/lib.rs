pub mod cau;
pub mod codec;
pub mod dampening;
pub mod error;
pub mod fisher;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod tensor;
