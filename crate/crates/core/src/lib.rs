pub mod bootstrap;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod frontend;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod patching;
pub mod pipeline;
pub mod rng;
