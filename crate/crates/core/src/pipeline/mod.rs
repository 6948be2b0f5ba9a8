//! Training, fine-tuning and evaluation drivers plus their file formats.

pub mod ablation;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod evaluate;
pub mod finetune;
pub mod inspect;
pub mod manifest;
pub mod metrics;
pub mod pretrain;
pub mod records;
pub mod synth;
