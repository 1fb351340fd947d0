//! Early-exit ("elastic") convolutional networks in plain 64-bit Rust.
//!
//! A backbone is described declaratively ([`arch`]), built into a small
//! reverse-mode graph ([`graph`]) and given extra classifiers at block
//! boundaries ([`elastic`]). [`flops`] prices every exit in multiply-accumulates
//! so [`elastic::anytime_predict`] can pick the deepest exit that fits a
//! budget. [`trainer`] runs the two-phase SGD schedule, while [`align`] and
//! [`metrics`] cover face alignment and age-estimation scoring.

pub mod align;
pub mod arch;
pub mod elastic;
pub mod flops;
pub mod graph;
pub mod metrics;
pub mod tensor;
pub mod trainer;
