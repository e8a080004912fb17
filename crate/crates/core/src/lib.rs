//! Chunk-streaming CTC recognition with zero-prompt decoding.
//!
//! Each chunk of real feature frames can be followed by zeroed frames whose
//! predictions are shown as provisional text and replaced once real audio
//! arrives. The crate contains the encoder and its CTC head, the streaming
//! engine, display-latency and prompt-quality metrics, and a small synthetic
//! corpus trainer used to exercise all of it end to end.

pub mod corpus;
pub mod ctc;
pub mod encoder;
pub mod engine;
pub mod linalg;
pub mod metrics;
pub mod tensorfile;
pub mod trainer;
