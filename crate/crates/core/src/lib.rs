//! Desk-scale laboratory for semi-supervised self-training of an end-to-end
//! character sequence recognizer: synthetic corpus generation, a minimal
//! reverse-mode neural substrate, an encoder-attention-decoder model with a
//! CTC head, beam-search and MC-dropout decoding, confidence-based data
//! selection with CV-calibrated thresholds, and the full self-training
//! experiment matrix.

pub mod config;
pub mod confidence;
pub mod corpus;
pub mod decode;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod seeding;
pub mod ssl;
pub mod tape;
pub mod tensor;
