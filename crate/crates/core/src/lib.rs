//! Cross-modal audio-visual speaker co-learning.
//!
//! Frame-level audio and visual encoders feed two cross-modal boosters
//! (stacks of MaxFormer blocks: cross attention followed by max-feature-map
//! fusion). Four attentive-statistics-pooling decoders turn the original and
//! transferred streams into speaker embeddings, trained jointly with four
//! additive angular margin softmax losses and scored with cosine similarity,
//! audio-/visual-driven score fusion, EER and minDCF.
//!
//! Everything is built on a small reverse-mode differentiation tape over
//! 64-bit dense matrices ([`tensor`]).

pub mod checkpoint;
pub mod config;
pub mod decoders;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod maxformer;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scoring;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ParamTensor, Tape, Var};
