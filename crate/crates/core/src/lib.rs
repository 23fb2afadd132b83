//! Self-supervised speech representation learning at desk scale.
//!
//! The crate implements the full pipeline: a convolutional feature encoder
//! plus Transformer context network over raw waveforms, Gumbel-softmax
//! product quantization of the latent frames, contrastive pre-training with
//! diversity and L2 regularizers, speaker/language fine-tuning heads
//! (AM-softmax and cross-entropy, joint multi-task form), linear probing of
//! frozen layers, and the evaluation stack (cosine trial scoring, EER, Cavg,
//! pooled detection EER).
//!
//! Everything runs in 64-bit floats on a small fixed-vocabulary reverse-mode
//! tape, which keeps runs deterministic and finite-difference checkable.

pub mod data;
pub mod encoder;
pub mod error;
pub mod finetuning;
pub mod metrics;
pub mod numerics;
pub mod pretraining;
pub mod quantizer;
pub mod rng;

pub use error::{Error, Result};
