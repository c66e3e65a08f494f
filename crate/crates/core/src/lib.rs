//! Desk-scale contrastive image-text pipeline.
//!
//! A minimal dense-tensor engine with reverse-mode differentiation drives toy
//! dual encoders trained with the symmetric contrastive loss (fixed logit
//! scale 20) under AdaBelief + adaptive gradient clipping + cosine annealing,
//! in two phases (projection warm-up with frozen towers, then full
//! fine-tuning). Around the model: corpus ingestion and QC (proper-noun and
//! language filters, rating agreement), image augmentation, and the two
//! evaluation harnesses (caption→image retrieval with MRR@k, zero-shot
//! classification with Italian prompts and accuracy@k).

pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod encoders;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use tape::Tape;
pub use tensor::{Tensor, TensorError};
