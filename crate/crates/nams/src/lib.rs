//! Amortized design inference for a deterministic procedural overhead-imagery
//! simulator.
//!
//! The crate trains a variational embedding of categorical scene designs plus
//! a differentiable surrogate of the simulator's image features, then infers
//! the design behind unlabeled target imagery by gradient search in the
//! embedding — no simulator calls at inference time. Two baselines ship with
//! it: direct regression from features to designs, and multinomial
//! distribution matching driven by a score-function gradient estimator over
//! kernel density estimates.
//!
//! Modules:
//! - [`tensor`]: dense f64 tensors, reverse-mode autodiff, layers, ADAM
//! - [`sim`]: the procedural tile simulator, texture banks, similarity ranking
//! - [`features`]: hand-crafted image features, dihedral augmentation, group averaging
//! - [`nams_core`]: the encoder/decoder/predictor model, training, latent search
//! - [`baselines`]: direct regression and multinomial distribution matching
//! - [`downstream`]: per-pixel segmentation proxy and IoU scoring
//! - [`harness`]: experiment orchestration, reports, simulator-call accounting

pub mod baselines;
pub mod downstream;
pub mod features;
pub mod harness;
pub mod nams_core;
pub mod rng;
pub mod sim;
pub mod tensor;
