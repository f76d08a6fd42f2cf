//! Weakly supervised audio-visual multiple instance learning.
//!
//! A video is a bag of visual region proposals and audio segment proposals,
//! each already embedded as a feature vector. Only video-level labels are
//! available. The two-stream scoring network classifies every proposal,
//! weights it by a per-class softmax over proposals, pools to a video score
//! and fuses the two modalities after ℓ2 normalization. The per-proposal
//! weighted scores double as localization heatmaps for both modalities,
//! whether or not the audio and visual cues are synchronized.
//!
//! Module map:
//!
//! - [`data`]: bags, labels, datasets, the `AVB1` bag format and manifests
//! - [`nn`]: dense kernels with hand-written backward passes and a gradient checker
//! - [`scoring`]: two-stream proposal scoring, pooling, fusion and the hinge loss
//! - [`baselines`]: one-stream LSE and WSDDN-type variants
//! - [`model`]: a single entry point over all model variants plus checkpoints
//! - [`train`]: Adam, balanced batch sampling and the training loop
//! - [`eval`]: threshold tuning and micro / class-wise F1
//! - [`localize`]: per-proposal evidence export and hit@k
//! - [`synth`]: planted-signal asynchronous audio-visual datasets

pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod localize;
pub mod model;
pub mod nn;
pub mod real;
pub mod scoring;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
