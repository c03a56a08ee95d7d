//! Audio-visual segmentation at desk scale: implicit-text bridging of vision
//! and audio, diffusion-based orthogonal counterfactual text generation, and
//! distribution-aware tri-modal contrastive learning, wired into a trainable
//! pipeline with a synthetic-data harness.
//!
//! Everything runs on a small f64 reverse-mode tape ([`autodiff`]) so that
//! analytic gradients can be checked against finite differences end to end.

pub mod autodiff;
pub mod cdcl;
pub mod counterfactual;
pub mod data_synth;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod implicit_text;
pub mod metrics;
pub mod nn;
pub mod seg_decoder;
pub mod temporal_context;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
