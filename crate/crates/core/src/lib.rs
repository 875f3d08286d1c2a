//! Multi-channel continuous speech separation from inter-microphone
//! correlation features.
//!
//! The pipeline: multi-channel STFT ([`stft`]) → PHAT-β weighted pairwise
//! correlations ([`features`]) → a dual-path time/frequency plus spectral
//! transformer ([`model`]) that estimates multi-tap complex filters →
//! filtering of the mixture ([`filter`]). [`css`] runs the network chunk-wise
//! over long recordings and optionally adds a Wiener beamformer and a second
//! enhancement network. [`training`], [`mixsim`] and [`eval`] cover losses and
//! optimisation, synthetic data, and metrics/cost accounting.

pub mod config;
pub mod css;
pub mod error;
pub mod eval;
pub mod features;
pub mod filter;
pub mod mixsim;
pub mod model;
pub mod par;
pub mod stft;
pub mod tensor;
pub mod training;
pub mod wav;

pub use error::{Error, Result};
