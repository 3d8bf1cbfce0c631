//! Speaker-gender protection toolkit.
//!
//! Pipeline stages: synthetic corpus generation ([`synth`]), audio shaping
//! ([`audio_io`]), Praat-style acoustic features ([`features`]), classic
//! linear classifiers ([`linmodels`]), a raw-waveform CNN gender classifier
//! ([`neuralnet`]), PGD waveform perturbations ([`attack`]), and evaluation
//! reports ([`eval`]).

pub mod attack;
pub mod audio_io;
pub mod error;
pub mod eval;
pub mod features;
pub mod linmodels;
pub mod neuralnet;
pub mod synth;

pub use error::{Error, Result};
