//! Neural operator that represents spatial fields as per-site Gaussian
//! particles and evolves them with modal-window attention layers, plus the
//! supporting pieces: a reverse-mode tape, an AdamW training loop, a
//! pseudo-spectral advection-diffusion data generator, and evaluation
//! diagnostics.

pub mod attention;
pub mod basis;
pub mod config;
pub mod diagnostics;
pub mod diff;
pub mod error;
pub mod field;
pub mod lemma1;
pub mod operator;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{GpoError, Result};
