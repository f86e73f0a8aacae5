//! Confidence-aware training losses and small self-consuming generative loops
//! for studying model collapse: a 1-D Gaussian, Gaussian mixtures, and a tiny
//! next-token model trained on accumulating synthetic data.

pub mod corpus;
pub mod error;
pub mod framework;
pub mod gaussian_loop;
pub mod gmm;
pub mod losses;
pub mod mathcore;
pub mod metrics;
pub mod rng;
pub mod tinylm;

pub use error::{Error, Result};
pub use rng::RngStream;
