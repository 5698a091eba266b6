//! Semantic global reasoning over latent concept regions.
//!
//! Soft region masks pool backbone features into a small set of tokens, a
//! transformer reasons over the tokens, and the result is projected back to
//! pixels. During training the masks are matched to connected components of
//! the ground truth and supervised with focal, dice and cosine terms.

pub mod components;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod oracle;
pub mod pgm;
pub mod sgr;
pub mod suites;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
