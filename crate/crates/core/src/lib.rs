//! Guided latent optimization: a quantized latent grid is decoded to an
//! image, scored against text or image targets through an ensemble of
//! augmented crops, and updated with Adam.
//!
//! The autoencoder and embedder sit behind [`backend::Backend`]; the
//! bundled [`backend::toy`] implementation is exact and cheap, and
//! [`backend::remote`] speaks the binary socket protocol to an external
//! model process.

pub mod augment;
pub mod backend;
pub mod error;
pub mod imageio;
pub mod latent;
pub mod loss;
pub mod optim;
pub mod parallel;
pub mod pipeline;
pub mod rng;
pub mod selfmask;
pub mod tensor;

pub use error::{Error, Result};
pub use parallel::Execution;
pub use tensor::{Image, LatentGrid, Tensor3};
