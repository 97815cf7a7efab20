//! Desk-scale unsupervised domain adaptation by disentanglement and
//! prototype reconstruction.
//!
//! The library trains a small ensemble of fully connected networks on a
//! labeled source domain and an unlabeled target domain: a feature extractor,
//! two disentanglers that split its output into domain-invariant and
//! domain-specific components, linear prototype heads for classes and
//! domains, an adversarial domain discriminator, and a reconstructor that
//! maps disentangled pairs back to extractor space. The reconstructor turns
//! prototype pairs into original-feature prototypes, which supervise the
//! extractor toward compact, class-clustered features.
//!
//! Everything runs on a self-contained `f64` autograd engine ([`tensor`])
//! and a portable seeded RNG ([`rng`]), so runs are reproducible
//! bit-for-bit from their configuration.

pub mod checkpoint;
pub mod datagen;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use tensor::{Tensor, TensorError};
