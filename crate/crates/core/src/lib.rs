//! Quantum image generation by statevector simulation.
//!
//! Images are loaded into FRQI, MCRQI or amplitude-encoded quantum states,
//! generated by parameterized circuits driven by tuned Gaussian-mixture
//! noise, and trained against a convolutional Wasserstein critic with
//! gradient penalty.
//!
//! | module | contents |
//! |---|---|
//! | [`diffmath`] | tensors and a tape-based differentiator with double backprop |
//! | [`statevector`] | gates, probabilities, reduced states, entropies |
//! | [`image_codec`] | Morton order, encoders, decoders and their derivatives, file formats |
//! | [`generator`] | circuit ansätze, parameter layout, noise, shot noise, adjoint gradients |
//! | [`discriminator`] | the critic network |
//! | [`trainer`] | WGAN-GP loop, Adam, checkpoints, metric log |
//! | [`metrics`] | MMD, checkpoint selection, entropy traces, PCA |
//! | [`cli_io`] | datasets, run configuration, image grids |

pub mod cli_io;
pub mod diffmath;
pub mod discriminator;
pub mod generator;
pub mod image_codec;
pub mod metrics;
pub mod statevector;
pub mod trainer;

use rand::SeedableRng;

pub use rand_chacha::ChaCha20Rng;

/// The generator used for every random draw in the crate.
pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}
