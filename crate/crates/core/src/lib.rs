//! Differentially private training with simulated FP4 compute.
//!
//! The crate bundles the pieces needed to study low-precision DP-SGD at
//! desk scale:
//!
//! * [`net`]: a small feed-forward network with per-example gradients and
//!   quantization hooks on every linear map
//! * [`quant`]: an unbiased, scale-invariant stochastic FP4 quantizer
//! * [`optim`]: per-example clipping, Gaussian noising and the DP-SGD update
//! * [`accountant`]: Rényi-DP accounting of sampled Gaussian mechanisms
//! * [`scheduler`]: privatized loss-impact measurement and softmax layer
//!   selection
//! * [`diagnostics`]: gradient/noise statistics and the speedup cost model
//! * [`train`]: datasets, Poisson batching and the end-to-end training loop

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod arch;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod net;
pub mod optim;
pub mod quant;
pub mod records;
pub mod scheduler;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use net::{build_network, Network, PerExampleGrads, QuantPolicy};
pub use quant::{QuantGrid, QuantizerSpec};
pub use tensor::Tensor;

/// Deterministic, cloneable RNG used throughout; clones capture the stream position.
pub type DetRng = rand_chacha::ChaCha8Rng;

/// Independent substream `stream` of the generator seeded by `seed`.
pub fn substream(seed: u64, stream: u64) -> DetRng {
    use rand::SeedableRng;
    let mut rng = DetRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
