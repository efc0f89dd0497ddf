// Indexed loops mirror the summation formulas; negated comparisons like
// `!(x > 0.0)` reject NaN along with out-of-range values.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Discriminative deep domain adaptation on synthetic benchmarks.
//!
//! A mini-batch-trained feature extractor is optimized against a composite
//! objective: a cross-entropy task loss on the labeled source domain, a
//! Fisher discriminability loss with trainable class centers (trace-ratio or
//! trace-difference form), an entropy-minimization regularizer on target
//! predictions, and one of three transfer criteria (multi-kernel MMD, CORAL,
//! or a domain adversarial loss realized via gradient reversal):
//!
//! ```text
//! L = L_task + lambda0 * L_fisher + lambda1 * Omega + lambda2 * L_transfer
//! ```
//!
//! All gradients are hand-derived and verified against central finite
//! differences; see [`gradcheck`]. Every run is deterministic under a fixed
//! seed.
//!
//! Module map:
//! - [`matrix`], [`rng`]: dense f64 matrices and a platform-independent RNG
//! - [`network`]: affine stacks with manual forward/backward and the
//!   gradient-reversal contract
//! - [`losses`]: task loss, Fisher losses, entropy regularizer
//! - [`transfer`]: MMD, CORAL, domain adversarial loss
//! - [`optim`]: SGD with momentum, schedules, early stopping
//! - [`data`]: synthetic domain-shift generators, CSV io, batch sampler
//! - [`config`]: the `key = value` experiment configuration
//! - [`harness`]: the training loop, evaluation, artifact export
//! - [`gradcheck`]: the finite-difference verification suite

pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod matrix;
pub mod network;
pub mod optim;
pub mod rng;
pub mod transfer;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use rng::{Dist, SeededRng};
