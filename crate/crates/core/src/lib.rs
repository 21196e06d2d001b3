//! Mixture-of-Ranks (MoR) low-rank adapters.
//!
//! A MoR layer keeps one shared pair of low-rank matrices `(A, B)` and
//! specializes it into `N` rank experts through per-expert diagonal scaling
//! vectors. An input-dependent softmax router mixes the experts:
//!
//! ```text
//! y = W x + sum_i g_i(x) * (alpha / r) * diag(lambda_B_i) B diag(lambda_A_i) A x
//! ```
//!
//! The crate contains the forward math for MoR and its LoRA / MoE-LoRA
//! baselines ([`adapters`]), hand-derived gradients checked against finite
//! differences ([`grads`]), executable rank-decomposition oracles
//! ([`rankops`]), trainable-parameter accounting ([`accounting`]), a
//! teacher/student multi-task harness ([`bench`]) and the `mor` command line
//! ([`cli`]).
//!
//! Data-parallel sweeps go through [`par`]; with the `parallel` feature
//! disabled every path runs sequentially and produces identical results.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accounting;
pub mod adapters;
pub mod bench;
pub mod cli;
pub mod error;
pub mod grads;
pub mod matcore;
pub mod par;
pub mod rankops;

pub use error::{MorError, Result};
pub use matcore::{Matrix, Rng, Vector};
