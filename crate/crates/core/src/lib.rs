//! Checkpoint extrapolation composed with contrastive decoding.
//!
//! A finetuned model `ft` and an earlier checkpoint `early` of the same run
//! are combined twice:
//!
//! 1. in parameter space, `ep = ft + mu * (ft - early)` ([`extrapolate`]);
//! 2. at decoding time, next tokens are picked from
//!    `L_ep + lambda * (L_ep - L_ft)` under a plausibility mask ([`decode`]).
//!
//! The crate also ships a small trainable transformer ([`toy_lm`]) so the
//! whole procedure runs end to end, a Monte Carlo check of how the
//! contrastive combination scales logit errors ([`theory`]), and the
//! experiment protocol around it ([`harness`]).

pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod error;
pub mod extrapolate;
pub mod harness;
pub mod rng;
pub mod theory;
pub mod toy_lm;

pub use error::{Error, Result};
