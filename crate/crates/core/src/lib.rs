//! Preference-based reinforcement learning under noisy feedback.
//!
//! A three-member Bradley–Terry reward ensemble is trained from pairwise
//! segment preferences. Members pick small-loss pairs for each other
//! (tri-teaching), a handful of expert demonstrations pretrain the policy
//! and regularize SAC, and queries are chosen where the ensemble disagrees.
//! Two toy 2-D control tasks, a scripted noisy teacher and a replayable
//! mock-VLM annotator make the whole loop run offline and deterministically.

pub mod annotate;
pub mod demos;
pub mod envs;
pub mod error;
pub mod ndmath;
pub mod reward;
pub mod runner;
pub mod sac;
pub mod seed;
pub mod triteach;

pub use error::{Error, Result};
