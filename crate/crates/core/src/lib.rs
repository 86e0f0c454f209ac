//! Adversarial attacks on the observations of RL agents, studied exactly on
//! finite MDPs.
//!
//! The crate is organized bottom-up:
//!
//! * [`mdp`]: finite MDPs and exact policy evaluation;
//! * [`envs`]: gridworlds, observation embeddings, perturbation budgets;
//! * [`policy`]: softmax policies with input gradients and toy trainers;
//! * [`attacks`]: the attack taxonomy and FGSM/PGD optimizers;
//! * [`analysis`]: enumeration of attacked-policy sets and bound reports;
//! * [`harness`]: experiment configs and epsilon sweeps.

pub mod analysis;
pub mod attacks;
pub mod envs;
pub mod error;
pub mod harness;
pub mod mdp;
pub mod policy;

pub use error::{Error, Result};
