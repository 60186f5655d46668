//! Adaptive asymmetric DAgger (A2D) and baselines on enumerable MDP-POMDP pairs.
//!
//! The crate is split into an exact tabular layer and a learned layer that is
//! validated against it:
//!
//! - [`envpair`] — gridworld MDP-POMDP pairs with exact model access and
//!   trajectory sampling.
//! - [`oracle`] — exact occupancies, implicit policies, optimal policies,
//!   imitation fixed points, identifiability diagnostics, and the surrogate
//!   bound check.
//! - [`nets`] — small MLP policies/values with hand-written reverse-mode
//!   gradients and Adam.
//! - [`estimators`] — returns, GAE, importance weights, entropy-shaped and
//!   normalized advantages.
//! - [`trpo`] — trust-region policy steps plus value/Q fitting.
//! - [`imitation`] — the mixture behavior policy, replay buffer, and the
//!   KL-projection (AIL) step and baseline.
//! - [`a2d`] — the full A2D loop in MC-GAE and learned-Q variants.
//! - [`harness`] — configs, method dispatch, evaluation protocol, metrics,
//!   and checkpoints.

pub mod a2d;
pub mod envpair;
pub mod estimators;
pub mod harness;
pub mod imitation;
pub mod nets;
pub mod oracle;
pub mod trpo;
