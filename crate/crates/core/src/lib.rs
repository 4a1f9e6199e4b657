//! Reliability-aware audio-visual navigation in a synthetic binaural
//! gridworld.
//!
//! The crate is organized bottom-up:
//!
//! - [`world`]: occupancy maps, poses and geometric oracles
//! - [`observe`]: binaural spectrum, depth rays and supervision targets
//! - [`env`]: episode protocol and reward
//! - [`model`]: encoders, geometry reasoner, visual gate, recurrent actor-critic
//! - [`losses`]: auxiliary and PPO objectives with analytic derivatives
//! - [`trainer`]: rollouts, GAE, PPO updates and the training loop
//! - [`eval`]: frozen-policy evaluation, SR/SPL/SNA and report export
//! - [`config`]: run configuration shared by the command-line tool
//! - [`cli`]: train / eval / ablate / plot workflows
//! - [`probe`]: supervised geometry-reasoner probe of the variance signal

pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod observe;
pub mod probe;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
