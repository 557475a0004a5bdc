//! Learning-based RRH subset selection and uplink localization for
//! distributed antenna systems.
//!
//! The crate covers the whole pipeline: a distance-based scatterer channel
//! simulator ([`channel_sim`]), a small dense-network engine ([`nn`]), the
//! concrete selection layer and its baselines ([`selector`]), joint
//! selection/localization training plus an uncertainty-aware localization
//! stage ([`training`]), and metrics and reports ([`evaluation`], [`report`]).

pub mod channel_sim;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod formats;
pub mod nn;
pub mod report;
pub mod selector;
pub mod training;

pub use error::{Error, Result};
