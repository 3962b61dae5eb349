//! Core of the feedback platform: the gridworld, the standard feedback
//! encoding, the episode store, translation of UI events, sampling,
//! reward models, rationality estimation and simulated annotators.

pub mod analysis;
pub mod annotator;
pub mod buffer;
pub mod config;
pub mod encoding;
pub mod gridworld;
pub mod rationality;
pub mod reward_model;
pub mod sampler;
pub mod stats;
pub mod translator;
