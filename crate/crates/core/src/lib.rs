//! Pareto-aware curation of a retrievable skill bank for a frozen agent.
//!
//! The bank is edited round by round: proposers draft additions, rewrites
//! and removals from support-split trajectories, and a selector picks the
//! next bank on the query split by utility, diversity and coverage, with
//! the unchanged bank always in the running.

pub mod cache;
pub mod config;
pub mod curation;
pub mod embedding;
pub mod error;
pub mod objectives;
pub mod proposers;
pub mod retrieval;
pub mod rollout;
pub mod selector;
pub mod skill;
pub mod world;

pub use error::{Error, Result};
