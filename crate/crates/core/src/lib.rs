//! Multi-agent image classification with partial, pose-dependent
//! observations, learned messaging and decentralized consensus.

pub mod autodiff;
pub mod config;
pub mod env;
pub mod graph;
pub mod net;
pub mod trainer;
