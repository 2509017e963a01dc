//! Episodic few-shot sequence matching: task-aware relation modeling over
//! the videos of an episode, set-matching distances between frame
//! sequences (bidirectional mean Hausdorff and baselines), and
//! coherence-regularized episodic training in supervised, semi-supervised,
//! and unsupervised regimes.

#![allow(clippy::needless_range_loop)]

pub mod autograd;
pub mod cli;
pub mod data;
pub mod episodes;
pub mod error;
pub mod losses;
pub mod matrix;
pub mod metric;
pub mod relation;
pub mod rng;
pub mod training;
pub mod types;
