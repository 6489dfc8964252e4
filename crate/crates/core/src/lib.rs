//! Simulation core for gated world-model imagination in spatial question answering.

pub mod agents;
pub mod analysis;
pub mod controller;
pub mod geometry;
pub mod harness;
pub mod nav;
pub mod seed;
pub mod tasks;
pub mod world;
