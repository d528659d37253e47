//! Desk-scale sequence-to-sequence training laboratory.
//!
//! Everything runs on the CPU in double precision with explicit seeding,
//! so experiments are bit-reproducible and small enough to verify against
//! enumeration oracles.

pub mod autodiff;
pub mod cli;
pub mod decoding;
pub mod eval;
pub mod corpus;
pub mod models;
pub mod nd;
pub mod rng;
pub mod rsl;
pub mod training;
