//! Pre-generated music continuation forests and a steering engine over them.
//!
//! A Markov model over a MIDI-like event vocabulary generates a three-level
//! forest of 5 s chunks. Every chunk is tagged with four semantic features;
//! a user steers by picking constraints on those features and choosing one
//! of the matching continuations, three times, to build a 15 s phrase.

pub mod corpus;
pub mod events;
pub mod features;
pub mod forest;
pub mod generator;
pub mod midi;
pub mod seed;
pub mod steering;
pub mod study;
