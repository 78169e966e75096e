//! Map-matching laboratory.
//!
//! Simulates noisy GPS trajectories on synthetic directed road networks,
//! labels them with an HMM/Viterbi matcher, and trains sequence-to-sequence
//! surrogates (a transformer and a Bi-GRU with attention) that translate
//! grid-cell token sequences into road-segment sequences.

pub mod error;
pub mod geo;
pub mod hmm;
pub mod io;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod prep;
pub mod rnn;
pub mod rng;
pub mod simulate;
pub mod train;
pub mod transformer;

pub use error::{Category, Error, Result};
pub use geo::{GridCellId, GridSpec, Point, RoadGraph};
pub use numerics::{Checkpoint, ParamStore, Tape, Tensor};
