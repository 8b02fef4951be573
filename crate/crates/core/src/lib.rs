//! Temporal grounding on top of a frozen decoder with position-routed low-rank
//! experts.
//!
//! The crate is organised along the data path:
//!
//! * [`features`] produces per-frame class tokens, patch tokens and CLS
//!   attention (synthetic encoder or feature container files).
//! * [`compress`] turns patch tokens into a small set of S-tokens using
//!   group-of-pictures partitioning, key-token grouping, static-patch removal
//!   and merging.
//! * [`backbone`] is the frozen transformer with the temporal/spatial adapter
//!   pair, the visual adapter and the `<LOC>` vocabulary extension.
//! * [`head`] turns `<LOC>` hidden states plus T-token states into per-frame
//!   foreground probabilities, boundary offsets and ranked segments.
//! * [`objectives`] holds the training losses.
//! * [`data`] and [`train`] hold templates, synthetic data, annotation ingestion
//!   and the optimisation loop.
//! * [`eval`] holds the metrics, the prediction-bias diagnostic and report IO.
//!
//! Data-parallel loops go through [`exec::Exec`], which uses rayon when the
//! `parallel` feature is enabled and falls back to sequential iteration
//! otherwise.

pub mod backbone;
pub mod compress;
pub mod data;
mod error;
pub mod eval;
pub mod exec;
pub mod features;
pub mod head;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod segment;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
pub use segment::Segment;
