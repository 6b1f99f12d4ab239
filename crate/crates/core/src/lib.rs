//! Word embeddings fitted by alternating Tweedie regression on a
//! co-occurrence matrix.

pub mod cooccur;
pub mod dispersion;
pub mod embeddings;
pub mod model;
pub mod optimizer;
pub mod par;
pub mod simulate;
pub mod trainer;
pub mod tweedie;
