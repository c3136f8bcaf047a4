//! Personality regression from dyadic behavioral signals.
//!
//! The pipeline turns per-frame behavioral tables into fixed-size spectral
//! maps, feeds both participants of a dyad through a multimodal transformer
//! with cross-modal and cross-subject attention, and scores predictions at
//! the trait, facet or item level of the Big-Five hierarchy.

pub mod bfi2;
pub mod eval;
pub mod ingest;
pub mod nn;
pub mod pipeline;
pub mod spectral;
pub mod synth;
pub mod train;

pub use bfi2::{Level, Order, PersonalityVector, ScoringKey, Strategy};
pub use ingest::{Modality, ModalitySeries, SessionRecord, Task};
pub use spectral::{SpectralMap, BINS};
