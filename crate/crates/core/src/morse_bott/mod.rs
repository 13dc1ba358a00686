//! Cascade Morse-Bott homology over Z/2.
//!
//! The pipeline surveys the critical set of an [`Objective`](crate::objective::Objective),
//! checks the Morse-Bott condition on each component, picks an auxiliary
//! Morse function on every component, counts flow lines with cascades
//! between generators of adjacent index and assembles the chain complex.

mod auxiliary;
mod cascade;
mod chain;
mod pipeline;
mod survey;

use thiserror::Error;

pub use auxiliary::{choose_h, h_critical_points, AuxiliaryMorse, HCriticalPoint, HFlow, ManifoldView, MorseFunction, H_GRAD_TOL, H_NONDEGENERACY, MAX_H_ATTEMPTS};
pub use cascade::{CascadeContext, CascadeCount, CascadeParams, CertifiedLine, Plan, PlanKind, Probe, Signed};
pub use chain::{boundary_matrices, homology, verify_chain, BitMatrix, CascadeChainComplex, GeneratorRecord, ProvenanceEntry};
pub use pipeline::{cascade_homology, cascade_homology_with, homology_from_survey, HomologyOptions, HomologyReport};
pub use survey::{gradient_zero_search, morse_bott_check, pca_dimension, survey_critical, CriticalManifold, MorseBottReport, Survey, SurveyOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MorseBottError {
    #[error("no Morse function found on manifold {manifold} after {attempts} attempts")]
    MorseFailure { manifold: usize, attempts: usize },
    #[error("cascade count between generators {from} and {to} unresolved: {reason}")]
    Unresolved { from: usize, to: usize, reason: String },
    #[error("boundary operator does not square to zero")]
    ChainNotVerified,
}
