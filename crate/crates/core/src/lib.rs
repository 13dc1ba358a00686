//! Discrete Yang-Mills functionals on closed oriented surfaces and a cascade
//! Morse-Bott homology engine over Z/2.

pub mod benchlib;
pub mod flow;
pub mod group;
pub mod morse_bott;
pub mod objective;
pub mod perturbation;
pub mod surface;
pub mod ym;

pub use flow::{Controller, FlowError, FlowStatus, Trajectory};
pub use group::{Group, GroupElement};
pub use morse_bott::{cascade_homology, CascadeChainComplex, CriticalManifold, HomologyOptions, HomologyReport, MorseBottError};
pub use objective::{Objective, ObjectiveError};
pub use perturbation::{PerturbationBank, PerturbationError};
pub use surface::{ComplexError, OrientedCellComplex};
pub use ym::{Connection, EnergyBackend, Lattice, YangMills};
