//! Fleming-Viot particle systems for normally reflected diffusions with soft
//! killing, together with the reference machinery needed to test their
//! large-population behaviour: a 1D Neumann eigensolver for the principal
//! eigentriple, exact transport metrics on finite atomic measures (including
//! the weak atomic metric), genealogy/spine/skeleton reconstruction from
//! event logs, and Wright-Fisher / Moran / Q-process reference simulators.

pub mod dynamics;
pub mod error;
pub mod field;
pub mod genealogy;
pub mod harness;
pub mod limits;
pub mod measures;
pub mod particles;
pub mod rng;
pub mod spectral;

pub use error::{Error, Result};
pub use field::CoefficientField;
pub use spectral::EigenTriple;
