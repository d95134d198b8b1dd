//! Hierarchical cluster models and wavefunction-based embedding for
//! computing CO2 binding energies in metal-organic frameworks.
//!
//! The crate carves finite clusters out of periodic crystal structures,
//! runs its own Gaussian-basis electronic-structure engine (SCF, MP2,
//! CCSD, a small exact-diagonalization oracle), applies an IAO/DMET
//! bath-natural-orbital embedding on the small cluster, and composes
//! final binding energies through a subtractive ONIOM scheme.
//!
//! Entry points:
//! - [`crystal`]: CIF/XYZ parsing, supercell expansion.
//! - [`carve`]: large/medium/small cluster construction with capping.
//! - [`basis`] and [`integrals`]: Gaussian basis sets and molecular integrals.
//! - [`scf`]: restricted and unrestricted Hartree-Fock.
//! - [`correlation`]: MP2, CCSD and an FCI test oracle.
//! - [`embedding`]: IAO fragmentation, DMET+BNO bath, multi-level energies.
//! - [`workflow`]: energy ledger, ONIOM composition, reporting, pipeline.

pub mod basis;
pub mod carve;
pub mod correlation;
pub mod crystal;
pub mod elements;
pub mod embedding;
pub mod integrals;
pub mod linalg;
pub mod scf;
pub mod workflow;


/// Conversion factor from angstrom to bohr.
pub const ANGSTROM_TO_BOHR: f64 = 1.889_725_988_6;

/// Conversion factor from hartree to kcal/mol.
pub const HARTREE_TO_KCAL_MOL: f64 = 627.5095;
