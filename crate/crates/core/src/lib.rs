//! Keyed, PAC-based basic-block control-flow integrity on a small IR.
//!
//! The pipeline mirrors a compiler plus post-processing toolchain:
//! [`ir`] parses and lays out programs, [`instrument`] inserts state updates,
//! patch slots and checks, [`postprocess`] computes every expected state and
//! resolves the constants, and [`sim`] executes the result under injected
//! faults. [`experiments`] drives the security measurements.

pub mod artifact;
pub mod corpus;
pub mod experiments;
pub mod hexfmt;
pub mod instrument;
pub mod ir;
pub mod pac;
pub mod postprocess;
pub mod sim;
