//! Simulation and parameter-learning toolkit for a solid-state spin register:
//! one electron spin coupled to many weakly-coupled nuclear spins.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! * [`spin_model`] — Hamiltonian constructions, precession-frequency formulas,
//!   rotating-frame (Floquet) effective Hamiltonians, and hyperfine-parameter
//!   inversion with transverse-field corrections.
//! * [`dynamics`] — exact conditional propagation of nuclear spins under
//!   dynamical-decoupling sequences, plus shot-noise and readout models.
//! * [`spectroscopy`] — decoupling spectra, coherence-dip detection, and the
//!   rough hyperfine fit that seeds precise learning.
//! * [`qpe`] — adaptive quantum-phase-estimation frequency measurement and the
//!   joint hyperfine refinement.
//! * [`gates`] — design and crosstalk evaluation of a universal gate set under
//!   constantly-on interactions, with repeated-gate fidelity-decay benchmarks.
//!
//! Frequencies at every public interface are ordinary-frequency kHz, magnetic
//! fields are gauss, and times are nanoseconds; conversion to angular units
//! happens once, in [`units`].

pub mod cmat;
pub mod dynamics;
mod exec;
pub mod gates;
pub mod qpe;
pub mod spectroscopy;
pub mod spin_model;
pub mod su2;
pub mod units;

pub use spin_model::{
    HyperfineTensor, MagneticField, NuclearSpinRecord, PhysicalConstants, SystemConfig,
};

/// Initializes the global thread pool from the `NVHL_THREADS` environment
/// variable. Call once at startup; later calls are ignored.
pub fn init_thread_cap() {
    exec::init_thread_cap();
}
