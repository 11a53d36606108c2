//! Conditional nuclear-spin propagation under dynamical-decoupling sequences,
//! with the shot-noise, dephasing, and readout models.
//!
//! The electron is confined to the {|0⟩, |−1⟩} submanifold during decoupling.
//! A sequence unit is (τ − π − τ); over one unit a nucleus whose electron
//! branch starts in |0⟩ evolves as `U₋₁(τ)·U₀(τ)` and the branch starting in
//! |−1⟩ as `U₀(τ)·U₋₁(τ)`. Because the per-manifold Hamiltonians commute
//! across nuclei, multi-spin coherence factorizes into a product of
//! single-spin signals; the full-tensor density-matrix route exists as the
//! independent cross-check.

use num_complex::Complex64 as C64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmat::CMat;
use crate::exec;
use crate::spin_model::SystemConfig;
use crate::su2::{Herm2, Mat2, Quat};
use crate::units;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("invalid pulse sequence: {0}")]
    InvalidSequence(String),
    #[error("full-tensor request over cap: {0}")]
    OverCap(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
}

/// π-pulse phase pattern. Phases only matter once per-pulse errors are
/// simulated; ideal flips are phase-insensitive in the two-manifold picture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhasePattern {
    Xy8,
    FixedX,
}

impl PhasePattern {
    /// Pulse phase (rad) of the i-th π pulse.
    pub fn phase_rad(self, i: u32) -> f64 {
        match self {
            PhasePattern::FixedX => 0.0,
            PhasePattern::Xy8 => {
                // X Y X Y Y X Y X, repeated.
                const Y: f64 = std::f64::consts::FRAC_PI_2;
                [0.0, Y, 0.0, Y, Y, 0.0, Y, 0.0][(i % 8) as usize]
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PulseModel {
    Instantaneous,
    /// Nuclei keep evolving under the current manifold for half the pulse on
    /// each side; the electron is treated as flipping at the pulse midpoint.
    /// A first-order approximation, adequate for width ≪ τ.
    FiniteDuration { width_ns: f64 },
}

/// A CPMG-type decoupling sequence: (τ − π − τ) repeated `n_pulses` times,
/// so 2τ separates neighboring π pulses and the total duration is 2·τ·N for
/// instantaneous pulses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseSequence {
    pub n_pulses: u32,
    pub tau_ns: f64,
    pub phase_pattern: PhasePattern,
    pub pulse_model: PulseModel,
}

impl PulseSequence {
    pub fn cpmg(n_pulses: u32, tau_ns: f64) -> Self {
        PulseSequence {
            n_pulses,
            tau_ns,
            phase_pattern: PhasePattern::Xy8,
            pulse_model: PulseModel::Instantaneous,
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if self.n_pulses > 0 && !(self.tau_ns > 0.0) {
            return Err(DynamicsError::InvalidSequence(format!(
                "tau must be positive with pulses present, got {} ns",
                self.tau_ns
            )));
        }
        if let PulseModel::FiniteDuration { width_ns } = self.pulse_model {
            if !(width_ns >= 0.0) || (self.n_pulses > 0 && width_ns >= 2.0 * self.tau_ns) {
                return Err(DynamicsError::InvalidSequence(format!(
                    "pulse width {} ns must sit inside the 2τ = {} ns unit",
                    width_ns,
                    2.0 * self.tau_ns
                )));
            }
        }
        Ok(())
    }

    pub fn total_duration_ns(&self) -> f64 {
        let pulse = match self.pulse_model {
            PulseModel::Instantaneous => 0.0,
            PulseModel::FiniteDuration { width_ns } => width_ns,
        };
        self.n_pulses as f64 * (2.0 * self.tau_ns + pulse)
    }

    /// Even pulse counts return the electron to its initial manifold, which
    /// the standard coherence readout assumes.
    pub fn is_even(&self) -> bool {
        self.n_pulses % 2 == 0
    }
}

/// Shot-noise, dephasing, and readout parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Nuclear inhomogeneous dephasing time (ms); quasi-static Gaussian model.
    pub nuclear_t2star_ms: f64,
    /// Electron coherence time under decoupling (ms); `None` disables the
    /// exponential decay envelope on spectroscopy traces.
    pub electron_dd_t2_ms: Option<f64>,
    /// Quasi-static detuning width (kHz) added per shot in Ramsey runs.
    pub quasistatic_detuning_sigma_khz: f64,
    /// Probability that a π pulse fails to flip the electron.
    pub pi_pulse_error: f64,
    pub readout_f_bright: f64,
    pub readout_f_dark: f64,
    pub shots: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            nuclear_t2star_ms: 10.0,
            electron_dd_t2_ms: None,
            quasistatic_detuning_sigma_khz: 0.0,
            pi_pulse_error: 0.0,
            readout_f_bright: 0.81,
            readout_f_dark: 0.99,
            shots: 1000,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let probs = [
            self.pi_pulse_error,
            self.readout_f_bright,
            self.readout_f_dark,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(DynamicsError::InvalidState(
                "probabilities must lie in [0, 1]".into(),
            ));
        }
        if !(self.nuclear_t2star_ms > 0.0) {
            return Err(DynamicsError::InvalidState("T2* must be positive".into()));
        }
        if let Some(t2) = self.electron_dd_t2_ms {
            if !(t2 > 0.0) {
                return Err(DynamicsError::InvalidState("DD T2 must be positive".into()));
            }
        }
        Ok(())
    }

    /// Quasi-static detuning width σ = √2/(2π·T2*) in kHz, chosen so shot
    /// averaging reproduces the Gaussian Ramsey envelope exp[−(t/T2*)²].
    pub fn detuning_sigma_khz_from_t2star(t2star_ms: f64) -> f64 {
        std::f64::consts::SQRT_2 / (std::f64::consts::TAU * t2star_ms)
    }
}

/// Nuclear propagators conditioned on the electron branch: `w0` for the
/// branch starting in |0⟩ and `w1` for the branch starting in |−1⟩.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalPropagators {
    pub w0: Quat,
    pub w1: Quat,
}

/// `exp(−i h t)` for a traceless 2×2 Hamiltonian given as a field vector in
/// kHz, in closed axis–angle form. Exactly unitary up to floating error.
#[inline]
pub fn nuclear_propagator(field_khz: [f64; 3], t_ns: f64) -> Quat {
    Quat::from_field_khz(field_khz, t_ns)
}

/// General 2×2 propagator including the global phase from the identity part.
pub fn nuclear_propagator_mat2(h: &Herm2, t_ns: f64) -> Mat2 {
    let q = nuclear_propagator([2.0 * h.cx, 2.0 * h.cy, 2.0 * h.cz], t_ns);
    let phase = -units::phase_rad(h.c0, t_ns);
    q.to_mat2().scale(C64::from_polar(1.0, phase))
}

/// Ordered conditional propagators of a full sequence for one nucleus with
/// manifold fields `field0` (electron |0⟩) and `field1` (electron |−1⟩).
pub fn cpmg_conditional_propagators(
    field0: [f64; 3],
    field1: [f64; 3],
    seq: &PulseSequence,
) -> Result<ConditionalPropagators, DynamicsError> {
    seq.validate()?;
    let half = match seq.pulse_model {
        PulseModel::Instantaneous => seq.tau_ns,
        PulseModel::FiniteDuration { width_ns } => seq.tau_ns + 0.5 * width_ns,
    };
    let u0 = nuclear_propagator(field0, half);
    let u1 = nuclear_propagator(field1, half);

    let mut w0 = crate::su2::IDENTITY;
    let mut w1 = crate::su2::IDENTITY;
    let mut in_zero = true; // manifold of the branch that started in |0⟩
    for _ in 0..seq.n_pulses {
        if in_zero {
            w0 = u1.mul(u0).mul(w0);
            w1 = u0.mul(u1).mul(w1);
        } else {
            w0 = u0.mul(u1).mul(w0);
            w1 = u1.mul(u0).mul(w1);
        }
        in_zero = !in_zero;
    }
    Ok(ConditionalPropagators {
        w0: w0.normalized(),
        w1: w1.normalized(),
    })
}

/// Fast path for even pulse counts: the unit pair repeats, so the whole
/// product collapses to an integer power. Identical to the step-by-step
/// product up to floating error.
pub fn cpmg_conditional_propagators_even(
    field0: [f64; 3],
    field1: [f64; 3],
    tau_ns: f64,
    n_pulses: u32,
) -> ConditionalPropagators {
    debug_assert!(n_pulses % 2 == 0);
    let u0 = nuclear_propagator(field0, tau_ns);
    let u1 = nuclear_propagator(field1, tau_ns);
    let a = u1.mul(u0); // one unit, branch currently in |0⟩
    let b = u0.mul(u1);
    ConditionalPropagators {
        w0: b.mul(a).powi(n_pulses / 2),
        w1: a.mul(b).powi(n_pulses / 2),
    }
}

/// Electron coherence contribution of one nucleus: `M = Re Tr(W0·W1†)/2` for
/// a maximally mixed initial nuclear state. The survival probability after
/// the closing π/2 pulse is `(1 + M)/2`.
pub fn coherence_signal(cp: &ConditionalPropagators) -> f64 {
    cp.w0.dot(cp.w1)
}

/// Single-spin coherence evaluated without building intermediate structs;
/// used by τ sweeps and the rough-fit grid search.
#[inline]
pub fn single_spin_coherence(field0: [f64; 3], field1: [f64; 3], tau_ns: f64, n_pulses: u32) -> f64 {
    if n_pulses == 0 {
        return 1.0;
    }
    if n_pulses % 2 == 0 {
        let cp = cpmg_conditional_propagators_even(field0, field1, tau_ns, n_pulses);
        coherence_signal(&cp)
    } else {
        let cp = cpmg_conditional_propagators(field0, field1, &PulseSequence::cpmg(n_pulses, tau_ns))
            .expect("tau validated by caller");
        coherence_signal(&cp)
    }
}

/// Product of per-spin coherences over all resolved and bath spins.
pub fn multi_spin_coherence(config: &SystemConfig, seq: &PulseSequence) -> Result<f64, DynamicsError> {
    seq.validate()?;
    let mut m = 1.0;
    for (f0, f1) in config.all_conditional_fields() {
        let cp = cpmg_conditional_propagators(f0, f1, seq)?;
        m *= coherence_signal(&cp);
    }
    Ok(m)
}

/// Bright/dark readout map: `p_obs = p·F_b + (1 − p)·(1 − F_d)`.
pub fn apply_readout_model(p_true: f64, noise: &NoiseModel) -> f64 {
    p_true * noise.readout_f_bright + (1.0 - p_true) * (1.0 - noise.readout_f_dark)
}

/// Inverse of [`apply_readout_model`], used to express observed counts back
/// in coherence units. Undefined when F_b + F_d = 1 (zero contrast).
pub fn invert_readout_model(p_obs: f64, noise: &NoiseModel) -> f64 {
    (p_obs - (1.0 - noise.readout_f_dark)) / (noise.readout_f_bright + noise.readout_f_dark - 1.0)
}

/// A finite-shot estimate of a probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShotEstimate {
    pub p_hat: f64,
    pub std_err: f64,
    pub shots: u64,
}

/// Binomial sampling of `shots` Bernoulli trials at probability `p`,
/// deterministic under the seed.
pub fn sample_shots(p: f64, shots: u64, seed: u64) -> ShotEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_shots_with(p, shots, &mut rng)
}

pub fn sample_shots_with<R: Rng>(p: f64, shots: u64, rng: &mut R) -> ShotEstimate {
    assert!(shots >= 1, "shots must be >= 1");
    let p = p.clamp(0.0, 1.0);
    let k = Binomial::new(shots, p).expect("p in range").sample(rng);
    let p_hat = k as f64 / shots as f64;
    ShotEstimate {
        p_hat,
        std_err: (p_hat * (1.0 - p_hat) / shots as f64).sqrt(),
        shots,
    }
}

/// Draws a quasi-static detuning (kHz) for one shot.
pub fn sample_detuning_khz<R: Rng>(sigma_khz: f64, rng: &mut R) -> f64 {
    if sigma_khz <= 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma_khz).unwrap().sample(rng)
}

// ---------------------------------------------------------------------------
// Density-matrix representations
// ---------------------------------------------------------------------------

/// Quantum state of the electron submanifold {|0⟩, |−1⟩} and a set of nuclei.
#[derive(Debug, Clone, PartialEq)]
pub enum QuantumState {
    /// One 2×2 density matrix per subsystem; valid while no entangling
    /// dynamics couples them.
    Product {
        electron: CMat,
        nuclei: Vec<CMat>,
    },
    /// Dense density matrix over electron ⊗ k nuclei (dimension 2·2^k).
    Full(DensityMatrix),
}

impl QuantumState {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        match self {
            QuantumState::Product { electron, nuclei } => {
                check_density(electron)?;
                nuclei.iter().try_for_each(check_density)
            }
            QuantumState::Full(dm) => check_density(&dm.rho),
        }
    }
}

fn check_density(rho: &CMat) -> Result<(), DynamicsError> {
    if (rho.trace().re - 1.0).abs() > 1e-10 || rho.trace().im.abs() > 1e-10 {
        return Err(DynamicsError::InvalidState(format!(
            "trace {} != 1",
            rho.trace()
        )));
    }
    if rho.hermiticity_residual() > 1e-10 {
        return Err(DynamicsError::InvalidState("density matrix not Hermitian".into()));
    }
    // Positivity to a small eigenvalue floor, checked via diagonal minors
    // only; full spectral checks live in the test oracles.
    for i in 0..rho.n {
        if rho[(i, i)].re < -1e-10 {
            return Err(DynamicsError::InvalidState(format!(
                "negative population {} at {}",
                rho[(i, i)].re,
                i
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    pub rho: CMat,
}

impl DensityMatrix {
    pub fn from_pure(amplitudes: &[C64]) -> Self {
        let n = amplitudes.len();
        let mut rho = CMat::zeros(n);
        for i in 0..n {
            for j in 0..n {
                rho[(i, j)] = amplitudes[i] * amplitudes[j].conj();
            }
        }
        DensityMatrix { rho }
    }

    pub fn maximally_mixed(n: usize) -> Self {
        let mut rho = CMat::zeros(n);
        for i in 0..n {
            rho[(i, i)] = C64::new(1.0 / n as f64, 0.0);
        }
        DensityMatrix { rho }
    }

    pub fn kron(&self, other: &DensityMatrix) -> Self {
        DensityMatrix {
            rho: self.rho.kron(&other.rho),
        }
    }

    pub fn evolve(&mut self, u: &CMat) {
        self.rho = u.mul(&self.rho).mul(&u.adjoint());
    }

    pub fn expect(&self, op: &CMat) -> f64 {
        op.mul(&self.rho).trace().re
    }
}

/// Joint unitary of one (τ − π − τ) unit on electron ⊗ nuclei, with the π
/// pulse exact on the electron submanifold. Basis order: electron index
/// (0 ↔ |0⟩, 1 ↔ |−1⟩) ⊗ each nucleus.
fn full_tensor_unit(fields: &[([f64; 3], [f64; 3])], tau_ns: f64) -> CMat {
    let n = fields.len();
    let dim_n = 1usize << n;

    // Per-branch nuclear propagators over τ, as Kronecker products.
    let mut prop0 = CMat::identity(1);
    let mut prop1 = CMat::identity(1);
    for (f0, f1) in fields {
        prop0 = prop0.kron(&quat_to_cmat(nuclear_propagator(*f0, tau_ns)));
        prop1 = prop1.kron(&quat_to_cmat(nuclear_propagator(*f1, tau_ns)));
    }

    // Conditional evolution over τ:  |0⟩⟨0|⊗U0 + |1⟩⟨1|⊗U1
    let dim = 2 * dim_n;
    let mut cond = CMat::zeros(dim);
    for i in 0..dim_n {
        for j in 0..dim_n {
            cond[(i, j)] = prop0[(i, j)];
            cond[(dim_n + i, dim_n + j)] = prop1[(i, j)];
        }
    }
    // Electron π pulse: X on the submanifold ⊗ identity on nuclei.
    let mut flip = CMat::zeros(dim);
    for i in 0..dim_n {
        flip[(i, dim_n + i)] = C64::new(1.0, 0.0);
        flip[(dim_n + i, i)] = C64::new(1.0, 0.0);
    }
    cond.mul(&flip).mul(&cond)
}

fn quat_to_cmat(q: Quat) -> CMat {
    let m = q.to_mat2();
    let mut out = CMat::zeros(2);
    for i in 0..2 {
        for j in 0..2 {
            out[(i, j)] = m.0[i][j];
        }
    }
    out
}

/// Survival probability of a CPMG run simulated with the dense joint density
/// matrix: electron prepared in (|0⟩+|−1⟩)/√2, nuclei maximally mixed,
/// readout along the preparation axis. The independent route against which
/// product-mode coherence is checked.
pub fn full_tensor_cpmg_survival(
    config: &SystemConfig,
    seq: &PulseSequence,
) -> Result<f64, DynamicsError> {
    seq.validate()?;
    let n = config.n_spins_total();
    config
        .check_tensor_cap(n)
        .map_err(|e| DynamicsError::OverCap(e.to_string()))?;
    let fields = config.all_conditional_fields();

    let dim_n = 1usize << n;
    let dim = 2 * dim_n;
    let unit = full_tensor_unit(&fields, seq.tau_ns);

    // ρ = |+⟩⟨+| ⊗ (I/2)^{⊗n}
    let plus = DensityMatrix::from_pure(&[
        C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0),
        C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0),
    ]);
    let mut rho = plus.kron(&DensityMatrix::maximally_mixed(dim_n));
    for _ in 0..seq.n_pulses {
        rho.evolve(&unit);
    }

    // Projector |+⟩⟨+| ⊗ I
    let mut proj = CMat::zeros(dim);
    for i in 0..dim_n {
        for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            proj[(a * dim_n + i, b * dim_n + i)] = C64::new(0.5, 0.0);
        }
    }
    Ok(rho.expect(&proj))
}

/// Evaluates `multi_spin_coherence` over a τ grid in parallel.
pub fn coherence_sweep(
    config: &SystemConfig,
    taus_ns: &[f64],
    n_pulses: u32,
) -> Vec<f64> {
    let fields = config.all_conditional_fields();
    exec::map_slice(taus_ns, |&tau| {
        fields
            .iter()
            .map(|(f0, f1)| single_spin_coherence(*f0, *f1, tau, n_pulses))
            .product()
    })
}
