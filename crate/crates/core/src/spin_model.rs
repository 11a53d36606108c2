//! Spin Hamiltonians and frequency formulas for one electron spin (S = 1)
//! hyperfine-coupled to weakly-coupled spin-1/2 nuclei.
//!
//! Everything derives from the lab-frame Hamiltonian
//!
//! ```text
//! H = Δ·Sz² + ω⃗e·S⃗ + ω⃗n·I⃗ + Axx·SxIx + Ayy·SyIy + Azz·SzIz + Azx·(SzIx + SxIz)
//! ```
//!
//! with S the spin-1 operators (Sz eigenvalues +1, 0, −1) and I = σ/2.
//! After the secular approximation each electron manifold `ms` applies an
//! effective field `(ms·Azx, ms·Azy, ms·Azz + ωn)` to its nucleus; the
//! rotating-frame construction in [`floquet_hamiltonians`] keeps the
//! first-order corrections from the transverse couplings as well.
//!
//! Branch naming: the *plus branch* is the precession frequency
//! `√(Azx² + (Azz + ωn)²)` and the *minus branch* uses `Azz − ωn`, i.e.
//! branches are labeled by the sign of the Azz contribution. Which electron
//! manifold realizes which branch is a [`BranchMapping`] config entry, since
//! hardware conventions differ.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmat::CMat;
use crate::su2::Herm2;
use num_complex::Complex64 as C64;

/// Tolerance (kHz) below which the weak-coupling trace constraint is
/// considered satisfied.
pub const TRACELESS_TOL_KHZ: f64 = 1e-9;

/// Bath spins must satisfy |Azz|, |Azx| below this bound (kHz).
pub const BATH_BOUND_KHZ: f64 = 10.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("rotating frame degenerate: |Δ {sign} ω_ez| = {value_khz} kHz below tolerance")]
    DegenerateFrame { sign: char, value_khz: f64 },
    #[error("inconsistent frequencies: azx radicand {radicand} kHz² is negative")]
    InconsistentFrequencies { radicand: f64 },
    #[error("deviation undefined: branch frequency {which} is zero")]
    ZeroFrequency { which: &'static str },
    #[error("config invariant violated: {0}")]
    Invalid(String),
}

/// Zero-field splitting and gyromagnetic ratios.
///
/// Defaults: Δ = 2.8776 GHz, γe = 2802.5 kHz/G, γn = 1.0705 kHz/G. The γn
/// default reproduces the measured bare nuclear precession of ≈530.2 kHz at
/// 495 G to better than 1 kHz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    pub delta_khz: f64,
    pub gamma_e_khz_per_g: f64,
    pub gamma_n_khz_per_g: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        PhysicalConstants {
            delta_khz: 2.8776e6,
            gamma_e_khz_per_g: 2802.5,
            gamma_n_khz_per_g: 1.0705,
        }
    }
}

impl PhysicalConstants {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.delta_khz > 0.0 && self.gamma_e_khz_per_g > 0.0 && self.gamma_n_khz_per_g > 0.0)
        {
            return Err(ModelError::Invalid(
                "delta, gamma_e, gamma_n must all be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Static magnetic field in gauss; z is the electron symmetry axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagneticField {
    pub bz_g: f64,
    pub bx_g: f64,
    pub by_g: f64,
}

impl MagneticField {
    pub fn z_only(bz_g: f64) -> Self {
        MagneticField {
            bz_g,
            bx_g: 0.0,
            by_g: 0.0,
        }
    }

    /// Electron Zeeman vector (ωex, ωey, ωez) in kHz.
    pub fn omega_e_khz(&self, c: &PhysicalConstants) -> [f64; 3] {
        zeeman_khz(c.gamma_e_khz_per_g, self)
    }

    /// Nuclear Zeeman vector (ωnx, ωny, ωnz) in kHz.
    pub fn omega_n_khz(&self, c: &PhysicalConstants) -> [f64; 3] {
        zeeman_khz(c.gamma_n_khz_per_g, self)
    }
}

/// The one field-to-frequency conversion shared by both species.
fn zeeman_khz(gamma_khz_per_g: f64, b: &MagneticField) -> [f64; 3] {
    [
        gamma_khz_per_g * b.bx_g,
        gamma_khz_per_g * b.by_g,
        gamma_khz_per_g * b.bz_g,
    ]
}

/// Hyperfine coupling tensor components in kHz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperfineTensor {
    pub axx_khz: f64,
    pub ayy_khz: f64,
    pub azz_khz: f64,
    pub azx_khz: f64,
    #[serde(default)]
    pub azy_khz: f64,
}

impl HyperfineTensor {
    /// Weak-coupling tensor from the secular pair, completing the transverse
    /// diagonal as Axx = Ayy = −Azz/2 so the trace vanishes exactly.
    pub fn weak_coupling(azz_khz: f64, azx_khz: f64) -> Self {
        HyperfineTensor {
            axx_khz: -0.5 * azz_khz,
            ayy_khz: -0.5 * azz_khz,
            azz_khz,
            azx_khz,
            azy_khz: 0.0,
        }
    }

    /// Fully specified tensor; no constraint is enforced.
    pub fn new_unchecked(axx: f64, ayy: f64, azz: f64, azx: f64, azy: f64) -> Self {
        HyperfineTensor {
            axx_khz: axx,
            ayy_khz: ayy,
            azz_khz: azz,
            azx_khz: azx,
            azy_khz: azy,
        }
    }

    pub fn trace_khz(&self) -> f64 {
        self.axx_khz + self.ayy_khz + self.azz_khz
    }

    pub fn is_traceless(&self) -> bool {
        self.trace_khz().abs() < TRACELESS_TOL_KHZ
    }

    pub fn is_finite(&self) -> bool {
        [
            self.axx_khz,
            self.ayy_khz,
            self.azz_khz,
            self.azx_khz,
            self.azy_khz,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Secular view with Azy folded into Azx (see [`rotate_secular_frame`]).
    pub fn secular(&self) -> (f64, f64) {
        (
            self.azz_khz,
            (self.azx_khz * self.azx_khz + self.azy_khz * self.azy_khz).sqrt(),
        )
    }
}

/// A measured frequency stored as magnitude plus the sign flag the source
/// carried. Formulas consume magnitudes only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasuredFrequency {
    pub khz: f64,
    pub err_khz: f64,
    #[serde(default)]
    pub negative_sign: bool,
}

impl MeasuredFrequency {
    pub fn new(khz: f64, err_khz: f64) -> Self {
        MeasuredFrequency {
            khz,
            err_khz,
            negative_sign: false,
        }
    }
}

/// One resolved nuclear spin: hyperfine tensor, polarization fidelity, and
/// the measured frequency fixtures used for regression checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuclearSpinRecord {
    pub id: u32,
    pub hyperfine: HyperfineTensor,
    /// Polarization (initialization) fidelity in [0, 1].
    pub f_init: f64,
    pub measured_f_plus_branch: Option<MeasuredFrequency>,
    pub measured_f_minus_branch: Option<MeasuredFrequency>,
    pub measured_omega_n: Option<MeasuredFrequency>,
    /// Per-spin dephasing time override (ms); falls back to the noise model.
    #[serde(default)]
    pub t2star_ms: Option<f64>,
}

impl NuclearSpinRecord {
    pub fn new(id: u32, hyperfine: HyperfineTensor, f_init: f64) -> Self {
        NuclearSpinRecord {
            id,
            hyperfine,
            f_init,
            measured_f_plus_branch: None,
            measured_f_minus_branch: None,
            measured_omega_n: None,
            t2star_ms: None,
        }
    }
}

/// Binds the by-sign branch labels to electron manifolds. Default: the plus
/// branch (Azz + ωn) is seen with the electron in ms = +1, which is what the
/// effective-field formula gives for a positive-γ nucleus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchMapping {
    pub plus_branch_ms: i8,
}

impl Default for BranchMapping {
    fn default() -> Self {
        BranchMapping { plus_branch_ms: 1 }
    }
}

/// The single source of truth for a simulation: constants, field, resolved
/// spins, and the sampled unresolved bath.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub constants: PhysicalConstants,
    pub field: MagneticField,
    pub resolved_spins: Vec<NuclearSpinRecord>,
    #[serde(default)]
    pub bath_spins: Vec<HyperfineTensor>,
    #[serde(default)]
    pub bath_seed: u64,
    /// Most nuclei a full-tensor density matrix may cover (dimension 2·2^cap).
    #[serde(default = "default_full_tensor_cap")]
    pub full_tensor_cap: usize,
    #[serde(default)]
    pub branch_mapping: BranchMapping,
}

fn default_full_tensor_cap() -> usize {
    6
}

impl SystemConfig {
    pub fn new(constants: PhysicalConstants, field: MagneticField) -> Self {
        SystemConfig {
            constants,
            field,
            resolved_spins: Vec::new(),
            bath_spins: Vec::new(),
            bath_seed: 0,
            full_tensor_cap: default_full_tensor_cap(),
            branch_mapping: BranchMapping::default(),
        }
    }

    /// Bare nuclear Larmor frequency γn·Bz in kHz.
    pub fn omega_n_khz(&self) -> f64 {
        self.constants.gamma_n_khz_per_g * self.field.bz_g
    }

    /// By-sign branch label (+1, 0, −1) realized by a physical electron
    /// manifold under this config's branch mapping.
    pub fn effective_ms(&self, physical_ms: i8) -> i8 {
        if physical_ms == 0 {
            0
        } else if physical_ms == self.branch_mapping.plus_branch_ms {
            1
        } else {
            -1
        }
    }

    /// Conditional field pair (electron |0⟩, electron |−1⟩) for one tensor,
    /// honoring the branch mapping. All decoupling dynamics run on this pair.
    pub fn conditional_fields(&self, t: &HyperfineTensor) -> ([f64; 3], [f64; 3]) {
        let omega_n = self.omega_n_khz();
        (
            effective_field_khz(t, omega_n, 0),
            effective_field_khz(t, omega_n, self.effective_ms(-1)),
        )
    }

    /// Conditional field pairs for every spin, resolved first, then bath.
    pub fn all_conditional_fields(&self) -> Vec<([f64; 3], [f64; 3])> {
        self.resolved_spins
            .iter()
            .map(|s| &s.hyperfine)
            .chain(self.bath_spins.iter())
            .map(|t| self.conditional_fields(t))
            .collect()
    }

    pub fn spin(&self, id: u32) -> Option<&NuclearSpinRecord> {
        self.resolved_spins.iter().find(|s| s.id == id)
    }

    pub fn n_spins_total(&self) -> usize {
        self.resolved_spins.len() + self.bath_spins.len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.constants.validate()?;
        for b in [self.field.bx_g, self.field.by_g, self.field.bz_g] {
            if !b.is_finite() {
                return Err(ModelError::NonFinite("magnetic field"));
            }
        }
        for s in &self.resolved_spins {
            if !(0.0..=1.0).contains(&s.f_init) {
                return Err(ModelError::Invalid(format!(
                    "spin {}: f_init {} outside [0, 1]",
                    s.id, s.f_init
                )));
            }
            if !s.hyperfine.is_finite() {
                return Err(ModelError::NonFinite("hyperfine tensor"));
            }
            for m in [
                &s.measured_f_plus_branch,
                &s.measured_f_minus_branch,
                &s.measured_omega_n,
            ]
            .into_iter()
            .flatten()
            {
                if m.khz < 0.0 {
                    return Err(ModelError::Invalid(format!(
                        "spin {}: measured frequencies are stored as magnitudes, got {}",
                        s.id, m.khz
                    )));
                }
            }
        }
        for (i, b) in self.bath_spins.iter().enumerate() {
            if b.azz_khz.abs() >= BATH_BOUND_KHZ || b.azx_khz.abs() >= BATH_BOUND_KHZ {
                return Err(ModelError::Invalid(format!(
                    "bath spin {}: |azz| = {}, |azx| = {} kHz exceed the {} kHz bath bound",
                    i,
                    b.azz_khz.abs(),
                    b.azx_khz.abs(),
                    BATH_BOUND_KHZ
                )));
            }
        }
        if self.branch_mapping.plus_branch_ms != 1 && self.branch_mapping.plus_branch_ms != -1 {
            return Err(ModelError::Invalid(
                "branch_mapping.plus_branch_ms must be +1 or -1".into(),
            ));
        }
        Ok(())
    }

    /// Checks the full-tensor dimension cap for a requested spin count.
    pub fn check_tensor_cap(&self, n_spins: usize) -> Result<(), ModelError> {
        if n_spins > self.full_tensor_cap {
            return Err(ModelError::Invalid(format!(
                "{} nuclei exceed the full-tensor cap of {}; use product mode",
                n_spins, self.full_tensor_cap
            )));
        }
        Ok(())
    }
}

/// Effective field vectors (kHz) a nucleus sees in each electron manifold:
/// `(ms·Azx, ms·Azy, ms·Azz + ωn)` acting on I = σ/2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveFields {
    pub plus: [f64; 3],
    pub zero: [f64; 3],
    pub minus: [f64; 3],
}

impl EffectiveFields {
    pub fn for_ms(&self, ms: i8) -> [f64; 3] {
        match ms {
            1 => self.plus,
            0 => self.zero,
            -1 => self.minus,
            _ => panic!("ms must be -1, 0, or +1"),
        }
    }
}

/// Effective field for one tensor in one manifold under the secular model.
pub fn effective_field_khz(t: &HyperfineTensor, omega_n_khz: f64, ms: i8) -> [f64; 3] {
    let m = ms as f64;
    [
        m * t.azx_khz,
        m * t.azy_khz,
        m * t.azz_khz + omega_n_khz,
    ]
}

/// Per-spin effective fields for every electron manifold, resolved spins
/// first, then bath spins. Additive across spins: there are no inter-nuclear
/// terms in the model.
pub fn effective_hamiltonian(config: &SystemConfig) -> Vec<EffectiveFields> {
    let omega_n = config.omega_n_khz();
    config
        .resolved_spins
        .iter()
        .map(|s| &s.hyperfine)
        .chain(config.bath_spins.iter())
        .map(|t| EffectiveFields {
            plus: effective_field_khz(t, omega_n, 1),
            zero: effective_field_khz(t, omega_n, 0),
            minus: effective_field_khz(t, omega_n, -1),
        })
        .collect()
}

/// Result of folding Azy into Azx by redefining the nuclear x axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecularRotation {
    pub azx_khz: f64,
    /// Rotation angle of the new x axis, kept for traceability.
    pub angle_rad: f64,
}

/// Rotates the per-spin frame so the transverse coupling is purely along x.
pub fn rotate_secular_frame(azx_khz: f64, azy_khz: f64) -> SecularRotation {
    SecularRotation {
        azx_khz: (azx_khz * azx_khz + azy_khz * azy_khz).sqrt(),
        angle_rad: if azx_khz == 0.0 && azy_khz == 0.0 {
            0.0
        } else {
            azy_khz.atan2(azx_khz)
        },
    }
}

// Spin-1 operator matrix elements (Sz eigenbasis |+1⟩, |0⟩, |−1⟩).
const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;

fn spin1_ops() -> (CMat, CMat, CMat) {
    let mut sx = CMat::zeros(3);
    let mut sy = CMat::zeros(3);
    let mut sz = CMat::zeros(3);
    sx[(0, 1)] = C64::new(INV_SQRT2, 0.0);
    sx[(1, 0)] = C64::new(INV_SQRT2, 0.0);
    sx[(1, 2)] = C64::new(INV_SQRT2, 0.0);
    sx[(2, 1)] = C64::new(INV_SQRT2, 0.0);
    sy[(0, 1)] = C64::new(0.0, -INV_SQRT2);
    sy[(1, 0)] = C64::new(0.0, INV_SQRT2);
    sy[(1, 2)] = C64::new(0.0, -INV_SQRT2);
    sy[(2, 1)] = C64::new(0.0, INV_SQRT2);
    sz[(0, 0)] = C64::new(1.0, 0.0);
    sz[(2, 2)] = C64::new(-1.0, 0.0);
    (sx, sy, sz)
}

fn pauli_half() -> (CMat, CMat, CMat) {
    let mut ix = CMat::zeros(2);
    let mut iy = CMat::zeros(2);
    let mut iz = CMat::zeros(2);
    ix[(0, 1)] = C64::new(0.5, 0.0);
    ix[(1, 0)] = C64::new(0.5, 0.0);
    iy[(0, 1)] = C64::new(0.0, -0.5);
    iy[(1, 0)] = C64::new(0.0, 0.5);
    iz[(0, 0)] = C64::new(0.5, 0.0);
    iz[(1, 1)] = C64::new(-0.5, 0.0);
    (ix, iy, iz)
}

/// Full 6×6 lab-frame Hamiltonian (electron spin-1 ⊗ nuclear spin-1/2),
/// entries in kHz. Inputs must be finite; the tensor should be traceless
/// unless a non-weak-coupling tensor is intended.
pub fn full_hamiltonian(
    constants: &PhysicalConstants,
    field: &MagneticField,
    hyperfine: &HyperfineTensor,
) -> Result<CMat, ModelError> {
    constants.validate()?;
    if !hyperfine.is_finite() {
        return Err(ModelError::NonFinite("hyperfine tensor"));
    }
    for b in [field.bx_g, field.by_g, field.bz_g] {
        if !b.is_finite() {
            return Err(ModelError::NonFinite("magnetic field"));
        }
    }

    let we = field.omega_e_khz(constants);
    let wn = field.omega_n_khz(constants);
    let (sx, sy, sz) = spin1_ops();
    let (ix, iy, iz) = pauli_half();
    let e3 = CMat::identity(3);
    let e2 = CMat::identity(2);

    let re = |v: f64| C64::new(v, 0.0);
    let mut h = CMat::zeros(6);
    // Δ Sz² + electron Zeeman
    h.add_assign_scaled(&sz.mul(&sz).kron(&e2), re(constants.delta_khz));
    h.add_assign_scaled(&sx.kron(&e2), re(we[0]));
    h.add_assign_scaled(&sy.kron(&e2), re(we[1]));
    h.add_assign_scaled(&sz.kron(&e2), re(we[2]));
    // nuclear Zeeman
    h.add_assign_scaled(&e3.kron(&ix), re(wn[0]));
    h.add_assign_scaled(&e3.kron(&iy), re(wn[1]));
    h.add_assign_scaled(&e3.kron(&iz), re(wn[2]));
    // hyperfine
    h.add_assign_scaled(&sx.kron(&ix), re(hyperfine.axx_khz));
    h.add_assign_scaled(&sy.kron(&iy), re(hyperfine.ayy_khz));
    h.add_assign_scaled(&sz.kron(&iz), re(hyperfine.azz_khz));
    h.add_assign_scaled(&sz.kron(&ix), re(hyperfine.azx_khz));
    h.add_assign_scaled(&sx.kron(&iz), re(hyperfine.azx_khz));
    Ok(h)
}

/// Per-manifold nuclear Hamiltonians after the rotating-frame average,
/// entries in kHz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuclearEffectiveHamiltonian {
    pub h_plus: Herm2,
    pub h_zero: Herm2,
    pub h_minus: Herm2,
}

impl NuclearEffectiveHamiltonian {
    pub fn for_ms(&self, ms: i8) -> Herm2 {
        match ms {
            1 => self.h_plus,
            0 => self.h_zero,
            -1 => self.h_minus,
            _ => panic!("ms must be -1, 0, or +1"),
        }
    }
}

/// Minimum |Δ ± ωez| (kHz) before the rotating frame is declared degenerate.
pub const DEGENERATE_FRAME_TOL_KHZ: f64 = 1.0;

/// Zeroth- plus first-order rotating-frame nuclear Hamiltonians for each
/// electron manifold (the closed forms obtained by averaging the oscillating
/// cross-manifold couplings).
pub fn floquet_hamiltonians(
    constants: &PhysicalConstants,
    field: &MagneticField,
    hyperfine: &HyperfineTensor,
) -> Result<NuclearEffectiveHamiltonian, ModelError> {
    let we = field.omega_e_khz(constants);
    let wn = field.omega_n_khz(constants);
    let (wex, wey, wez) = (we[0], we[1], we[2]);
    let (wnx, wny, wnz) = (wn[0], wn[1], wn[2]);
    let (axx, ayy, azz, azx) = (
        hyperfine.axx_khz,
        hyperfine.ayy_khz,
        hyperfine.azz_khz,
        hyperfine.azx_khz,
    );
    let delta = constants.delta_khz;

    let d_plus = delta + wez;
    let d_minus = delta - wez;
    if d_plus.abs() < DEGENERATE_FRAME_TOL_KHZ {
        return Err(ModelError::DegenerateFrame {
            sign: '+',
            value_khz: d_plus.abs(),
        });
    }
    if d_minus.abs() < DEGENERATE_FRAME_TOL_KHZ {
        return Err(ModelError::DegenerateFrame {
            sign: '-',
            value_khz: d_minus.abs(),
        });
    }

    // ms = +1 manifold.
    let hp_00 = 0.5 * (azz + wnz)
        + ((axx - ayy).powi(2) + (azx + 2.0 * wex).powi(2) + 4.0 * wey * wey) / (8.0 * d_plus);
    let hp_11 = -0.5 * (azz + wnz)
        + ((axx + ayy).powi(2) + (azx - 2.0 * wex).powi(2) + 4.0 * wey * wey) / (8.0 * d_plus);
    // off-diagonal (0,1) entry: re − i·im
    let hp_re = 0.5 * (azx + wnx) + (2.0 * axx * wex + ayy * azx) / (4.0 * d_plus);
    let hp_im = 0.5 * wny + (2.0 * ayy * wey) / (4.0 * d_plus);

    // ms = 0 manifold; denominators carry Δ² − ωez².
    let d0 = delta * delta - wez * wez;
    let quad_p = axx * axx + ayy * ayy + (azx + 2.0 * wex).powi(2) + 4.0 * wey * wey;
    let quad_m = axx * axx + ayy * ayy + (azx - 2.0 * wex).powi(2) + 4.0 * wey * wey;
    let h0_00 = 0.5 * wnz - (delta * quad_p - 2.0 * axx * ayy * wez) / (4.0 * d0);
    let h0_11 = -0.5 * wnz - (delta * quad_m + 2.0 * axx * ayy * wez) / (4.0 * d0);
    let h0_re = 0.5 * wnx - (2.0 * delta * axx * wex + ayy * azx * wez) / (2.0 * d0);
    let h0_im = 0.5 * wny - (2.0 * delta * ayy * wey) / (2.0 * d0);

    // ms = −1 manifold.
    let hm_00 = 0.5 * (wnz - azz)
        + ((axx + ayy).powi(2) + (azx + 2.0 * wex).powi(2) + 4.0 * wey * wey) / (8.0 * d_minus);
    let hm_11 = 0.5 * (azz - wnz)
        + ((axx - ayy).powi(2) + (azx - 2.0 * wex).powi(2) + 4.0 * wey * wey) / (8.0 * d_minus);
    let hm_re = 0.5 * (wnx - azx) + (2.0 * axx * wex - ayy * azx) / (4.0 * d_minus);
    let hm_im = 0.5 * wny - (2.0 * ayy * wey) / (4.0 * d_minus);

    let pack = |d00: f64, d11: f64, re: f64, im: f64| Herm2 {
        c0: 0.5 * (d00 + d11),
        cz: 0.5 * (d00 - d11),
        cx: re,
        cy: im,
    };
    Ok(NuclearEffectiveHamiltonian {
        h_plus: pack(hp_00, hp_11, hp_re, hp_im),
        h_zero: pack(h0_00, h0_11, h0_re, h0_im),
        h_minus: pack(hm_00, hm_11, hm_re, hm_im),
    })
}

/// Precession frequency and axis of a 2×2 nuclear Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Precession {
    pub freq_khz: f64,
    /// None when the frequency vanishes (no precession, axis undefined).
    pub axis: Option<[f64; 3]>,
}

/// `n⃗ = (Tr σx h, Tr σy h, Tr σz h)`, frequency `‖n⃗‖`, axis `n⃗/‖n⃗‖`.
pub fn precession_axis_frequency(h: &Herm2) -> Precession {
    let n = [2.0 * h.cx, 2.0 * h.cy, 2.0 * h.cz];
    let f = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    Precession {
        freq_khz: f,
        axis: if f > 0.0 {
            Some([n[0] / f, n[1] / f, n[2] / f])
        } else {
            None
        },
    }
}

/// Secular branch frequencies `f± = √(Azx² + (Azz ± ωn)²)` in kHz.
pub fn precession_frequencies_secular(azz: f64, azx: f64, omega_n: f64) -> (f64, f64) {
    let fp = (azx * azx + (azz + omega_n) * (azz + omega_n)).sqrt();
    let fm = (azx * azx + (azz - omega_n) * (azz - omega_n)).sqrt();
    (fp, fm)
}

/// First-order branch-frequency deviations caused by a residual transverse
/// field:
///
/// ```text
/// Δf₊ = (Azz+ωn)·Azx·ωex / (f₊·(Δ+ωe)) + Azx·ωnx / f₊
/// Δf₋ = (Azz−ωn)·Azx·ωex / (f₋·(Δ−ωe)) − Azx·ωnx / f₋
/// ```
///
/// Sign convention: the deviation is *zeroth-order minus measured*, so a
/// measured frequency is de-biased by adding Δf (secular = measured + Δf),
/// and the forward model for a measurement is secular − Δf.
#[allow(clippy::too_many_arguments)]
pub fn frequency_deviation(
    azz: f64,
    azx: f64,
    omega_n: f64,
    omega_ex: f64,
    omega_nx: f64,
    delta: f64,
    omega_e: f64,
) -> Result<(f64, f64), ModelError> {
    let (fp, fm) = precession_frequencies_secular(azz, azx, omega_n);
    if fp == 0.0 {
        return Err(ModelError::ZeroFrequency { which: "plus" });
    }
    if fm == 0.0 {
        return Err(ModelError::ZeroFrequency { which: "minus" });
    }
    let dfp = (azz + omega_n) * azx * omega_ex / (fp * (delta + omega_e)) + azx * omega_nx / fp;
    let dfm = (azz - omega_n) * azx * omega_ex / (fm * (delta - omega_e)) - azx * omega_nx / fm;
    Ok((dfp, dfm))
}

/// Context for the transverse-field de-biasing inside [`invert_hyperfine`].
#[derive(Debug, Clone, Copy)]
pub struct BxCorrection {
    pub bx_g: f64,
    pub constants: PhysicalConstants,
    pub bz_g: f64,
}

impl BxCorrection {
    pub fn new(bx_g: f64, constants: PhysicalConstants, bz_g: f64) -> Self {
        BxCorrection {
            bx_g,
            constants,
            bz_g,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperfineInversion {
    pub azz_khz: f64,
    pub azx_khz: f64,
    pub iterations: u32,
    pub converged: bool,
}

const INVERT_MAX_ITER: u32 = 10;
const INVERT_TOL_KHZ: f64 = 1e-6;
/// Small negative azx radicands (kHz²) are clamped to zero; anything worse is
/// reported as inconsistent input.
const RADICAND_CLAMP: f64 = 1e-6;

fn invert_zeroth(f_plus: f64, f_minus: f64, omega_n: f64) -> Result<(f64, f64), ModelError> {
    let azz = (f_plus * f_plus - f_minus * f_minus) / (4.0 * omega_n);
    let radicand = f_plus * f_plus - (azz + omega_n) * (azz + omega_n);
    if radicand < -RADICAND_CLAMP * f_plus * f_plus.max(1.0) {
        return Err(ModelError::InconsistentFrequencies { radicand });
    }
    Ok((azz, radicand.max(0.0).sqrt()))
}

/// Recovers (Azz, Azx) from a measured branch-frequency pair.
///
/// Zeroth order inverts the secular formulas directly. With a correction the
/// measured pair is first de-biased by [`frequency_deviation`] at the given
/// Bx, iterating to a fixed point; Δf ≪ f so the iteration contracts fast.
pub fn invert_hyperfine(
    f_plus: f64,
    f_minus: f64,
    omega_n: f64,
    correction: Option<&BxCorrection>,
) -> Result<HyperfineInversion, ModelError> {
    if omega_n == 0.0 {
        return Err(ModelError::Invalid("omega_n must be nonzero".into()));
    }
    let (mut azz, mut azx) = invert_zeroth(f_plus, f_minus, omega_n)?;
    let Some(corr) = correction else {
        return Ok(HyperfineInversion {
            azz_khz: azz,
            azx_khz: azx,
            iterations: 0,
            converged: true,
        });
    };

    let omega_ex = corr.constants.gamma_e_khz_per_g * corr.bx_g;
    let omega_nx = corr.constants.gamma_n_khz_per_g * corr.bx_g;
    let omega_ez = corr.constants.gamma_e_khz_per_g * corr.bz_g;
    let delta = corr.constants.delta_khz;

    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=INVERT_MAX_ITER {
        iterations = it;
        let (dfp, dfm) =
            frequency_deviation(azz, azx, omega_n, omega_ex, omega_nx, delta, omega_ez)?;
        // secular estimate = measured + deviation
        let (next_azz, next_azx) = invert_zeroth(f_plus + dfp, f_minus + dfm, omega_n)?;
        let step = (next_azz - azz).abs().max((next_azx - azx).abs());
        azz = next_azz;
        azx = next_azx;
        if step < INVERT_TOL_KHZ {
            converged = true;
            break;
        }
    }
    Ok(HyperfineInversion {
        azz_khz: azz,
        azx_khz: azx,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const SPIN1_AZZ: f64 = 566.0;
    const SPIN1_AZX: f64 = 208.0;
    const SPIN1_OMEGA_N: f64 = 530.177;

    fn table_config() -> SystemConfig {
        let mut cfg = SystemConfig::new(
            PhysicalConstants::default(),
            MagneticField::z_only(495.0),
        );
        cfg.resolved_spins.push(NuclearSpinRecord::new(
            1,
            HyperfineTensor::weak_coupling(SPIN1_AZZ, SPIN1_AZX),
            0.95,
        ));
        cfg
    }

    #[test]
    fn gamma_n_default_reproduces_measured_larmor() {
        let cfg = table_config();
        // γn·495 G within 1 kHz of the measured ≈530.2 kHz
        assert!((cfg.omega_n_khz() - 530.2).abs() < 1.0);
    }

    #[test]
    fn decoupled_spin_sees_bare_larmor_in_every_manifold() {
        let mut cfg = table_config();
        cfg.resolved_spins[0].hyperfine = HyperfineTensor::weak_coupling(0.0, 0.0);
        let fields = effective_hamiltonian(&cfg);
        let wn = cfg.omega_n_khz();
        for ms in [-1i8, 0, 1] {
            let f = fields[0].for_ms(ms);
            assert_eq!(f[0], 0.0);
            assert_eq!(f[1], 0.0);
            assert_relative_eq!(f[2], wn, max_relative = 1e-15);
        }
    }

    #[test]
    fn spin1_minus_manifold_field_components() {
        // γn calibrated so ωn equals the measured 530.177 kHz at 495 G.
        let mut cfg = table_config();
        cfg.constants.gamma_n_khz_per_g = SPIN1_OMEGA_N / 495.0;
        let fields = effective_hamiltonian(&cfg);
        let f = fields[0].minus;
        // ωn − Azz = 530.177 − 566.0 and x component −Azx
        assert_relative_eq!(f[2], -35.823, epsilon = 1e-9);
        assert_relative_eq!(f[0], -208.0, epsilon = 1e-12);
    }

    #[test]
    fn ms_zero_field_is_exactly_larmor() {
        let mut cfg = table_config();
        cfg.resolved_spins[0].hyperfine =
            HyperfineTensor::new_unchecked(17.0, -93.0, 412.0, 55.0, 12.0);
        let fields = effective_hamiltonian(&cfg);
        assert_eq!(fields[0].zero, [0.0, 0.0, cfg.omega_n_khz()]);
    }

    #[test]
    fn secular_rotation_examples() {
        let r = rotate_secular_frame(208.0, 0.0);
        assert_eq!((r.azx_khz, r.angle_rad), (208.0, 0.0));
        let r = rotate_secular_frame(3.0, 4.0);
        assert_relative_eq!(r.azx_khz, 5.0, epsilon = 1e-12);
        let r = rotate_secular_frame(0.0, 0.0);
        assert_eq!((r.azx_khz, r.angle_rad), (0.0, 0.0));
    }

    #[test]
    fn full_hamiltonian_zero_field_spectrum() {
        let c = PhysicalConstants::default();
        let h = full_hamiltonian(
            &c,
            &MagneticField::z_only(0.0),
            &HyperfineTensor::weak_coupling(0.0, 0.0),
        )
        .unwrap();
        // Diagonal with Δ (×4) and 0 (×2).
        assert!(h.hermiticity_residual() < 1e-12);
        let mut diag: Vec<f64> = (0..6).map(|i| h[(i, i)].re).collect();
        diag.sort_by(f64::total_cmp);
        assert_eq!(&diag[..2], &[0.0, 0.0]);
        for d in &diag[2..] {
            assert_relative_eq!(*d, c.delta_khz, max_relative = 1e-15);
        }
    }

    #[test]
    fn full_hamiltonian_rejects_non_finite() {
        let c = PhysicalConstants::default();
        let t = HyperfineTensor::new_unchecked(f64::NAN, 0.0, 0.0, 0.0, 0.0);
        assert!(full_hamiltonian(&c, &MagneticField::z_only(495.0), &t).is_err());
    }

    #[test]
    fn floquet_decoupled_limit_is_pure_larmor() {
        let c = PhysicalConstants::default();
        let f = MagneticField::z_only(495.0);
        let nh =
            floquet_hamiltonians(&c, &f, &HyperfineTensor::weak_coupling(0.0, 0.0)).unwrap();
        let wn = c.gamma_n_khz_per_g * 495.0;
        for h in [nh.h_plus, nh.h_zero, nh.h_minus] {
            assert_relative_eq!(h.eigen_gap(), wn, max_relative = 1e-12);
            assert!(h.cx.abs() < 1e-12 && h.cy.abs() < 1e-12);
        }
    }

    #[test]
    fn floquet_degenerate_frame_rejected() {
        let c = PhysicalConstants::default();
        // ωez = Δ makes Δ − ωez vanish
        let bz = c.delta_khz / c.gamma_e_khz_per_g;
        let err = floquet_hamiltonians(
            &c,
            &MagneticField::z_only(bz),
            &HyperfineTensor::weak_coupling(100.0, 10.0),
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::DegenerateFrame { .. }));
    }

    #[test]
    fn precession_of_pure_z_hamiltonian() {
        let h = Herm2::from_field_khz([0.0, 0.0, 440.0]);
        let p = precession_axis_frequency(&h);
        assert_relative_eq!(p.freq_khz, 440.0, epsilon = 1e-12);
        assert_eq!(p.axis, Some([0.0, 0.0, 1.0]));
    }

    #[test]
    fn precession_pythagorean() {
        let h = Herm2 {
            c0: 0.0,
            cx: 1.5, // a = 3
            cy: 0.0,
            cz: 2.0, // b = 4
        };
        assert_relative_eq!(precession_axis_frequency(&h).freq_khz, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn precession_zero_flagged() {
        let p = precession_axis_frequency(&Herm2::zero());
        assert_eq!(p.freq_khz, 0.0);
        assert!(p.axis.is_none());
    }

    #[test]
    fn secular_branch_frequencies_spin1_and_spin2() {
        // Eq-level forward check against the measured pairs; the plus branch
        // lands within 0.3 kHz while the spin-1 minus branch is ~2 kHz off
        // until the transverse-field correction is applied.
        let (fp, fm) = precession_frequencies_secular(SPIN1_AZZ, SPIN1_AZX, SPIN1_OMEGA_N);
        assert_relative_eq!(fp, 1115.7365, epsilon = 1e-3);
        assert_relative_eq!(fm, 211.0623, epsilon = 1e-3);
        assert!((fp - 1115.49).abs() < 0.3);
        assert!((fm - 213.09).abs() < 2.1);
        let (fp, fm) = precession_frequencies_secular(45.9, 72.0, 530.672);
        assert_relative_eq!(fp, 581.0501, epsilon = 1e-3);
        assert_relative_eq!(fm, 490.0897, epsilon = 1e-3);
        assert!((fp - 580.79).abs() < 0.3);
        assert!((fm - 489.77).abs() < 0.4);
    }

    #[test]
    fn secular_branches_decoupled() {
        let (fp, fm) = precession_frequencies_secular(0.0, 0.0, 530.0);
        assert_eq!((fp, fm), (530.0, 530.0));
    }

    #[test]
    fn deviation_vanishes_without_transverse_field_or_coupling() {
        let d = frequency_deviation(566.0, 208.0, 530.177, 0.0, 0.0, 2.8776e6, 1.387e6).unwrap();
        assert_eq!(d, (0.0, 0.0));
        let d = frequency_deviation(566.0, 0.0, 530.177, 7000.0, 2.7, 2.8776e6, 1.387e6).unwrap();
        assert_eq!(d, (0.0, 0.0));
    }

    #[test]
    fn deviation_spin1_at_max_calibration_bound() {
        // Frozen from the formula at Bx = 2.5 G, Bz = 495 G, default constants.
        let c = PhysicalConstants::default();
        let wex = c.gamma_e_khz_per_g * 2.5;
        let wnx = c.gamma_n_khz_per_g * 2.5;
        let wez = c.gamma_e_khz_per_g * 495.0;
        let (dfp, dfm) =
            frequency_deviation(SPIN1_AZZ, SPIN1_AZX, SPIN1_OMEGA_N, wex, wnx, c.delta_khz, wez)
                .unwrap();
        assert_relative_eq!(dfp, 0.83463, epsilon = 1e-4);
        assert_relative_eq!(dfm, -2.47146, epsilon = 1e-4);
    }

    #[test]
    fn inversion_spin2_zeroth_order() {
        let inv = invert_hyperfine(580.79, 489.77, 530.672, None).unwrap();
        assert_relative_eq!(inv.azz_khz, 45.9052, epsilon = 1e-3);
        assert_relative_eq!(inv.azx_khz, 69.8268, epsilon = 1e-3);
    }

    #[test]
    fn inversion_degenerate_pair_gives_zero() {
        let inv = invert_hyperfine(530.0, 530.0, 530.0, None).unwrap();
        assert_eq!(inv.azz_khz, 0.0);
        assert_eq!(inv.azx_khz, 0.0);
    }

    #[test]
    fn inversion_rejects_inconsistent_pair() {
        // f_plus far too small for the implied azz
        let err = invert_hyperfine(100.0, 900.0, 530.0, None).unwrap_err();
        assert!(matches!(err, ModelError::InconsistentFrequencies { .. }));
    }

    #[test]
    fn corrected_inversion_converges_quickly() {
        let corr = BxCorrection::new(2.0, PhysicalConstants::default(), 495.0);
        let inv = invert_hyperfine(1115.49, 213.09, 530.177, Some(&corr)).unwrap();
        assert!(inv.converged);
        assert!(inv.iterations <= 5);
        // Pulls the pair onto the corrected values.
        assert_relative_eq!(inv.azz_khz, 566.4325, epsilon = 1e-3);
        assert_relative_eq!(inv.azx_khz, 207.9787, epsilon = 1e-3);
    }

    #[test]
    fn bath_bound_enforced() {
        let mut cfg = table_config();
        cfg.bath_spins
            .push(HyperfineTensor::weak_coupling(15.0, 2.0));
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn weak_coupling_constructor_traceless(azz in -700f64..700.0, azx in 0f64..250.0) {
            let t = HyperfineTensor::weak_coupling(azz, azx);
            prop_assert_eq!(t.trace_khz(), 0.0);
            prop_assert!(t.is_traceless());
        }

        #[test]
        fn secular_fold_preserves_transverse_norm(azx in -300f64..300.0, azy in -300f64..300.0) {
            let r = rotate_secular_frame(azx, azy);
            let norm = (azx * azx + azy * azy).sqrt();
            prop_assert!((r.azx_khz - norm).abs() < 1e-9);
        }

        #[test]
        fn inversion_round_trip_identity(
            azz in -700f64..700.0,
            azx in 0.1f64..250.0,
            omega_n in 300f64..700.0,
        ) {
            let (fp, fm) = precession_frequencies_secular(azz, azx, omega_n);
            let inv = invert_hyperfine(fp, fm, omega_n, None).unwrap();
            prop_assert!((inv.azz_khz - azz).abs() < 1e-9);
            prop_assert!((inv.azx_khz - azx).abs() < 1e-9);
        }

        #[test]
        fn floquet_matches_secular_without_transverse_terms(
            azz in -900f64..900.0,
            azx in 0f64..300.0,
        ) {
            // Bx = By = 0 and Axx = Ayy = 0: the rotating-frame result must
            // collapse onto the secular formulas.
            let c = PhysicalConstants::default();
            let f = MagneticField::z_only(495.0);
            let t = HyperfineTensor::new_unchecked(0.0, 0.0, azz, azx, 0.0);
            let nh = floquet_hamiltonians(&c, &f, &t).unwrap();
            let wn = c.gamma_n_khz_per_g * 495.0;
            let (fp, fm) = precession_frequencies_secular(azz, azx, wn);
            prop_assert!((nh.h_plus.eigen_gap() - fp).abs() <= 1e-10 * fp.max(1.0));
            prop_assert!((nh.h_minus.eigen_gap() - fm).abs() <= 1e-10 * fm.max(1.0));
            prop_assert!((nh.h_zero.eigen_gap() - wn).abs() <= 1e-10 * wn);
        }
    }
}
