//! Shared test support: the measured-data fixtures used for regression
//! checks, and an independent dense Hermitian eigensolver that serves as the
//! diagonalization oracle. The oracle deliberately shares no code with the
//! closed-form rotating-frame path it cross-checks.

#![allow(dead_code)]

use num_complex::Complex64 as C64;
use nvhl::cmat::CMat;
use nvhl::spin_model::{
    BranchMapping, HyperfineTensor, MagneticField, MeasuredFrequency, NuclearSpinRecord,
    PhysicalConstants, SystemConfig,
};

/// One row of the measured fixture table: hyperfine pair, polarization
/// fidelity, and the measured branch-frequency triple.
#[derive(Debug, Clone, Copy)]
pub struct MeasuredSpin {
    pub id: u32,
    pub azx_khz: f64,
    pub azz_khz: f64,
    pub f_init: f64,
    /// Measured plus-branch magnitude (√(Azx² + (Azz + ωn)²) family).
    pub f_plus_khz: f64,
    pub f_plus_err: f64,
    /// Measured minus-branch magnitude; `minus_sign` records a negative sign
    /// the source carried on this entry.
    pub f_minus_khz: f64,
    pub f_minus_err: f64,
    pub minus_sign: bool,
    pub omega_n_khz: f64,
    pub omega_n_err: f64,
}

/// The ten resolved spins. Branch labels follow the by-sign convention, so
/// each measured frequency is assigned to the branch whose secular formula
/// it matches; in this dataset the larger-|Azz + ωn| member is the plus
/// branch for every spin.
pub const MEASURED_SPINS: [MeasuredSpin; 10] = [
    MeasuredSpin { id: 1, azx_khz: 208.0, azz_khz: 566.0, f_init: 0.95, f_plus_khz: 1115.49, f_plus_err: 0.08, f_minus_khz: 213.09, f_minus_err: 0.08, minus_sign: true, omega_n_khz: 530.177, omega_n_err: 0.004 },
    MeasuredSpin { id: 2, azx_khz: 72.0, azz_khz: 45.9, f_init: 0.94, f_plus_khz: 580.79, f_plus_err: 0.04, f_minus_khz: 489.77, f_minus_err: 0.04, minus_sign: false, omega_n_khz: 530.672, omega_n_err: 0.004 },
    MeasuredSpin { id: 3, azx_khz: 72.0, azz_khz: -15.1, f_init: 0.93, f_plus_khz: 520.25, f_plus_err: 0.08, f_minus_khz: 550.35, f_minus_err: 0.08, minus_sign: false, omega_n_khz: 530.657, omega_n_err: 0.004 },
    MeasuredSpin { id: 4, azx_khz: 71.0, azz_khz: 118.1, f_init: 0.97, f_plus_khz: 652.50, f_plus_err: 0.04, f_minus_khz: 418.36, f_minus_err: 0.04, minus_sign: false, omega_n_khz: 530.636, omega_n_err: 0.004 },
    MeasuredSpin { id: 5, azx_khz: 43.0, azz_khz: 5.50, f_init: 0.92, f_plus_khz: 537.61, f_plus_err: 0.04, f_minus_khz: 526.70, f_minus_err: 0.04, minus_sign: false, omega_n_khz: 530.615, omega_n_err: 0.005 },
    MeasuredSpin { id: 6, azx_khz: 33.0, azz_khz: -49.64, f_init: 0.93, f_plus_khz: 481.83, f_plus_err: 0.04, f_minus_khz: 581.02, f_minus_err: 0.04, minus_sign: false, omega_n_khz: 530.597, omega_n_err: 0.005 },
    MeasuredSpin { id: 7, azx_khz: 32.0, azz_khz: 46.34, f_init: 0.81, f_plus_khz: 577.74, f_plus_err: 0.04, f_minus_khz: 485.27, f_minus_err: 0.04, minus_sign: false, omega_n_khz: 530.578, omega_n_err: 0.005 },
    MeasuredSpin { id: 8, azx_khz: 31.0, azz_khz: 27.09, f_init: 0.78, f_plus_khz: 558.47, f_plus_err: 0.04, f_minus_khz: 504.42, f_minus_err: 0.04, minus_sign: false, omega_n_khz: 530.655, omega_n_err: 0.005 },
    MeasuredSpin { id: 9, azx_khz: 29.0, azz_khz: 28.70, f_init: 0.78, f_plus_khz: 559.88, f_plus_err: 0.04, f_minus_khz: 502.59, f_minus_err: 0.04, minus_sign: false, omega_n_khz: 530.569, omega_n_err: 0.005 },
    MeasuredSpin { id: 10, azx_khz: 17.0, azz_khz: -14.28, f_init: 0.86, f_plus_khz: 516.51, f_plus_err: 0.04, f_minus_khz: 545.08, f_minus_err: 0.04, minus_sign: false, omega_n_khz: 530.573, omega_n_err: 0.004 },
];

/// Gate parameters measured for the entangling gate on spin 1.
pub const SPIN1_CX_N_PULSES: u32 = 10;
pub const SPIN1_CX_TAU_NS: f64 = 290.0;

/// Full ten-spin config at 495 G. The measured dataset pairs the larger
/// branch frequency with the electron |−1⟩ manifold, so the plus branch maps
/// to ms = −1 here.
pub fn paper_config() -> SystemConfig {
    let mut cfg = SystemConfig::new(PhysicalConstants::default(), MagneticField::z_only(495.0));
    cfg.branch_mapping = BranchMapping { plus_branch_ms: -1 };
    for s in MEASURED_SPINS {
        let mut rec = NuclearSpinRecord::new(
            s.id,
            HyperfineTensor::weak_coupling(s.azz_khz, s.azx_khz),
            s.f_init,
        );
        rec.measured_f_plus_branch = Some(MeasuredFrequency::new(s.f_plus_khz, s.f_plus_err));
        rec.measured_f_minus_branch = Some(MeasuredFrequency {
            khz: s.f_minus_khz,
            err_khz: s.f_minus_err,
            negative_sign: s.minus_sign,
        });
        rec.measured_omega_n = Some(MeasuredFrequency::new(s.omega_n_khz, s.omega_n_err));
        cfg.resolved_spins.push(rec);
    }
    cfg
}

/// Subset config keeping only the given spin ids (by-sign mapping).
pub fn subset_config(ids: &[u32]) -> SystemConfig {
    let full = paper_config();
    let mut cfg = SystemConfig::new(full.constants, full.field);
    cfg.resolved_spins = full
        .resolved_spins
        .into_iter()
        .filter(|s| ids.contains(&s.id))
        .collect();
    cfg
}

// ---------------------------------------------------------------------------
// Dense Hermitian eigensolver (cyclic Jacobi with complex rotations)
// ---------------------------------------------------------------------------

/// Eigenvalues of a Hermitian matrix, ascending. Cyclic Jacobi; converges
/// quadratically, and for the 6×6 systems used here lands at machine
/// precision well inside the sweep limit.
pub fn hermitian_eigenvalues(h: &CMat) -> Vec<f64> {
    assert!(
        h.hermiticity_residual() < 1e-9 * h.max_abs().max(1.0),
        "matrix is not Hermitian"
    );
    let n = h.n;
    let mut a = h.clone();
    // Work on a Hermitized copy to keep rounding symmetric.
    for i in 0..n {
        for j in 0..n {
            let sym = (a[(i, j)] + a[(j, i)].conj()) * C64::new(0.5, 0.0);
            a[(i, j)] = sym;
            a[(j, i)] = sym.conj();
        }
    }

    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a[(p, q)].norm());
            }
        }
        if off < 1e-13 * a.max_abs().max(1.0) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.norm() < 1e-300 {
                    continue;
                }
                let app = a[(p, p)].re;
                let aqq = a[(q, q)].re;
                // Phase so the off-diagonal becomes real, then a real Jacobi
                // rotation on the (p, q) plane.
                let phase = apq / apq.norm();
                let b = apq.norm();
                let zeta = (aqq - app) / (2.0 * b);
                let t = zeta.signum() / (zeta.abs() + (zeta * zeta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // Columns/rows update with u_p = c·e_p − s·phase*·e_q,
                // u_q = s·phase·e_p + c·e_q.
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = akp * c - akq * s * phase.conj();
                    a[(k, q)] = akp * s * phase + akq * c;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = apk * c - aqk * s * phase;
                    a[(q, k)] = apk * s * phase.conj() + aqk * c;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)].re).collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Per-manifold eigen-gaps of a 6×6 spin Hamiltonian at a strong z field:
/// the six levels cluster into (ms = 0, ms = −1, ms = +1) pairs ordered by
/// energy, and each cluster's splitting is that manifold's precession
/// frequency.
pub fn manifold_gaps(h: &CMat) -> (f64, f64, f64) {
    let ev = hermitian_eigenvalues(h);
    assert_eq!(ev.len(), 6);
    (
        ev[1] - ev[0], // ms = 0 cluster sits lowest
        ev[3] - ev[2], // ms = −1 at Δ − ωez
        ev[5] - ev[4], // ms = +1 at Δ + ωez
    )
}

#[cfg(test)]
mod oracle_checks {
    use super::*;

    #[test]
    fn jacobi_reproduces_pauli_x_spectrum() {
        let mut m = CMat::zeros(2);
        m[(0, 1)] = C64::new(0.5, -0.25);
        m[(1, 0)] = C64::new(0.5, 0.25);
        let ev = hermitian_eigenvalues(&m);
        let r = (0.5f64 * 0.5 + 0.25 * 0.25).sqrt();
        assert!((ev[0] + r).abs() < 1e-12);
        assert!((ev[1] - r).abs() < 1e-12);
    }

    #[test]
    fn jacobi_trace_preserved() {
        let mut m = CMat::zeros(4);
        for i in 0..4 {
            m[(i, i)] = C64::new(i as f64, 0.0);
        }
        m[(0, 3)] = C64::new(0.3, 0.7);
        m[(3, 0)] = C64::new(0.3, -0.7);
        m[(1, 2)] = C64::new(-1.1, 0.2);
        m[(2, 1)] = C64::new(-1.1, -0.2);
        let ev = hermitian_eigenvalues(&m);
        let tr: f64 = ev.iter().sum();
        assert!((tr - 6.0).abs() < 1e-10);
    }
}
