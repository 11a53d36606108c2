//! Two-level building blocks: SU(2) elements as unit quaternions, Hermitian
//! 2×2 operators in Pauli coordinates, and a plain complex 2×2 matrix.
//!
//! A unit quaternion `(w, x, y, z)` encodes the special unitary
//! `U = w·I − i(x·σx + y·σy + z·σz)`, i.e. a rotation by `2·atan2(|v|, w)`
//! about `v/|v|`. Products, powers, and the coherence overlap
//! `Re Tr(U V†)/2` are all a handful of real multiplications, which keeps the
//! τ-sweep and grid-search inner loops cheap.

use num_complex::Complex64 as C64;

use crate::units;

/// SU(2) element stored as a unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

pub const IDENTITY: Quat = Quat {
    w: 1.0,
    x: 0.0,
    y: 0.0,
    z: 0.0,
};

impl Quat {
    /// Rotation by `angle_rad` about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: [f64; 3], angle_rad: f64) -> Self {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n == 0.0 {
            return IDENTITY;
        }
        let (s, c) = (0.5 * angle_rad).sin_cos();
        Quat {
            w: c,
            x: s * axis[0] / n,
            y: s * axis[1] / n,
            z: s * axis[2] / n,
        }
    }

    /// Propagator `exp(−i (f⃗·σ⃗/2) t)` for a field vector in kHz over `t_ns`.
    ///
    /// The rotation angle is `2π·|f⃗|·t` with t in ms, so a spin under a pure
    /// z field of `f` kHz precesses at exactly `f` cycles per ms.
    pub fn from_field_khz(field_khz: [f64; 3], t_ns: f64) -> Self {
        let mag = (field_khz[0] * field_khz[0]
            + field_khz[1] * field_khz[1]
            + field_khz[2] * field_khz[2])
            .sqrt();
        let angle = units::phase_rad(mag, t_ns);
        if mag == 0.0 {
            return IDENTITY;
        }
        Quat::from_axis_angle(field_khz, angle)
    }

    /// Hamilton product; matches matrix composition `self · rhs` (rhs first).
    #[inline]
    pub fn mul(self, rhs: Quat) -> Quat {
        Quat {
            w: self.w * rhs.w - self.x * rhs.x - self.y * rhs.y - self.z * rhs.z,
            x: self.w * rhs.x + self.x * rhs.w + self.y * rhs.z - self.z * rhs.y,
            y: self.w * rhs.y + self.y * rhs.w + self.z * rhs.x - self.x * rhs.z,
            z: self.w * rhs.z + self.z * rhs.w + self.x * rhs.y - self.y * rhs.x,
        }
    }

    /// `Re Tr(self · other†)/2`: the coherence overlap of two branches.
    #[inline]
    pub fn dot(self, other: Quat) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    #[inline]
    pub fn adjoint(self) -> Quat {
        Quat {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Renormalizes against floating-point drift in long products.
    #[inline]
    pub fn normalized(self) -> Quat {
        let n = self.norm();
        Quat {
            w: self.w / n,
            x: self.x / n,
            y: self.y / n,
            z: self.z / n,
        }
    }

    /// Integer power via axis–angle, exact for unit quaternions.
    pub fn powi(self, k: u32) -> Quat {
        if k == 0 {
            return IDENTITY;
        }
        let v = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        if v < 1e-300 {
            // ±identity: (±1)^k
            let w = if self.w >= 0.0 { 1.0 } else { (-1.0f64).powi(k as i32) };
            return Quat { w, x: 0.0, y: 0.0, z: 0.0 };
        }
        let half = v.atan2(self.w);
        let (s, c) = (k as f64 * half).sin_cos();
        Quat {
            w: c,
            x: s * self.x / v,
            y: s * self.y / v,
            z: s * self.z / v,
        }
    }

    /// Same rotation with `w ≥ 0`, so the angle below lands in `[0, π]`.
    #[inline]
    pub fn canonical(self) -> Quat {
        if self.w < 0.0 {
            Quat {
                w: -self.w,
                x: -self.x,
                y: -self.y,
                z: -self.z,
            }
        } else {
            self
        }
    }

    /// Rotation angle in `[0, π]` of the canonical representative.
    pub fn rotation_angle(self) -> f64 {
        let q = self.canonical();
        let v = (q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
        2.0 * v.atan2(q.w)
    }

    /// Rotation axis of the canonical representative; `None` for (near-)identity.
    pub fn rotation_axis(self) -> Option<[f64; 3]> {
        let q = self.canonical();
        let v = (q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
        if v < 1e-12 {
            None
        } else {
            Some([q.x / v, q.y / v, q.z / v])
        }
    }

    /// `|Tr(U)|/2 = |w|`; 1 exactly when U is a global phase times identity.
    #[inline]
    pub fn trace_abs_half(self) -> f64 {
        self.w.abs().min(1.0)
    }

    /// Conjugation by a frame rotation `Rz(φ)`: rotates the x–y components of
    /// the rotation axis by `φ`, leaving angle and z component unchanged.
    pub fn z_frame(self, phi: f64) -> Quat {
        let (s, c) = phi.sin_cos();
        Quat {
            w: self.w,
            x: c * self.x - s * self.y,
            y: s * self.x + c * self.y,
            z: self.z,
        }
    }

    pub fn to_mat2(self) -> Mat2 {
        // U = w·I − i(xσx + yσy + zσz)
        Mat2([
            [C64::new(self.w, -self.z), C64::new(-self.y, -self.x)],
            [C64::new(self.y, -self.x), C64::new(self.w, self.z)],
        ])
    }
}

/// Hermitian 2×2 operator `c0·I + cx·σx + cy·σy + cz·σz`, coefficients in kHz.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Herm2 {
    pub c0: f64,
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
}

impl Herm2 {
    pub fn zero() -> Self {
        Herm2 {
            c0: 0.0,
            cx: 0.0,
            cy: 0.0,
            cz: 0.0,
        }
    }

    /// `(f⃗·σ⃗)/2` for a field vector: the spin-1/2 Hamiltonian whose
    /// eigen-gap equals `|f⃗|`.
    pub fn from_field_khz(f: [f64; 3]) -> Self {
        Herm2 {
            c0: 0.0,
            cx: 0.5 * f[0],
            cy: 0.5 * f[1],
            cz: 0.5 * f[2],
        }
    }

    /// Difference of the two eigenvalues, `2·|c⃗|`, in kHz.
    pub fn eigen_gap(self) -> f64 {
        2.0 * (self.cx * self.cx + self.cy * self.cy + self.cz * self.cz).sqrt()
    }

    pub fn to_mat2(self) -> Mat2 {
        Mat2([
            [
                C64::new(self.c0 + self.cz, 0.0),
                C64::new(self.cx, -self.cy),
            ],
            [C64::new(self.cx, self.cy), C64::new(self.c0 - self.cz, 0.0)],
        ])
    }

    /// Pauli coordinates of a Hermitian matrix. The anti-Hermitian residue is
    /// discarded; callers check Hermiticity separately where it matters.
    pub fn from_mat2(m: &Mat2) -> Self {
        Herm2 {
            c0: 0.5 * (m.0[0][0].re + m.0[1][1].re),
            cx: 0.5 * (m.0[0][1].re + m.0[1][0].re),
            cy: 0.5 * (m.0[1][0].im - m.0[0][1].im),
            cz: 0.5 * (m.0[0][0].re - m.0[1][1].re),
        }
    }
}

/// Plain complex 2×2 matrix, for paths where a global phase matters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat2(pub [[C64; 2]; 2]);

impl Mat2 {
    pub fn identity() -> Self {
        Mat2([
            [C64::new(1.0, 0.0), C64::new(0.0, 0.0)],
            [C64::new(0.0, 0.0), C64::new(1.0, 0.0)],
        ])
    }

    pub fn mul(&self, rhs: &Mat2) -> Mat2 {
        let a = &self.0;
        let b = &rhs.0;
        let mut out = [[C64::new(0.0, 0.0); 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        Mat2(out)
    }

    pub fn adjoint(&self) -> Mat2 {
        let a = &self.0;
        Mat2([[a[0][0].conj(), a[1][0].conj()], [a[0][1].conj(), a[1][1].conj()]])
    }

    pub fn scale(&self, s: C64) -> Mat2 {
        let a = &self.0;
        Mat2([[a[0][0] * s, a[0][1] * s], [a[1][0] * s, a[1][1] * s]])
    }

    pub fn add(&self, rhs: &Mat2) -> Mat2 {
        let a = &self.0;
        let b = &rhs.0;
        Mat2([
            [a[0][0] + b[0][0], a[0][1] + b[0][1]],
            [a[1][0] + b[1][0], a[1][1] + b[1][1]],
        ])
    }

    pub fn trace(&self) -> C64 {
        self.0[0][0] + self.0[1][1]
    }

    /// Max elementwise deviation of `U†U` from identity.
    pub fn unitarity_residual(&self) -> f64 {
        let p = self.adjoint().mul(self);
        let mut r: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 1.0 } else { 0.0 };
                r = r.max((p.0[i][j] - C64::new(expect, 0.0)).norm());
            }
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn z_rotation_matches_matrix_form() {
        // exp(−iπσz/2) = diag(e^{−iπ/2}, e^{+iπ/2})
        let u = Quat::from_axis_angle([0.0, 0.0, 1.0], PI).to_mat2();
        assert!((u.0[0][0] - C64::new(0.0, -1.0)).norm() < 1e-12);
        assert!((u.0[1][1] - C64::new(0.0, 1.0)).norm() < 1e-12);
        assert!(u.0[0][1].norm() < 1e-15);
    }

    #[test]
    fn field_propagator_precesses_at_field_norm() {
        // Pure-z 1 kHz field, half a ms: half a turn.
        let u = Quat::from_field_khz([0.0, 0.0, 1.0], 5e5);
        assert!((u.rotation_angle() - PI).abs() < 1e-9);
    }

    #[test]
    fn z_frame_rotates_axis_azimuth() {
        let u = Quat::from_axis_angle([1.0, 0.0, 0.0], 0.4).z_frame(FRAC_PI_2);
        let axis = u.rotation_axis().unwrap();
        assert!(axis[0].abs() < 1e-12 && (axis[1] - 1.0).abs() < 1e-12);
    }

    fn arb_quat() -> impl Strategy<Value = Quat> {
        (
            -1.0f64..1.0,
            -1.0f64..1.0,
            -1.0f64..1.0,
            -1.0f64..1.0,
        )
            .prop_filter_map("nonzero", |(w, x, y, z)| {
                let q = Quat { w, x, y, z };
                (q.norm() > 1e-3).then(|| q.normalized())
            })
    }

    proptest! {
        #[test]
        fn product_stays_unitary(a in arb_quat(), b in arb_quat()) {
            let m = a.mul(b).to_mat2();
            prop_assert!(m.unitarity_residual() < 1e-12);
        }

        #[test]
        fn powi_matches_repeated_product(q in arb_quat(), k in 0u32..12) {
            let mut byhand = IDENTITY;
            for _ in 0..k {
                byhand = byhand.mul(q);
            }
            let fast = q.powi(k);
            // q^k and the repeated product agree as rotations (up to SU(2) sign).
            prop_assert!(fast.dot(byhand).abs() > 1.0 - 1e-9);
        }

        #[test]
        fn dot_is_re_trace_half(a in arb_quat(), b in arb_quat()) {
            let m = a.to_mat2().mul(&b.to_mat2().adjoint());
            prop_assert!((0.5 * m.trace().re - a.dot(b)).abs() < 1e-12);
        }

        #[test]
        fn herm2_mat2_round_trip(c0 in -10f64..10.0, cx in -10f64..10.0,
                                 cy in -10f64..10.0, cz in -10f64..10.0) {
            let h = Herm2 { c0, cx, cy, cz };
            let back = Herm2::from_mat2(&h.to_mat2());
            prop_assert!((back.c0 - c0).abs() < 1e-12);
            prop_assert!((back.cx - cx).abs() < 1e-12);
            prop_assert!((back.cy - cy).abs() < 1e-12);
            prop_assert!((back.cz - cz).abs() < 1e-12);
        }
    }
}
