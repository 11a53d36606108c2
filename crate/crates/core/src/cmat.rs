//! Small dense complex matrices for the few places that outgrow 2×2: the 6×6
//! lab-frame Hamiltonian and full-tensor density-matrix simulations (capped at
//! electron ⊗ 6 nuclei). Row-major, no blocking — dimensions stay ≤ 128.

use num_complex::Complex64 as C64;

#[derive(Debug, Clone, PartialEq)]
pub struct CMat {
    pub n: usize,
    pub a: Vec<C64>,
}

impl CMat {
    pub fn zeros(n: usize) -> Self {
        CMat {
            n,
            a: vec![C64::new(0.0, 0.0); n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = CMat::zeros(n);
        for i in 0..n {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_rows(rows: &[&[C64]]) -> Self {
        let n = rows.len();
        let mut m = CMat::zeros(n);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), n, "ragged rows");
            for (j, v) in r.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        m
    }

    pub fn mul(&self, rhs: &CMat) -> CMat {
        assert_eq!(self.n, rhs.n);
        let n = self.n;
        let mut out = CMat::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let aik = self[(i, k)];
                if aik.norm_sqr() == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[(i, j)] += aik * rhs[(k, j)];
                }
            }
        }
        out
    }

    pub fn add_assign_scaled(&mut self, rhs: &CMat, s: C64) {
        assert_eq!(self.n, rhs.n);
        for (x, y) in self.a.iter_mut().zip(rhs.a.iter()) {
            *x += s * *y;
        }
    }

    pub fn adjoint(&self) -> CMat {
        let n = self.n;
        let mut out = CMat::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] = self[(j, i)].conj();
            }
        }
        out
    }

    pub fn kron(&self, rhs: &CMat) -> CMat {
        let (p, q) = (self.n, rhs.n);
        let mut out = CMat::zeros(p * q);
        for i in 0..p {
            for j in 0..p {
                let s = self[(i, j)];
                if s.norm_sqr() == 0.0 {
                    continue;
                }
                for k in 0..q {
                    for l in 0..q {
                        out[(i * q + k, j * q + l)] = s * rhs[(k, l)];
                    }
                }
            }
        }
        out
    }

    pub fn trace(&self) -> C64 {
        (0..self.n).map(|i| self[(i, i)]).sum()
    }

    /// Largest elementwise deviation from Hermiticity.
    pub fn hermiticity_residual(&self) -> f64 {
        let mut r: f64 = 0.0;
        for i in 0..self.n {
            for j in i..self.n {
                r = r.max((self[(i, j)] - self[(j, i)].conj()).norm());
            }
        }
        r
    }

    pub fn max_abs(&self) -> f64 {
        self.a.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for CMat {
    type Output = C64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.a[i * self.n + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for CMat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.a[i * self.n + j]
    }
}
