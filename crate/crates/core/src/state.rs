use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::linalg::{ket_bra, CMatrix, C64};

pub const HERMITIAN_TOL: f64 = 1e-10;
pub const TRACE_TOL: f64 = 1e-9;
pub const POSITIVITY_TOL: f64 = 1e-8;

/// Hermitian, unit-trace, positive semidefinite emitter state.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    rho: CMatrix,
}

impl DensityMatrix {
    pub fn new(rho: CMatrix) -> Result<Self> {
        check_state(&rho)?;
        Ok(Self { rho })
    }

    /// `|level⟩⟨level|` in a `dim`-level basis.
    pub fn pure_level(dim: usize, level: usize) -> Result<Self> {
        if level >= dim {
            return Err(Error::param("level", format!("{level} out of range for dim {dim}")));
        }
        Ok(Self {
            rho: ket_bra(dim, level, level),
        })
    }

    pub fn ground(dim: usize) -> Self {
        Self {
            rho: ket_bra(dim, 0, 0),
        }
    }

    pub(crate) fn from_unchecked(rho: CMatrix) -> Self {
        Self { rho }
    }

    pub fn dim(&self) -> usize {
        self.rho.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.rho
    }

    pub fn into_matrix(self) -> CMatrix {
        self.rho
    }

    pub fn population(&self, level: usize) -> f64 {
        self.rho[(level, level)].re
    }

    pub fn trace(&self) -> C64 {
        self.rho.trace()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.rho)
    }
}

pub(crate) fn hermiticity_error(m: &CMatrix) -> f64 {
    let d = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..d {
        for j in i..d {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Smallest eigenvalue of the Hermitian part of `m`.
pub(crate) fn min_eigenvalue(m: &CMatrix) -> f64 {
    let d = m.nrows();
    let herm = CMatrix::from_fn(d, d, |i, j| 0.5 * (m[(i, j)] + m[(j, i)].conj()));
    match d {
        1 => herm[(0, 0)].re,
        2 => {
            let a = herm[(0, 0)].re;
            let c = herm[(1, 1)].re;
            let b = herm[(0, 1)].norm();
            0.5 * (a + c) - (0.25 * (a - c) * (a - c) + b * b).sqrt()
        }
        3 => {
            let m3 = Matrix3::from_fn(|i, j| herm[(i, j)]);
            m3.symmetric_eigenvalues().min()
        }
        _ => herm.symmetric_eigenvalues().min(),
    }
}

pub(crate) fn check_state(rho: &CMatrix) -> Result<()> {
    if rho.nrows() != rho.ncols() || rho.nrows() == 0 {
        return Err(Error::InvalidState(format!(
            "matrix must be square and nonempty, got {}x{}",
            rho.nrows(),
            rho.ncols()
        )));
    }
    if rho.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::InvalidState("non-finite entry".into()));
    }
    let herm = hermiticity_error(rho);
    if herm > HERMITIAN_TOL {
        return Err(Error::InvalidState(format!("not Hermitian (deviation {herm:e})")));
    }
    let tr = rho.trace();
    if (tr - C64::new(1.0, 0.0)).norm() > TRACE_TOL {
        return Err(Error::InvalidState(format!("trace {tr} differs from 1")));
    }
    let lam = min_eigenvalue(rho);
    if lam < -POSITIVITY_TOL {
        return Err(Error::InvalidState(format!("negative eigenvalue {lam:e}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_states_are_valid() {
        for d in [2, 3] {
            for l in 0..d {
                let s = DensityMatrix::pure_level(d, l).unwrap();
                assert_eq!(s.population(l), 1.0);
                assert!(s.min_eigenvalue().abs() < 1e-15);
            }
        }
        assert!(DensityMatrix::pure_level(2, 2).is_err());
    }

    #[test]
    fn rejects_bad_trace_and_non_hermitian() {
        let mut m = ket_bra(2, 0, 0);
        m[(1, 1)] = C64::new(0.5, 0.0);
        assert!(matches!(DensityMatrix::new(m), Err(Error::InvalidState(_))));

        let mut m = CMatrix::from_diagonal_element(2, 2, C64::new(0.5, 0.0));
        m[(0, 1)] = C64::new(0.1, 0.0);
        assert!(DensityMatrix::new(m.clone()).is_err());
        m[(1, 0)] = C64::new(0.1, 0.0);
        assert!(DensityMatrix::new(m).is_ok());
    }

    #[test]
    fn rejects_negative_eigenvalue() {
        let mut m = CMatrix::from_diagonal_element(2, 2, C64::new(0.5, 0.0));
        m[(0, 1)] = C64::new(0.6, 0.0);
        m[(1, 0)] = C64::new(0.6, 0.0);
        assert!(DensityMatrix::new(m).is_err());
    }

    #[test]
    fn min_eigenvalue_three_level() {
        let m = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            C64::new(0.2, 0.0),
            C64::new(0.5, 0.0),
            C64::new(0.3, 0.0),
        ]));
        assert!((min_eigenvalue(&m) - 0.2).abs() < 1e-14);
    }
}
