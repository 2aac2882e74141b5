//! Emitter level structures, Hamiltonians and the Lindblad generator.
//!
//! Units: time in ns, angular frequencies in rad/ns, ħ = 1.
//!
//! Basis ordering: a two-level emitter uses `{|g⟩, |e⟩}`, a V-type emitter
//! uses `{|0⟩, |−⟩, |+⟩}`. Rates follow the convention `Γᵢⱼ` = decay from
//! `|j⟩` to `|i⟩` with collapse operator `σᵢⱼ = |i⟩⟨j|`; diagonal entries are
//! pure dephasing of the corresponding level.

use std::f64::consts::FRAC_PI_4;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{from_vec, ket_bra, to_vec, CMatrix, SuperOp, C64, ZERO};
use crate::state::DensityMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmitterKind {
    TwoLevel,
    #[serde(alias = "vtype")]
    VType,
}

impl EmitterKind {
    pub fn dim(self) -> usize {
        match self {
            EmitterKind::TwoLevel => 2,
            EmitterKind::VType => 3,
        }
    }

    fn is_radiative(self, i: usize, j: usize) -> bool {
        match self {
            EmitterKind::TwoLevel => (i, j) == (0, 1),
            EmitterKind::VType => i == 0 && (j == 1 || j == 2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmitterModel {
    kind: EmitterKind,
    /// Δ, drive detuning from the lowest transition (rad/ns).
    detuning: f64,
    /// δ₀, fine-structure splitting (rad/ns). V-type only.
    splitting: f64,
    /// θ, drive polarization angle. V-type only.
    polarization: f64,
    /// φ, analyzer angle of the detection dipole. V-type only.
    detection_angle: f64,
    rates: DMatrix<f64>,
}

impl EmitterModel {
    /// Resonant two-level emitter from lifetime and total coherence time.
    ///
    /// Requires `0 < T₂ ≤ 2T₁`; the excess dephasing is split equally over
    /// `Γ_gg` and `Γ_ee` so that `1/T₂ = 1/(2T₁) + Γ_ee`.
    pub fn two_level(t1: f64, t2: f64) -> Result<Self> {
        if !(t1 > 0.0 && t1.is_finite()) {
            return Err(Error::param("t1", format!("must be positive, got {t1}")));
        }
        if !(t2 > 0.0 && t2 <= 2.0 * t1 * (1.0 + 1e-12)) {
            return Err(Error::param("t2", format!("must lie in (0, 2·T1], got {t2}")));
        }
        let pure = (1.0 / t2 - 0.5 / t1).max(0.0);
        let mut rates = DMatrix::zeros(2, 2);
        rates[(0, 1)] = 1.0 / t1;
        rates[(0, 0)] = pure;
        rates[(1, 1)] = pure;
        Self::from_rates(EmitterKind::TwoLevel, rates)
    }

    /// V-type emitter with equal radiative rates `1/T₁` on both dipoles,
    /// no pure dephasing, θ = φ = π/4.
    pub fn vtype(t1: f64, splitting: f64) -> Result<Self> {
        if !(t1 > 0.0 && t1.is_finite()) {
            return Err(Error::param("t1", format!("must be positive, got {t1}")));
        }
        let mut rates = DMatrix::zeros(3, 3);
        rates[(0, 1)] = 1.0 / t1;
        rates[(0, 2)] = 1.0 / t1;
        let mut m = Self::from_rates(EmitterKind::VType, rates)?;
        m.splitting = splitting;
        m.polarization = FRAC_PI_4;
        m.detection_angle = FRAC_PI_4;
        Ok(m)
    }

    pub fn from_rates(kind: EmitterKind, rates: DMatrix<f64>) -> Result<Self> {
        let d = kind.dim();
        if rates.nrows() != d || rates.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: rates.nrows(),
            });
        }
        for i in 0..d {
            for j in 0..d {
                let g = rates[(i, j)];
                if !(g >= 0.0 && g.is_finite()) {
                    return Err(Error::param("rates", format!("Γ[{i}][{j}] = {g} must be >= 0")));
                }
                if i != j && g != 0.0 && !kind.is_radiative(i, j) {
                    return Err(Error::param(
                        "rates",
                        format!("Γ[{i}][{j}] must be 0: |{j}⟩→|{i}⟩ is not radiative"),
                    ));
                }
            }
        }
        Ok(Self {
            kind,
            detuning: 0.0,
            splitting: 0.0,
            polarization: if kind == EmitterKind::VType { FRAC_PI_4 } else { 0.0 },
            detection_angle: if kind == EmitterKind::VType { FRAC_PI_4 } else { 0.0 },
            rates,
        })
    }

    pub fn with_detuning(mut self, detuning: f64) -> Self {
        self.detuning = detuning;
        self
    }

    pub fn with_splitting(mut self, splitting: f64) -> Self {
        self.splitting = splitting;
        self
    }

    pub fn with_polarization(mut self, theta: f64) -> Self {
        self.polarization = theta;
        self
    }

    pub fn with_detection_angle(mut self, phi: f64) -> Self {
        self.detection_angle = phi;
        self
    }

    pub fn kind(&self) -> EmitterKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    pub fn detuning(&self) -> f64 {
        self.detuning
    }

    pub fn splitting(&self) -> f64 {
        self.splitting
    }

    pub fn polarization(&self) -> f64 {
        self.polarization
    }

    pub fn detection_angle(&self) -> f64 {
        self.detection_angle
    }

    pub fn rates(&self) -> &DMatrix<f64> {
        &self.rates
    }

    /// Radiative lifetime. For a V-type emitter this is the lifetime of `|−⟩`.
    pub fn t1(&self) -> f64 {
        1.0 / self.rates[(0, 1)]
    }

    /// Total coherence time of the lowest optical transition.
    pub fn t2(&self) -> f64 {
        let gamma_coh = 0.5 * self.rates[(0, 1)] + 0.5 * (self.rates[(0, 0)] + self.rates[(1, 1)]);
        1.0 / gamma_coh
    }

    pub fn hamiltonian(&self, omega: f64) -> CMatrix {
        match self.kind {
            EmitterKind::TwoLevel => build_hamiltonian_two_level(self.detuning, omega),
            EmitterKind::VType => {
                build_hamiltonian_vtype(self.detuning, self.splitting, self.polarization, omega)
            }
        }
    }

    /// Detection dipole `D`: `|g⟩⟨e|` for a two-level emitter,
    /// `cosφ|0⟩⟨−| + sinφ|0⟩⟨+|` for a V-type emitter.
    pub fn detection_operator(&self) -> CMatrix {
        match self.kind {
            EmitterKind::TwoLevel => ket_bra(2, 0, 1),
            EmitterKind::VType => {
                let (s, c) = self.detection_angle.sin_cos();
                ket_bra(3, 0, 1) * C64::from(c) + ket_bra(3, 0, 2) * C64::from(s)
            }
        }
    }

    /// Nonzero `(Γᵢⱼ, σᵢⱼ)` pairs entering the dissipator.
    pub fn collapse_channels(&self) -> Vec<(f64, CMatrix)> {
        let d = self.dim();
        let mut out = Vec::new();
        for i in 0..d {
            for j in 0..d {
                let g = self.rates[(i, j)];
                if g > 0.0 {
                    out.push((g, ket_bra(d, i, j)));
                }
            }
        }
        out
    }

    /// Generator split `L(Ω) = L₀ + Ω·L₁` acting on row-major `vec(ρ)`.
    pub fn liouvillian_parts(&self) -> (SuperOp, SuperOp) {
        let d = self.dim();
        let n = d * d;
        let basis = |k: usize| {
            let mut v = vec![ZERO; n];
            v[k] = C64::from(1.0);
            from_vec(d, &v)
        };
        let l0 = SuperOp::from_columns(n, |k| to_vec(&rhs_matrix(self, 0.0, &basis(k))));
        let l_one = SuperOp::from_columns(n, |k| to_vec(&rhs_matrix(self, 1.0, &basis(k))));
        let l1 = l_one.add_scaled(C64::from(-1.0), &l0);
        (l0, l1)
    }
}

/// `(Δ/2)(|e⟩⟨e| − |g⟩⟨g|) + (Ω/2)(|g⟩⟨e| + |e⟩⟨g|)`
pub fn build_hamiltonian_two_level(detuning: f64, omega: f64) -> CMatrix {
    let mut h = CMatrix::zeros(2, 2);
    h[(0, 0)] = C64::from(-0.5 * detuning);
    h[(1, 1)] = C64::from(0.5 * detuning);
    h[(0, 1)] = C64::from(0.5 * omega);
    h[(1, 0)] = C64::from(0.5 * omega);
    h
}

/// Rotating-wave V-type Hamiltonian in the basis `{|0⟩, |−⟩, |+⟩}`.
pub fn build_hamiltonian_vtype(detuning: f64, splitting: f64, theta: f64, omega: f64) -> CMatrix {
    let mut h = CMatrix::zeros(3, 3);
    h[(0, 0)] = C64::from(-0.5 * detuning);
    h[(1, 1)] = C64::from(0.5 * detuning);
    h[(2, 2)] = C64::from(0.5 * detuning + splitting);
    let (s, c) = theta.sin_cos();
    let a = C64::from(0.5 * omega * c);
    let b = C64::from(0.5 * omega * s);
    h[(0, 1)] = a;
    h[(1, 0)] = a;
    h[(0, 2)] = b;
    h[(2, 0)] = b;
    h
}

/// `L(C)ρ = CρC† − ½(C†Cρ + ρC†C)`.
pub fn lindblad_dissipator(c: &CMatrix, rho: &DensityMatrix) -> Result<CMatrix> {
    if !c.is_square() || c.nrows() != rho.dim() {
        return Err(Error::DimensionMismatch {
            expected: rho.dim(),
            got: c.nrows(),
        });
    }
    Ok(dissipator_raw(c, rho.matrix()))
}

pub(crate) fn dissipator_raw(c: &CMatrix, rho: &CMatrix) -> CMatrix {
    let cd = c.adjoint();
    let cdc = &cd * c;
    c * rho * &cd - (&cdc * rho + rho * &cdc) * C64::from(0.5)
}

/// Master-equation right-hand side `−i[ρ, H(Ω)] + Σᵢⱼ Γᵢⱼ L(σᵢⱼ)ρ`.
///
/// The drive enters only through `omega`, so `_t` is accepted for call-site
/// symmetry with time-dependent integrators.
pub fn master_rhs(model: &EmitterModel, omega: f64, rho: &DensityMatrix, _t: f64) -> CMatrix {
    rhs_matrix(model, omega, rho.matrix())
}

pub(crate) fn rhs_matrix(model: &EmitterModel, omega: f64, rho: &CMatrix) -> CMatrix {
    let h = model.hamiltonian(omega);
    let comm = rho * &h - &h * rho;
    let mut out = comm * C64::new(0.0, -1.0);
    for (g, c) in model.collapse_channels() {
        out += dissipator_raw(&c, rho) * C64::from(g);
    }
    out
}
