//! Small dense complex linear algebra used on the hot paths.
//!
//! Density matrices are vectorized row-major: `vec(ρ)[i * d + j] = ρ[(i, j)]`.
//! A superoperator on a `d`-level system is then a `d² × d²` matrix acting on
//! that vector.

use nalgebra::DMatrix;
use num_complex::Complex64;

pub type C64 = Complex64;
pub type CMatrix = DMatrix<Complex64>;

pub(crate) const ZERO: C64 = C64::new(0.0, 0.0);
pub(crate) const ONE: C64 = C64::new(1.0, 0.0);

pub fn to_vec(m: &CMatrix) -> Vec<C64> {
    let d = m.nrows();
    let mut v = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            v.push(m[(i, j)]);
        }
    }
    v
}

pub fn from_vec(d: usize, v: &[C64]) -> CMatrix {
    debug_assert_eq!(v.len(), d * d);
    CMatrix::from_fn(d, d, |i, j| v[i * d + j])
}

/// Projector-like outer product `|i⟩⟨j|` in a `d`-level basis.
pub fn ket_bra(d: usize, i: usize, j: usize) -> CMatrix {
    let mut m = CMatrix::zeros(d, d);
    m[(i, j)] = ONE;
    m
}

/// Dense row-major square complex matrix acting on vectorized states.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperOp {
    n: usize,
    data: Vec<C64>,
}

impl SuperOp {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![ZERO; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut s = Self::zeros(n);
        for i in 0..n {
            s.data[i * n + i] = ONE;
        }
        s
    }

    /// Builds the matrix whose column `k` is `f(e_k)`.
    pub fn from_columns(n: usize, mut f: impl FnMut(usize) -> Vec<C64>) -> Self {
        let mut s = Self::zeros(n);
        for k in 0..n {
            let col = f(k);
            assert_eq!(col.len(), n);
            for (i, v) in col.into_iter().enumerate() {
                s.data[i * n + k] = v;
            }
        }
        s
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn apply(&self, x: &[C64], out: &mut [C64]) {
        let n = self.n;
        for (i, o) in out.iter_mut().enumerate().take(n) {
            let row = &self.data[i * n..(i + 1) * n];
            let mut acc = ZERO;
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            *o = acc;
        }
    }

    /// In-place `x ← self · x` using `scratch` as workspace.
    #[inline]
    pub fn apply_in_place(&self, x: &mut [C64], scratch: &mut [C64]) {
        self.apply(x, scratch);
        x[..self.n].copy_from_slice(&scratch[..self.n]);
    }

    pub fn matmul(&self, rhs: &SuperOp) -> SuperOp {
        let n = self.n;
        assert_eq!(n, rhs.n);
        let mut out = SuperOp::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == ZERO {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * rhs.data[k * n + j];
                }
            }
        }
        out
    }

    /// `self + s · other`
    pub fn add_scaled(&self, s: C64, other: &SuperOp) -> SuperOp {
        assert_eq!(self.n, other.n);
        SuperOp {
            n: self.n,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + s * b)
                .collect(),
        }
    }

    pub fn scale(&self, s: C64) -> SuperOp {
        SuperOp {
            n: self.n,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    /// Row-vector product `u · self`.
    pub fn left_apply(&self, u: &[C64]) -> Vec<C64> {
        let n = self.n;
        let mut out = vec![ZERO; n];
        for (i, ui) in u.iter().enumerate().take(n) {
            if *ui == ZERO {
                continue;
            }
            for (o, a) in out.iter_mut().zip(&self.data[i * n..(i + 1) * n]) {
                *o += ui * a;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &SuperOp) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// One classic RK4 step for `x' = L(t) x` with `L(t) = l0 + Ω(t) l1`, written
/// as the linear map it induces. `omegas` holds Ω at the start, midpoint and
/// end of the step.
pub fn rk4_step_matrix(l0: &SuperOp, l1: &SuperOp, omegas: [f64; 3], h: f64) -> SuperOp {
    let n = l0.dim();
    let id = SuperOp::identity(n);
    let la = l0.add_scaled(C64::from(omegas[0]), l1);
    let lb = l0.add_scaled(C64::from(omegas[1]), l1);
    let lc = l0.add_scaled(C64::from(omegas[2]), l1);
    let half = C64::from(0.5 * h);
    let k1 = la;
    let k2 = lb.matmul(&id.add_scaled(half, &k1));
    let k3 = lb.matmul(&id.add_scaled(half, &k2));
    let k4 = lc.matmul(&id.add_scaled(C64::from(h), &k3));
    let sum = k1
        .add_scaled(C64::from(2.0), &k2)
        .add_scaled(C64::from(2.0), &k3)
        .add_scaled(ONE, &k4);
    id.add_scaled(C64::from(h / 6.0), &sum)
}

/// Repeated-squaring table for applying `m^k` with `O(log k)` products.
#[derive(Debug, Clone)]
pub struct PowerTable {
    pows: Vec<SuperOp>,
}

impl PowerTable {
    pub fn new(m: SuperOp, max_steps: usize) -> Self {
        let mut pows = vec![m];
        let mut span = 1usize;
        while span.saturating_mul(2) <= max_steps.max(1) {
            let next = pows.last().unwrap().matmul(pows.last().unwrap());
            pows.push(next);
            span *= 2;
        }
        Self { pows }
    }

    pub fn single(&self) -> &SuperOp {
        &self.pows[0]
    }

    pub fn powers(&self) -> &[SuperOp] {
        &self.pows
    }

    /// `x ← m^k x`.
    pub fn apply_power(&self, mut k: usize, x: &mut [C64], scratch: &mut [C64]) {
        let top = self.pows.len() - 1;
        let chunk = 1usize << top;
        while k >= 2 * chunk {
            self.pows[top].apply_in_place(x, scratch);
            k -= chunk;
        }
        for (bit, p) in self.pows.iter().enumerate() {
            if k & (1 << bit) != 0 {
                p.apply_in_place(x, scratch);
            }
        }
    }
}

pub(crate) fn dot(u: &[C64], x: &[C64]) -> C64 {
    u.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// Powers `m^(2^i)` paired with rows `u·(1 + m + … + m^(2^i − 1))`, so that a
/// linear functional `u·x` can be summed along `k` repeated applications of
/// `m` in `O(log k)` products.
#[derive(Debug, Clone)]
pub struct GeometricSums {
    pows: Vec<SuperOp>,
    rows: Vec<Vec<C64>>,
}

impl GeometricSums {
    pub fn new(table: &PowerTable, u: &[C64]) -> Self {
        let pows = table.powers().to_vec();
        let mut rows = vec![u.to_vec()];
        for p in &pows[..pows.len() - 1] {
            let prev = rows.last().unwrap();
            let shifted = p.left_apply(prev);
            rows.push(prev.iter().zip(&shifted).map(|(a, b)| a + b).collect());
        }
        Self { pows, rows }
    }

    /// `x ← m^k x`, returning `Σ_{j<k} u·m^j x` for the incoming `x`.
    pub fn advance(&self, mut k: usize, x: &mut [C64], scratch: &mut [C64]) -> C64 {
        let top = self.pows.len() - 1;
        let chunk = 1usize << top;
        let mut acc = ZERO;
        while k >= 2 * chunk {
            acc += dot(&self.rows[top], x);
            self.pows[top].apply_in_place(x, scratch);
            k -= chunk;
        }
        for (bit, (p, row)) in self.pows.iter().zip(&self.rows).enumerate() {
            if k & (1 << bit) != 0 {
                acc += dot(row, x);
                p.apply_in_place(x, scratch);
            }
        }
        acc
    }
}
