//! Two-time intensity correlations from the quantum regression theorem,
//! pulsed peak tables, IRF convolution and measured-histogram analysis.
//!
//! For a pulse train the correlation is accumulated over emission times t₁
//! spread across one drive cycle of the steady pulsed regime:
//!
//! `G(τ) = Σⱼ wⱼ Tr[D†D Φ(t₁ⱼ + τ, t₁ⱼ)(D ρ(t₁ⱼ) D†)]`
//!
//! which is symmetric in τ, so only τ ≥ 0 is propagated. Peak areas are
//! integrated exactly along the propagation (trapezoid at the step `h`),
//! independent of the τ output grid.

use std::io::{BufRead, Write};

use rayon::prelude::*;

use crate::drive::DriveEnvelope;
use crate::emitter::EmitterModel;
use crate::error::{Error, Result};
use crate::integrator::{calibrated, check_resolution, default_step, StepPlan};
use crate::linalg::{dot, from_vec, rk4_step_matrix, to_vec, CMatrix, GeometricSums, PowerTable, C64, ONE, ZERO};
use crate::state::DensityMatrix;

pub const DEFAULT_N_SIDE: usize = 6;
pub const DEFAULT_WARMUP_PERIODS: usize = 5;
/// Inter-peak minimum above this fraction of the peak maximum flags overlap.
pub const QUASI_CW_THRESHOLD: f64 = 0.2;
const SLICE_CHUNK: usize = 32;
const SLICE_CUTOFF: f64 = 1e-14;

/// One entry of a pulsed peak table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub n: i64,
    pub tau: f64,
    pub area: f64,
    /// Area normalized by the mean side-peak area.
    pub g2: f64,
    /// 1σ of `g2`; zero for noiseless simulations.
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeakTable {
    pub peaks: Vec<Peak>,
    pub n_side: usize,
    /// Adjacent peaks overlap enough that their areas are not separable.
    pub quasi_cw: bool,
}

impl PeakTable {
    pub fn get(&self, n: i64) -> Option<&Peak> {
        self.peaks.iter().find(|p| p.n == n)
    }

    /// Normalized zero-delay peak G²(0).
    pub fn g2_zero(&self) -> f64 {
        self.get(0).map_or(f64::NAN, |p| p.g2)
    }

    /// CSV with columns `n,tau_ns,G2,sigma`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "n,tau_ns,G2,sigma")?;
        for p in &self.peaks {
            writeln!(out, "{},{},{},{}", p.n, p.tau, p.g2, p.sigma)?;
        }
        Ok(())
    }

    fn from_areas(n_side: usize, period: f64, areas: &[f64], vars: Option<&[f64]>, quasi_cw: bool) -> Result<Self> {
        // areas indexed by n + n_side
        let side: Vec<usize> = (0..areas.len()).filter(|&i| i != n_side).collect();
        let mean = side.iter().map(|&i| areas[i]).sum::<f64>() / side.len() as f64;
        if !(mean > 0.0 && mean.is_finite()) {
            return Err(Error::NotNormalizable(format!("mean side-peak area is {mean}")));
        }
        let m = side.len() as f64;
        let peaks = areas
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let n = i as i64 - n_side as i64;
                let sigma = vars.map_or(0.0, |v| {
                    // first-order propagation through a / mean(side areas)
                    let var: f64 = (0..areas.len())
                        .map(|k| {
                            let own = if k == i { 1.0 / mean } else { 0.0 };
                            let via_mean = if k != n_side { a / (mean * mean * m) } else { 0.0 };
                            (own - via_mean).powi(2) * v[k]
                        })
                        .sum();
                    var.sqrt()
                });
                Peak {
                    n,
                    tau: n as f64 * period,
                    area: a,
                    g2: a / mean,
                    sigma,
                }
            })
            .collect();
        Ok(Self {
            peaks,
            n_side,
            quasi_cw,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationRecord {
    pub tau: Vec<f64>,
    pub raw: Vec<f64>,
    pub g2: Vec<f64>,
    /// Exact peak table for pulsed records.
    pub peaks: Option<PeakTable>,
    pub period: Option<f64>,
    /// Raw correlation at the side-peak centres `nT`, n = 1…n_side.
    pub side_heights: Vec<f64>,
    pub irf_fwhm: Option<f64>,
}

impl CorrelationRecord {
    /// Wraps an externally produced normalized curve.
    pub fn from_curve(tau: Vec<f64>, g2: Vec<f64>, period: Option<f64>) -> Result<Self> {
        if tau.is_empty() || tau.len() != g2.len() {
            return Err(Error::Grid(format!("{} delays for {} values", tau.len(), g2.len())));
        }
        check_sorted(&tau, "tau")?;
        Ok(Self {
            raw: g2.clone(),
            tau,
            g2,
            peaks: None,
            period,
            side_heights: Vec::new(),
            irf_fwhm: None,
        })
    }

    /// g² linearly interpolated at `t`, NaN outside the grid.
    pub fn g2_at(&self, t: f64) -> f64 {
        interpolate(&self.tau, &self.g2, t)
    }

    /// CSV with columns `tau_ns,g2`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "tau_ns,g2")?;
        for (t, g) in self.tau.iter().zip(&self.g2) {
            writeln!(out, "{t},{g}")?;
        }
        Ok(())
    }
}

fn check_sorted(v: &[f64], name: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) || v.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Grid(format!("{name} grid must be finite and strictly increasing")));
    }
    Ok(())
}

fn interpolate(x: &[f64], y: &[f64], t: f64) -> f64 {
    if x.is_empty() || t < x[0] || t > x[x.len() - 1] {
        return f64::NAN;
    }
    let i = x.partition_point(|&v| v <= t);
    if i == 0 {
        return y[0];
    }
    if i == x.len() {
        return y[x.len() - 1];
    }
    let (x0, x1) = (x[i - 1], x[i]);
    y[i - 1] + (y[i] - y[i - 1]) * (t - x0) / (x1 - x0)
}

/// g² at exactly zero delay, interpolated if 0 is not a grid point.
pub fn continuous_g2_center(record: &CorrelationRecord) -> f64 {
    record.g2_at(0.0)
}

/// Step count for `t` on the grid of spacing `h`, if it lies on it.
fn on_grid(t: f64, h: f64) -> Option<usize> {
    let r = t / h;
    let k = r.round();
    ((r - k).abs() < 1e-6 && k >= 0.0).then_some(k as usize)
}

/// Grid spacing choices for a pulsed correlation run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulsedGrid {
    /// Integration step; divides `dtau`.
    pub h: f64,
    /// τ output spacing; divides `T/2`.
    pub dtau: f64,
}

/// Largest τ spacing not above `min(w/10, T₁/50, 15 ps)` dividing `T/2`, and
/// the largest step not above the integrator default dividing that spacing.
pub fn pulsed_grid(model: &EmitterModel, env: &DriveEnvelope) -> Result<PulsedGrid> {
    let period = env
        .period()
        .ok_or_else(|| Error::Unsupported("pulsed correlation needs a periodic envelope".into()))?;
    let dtau_max = (env.width() / 10.0).min(model.t1() / 50.0).min(0.015);
    let half = 0.5 * period;
    let dtau = half / (half / dtau_max - 1e-9).ceil();
    let h_max = default_step(model, env);
    let h = dtau / (dtau / h_max - 1e-9).ceil();
    Ok(PulsedGrid { h, dtau })
}

/// Symmetric uniform grid `{−N…N}·dtau` with `N·dtau ≤ tau_max`.
pub fn symmetric_tau_grid(dtau: f64, tau_max: f64) -> Vec<f64> {
    let n = (tau_max / dtau + 1e-9).floor() as i64;
    (-n..=n).map(|k| k as f64 * dtau).collect()
}

/// Emission-time grid over one drive cycle: every 4 steps while a pulse is
/// on, about T₁/50 otherwise.
pub fn default_t1_grid(model: &EmitterModel, env: &DriveEnvelope, h: f64) -> Result<Vec<f64>> {
    let period = env
        .period()
        .ok_or_else(|| Error::Unsupported("pulsed correlation needs a periodic envelope".into()))?;
    let p = on_grid(period, h).ok_or_else(|| Error::Grid(format!("h = {h} does not divide T = {period}")))?;
    let cycle = p * env.pattern().len();
    let mut ranges = Vec::new();
    for (n, &fires) in env.pattern().iter().enumerate() {
        if fires {
            let (a, b) = env.pulse_window(n as u64);
            let lo = ((a / h).floor() as i64 - 1).max(0) as usize;
            let hi = (((b / h).ceil() as usize) + 1).min(cycle);
            ranges.push((lo, hi));
        }
    }
    let coarse = ((model.t1() / 50.0 / h).round() as usize).max(1);
    let mut grid = Vec::new();
    let mut s = 0usize;
    while s < cycle {
        grid.push(s as f64 * h);
        let inside = ranges.iter().any(|&(lo, hi)| s >= lo && s < hi);
        s = if inside {
            s + 4
        } else {
            let next_pulse = ranges.iter().map(|r| r.0).filter(|&lo| lo > s).min().unwrap_or(cycle);
            (s + coarse).min(next_pulse)
        };
    }
    Ok(grid)
}

#[derive(Debug, Clone)]
pub struct CorrelationOptions {
    /// Integration step; defaults to [`pulsed_grid`].
    pub h: Option<f64>,
    pub warmup_periods: usize,
    pub n_side: usize,
    /// Initial state before warmup; ground state if absent.
    pub rho0: Option<DensityMatrix>,
}

impl Default for CorrelationOptions {
    fn default() -> Self {
        Self {
            h: None,
            warmup_periods: DEFAULT_WARMUP_PERIODS,
            n_side: DEFAULT_N_SIDE,
            rho0: None,
        }
    }
}

#[derive(Clone, Copy)]
enum Probe {
    Output(usize),
    Edge(usize),
    Center(usize),
}

struct SliceSums {
    outputs: Vec<f64>,
    edges: Vec<f64>,
    mids: Vec<f64>,
    centers: Vec<f64>,
}

impl SliceSums {
    fn zeros(n_out: usize, n_side: usize) -> Self {
        Self {
            outputs: vec![0.0; n_out],
            edges: vec![0.0; n_side + 1],
            mids: vec![0.0; n_side + 1],
            centers: vec![0.0; n_side],
        }
    }

    fn add(&mut self, other: &SliceSums) {
        for (a, b) in [
            (&mut self.outputs, &other.outputs),
            (&mut self.edges, &other.edges),
            (&mut self.mids, &other.mids),
            (&mut self.centers, &other.centers),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

struct Walker<'a> {
    plan: &'a StepPlan,
    sums: &'a GeometricSums,
    u: &'a [C64],
    h: f64,
    probes: &'a [(usize, Probe)],
}

impl Walker<'_> {
    /// Propagates the collapsed state `x` from absolute step `start`, adding
    /// `weight ×` each probe value into `acc`.
    fn run(&self, start: usize, x: &mut [C64], weight: f64, acc: &mut SliceSums) {
        let mut scratch = vec![ZERO; x.len()];
        let mut k = 0usize;
        let mut f = dot(self.u, x).re;
        let mut integral = 0.0;
        for &(target, probe) in self.probes {
            while k < target {
                let abs = start + k;
                let run = self.plan.quiet_run(abs);
                if run > 0 {
                    let m = run.min(target - k);
                    let s = self.sums.advance(m, x, &mut scratch).re;
                    let f_end = dot(self.u, x).re;
                    integral += self.h * (s - 0.5 * f + 0.5 * f_end);
                    f = f_end;
                    k += m;
                } else {
                    self.plan.step(abs, x, &mut scratch);
                    let f_end = dot(self.u, x).re;
                    integral += 0.5 * self.h * (f + f_end);
                    f = f_end;
                    k += 1;
                }
            }
            match probe {
                Probe::Output(i) => acc.outputs[i] += weight * f,
                Probe::Edge(n) => {
                    acc.edges[n] += weight * integral;
                    acc.mids[n] += weight * f;
                }
                Probe::Center(n) => acc.centers[n] += weight * f,
            }
        }
    }
}

/// Row vector `u` with `u·vec(ρ) = Tr[A ρ]`.
fn trace_row(a: &CMatrix) -> Vec<C64> {
    let d = a.nrows();
    let mut u = vec![ZERO; d * d];
    for i in 0..d {
        for j in 0..d {
            u[i * d + j] = a[(j, i)];
        }
    }
    u
}

/// Pulse-train intensity correlation by the quantum regression theorem.
///
/// `t1_grid` holds emission times within one drive cycle (relative to its
/// start, on the step grid); they are weighted with the periodic trapezoid
/// rule. `tau_grid` holds the delays to report, also on the step grid; the
/// result is symmetric so negative delays are mirrored.
pub fn two_time_correlation(
    model: &EmitterModel,
    env: &DriveEnvelope,
    t1_grid: &[f64],
    tau_grid: &[f64],
    opts: &CorrelationOptions,
) -> Result<CorrelationRecord> {
    if t1_grid.is_empty() {
        return Err(Error::Grid("empty t1 grid".into()));
    }
    if tau_grid.is_empty() {
        return Err(Error::Grid("empty tau grid".into()));
    }
    check_sorted(t1_grid, "t1")?;
    check_sorted(tau_grid, "tau")?;
    if opts.n_side == 0 {
        return Err(Error::param("n_side", "must be at least 1"));
    }
    let env = calibrated(env)?;
    let period = env
        .period()
        .ok_or_else(|| Error::Unsupported("pulsed correlation needs a periodic envelope".into()))?;
    let h = match opts.h {
        Some(h) => h,
        None => pulsed_grid(model, &env)?.h,
    };
    check_resolution(&env, h)?;
    let p = on_grid(period, h).ok_or_else(|| Error::Grid(format!("h = {h} does not divide T = {period}")))?;
    if p % 2 != 0 {
        return Err(Error::Grid(format!("T/h = {p} must be even so T/2 lies on the step grid")));
    }
    let cycle = p * env.pattern().len();

    let slice_steps: Vec<usize> = t1_grid
        .iter()
        .map(|&t| match on_grid(t, h) {
            Some(s) if s < cycle => Ok(s),
            _ => Err(Error::Grid(format!(
                "t1 = {t} is not on the step grid (h = {h}) within one cycle"
            ))),
        })
        .collect::<Result<_>>()?;
    let tau_steps: Vec<usize> = tau_grid
        .iter()
        .map(|&t| on_grid(t.abs(), h).ok_or_else(|| Error::Grid(format!("tau = {t} is not a multiple of h = {h}"))))
        .collect::<Result<_>>()?;
    let mut unique = tau_steps.clone();
    unique.sort_unstable();
    unique.dedup();

    let n_side = opts.n_side;
    let mut probes: Vec<(usize, Probe)> = unique.iter().enumerate().map(|(i, &k)| (k, Probe::Output(i))).collect();
    for n in 0..=n_side {
        probes.push(((2 * n + 1) * p / 2, Probe::Edge(n)));
    }
    for n in 1..=n_side {
        probes.push((n * p, Probe::Center(n - 1)));
    }
    probes.sort_by_key(|e| e.0);
    let reach = probes.last().map_or(0, |e| e.0);

    let warm = opts.warmup_periods * cycle;
    let plan = StepPlan::new(model, &env, h, warm + cycle + reach + 1);
    let d = model.dim();
    let det = model.detection_operator();
    let u = trace_row(&(det.adjoint() * &det));
    let sums = GeometricSums::new(plan.quiet_table(), &u);

    // steady-cycle states at each emission time
    let rho0 = match &opts.rho0 {
        Some(r) if r.dim() != d => {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: r.dim(),
            })
        }
        Some(r) => r.clone(),
        None => DensityMatrix::ground(d),
    };
    let mut x = to_vec(rho0.matrix());
    let mut scratch = vec![ZERO; d * d];
    plan.advance(&mut x, 0, warm, &mut scratch);
    let mut at = warm;
    let n_slices = slice_steps.len();
    let mut slices = Vec::with_capacity(n_slices);
    for (j, &s) in slice_steps.iter().enumerate() {
        plan.advance(&mut x, at, warm + s, &mut scratch);
        at = warm + s;
        let next = if j + 1 < n_slices { slice_steps[j + 1] } else { slice_steps[0] + cycle };
        let prev = if j > 0 { slice_steps[j - 1] as i64 } else { slice_steps[n_slices - 1] as i64 - cycle as i64 };
        let mut w = 0.5 * h * (next as i64 - prev) as f64;
        if n_slices == 1 {
            w = h * cycle as f64;
        }
        let rho = from_vec(d, &x);
        let collapsed = &det * rho * det.adjoint();
        let mass = collapsed.trace().re;
        slices.push((warm + s, w, mass, to_vec(&collapsed)));
    }
    let max_mass = slices.iter().map(|s| s.1 * s.2).fold(0.0, f64::max);
    slices.retain(|s| s.1 * s.2 > SLICE_CUTOFF * max_mass);

    let walker = Walker {
        plan: &plan,
        sums: &sums,
        u: &u,
        h,
        probes: &probes,
    };
    let partials: Vec<SliceSums> = slices
        .par_chunks(SLICE_CHUNK)
        .map(|chunk| {
            let mut acc = SliceSums::zeros(unique.len(), n_side);
            for (start, w, _, xc) in chunk {
                let mut x = xc.clone();
                walker.run(*start, &mut x, *w, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = SliceSums::zeros(unique.len(), n_side);
    for part in &partials {
        total.add(part);
    }

    let height = total.centers.iter().sum::<f64>() / n_side as f64;
    if !(height > 0.0 && height.is_finite()) {
        return Err(Error::NotNormalizable(format!("side-peak height {height}")));
    }
    let raw: Vec<f64> = tau_steps
        .iter()
        .map(|k| total.outputs[unique.binary_search(k).unwrap()])
        .collect();
    let g2 = raw.iter().map(|r| r / height).collect();

    let mut half_areas = vec![2.0 * total.edges[0]];
    for n in 1..=n_side {
        half_areas.push(total.edges[n] - total.edges[n - 1]);
    }
    let areas: Vec<f64> = (0..=2 * n_side)
        .map(|i| half_areas[(i as i64 - n_side as i64).unsigned_abs() as usize])
        .collect();
    let gaps: Vec<f64> = if n_side > 1 { total.mids[1..n_side].to_vec() } else { vec![total.mids[0]] };
    let peak_max = total.centers.iter().copied().fold(0.0, f64::max);
    let quasi_cw = gaps.iter().sum::<f64>() / gaps.len() as f64 > QUASI_CW_THRESHOLD * peak_max;
    let peaks = PeakTable::from_areas(n_side, period, &areas, None, quasi_cw)?;

    Ok(CorrelationRecord {
        tau: tau_grid.to_vec(),
        raw,
        g2,
        peaks: Some(peaks),
        period: Some(period),
        side_heights: total.centers,
        irf_fwhm: None,
    })
}

/// Correlation with the default emission-time grid and a symmetric uniform
/// τ grid out to `tau_max` (only τ = 0 if `tau_max` is zero).
pub fn pulsed_correlation(
    model: &EmitterModel,
    env: &DriveEnvelope,
    tau_max: f64,
    opts: &CorrelationOptions,
) -> Result<CorrelationRecord> {
    let env = calibrated(env)?;
    let grid = pulsed_grid(model, &env)?;
    let h = opts.h.unwrap_or(grid.h);
    let dtau = if opts.h.is_some() { h * (grid.dtau / h).floor().max(1.0) } else { grid.dtau };
    let t1 = default_t1_grid(model, &env, h)?;
    let tau = symmetric_tau_grid(dtau, tau_max);
    let opts = CorrelationOptions { h: Some(h), ..opts.clone() };
    two_time_correlation(model, &env, &t1, &tau, &opts)
}

/// Steady state of the constantly driven emitter.
pub fn steady_state(model: &EmitterModel, omega: f64) -> Result<DensityMatrix> {
    let d = model.dim();
    let (l0, l1) = model.liouvillian_parts();
    let n = d * d;
    let mut a = CMatrix::from_fn(n, n, |i, j| l0.get(i, j) + C64::from(omega) * l1.get(i, j));
    let mut b = nalgebra::DVector::from_element(n, ZERO);
    // replace the first equation by the trace condition
    for j in 0..n {
        a[(0, j)] = ZERO;
    }
    for i in 0..d {
        a[(0, i * d + i)] = ONE;
    }
    b[0] = ONE;
    let sol = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Convergence("singular Liouvillian: no unique steady state".into()))?;
    let rho = from_vec(d, sol.as_slice());
    let rho = (&rho + rho.adjoint()) * C64::from(0.5);
    DensityMatrix::new(rho)
}

/// Stationary correlation under constant drive Ω, normalized by the squared
/// steady-state intensity. Delays must be multiples of `h`.
pub fn cw_correlation(model: &EmitterModel, omega: f64, tau_grid: &[f64], h: f64) -> Result<CorrelationRecord> {
    if tau_grid.is_empty() {
        return Err(Error::Grid("empty tau grid".into()));
    }
    check_sorted(tau_grid, "tau")?;
    let ss = steady_state(model, omega)?;
    let d = model.dim();
    let det = model.detection_operator();
    let u = trace_row(&(det.adjoint() * &det));
    let x0 = to_vec(ss.matrix());
    let intensity = dot(&u, &x0).re;
    if !(intensity > 0.0) {
        return Err(Error::NotNormalizable("steady-state intensity is zero".into()));
    }
    let steps: Vec<usize> = tau_grid
        .iter()
        .map(|&t| on_grid(t.abs(), h).ok_or_else(|| Error::Grid(format!("tau = {t} is not a multiple of h = {h}"))))
        .collect::<Result<_>>()?;
    let mut unique = steps.clone();
    unique.sort_unstable();
    unique.dedup();
    let (l0, l1) = model.liouvillian_parts();
    let step = rk4_step_matrix(&l0, &l1, [omega; 3], h);
    let table = PowerTable::new(step, unique.last().copied().unwrap_or(1).max(1));
    let mut x = to_vec(&(&det * ss.matrix() * det.adjoint()));
    let mut scratch = vec![ZERO; d * d];
    let mut values = Vec::with_capacity(unique.len());
    let mut k = 0;
    for &target in &unique {
        table.apply_power(target - k, &mut x, &mut scratch);
        k = target;
        values.push(dot(&u, &x).re);
    }
    let raw: Vec<f64> = steps.iter().map(|k| values[unique.binary_search(k).unwrap()]).collect();
    let norm = intensity * intensity;
    Ok(CorrelationRecord {
        tau: tau_grid.to_vec(),
        g2: raw.iter().map(|r| r / norm).collect(),
        raw,
        peaks: None,
        period: None,
        side_heights: Vec::new(),
        irf_fwhm: None,
    })
}

/// Closed-form resonance-fluorescence g²(τ) of a two-level emitter without
/// pure dephasing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CwG2 {
    pub omega: f64,
    pub t1: f64,
}

pub fn cw_g2_analytic(omega: f64, t1: f64) -> CwG2 {
    CwG2 { omega, t1 }
}

impl CwG2 {
    pub fn eval(&self, tau: f64) -> f64 {
        let tau = tau.abs();
        let a = 3.0 / (4.0 * self.t1);
        let mu2 = self.omega * self.omega - 1.0 / (16.0 * self.t1 * self.t1);
        let osc = if mu2 > 0.0 {
            let mu = mu2.sqrt();
            (mu * tau).cos() + a / mu * (mu * tau).sin()
        } else if mu2 < 0.0 {
            let k = (-mu2).sqrt();
            (k * tau).cosh() + a / k * (k * tau).sinh()
        } else {
            1.0 + a * tau
        };
        1.0 - (-a * tau).exp() * osc
    }
}

fn uniform_spacing(tau: &[f64]) -> Result<f64> {
    if tau.len() < 2 {
        return Err(Error::Grid("need at least two delays".into()));
    }
    let dt = (tau[tau.len() - 1] - tau[0]) / (tau.len() - 1) as f64;
    if tau.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() > 1e-6 * dt) {
        return Err(Error::Grid("tau grid must be uniform".into()));
    }
    Ok(dt)
}

/// Gaussian instrument-response convolution along τ.
///
/// The discrete kernel is normalized to unit sum and the record is reflected
/// at both ends, so the total area is kept and isolated peaks keep theirs.
/// Pulsed records are renormalized with the convolved heights of those
/// side-peak centres that lie on the grid.
pub fn convolve_irf(record: &CorrelationRecord, fwhm: f64) -> Result<CorrelationRecord> {
    if !(fwhm > 0.0 && fwhm.is_finite()) {
        return Err(Error::param("fwhm", format!("must be positive, got {fwhm}")));
    }
    let dt = uniform_spacing(&record.tau)?;
    if dt > fwhm / 10.0 * (1.0 + 1e-9) {
        return Err(Error::Grid(format!("tau spacing {dt} exceeds fwhm/10 = {}", fwhm / 10.0)));
    }
    let sigma = fwhm / (2.0 * (2.0 * 2f64.ln()).sqrt());
    let half = (6.0 * sigma / dt).ceil() as usize;
    let n = record.tau.len();
    if half >= n {
        return Err(Error::Grid("tau grid shorter than the IRF kernel".into()));
    }
    let mut kernel: Vec<f64> = (0..=2 * half)
        .map(|i| {
            let s = (i as f64 - half as f64) * dt / sigma;
            (-0.5 * s * s).exp()
        })
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let last = (n - 1) as i64;
    let reflect = |i: i64| -> usize {
        let j = if i < 0 { -i } else if i > last { 2 * last - i } else { i };
        j as usize
    };
    let raw: Vec<f64> = (0..n as i64)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * record.raw[reflect(i + k as i64 - half as i64)])
                .sum()
        })
        .collect();
    let mut out = record.clone();
    out.irf_fwhm = Some(fwhm);
    match record.period {
        Some(period) if !record.side_heights.is_empty() => {
            let heights: Vec<f64> = (1..=record.side_heights.len())
                .filter_map(|k| {
                    let t = k as f64 * period;
                    record.tau.iter().position(|x| (x - t).abs() < 1e-6 * dt).map(|i| raw[i])
                })
                .collect();
            if heights.is_empty() {
                return Err(Error::NotNormalizable(
                    "no side-peak centre lies on the tau grid; extend it past one period".into(),
                ));
            }
            let height = heights.iter().sum::<f64>() / heights.len() as f64;
            out.g2 = raw.iter().map(|r| r / height).collect();
            out.side_heights = heights;
        }
        _ => {
            let scale = record
                .raw
                .iter()
                .zip(&record.g2)
                .find(|(r, _)| **r != 0.0)
                .map_or(1.0, |(r, g)| g / r);
            out.g2 = raw.iter().map(|r| r * scale).collect();
        }
    }
    out.raw = raw;
    Ok(out)
}

/// Exact integral of the piecewise-linear interpolant of `(x, y)` over `[a, b]`.
fn integrate_linear(x: &[f64], y: &[f64], a: f64, b: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..x.len().saturating_sub(1) {
        let (x0, x1) = (x[i], x[i + 1]);
        let lo = x0.max(a);
        let hi = x1.min(b);
        if hi <= lo {
            continue;
        }
        let slope = (y[i + 1] - y[i]) / (x1 - x0);
        let ylo = y[i] + slope * (lo - x0);
        let yhi = y[i] + slope * (hi - x0);
        total += 0.5 * (ylo + yhi) * (hi - lo);
    }
    total
}

fn overlap_flag(x: &[f64], y: &[f64], period: f64, n_side: usize) -> bool {
    let peak_max = y.iter().copied().fold(0.0, f64::max);
    let mut minima = Vec::new();
    for n in 1..n_side as i64 {
        for sign in [-1.0, 1.0] {
            let (a, b) = (n as f64 * period, (n + 1) as f64 * period);
            let (a, b) = if sign < 0.0 { (-b, -a) } else { (a, b) };
            let m = x
                .iter()
                .zip(y)
                .filter(|(t, _)| **t > a && **t < b)
                .map(|(_, v)| *v)
                .fold(f64::INFINITY, f64::min);
            if m.is_finite() {
                minima.push(m);
            }
        }
    }
    !minima.is_empty() && minima.iter().sum::<f64>() / minima.len() as f64 > QUASI_CW_THRESHOLD * peak_max
}

/// Peak table from a correlation curve: each peak integrated over `nT ± T/2`
/// and divided by the mean of the `n_side` peaks on either side.
pub fn normalize_pulsed(record: &CorrelationRecord, period: f64, n_side: usize) -> Result<PeakTable> {
    if !(period > 0.0) || n_side == 0 {
        return Err(Error::param("period", "period and n_side must be positive"));
    }
    let reach = (n_side as f64 + 0.5) * period;
    let (lo, hi) = (record.tau[0], record.tau[record.tau.len() - 1]);
    let tol = 1e-9 * reach;
    if lo > -reach + tol || hi < reach - tol {
        return Err(Error::NotNormalizable(format!(
            "record covers [{lo}, {hi}] ns but {n_side} side peaks need ±{reach} ns"
        )));
    }
    let areas: Vec<f64> = (-(n_side as i64)..=n_side as i64)
        .map(|n| {
            let c = n as f64 * period;
            integrate_linear(&record.tau, &record.raw, c - 0.5 * period, c + 0.5 * period)
        })
        .collect();
    let quasi = overlap_flag(&record.tau, &record.raw, period, n_side);
    PeakTable::from_areas(n_side, period, &areas, None, quasi)
}

/// Coincidence histogram from a correlation measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramData {
    pub centers: Vec<f64>,
    pub counts: Vec<u64>,
    pub bin_width: f64,
    /// Acquisition time in s, if known.
    pub acquisition_time: Option<f64>,
}

impl HistogramData {
    pub fn new(centers: Vec<f64>, counts: Vec<u64>, acquisition_time: Option<f64>) -> Result<Self> {
        if centers.len() != counts.len() {
            return Err(Error::Grid(format!("{} bin centres for {} counts", centers.len(), counts.len())));
        }
        check_sorted(&centers, "bin centre")?;
        let bin_width = uniform_spacing(&centers)?;
        Ok(Self {
            centers,
            counts,
            bin_width,
            acquisition_time,
        })
    }

    /// Reads `bin_center_ns,counts` rows. A header row, blank lines and lines
    /// starting with `#` are skipped.
    pub fn from_csv<R: BufRead>(reader: R) -> Result<Self> {
        let mut centers = Vec::new();
        let mut counts = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let line_no = i + 1;
            let text = line.trim();
            if text.is_empty() || text.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = text.split(',').map(str::trim).collect();
            if fields.len() != 2 {
                return Err(Error::Parse {
                    line: line_no,
                    reason: format!("expected 2 columns, found {}", fields.len()),
                });
            }
            let Ok(center) = fields[0].parse::<f64>() else {
                if centers.is_empty() && counts.is_empty() {
                    continue; // header
                }
                return Err(Error::Parse {
                    line: line_no,
                    reason: format!("bad bin centre {:?}", fields[0]),
                });
            };
            let count = fields[1].parse::<u64>().map_err(|_| Error::Parse {
                line: line_no,
                reason: format!("counts must be a nonnegative integer, got {:?}", fields[1]),
            })?;
            centers.push(center);
            counts.push(count);
        }
        Self::new(centers, counts, None)
    }
}

/// Peak table from a coincidence histogram with Poisson uncertainties.
/// Bins are assigned to the peak whose window `[nT − T/2, nT + T/2)` holds
/// their centre.
pub fn normalize_histogram(hist: &HistogramData, period: f64, n_side: usize) -> Result<PeakTable> {
    if !(period > 0.0) || n_side == 0 {
        return Err(Error::param("period", "period and n_side must be positive"));
    }
    let reach = (n_side as f64 + 0.5) * period;
    let lo = hist.centers[0] - 0.5 * hist.bin_width;
    let hi = hist.centers[hist.centers.len() - 1] + 0.5 * hist.bin_width;
    if lo > -reach + hist.bin_width || hi < reach - hist.bin_width {
        return Err(Error::NotNormalizable(format!(
            "histogram covers [{lo}, {hi}] ns but {n_side} side peaks need ±{reach} ns"
        )));
    }
    let mut areas = vec![0.0; 2 * n_side + 1];
    for (&c, &k) in hist.centers.iter().zip(&hist.counts) {
        let n = (c / period + 0.5).floor() as i64;
        if n.unsigned_abs() as usize <= n_side {
            areas[(n + n_side as i64) as usize] += k as f64;
        }
    }
    let y: Vec<f64> = hist.counts.iter().map(|&k| k as f64).collect();
    let quasi = overlap_flag(&hist.centers, &y, period, n_side);
    PeakTable::from_areas(n_side, period, &areas, Some(&areas), quasi)
}
