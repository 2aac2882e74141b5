//! Fixed-step RK4 integration of the driven master equation.
//!
//! The generator is linear in ρ, so one RK4 step is a fixed linear map that
//! depends only on Ω at the stage times `t, t + h/2, t + h`. [`StepPlan`]
//! precomputes those maps once: steps that overlap a pulse get their own
//! matrix (shared across periods when the step divides the period), and the
//! quiet steps between pulses all share one matrix whose powers are
//! tabulated. Applying a plan is therefore the same arithmetic as stepping
//! `master_rhs` with RK4, only reorganized.

use std::collections::HashMap;
use std::io::Write;

use crate::drive::{envelope_at, DriveEnvelope};
use crate::emitter::EmitterModel;
use crate::error::{Error, Result};
use crate::linalg::{from_vec, rk4_step_matrix, to_vec, CMatrix, PowerTable, SuperOp, C64, ZERO};
use crate::state::{hermiticity_error, min_eigenvalue, DensityMatrix, POSITIVITY_TOL};

const QUIET: u32 = u32::MAX;

/// Steps coarser than `w / RESOLUTION_GUARD` are rejected when a pulse is present.
pub const RESOLUTION_GUARD: f64 = 20.0;

pub fn default_step(model: &EmitterModel, env: &DriveEnvelope) -> f64 {
    (env.width() / 50.0).min(model.t1() / 200.0)
}

/// Largest step not exceeding `h` that divides the drive period exactly.
pub fn commensurate_step(h: f64, env: &DriveEnvelope) -> f64 {
    match env.period() {
        Some(t) => t / (t / h - 1e-9).ceil(),
        None => h,
    }
}

pub(crate) fn check_resolution(env: &DriveEnvelope, h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::param("h", format!("step must be positive, got {h}")));
    }
    if env.area() > 0.0 {
        let required = env.width() / RESOLUTION_GUARD;
        if h > required * (1.0 + 1e-12) {
            return Err(Error::StepTooCoarse { h, required });
        }
    }
    Ok(())
}

pub(crate) fn calibrated(env: &DriveEnvelope) -> Result<DriveEnvelope> {
    if env.is_calibrated() {
        Ok(env.clone())
    } else {
        env.calibrate()
    }
}

/// Precomputed RK4 step maps over `n_steps` steps of size `h` from t = 0.
pub(crate) struct StepPlan {
    kind: Vec<u32>,
    quiet_run: Vec<u32>,
    mats: Vec<SuperOp>,
    quiet: PowerTable,
}

impl StepPlan {
    pub fn new(model: &EmitterModel, env: &DriveEnvelope, h: f64, n_steps: usize) -> Self {
        let (l0, l1) = model.liouvillian_parts();
        let floor = env.floor_amplitude();
        let quiet_step = rk4_step_matrix(&l0, &l1, [floor; 3], h);
        let cycle = env.period().and_then(|t| {
            let r = t / h;
            ((r - r.round()).abs() < 1e-9 * r).then(|| r.round() as usize * env.pattern().len())
        });
        let mut kind = vec![QUIET; n_steps];
        let mut mats = Vec::new();
        let mut cache: HashMap<usize, u32> = HashMap::new();
        for (k, slot) in kind.iter_mut().enumerate() {
            let ta = k as f64 * h;
            let tb = ta + h;
            if env.is_quiet(ta, tb) {
                continue;
            }
            let key = cycle.map_or(k, |c| k % c);
            let idx = *cache.entry(key).or_insert_with(|| {
                let om = [
                    envelope_at(env, ta),
                    envelope_at(env, ta + 0.5 * h),
                    envelope_at(env, tb),
                ];
                mats.push(rk4_step_matrix(&l0, &l1, om, h));
                (mats.len() - 1) as u32
            });
            *slot = idx;
        }
        let mut quiet_run = vec![0u32; n_steps];
        let mut run = 0u32;
        for k in (0..n_steps).rev() {
            run = if kind[k] == QUIET { run + 1 } else { 0 };
            quiet_run[k] = run;
        }
        let longest = quiet_run.iter().copied().max().unwrap_or(0) as usize;
        Self {
            kind,
            quiet_run,
            mats,
            quiet: PowerTable::new(quiet_step, longest.max(1)),
        }
    }

    pub fn quiet_table(&self) -> &PowerTable {
        &self.quiet
    }

    /// Length of the quiet run starting at step `k` (0 if step `k` is active).
    #[inline]
    pub fn quiet_run(&self, k: usize) -> usize {
        self.quiet_run[k] as usize
    }

    /// One step `k → k + 1`.
    #[inline]
    pub fn step(&self, k: usize, x: &mut [C64], scratch: &mut [C64]) {
        match self.kind[k] {
            QUIET => self.quiet.single().apply_in_place(x, scratch),
            idx => self.mats[idx as usize].apply_in_place(x, scratch),
        }
    }

    /// Advances `x` from step index `from` to `to`.
    pub fn advance(&self, x: &mut [C64], from: usize, to: usize, scratch: &mut [C64]) {
        let mut k = from;
        while k < to {
            if self.kind[k] == QUIET {
                let m = (self.quiet_run[k] as usize).min(to - k);
                self.quiet.apply_power(m, x, scratch);
                k += m;
            } else {
                self.mats[self.kind[k] as usize].apply_in_place(x, scratch);
                k += 1;
            }
        }
    }
}

/// Time-resolved solution of the master equation on a uniform grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DensityMatrix>,
    /// `Tr[D†D ρ(t)]` with `D` the detection dipole.
    pub intensity: Vec<f64>,
    pub h: f64,
    /// Largest |Tr ρ − 1| seen before any renormalization.
    pub max_trace_drift: f64,
    pub renormalized_steps: usize,
}

impl Trajectory {
    pub fn population(&self, level: usize) -> Vec<f64> {
        self.states.iter().map(|s| s.population(level)).collect()
    }

    /// CSV with columns `time_ns,intensity,rho_00,rho_11,…`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self.states.first().map_or(0, DensityMatrix::dim);
        let mut header = String::from("time_ns,intensity");
        for i in 0..d {
            header.push_str(&format!(",rho_{i}{i}"));
        }
        writeln!(out, "{header}")?;
        for ((t, i), s) in self.times.iter().zip(&self.intensity).zip(&self.states) {
            let mut line = format!("{t},{i}");
            for l in 0..d {
                line.push_str(&format!(",{}", s.population(l)));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Integrates from `ρ₀` at t = 0 over `t_span` with fixed step `h`.
///
/// The envelope is calibrated here if it is not already.
pub fn evolve(
    model: &EmitterModel,
    env: &DriveEnvelope,
    rho0: &DensityMatrix,
    t_span: f64,
    h: f64,
) -> Result<Trajectory> {
    if rho0.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: rho0.dim(),
        });
    }
    if !(t_span > 0.0 && t_span.is_finite()) {
        return Err(Error::param("t_span", format!("must be positive, got {t_span}")));
    }
    check_resolution(env, h)?;
    let env = calibrated(env)?;
    let n = (t_span / h - 1e-9).ceil() as usize;
    let plan = StepPlan::new(model, &env, h, n);
    let d = model.dim();
    let det = model.detection_operator();
    let dd = det.adjoint() * &det;

    let mut x = to_vec(rho0.matrix());
    let mut scratch = vec![ZERO; d * d];
    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    let mut intensity = Vec::with_capacity(n + 1);
    let mut max_drift = 0.0f64;
    let mut renormalized = 0usize;

    for k in 0..=n {
        let t = k as f64 * h;
        if k > 0 {
            plan.step(k - 1, &mut x, &mut scratch);
        }
        let mut rho = from_vec(d, &x);
        let tr = rho.trace();
        let drift = (tr - C64::from(1.0)).norm();
        max_drift = max_drift.max(drift);
        if drift > 1e-6 {
            return Err(Error::InvariantBreach {
                time: t,
                reason: format!("trace drifted to {tr}"),
            });
        }
        if drift > 1e-9 {
            rho /= tr;
            x = to_vec(&rho);
            renormalized += 1;
        }
        let herm = hermiticity_error(&rho);
        if herm > 1e-10 {
            return Err(Error::InvariantBreach {
                time: t,
                reason: format!("Hermiticity error {herm:e}"),
            });
        }
        let lam = min_eigenvalue(&rho);
        if lam < -POSITIVITY_TOL {
            return Err(Error::InvariantBreach {
                time: t,
                reason: format!("eigenvalue {lam:e} below -1e-8"),
            });
        }
        intensity.push((&dd * &rho).trace().re);
        times.push(t);
        states.push(DensityMatrix::from_unchecked(rho));
    }
    Ok(Trajectory {
        times,
        states,
        intensity,
        h,
        max_trace_drift: max_drift,
        renormalized_steps: renormalized,
    })
}

/// End state after `n` steps, without storing the path.
pub(crate) fn end_state(
    model: &EmitterModel,
    env: &DriveEnvelope,
    rho0: &DensityMatrix,
    h: f64,
    n: usize,
) -> CMatrix {
    let plan = StepPlan::new(model, env, h, n);
    let d = model.dim();
    let mut x = to_vec(rho0.matrix());
    let mut scratch = vec![ZERO; d * d];
    plan.advance(&mut x, 0, n, &mut scratch);
    from_vec(d, &x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub slope: f64,
    pub steps: Vec<f64>,
    pub errors: Vec<f64>,
}

/// Errors below this are indistinguishable from accumulated roundoff.
pub const ROUNDOFF_FLOOR: f64 = 1e-12;

/// Log–log slope of end-state error against step size, measured against a
/// Richardson-extrapolated reference built from `h_min/2` and `h_min/4`.
pub fn convergence_order(
    model: &EmitterModel,
    env: &DriveEnvelope,
    rho0: &DensityMatrix,
    t_span: f64,
    h_list: &[f64],
) -> Result<ConvergenceReport> {
    let mut steps: Vec<f64> = h_list.to_vec();
    steps.sort_by(|a, b| b.total_cmp(a));
    steps.dedup();
    if steps.len() < 4 {
        return Err(Error::Convergence("need at least 4 distinct step sizes".into()));
    }
    let (hmax, hmin) = (steps[0], *steps.last().unwrap());
    if hmax / hmin < 8.0 - 1e-9 {
        return Err(Error::Convergence(format!(
            "step sizes span only a factor {:.2}; need at least 8",
            hmax / hmin
        )));
    }
    for &h in &steps {
        check_resolution(env, h)?;
    }
    let env = calibrated(env)?;
    let count = |h: f64| -> Result<usize> {
        let r = t_span / h;
        if (r - r.round()).abs() > 1e-6 {
            return Err(Error::Grid(format!("t_span {t_span} is not a multiple of h = {h}")));
        }
        Ok(r.round() as usize)
    };
    let half = end_state(model, &env, rho0, hmin / 2.0, count(hmin / 2.0)?);
    let quarter = end_state(model, &env, rho0, hmin / 4.0, count(hmin / 4.0)?);
    let reference = (quarter * C64::from(16.0) - half) / C64::from(15.0);

    let mut errors = Vec::with_capacity(steps.len());
    for &h in &steps {
        let end = end_state(model, &env, rho0, h, count(h)?);
        let err = (end - &reference).iter().map(|z| z.norm()).fold(0.0, f64::max);
        errors.push(err);
    }
    if let Some(e) = errors.iter().find(|e| **e < ROUNDOFF_FLOOR) {
        return Err(Error::Convergence(format!(
            "error {e:e} is at the roundoff floor; use larger steps"
        )));
    }
    if errors.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Convergence(format!("error sequence is not monotone: {errors:?}")));
    }
    let xs: Vec<f64> = steps.iter().map(|h| h.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(ConvergenceReport {
        slope: sxy / sxx,
        steps,
        errors,
    })
}
