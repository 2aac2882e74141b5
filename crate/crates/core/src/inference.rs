//! Least-squares fits, beat detection, two-photon interference visibility and
//! detection-efficiency bookkeeping.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::integrator::Trajectory;

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub names: Vec<&'static str>,
    pub values: Vec<f64>,
    /// 1σ from the covariance matrix.
    pub errors: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub rss: f64,
    pub converged: bool,
    pub iterations: usize,
    pub dof: usize,
}

impl FitResult {
    fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| *n == name)
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.values[i])
    }

    pub fn error(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.errors[i])
    }

    /// Key-value CSV: `parameter,value,sigma` rows followed by fit status.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "parameter,value,sigma")?;
        for ((n, v), e) in self.names.iter().zip(&self.values).zip(&self.errors) {
            writeln!(out, "{n},{v},{e}")?;
        }
        writeln!(out, "rss,{},", self.rss)?;
        writeln!(out, "converged,{},", self.converged)?;
        writeln!(out, "iterations,{},", self.iterations)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Stop once a step changes every parameter by less than this fraction.
    pub tolerance: f64,
    /// Per-point 1σ; when given, residuals are weighted and the covariance
    /// is not rescaled by the reduced χ².
    pub sigma: Option<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            tolerance: 1e-12,
            sigma: None,
        }
    }
}

/// Damped Gauss–Newton (Levenberg–Marquardt) with central-difference
/// Jacobians. `model(p, x)` may return NaN to mark `p` as infeasible.
pub fn levenberg_marquardt<F>(
    model: F,
    x: &[f64],
    y: &[f64],
    names: &[&'static str],
    p0: &[f64],
    opts: &FitOptions,
) -> Result<FitResult>
where
    F: Fn(&[f64], f64) -> f64,
{
    let n = x.len();
    let np = p0.len();
    if y.len() != n {
        return Err(Error::Grid(format!("{} abscissae for {} values", n, y.len())));
    }
    if names.len() != np {
        return Err(Error::param("names", "one name per parameter"));
    }
    if n <= np {
        return Err(Error::Grid(format!("{n} points cannot constrain {np} parameters")));
    }
    let weights: Vec<f64> = match &opts.sigma {
        Some(s) if s.len() != n => return Err(Error::Grid("sigma length differs from data".into())),
        Some(s) if s.iter().any(|v| !(*v > 0.0)) => return Err(Error::param("sigma", "must be positive")),
        Some(s) => s.iter().map(|v| 1.0 / v).collect(),
        None => vec![1.0; n],
    };
    let residuals = |p: &[f64]| -> DVector<f64> { DVector::from_fn(n, |i, _| (y[i] - model(p, x[i])) * weights[i]) };
    let rss_of = |r: &DVector<f64>| -> f64 {
        let s = r.norm_squared();
        if s.is_finite() {
            s
        } else {
            f64::INFINITY
        }
    };
    let jacobian = |p: &[f64]| -> DMatrix<f64> {
        let mut j = DMatrix::zeros(n, np);
        for k in 0..np {
            let step = 1e-6 * p[k].abs().max(1e-8);
            let mut hi = p.to_vec();
            let mut lo = p.to_vec();
            hi[k] += step;
            lo[k] -= step;
            for i in 0..n {
                j[(i, k)] = (model(&hi, x[i]) - model(&lo, x[i])) * weights[i] / (2.0 * step);
            }
        }
        j
    };

    let mut p = p0.to_vec();
    let mut r = residuals(&p);
    let mut rss = rss_of(&r);
    if !rss.is_finite() {
        return Err(Error::param("p0", "model is not finite at the starting point"));
    }
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        let j = jacobian(&p);
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;
        let mut accepted = false;
        while lambda < 1e16 {
            let mut a = jtj.clone();
            for k in 0..np {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-300);
            }
            let Some(delta) = a.lu().solve(&g) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = p.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
            let r_trial = residuals(&trial);
            let rss_trial = rss_of(&r_trial);
            if rss_trial <= rss {
                let small = delta
                    .iter()
                    .zip(&trial)
                    .all(|(d, v)| d.abs() <= opts.tolerance * v.abs().max(1e-300));
                p = trial;
                r = r_trial;
                let flat = rss - rss_trial <= 1e-15 * rss;
                rss = rss_trial;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if small || (flat && rss == 0.0) {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no downhill step at any damping: stationary to working precision
            converged = true;
        }
        if converged {
            break;
        }
    }

    let j = jacobian(&p);
    let jtj = j.transpose() * &j;
    let dof = n - np;
    let scale = if opts.sigma.is_some() { 1.0 } else { rss / dof as f64 };
    let covariance = jtj
        .try_inverse()
        .map(|c| c * scale)
        .unwrap_or_else(|| DMatrix::from_element(np, np, f64::NAN));
    let errors = (0..np).map(|k| covariance[(k, k)].max(0.0).sqrt()).collect();
    Ok(FitResult {
        names: names.to_vec(),
        values: p,
        errors,
        covariance,
        rss,
        converged,
        iterations,
        dof,
    })
}

/// Fits `A·exp(−(t − t₀)/T₁)` with `t₀` the first sample time.
///
/// Needs at least 10 points spanning two decay constants.
pub fn fit_exponential(t: &[f64], y: &[f64], opts: &FitOptions) -> Result<FitResult> {
    if t.len() < 10 || t.len() != y.len() {
        return Err(Error::Grid("need at least 10 matching points".into()));
    }
    let t0 = t[0];
    // log-linear start
    let pts: Vec<(f64, f64)> = t.iter().zip(y).filter(|(_, v)| **v > 0.0).map(|(a, b)| (a - t0, b.ln())).collect();
    if pts.len() < 2 {
        return Err(Error::NotNormalizable("no positive samples to start the fit".into()));
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    if !(slope < 0.0) {
        return Err(Error::Convergence("data do not decay".into()));
    }
    let tau0 = -1.0 / slope;
    let a0 = (my - slope * mx).exp();
    let fit = levenberg_marquardt(
        |p, x| {
            if p[0] <= 0.0 {
                f64::NAN
            } else {
                p[1] * (-(x - t0) / p[0]).exp()
            }
        },
        t,
        y,
        &["t1", "amplitude"],
        &[tau0, a0],
        opts,
    )?;
    let span = t[t.len() - 1] - t0;
    if fit.converged && span < 2.0 * fit.values[0] {
        return Err(Error::Grid(format!(
            "data span {span} ns covers less than two decay constants ({} ns)",
            fit.values[0]
        )));
    }
    Ok(fit)
}

/// Exponential fit to the emitted intensity from `t_start` on.
pub fn fit_exponential_trajectory(traj: &Trajectory, t_start: f64, opts: &FitOptions) -> Result<FitResult> {
    let (t, y): (Vec<f64>, Vec<f64>) = traj
        .times
        .iter()
        .zip(&traj.intensity)
        .filter(|(t, _)| **t >= t_start)
        .map(|(a, b)| (*a, *b))
        .unzip();
    fit_exponential(&t, &y, opts)
}

/// Excited-state population of a resonantly driven two-level emitter
/// starting in the ground state, exact for `T₂ = 2T₁`.
pub fn rabi_population(t: f64, omega: f64, t1: f64, t2: f64) -> f64 {
    let g = 1.0 / t1 + 1.0 / t2;
    let amp = 0.5 * omega * omega / (omega * omega + 1.0 / (t1 * t2));
    let d = 1.0 / t2 - 1.0 / t1;
    let xi2 = omega * omega - 0.25 * d * d;
    let osc = if xi2 > 0.0 {
        let xi = xi2.sqrt();
        (xi * t).cos() + g / (2.0 * xi) * (xi * t).sin()
    } else if xi2 < 0.0 {
        let k = (-xi2).sqrt();
        (k * t).cosh() + g / (2.0 * k) * (k * t).sinh()
    } else {
        1.0 + 0.5 * g * t
    };
    amp * (1.0 - osc * (-0.5 * g * t).exp())
}

/// Rabi frequency under a drive whose power drifts as `P₀ + P₁t + P₂t²`.
pub fn chirped_omega(omega_start: f64, chirp: [f64; 3], t: f64) -> f64 {
    let [p0, p1, p2] = chirp;
    omega_start * ((p0 + p1 * t + p2 * t * t) / p0).max(0.0).sqrt()
}

/// Rabi-oscillation fit of excited-state population data.
///
/// Parameters are `omega` and `t2`, plus `t1` when `t1_fixed` is `None`
/// (reported with `T₂ ≥ T₁`, since the data cannot tell the two apart).
/// With `chirp`, Ω is replaced by its drifting value at each time.
pub fn fit_rabi(
    t: &[f64],
    y: &[f64],
    t1_fixed: Option<f64>,
    chirp: Option<[f64; 3]>,
    opts: &FitOptions,
) -> Result<FitResult> {
    if t.len() != y.len() || t.len() < 10 {
        return Err(Error::Grid("need at least 10 matching points".into()));
    }
    if let Some([p0, ..]) = chirp {
        if !(p0 > 0.0) {
            return Err(Error::param("chirp", "P0 must be positive"));
        }
    }
    let om_at = move |om: f64, x: f64| chirp.map_or(om, |c| chirped_omega(om, c, x));
    let span = t[t.len() - 1] - t[0];
    let dt = span / (t.len() - 1) as f64;
    let t1_guess = t1_fixed.unwrap_or(span / 4.0);
    let t2_guess = 1.5 * t1_guess;
    let rss_for = |om: f64| -> f64 {
        t.iter()
            .zip(y)
            .map(|(x, v)| (v - rabi_population(*x, om_at(om, *x), t1_guess, t2_guess)).powi(2))
            .sum()
    };
    // coarse scan over Rabi frequencies up to the sampling limit
    let om_lo = 2.0 * PI / span;
    let om_hi = PI / dt;
    let n_scan = 2000;
    let om0 = (0..=n_scan)
        .map(|k| om_lo * (om_hi / om_lo).powf(k as f64 / n_scan as f64))
        .map(|om| (om, rss_for(om)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(om, _)| om)
        .unwrap();
    if om0 * span < 2.0 * 2.0 * PI * 0.9 {
        return Err(Error::Grid("data cover fewer than two Rabi periods".into()));
    }
    let fit = match t1_fixed {
        Some(t1) => levenberg_marquardt(
            |p, x| {
                if p[0] <= 0.0 || p[1] <= 0.0 {
                    f64::NAN
                } else {
                    rabi_population(x, om_at(p[0], x), t1, p[1])
                }
            },
            t,
            y,
            &["omega", "t2"],
            &[om0, t2_guess],
            opts,
        )?,
        None => levenberg_marquardt(
            |p, x| {
                if p[0] <= 0.0 || p[1] <= 0.0 || p[2] <= 0.0 {
                    f64::NAN
                } else {
                    rabi_population(x, om_at(p[0], x), p[2], p[1])
                }
            },
            t,
            y,
            &["omega", "t2", "t1"],
            &[om0, t2_guess, t1_guess],
            opts,
        )?,
    };
    Ok(canonical_branch(fit))
}

/// The population formula is symmetric under `T₁ ↔ T₂`; a free-`T₁` fit is
/// reported on the `T₂ ≥ T₁` branch.
fn canonical_branch(mut fit: FitResult) -> FitResult {
    if let (Some(i1), Some(i2)) = (fit.index("t1"), fit.index("t2")) {
        if fit.values[i2] < fit.values[i1] {
            fit.values.swap(i1, i2);
            fit.errors.swap(i1, i2);
            fit.covariance.swap_rows(i1, i2);
            fit.covariance.swap_columns(i1, i2);
        }
    }
    fit
}

/// `T₂/T₁` with its 1σ from a Rabi fit (`t1_fixed` as passed to the fit).
pub fn dephasing_ratio(fit: &FitResult, t1_fixed: Option<f64>) -> (f64, f64) {
    let t2 = fit.value("t2").unwrap_or(f64::NAN);
    let s2 = fit.error("t2").unwrap_or(f64::NAN);
    match (t1_fixed, fit.index("t1")) {
        (Some(t1), _) => (t2 / t1, s2 / t1),
        (None, Some(i1)) => {
            let i2 = fit.index("t2").unwrap();
            let t1 = fit.values[i1];
            let r = t2 / t1;
            let (d2, d1) = (1.0 / t1, -t2 / (t1 * t1));
            let c = &fit.covariance;
            let var = d2 * d2 * c[(i2, i2)] + d1 * d1 * c[(i1, i1)] + 2.0 * d1 * d2 * c[(i1, i2)];
            (r, var.max(0.0).sqrt())
        }
        (None, None) => (f64::NAN, f64::NAN),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeatResult {
    /// Dominant beat frequency in GHz, if a significant one was found.
    pub frequency_ghz: Option<f64>,
    /// Periodogram peak over its median.
    pub peak_to_median: f64,
}

const BEAT_MAX_SAMPLES: usize = 4096;

/// Power threshold, relative to the periodogram median, for a detection.
pub const BEAT_SIGNIFICANCE: f64 = 5.0;

/// Dominant oscillation of an emission decay: the intensity is divided by a
/// fitted exponential and the residual's Hann-windowed periodogram searched
/// for its peak.
pub fn beat_frequency(t: &[f64], intensity: &[f64], t_start: f64) -> Result<BeatResult> {
    let (t, y): (Vec<f64>, Vec<f64>) = t
        .iter()
        .zip(intensity)
        .filter(|(a, _)| **a >= t_start)
        .map(|(a, b)| (*a, *b))
        .unzip();
    // finely stepped trajectories are thinned; the periodogram cost is quadratic
    let stride = t.len().div_ceil(BEAT_MAX_SAMPLES).max(1);
    let (t, y): (Vec<f64>, Vec<f64>) = t.iter().zip(&y).step_by(stride).map(|(a, b)| (*a, *b)).unzip();
    let fit = fit_exponential(&t, &y, &FitOptions::default())?;
    let (t1, a) = (fit.values[0], fit.values[1]);
    let t0 = t[0];
    let resid: Vec<f64> = t.iter().zip(&y).map(|(x, v)| v / (a * (-(x - t0) / t1).exp()) - 1.0).collect();
    let none = |ratio| BeatResult {
        frequency_ghz: None,
        peak_to_median: ratio,
    };
    let rms = (resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64).sqrt();
    if rms < 1e-6 {
        return Ok(none(0.0));
    }
    let n = t.len();
    let span = t[n - 1] - t0;
    let window: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect();
    let wr: Vec<f64> = resid.iter().zip(&window).map(|(r, w)| r * w).collect();
    let power = |f: f64| -> f64 {
        let (mut re, mut im) = (0.0, 0.0);
        for (x, v) in t.iter().zip(&wr) {
            let ph = -2.0 * PI * f * (x - t0);
            re += v * ph.cos();
            im += v * ph.sin();
        }
        re * re + im * im
    };
    let dt = span / (n - 1) as f64;
    let df = 1.0 / (16.0 * span);
    let f_max = 0.5 / dt;
    // only oscillations completing at least three periods count
    let f_min = 3.0 / span;
    let freqs: Vec<f64> = (1..)
        .map(|k| k as f64 * df)
        .skip_while(|f| *f < f_min)
        .take_while(|f| *f <= f_max)
        .collect();
    if freqs.len() < 8 {
        return Err(Error::Grid("record too short for a periodogram".into()));
    }
    let powers: Vec<f64> = freqs.iter().map(|f| power(*f)).collect();
    let mut sorted = powers.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let (imax, pmax) = powers
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, p)| (i, *p))
        .unwrap();
    let ratio = pmax / median.max(f64::MIN_POSITIVE);
    if ratio < BEAT_SIGNIFICANCE {
        return Ok(none(ratio));
    }
    // golden-section refinement within one grid cell either side
    let (mut lo, mut hi) = (freqs[imax] - df, freqs[imax] + df);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..60 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if power(a) > power(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    let f = 0.5 * (lo + hi);
    if f * span < 3.0 {
        return Ok(none(ratio));
    }
    Ok(BeatResult {
        frequency_ghz: Some(f),
        peak_to_median: ratio,
    })
}

/// Beat frequency of a trajectory's intensity after `t_start`.
pub fn beat_frequency_trajectory(traj: &Trajectory, t_start: f64) -> Result<BeatResult> {
    beat_frequency(&traj.times, &traj.intensity, t_start)
}

/// A value with its 1σ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measured {
    pub value: f64,
    pub sigma: f64,
}

impl Measured {
    pub fn new(value: f64, sigma: f64) -> Self {
        Self { value, sigma }
    }

    pub fn exact(value: f64) -> Self {
        Self { value, sigma: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Visibility {
    pub raw: Measured,
    /// With the parallel peak reduced by the autocorrelation G²(0).
    pub corrected: Option<Measured>,
}

/// Two-photon interference visibility `(G²⊥ − G²∥)/G²⊥`, optionally
/// corrected for multiphoton events using `G²∥ − G²(0)`.
pub fn tpi_visibility(perp: Measured, par: Measured, hbt: Option<Measured>) -> Result<Visibility> {
    if !(perp.value > 0.0) {
        return Err(Error::param("perp", format!("G2_perp must be positive, got {}", perp.value)));
    }
    let vis = |par: f64, par_var: f64| {
        let v = (perp.value - par) / perp.value;
        let d_par = -1.0 / perp.value;
        let d_perp = par / (perp.value * perp.value);
        let var = d_par * d_par * par_var + d_perp * d_perp * perp.sigma * perp.sigma;
        Measured::new(v, var.sqrt())
    };
    let raw = vis(par.value, par.sigma * par.sigma);
    let corrected = hbt.map(|g0| vis(par.value - g0.value, par.sigma * par.sigma + g0.sigma * g0.sigma));
    Ok(Visibility { raw, corrected })
}

/// Named detection-path efficiencies, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyChain {
    stages: Vec<(String, f64)>,
}

impl EfficiencyChain {
    pub fn new(stages: Vec<(String, f64)>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::param("stages", "chain is empty"));
        }
        for (name, v) in &stages {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::param("stages", format!("{name} = {v} is outside [0, 1]")));
            }
        }
        Ok(Self { stages })
    }

    /// Fibre coupling, polarizer, four beam-splitter surfaces and the SPAD.
    pub fn reference() -> Self {
        let mut stages = vec![("fiber_coupling".to_string(), 0.314), ("polarizer".to_string(), 0.43)];
        for i in 1..=4 {
            stages.push((format!("beamsplitter_surface_{i}"), 0.96));
        }
        stages.push(("detector".to_string(), 0.30));
        Self { stages }
    }

    pub fn stages(&self) -> &[(String, f64)] {
        &self.stages
    }

    /// Product of all stages, taken in ascending order so that it does not
    /// depend on the order the stages were listed in.
    pub fn product(&self) -> f64 {
        let mut v: Vec<f64> = self.stages.iter().map(|s| s.1).collect();
        v.sort_by(f64::total_cmp);
        v.into_iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyReport {
    pub stages: Vec<(String, f64)>,
    pub optics_product: f64,
    pub trigger_mhz: f64,
    pub detected_mhz: f64,
    pub g2_zero: f64,
    /// Detected counts per trigger.
    pub overall: f64,
    /// Overall efficiency divided by the optics and detector product.
    pub extraction: f64,
    /// `detected × (1 − G²(0)/2)`.
    pub single_photon_mhz: f64,
}

impl EfficiencyReport {
    /// Key-value CSV.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "key,value")?;
        for (n, v) in &self.stages {
            writeln!(out, "stage_{n},{v}")?;
        }
        writeln!(out, "optics_product,{}", self.optics_product)?;
        writeln!(out, "trigger_mhz,{}", self.trigger_mhz)?;
        writeln!(out, "detected_mhz,{}", self.detected_mhz)?;
        writeln!(out, "g2_zero,{}", self.g2_zero)?;
        writeln!(out, "overall_efficiency,{}", self.overall)?;
        writeln!(out, "extraction_efficiency,{}", self.extraction)?;
        writeln!(out, "single_photon_mhz,{}", self.single_photon_mhz)?;
        writeln!(out, "single_photon_model,detected*(1-G2(0)/2)")?;
        writeln!(out, "dead_time,not modelled")?;
        Ok(())
    }
}

pub fn efficiency_report(
    chain: &EfficiencyChain,
    trigger_mhz: f64,
    detected_mhz: f64,
    g2_zero: f64,
) -> Result<EfficiencyReport> {
    if !(trigger_mhz > 0.0) {
        return Err(Error::param("trigger_mhz", format!("must be positive, got {trigger_mhz}")));
    }
    if !(detected_mhz >= 0.0) {
        return Err(Error::param("detected_mhz", format!("must be nonnegative, got {detected_mhz}")));
    }
    let product = chain.product();
    if product == 0.0 {
        return Err(Error::NotNormalizable("optics chain product is zero".into()));
    }
    let overall = detected_mhz / trigger_mhz;
    Ok(EfficiencyReport {
        stages: chain.stages.clone(),
        optics_product: product,
        trigger_mhz,
        detected_mhz,
        g2_zero,
        overall,
        extraction: overall / product,
        single_photon_mhz: detected_mhz * (1.0 - 0.5 * g2_zero),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_exponential_is_exact() {
        let t: Vec<f64> = (0..200).map(|k| 0.1 + k as f64 * 0.025).collect();
        let y: Vec<f64> = t.iter().map(|x| 3.0 * (-(x - 0.1) / 0.79).exp()).collect();
        let fit = fit_exponential(&t, &y, &FitOptions::default()).unwrap();
        assert!(fit.converged);
        assert!((fit.values[0] - 0.79).abs() < 1e-9, "{fit:?}");
        assert!((fit.values[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn short_span_is_rejected() {
        let t: Vec<f64> = (0..20).map(|k| k as f64 * 0.05).collect();
        let y: Vec<f64> = t.iter().map(|x| (-x / 0.79).exp()).collect();
        assert!(matches!(fit_exponential(&t, &y, &FitOptions::default()), Err(Error::Grid(_))));
    }

    #[test]
    fn noiseless_rabi_is_exact() {
        let t: Vec<f64> = (0..400).map(|k| k as f64 * 0.0125).collect();
        let y: Vec<f64> = t.iter().map(|x| rabi_population(*x, 10.0, 0.79, 1.58)).collect();
        let fit = fit_rabi(&t, &y, Some(0.79), None, &FitOptions::default()).unwrap();
        assert!((fit.value("omega").unwrap() - 10.0).abs() < 1e-6, "{fit:?}");
        assert!((fit.value("t2").unwrap() - 1.58).abs() < 1e-6);
        let free = fit_rabi(&t, &y, None, None, &FitOptions::default()).unwrap();
        let (ratio, _) = dephasing_ratio(&free, None);
        assert!((ratio - 2.0).abs() < 1e-6, "{free:?}");
    }

    #[test]
    fn noiseless_chirped_rabi_is_exact() {
        let chirp = [1.0, 0.15, 0.02];
        let t: Vec<f64> = (0..400).map(|k| k as f64 * 0.0125).collect();
        let y: Vec<f64> = t
            .iter()
            .map(|x| rabi_population(*x, chirped_omega(8.0, chirp, *x), 0.79, 1.58))
            .collect();
        let fit = fit_rabi(&t, &y, Some(0.79), Some(chirp), &FitOptions::default()).unwrap();
        assert!((fit.value("omega").unwrap() - 8.0).abs() < 1e-6, "{fit:?}");
        assert!((fit.value("t2").unwrap() - 1.58).abs() < 1e-6);
    }

    #[test]
    fn overdamped_rabi_is_continuous() {
        // ξ² crosses zero when Ω = |1/T₂ − 1/T₁|/2
        let (t1, t2) = (0.5, 0.1);
        let om = 0.5 * (1.0 / t2 - 1.0 / t1);
        for t in [0.1, 0.5, 1.0] {
            let a = rabi_population(t, om * (1.0 - 1e-7), t1, t2);
            let b = rabi_population(t, om, t1, t2);
            let c = rabi_population(t, om * (1.0 + 1e-7), t1, t2);
            assert!((a - b).abs() < 1e-6 && (b - c).abs() < 1e-6);
        }
    }

    #[test]
    fn visibility_examples() {
        let v = tpi_visibility(Measured::exact(0.5), Measured::exact(0.5), None).unwrap();
        assert_eq!(v.raw.value, 0.0);
        let v = tpi_visibility(Measured::exact(0.5), Measured::exact(0.12), Some(Measured::exact(0.10))).unwrap();
        assert!((v.raw.value - 0.76).abs() < 1e-12);
        assert!((v.corrected.unwrap().value - 0.96).abs() < 1e-12);
        assert!(tpi_visibility(Measured::exact(0.0), Measured::exact(0.1), None).is_err());
    }

    #[test]
    fn visibility_scale_invariance() {
        let a = tpi_visibility(Measured::exact(0.5), Measured::exact(0.12), None).unwrap();
        let b = tpi_visibility(Measured::exact(0.5 * 4.0), Measured::exact(0.12 * 4.0), None).unwrap();
        assert_eq!(a.raw.value, b.raw.value);
    }

    #[test]
    fn chain_product_and_extraction() {
        let chain = EfficiencyChain::reference();
        assert!((chain.product() - 0.0344).abs() < 5e-4);
        let mut reversed = chain.stages().to_vec();
        reversed.reverse();
        let rev = EfficiencyChain::new(reversed).unwrap();
        assert_eq!(rev.product(), chain.product());
        let rep = efficiency_report(&chain, 100.0, 0.36, 0.1).unwrap();
        assert!((rep.extraction - 0.104).abs() < 3e-3);
        assert!((rep.single_photon_mhz - 0.342).abs() < 1e-12);
    }

    #[test]
    fn chain_validation() {
        assert!(EfficiencyChain::new(vec![("x".into(), 1.2)]).is_err());
        let zero = EfficiencyChain::new(vec![("x".into(), 0.0)]).unwrap();
        assert!(matches!(efficiency_report(&zero, 80.0, 0.1, 0.1), Err(Error::NotNormalizable(_))));
        assert!(efficiency_report(&EfficiencyChain::reference(), 0.0, 0.1, 0.1).is_err());
    }
}
