//! Time-dependent Rabi amplitude Ω(t) for single pulses and periodic trains.
//!
//! Width convention: `width` is the FWHM of the intensity profile Ω² for the
//! Gaussian and lognormal shapes, and the duration for the rectangular and
//! chirped-flat shapes. `area` is ∫Ω dt over one pulse, not counting the
//! extinction floor.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative amplitude below which a pulse is treated as exactly zero.
pub const SUPPORT_EPS: f64 = 1e-10;

/// −30 dB modulator leakage between pulses, as an intensity ratio.
pub const DEFAULT_EXTINCTION_FLOOR: f64 = 1e-3;

pub const DEFAULT_LOGNORMAL_SHAPE: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PulseShape {
    Rectangular,
    Gaussian,
    Lognormal,
    #[serde(alias = "chirped_flat")]
    ChirpedFlat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriveEnvelope {
    shape: PulseShape,
    width: f64,
    area: f64,
    period: Option<f64>,
    pattern: Vec<bool>,
    extinction_floor: f64,
    chirp: [f64; 3],
    lognormal_shape: f64,
    delay: f64,
    peak: Option<f64>,
}

impl DriveEnvelope {
    /// Single pulse with the default extinction floor. The pulse is placed so
    /// that its support starts at t = 0.
    pub fn new(shape: PulseShape, width: f64, area: f64) -> Result<Self> {
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::param("width", format!("must be positive, got {width}")));
        }
        if !(area >= 0.0 && area.is_finite()) {
            return Err(Error::param("area", format!("must be >= 0, got {area}")));
        }
        let mut env = Self {
            shape,
            width,
            area,
            period: None,
            pattern: vec![true],
            extinction_floor: DEFAULT_EXTINCTION_FLOOR,
            chirp: [1.0, 0.0, 0.0],
            lognormal_shape: DEFAULT_LOGNORMAL_SHAPE,
            delay: 0.0,
            peak: None,
        };
        env.delay = -env.support_rel().0;
        Ok(env)
    }

    pub fn gaussian(width: f64, area: f64) -> Result<Self> {
        Self::new(PulseShape::Gaussian, width, area)
    }

    pub fn rectangular(width: f64, area: f64) -> Result<Self> {
        Self::new(PulseShape::Rectangular, width, area)
    }

    pub fn with_period(mut self, period: f64) -> Result<Self> {
        let (lo, hi) = self.support_rel();
        if !(period > self.width && period.is_finite()) {
            return Err(Error::param("period", format!("must exceed the width, got {period}")));
        }
        if hi - lo > period {
            return Err(Error::param(
                "period",
                format!("pulse support {:.4} ns does not fit in period {period} ns", hi - lo),
            ));
        }
        self.period = Some(period);
        self.peak = None;
        Ok(self)
    }

    pub fn with_pattern(mut self, pattern: Vec<bool>) -> Result<Self> {
        if pattern.is_empty() {
            return Err(Error::param("pattern", "must not be empty"));
        }
        self.pattern = pattern;
        Ok(self)
    }

    pub fn with_extinction_floor(mut self, floor: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&floor) {
            return Err(Error::param("extinction_floor", format!("must lie in [0, 1), got {floor}")));
        }
        self.extinction_floor = floor;
        Ok(self)
    }

    /// Ideal drive: exactly zero between pulses.
    pub fn without_floor(self) -> Self {
        self.with_extinction_floor(0.0).expect("zero floor is valid")
    }

    /// `|Ω(t)|² ∝ P₀ + P₁u + P₂u²` with `u` the time since the pulse start.
    pub fn with_chirp(mut self, coeffs: [f64; 3]) -> Self {
        self.chirp = coeffs;
        self.peak = None;
        self
    }

    pub fn with_lognormal_shape(mut self, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::param("lognormal_shape", format!("must be positive, got {sigma}")));
        }
        self.lognormal_shape = sigma;
        self.delay = -self.support_rel().0;
        self.peak = None;
        Ok(self)
    }

    /// Nominal start of the pulse within each period.
    pub fn with_delay(mut self, delay: f64) -> Self {
        self.delay = delay;
        self
    }

    pub fn with_area(mut self, area: f64) -> Result<Self> {
        if !(area >= 0.0 && area.is_finite()) {
            return Err(Error::param("area", format!("must be >= 0, got {area}")));
        }
        self.area = area;
        self.peak = None;
        Ok(self)
    }

    pub fn shape(&self) -> PulseShape {
        self.shape
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn area(&self) -> f64 {
        self.area
    }

    pub fn period(&self) -> Option<f64> {
        self.period
    }

    pub fn pattern(&self) -> &[bool] {
        &self.pattern
    }

    pub fn extinction_floor(&self) -> f64 {
        self.extinction_floor
    }

    pub fn chirp(&self) -> [f64; 3] {
        self.chirp
    }

    pub fn delay(&self) -> f64 {
        self.delay
    }

    pub fn is_calibrated(&self) -> bool {
        self.peak.is_some()
    }

    /// Calibrated peak amplitude Ω₀, if any.
    pub fn peak(&self) -> Option<f64> {
        self.peak
    }

    /// Returns a copy with Ω₀ set so that one pulse integrates to `area`.
    pub fn calibrate(&self) -> Result<Self> {
        let peak = calibrate_amplitude(self)?;
        let mut out = self.clone();
        out.peak = Some(peak);
        Ok(out)
    }

    fn sigma_amp(&self) -> f64 {
        self.width / (2.0 * std::f64::consts::LN_2.sqrt())
    }

    /// (μ, origin offset) of the lognormal: the intensity is
    /// `exp(−(ln x − μ)² / 2s²)` with `x = u − offset`, so the mode sits at
    /// `u = w/2` and the intensity FWHM equals `w`.
    fn lognormal_params(&self) -> (f64, f64) {
        let s = self.lognormal_shape;
        let a = s * (2.0 * std::f64::consts::LN_2).sqrt();
        let mode = self.width / (2.0 * a.sinh());
        (mode.ln(), 0.5 * self.width - mode)
    }

    fn chirp_max(&self) -> f64 {
        let [p0, p1, p2] = self.chirp;
        let w = self.width;
        let mut best = p0.max(p0 + p1 * w + p2 * w * w);
        if p2 != 0.0 {
            let u = -p1 / (2.0 * p2);
            if u > 0.0 && u < w {
                best = best.max(p0 + p1 * u + p2 * u * u);
            }
        }
        best
    }

    /// Support of one pulse relative to its nominal start.
    pub fn support_rel(&self) -> (f64, f64) {
        let w = self.width;
        match self.shape {
            PulseShape::Rectangular | PulseShape::ChirpedFlat => (0.0, w),
            PulseShape::Gaussian => {
                let half = self.sigma_amp() * (2.0 * (1.0 / SUPPORT_EPS).ln()).sqrt();
                (0.5 * w - half, 0.5 * w + half)
            }
            PulseShape::Lognormal => {
                let (mu, off) = self.lognormal_params();
                let a = 2.0 * self.lognormal_shape * (1.0 / SUPPORT_EPS).ln().sqrt();
                (off + (mu - a).exp(), off + (mu + a).exp())
            }
        }
    }

    /// Unit-peak amplitude profile of one pulse at `u` ns after its nominal
    /// start; exactly zero outside the support.
    pub fn profile(&self, u: f64) -> f64 {
        let (lo, hi) = self.support_rel();
        if u < lo || u >= hi {
            return 0.0;
        }
        match self.shape {
            PulseShape::Rectangular => 1.0,
            PulseShape::Gaussian => {
                let s = self.sigma_amp();
                let x = u - 0.5 * self.width;
                (-x * x / (2.0 * s * s)).exp()
            }
            PulseShape::Lognormal => {
                let (mu, off) = self.lognormal_params();
                let x = u - off;
                if x <= 0.0 {
                    return 0.0;
                }
                let s = self.lognormal_shape;
                let l = x.ln() - mu;
                (-l * l / (4.0 * s * s)).exp()
            }
            PulseShape::ChirpedFlat => {
                let [p0, p1, p2] = self.chirp;
                let p = (p0 + p1 * u + p2 * u * u).max(0.0);
                (p / self.chirp_max()).sqrt()
            }
        }
    }

    /// ∫ profile du over one pulse.
    pub fn profile_integral(&self) -> Result<f64> {
        match self.shape {
            PulseShape::Rectangular => Ok(self.width),
            PulseShape::Gaussian => Ok(self.sigma_amp() * (2.0 * PI).sqrt()),
            PulseShape::Lognormal => {
                let (mu, _) = self.lognormal_params();
                let s = self.lognormal_shape;
                Ok(2.0 * s * PI.sqrt() * (mu + s * s).exp())
            }
            PulseShape::ChirpedFlat => {
                let [p0, p1, p2] = self.chirp;
                let w = self.width;
                if [p0, p1, p2].iter().any(|p| !p.is_finite()) {
                    return Err(Error::NotNormalizable("non-finite chirp coefficient".into()));
                }
                // the quadratic is checked at the ends and at its extremum
                let mut lowest = p0.min(p0 + p1 * w + p2 * w * w);
                if p2 != 0.0 {
                    let u = -p1 / (2.0 * p2);
                    if u > 0.0 && u < w {
                        lowest = lowest.min(p0 + p1 * u + p2 * u * u);
                    }
                }
                if lowest < 0.0 || self.chirp_max() <= 0.0 {
                    return Err(Error::NotNormalizable(format!(
                        "chirp polynomial must be positive on the pulse, minimum {lowest}"
                    )));
                }
                Ok(simpson(|u| self.profile(u), 0.0, w, 4096))
            }
        }
    }

    /// Index of the pulse whose support could contain `t`, if that pulse fires.
    fn pulse_at(&self, t: f64) -> Option<f64> {
        let (lo, hi) = self.support_rel();
        let start = match self.period {
            None => self.delay,
            Some(period) => {
                let n = ((t - self.delay - lo) / period).floor();
                if n < 0.0 {
                    return None;
                }
                let idx = (n as u64 % self.pattern.len() as u64) as usize;
                if !self.pattern[idx] {
                    return None;
                }
                self.delay + n * period
            }
        };
        let u = t - start;
        (u >= lo && u < hi).then_some(u)
    }

    /// True if no firing pulse overlaps `[ta, tb]`, so Ω equals the floor
    /// throughout.
    pub fn is_quiet(&self, ta: f64, tb: f64) -> bool {
        let (lo, hi) = self.support_rel();
        match self.period {
            None => tb < self.delay + lo || ta >= self.delay + hi,
            Some(period) => {
                let first = ((ta - self.delay - hi) / period).floor().max(0.0) as u64;
                let last = ((tb - self.delay - lo) / period).floor();
                if last < 0.0 {
                    return true;
                }
                let last = last as u64;
                (first..=last).all(|n| {
                    let s = self.delay + n as f64 * period;
                    let fires = self.pattern[(n % self.pattern.len() as u64) as usize];
                    !fires || tb < s + lo || ta >= s + hi
                })
            }
        }
    }

    /// Absolute support window of pulse `n` (n = 0 for a single pulse).
    pub fn pulse_window(&self, n: u64) -> (f64, f64) {
        let (lo, hi) = self.support_rel();
        let s = self.delay + n as f64 * self.period.unwrap_or(0.0);
        (s + lo, s + hi)
    }

    /// Time of the intensity maximum of pulse 0.
    pub fn pulse_center(&self) -> f64 {
        self.delay + 0.5 * self.width
    }

    pub fn floor_amplitude(&self) -> f64 {
        self.peak.unwrap_or(0.0) * self.extinction_floor.sqrt()
    }
}

/// Peak amplitude Ω₀ (rad/ns) such that one pulse integrates to `env.area()`.
pub fn calibrate_amplitude(env: &DriveEnvelope) -> Result<f64> {
    let integral = env.profile_integral()?;
    if !(integral > 0.0 && integral.is_finite()) {
        return Err(Error::NotNormalizable(format!("profile integral {integral}")));
    }
    Ok(env.area / integral)
}

/// Ω(t) in rad/ns. Between pulses, and in periods masked by the pattern, this
/// is `Ω₀·√floor`. An uncalibrated envelope has Ω₀ = 0.
pub fn envelope_at(env: &DriveEnvelope, t: f64) -> f64 {
    let peak = env.peak.unwrap_or(0.0);
    let floor = env.extinction_floor.sqrt();
    match env.pulse_at(t) {
        Some(u) => peak * env.profile(u).max(floor),
        None => peak * floor,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PulseSpectrum {
    pub frequencies: Vec<f64>,
    pub intensity: Vec<f64>,
    pub fwhm_ghz: f64,
}

/// Power spectrum |∫Ω(t)e^{−2πift}dt|² of a single pulse on `f_grid` (GHz),
/// normalized to unit peak, with its FWHM.
pub fn pulse_spectrum(env: &DriveEnvelope, f_grid: &[f64]) -> Result<PulseSpectrum> {
    if f_grid.len() < 3 {
        return Err(Error::Grid("frequency grid needs at least 3 points".into()));
    }
    if f_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Grid("frequency grid must be strictly increasing".into()));
    }
    let (lo, hi) = env.support_rel();
    let fmax = f_grid.iter().fold(0.0f64, |m, f| m.max(f.abs()));
    let mut n = ((hi - lo) * fmax * 40.0).ceil() as usize;
    n = n.max(((hi - lo) / env.width * 400.0).ceil() as usize).max(2000);
    n += n % 2;
    let dt = (hi - lo) / n as f64;
    let center = 0.5 * env.width;
    let samples: Vec<(f64, f64)> = (0..=n)
        .map(|k| {
            let u = lo + k as f64 * dt;
            let wgt = if k == 0 || k == n {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            (u - center, wgt * dt / 3.0 * env.profile(u))
        })
        .collect();
    let power: Vec<f64> = f_grid
        .iter()
        .map(|&f| {
            let (mut re, mut im) = (0.0, 0.0);
            for &(t, a) in &samples {
                let ph = -2.0 * PI * f * t;
                re += a * ph.cos();
                im += a * ph.sin();
            }
            re * re + im * im
        })
        .collect();
    let peak = power.iter().cloned().fold(0.0f64, f64::max);
    if peak <= 0.0 {
        return Err(Error::NotNormalizable("pulse spectrum is identically zero".into()));
    }
    let intensity: Vec<f64> = power.iter().map(|p| p / peak).collect();
    let fwhm_ghz = fwhm(f_grid, &intensity)?;
    Ok(PulseSpectrum {
        frequencies: f_grid.to_vec(),
        intensity,
        fwhm_ghz,
    })
}

/// Full width at half maximum of a unit-peak sampled curve, by linear
/// interpolation of the outermost half-maximum crossings around the peak.
pub(crate) fn fwhm(x: &[f64], y: &[f64]) -> Result<f64> {
    let imax = y
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    let half = 0.5 * y[imax];
    let above = y.iter().filter(|v| **v >= half).count();
    if above < 3 {
        return Err(Error::Grid(format!(
            "only {above} grid points above half maximum; grid too coarse to resolve the FWHM"
        )));
    }
    let mut left = None;
    for i in (0..imax).rev() {
        if y[i] < half {
            let f = (half - y[i]) / (y[i + 1] - y[i]);
            left = Some(x[i] + f * (x[i + 1] - x[i]));
            break;
        }
    }
    let mut right = None;
    for i in imax + 1..y.len() {
        if y[i] < half {
            let f = (y[i - 1] - half) / (y[i - 1] - y[i]);
            right = Some(x[i - 1] + f * (x[i] - x[i - 1]));
            break;
        }
    }
    match (left, right) {
        (Some(l), Some(r)) => Ok(r - l),
        _ => Err(Error::Grid("grid does not bracket the half-maximum points".into())),
    }
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b - 1e-15 * (b - a).abs());
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + k as f64 * h);
    }
    s * h / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent adaptive Simpson, used only as an integration oracle.
    fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let lm = 0.5 * (a + m);
            let rm = 0.5 * (m + b);
            let flm = f(lm);
            let frm = f(rm);
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
        let fa = f(a);
        let fb = f(b);
        let fm = f(0.5 * (a + b));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, 50)
    }

    #[test]
    fn rectangular_pi_pulse() {
        let env = DriveEnvelope::rectangular(0.1, PI).unwrap();
        let peak = calibrate_amplitude(&env).unwrap();
        assert!((peak - 31.415_926_535_897_93).abs() < 1e-9);
        let env = env.calibrate().unwrap();
        assert!((envelope_at(&env, 0.05) - 31.4159).abs() < 1e-4);
    }

    #[test]
    fn gaussian_calibration_and_half_max() {
        let w = 0.1;
        let env = DriveEnvelope::gaussian(w, PI).unwrap().calibrate().unwrap();
        let sigma = w / (2.0 * std::f64::consts::LN_2.sqrt());
        let expect = PI / (sigma * (2.0 * PI).sqrt());
        assert!((env.peak().unwrap() - expect).abs() < 1e-12);
        let c = env.pulse_center();
        let peak_i = envelope_at(&env, c).powi(2);
        for t in [c - w / 2.0, c + w / 2.0] {
            let ratio = envelope_at(&env, t).powi(2) / peak_i;
            assert!((ratio - 0.5).abs() < 1e-12, "{ratio}");
        }
    }

    #[test]
    fn lognormal_quadrature_matches_closed_form() {
        let env = DriveEnvelope::new(PulseShape::Lognormal, 0.1, PI).unwrap();
        let closed = env.profile_integral().unwrap();
        let (lo, hi) = env.support_rel();
        let numeric = adaptive_simpson(&|u| env.profile(u), lo, hi, 1e-14);
        assert!(((closed - numeric) / closed).abs() < 1e-6, "{closed} vs {numeric}");
        let peak = calibrate_amplitude(&env).unwrap();
        assert!(((peak * numeric - PI) / PI).abs() < 1e-6);
    }

    #[test]
    fn lognormal_mode_and_fwhm() {
        let w = 0.1;
        let env = DriveEnvelope::new(PulseShape::Lognormal, w, PI).unwrap();
        let us: Vec<f64> = (0..200_001).map(|k| -0.1 + k as f64 * 2e-6).collect();
        let is: Vec<f64> = us.iter().map(|&u| env.profile(u).powi(2)).collect();
        let imax = is.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert!((us[imax] - w / 2.0).abs() < 5e-6);
        assert!((fwhm(&us, &is).unwrap() - w).abs() < 1e-6);
    }

    #[test]
    fn chirped_flat_calibration() {
        let env = DriveEnvelope::new(PulseShape::ChirpedFlat, 2.0, 3.0 * PI)
            .unwrap()
            .with_chirp([0.6, 0.3, -0.05]);
        let peak = calibrate_amplitude(&env).unwrap();
        let numeric = adaptive_simpson(&|u| env.profile(u), 0.0, 2.0, 1e-13);
        assert!(((peak * numeric - 3.0 * PI) / (3.0 * PI)).abs() < 1e-6);
        let bad = env.clone().with_chirp([-1.0, 0.0, 0.0]);
        assert!(matches!(calibrate_amplitude(&bad), Err(Error::NotNormalizable(_))));
        let bad = env.with_chirp([0.5, -1.0, 0.0]);
        assert!(calibrate_amplitude(&bad).is_err());
    }

    #[test]
    fn floor_between_pulses() {
        let env = DriveEnvelope::gaussian(0.1, PI)
            .unwrap()
            .with_period(12.5)
            .unwrap()
            .calibrate()
            .unwrap();
        let peak = env.peak().unwrap();
        let v = envelope_at(&env, 6.0);
        assert!((v / peak - 0.0316).abs() < 1e-4);
        assert!((v - peak * 1e-3f64.sqrt()).abs() < 1e-12);
        let ideal = env.clone().without_floor();
        assert_eq!(envelope_at(&ideal, 6.0), 0.0);
    }

    #[test]
    fn pattern_masks_periods() {
        let env = DriveEnvelope::rectangular(0.1, PI)
            .unwrap()
            .with_period(1.0)
            .unwrap()
            .with_pattern(vec![true, false, true])
            .unwrap()
            .calibrate()
            .unwrap();
        let peak = env.peak().unwrap();
        let floor = peak * 1e-3f64.sqrt();
        assert_eq!(envelope_at(&env, 0.05), peak);
        assert_eq!(envelope_at(&env, 1.05), floor);
        assert_eq!(envelope_at(&env, 2.05), peak);
        assert_eq!(envelope_at(&env, 3.05), peak);
        assert_eq!(envelope_at(&env, 4.05), floor);
        assert!(env.is_quiet(1.0, 1.9));
        assert!(!env.is_quiet(1.9, 2.01));
    }

    #[test]
    fn calibration_is_idempotent() {
        let env = DriveEnvelope::gaussian(0.07, 0.81 * PI).unwrap();
        let once = env.calibrate().unwrap();
        let twice = once.calibrate().unwrap();
        assert_eq!(once.peak(), twice.peak());
    }

    #[test]
    fn period_must_exceed_width() {
        assert!(DriveEnvelope::rectangular(1.0, PI).unwrap().with_period(0.5).is_err());
        assert!(DriveEnvelope::gaussian(1.0, PI).unwrap().with_period(2.0).is_err());
    }

    #[test]
    fn gaussian_spectrum_is_transform_limited() {
        let w = 0.1;
        let env = DriveEnvelope::gaussian(w, PI).unwrap();
        let grid: Vec<f64> = (-400..=400).map(|k| k as f64 * 0.025).collect();
        let s = pulse_spectrum(&env, &grid).unwrap();
        let expect = 2.0 * std::f64::consts::LN_2 / (PI * w);
        assert!((s.fwhm_ghz - expect).abs() < 1e-3, "{} vs {expect}", s.fwhm_ghz);

        let long = DriveEnvelope::gaussian(1.0, PI).unwrap();
        let fine: Vec<f64> = (-400..=400).map(|k| k as f64 * 0.0025).collect();
        let s_long = pulse_spectrum(&long, &fine).unwrap();
        assert!((s.fwhm_ghz / s_long.fwhm_ghz - 10.0).abs() < 0.01);
    }

    #[test]
    fn rectangular_spectrum_first_zero() {
        let env = DriveEnvelope::rectangular(0.1, PI).unwrap();
        let full: Vec<f64> = (-2000..=2000).map(|k| k as f64 * 0.01).collect();
        let s = pulse_spectrum(&env, &full).unwrap();
        let near: Vec<(f64, f64)> = s
            .frequencies
            .iter()
            .zip(&s.intensity)
            .filter(|(f, _)| **f > 9.0 && **f < 11.0)
            .map(|(f, i)| (*f, *i))
            .collect();
        let zero = near.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        assert!((zero.0 - 10.0).abs() < 0.011, "{zero:?}");
        assert!(zero.1 < 1e-5);
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let env = DriveEnvelope::gaussian(0.1, PI).unwrap();
        let grid = [-50.0, -25.0, 0.0, 25.0, 50.0];
        assert!(matches!(pulse_spectrum(&env, &grid), Err(Error::Grid(_))));
    }

    proptest! {
        #[test]
        fn doubling_width_halves_spectral_fwhm(w in 0.05f64..0.5) {
            let df = 0.002 / w;
            let grid: Vec<f64> = (-600..=600).map(|k| k as f64 * df).collect();
            let a = pulse_spectrum(&DriveEnvelope::gaussian(w, PI).unwrap(), &grid).unwrap();
            let grid2: Vec<f64> = grid.iter().map(|f| f / 2.0).collect();
            let b = pulse_spectrum(&DriveEnvelope::gaussian(2.0 * w, PI).unwrap(), &grid2).unwrap();
            prop_assert!((a.fwhm_ghz / b.fwhm_ghz - 2.0).abs() / 2.0 < 1e-3);
        }
    }
}
