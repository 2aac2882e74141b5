//! Config-driven experiment runs: a TOML file describes the emitter, the
//! drive and the grids, and [`Scenario::run`] writes plot-ready CSV files,
//! a manifest and a short summary into an output directory.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::correlation::{
    continuous_g2_center, convolve_irf, normalize_histogram, pulsed_correlation, CorrelationOptions, HistogramData,
    DEFAULT_N_SIDE, DEFAULT_WARMUP_PERIODS,
};
use crate::drive::{pulse_spectrum, DriveEnvelope, PulseShape, DEFAULT_EXTINCTION_FLOOR};
use crate::emitter::{EmitterKind, EmitterModel};
use crate::error::Error;
use crate::inference::{
    beat_frequency_trajectory, chirped_omega, dephasing_ratio, efficiency_report, fit_exponential_trajectory,
    fit_rabi, rabi_population, tpi_visibility, EfficiencyChain, FitOptions, Measured,
};
use crate::integrator::{default_step, evolve};
use crate::jumps::jump_oracle;
use crate::state::DensityMatrix;

/// Environment variable overriding the configured thread count.
pub const THREADS_ENV: &str = "RFSIM_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("{}", config_message(*.line, .message))]
    Config { line: Option<usize>, message: String },
    #[error("numerical failure: {0}")]
    Numerical(Error),
    #[error("I/O error: {0}")]
    Io(String),
}

fn config_message(line: Option<usize>, message: &str) -> String {
    match line {
        Some(l) => format!("config error at line {l}: {message}"),
        None => format!("config error: {message}"),
    }
}

impl ScenarioError {
    /// Process exit code: 2 for configuration problems, 3 for numerical
    /// guard failures, 1 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Config { .. } => 2,
            ScenarioError::Numerical(_) => 3,
            ScenarioError::Io(_) => 1,
        }
    }
}

impl From<Error> for ScenarioError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(m) => ScenarioError::Io(m),
            e => ScenarioError::Numerical(e),
        }
    }
}

impl From<std::io::Error> for ScenarioError {
    fn from(e: std::io::Error) -> Self {
        ScenarioError::Io(e.to_string())
    }
}

type Result<T> = std::result::Result<T, ScenarioError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Decay,
    RabiScan,
    Hbt,
    WidthSweep,
    FrequencySweep,
    Visibility,
    Spectrum,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    #[serde(default)]
    pub seed: u64,
    pub threads: Option<usize>,
    #[serde(default)]
    pub emitter: EmitterSection,
    #[serde(default)]
    pub envelope: EnvelopeSection,
    #[serde(default)]
    pub grids: GridSection,
    pub sweep: Option<SweepSection>,
    pub visibility: Option<VisibilitySection>,
    pub efficiency: Option<EfficiencySection>,
    pub histogram: Option<HistogramSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmitterSection {
    #[serde(default = "default_model")]
    pub model: EmitterKind,
    /// Lifetime in ns.
    #[serde(default = "default_t1")]
    pub t1: f64,
    /// Coherence time in ns (two-level only); defaults to 2·t1.
    pub t2: Option<f64>,
    /// Fine-structure splitting δ₀/2π in GHz (V-type only).
    #[serde(default)]
    pub splitting_ghz: f64,
    /// Laser detuning in rad/ns.
    #[serde(default)]
    pub detuning: f64,
    /// Drive polarization angle in rad (V-type).
    pub polarization: Option<f64>,
    /// Detection polarizer angle in rad (V-type).
    pub detection_angle: Option<f64>,
}

fn default_model() -> EmitterKind {
    EmitterKind::TwoLevel
}

fn default_t1() -> f64 {
    0.79
}

impl Default for EmitterSection {
    fn default() -> Self {
        Self {
            model: default_model(),
            t1: default_t1(),
            t2: None,
            splitting_ghz: 0.0,
            detuning: 0.0,
            polarization: None,
            detection_angle: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvelopeSection {
    #[serde(default = "default_shape")]
    pub shape: PulseShape,
    /// Intensity FWHM (or flat length) in ns.
    #[serde(default = "default_width")]
    pub width: f64,
    /// Pulse area in rad.
    pub area: Option<f64>,
    /// Pulse area in units of π.
    pub area_pi: Option<f64>,
    /// Repetition period in ns.
    pub period: Option<f64>,
    /// Repetition rate in MHz, as an alternative to `period`.
    pub rate_mhz: Option<f64>,
    pub pattern: Option<Vec<bool>>,
    pub extinction_floor: Option<f64>,
    /// Power drift coefficients P₀, P₁, P₂ of a chirped flat pulse.
    pub chirp: Option<[f64; 3]>,
    pub lognormal_shape: Option<f64>,
    pub delay: Option<f64>,
}

fn default_shape() -> PulseShape {
    PulseShape::Gaussian
}

fn default_width() -> f64 {
    0.1
}

impl Default for EnvelopeSection {
    fn default() -> Self {
        Self {
            shape: default_shape(),
            width: default_width(),
            area: None,
            area_pi: None,
            period: None,
            rate_mhz: None,
            pattern: None,
            extinction_floor: None,
            chirp: None,
            lognormal_shape: None,
            delay: None,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub t_span: Option<f64>,
    pub h: Option<f64>,
    pub fit_start: Option<f64>,
    pub tau_max: Option<f64>,
    pub n_side: Option<usize>,
    pub warmup_periods: Option<usize>,
    pub irf_fwhm: Option<f64>,
    pub widths: Option<Vec<f64>>,
    pub t1_values: Option<Vec<f64>>,
    pub frequencies_mhz: Option<Vec<f64>>,
    pub spectrum_max_ghz: Option<f64>,
    pub spectrum_points: Option<usize>,
    pub jump_trajectories: Option<u64>,
    /// Number of samples handed to the Rabi fit.
    pub samples: Option<usize>,
    /// Gaussian noise added to the Rabi samples, relative to their maximum.
    pub noise: Option<f64>,
    /// Fit T₁ in the Rabi scan instead of fixing it to the emitter value.
    #[serde(default)]
    pub free_t1: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Width,
    Frequency,
    Power,
    T1,
}

impl SweepAxis {
    fn column(self) -> &'static str {
        match self {
            SweepAxis::Width => "width_ns",
            SweepAxis::Frequency => "frequency_mhz",
            SweepAxis::Power => "relative_power",
            SweepAxis::T1 => "t1_ns",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisibilitySection {
    pub g2_perp: f64,
    #[serde(default)]
    pub g2_perp_sigma: f64,
    pub g2_par: f64,
    #[serde(default)]
    pub g2_par_sigma: f64,
    pub g2_hbt: Option<f64>,
    #[serde(default)]
    pub g2_hbt_sigma: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EfficiencySection {
    /// Detected counts per trigger.
    pub overall: f64,
    /// Optics and detector chain; the reference chain if absent.
    pub stages: Option<Vec<Stage>>,
    /// Trigger rate for the efficiency report; the highest swept rate if absent.
    pub trigger_mhz: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramSection {
    /// CSV of `bin_center_ns,counts`, relative to the config file.
    pub path: PathBuf,
    pub period: Option<f64>,
    pub acquisition_s: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Output directory, relative to the config file.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub dir: PathBuf,
    /// File names written into `dir`, manifest and summary last.
    pub outputs: Vec<String>,
    pub summary: Vec<String>,
    pub threads: usize,
}

/// Thread count from, in order: the command-line flag, the environment
/// override, the config, and the available parallelism.
pub fn resolve_threads(flag: Option<usize>, env: Option<&str>, config: Option<usize>) -> Result<usize> {
    let from_env = match env.map(str::trim).filter(|s| !s.is_empty()) {
        Some(s) => Some(s.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| ScenarioError::Config {
            line: None,
            message: format!("{THREADS_ENV} must be a positive integer, got {s:?}"),
        })?),
        None => None,
    };
    let n = flag
        .or(from_env)
        .or(config)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if n == 0 {
        return Err(ScenarioError::Config {
            line: None,
            message: "thread count must be positive".into(),
        });
    }
    Ok(n)
}

/// A parsed and validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    config: ScenarioConfig,
    text: String,
    base_dir: PathBuf,
}

impl Scenario {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
        let base = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        Self::parse(&text, &base)
    }

    /// Parses and validates config text; relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let config: ScenarioConfig = toml::from_str(text).map_err(|e| ScenarioError::Config {
            line: e.span().map(|s| line_at(text, s.start)),
            message: e.message().trim().to_string(),
        })?;
        let s = Self {
            config,
            text: text.to_string(),
            base_dir: base_dir.to_path_buf(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn kind(&self) -> ScenarioKind {
        self.config.kind
    }

    /// Hex SHA-256 of the config text.
    pub fn config_hash(&self) -> String {
        Sha256::digest(self.text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn err(&self, section: &str, key: &str, message: impl Into<String>) -> ScenarioError {
        ScenarioError::Config {
            line: key_line(&self.text, section, key).or_else(|| section_line(&self.text, section)),
            message: message.into(),
        }
    }

    fn param_err(&self, section: &str, e: Error) -> ScenarioError {
        match e {
            Error::InvalidParameter { name, reason } => {
                let key = match name {
                    "area" if self.config.envelope.area.is_none() => "area_pi",
                    "period" if self.config.envelope.period.is_none() => "rate_mhz",
                    n => n,
                };
                self.err(section, key, format!("{name}: {reason}"))
            }
            Error::NotNormalizable(m) | Error::Unsupported(m) => self.err(section, "shape", m),
            e => e.into(),
        }
    }

    fn validate(&self) -> Result<()> {
        let c = &self.config;
        let e = &c.envelope;
        let g = &c.grids;
        let positive = |section: &str, key: &str, v: Option<f64>| -> Result<()> {
            match v {
                Some(x) if !(x > 0.0 && x.is_finite()) => Err(self.err(section, key, format!("{key} must be positive, got {x}"))),
                _ => Ok(()),
            }
        };
        let grid = |key: &str, v: &Option<Vec<f64>>, required: bool| -> Result<()> {
            match v {
                None if required => Err(self.err("grids", key, format!("{key} is required for this scenario kind"))),
                Some(v) if v.is_empty() => Err(self.err("grids", key, format!("{key} must not be empty"))),
                Some(v) => match v.iter().find(|x| !(**x > 0.0 && x.is_finite())) {
                    Some(x) => Err(self.err("grids", key, format!("{key} entries must be positive, got {x}"))),
                    None => Ok(()),
                },
                None => Ok(()),
            }
        };

        if c.threads == Some(0) {
            return Err(self.err("", "threads", "threads must be positive"));
        }
        if c.emitter.model == EmitterKind::VType && c.emitter.t2.is_some() {
            return Err(self.err("emitter", "t2", "t2 is only supported for the two_level model"));
        }
        if e.area.is_some() && e.area_pi.is_some() {
            return Err(self.err("envelope", "area_pi", "give either area or area_pi, not both"));
        }
        if e.period.is_some() && e.rate_mhz.is_some() {
            return Err(self.err("envelope", "rate_mhz", "give either period or rate_mhz, not both"));
        }
        positive("envelope", "rate_mhz", e.rate_mhz)?;
        if e.chirp.is_some() && e.shape != PulseShape::ChirpedFlat {
            return Err(self.err("envelope", "chirp", "chirp only applies to the chirpedflat shape"));
        }
        for (key, v) in [
            ("t_span", g.t_span),
            ("h", g.h),
            ("fit_start", g.fit_start.map(|x| x + 1.0)),
            ("tau_max", g.tau_max.map(|x| x + 1.0)),
            ("irf_fwhm", g.irf_fwhm),
            ("spectrum_max_ghz", g.spectrum_max_ghz),
            ("noise", g.noise.map(|x| x + 1.0)),
        ] {
            positive("grids", key, v)?;
        }
        if g.n_side == Some(0) {
            return Err(self.err("grids", "n_side", "n_side must be at least 1"));
        }
        if g.jump_trajectories == Some(0) {
            return Err(self.err("grids", "jump_trajectories", "jump_trajectories must be at least 1"));
        }
        if matches!(g.samples, Some(n) if n < 10) {
            return Err(self.err("grids", "samples", "samples must be at least 10"));
        }
        if matches!(g.spectrum_points, Some(n) if n < 3) {
            return Err(self.err("grids", "spectrum_points", "spectrum_points must be at least 3"));
        }

        let kind = c.kind;
        grid("widths", &g.widths, kind == ScenarioKind::WidthSweep)?;
        grid("t1_values", &g.t1_values, false)?;
        grid("frequencies_mhz", &g.frequencies_mhz, kind == ScenarioKind::FrequencySweep)?;

        let model = self.model(c.emitter.t1).map_err(|err| self.param_err("emitter", err))?;
        let env = self
            .envelope(e.width, self.period(), 1.0)
            .and_then(|env| env.calibrate())
            .map_err(|err| self.param_err("envelope", err))?;

        let needs_period = matches!(kind, ScenarioKind::Hbt | ScenarioKind::WidthSweep);
        if needs_period && env.period().is_none() {
            return Err(self.err("envelope", "period", "this scenario kind needs a period or rate_mhz"));
        }
        if let Some(s) = &c.sweep {
            if kind != ScenarioKind::Hbt {
                return Err(self.err("sweep", "axis", "a [sweep] section is only supported with kind = \"hbt\""));
            }
            if s.values.is_empty() {
                return Err(self.err("sweep", "values", "values must not be empty"));
            }
            if let Some(x) = s.values.iter().find(|x| !(**x > 0.0 && x.is_finite())) {
                return Err(self.err("sweep", "values", format!("values must be positive, got {x}")));
            }
        }
        if c.histogram.is_some() && kind != ScenarioKind::Hbt {
            return Err(self.err("histogram", "path", "histogram ingestion is only supported with kind = \"hbt\""));
        }
        if let Some(hist) = &c.histogram {
            positive("histogram", "period", hist.period)?;
            positive("histogram", "acquisition_s", hist.acquisition_s)?;
        }
        if g.jump_trajectories.is_some() {
            if kind != ScenarioKind::Hbt {
                return Err(self.err("grids", "jump_trajectories", "the jump oracle runs only with kind = \"hbt\""));
            }
            if env.extinction_floor() != 0.0 {
                return Err(self.err(
                    "envelope",
                    "extinction_floor",
                    "the jump oracle needs extinction_floor = 0",
                ));
            }
        }
        match kind {
            ScenarioKind::RabiScan => {
                if model.kind() != EmitterKind::TwoLevel {
                    return Err(self.err("emitter", "model", "rabi_scan needs the two_level model"));
                }
                if !matches!(e.shape, PulseShape::Rectangular | PulseShape::ChirpedFlat) {
                    return Err(self.err("envelope", "shape", "rabi_scan needs a rectangular or chirpedflat drive"));
                }
                if env.period().is_some() {
                    return Err(self.err("envelope", "period", "rabi_scan uses a single long pulse"));
                }
                if matches!(g.t_span, Some(t) if t > e.width) {
                    return Err(self.err("grids", "t_span", "t_span must not exceed the pulse width"));
                }
            }
            ScenarioKind::Visibility if c.visibility.is_none() => {
                return Err(self.err("", "kind", "kind = \"visibility\" needs a [visibility] section"));
            }
            ScenarioKind::Visibility => {
                let v = c.visibility.as_ref().unwrap();
                if !(v.g2_perp > 0.0) {
                    return Err(self.err("visibility", "g2_perp", "g2_perp must be positive"));
                }
                for (key, s) in [
                    ("g2_perp_sigma", v.g2_perp_sigma),
                    ("g2_par_sigma", v.g2_par_sigma),
                    ("g2_hbt_sigma", v.g2_hbt_sigma),
                ] {
                    if !(s >= 0.0 && s.is_finite()) {
                        return Err(self.err("visibility", key, format!("{key} must be >= 0")));
                    }
                }
            }
            ScenarioKind::FrequencySweep => {
                if let Some(eff) = &c.efficiency {
                    if !(eff.overall > 0.0 && eff.overall <= 1.0) {
                        return Err(self.err("efficiency", "overall", "overall must lie in (0, 1]"));
                    }
                    positive("efficiency", "trigger_mhz", eff.trigger_mhz)?;
                    self.chain().map_err(|err| self.param_err("efficiency", err))?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn period(&self) -> Option<f64> {
        let e = &self.config.envelope;
        e.period.or(e.rate_mhz.map(|f| 1e3 / f))
    }

    fn seed(&self, opts: &RunOptions) -> u64 {
        opts.seed.unwrap_or(self.config.seed)
    }

    fn model(&self, t1: f64) -> crate::Result<EmitterModel> {
        let e = &self.config.emitter;
        let model = match e.model {
            EmitterKind::TwoLevel => {
                let ratio = e.t2.map_or(2.0, |t2| t2 / e.t1);
                EmitterModel::two_level(t1, ratio * t1)?
            }
            EmitterKind::VType => {
                let mut m = EmitterModel::vtype(t1, 2.0 * PI * e.splitting_ghz)?;
                if let Some(theta) = e.polarization {
                    m = m.with_polarization(theta);
                }
                if let Some(phi) = e.detection_angle {
                    m = m.with_detection_angle(phi);
                }
                m
            }
        };
        Ok(model.with_detuning(e.detuning))
    }

    fn envelope(&self, width: f64, period: Option<f64>, area_scale: f64) -> crate::Result<DriveEnvelope> {
        let e = &self.config.envelope;
        let area = e.area.or(e.area_pi.map(|a| a * PI)).unwrap_or(PI) * area_scale;
        let mut env = DriveEnvelope::new(e.shape, width, area)?;
        if let Some(s) = e.lognormal_shape {
            env = env.with_lognormal_shape(s)?;
        }
        if let Some(c) = e.chirp {
            env = env.with_chirp(c);
        }
        if let Some(p) = period {
            env = env.with_period(p)?;
        }
        if let Some(p) = &e.pattern {
            env = env.with_pattern(p.clone())?;
        }
        env = env.with_extinction_floor(e.extinction_floor.unwrap_or(DEFAULT_EXTINCTION_FLOOR))?;
        if let Some(d) = e.delay {
            env = env.with_delay(d);
        }
        Ok(env)
    }

    fn chain(&self) -> crate::Result<EfficiencyChain> {
        match self.config.efficiency.as_ref().and_then(|e| e.stages.as_ref()) {
            Some(stages) => EfficiencyChain::new(stages.iter().map(|s| (s.name.clone(), s.value)).collect()),
            None => Ok(EfficiencyChain::reference()),
        }
    }

    fn n_side(&self) -> usize {
        self.config.grids.n_side.unwrap_or(DEFAULT_N_SIDE)
    }

    fn correlation_options(&self, h: Option<f64>) -> CorrelationOptions {
        CorrelationOptions {
            h,
            warmup_periods: self.config.grids.warmup_periods.unwrap_or(DEFAULT_WARMUP_PERIODS),
            n_side: self.n_side(),
            rho0: None,
        }
    }

    /// Peak-integrated G²(0) and the quasi-CW flag for one drive setting.
    ///
    /// With `like_base` the delay grid and step follow the hbt settings, so a
    /// point reproduces a direct run bit for bit.
    fn g2_point(&self, model: &EmitterModel, env: &DriveEnvelope, like_base: bool) -> crate::Result<(f64, bool)> {
        let (tau_max, h) = match (like_base, env.period()) {
            (true, Some(t)) => (self.config.grids.tau_max.unwrap_or(1.5 * t), self.config.grids.h),
            _ => (0.0, None),
        };
        let rec = pulsed_correlation(model, env, tau_max, &self.correlation_options(h))?;
        let peaks = rec.peaks.expect("pulsed records carry a peak table");
        Ok((peaks.g2_zero(), peaks.quasi_cw))
    }

    fn sweep_point(&self, axis: SweepAxis, value: f64, like_base: bool) -> crate::Result<(f64, bool)> {
        let c = &self.config;
        let (mut t1, mut width, mut period, mut scale) = (c.emitter.t1, c.envelope.width, self.period(), 1.0);
        match axis {
            SweepAxis::Width => width = value,
            SweepAxis::Frequency => period = Some(1e3 / value),
            SweepAxis::Power => scale = value.sqrt(),
            SweepAxis::T1 => t1 = value,
        }
        let model = self.model(t1)?;
        let env = self.envelope(width, period, scale)?;
        self.g2_point(&model, &env, like_base)
    }

    /// Runs the scenario inside a dedicated thread pool and writes its outputs.
    pub fn run(&self, opts: &RunOptions) -> Result<RunReport> {
        let threads = resolve_threads(opts.threads, None, self.config.threads)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| ScenarioError::Io(format!("thread pool: {e}")))?;
        let dir = match (&opts.out, &self.config.output.dir) {
            (Some(d), _) => d.clone(),
            (None, Some(d)) => self.base_dir.join(d),
            (None, None) => self.base_dir.join("out"),
        };
        fs::create_dir_all(&dir).map_err(|e| ScenarioError::Io(format!("{}: {e}", dir.display())))?;
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let clock = Instant::now();
        let mut out = Outputs {
            dir: dir.clone(),
            files: Vec::new(),
            summary: vec![format!("scenario: {}", kind_name(self.config.kind))],
        };
        pool.install(|| self.dispatch(opts, &mut out))?;
        let runtime = clock.elapsed().as_secs_f64();

        let seed = self.seed(opts);
        out.summary.push(format!("seed: {seed}"));
        out.summary.push(format!("threads: {threads}"));
        out.summary.push(format!("runtime_s: {runtime:.3}"));
        let manifest = Manifest {
            program: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            kind: self.config.kind,
            config_sha256: self.config_hash(),
            seed,
            threads,
            started_unix: started,
            runtime_s: runtime,
            outputs: out.files.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| ScenarioError::Io(e.to_string()))?;
        fs::write(dir.join("manifest.toml"), text)?;
        let mut summary = out.summary.join("\n");
        summary.push('\n');
        fs::write(dir.join("summary.txt"), summary)?;
        out.files.push("manifest.toml".into());
        out.files.push("summary.txt".into());
        Ok(RunReport {
            dir,
            outputs: out.files,
            summary: out.summary,
            threads,
        })
    }

    fn dispatch(&self, opts: &RunOptions, out: &mut Outputs) -> Result<()> {
        match self.config.kind {
            ScenarioKind::Decay => self.run_decay(out),
            ScenarioKind::RabiScan => self.run_rabi(opts, out),
            ScenarioKind::Hbt => self.run_hbt(opts, out),
            ScenarioKind::WidthSweep => self.run_width_sweep(out),
            ScenarioKind::FrequencySweep => self.run_frequency_sweep(out),
            ScenarioKind::Visibility => self.run_visibility(out),
            ScenarioKind::Spectrum => self.run_spectrum(out),
        }
    }

    fn base(&self) -> crate::Result<(EmitterModel, DriveEnvelope)> {
        let c = &self.config;
        Ok((self.model(c.emitter.t1)?, self.envelope(c.envelope.width, self.period(), 1.0)?.calibrate()?))
    }

    fn run_decay(&self, out: &mut Outputs) -> Result<()> {
        let (model, env) = self.base()?;
        let g = &self.config.grids;
        let pulse_end = env.pulse_window(0).1;
        let h = g.h.unwrap_or_else(|| default_step(&model, &env));
        let t_span = g.t_span.unwrap_or(pulse_end + 8.0 * model.t1());
        let traj = evolve(&model, &env, &DensityMatrix::ground(model.dim()), t_span, h)?;
        traj.write_csv(out.create("trajectory.csv")?)?;
        let fit_start = g.fit_start.unwrap_or(pulse_end);
        let fit = fit_exponential_trajectory(&traj, fit_start, &FitOptions::default())?;
        fit.write_csv(out.create("fit.csv")?)?;
        out.summary.push(format!(
            "fitted T1: {} +/- {} ns (converged: {})",
            fit.values[0], fit.errors[0], fit.converged
        ));
        out.summary.push(format!("max trace drift: {:e}", traj.max_trace_drift));
        if model.kind() == EmitterKind::VType {
            let beat = beat_frequency_trajectory(&traj, fit_start)?;
            let mut w = out.create("beat.csv")?;
            writeln!(w, "frequency_ghz,peak_to_median")?;
            let f = beat.frequency_ghz.map_or(String::new(), |f| f.to_string());
            writeln!(w, "{f},{}", beat.peak_to_median)?;
            out.summary.push(match beat.frequency_ghz {
                Some(f) => format!("beat frequency: {f} GHz"),
                None => "beat frequency: none found".into(),
            });
        }
        Ok(())
    }

    fn run_rabi(&self, opts: &RunOptions, out: &mut Outputs) -> Result<()> {
        let (model, env) = self.base()?;
        let g = &self.config.grids;
        let h = g.h.unwrap_or_else(|| default_step(&model, &env));
        let t_span = g.t_span.unwrap_or(env.width());
        let traj = evolve(&model, &env, &DensityMatrix::ground(2), t_span, h)?;
        let pop = traj.population(1);
        let n = g.samples.unwrap_or(400).min(pop.len());
        let idx: Vec<usize> = (0..n)
            .map(|k| ((k as f64) * (pop.len() - 1) as f64 / (n - 1) as f64).round() as usize)
            .collect();
        let t: Vec<f64> = idx.iter().map(|&i| traj.times[i]).collect();
        let mut y: Vec<f64> = idx.iter().map(|&i| pop[i]).collect();
        let noise = g.noise.unwrap_or(0.0);
        if noise > 0.0 {
            let sigma = noise * y.iter().copied().fold(0.0, f64::max);
            let dist = Normal::new(0.0, sigma).map_err(|e| ScenarioError::Numerical(Error::param("noise", e.to_string())))?;
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed(opts));
            y.iter_mut().for_each(|v| *v += dist.sample(&mut rng));
        }
        let chirp = (env.shape() == PulseShape::ChirpedFlat).then(|| env.chirp());
        let t1_fixed = (!g.free_t1).then(|| model.t1());
        let fit = fit_rabi(&t, &y, t1_fixed, chirp, &FitOptions::default())?;
        fit.write_csv(out.create("fit.csv")?)?;
        let om = fit.value("omega").unwrap_or(f64::NAN);
        let t2 = fit.value("t2").unwrap_or(f64::NAN);
        let t1 = fit.value("t1").unwrap_or(model.t1());
        let mut w = out.create("rabi.csv")?;
        writeln!(w, "time_ns,population,fit")?;
        for (x, v) in t.iter().zip(&y) {
            let o = chirp.map_or(om, |c| chirped_omega(om, c, *x));
            writeln!(w, "{x},{v},{}", rabi_population(*x, o, t1, t2))?;
        }
        let (r, s) = dephasing_ratio(&fit, t1_fixed);
        out.summary.push(format!("fitted Omega: {om} rad/ns"));
        out.summary.push(format!("T2/T1: {r} +/- {s} (converged: {})", fit.converged));
        Ok(())
    }

    fn run_hbt(&self, opts: &RunOptions, out: &mut Outputs) -> Result<()> {
        let (model, env) = self.base()?;
        let g = &self.config.grids;
        let period = env.period().expect("validated");
        let tau_max = g.tau_max.unwrap_or(1.5 * period);
        let rec = pulsed_correlation(&model, &env, tau_max, &self.correlation_options(g.h))?;
        rec.write_csv(out.create("g2.csv")?)?;
        let peaks = rec.peaks.as_ref().expect("pulsed records carry a peak table");
        peaks.write_csv(out.create("peaks.csv")?)?;
        out.summary.push(format!("G2(0): {}", peaks.g2_zero()));
        out.summary.push(format!("g2 at tau = 0: {}", continuous_g2_center(&rec)));
        if peaks.quasi_cw {
            out.summary.push("warning: quasi-CW regime, peaks overlap".into());
        }
        if let Some(fwhm) = g.irf_fwhm {
            let conv = convolve_irf(&rec, fwhm)?;
            conv.write_csv(out.create("g2_irf.csv")?)?;
            out.summary.push(format!("g2 at tau = 0 after IRF ({fwhm} ns): {}", conv.g2_at(0.0)));
        }
        if let Some(hist) = &self.config.histogram {
            let path = self.base_dir.join(&hist.path);
            let file = File::open(&path).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
            let mut data = HistogramData::from_csv(BufReader::new(file)).map_err(|e| match e {
                Error::Parse { line, reason } => ScenarioError::Config {
                    line: Some(line),
                    message: format!("{}: {reason}", path.display()),
                },
                e => e.into(),
            })?;
            data.acquisition_time = hist.acquisition_s;
            let table = normalize_histogram(&data, hist.period.unwrap_or(period), self.n_side())?;
            table.write_csv(out.create("histogram_peaks.csv")?)?;
            out.summary.push(format!(
                "histogram G2(0): {} +/- {}",
                table.g2_zero(),
                table.get(0).map_or(f64::NAN, |p| p.sigma)
            ));
        }
        if let Some(n) = g.jump_trajectories {
            let est = jump_oracle(&model, &env, n, self.seed(opts))?;
            let z = (est.g2 - peaks.g2_zero()) / est.sigma;
            let mut w = out.create("jump.csv")?;
            writeln!(w, "key,value")?;
            writeln!(w, "n_trajectories,{}", est.n_trajectories)?;
            writeln!(w, "g2_zero,{}", est.g2)?;
            writeln!(w, "sigma,{}", est.sigma)?;
            writeln!(w, "mean_photons,{}", est.mean_photons)?;
            writeln!(w, "undefined,{}", est.undefined)?;
            writeln!(w, "regression_g2_zero,{}", peaks.g2_zero())?;
            writeln!(w, "z_score,{z}")?;
            out.summary.push(format!("jump G2(0): {} +/- {} (z = {z:.2})", est.g2, est.sigma));
        }
        if let Some(sweep) = &self.config.sweep {
            let values = sorted(&sweep.values);
            let rows: Vec<_> = values.par_iter().map(|&v| self.sweep_point(sweep.axis, v, true)).collect();
            let mut w = out.create("sweep.csv")?;
            writeln!(w, "{},g2_zero,quasi_cw,status", sweep.axis.column())?;
            let mut failed = 0;
            for (v, row) in values.iter().zip(&rows) {
                failed += row.is_err() as usize;
                writeln!(w, "{v},{}", point_fields(row))?;
            }
            out.summary.push(format!("sweep: {} points, {failed} failed", values.len()));
        }
        Ok(())
    }

    fn run_width_sweep(&self, out: &mut Outputs) -> Result<()> {
        let c = &self.config;
        let widths = sorted(c.grids.widths.as_ref().expect("validated"));
        let t1s = sorted(c.grids.t1_values.as_deref().unwrap_or(&[c.emitter.t1]));
        let points: Vec<(f64, f64)> = t1s.iter().flat_map(|&t1| widths.iter().map(move |&w| (t1, w))).collect();
        let period = self.period();
        let rows: Vec<_> = points
            .par_iter()
            .map(|&(t1, w)| {
                let model = self.model(t1)?;
                let env = self.envelope(w, period, 1.0)?;
                self.g2_point(&model, &env, false)
            })
            .collect();
        let mut f = out.create("width_sweep.csv")?;
        writeln!(f, "t1_ns,width_ns,g2_zero,quasi_cw,status")?;
        for ((t1, w), row) in points.iter().zip(&rows) {
            writeln!(f, "{t1},{w},{}", point_fields(row))?;
        }
        for &t1 in &t1s {
            let vals: Vec<String> = points
                .iter()
                .zip(&rows)
                .filter(|(p, _)| p.0 == t1)
                .map(|(_, r)| r.as_ref().map_or("failed".into(), |v| format!("{:.4}", v.0)))
                .collect();
            out.summary.push(format!("T1 = {t1} ns: G2(0) = [{}]", vals.join(", ")));
        }
        Ok(())
    }

    fn run_frequency_sweep(&self, out: &mut Outputs) -> Result<()> {
        let c = &self.config;
        let freqs = sorted(c.grids.frequencies_mhz.as_ref().expect("validated"));
        let overall = c.efficiency.as_ref().map(|e| e.overall);
        let rows: Vec<_> = freqs.par_iter().map(|&f| self.sweep_point(SweepAxis::Frequency, f, false)).collect();
        let mut w = out.create("frequency_sweep.csv")?;
        writeln!(w, "frequency_mhz,period_ns,g2_zero,quasi_cw,detected_mhz,single_photon_mhz,status")?;
        for (f, row) in freqs.iter().zip(&rows) {
            let period = 1e3 / f;
            let (det, single) = match (overall, row) {
                (Some(eta), Ok((g2, _))) => {
                    let d = eta * f;
                    (d.to_string(), (d * (1.0 - 0.5 * g2)).to_string())
                }
                (Some(eta), Err(_)) => ((eta * f).to_string(), String::new()),
                (None, _) => (String::new(), String::new()),
            };
            let (g2, qcw, status) = match row {
                Ok((g2, q)) => (g2.to_string(), q.to_string(), "ok".to_string()),
                Err(e) => (String::new(), String::new(), csv_safe(&e.to_string())),
            };
            writeln!(w, "{f},{period},{g2},{qcw},{det},{single},{status}")?;
        }
        if let Some(eff) = &c.efficiency {
            let trigger = eff.trigger_mhz.unwrap_or(*freqs.last().unwrap());
            let g2 = match freqs.iter().position(|&f| f == trigger) {
                Some(i) => rows[i].clone(),
                None => self.sweep_point(SweepAxis::Frequency, trigger, false),
            }?
            .0;
            let report = efficiency_report(&self.chain()?, trigger, eff.overall * trigger, g2)?;
            report.write_csv(out.create("efficiency.csv")?)?;
            out.summary.push(format!(
                "at {trigger} MHz: detected {} MHz, single-photon {} MHz, extraction {}",
                report.detected_mhz, report.single_photon_mhz, report.extraction
            ));
        }
        let failed = rows.iter().filter(|r| r.is_err()).count();
        out.summary.push(format!("frequency sweep: {} points, {failed} failed", freqs.len()));
        Ok(())
    }

    fn run_visibility(&self, out: &mut Outputs) -> Result<()> {
        let v = self.config.visibility.as_ref().expect("validated");
        let hbt = v.g2_hbt.map(|g| Measured::new(g, v.g2_hbt_sigma));
        let vis = tpi_visibility(
            Measured::new(v.g2_perp, v.g2_perp_sigma),
            Measured::new(v.g2_par, v.g2_par_sigma),
            hbt,
        )?;
        let mut w = out.create("visibility.csv")?;
        writeln!(w, "key,value")?;
        writeln!(w, "g2_perp,{}", v.g2_perp)?;
        writeln!(w, "g2_par,{}", v.g2_par)?;
        if let Some(g) = v.g2_hbt {
            writeln!(w, "g2_hbt,{g}")?;
        }
        writeln!(w, "raw,{}", vis.raw.value)?;
        writeln!(w, "raw_sigma,{}", vis.raw.sigma)?;
        out.summary.push(format!("raw visibility: {} +/- {}", vis.raw.value, vis.raw.sigma));
        if let Some(cv) = vis.corrected {
            writeln!(w, "corrected,{}", cv.value)?;
            writeln!(w, "corrected_sigma,{}", cv.sigma)?;
            out.summary.push(format!("corrected visibility: {} +/- {}", cv.value, cv.sigma));
        }
        Ok(())
    }

    fn run_spectrum(&self, out: &mut Outputs) -> Result<()> {
        let (_, env) = self.base()?;
        let g = &self.config.grids;
        let fmax = g.spectrum_max_ghz.unwrap_or(20.0);
        let n = g.spectrum_points.unwrap_or(801);
        let grid: Vec<f64> = (0..n).map(|k| -fmax + 2.0 * fmax * k as f64 / (n - 1) as f64).collect();
        let spectrum = pulse_spectrum(&env, &grid)?;
        let mut w = out.create("spectrum.csv")?;
        writeln!(w, "frequency_ghz,intensity")?;
        for (f, i) in spectrum.frequencies.iter().zip(&spectrum.intensity) {
            writeln!(w, "{f},{i}")?;
        }
        out.summary.push(format!("spectral FWHM: {} GHz", spectrum.fwhm_ghz));
        Ok(())
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    program: &'a str,
    version: &'a str,
    kind: ScenarioKind,
    config_sha256: String,
    seed: u64,
    threads: usize,
    started_unix: u64,
    runtime_s: f64,
    outputs: Vec<String>,
}

struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
    summary: Vec<String>,
}

impl Outputs {
    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let f = File::create(&path).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
        self.files.push(name.to_string());
        Ok(BufWriter::new(f))
    }
}

fn kind_name(kind: ScenarioKind) -> String {
    toml::Value::try_from(kind).map_or_else(|_| format!("{kind:?}"), |v| v.as_str().unwrap_or_default().to_string())
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn csv_safe(s: &str) -> String {
    s.replace([',', '\n', '\r'], ";")
}

fn point_fields(row: &crate::Result<(f64, bool)>) -> String {
    match row {
        Ok((g2, q)) => format!("{g2},{q},ok"),
        Err(e) => format!(",,{}", csv_safe(&e.to_string())),
    }
}

fn line_at(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn section_line(text: &str, section: &str) -> Option<usize> {
    if section.is_empty() {
        return None;
    }
    text.lines()
        .position(|l| l.trim().trim_start_matches('[').trim_end_matches(']').trim() == section && l.trim().starts_with('['))
        .map(|i| i + 1)
}

/// 1-based line of `key = …` inside `[section]` (top level for an empty section).
fn key_line(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let l = line.trim();
        if l.starts_with('[') {
            current = l.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            continue;
        }
        if current == section {
            if let Some(rest) = l.strip_prefix(key) {
                if rest.trim_start().starts_with('=') {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Scenario> {
        Scenario::parse(text, Path::new("."))
    }

    fn config_line(r: Result<Scenario>) -> Option<usize> {
        match r {
            Err(ScenarioError::Config { line, .. }) => line,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_width_grid_is_a_config_error() {
        let text = "kind = \"width_sweep\"\n\n[envelope]\nrate_mhz = 80\n\n[grids]\nwidths = []\n";
        let err = parse(text).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert_eq!(config_line(parse(text)), Some(7));
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let text = "kind = \"decay\"\n[emitter]\nt1 = 0.8\nlifetime = 3\n";
        assert_eq!(config_line(parse(text)), Some(4));
    }

    #[test]
    fn invalid_physics_points_at_the_key() {
        let text = "kind = \"decay\"\n[emitter]\nt1 = 0.8\nt2 = 5.0\n";
        let line = config_line(parse(text));
        assert!(line == Some(3) || line == Some(4), "{line:?}");
        let text = "kind = \"decay\"\n[envelope]\nwidth = -1\n";
        assert_eq!(config_line(parse(text)), Some(3));
    }

    #[test]
    fn kind_specific_requirements() {
        assert!(parse("kind = \"hbt\"\n").is_err());
        assert!(parse("kind = \"visibility\"\n").is_err());
        assert!(parse("kind = \"hbt\"\n[envelope]\nrate_mhz = 80\n").is_ok());
        let text = "kind = \"hbt\"\n[envelope]\nrate_mhz = 80\n[grids]\njump_trajectories = 10\n";
        assert_eq!(config_line(parse(text)), Some(2));
    }

    #[test]
    fn thread_precedence() {
        assert_eq!(resolve_threads(Some(3), Some("5"), Some(7)).unwrap(), 3);
        assert_eq!(resolve_threads(None, Some("5"), Some(7)).unwrap(), 5);
        assert_eq!(resolve_threads(None, None, Some(7)).unwrap(), 7);
        assert!(resolve_threads(None, None, None).unwrap() >= 1);
        assert_eq!(resolve_threads(None, Some("x"), None).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn hash_is_hex_sha256() {
        let s = parse("kind = \"spectrum\"\n").unwrap();
        let h = s.config_hash();
        assert_eq!(h.len(), 64);
        assert!(h.chars().all(|c| c.is_ascii_hexdigit()));
    }
}
