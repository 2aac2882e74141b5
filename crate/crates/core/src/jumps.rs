//! Monte Carlo quantum-jump estimate of the zero-delay peak G²(0).
//!
//! Each trajectory starts in the ground state and covers one drive period
//! (or one pulse plus its decay for a single pulse). The conditional state
//! evolves under `ψ' = (iH − ½ΣΓC†C)ψ`, consistent with the master equation's
//! commutator sign, and jumps when its squared norm falls below a uniform
//! threshold. Only jumps through the detection dipole are counted; the
//! estimate is `⟨n(n−1)⟩/⟨n⟩²` over trajectories.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::drive::{envelope_at, DriveEnvelope};
use crate::emitter::EmitterModel;
use crate::error::{Error, Result};
use crate::integrator::{calibrated, default_step};
use crate::linalg::{rk4_step_matrix, CMatrix, SuperOp, C64, ZERO};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpEstimate {
    /// NaN when no photon was detected in any trajectory.
    pub g2: f64,
    /// Delta-method 1σ of `g2`.
    pub sigma: f64,
    pub mean_photons: f64,
    pub n_trajectories: u64,
    /// Set when `g2` is undefined (zero mean photon number).
    pub undefined: bool,
}

struct Channel {
    rate: f64,
    op: SuperOp,
    detected: bool,
}

fn to_op(m: &CMatrix) -> SuperOp {
    let d = m.nrows();
    SuperOp::from_columns(d, |j| (0..d).map(|i| m[(i, j)]).collect())
}

/// Radiative channels re-expressed so that the detection dipole is one of
/// them. Requires either equal dipole rates or a detector aligned with one
/// dipole.
fn channels(model: &EmitterModel) -> Result<Vec<Channel>> {
    let d = model.dim();
    let det = model.detection_operator();
    let mut out = Vec::new();
    let mut radiative = Vec::new();
    for (rate, c) in model.collapse_channels() {
        let diag = (0..d).any(|i| c[(i, i)] != ZERO);
        if diag {
            out.push(Channel {
                rate,
                op: to_op(&c),
                detected: false,
            });
        } else {
            radiative.push((rate, c));
        }
    }
    match radiative.len() {
        0 => {}
        1 => {
            let (rate, c) = &radiative[0];
            let overlap = (c.adjoint() * &det).trace().norm();
            if (overlap - 1.0).abs() > 1e-12 && overlap > 1e-12 {
                return Err(Error::Unsupported("detector not aligned with the radiative dipole".into()));
            }
            out.push(Channel {
                rate: *rate,
                op: to_op(c),
                detected: overlap > 0.5,
            });
        }
        2 => {
            let (g1, c1) = &radiative[0];
            let (g2, c2) = &radiative[1];
            let a = (c1.adjoint() * &det).trace();
            let b = (c2.adjoint() * &det).trace();
            if (g1 - g2).abs() <= 1e-12 * g1.max(*g2) {
                // equal rates: any orthonormal recombination leaves the dissipator unchanged
                let perp = c1 * (-b.conj()) + c2 * a.conj();
                out.push(Channel {
                    rate: *g1,
                    op: to_op(&det),
                    detected: true,
                });
                out.push(Channel {
                    rate: *g1,
                    op: to_op(&perp),
                    detected: false,
                });
            } else if a.norm() < 1e-12 || b.norm() < 1e-12 {
                out.push(Channel {
                    rate: *g1,
                    op: to_op(c1),
                    detected: a.norm() > 0.5,
                });
                out.push(Channel {
                    rate: *g2,
                    op: to_op(c2),
                    detected: b.norm() > 0.5,
                });
            } else {
                return Err(Error::Unsupported(
                    "unequal dipole rates with a detector mixing both dipoles cannot be unravelled per channel".into(),
                ));
            }
        }
        _ => return Err(Error::Unsupported("more than two radiative channels".into())),
    }
    Ok(out)
}

struct Propagator<'a> {
    a0: SuperOp,
    a1: SuperOp,
    env: &'a DriveEnvelope,
    /// (start time, step, matrix) for every grid step
    steps: Vec<(f64, f64, SuperOp)>,
    /// Index of the first step after which Ω stays zero.
    quiet_from: usize,
}

impl Propagator<'_> {
    fn partial(&self, psi: &[C64], t: f64, dt: f64) -> Vec<C64> {
        let om = [
            envelope_at(self.env, t),
            envelope_at(self.env, t + 0.5 * dt),
            envelope_at(self.env, t + dt),
        ];
        let m = rk4_step_matrix(&self.a0, &self.a1, om, dt);
        let mut out = vec![ZERO; psi.len()];
        m.apply(psi, &mut out);
        out
    }
}

fn norm2(psi: &[C64]) -> f64 {
    psi.iter().map(|z| z.norm_sqr()).sum()
}

fn trajectory(prop: &Propagator, chans: &[Channel], d: usize, rng: &mut ChaCha8Rng) -> u64 {
    let mut psi = vec![ZERO; d];
    psi[0] = C64::from(1.0);
    let mut threshold: f64 = rng.random();
    let mut count = 0u64;
    let mut scratch = vec![ZERO; d];
    for (k, (t0, h, m)) in prop.steps.iter().enumerate() {
        let mut next = vec![ZERO; d];
        m.apply(&psi, &mut next);
        if norm2(&next) > threshold {
            psi = next;
        } else {
            let mut t = *t0;
            let mut rem = *h;
            loop {
                let cand = prop.partial(&psi, t, rem);
                if norm2(&cand) > threshold {
                    psi = cand;
                    break;
                }
                let (mut lo, mut hi) = (0.0, rem);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if norm2(&prop.partial(&psi, t, mid)) > threshold {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                psi = prop.partial(&psi, t, hi);
                let weights: Vec<f64> = chans
                    .iter()
                    .map(|c| {
                        c.op.apply(&psi, &mut scratch);
                        c.rate * norm2(&scratch)
                    })
                    .collect();
                let total: f64 = weights.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut chosen = chans.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    if pick < *w {
                        chosen = i;
                        break;
                    }
                    pick -= w;
                }
                chans[chosen].op.apply(&psi, &mut scratch);
                let n = norm2(&scratch).sqrt();
                psi.iter_mut().zip(&scratch).for_each(|(p, s)| *p = s / n);
                if chans[chosen].detected {
                    count += 1;
                }
                threshold = rng.random();
                t += hi;
                rem -= hi;
                if rem <= 0.0 {
                    break;
                }
            }
        }
        if k + 1 >= prop.quiet_from {
            let excited: f64 = psi[1..].iter().map(|z| z.norm_sqr()).sum();
            if excited < 1e-14 * norm2(&psi) {
                break;
            }
        }
    }
    count
}

/// Jump-unravelling estimate of G²(0) from `n_trajectories` seeded
/// trajectories. Needs a zero extinction floor so that periods decouple.
pub fn jump_oracle(model: &EmitterModel, env: &DriveEnvelope, n_trajectories: u64, seed: u64) -> Result<JumpEstimate> {
    if n_trajectories == 0 {
        return Err(Error::param("n_trajectories", "must be at least 1"));
    }
    if env.extinction_floor() != 0.0 {
        return Err(Error::Unsupported("jump oracle needs a zero extinction floor".into()));
    }
    let env = calibrated(env)?;
    let chans = channels(model)?;
    let d = model.dim();

    let k = chans.iter().fold(CMatrix::zeros(d, d), |acc, c| {
        let m = CMatrix::from_fn(d, d, |i, j| c.op.get(i, j));
        acc + m.adjoint() * m * C64::from(c.rate)
    });
    let i = C64::new(0.0, 1.0);
    let a_of = |om: f64| model.hamiltonian(om) * i - &k * C64::from(0.5);
    let a0 = a_of(0.0);
    let a1 = a_of(1.0) - &a0;
    let (a0, a1) = (to_op(&a0), to_op(&a1));

    let h = default_step(model, &env);
    let (_, pulse_end) = env.pulse_window(0);
    let fine_steps = (pulse_end / h).ceil().max(1.0) as usize;
    let fine_end = fine_steps as f64 * h;
    let t_end = env.period().unwrap_or(fine_end + 50.0 * model.t1()).max(fine_end);
    let coarse = model.t1() / 100.0;
    let mut steps = Vec::new();
    for s in 0..fine_steps {
        let t = s as f64 * h;
        let om = [envelope_at(&env, t), envelope_at(&env, t + 0.5 * h), envelope_at(&env, t + h)];
        steps.push((t, h, rk4_step_matrix(&a0, &a1, om, h)));
    }
    let quiet = rk4_step_matrix(&a0, &a1, [0.0; 3], coarse);
    let mut t = fine_end;
    while t < t_end - 1e-12 {
        let dt = coarse.min(t_end - t);
        let m = if dt == coarse { quiet.clone() } else { rk4_step_matrix(&a0, &a1, [0.0; 3], dt) };
        steps.push((t, dt, m));
        t += dt;
    }
    let prop = Propagator {
        a0,
        a1,
        env: &env,
        quiet_from: fine_steps,
        steps,
    };

    let sums = (0..n_trajectories)
        .into_par_iter()
        .map(|idx| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx);
            let n = trajectory(&prop, &chans, d, &mut rng) as u128;
            let f = n * n.saturating_sub(1);
            [n, f, n * n, f * f, f * n]
        })
        .reduce(|| [0u128; 5], |a, b| std::array::from_fn(|i| a[i] + b[i]));

    let count = n_trajectories as f64;
    let [s_n, s_f, s_nn, s_ff, s_fn] = sums.map(|v| v as f64);
    let b = s_n / count;
    let a = s_f / count;
    if s_n == 0.0 {
        return Ok(JumpEstimate {
            g2: f64::NAN,
            sigma: f64::NAN,
            mean_photons: 0.0,
            n_trajectories,
            undefined: true,
        });
    }
    let var_a = (s_ff / count - a * a) / count;
    let var_b = (s_nn / count - b * b) / count;
    let cov = (s_fn / count - a * b) / count;
    let ga = 1.0 / (b * b);
    let gb = -2.0 * a / (b * b * b);
    let var = ga * ga * var_a + gb * gb * var_b + 2.0 * ga * gb * cov;
    Ok(JumpEstimate {
        g2: a / (b * b),
        sigma: var.max(0.0).sqrt(),
        mean_photons: b,
        n_trajectories,
        undefined: false,
    })
}
