//! Time-discretized simulation of the N-site system
//!
//! ```text
//! dx2(i) = c (xbar2 - x2(i)) dt + s x2(i)(1 - x2(i)) dt + (m/N)(1 - x2(i)) dt
//!          + sqrt(d x2(i)(1 - x2(i))) dw_i
//! ```
//!
//! from the all-type-1 state. Interior sites take Euler-Maruyama steps
//! with post-step clamping to [0,1]; the mean is frozen at its pre-step
//! value within a step and the diffusion coefficient is evaluated at the
//! pre-step state. Sites inside a boundary layer (within FELLER_CUTOFF
//! of 0 or 1) instead step by the exact transition of the linearized
//! boundary flow dx = (nu + beta x)dt + sqrt(d x)dw, sampled through its
//! Poisson-Gamma representation. Clamping a Gaussian increment at an
//! absorbing boundary rectifies the noise into spurious inflow of order
//! d per site per unit time, uniformly in dt, which swamps the m/N
//! mutation inflow at large N; the exact boundary transition removes
//! that bias at unchanged cost. Single-site closed forms used as oracles
//! live here too.

use crate::model::{derive_stream, Configuration, ModelParams, SeedSpec};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error("step size must be positive and finite, got {0}")]
    NonpositiveDt(f64),
    #[error("horizon must be positive and finite, got {0}")]
    InvalidHorizon(f64),
    #[error("record interval must be positive and finite, got {0}")]
    InvalidSchedule(f64),
    #[error("configuration has {got} sites but params declare {expected}")]
    SiteMismatch { expected: usize, got: usize },
}

/// What to keep while simulating: a record every `every` time units, and
/// optionally full configuration snapshots at those times.
#[derive(Debug, Clone, Copy)]
pub struct RecordSchedule {
    pub every: f64,
    pub snapshots: bool,
}

impl RecordSchedule {
    pub fn new(every: f64, snapshots: bool) -> Result<Self, ForwardError> {
        if !(every > 0.0) || !every.is_finite() {
            return Err(ForwardError::InvalidSchedule(every));
        }
        Ok(RecordSchedule { every, snapshots })
    }
}

#[derive(Debug, Clone)]
pub struct ForwardTrajectory {
    pub times: Vec<f64>,
    pub mean_mass: Vec<f64>,
    pub total_mass: Vec<f64>,
    pub snapshots: Option<Vec<Configuration>>,
}

impl ForwardTrajectory {
    fn with_capacity(n: usize, snapshots: bool) -> Self {
        ForwardTrajectory {
            times: Vec::with_capacity(n),
            mean_mass: Vec::with_capacity(n),
            total_mass: Vec::with_capacity(n),
            snapshots: if snapshots { Some(Vec::new()) } else { None },
        }
    }

    fn push(&mut self, config: &Configuration, mean: f64) {
        self.times.push(config.time);
        self.mean_mass.push(mean);
        self.total_mass.push(mean * config.x2.len() as f64);
        if let Some(snaps) = &mut self.snapshots {
            snaps.push(config.clone());
        }
    }

    /// Linear interpolation of mean_mass at time t; None outside the
    /// recorded range.
    pub fn mean_at(&self, t: f64) -> Option<f64> {
        let times = &self.times;
        if times.is_empty() || t < times[0] || t > *times.last().unwrap() {
            return None;
        }
        let k = times.partition_point(|&u| u < t);
        if k == 0 {
            return Some(self.mean_mass[0]);
        }
        if k == times.len() {
            return Some(*self.mean_mass.last().unwrap());
        }
        let (t0, t1) = (times[k - 1], times[k]);
        let (v0, v1) = (self.mean_mass[k - 1], self.mean_mass[k]);
        if t1 == t0 {
            return Some(v1);
        }
        Some(v0 + (v1 - v0) * (t - t0) / (t1 - t0))
    }
}

/// Sites closer to a boundary than this step by the exact linearized
/// transition; the interior uses Euler-Maruyama. At the cutoff the
/// dropped quadratic drift and (1-x) noise factor are sub-percent.
pub(crate) const FELLER_CUTOFF: f64 = 0.02;

/// Exact one-step transition of dx = (nu + beta x) dt + sqrt(d x) dw:
/// a Poisson-Gamma draw from the noncentral chi-square representation.
/// nu >= 0 is the immigration rate; with nu = 0 and no arrivals the
/// state is absorbed at 0 exactly. Result is unclamped.
pub(crate) fn feller_transition(
    x: f64,
    nu: f64,
    beta: f64,
    d: f64,
    dt: f64,
    rng: &mut impl Rng,
) -> f64 {
    let grow = (beta * dt).exp();
    let a = if (beta * dt).abs() < 1e-9 {
        0.25 * d * dt
    } else {
        0.25 * d * (beta * dt).exp_m1() / beta
    };
    // Denormal-tiny states can round the Poisson mean to zero; treat
    // them as zero arrivals rather than feeding an invalid mean in.
    let half_ncp = 0.5 * x * grow / a;
    let arrivals = if half_ncp > 0.0 {
        Poisson::new(half_ncp).expect("positive mean").sample(rng)
    } else {
        0.0
    };
    let shape = 2.0 * nu / d + arrivals;
    if shape <= 0.0 {
        return 0.0;
    }
    Gamma::new(shape, 2.0 * a).expect("positive shape").sample(rng)
}

/// One time step, in place. The empirical mean entering the migration
/// drift is the pre-step mean for every site.
pub fn em_step(
    config: &mut Configuration,
    params: &ModelParams,
    dt: f64,
    rng: &mut impl Rng,
) -> Result<(), ForwardError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(ForwardError::NonpositiveDt(dt));
    }
    if config.x2.len() != params.n_sites {
        return Err(ForwardError::SiteMismatch {
            expected: params.n_sites,
            got: config.x2.len(),
        });
    }
    em_step_inner(config, params, dt, rng);
    Ok(())
}

/// Unchecked step; returns the post-step mean so driver loops avoid a
/// second pass over the sites.
fn em_step_inner(
    config: &mut Configuration,
    params: &ModelParams,
    dt: f64,
    rng: &mut impl Rng,
) -> f64 {
    let n = config.x2.len() as f64;
    let xbar = config.x2.iter().sum::<f64>() / n;
    let c = params.migration_rate();
    let s = params.selection_rate();
    let mu = params.site_mutation_rate();
    let d = params.d;
    let sqrt_dt = dt.sqrt();
    let mut acc = 0.0;
    for x in &mut config.x2 {
        let xi = *x;
        let next = if d > 0.0 && xi < FELLER_CUTOFF {
            // Boundary layer at 0: immigration c*xbar + mu, linear
            // rate from the migration, selection and mutation terms.
            feller_transition(xi, c * xbar + mu, s - c - mu, d, dt, rng)
        } else if d > 0.0 && xi > 1.0 - FELLER_CUTOFF {
            // Boundary layer at 1, mirrored in y = 1 - x.
            let y = feller_transition(1.0 - xi, c * (1.0 - xbar), -(c + s + mu), d, dt, rng);
            1.0 - y
        } else {
            let drift = c * (xbar - xi) + s * xi * (1.0 - xi) + mu * (1.0 - xi);
            let mut v = xi + drift * dt;
            if d > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                v += (d * xi * (1.0 - xi)).sqrt() * sqrt_dt * z;
            }
            v
        };
        let clamped = next.clamp(0.0, 1.0);
        *x = clamped;
        acc += clamped;
    }
    config.time += dt;
    acc / n
}

/// Simulate from x2 ≡ 0 up to t_end, recording per the schedule (t = 0 and
/// t = t_end are always recorded). Deterministic given the seed.
pub fn simulate_forward(
    params: &ModelParams,
    t_end: f64,
    dt: f64,
    seed: &SeedSpec,
    record: &RecordSchedule,
) -> Result<ForwardTrajectory, ForwardError> {
    if !(t_end > 0.0) || !t_end.is_finite() {
        return Err(ForwardError::InvalidHorizon(t_end));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(ForwardError::NonpositiveDt(dt));
    }
    if !(record.every > 0.0) || !record.every.is_finite() {
        return Err(ForwardError::InvalidSchedule(record.every));
    }

    let mut config = Configuration::all_type1(params.n_sites);
    let mut rng = derive_stream(seed);
    let stride = ((record.every / dt).round() as usize).max(1);
    let n_steps = ((t_end / dt - 1e-9).ceil() as usize).max(1);

    let mut traj = ForwardTrajectory::with_capacity(n_steps / stride + 2, record.snapshots);
    traj.push(&config, 0.0);
    for step in 1..=n_steps {
        let h = if step == n_steps {
            t_end - (step - 1) as f64 * dt
        } else {
            dt
        };
        let mean = em_step_inner(&mut config, params, h, &mut rng);
        if step % stride == 0 || step == n_steps {
            traj.push(&config, mean);
        }
    }
    Ok(traj)
}

/// Stripped-down forward run that stops as soon as the running mean
/// crosses `eps`, returning the linearly interpolated crossing time
/// (None if not reached by t_max). Used by the emergence experiment,
/// where full trajectories would be wasted work.
pub fn simulate_hitting_time(
    params: &ModelParams,
    eps: f64,
    t_max: f64,
    dt: f64,
    seed: &SeedSpec,
) -> Result<Option<f64>, ForwardError> {
    if !(t_max > 0.0) || !t_max.is_finite() {
        return Err(ForwardError::InvalidHorizon(t_max));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(ForwardError::NonpositiveDt(dt));
    }
    let mut config = Configuration::all_type1(params.n_sites);
    let mut rng = derive_stream(seed);
    let n_steps = ((t_max / dt - 1e-9).ceil() as usize).max(1);
    let mut prev_mean = 0.0;
    let mut prev_t = 0.0;
    if prev_mean >= eps {
        return Ok(Some(0.0));
    }
    for step in 1..=n_steps {
        let h = if step == n_steps {
            t_max - (step - 1) as f64 * dt
        } else {
            dt
        };
        let mean = em_step_inner(&mut config, params, h, &mut rng);
        if mean >= eps {
            let frac = if mean > prev_mean {
                (eps - prev_mean) / (mean - prev_mean)
            } else {
                1.0
            };
            return Ok(Some(prev_t + frac * (config.time - prev_t)));
        }
        prev_mean = mean;
        prev_t = config.time;
    }
    Ok(None)
}

/// Closed-form solution of the single-site deterministic flow
/// x' = s x(1-x) + m(1-x), x(0) = 0:
///
/// ```text
/// x(t) = m (e^{(m+s)t} - 1) / (s + m e^{(m+s)t})
/// ```
///
/// evaluated in the overflow-free form m(1-E)/(sE + m), E = e^{-(m+s)t}.
pub fn deterministic_single_site(m: f64, s: f64, t: f64) -> f64 {
    assert!(m >= 0.0 && s >= 0.0 && m + s > 0.0, "need m,s >= 0, not both 0");
    assert!(t >= 0.0, "need t >= 0");
    let e = (-(m + s) * t).exp();
    m * (1.0 - e) / (s * e + m)
}

/// Fourth-order Runge-Kutta integration of the same single-site flow;
/// the independent discretization used to cross-check the closed form.
pub fn single_site_ode_rk4(m: f64, s: f64, t_end: f64, dt: f64) -> f64 {
    assert!(m >= 0.0 && s >= 0.0 && m + s > 0.0 && t_end >= 0.0 && dt > 0.0);
    let f = |x: f64| s * x * (1.0 - x) + m * (1.0 - x);
    let n = ((t_end / dt).ceil() as usize).max(1);
    let h = t_end / n as f64;
    let mut x = 0.0;
    for _ in 0..n {
        let k1 = f(x);
        let k2 = f(x + 0.5 * h * k1);
        let k3 = f(x + 0.5 * h * k2);
        let k4 = f(x + h * k3);
        x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    x
}

/// First recorded time with mean_mass >= eps, linearly interpolated
/// between bracketing records; None if the threshold is never reached.
pub fn hitting_time(traj: &ForwardTrajectory, eps: f64) -> Option<f64> {
    let k = traj.mean_mass.iter().position(|&v| v >= eps)?;
    if k == 0 {
        return Some(traj.times[0]);
    }
    let (v0, v1) = (traj.mean_mass[k - 1], traj.mean_mass[k]);
    let (t0, t1) = (traj.times[k - 1], traj.times[k]);
    if v1 > v0 {
        Some(t0 + (t1 - t0) * (eps - v0) / (v1 - v0))
    } else {
        Some(t1)
    }
}
