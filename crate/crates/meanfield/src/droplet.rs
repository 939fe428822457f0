//! Excursion-theoretic droplet machinery.
//!
//! A single site with emigration but no immigration follows
//!
//! ```text
//! dx = -c x dt + s x(1-x) dt + sqrt(d x(1-x)) dw
//! ```
//!
//! for which 0 is an exit boundary. The sigma-finite excursion law away
//! from 0 is approximated by paths started at a small `eps` and weighted
//! `1/S(eps)`, with `S` the scale function of the diffusion. The droplet
//! process carries a population of such excursion atoms at distinct
//! locations and feeds new ones in as a Poisson stream whose intensity
//! couples back through the total mass. Its mean obeys a renewal equation
//! driven by the single-particle dual chain, which doubles as the oracle
//! for the simulator.

use crate::forward::{feller_transition, RecordSchedule, FELLER_CUTOFF};
use crate::malthus::{dual_mean_f, march_chain, BDChainSpec, MalthusError};
use crate::model::{derive_stream, AtomicMeasure, ModelError, ModelParams, SeedSpec};
use crate::numerics::adaptive_simpson;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DropletError {
    #[error("eps must lie in (0, 0.1), got {0}")]
    InvalidEps(f64),
    #[error("scale grid must stay below 1 - 1e-6, got {0}")]
    GridTouchesOne(f64),
    #[error("grid must be nonempty, nonnegative, strictly increasing")]
    InvalidGrid,
    #[error("dt must be positive and finite, got {0}")]
    NonpositiveDt(f64),
    #[error("horizon must be positive and finite, got {0}")]
    InvalidHorizon(f64),
    #[error("renewal grid did not converge: residual {achieved:.3e} above {want:.3e}")]
    StepTooCoarse { want: f64, achieved: f64 },
    #[error("need at least {need} replicas, got {got}")]
    TooFewReps { need: usize, got: usize },
    #[error("late time {t_late} outside the recorded range [{t0}, {t1}]")]
    LateTimeOutside { t_late: f64, t0: f64, t1: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Malthus(#[from] MalthusError),
}

/// Upper margin kept between the scale grid and the singularity at 1.
const SCALE_MARGIN: f64 = 1e-6;

/// Tabulated scale function S of the excursion diffusion on a user grid.
/// S(0) = 0 and S is strictly increasing.
#[derive(Debug, Clone)]
pub struct ScaleTable {
    grid: Vec<f64>,
    values: Vec<f64>,
}

impl ScaleTable {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Linear interpolation of S at x; None outside the grid range.
    pub fn value_at(&self, x: f64) -> Option<f64> {
        if self.grid.is_empty() || x < self.grid[0] || x > *self.grid.last().unwrap() {
            return None;
        }
        let k = self.grid.partition_point(|&u| u < x);
        if k == 0 {
            return Some(self.values[0]);
        }
        let (x0, x1) = (self.grid[k - 1], self.grid[k]);
        let (v0, v1) = (self.values[k - 1], self.values[k]);
        Some(v0 + (v1 - v0) * (x - x0) / (x1 - x0))
    }
}

fn scale_slope(params: &ModelParams, y: f64) -> f64 {
    (-2.0 * params.s * y).exp() * (1.0 - y).powf(-2.0 * params.c)
}

/// S(x) = integral of exp(-2sy) (1-y)^{-2c} dy from 0 to x, the scale
/// function fixing S(0) = 0, S'(0) = 1.
pub fn scale_value(params: &ModelParams, x: f64) -> Result<f64, DropletError> {
    if !(0.0..=1.0 - SCALE_MARGIN).contains(&x) {
        return Err(DropletError::GridTouchesOne(x));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    let f = |y: f64| scale_slope(params, y);
    let tol = 1e-13 * (1.0 + x * f(x));
    Ok(adaptive_simpson(&f, 0.0, x, tol))
}

/// Cumulative scale-function table on `grid` (each point in
/// [0, 1 - 1e-6], strictly increasing).
pub fn scale_function(params: &ModelParams, grid: &[f64]) -> Result<ScaleTable, DropletError> {
    if grid.is_empty() || grid[0] < 0.0 {
        return Err(DropletError::InvalidGrid);
    }
    for w in grid.windows(2) {
        if w[1] <= w[0] {
            return Err(DropletError::InvalidGrid);
        }
    }
    let top = *grid.last().unwrap();
    if top > 1.0 - SCALE_MARGIN {
        return Err(DropletError::GridTouchesOne(top));
    }
    let f = |y: f64| scale_slope(params, y);
    let mut values = Vec::with_capacity(grid.len());
    let mut acc = 0.0;
    let mut prev = 0.0;
    for &x in grid {
        if x > prev {
            let tol = 1e-13 * (1.0 + (x - prev) * f(prev).max(f(x)));
            acc += adaptive_simpson(&f, prev, x, tol);
        }
        values.push(acc);
        prev = x;
    }
    Ok(ScaleTable {
        grid: grid.to_vec(),
        values,
    })
}

/// One excursion of the single-site diffusion, sampled on a fixed dt grid
/// from level eps. The path is weighted 1/S(eps) so that weighted
/// statistics approximate the excursion-law measure.
#[derive(Debug, Clone)]
pub struct ExcursionPath {
    /// Birth time of the excursion (0 for standalone samples).
    pub birth: f64,
    /// Values at birth, birth + dt, ...; the first entry is eps.
    pub values: Vec<f64>,
    /// First time the path falls below the absorption threshold; equals
    /// the horizon when the path was still alive there.
    pub death: f64,
    /// 1/S(eps).
    pub weight: f64,
    /// True when the horizon cut the path before absorption.
    pub exhausted: bool,
}

impl ExcursionPath {
    pub fn sup(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }
}

/// Below this level an atom steps by the exact linear-drift Feller
/// transition instead of Euler-Maruyama. Near zero the quadratic drift
/// term and the (1 - x) factor in the noise are sub-percent corrections,
/// while Euler-Maruyama would need dt << x/d to resolve the absorbing
/// boundary at all: with coarser steps the per-step noise sqrt(d x dt)
/// rivals x itself and survival probabilities come out badly inflated.
/// Advances one excursion atom by dt. Small states take the exact
/// immigration-free Feller transition (Poisson zero = exact absorption);
/// elsewhere Euler-Maruyama, drawing noise whenever d > 0 so the draw
/// count never depends on the state.
fn excursion_step(x: f64, params: &ModelParams, dt: f64, sqrt_dt: f64, rng: &mut impl Rng) -> f64 {
    if params.d > 0.0 && x < FELLER_CUTOFF {
        return feller_transition(x, 0.0, params.s - params.c, params.d, dt, rng).clamp(0.0, 1.0);
    }
    let drift = -params.c * x + params.s * x * (1.0 - x);
    let mut next = x + drift * dt;
    if params.d > 0.0 {
        let z: f64 = rng.sample(StandardNormal);
        next += (params.d * x * (1.0 - x)).sqrt() * sqrt_dt * z;
    }
    next.clamp(0.0, 1.0)
}

/// Samples one eps-approximate excursion: Euler-Maruyama from x = eps
/// until the value drops below eps/100 (absorption) or the horizon runs
/// out (flagged, path kept).
pub fn sample_excursion(
    eps: f64,
    params: &ModelParams,
    dt: f64,
    horizon: f64,
    seed: &SeedSpec,
) -> Result<ExcursionPath, DropletError> {
    if !(eps > 0.0 && eps < 0.1) {
        return Err(DropletError::InvalidEps(eps));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(DropletError::NonpositiveDt(dt));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(DropletError::InvalidHorizon(horizon));
    }
    let weight = 1.0 / scale_value(params, eps)?;
    let threshold = eps / 100.0;
    let sqrt_dt = dt.sqrt();
    let mut rng = derive_stream(seed);
    let n_steps = (horizon / dt).ceil() as usize;
    let mut values = Vec::with_capacity(n_steps.min(4096) + 1);
    let mut x = eps;
    values.push(x);
    let mut exhausted = true;
    let mut steps = n_steps;
    for k in 1..=n_steps {
        x = excursion_step(x, params, dt, sqrt_dt, &mut rng);
        values.push(x);
        if x < threshold {
            exhausted = false;
            steps = k;
            break;
        }
    }
    Ok(ExcursionPath {
        birth: 0.0,
        values,
        death: steps as f64 * dt,
        weight,
        exhausted,
    })
}

/// Trajectory of the droplet process: recorded times, the total-mass
/// series, optional atom snapshots, and the largest single-step change of
/// the total mass seen over the whole run.
#[derive(Debug, Clone)]
pub struct DropletTrajectory {
    pub times: Vec<f64>,
    pub total_mass: Vec<f64>,
    pub snapshots: Option<Vec<AtomicMeasure>>,
    pub max_step_jump: f64,
}

impl DropletTrajectory {
    /// Linear interpolation of the total mass at t; None outside range.
    pub fn mass_at(&self, t: f64) -> Option<f64> {
        if self.times.is_empty() || t < self.times[0] || t > *self.times.last().unwrap() {
            return None;
        }
        let k = self.times.partition_point(|&u| u < t);
        if k == 0 {
            return Some(self.total_mass[0]);
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let (v0, v1) = (self.total_mass[k - 1], self.total_mass[k]);
        Some(v0 + (v1 - v0) * (t - t0) / (t1 - t0))
    }
}

/// Simulates the droplet: existing atoms evolve as independent excursion
/// diffusions, absorbed atoms (value < eps/100) are culled, and fresh
/// excursions spawn at level eps as a Poisson stream of intensity
/// (m + c * total_mass)/S(eps), each at a new uniform location.
pub fn simulate_droplet(
    params: &ModelParams,
    t_end: f64,
    eps: f64,
    dt: f64,
    seed: &SeedSpec,
    init: &AtomicMeasure,
    record: &RecordSchedule,
) -> Result<DropletTrajectory, DropletError> {
    if !(eps > 0.0 && eps < 0.1) {
        return Err(DropletError::InvalidEps(eps));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(DropletError::NonpositiveDt(dt));
    }
    if !(t_end > 0.0) || !t_end.is_finite() {
        return Err(DropletError::InvalidHorizon(t_end));
    }
    let s_eps = scale_value(params, eps)?;
    let threshold = eps / 100.0;
    let sqrt_dt = dt.sqrt();
    let mut rng = derive_stream(seed);

    let mut atoms: Vec<(f64, f64)> = init
        .atoms()
        .iter()
        .copied()
        .filter(|&(_, mass)| mass > 0.0)
        .collect();
    let mut total: f64 = atoms.iter().map(|&(_, x)| x).sum();

    let n_steps = (t_end / dt).ceil() as usize;
    let every_steps = ((record.every / dt).round() as usize).max(1);
    let mut traj = DropletTrajectory {
        times: Vec::new(),
        total_mass: Vec::new(),
        snapshots: if record.snapshots { Some(Vec::new()) } else { None },
        max_step_jump: 0.0,
    };
    let push_record = |k: usize, atoms: &[(f64, f64)], total: f64, traj: &mut DropletTrajectory| -> Result<(), DropletError> {
        traj.times.push(k as f64 * dt);
        traj.total_mass.push(total);
        if let Some(snaps) = &mut traj.snapshots {
            snaps.push(AtomicMeasure::new(atoms.to_vec())?);
        }
        Ok(())
    };
    push_record(0, &atoms, total, &mut traj)?;

    for k in 1..=n_steps {
        let prev_total = total;
        // Spawn intensity uses the pre-step mass, matching the frozen-mean
        // convention of the site system.
        let lambda = (params.m + params.c * prev_total) / s_eps * dt;
        for entry in &mut atoms {
            entry.1 = excursion_step(entry.1, params, dt, sqrt_dt, &mut rng);
        }
        atoms.retain(|&(_, x)| x >= threshold);
        if lambda > 0.0 {
            let n_new = Poisson::new(lambda).unwrap().sample(&mut rng) as usize;
            for _ in 0..n_new {
                let loc: f64 = rng.gen();
                atoms.push((loc, eps));
            }
        }
        total = atoms.iter().map(|&(_, x)| x).sum();
        traj.max_step_jump = traj.max_step_jump.max((total - prev_total).abs());
        if k % every_steps == 0 || k == n_steps {
            push_record(k, &atoms, total, &mut traj)?;
        }
    }
    Ok(traj)
}

/// Mean total mass of the droplet on a uniform grid.
#[derive(Debug, Clone)]
pub struct MassCurve {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl MassCurve {
    /// Linear interpolation; None outside the grid.
    pub fn value_at(&self, t: f64) -> Option<f64> {
        if self.times.is_empty() || t < self.times[0] || t > *self.times.last().unwrap() {
            return None;
        }
        let k = self.times.partition_point(|&u| u < t);
        if k == 0 {
            return Some(self.values[0]);
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let (v0, v1) = (self.values[k - 1], self.values[k]);
        Some(v0 + (v1 - v0) * (t - t0) / (t1 - t0))
    }
}

/// Mean mass of the initial atoms at time t: each atom contributes
/// 1 - E[(1-x0)^{K(t)}] with K the migrating single-particle chain, so g
/// needs the full chain law, not only its mean.
fn init_mean_terms(
    params: &ModelParams,
    init: &AtomicMeasure,
    grid: &[f64],
    j_max: usize,
) -> Result<Vec<f64>, DropletError> {
    if init.atoms().iter().all(|&(_, mass)| mass == 0.0) {
        return Ok(vec![0.0; grid.len()]);
    }
    let spec = BDChainSpec::migrating_chain(params, j_max);
    let mut g = Vec::with_capacity(grid.len());
    march_chain(&spec, grid, 1e-9, |_, p| {
        let mut v = 0.0;
        for &(_, x0) in init.atoms() {
            if x0 == 0.0 {
                continue;
            }
            let base = 1.0 - x0;
            let mut pow = 1.0;
            let mut gen = 0.0;
            for &pk in p {
                gen += pk * pow;
                pow *= base;
            }
            v += 1.0 - gen;
        }
        g.push(v);
    })?;
    Ok(g)
}

/// Solves the renewal equation for the mean droplet mass,
///
/// ```text
/// m(t) = g(t) + m_rate * int_0^t f + c * int_0^t m(r) f(t-r) dr,
/// ```
///
/// with f the mean of the migrating single-particle chain and g the mean
/// mass of the initial atoms. Trapezoid discretization on the f grid; the
/// step is halved until two resolutions agree within `tol` relative.
pub fn renewal_mean_mass(
    params: &ModelParams,
    t_end: f64,
    j_max: usize,
    tol: f64,
    init: &AtomicMeasure,
) -> Result<MassCurve, DropletError> {
    if !(t_end > 0.0) || !t_end.is_finite() {
        return Err(DropletError::InvalidHorizon(t_end));
    }
    if !(tol > 0.0) {
        return Err(DropletError::StepTooCoarse {
            want: tol,
            achieved: f64::NAN,
        });
    }
    let solve = |h: f64| -> Result<MassCurve, DropletError> {
        let n = (t_end / h).round() as usize;
        let grid: Vec<f64> = (0..=n).map(|k| k as f64 * h).collect();
        let f = dual_mean_f(params, &grid, j_max)?;
        let g = init_mean_terms(params, init, &grid, j_max)?;
        let mut big_f = 0.0; // cumulative trapezoid of f
        let mut m = vec![0.0; n + 1];
        m[0] = g[0];
        let denom = 1.0 - params.c * h * f[0] / 2.0;
        for k in 1..=n {
            big_f += 0.5 * h * (f[k - 1] + f[k]);
            let mut conv = 0.5 * m[0] * f[k];
            for r in 1..k {
                conv += m[r] * f[k - r];
            }
            m[k] = (g[k] + params.m * big_f + params.c * h * conv) / denom;
        }
        Ok(MassCurve {
            times: grid,
            values: m,
        })
    };

    let mut h = (t_end / 64.0).min(5e-3);
    let mut coarse = solve(h)?;
    loop {
        let fine = solve(0.5 * h)?;
        let scale = 1.0 + fine.values.iter().cloned().fold(0.0, f64::max);
        let mut gap: f64 = 0.0;
        for (k, v) in coarse.values.iter().enumerate() {
            gap = gap.max((v - fine.values[2 * k]).abs());
        }
        let rel = gap / scale;
        if rel <= tol {
            return Ok(fine);
        }
        h *= 0.5;
        if t_end / h > 250_000.0 {
            return Err(DropletError::StepTooCoarse {
                want: tol,
                achieved: rel,
            });
        }
        coarse = fine;
    }
}

/// Late-time growth prefactor sample: per replica e^{-alpha t_late} times
/// the total mass at t_late.
#[derive(Debug, Clone)]
pub struct WstarSample {
    pub values: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
}

pub fn estimate_w_star(
    trajectories: &[DropletTrajectory],
    alpha: f64,
    t_late: f64,
) -> Result<WstarSample, DropletError> {
    if trajectories.len() < 2 {
        return Err(DropletError::TooFewReps {
            need: 2,
            got: trajectories.len(),
        });
    }
    let scale = (-alpha * t_late).exp();
    let mut values = Vec::with_capacity(trajectories.len());
    for traj in trajectories {
        let mass = traj.mass_at(t_late).ok_or_else(|| DropletError::LateTimeOutside {
            t_late,
            t0: traj.times.first().copied().unwrap_or(f64::NAN),
            t1: traj.times.last().copied().unwrap_or(f64::NAN),
        })?;
        values.push(scale * mass);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(WstarSample {
        values,
        mean,
        variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::malthus::malthusian_fixed_point;
    use crate::model::run_replicas;
    use crate::numerics::summarize;
    use approx::assert_relative_eq;

    fn unit_params() -> ModelParams {
        ModelParams::new(1.0, 1.0, 1.0, 0.1, 1).unwrap()
    }

    #[test]
    fn scale_zero_and_unit_integrand() {
        let params = unit_params();
        let table = scale_function(&params, &[0.0, 0.1, 0.5, 0.9]).unwrap();
        assert_eq!(table.values()[0], 0.0);
        for w in table.values().windows(2) {
            assert!(w[1] > w[0]);
        }

        // s = 0, c = 0 turns the integrand into 1, so S(x) = x.
        let flat = ModelParams::new(0.0, 0.0, 1.0, 0.0, 1).unwrap();
        let table = scale_function(&flat, &[0.0, 0.25, 0.5, 0.75]).unwrap();
        for (&x, &v) in table.grid().iter().zip(table.values()) {
            assert_relative_eq!(v, x, epsilon = 1e-12);
        }
    }

    #[test]
    fn scale_behaves_linearly_at_zero() {
        let params = unit_params();
        let s = scale_value(&params, 1e-6).unwrap();
        assert!(
            (s / 1e-6 - 1.0).abs() < 1e-4,
            "S(1e-6)/1e-6 = {}",
            s / 1e-6
        );
    }

    #[test]
    fn scale_rejects_bad_grids() {
        let params = unit_params();
        assert!(matches!(
            scale_function(&params, &[0.0, 1.0]),
            Err(DropletError::GridTouchesOne(_))
        ));
        assert!(matches!(
            scale_function(&params, &[0.2, 0.1]),
            Err(DropletError::InvalidGrid)
        ));
        assert!(matches!(
            scale_function(&params, &[]),
            Err(DropletError::InvalidGrid)
        ));
    }

    #[test]
    fn scale_interpolation_brackets_grid() {
        let params = unit_params();
        let table = scale_function(&params, &[0.0, 0.2, 0.4]).unwrap();
        assert!(table.value_at(0.3).is_some());
        assert!(table.value_at(0.5).is_none());
        let direct = scale_value(&params, 0.2).unwrap();
        assert_relative_eq!(table.value_at(0.2).unwrap(), direct, epsilon = 1e-12);
    }

    #[test]
    fn excursion_shape_and_weight() {
        let params = unit_params();
        let eps = 1e-3;
        let path = sample_excursion(eps, &params, 1e-4, 50.0, &SeedSpec::new(7, 0, "exc")).unwrap();
        assert_eq!(path.values[0], eps);
        assert!(path.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_relative_eq!(
            path.weight,
            1.0 / scale_value(&params, eps).unwrap(),
            epsilon = 1e-12
        );
        if !path.exhausted {
            // All values before death sit above the absorption threshold.
            for &v in &path.values[..path.values.len() - 1] {
                assert!(v >= eps / 100.0);
            }
            assert!(*path.values.last().unwrap() < eps / 100.0);
        }
        assert!(matches!(
            sample_excursion(0.5, &params, 1e-4, 1.0, &SeedSpec::new(7, 0, "exc")),
            Err(DropletError::InvalidEps(_))
        ));
    }

    #[test]
    fn excursion_sup_is_monotone_in_selection() {
        // Stronger selection pushes excursions higher.
        let weak = ModelParams::new(1.0, 0.5, 1.0, 0.0, 1).unwrap();
        let strong = ModelParams::new(1.0, 4.0, 1.0, 0.0, 1).unwrap();
        let seed = SeedSpec::new(11, 0, "exc-mono");
        let reps = 2_000;
        let frac = |params: &ModelParams, label: &str| -> f64 {
            let hits = run_replicas(&seed.with_label(label), reps, |i, _| {
                let spec = seed.with_label(label).with_replica(i as u64);
                let path = sample_excursion(5e-3, params, 1e-3, 40.0, &spec).unwrap();
                if path.sup() > 0.3 {
                    1.0
                } else {
                    0.0
                }
            });
            hits.iter().sum::<f64>() / reps as f64
        };
        let p_weak = frac(&weak, "weak");
        let p_strong = frac(&strong, "strong");
        assert!(
            p_strong > p_weak + 3.0 * (p_weak.max(1e-3) / reps as f64).sqrt(),
            "sup exceedance not monotone: weak {p_weak}, strong {p_strong}"
        );
    }

    #[test]
    fn excursion_exceedance_matches_scale_ratio() {
        // Hitting probabilities under the scale function: started at eps,
        // P(sup > eta) = S(eps)/S(eta), so weight * P(sup > eta) must
        // reproduce 1/S(eta) for every eps.
        let params = unit_params();
        let eta = 0.05;
        let target = 1.0 / scale_value(&params, eta).unwrap();
        let reps = 40_000;
        for (label, eps) in [("a", 2e-3), ("b", 1e-3)] {
            let seed = SeedSpec::new(23, 0, label);
            let weight = 1.0 / scale_value(&params, eps).unwrap();
            let hits = run_replicas(&seed, reps, |i, _| {
                let spec = seed.with_replica(i as u64);
                let path = sample_excursion(eps, &params, 5e-5, 30.0, &spec).unwrap();
                if path.sup() > eta {
                    weight
                } else {
                    0.0
                }
            });
            let stats = summarize(&hits);
            assert!(
                (stats.mean - target).abs() < 3.0 * stats.se,
                "eps {eps}: weighted exceedance {} vs 1/S(eta) {target} (se {})",
                stats.mean,
                stats.se
            );
        }
    }

    #[test]
    fn droplet_without_sources_stays_empty() {
        let params = ModelParams::new(1.0, 1.0, 1.0, 0.0, 1).unwrap();
        let record = RecordSchedule::new(0.25, true).unwrap();
        let traj = simulate_droplet(
            &params,
            2.0,
            1e-3,
            1e-3,
            &SeedSpec::new(5, 0, "empty"),
            &AtomicMeasure::empty(),
            &record,
        )
        .unwrap();
        assert!(traj.total_mass.iter().all(|&v| v == 0.0));
        assert!(traj
            .snapshots
            .unwrap()
            .iter()
            .all(|snap| snap.is_empty()));
    }

    #[test]
    fn droplet_mass_agrees_with_snapshots() {
        let params = unit_params();
        let record = RecordSchedule::new(0.5, true).unwrap();
        let init = AtomicMeasure::new(vec![(0.3, 0.2), (0.7, 0.1)]).unwrap();
        let traj = simulate_droplet(
            &params,
            2.0,
            1e-3,
            1e-3,
            &SeedSpec::new(6, 0, "snap"),
            &init,
            &record,
        )
        .unwrap();
        let snaps = traj.snapshots.as_ref().unwrap();
        assert_eq!(snaps.len(), traj.times.len());
        for (mass, snap) in traj.total_mass.iter().zip(snaps) {
            assert_relative_eq!(*mass, snap.total_mass(), epsilon = 1e-12);
        }
        assert_relative_eq!(traj.total_mass[0], 0.3, epsilon = 1e-12);
    }

    #[test]
    fn droplet_mean_matches_renewal_equation() {
        let params = ModelParams::new(1.0, 1.0, 1.0, 0.5, 1).unwrap();
        let t_end = 3.0;
        let eps = 2e-3;
        let seed = SeedSpec::new(31, 0, "droplet-mean");
        let record = RecordSchedule::new(0.5, false).unwrap();
        let reps = 80;
        let trajs = run_replicas(&seed, reps, |i, _| {
            let spec = seed.with_replica(i as u64);
            simulate_droplet(
                &params,
                t_end,
                eps,
                1e-3,
                &spec,
                &AtomicMeasure::empty(),
                &record,
            )
            .unwrap()
        });
        let oracle = renewal_mean_mass(&params, t_end, 128, 1e-6, &AtomicMeasure::empty()).unwrap();
        for &t in &[1.0, 2.0, 3.0] {
            let samples: Vec<f64> = trajs.iter().map(|tr| tr.mass_at(t).unwrap()).collect();
            let stats = summarize(&samples);
            let want = oracle.value_at(t).unwrap();
            assert!(
                (stats.mean - want).abs() < 3.0 * stats.se,
                "t = {t}: MC {} vs renewal {want} (se {})",
                stats.mean,
                stats.se
            );
        }
    }

    #[test]
    fn renewal_trivial_and_short_time() {
        let quiet = ModelParams::new(1.0, 1.0, 1.0, 0.0, 1).unwrap();
        let curve = renewal_mean_mass(&quiet, 1.0, 64, 1e-8, &AtomicMeasure::empty()).unwrap();
        assert!(curve.values.iter().all(|&v| v.abs() < 1e-14));

        // Leading order: m(t) ~ m_rate * t since f(0) = 1.
        let params = unit_params();
        let curve = renewal_mean_mass(&params, 0.01, 64, 1e-8, &AtomicMeasure::empty()).unwrap();
        let got = curve.value_at(0.01).unwrap();
        let want = params.m * 0.01;
        assert!(
            (got / want - 1.0).abs() < 0.01,
            "short-time mean {got} vs {want}"
        );
    }

    #[test]
    fn renewal_growth_rate_settles_on_malthusian() {
        let params = unit_params();
        let curve = renewal_mean_mass(&params, 12.0, 192, 1e-7, &AtomicMeasure::empty()).unwrap();
        let (alpha, _) = malthusian_fixed_point(&params, 192, 1e-6).unwrap();
        let at = |t: f64| curve.value_at(t).unwrap() * (-alpha * t).exp();
        let (w10, w12) = (at(10.0), at(12.0));
        assert!(
            ((w12 - w10) / w10).abs() < 0.02,
            "discounted mean not settled: {w10} vs {w12}"
        );
    }

    #[test]
    fn renewal_counts_initial_atoms() {
        // Without selection the initial-atom term decays like e^{-ct} and
        // the feedback convolution re-injects exactly the lost mean, so
        // m(t) stays at the initial mass. This exercises both g and the
        // convolution term against a closed form.
        let params = ModelParams::new(1.0, 0.0, 1.0, 0.0, 1).unwrap();
        let init = AtomicMeasure::new(vec![(0.5, 0.3)]).unwrap();
        let curve = renewal_mean_mass(&params, 2.0, 64, 1e-8, &init).unwrap();
        assert_relative_eq!(curve.values[0], 0.3, epsilon = 1e-9);
        for &t in &[0.5, 1.0, 2.0] {
            let got = curve.value_at(t).unwrap();
            assert_relative_eq!(got, 0.3, epsilon = 1e-5);
        }
    }

    #[test]
    fn wstar_trivial_and_stabilization() {
        let no_source = ModelParams::new(1.0, 1.0, 1.0, 0.0, 1).unwrap();
        let record = RecordSchedule::new(0.5, false).unwrap();
        let empty: Vec<DropletTrajectory> = (0..4)
            .map(|i| {
                simulate_droplet(
                    &no_source,
                    3.0,
                    1e-3,
                    1e-3,
                    &SeedSpec::new(40, i, "wstar-empty"),
                    &AtomicMeasure::empty(),
                    &record,
                )
                .unwrap()
            })
            .collect();
        let sample = estimate_w_star(&empty, 0.4, 2.0).unwrap();
        assert!(sample.values.iter().all(|&v| v == 0.0));
        assert_eq!(sample.mean, 0.0);

        let params = unit_params();
        let seed = SeedSpec::new(41, 0, "wstar");
        let reps = 40;
        let trajs = run_replicas(&seed, reps, |i, _| {
            let spec = seed.with_replica(i as u64);
            simulate_droplet(
                &params,
                7.0,
                1e-3,
                1e-3,
                &spec,
                &AtomicMeasure::empty(),
                &record,
            )
            .unwrap()
        });
        let (alpha, _) = malthusian_fixed_point(&params, 192, 1e-6).unwrap();
        let early = estimate_w_star(&trajs, alpha, 6.0).unwrap();
        let late = estimate_w_star(&trajs, alpha, 7.0).unwrap();
        assert!(late.variance > 0.0, "degenerate W* sample");
        let corr = {
            let (a, b) = (&early.values, &late.values);
            let (ma, mb) = (early.mean, late.mean);
            let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            cov / (early.variance * late.variance).sqrt() / (reps as f64 - 1.0)
        };
        assert!(corr > 0.9, "late-time W* proxies decorrelated: {corr}");
        assert!(matches!(
            estimate_w_star(&trajs[..1], alpha, 6.0),
            Err(DropletError::TooFewReps { .. })
        ));
        assert!(matches!(
            estimate_w_star(&trajs, alpha, 9.0),
            Err(DropletError::LateTimeOutside { .. })
        ));
    }

    #[test]
    fn atom_counts_above_level_are_poisson_like() {
        // With weak coupling (c small) the spawn stream is nearly an
        // inhomogeneous Poisson process, so the count of atoms above a
        // fixed level at a fixed time has index of dispersion near 1.
        let params = ModelParams::new(0.05, 1.0, 1.0, 0.3, 1).unwrap();
        let record = RecordSchedule::new(1.0, true).unwrap();
        let seed = SeedSpec::new(55, 0, "dispersion");
        let reps = 500;
        let counts = run_replicas(&seed, reps, |i, _| {
            let spec = seed.with_replica(i as u64);
            let traj = simulate_droplet(
                &params,
                1.0,
                1e-3,
                1e-3,
                &spec,
                &AtomicMeasure::empty(),
                &record,
            )
            .unwrap();
            let snaps = traj.snapshots.as_ref().unwrap();
            let last = snaps.last().unwrap();
            last.atoms().iter().filter(|&&(_, x)| x > 0.03).count() as f64
        });
        let stats = summarize(&counts);
        let var = stats.se * stats.se * reps as f64;
        let index = var / stats.mean;
        assert!(
            (0.8..=1.2).contains(&index),
            "dispersion index {index} (mean {})",
            stats.mean
        );
    }

    #[test]
    fn exceedance_stable_under_eps_refinement() {
        // The sigma-finiteness rendering: spawn rates diverge as eps
        // shrinks, yet the law of atoms above a fixed level stabilizes.
        let params = ModelParams::new(1.0, 1.0, 1.0, 1.0, 1).unwrap();
        let record = RecordSchedule::new(1.0, true).unwrap();
        let eta = 0.05;
        let reps = 250;
        let mut stats = Vec::new();
        for (label, eps) in [("e1", 1e-3), ("e2", 5e-4), ("e3", 2.5e-4)] {
            let seed = SeedSpec::new(60, 0, label);
            let counts = run_replicas(&seed, reps, |i, _| {
                let spec = seed.with_replica(i as u64);
                let traj = simulate_droplet(
                    &params,
                    1.0,
                    eps,
                    1e-3,
                    &spec,
                    &AtomicMeasure::empty(),
                    &record,
                )
                .unwrap();
                let last = traj.snapshots.as_ref().unwrap().last().unwrap().clone();
                last.atoms().iter().filter(|&&(_, x)| x > eta).count() as f64
            });
            stats.push(summarize(&counts));
        }
        for pair in stats.windows(2) {
            let se = (pair[0].se.powi(2) + pair[1].se.powi(2)).sqrt();
            assert!(
                (pair[0].mean - pair[1].mean).abs() < 3.0 * se,
                "exceedance drifted across eps: {} vs {} (se {se})",
                pair[0].mean,
                pair[1].mean
            );
        }
    }

    #[test]
    fn mass_jumps_shrink_with_resolution() {
        let params = ModelParams::new(1.0, 1.0, 1.0, 0.5, 1).unwrap();
        let record = RecordSchedule::new(0.5, false).unwrap();
        // The max step jump of a single replica is dominated by the realized
        // droplet size, so compare replicate averages rather than one path.
        let mean_jump = |eps: f64, dt: f64, label: &str| {
            let reps = 12;
            let total: f64 = (0..reps)
                .map(|r| {
                    simulate_droplet(
                        &params,
                        1.0,
                        eps,
                        dt,
                        &SeedSpec::new(70, r, label),
                        &AtomicMeasure::empty(),
                        &record,
                    )
                    .unwrap()
                    .max_step_jump
                })
                .sum();
            total / reps as f64
        };
        let coarse = mean_jump(1e-3, 1e-3, "coarse");
        let fine = mean_jump(2.5e-4, 6.25e-5, "fine");
        assert!(
            fine < 0.5 * coarse,
            "mass increments did not shrink: coarse {coarse}, fine {fine}"
        );
    }
}
