//! Mean-field limit machinery: the self-consistent ensemble
//! representation of the limiting single-site law, duality-based moment
//! estimates, entrance-law construction by recentring, the nonlinear
//! (u, U) evolution system with its standard solution, the logistic
//! closed form, and tagged-site paths driven by a fixed mean curve.

use crate::dual::{simulate_collision_free_dual, DualError, DualInit};
use crate::forward::{feller_transition, FELLER_CUTOFF};
use crate::malthus::{malthus_summary, MalthusError, MalthusResult};
use crate::model::{derive_stream, run_replicas, ModelParams, SeedSpec};
use crate::numerics::{solve_tridiag, summarize};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MvError {
    #[error("ensemble needs >= 2 members, got {0}")]
    InvalidEnsembleSize(usize),
    #[error("initial value {0} outside [0, 1]")]
    InvalidInit(f64),
    #[error("step size must be positive and finite, got {0}")]
    NonpositiveDt(f64),
    #[error("horizon must be positive and finite, got {0}")]
    InvalidHorizon(f64),
    #[error("moment order must be >= 1")]
    InvalidMoment,
    #[error("need at least 2 replicas, got {0}")]
    TooFewReps(usize),
    #[error("level {0} outside (0, 1/2)")]
    InvalidLevel(f64),
    #[error("mean from level {level} never reached 1/2 within horizon {horizon}")]
    NeverCrossed { level: f64, horizon: f64 },
    #[error("mean curve is empty")]
    CurveEmpty,
    #[error("start time {t0} is above the admissible -10/alpha = {need}")]
    StartTooLate { t0: f64, need: f64 },
    #[error("integration accuracy {got:.3e} misses the budget {want:.3e}")]
    AccuracyNotReached { want: f64, got: f64 },
    #[error(transparent)]
    Malthus(#[from] MalthusError),
    #[error(transparent)]
    Dual(#[from] DualError),
}

// ── Mean curves ────────────────────────────────────────────────────────

/// Recorded mean-mass curve m(t), values in [0, 1], linearly
/// interpolated between records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanCurve {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl MeanCurve {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self, MvError> {
        if times.is_empty() || times.len() != values.len() {
            return Err(MvError::CurveEmpty);
        }
        for w in times.windows(2) {
            if !(w[1] > w[0]) {
                return Err(MvError::InvalidHorizon(w[1]));
            }
        }
        for &v in &values {
            if !(0.0..=1.0).contains(&v) {
                return Err(MvError::InvalidInit(v));
            }
        }
        Ok(MeanCurve { times, values })
    }

    /// Linear interpolation; None outside the recorded span.
    pub fn value_at(&self, t: f64) -> Option<f64> {
        let (first, last) = (*self.times.first()?, *self.times.last()?);
        if t < first || t > last {
            return None;
        }
        let idx = self.times.partition_point(|&u| u < t);
        if idx == 0 {
            return Some(self.values[0]);
        }
        if idx == self.times.len() {
            return Some(*self.values.last().unwrap());
        }
        let (t0, t1) = (self.times[idx - 1], self.times[idx]);
        let (v0, v1) = (self.values[idx - 1], self.values[idx]);
        Some(v0 + (v1 - v0) * (t - t0) / (t1 - t0))
    }

    pub fn span(&self) -> (f64, f64) {
        (self.times[0], *self.times.last().unwrap())
    }

    /// Same curve with all times shifted by -r.
    pub fn recentred(&self, r: f64) -> MeanCurve {
        MeanCurve {
            times: self.times.iter().map(|&t| t - r).collect(),
            values: self.values.clone(),
        }
    }
}

/// One ensemble snapshot; the shared mean is the arithmetic mean of the
/// members.
#[derive(Debug, Clone)]
pub struct EnsembleState {
    pub members: Vec<f64>,
    pub mean: f64,
    pub time: f64,
}

impl EnsembleState {
    fn from_members(members: Vec<f64>, time: f64) -> Self {
        let mean = members.iter().sum::<f64>() / members.len() as f64;
        EnsembleState {
            members,
            mean,
            time,
        }
    }
}

/// M coupled copies of dy = c(mbar - y)dt + s y(1-y)dt + sqrt(d y(1-y))dw
/// with mbar the ensemble mean, recomputed after every step (the particle
/// representation of the limiting law). Init is the point mass at theta0.
pub fn mv_ensemble_simulate(
    params: &ModelParams,
    ensemble: usize,
    theta0: f64,
    t_end: f64,
    dt: f64,
    seed: &SeedSpec,
) -> Result<(MeanCurve, EnsembleState), MvError> {
    if ensemble < 2 {
        return Err(MvError::InvalidEnsembleSize(ensemble));
    }
    if !(0.0..=1.0).contains(&theta0) {
        return Err(MvError::InvalidInit(theta0));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(MvError::NonpositiveDt(dt));
    }
    if !(t_end > 0.0) || !t_end.is_finite() {
        return Err(MvError::InvalidHorizon(t_end));
    }

    let mut rngs: Vec<_> = (0..ensemble)
        .map(|i| derive_stream(&seed.with_label(&format!("{}/member{i}", seed.stream_label))))
        .collect();
    let mut members = vec![theta0; ensemble];
    let n_steps = ((t_end / dt - 1e-9).ceil() as usize).max(1);
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut values = Vec::with_capacity(n_steps + 1);
    times.push(0.0);
    values.push(theta0);

    let (c, s, d) = (params.c, params.s, params.d);
    let mut mean = theta0;
    for step in 0..n_steps {
        let t0 = step as f64 * dt;
        let h = if step + 1 == n_steps { t_end - t0 } else { dt };
        let sqrt_h = h.sqrt();
        members
            .par_iter_mut()
            .zip(rngs.par_iter_mut())
            .for_each(|(y, rng)| {
                let next = if d > 0.0 && *y < FELLER_CUTOFF {
                    feller_transition(*y, c * mean, s - c, d, h, rng)
                } else if d > 0.0 && *y > 1.0 - FELLER_CUTOFF {
                    1.0 - feller_transition(1.0 - *y, c * (1.0 - mean), -(c + s), d, h, rng)
                } else {
                    let drift = c * (mean - *y) + s * *y * (1.0 - *y);
                    let mut v = *y + drift * h;
                    if d > 0.0 {
                        let var = d * *y * (1.0 - *y);
                        if var > 0.0 {
                            let z: f64 = rng.sample(StandardNormal);
                            v += var.sqrt() * sqrt_h * z;
                        }
                    }
                    v
                };
                *y = next.clamp(0.0, 1.0);
            });
        // Deterministic reduction in member order.
        mean = members.iter().sum::<f64>() / ensemble as f64;
        times.push(t0 + h);
        values.push(mean);
    }
    let state = EnsembleState::from_members(members, t_end);
    Ok((MeanCurve::new(times, values)?, state))
}

// ── Duality-based moments ──────────────────────────────────────────────

/// Monte Carlo estimate of E[x2(t)^k] for the limiting law started at
/// the point mass theta.
#[derive(Debug, Clone, Copy)]
pub struct MomentEstimate {
    pub value: f64,
    pub se: f64,
    pub reps_per_order: usize,
}

/// Moment duality: E[x1(t)^j] = E[(1-theta)^{|Pi_t|}] with the dual
/// started as j particles on one site, every emigrant founding a fresh
/// independent site (the limit geography has no collisions). Moments of
/// x2 = 1 - x1 follow by inclusion-exclusion over the orders j <= k.
pub fn mv_dual_moment(
    theta: f64,
    k: usize,
    t: f64,
    params: &ModelParams,
    reps: usize,
    seed: &SeedSpec,
) -> Result<MomentEstimate, MvError> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(MvError::InvalidInit(theta));
    }
    if k == 0 {
        return Err(MvError::InvalidMoment);
    }
    if reps < 2 {
        return Err(MvError::TooFewReps(reps));
    }
    if !(t >= 0.0) || !t.is_finite() {
        return Err(MvError::InvalidHorizon(t));
    }

    let theta1 = 1.0 - theta;
    let mut value = 0.0;
    let mut var = 0.0;
    let mut binom = 1.0; // C(k, j)
    for j in 0..=k {
        if j == 0 {
            value += 1.0;
            binom = k as f64;
            continue;
        }
        let init = DualInit::new(j as u64, 1)?;
        let label = format!("{}/order{j}", seed.stream_label);
        let order_seed = seed.with_label(&label);
        let samples: Vec<f64> = run_replicas(&order_seed, reps, |i, _| {
            let spec = order_seed.with_replica(order_seed.replica_index + i as u64);
            let (traj, _) = simulate_collision_free_dual(&init, params, t, t.max(1e-9), false, &spec)
                .expect("validated args");
            theta1.powi(*traj.pi.last().unwrap() as i32)
        });
        let stats = summarize(&samples);
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        value += sign * binom * stats.mean;
        var += binom * binom * stats.se * stats.se;
        binom *= (k - j) as f64 / (j + 1) as f64;
    }
    Ok(MomentEstimate {
        value,
        se: var.sqrt(),
        reps_per_order: reps,
    })
}

// ── Entrance law by recentring ─────────────────────────────────────────

/// Mean curve started from the point mass at `level`, time-shifted so
/// the mean crosses 1/2 at t = 0, plus the exponentially rescaled tail
/// e^{alpha |t|} m(t) on the negative-t range.
#[derive(Debug, Clone)]
pub struct EntranceCurve {
    pub level: f64,
    pub crossing_time: f64,
    pub curve: MeanCurve,
    pub scaled_negative: Vec<(f64, f64)>,
}

pub fn entrance_law_construct(
    params: &ModelParams,
    alpha: f64,
    ensemble: usize,
    dt: f64,
    levels: &[f64],
    horizon: f64,
    seed: &SeedSpec,
) -> Result<Vec<EntranceCurve>, MvError> {
    if !(alpha > 0.0) {
        return Err(MvError::InvalidHorizon(alpha));
    }
    for &a in levels {
        if !(a > 0.0 && a < 0.5) {
            return Err(MvError::InvalidLevel(a));
        }
    }
    let mut family = Vec::with_capacity(levels.len());
    for (idx, &a) in levels.iter().enumerate() {
        let run_seed = seed.with_label(&format!("{}/level{idx}", seed.stream_label));
        let (curve, _) = mv_ensemble_simulate(params, ensemble, a, horizon, dt, &run_seed)?;
        let crossing = curve
            .times
            .iter()
            .zip(&curve.values)
            .zip(curve.times.iter().skip(1).zip(curve.values.iter().skip(1)))
            .find(|&((_, &v0), (_, &v1))| v0 < 0.5 && v1 >= 0.5)
            .map(|((&t0, &v0), (&t1, &v1))| t0 + (t1 - t0) * (0.5 - v0) / (v1 - v0));
        let r = match crossing {
            Some(r) => r,
            None => return Err(MvError::NeverCrossed { level: a, horizon }),
        };
        let recentred = curve.recentred(r);
        let scaled_negative = recentred
            .times
            .iter()
            .zip(&recentred.values)
            .filter(|&(&t, _)| t < 0.0)
            .map(|(&t, &v)| (t, (alpha * t.abs()).exp() * v))
            .collect();
        family.push(EntranceCurve {
            level: a,
            crossing_time: r,
            curve: recentred,
            scaled_negative,
        });
    }
    Ok(family)
}

// ── The nonlinear (u, U) system ────────────────────────────────────────

/// Occupied-site fraction u plus the size distribution U over occupied
/// sites (index j-1 holds size j); the driving rates are derived from U.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UUState {
    pub u: f64,
    pub big_u: Vec<f64>,
}

impl UUState {
    pub fn new(u: f64, big_u: Vec<f64>) -> Result<Self, MvError> {
        if !(0.0..=1.0).contains(&u) {
            return Err(MvError::InvalidInit(u));
        }
        if big_u.is_empty() {
            return Err(MvError::CurveEmpty);
        }
        let total: f64 = big_u.iter().sum();
        if (total - 1.0).abs() > 1e-8 || big_u.iter().any(|&v| v < -1e-12) {
            return Err(MvError::InvalidInit(total));
        }
        Ok(UUState { u, big_u })
    }

    /// alpha(U) = c · Σ_{j>=2} j U(j).
    pub fn alpha(&self, c: f64) -> f64 {
        c * self
            .big_u
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, &p)| (i + 1) as f64 * p)
            .sum::<f64>()
    }

    /// gamma(U) = c · U(1).
    pub fn gamma(&self, c: f64) -> f64 {
        c * self.big_u[0]
    }

    pub fn b(&self, c: f64) -> f64 {
        let a = self.alpha(c);
        if a == 0.0 {
            f64::INFINITY
        } else {
            1.0 + self.gamma(c) / a
        }
    }

    pub fn total(&self) -> f64 {
        self.big_u.iter().sum()
    }
}

#[derive(Debug, Clone)]
pub struct UUTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<UUState>,
}

impl UUTrajectory {
    pub fn terminal(&self) -> &UUState {
        self.states.last().unwrap()
    }

    /// Linear interpolation of u(t); None outside the span.
    pub fn u_at(&self, t: f64) -> Option<f64> {
        let (first, last) = (*self.times.first()?, *self.times.last()?);
        if t < first || t > last {
            return None;
        }
        let idx = self.times.partition_point(|&v| v < t);
        if idx == 0 {
            return Some(self.states[0].u);
        }
        if idx == self.times.len() {
            return Some(self.states.last().unwrap().u);
        }
        let (t0, t1) = (self.times[idx - 1], self.times[idx]);
        let (u0, u1) = (self.states[idx - 1].u, self.states[idx].u);
        Some(u0 + (u1 - u0) * (t - t0) / (t1 - t0))
    }
}

/// Stiff linear single-site chain: birth s·j (cut at the truncation),
/// death (d/2)j(j-1) + c·j for j >= 2. Column sums vanish, so the flow
/// it generates conserves ΣU exactly.
struct ChainMatrix {
    up: Vec<f64>,   // up[i]: rate out of size i+1 upward
    down: Vec<f64>, // down[i]: rate out of size i+1 downward
}

impl ChainMatrix {
    fn new(params: &ModelParams, j_max: usize) -> Self {
        let mut up = vec![0.0; j_max];
        let mut down = vec![0.0; j_max];
        for i in 0..j_max {
            let j = (i + 1) as f64;
            up[i] = if i + 1 == j_max { 0.0 } else { params.s * j };
            down[i] = if i == 0 {
                0.0
            } else {
                 0.5 * params.d * j * (j - 1.0) + params.c * j
            };
        }
        ChainMatrix { up, down }
    }

    fn apply(&self, u: &[f64], out: &mut [f64]) {
        let n = u.len();
        for i in 0..n {
            let mut v = -(self.up[i] + self.down[i]) * u[i];
            if i > 0 {
                v += self.up[i - 1] * u[i - 1];
            }
            if i + 1 < n {
                v += self.down[i + 1] * u[i + 1];
            }
            out[i] = v;
        }
    }
}

/// Collision and renewal terms of the size equation plus the u-equation;
/// everything that is nonlinear in (u, U). The entries sum to
/// gamma·u - c·u·U(1) = 0, so the full right side conserves ΣU.
fn nonlinear_rhs(params: &ModelParams, u: f64, big_u: &[f64], out: &mut [f64]) -> f64 {
    let n = big_u.len();
    let mut alpha = 0.0;
    for (i, &p) in big_u.iter().enumerate().skip(1) {
        alpha += (i + 1) as f64 * p;
    }
    alpha *= params.c;
    let gamma = params.c * big_u[0];
    let shift = u * (alpha + gamma);
    let comp = alpha * (1.0 - u) - gamma * u;
    for i in 0..n {
        let inflow = if i > 0 { big_u[i - 1] } else { 0.0 };
        // The shift outflow is cut at the truncation boundary so the
        // immigration shift stays conservative.
        let outflow = if i + 1 == n { 0.0 } else { big_u[i] };
        out[i] = shift * (inflow - outflow) - comp * big_u[i];
    }
    out[0] += -params.c * u * big_u[0] + (1.0 - u) * alpha;
    alpha * (1.0 - u) * u - gamma * u * u
}

/// One implicit-midpoint step of size h: the stiff chain part is solved
/// implicitly (tridiagonal), the nonlinear part iterated to the midpoint
/// fixed point. Exactly preserves ΣU and the stationary pair.
fn uu_step(
    params: &ModelParams,
    chain: &ChainMatrix,
    u: f64,
    big_u: &[f64],
    h: f64,
) -> (f64, Vec<f64>) {
    let n = big_u.len();
    let mut lower = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut upper = vec![0.0; n];
    for i in 0..n {
        diag[i] = 1.0 + 0.5 * h * (chain.up[i] + chain.down[i]);
        if i > 0 {
            lower[i] = -0.5 * h * chain.up[i - 1];
        }
        if i + 1 < n {
            upper[i] = -0.5 * h * chain.down[i + 1];
        }
    }
    let mut a_u = vec![0.0; n];
    chain.apply(big_u, &mut a_u);
    let base: Vec<f64> = (0..n).map(|i| big_u[i] + 0.5 * h * a_u[i]).collect();

    let mut x = big_u.to_vec();
    let mut w = u;
    let mut nl = vec![0.0; n];
    for _ in 0..60 {
        let mid_u: Vec<f64> = (0..n).map(|i| 0.5 * (big_u[i] + x[i])).collect();
        let mid_w = 0.5 * (u + w);
        let dw = nonlinear_rhs(params, mid_w, &mid_u, &mut nl);
        let rhs: Vec<f64> = (0..n).map(|i| base[i] + h * nl[i]).collect();
        let x_new = solve_tridiag(&lower, &diag, &upper, &rhs);
        let w_new = (u + h * dw).clamp(0.0, 1.0);
        let delta = x_new
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).abs())
            .fold((w_new - w).abs(), f64::max);
        x = x_new;
        w = w_new;
        if delta < 1e-14 {
            break;
        }
    }
    (w, x)
}

/// Integrates the coupled (u, U) system to `t_end`, recording on a
/// uniform grid. Three implicit-midpoint lanes run at nested fixed
/// substeps h, h/2, h/4; the recorded state is the Richardson
/// extrapolation of the finer pair and the disagreement of the two
/// extrapolants bounds the error against `tol * (1 + t)`. The midpoint
/// scheme conserves the total mass and fixes the stationary pair exactly,
/// and both properties survive the extrapolation blend.
pub fn uu_integrate(
    init: &UUState,
    params: &ModelParams,
    j_max: usize,
    t_end: f64,
    tol: f64,
) -> Result<UUTrajectory, MvError> {
    if !(t_end > 0.0) || !t_end.is_finite() {
        return Err(MvError::InvalidHorizon(t_end));
    }
    if !(tol > 0.0) {
        return Err(MvError::InvalidHorizon(tol));
    }
    let n = j_max.max(init.big_u.len());
    let mut init_u = init.big_u.clone();
    init_u.resize(n, 0.0);
    let chain = ChainMatrix::new(params, n);

    const BASE_MAX: f64 = 2.5e-3;
    const BASE_MIN: f64 = 2e-4;

    // Advances the three lanes across one interval and fills `ext` with
    // the finer extrapolant; returns the extrapolant disagreement.
    let run_interval = |lanes: &mut [(f64, Vec<f64>); 3],
                        interval: f64,
                        base: f64,
                        ext: &mut (f64, Vec<f64>)|
     -> f64 {
        let n_sub = (interval / base).ceil().max(1.0) as usize;
        let h = interval / n_sub as f64;
        for (lane, refine) in lanes.iter_mut().zip([1usize, 2, 4]) {
            let hh = h / refine as f64;
            for _ in 0..n_sub * refine {
                let (w, x) = uu_step(params, &chain, lane.0, &lane.1, hh);
                lane.0 = w;
                lane.1 = x;
            }
        }
        let ua = (4.0 * lanes[1].0 - lanes[0].0) / 3.0;
        let ub = (4.0 * lanes[2].0 - lanes[1].0) / 3.0;
        let mut est = (ua - ub).abs();
        ext.0 = ub.clamp(0.0, 1.0);
        for k in 0..n {
            let xa = (4.0 * lanes[1].1[k] - lanes[0].1[k]) / 3.0;
            let xb = (4.0 * lanes[2].1[k] - lanes[1].1[k]) / 3.0;
            est = est.max((xa - xb).abs());
            ext.1[k] = xb;
        }
        est
    };

    // Calibrate the substep on the opening stretch.
    let mut base = BASE_MAX;
    {
        let t_cal = t_end.min(1.0);
        let mut lanes = [
            (init.u, init_u.clone()),
            (init.u, init_u.clone()),
            (init.u, init_u.clone()),
        ];
        let mut ext = (0.0, vec![0.0; n]);
        let est = run_interval(&mut lanes, t_cal, BASE_MAX, &mut ext);
        let budget = 0.2 * tol * (1.0 + t_cal);
        if est > budget {
            base = (BASE_MAX * (budget / est).powf(0.25)).max(BASE_MIN);
        }
    }

    let n_rec = ((t_end / 0.25).ceil() as usize).clamp(8, 4096);
    let rec_dt = t_end / n_rec as f64;
    let mut traj = UUTrajectory {
        times: Vec::with_capacity(n_rec + 1),
        states: Vec::with_capacity(n_rec + 1),
    };
    let span = (n / 64).max(2);
    let emit = |t: f64, u: f64, big_u: &[f64], traj: &mut UUTrajectory| {
        let tail: f64 = big_u[n - span..].iter().map(|v| v.abs()).sum();
        if tail > 1e-10 {
            return Err(MalthusError::TruncationViolated { j: n, tail });
        }
        traj.times.push(t);
        traj.states.push(UUState {
            u,
            big_u: big_u.to_vec(),
        });
        Ok(())
    };
    emit(0.0, init.u, &init_u, &mut traj)?;

    let mut lanes = [
        (init.u, init_u.clone()),
        (init.u, init_u.clone()),
        (init.u, init_u),
    ];
    let mut ext = (0.0, vec![0.0; n]);
    for k in 1..=n_rec {
        let target = k as f64 * rec_dt;
        let est = run_interval(&mut lanes, rec_dt, base, &mut ext);
        let budget = tol * (1.0 + target);
        if est > budget {
            return Err(MvError::AccuracyNotReached {
                want: budget,
                got: est,
            });
        }
        emit(target, ext.0, &ext.1, &mut traj)?;
    }
    Ok(traj)
}

/// The standard solution: integrate (u, U) from u(t0) = e^{alpha t0},
/// U(t0) = the stable size distribution, with t0 deep in the linear
/// regime. Returned times are absolute (from t0). The truncation doubles
/// on tail violations, as in the stable-constant computations.
#[derive(Debug, Clone)]
pub struct StandardSolution {
    pub trajectory: UUTrajectory,
    pub alpha: f64,
    pub b: f64,
    pub u_at_zero: f64,
    /// |u*(0) - u*(0) recomputed with t0 halved toward zero|.
    pub t0_sensitivity: f64,
}

impl StandardSolution {
    pub fn u_at(&self, t: f64) -> Option<f64> {
        self.trajectory.u_at(t)
    }
}

pub fn u_standard_solution(
    params: &ModelParams,
    j_max: usize,
    t0: f64,
    t_end: f64,
    tol: f64,
) -> Result<StandardSolution, MvError> {
    let mut j = j_max;
    loop {
        match standard_solution_at(params, j, t0, t_end, tol) {
            Err(MvError::Malthus(MalthusError::TruncationViolated { .. })) if j < 4096 => {
                j *= 2;
            }
            other => return other,
        }
    }
}

fn standard_solution_at(
    params: &ModelParams,
    j_max: usize,
    t0: f64,
    t_end: f64,
    tol: f64,
) -> Result<StandardSolution, MvError> {
    let summary: MalthusResult = malthus_summary(params, j_max, 1e-9)?;
    let alpha = summary.alpha;
    let need = -10.0 / alpha;
    if t0 > need {
        return Err(MvError::StartTooLate { t0, need });
    }
    let run = |start: f64| -> Result<UUTrajectory, MvError> {
        let mut probs = summary.u_infty.probs().to_vec();
        probs.resize(j_max, 0.0);
        let init = UUState {
            u: (alpha * start).exp(),
            big_u: probs,
        };
        let mut traj = uu_integrate(&init, params, j_max, t_end - start, tol)?;
        for t in &mut traj.times {
            *t += start;
        }
        Ok(traj)
    };
    let trajectory = run(t0)?;
    let u_at_zero = trajectory.u_at(0.0).unwrap_or(f64::NAN);
    let half = run(t0 / 2.0)?;
    let t0_sensitivity = (u_at_zero - half.u_at(0.0).unwrap_or(f64::NAN)).abs();
    Ok(StandardSolution {
        trajectory,
        alpha,
        b: summary.b(),
        u_at_zero,
        t0_sensitivity,
    })
}

/// Logistic-type closed form u_hat(t) = e^{alpha t} I / (1 + b e^{alpha t} I),
/// written so large |alpha·t| cannot overflow.
pub fn u_hat_closed_form(alpha: f64, b: f64, correction_integral: f64, t: f64) -> f64 {
    assert!(alpha > 0.0 && b > 0.0 && correction_integral > 0.0);
    let z = alpha * t + correction_integral.ln();
    1.0 / ((-z).exp() + b)
}

// ── Tagged sites ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TaggedPaths {
    pub times: Vec<f64>,
    /// paths[l][k] = value of path l at times[k].
    pub paths: Vec<Vec<f64>>,
}

impl TaggedPaths {
    pub fn mean_path(&self) -> Vec<f64> {
        let n = self.times.len();
        let mut mean = vec![0.0; n];
        for path in &self.paths {
            for (m, &v) in mean.iter_mut().zip(path) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= self.paths.len() as f64;
        }
        mean
    }
}

/// L independent copies of dy = c(m(t) - y)dt + s y(1-y)dt +
/// sqrt(d y(1-y))dw driven by the fixed mean curve, started at `start`
/// at the curve's first time. The propagation-of-chaos picture: tagged
/// sites decouple given the limiting mean.
pub fn tagged_sites_simulate(
    mean_curve: &MeanCurve,
    params: &ModelParams,
    l_paths: usize,
    dt: f64,
    start: f64,
    seed: &SeedSpec,
) -> Result<TaggedPaths, MvError> {
    if l_paths < 1 {
        return Err(MvError::InvalidEnsembleSize(l_paths));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(MvError::NonpositiveDt(dt));
    }
    if !(0.0..=1.0).contains(&start) {
        return Err(MvError::InvalidInit(start));
    }
    let (t_begin, t_final) = mean_curve.span();
    if !(t_final > t_begin) {
        return Err(MvError::CurveEmpty);
    }
    let horizon = t_final - t_begin;
    let n_steps = ((horizon / dt - 1e-9).ceil() as usize).max(1);
    let times: Vec<f64> = (0..=n_steps)
        .map(|k| {
            if k == n_steps {
                t_final
            } else {
                t_begin + k as f64 * dt
            }
        })
        .collect();

    let (c, s, d) = (params.c, params.s, params.d);
    let paths: Vec<Vec<f64>> = run_replicas(seed, l_paths, |_, rng| {
        let mut y = start;
        let mut path = Vec::with_capacity(n_steps + 1);
        path.push(y);
        for k in 0..n_steps {
            let t = times[k];
            let h = times[k + 1] - t;
            let m = mean_curve.value_at(t).expect("inside span");
            let next = if d > 0.0 && y < FELLER_CUTOFF {
                feller_transition(y, c * m, s - c, d, h, rng)
            } else if d > 0.0 && y > 1.0 - FELLER_CUTOFF {
                1.0 - feller_transition(1.0 - y, c * (1.0 - m), -(c + s), d, h, rng)
            } else {
                let drift = c * (m - y) + s * y * (1.0 - y);
                let mut v = y + drift * h;
                if d > 0.0 {
                    let var = d * y * (1.0 - y);
                    if var > 0.0 {
                        let z: f64 = rng.sample(StandardNormal);
                        v += var.sqrt() * h.sqrt() * z;
                    }
                }
                v
            };
            y = next.clamp(0.0, 1.0);
            path.push(y);
        }
        path
    });
    Ok(TaggedPaths { times, paths })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::malthus::malthus_summary;
    use approx::assert_relative_eq;

    fn seed(label: &str) -> SeedSpec {
        SeedSpec::new(88_501, 0, label)
    }

    fn unit_params() -> ModelParams {
        ModelParams::new(1.0, 1.0, 1.0, 1.0, 1).unwrap()
    }

    #[test]
    fn mean_curve_interpolation() {
        let curve = MeanCurve::new(vec![0.0, 1.0, 2.0], vec![0.0, 0.5, 0.25]).unwrap();
        assert_eq!(curve.value_at(0.0), Some(0.0));
        assert_eq!(curve.value_at(2.0), Some(0.25));
        assert_relative_eq!(curve.value_at(0.5).unwrap(), 0.25);
        assert_relative_eq!(curve.value_at(1.5).unwrap(), 0.375);
        assert_eq!(curve.value_at(-0.1), None);
        assert_eq!(curve.value_at(2.1), None);
        assert!(MeanCurve::new(vec![0.0, 0.0], vec![0.1, 0.2]).is_err());
        assert!(MeanCurve::new(vec![0.0, 1.0], vec![0.1, 1.2]).is_err());
    }

    #[test]
    fn ensemble_absorbing_endpoints() {
        let params = unit_params();
        let (curve, state) =
            mv_ensemble_simulate(&params, 50, 0.0, 1.0, 1e-2, &seed("abs0")).unwrap();
        assert!(curve.values.iter().all(|&v| v == 0.0));
        assert!(state.members.iter().all(|&v| v == 0.0));
        let (curve, state) =
            mv_ensemble_simulate(&params, 50, 1.0, 1.0, 1e-2, &seed("abs1")).unwrap();
        assert!(curve.values.iter().all(|&v| v == 1.0));
        assert!(state.members.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ensemble_is_reproducible() {
        let params = unit_params();
        let (a, _) = mv_ensemble_simulate(&params, 100, 0.3, 0.5, 1e-3, &seed("repro")).unwrap();
        let (b, _) = mv_ensemble_simulate(&params, 100, 0.3, 0.5, 1e-3, &seed("repro")).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn dual_moment_trivial_values() {
        let params = unit_params();
        let est = mv_dual_moment(1.0, 3, 1.0, &params, 10, &seed("mm-one")).unwrap();
        assert_eq!(est.value, 1.0);
        assert_eq!(est.se, 0.0);

        let est = mv_dual_moment(0.3, 1, 0.0, &params, 10, &seed("mm-zero")).unwrap();
        assert_relative_eq!(est.value, 0.3, epsilon = 1e-12);

        // Without branching or coalescence a single dual particle only
        // migrates, so |Pi| stays 1 and the first moment is frozen.
        let drift_only = ModelParams::new(1.0, 0.0, 0.0, 1.0, 1).unwrap();
        let est = mv_dual_moment(0.3, 1, 2.0, &drift_only, 10, &seed("mm-frozen")).unwrap();
        assert_relative_eq!(est.value, 0.3, epsilon = 1e-12);
        assert!(est.se < 1e-15);
    }

    #[test]
    fn ensemble_moments_match_duality() {
        // The ensemble and the dual estimate the same moments of the
        // limiting law; agreement within combined MC error.
        let params = unit_params();
        let theta = 0.3;
        let t = 1.0;
        let (_, state) =
            mv_ensemble_simulate(&params, 4000, theta, t, 1e-3, &seed("mom-ens")).unwrap();
        for k in 1..=2usize {
            let ens: Vec<f64> = state.members.iter().map(|&y| y.powi(k as i32)).collect();
            let ens_stats = summarize(&ens);
            let dual = mv_dual_moment(theta, k, t, &params, 4000, &seed("mom-dual")).unwrap();
            let gap = (ens_stats.mean - dual.value).abs();
            let se = (ens_stats.se.powi(2) + dual.se.powi(2)).sqrt();
            assert!(
                gap < 3.0 * se,
                "k={k}: ensemble {} vs dual {} (gap {gap}, se {se})",
                ens_stats.mean,
                dual.value
            );
        }
    }

    #[test]
    fn uu_stationary_pair_is_preserved() {
        let params = unit_params();
        let summary = malthus_summary(&params, 256, 1e-9).unwrap();
        let init = UUState::new(0.0, summary.u_infty.probs().to_vec()).unwrap();
        let traj = uu_integrate(&init, &params, 256, 10.0, 1e-7).unwrap();
        let end = traj.terminal();
        assert_eq!(end.u, 0.0, "u must stay exactly absorbed at 0");
        let drift = end
            .big_u
            .iter()
            .zip(&traj.states[0].big_u)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        // The fixed point is known to the alpha-solve residual, so the
        // flow may wander by that much but no more.
        assert!(drift < 1e-7, "stationary U drifted by {drift}");
    }

    #[test]
    fn uu_flow_preserves_probability_vector() {
        let params = unit_params();
        // Geometric-ish start away from equilibrium.
        let mut probs: Vec<f64> = (0..64).map(|i| 0.5f64.powi(i as i32 + 1)).collect();
        let total: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= total;
        }
        let init = UUState::new(0.25, probs).unwrap();
        let traj = uu_integrate(&init, &params, 256, 5.0, 1e-7).unwrap();
        for (t, state) in traj.times.iter().zip(&traj.states) {
            assert!(
                (state.total() - 1.0).abs() < 1e-9 * (1.0 + t),
                "mass drift {} at t={t}",
                state.total() - 1.0
            );
            assert!((0.0..=1.0).contains(&state.u), "u left [0,1] at t={t}");
        }
    }

    #[test]
    fn frozen_rate_u_equation_matches_logistic_form() {
        // du/dt = alpha u(1-u) - gamma u^2 with constant rates has the
        // closed form; check against a fine RK4 integration.
        let (alpha, gamma) = (0.7, 0.33);
        let b = 1.0 + gamma / alpha;
        let t0 = -14.0;
        let mut u = u_hat_closed_form(alpha, b, 1.0, t0);
        let h = 1e-4;
        let f = |u: f64| alpha * u * (1.0 - u) - gamma * u * u;
        let steps = ((14.0 - t0) / h) as usize;
        for k in 0..steps {
            let _t = t0 + k as f64 * h;
            let k1 = f(u);
            let k2 = f(u + 0.5 * h * k1);
            let k3 = f(u + 0.5 * h * k2);
            let k4 = f(u + h * k3);
            u += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        let expect = u_hat_closed_form(alpha, b, 1.0, t0 + steps as f64 * h);
        assert_relative_eq!(u, expect, epsilon = 1e-8);
        // Endpoint limits of the closed form itself.
        assert!(u_hat_closed_form(alpha, b, 1.0, -200.0) < 1e-30);
        assert_relative_eq!(
            u_hat_closed_form(alpha, b, 1.0, 500.0),
            1.0 / b,
            epsilon = 1e-12
        );
    }

    #[test]
    fn standard_solution_shape_and_convergence() {
        let params = unit_params();
        let probe = malthus_summary(&params, 256, 1e-9).unwrap();
        let alpha = probe.alpha;
        let t0 = -24.0 / alpha;
        let t_end = 12.0 / alpha;
        let sol = u_standard_solution(&params, 256, t0, t_end, 1e-8).unwrap();
        // Early linear regime: e^{-alpha t} u*(t) stays near 1.
        for (t, state) in sol.trajectory.times.iter().zip(&sol.trajectory.states) {
            if *t <= t0 + 2.0 {
                let ratio = state.u / (alpha * t).exp();
                assert!(
                    (0.95..=1.0 + 1e-9).contains(&ratio),
                    "ratio {ratio} at t={t}"
                );
            }
        }
        // Late time: u approaches the equilibrium where alpha(t)(1-u) =
        // gamma(t)u, i.e. the residual of (grocoll-type) balance -> 0.
        let end = sol.trajectory.terminal();
        let residual =
            end.alpha(params.c) * (1.0 - end.u) - end.gamma(params.c) * end.u;
        assert!(
            residual.abs() < 1e-4,
            "equilibrium residual {residual} (u={})",
            end.u
        );
        assert!(
            sol.t0_sensitivity < 1e-4,
            "t0 sensitivity {}",
            sol.t0_sensitivity
        );
        // Time-shift covariance: starting at t0 + tau reproduces the
        // same curve on the overlap.
        let tau = 3.0 / alpha;
        let shifted = u_standard_solution(&params, 256, t0 + tau, t_end, 1e-8).unwrap();
        let mut worst: f64 = 0.0;
        for t in [-4.0 / alpha, -1.0 / alpha, 0.0, 4.0 / alpha] {
            let a = sol.trajectory.u_at(t).unwrap();
            let b = shifted.trajectory.u_at(t).unwrap();
            worst = worst.max((a - b).abs());
        }
        assert!(worst < 1e-4, "shift mismatch {worst}");
    }

    #[test]
    fn tagged_paths_trivial_and_monotone() {
        let params = unit_params();
        let zero_curve = MeanCurve::new(vec![0.0, 1.0, 2.0], vec![0.0, 0.0, 0.0]).unwrap();
        let paths =
            tagged_sites_simulate(&zero_curve, &params, 20, 1e-2, 0.0, &seed("tag0")).unwrap();
        assert!(paths.paths.iter().flatten().all(|&v| v == 0.0));

        let one_curve = MeanCurve::new(vec![0.0, 1.0, 2.0], vec![1.0, 1.0, 1.0]).unwrap();
        let paths =
            tagged_sites_simulate(&one_curve, &params, 400, 1e-2, 0.0, &seed("tag1")).unwrap();
        let mean = paths.mean_path();
        let at = |t: f64| {
            let idx = paths.times.partition_point(|&u| u < t - 1e-12);
            mean[idx]
        };
        assert!(at(0.5) > 0.2, "mass pulled up by the mean field");
        assert!(at(2.0) > at(1.0) && at(1.0) > at(0.5), "monotone approach");
        assert!(at(2.0) > 0.8);
    }

    #[test]
    fn tagged_paths_reproduce_their_driving_mean() {
        let params = unit_params();
        let theta = 0.3;
        let (curve, _) =
            mv_ensemble_simulate(&params, 2000, theta, 1.5, 1e-3, &seed("chaos-ens")).unwrap();
        let paths =
            tagged_sites_simulate(&curve, &params, 2000, 1e-3, theta, &seed("chaos-tag")).unwrap();
        let mean = paths.mean_path();
        // Compare at the final time; tagged paths are iid, so the SE is
        // the sample SD over paths / sqrt(L).
        let finals: Vec<f64> = paths.paths.iter().map(|p| *p.last().unwrap()).collect();
        let stats = summarize(&finals);
        let target = *curve.values.last().unwrap();
        let gap = (mean.last().unwrap() - target).abs();
        // The driving curve is itself MC noise of a 2000-member
        // ensemble; fold a matching variance into the tolerance.
        let se = (2.0f64).sqrt() * stats.se;
        assert!(
            gap < 3.0 * se,
            "tagged mean {} vs driving mean {target} (se {se})",
            mean.last().unwrap()
        );
    }

    #[test]
    fn entrance_family_recentres_and_stabilizes() {
        let params = unit_params();
        let summary = malthus_summary(&params, 256, 1e-9).unwrap();
        let levels = [0.05, 0.02];
        let family = entrance_law_construct(
            &params,
            summary.alpha,
            2000,
            1e-3,
            &levels,
            40.0,
            &seed("entrance"),
        )
        .unwrap();
        assert_eq!(family.len(), 2);
        for ec in &family {
            // Mean = 1/2 at t = 0 by construction.
            let v = ec.curve.value_at(0.0).unwrap();
            assert!((v - 0.5).abs() < 5e-3, "recentred value {v}");
            // Coarse monotonicity through the crossing, well above the
            // per-record MC noise of the 2000-member ensemble.
            let before = ec.curve.value_at(-2.0).unwrap();
            let after = ec.curve.value_at(2.0).unwrap();
            assert!(before < 0.45, "pre-crossing mean {before}");
            assert!(after > 0.55, "post-crossing mean {after}");
        }
        // Smaller starting level means a later crossing.
        assert!(family[1].crossing_time > family[0].crossing_time);

        let bad = entrance_law_construct(
            &params,
            summary.alpha,
            100,
            1e-2,
            &[0.7],
            5.0,
            &seed("entrance-bad"),
        );
        assert!(bad.is_err());
    }
}
