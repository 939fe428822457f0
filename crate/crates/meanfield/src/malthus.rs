//! Deterministic numerics for the single-site birth-death chains of the
//! dual process, and the Malthusian growth constant alpha computed two
//! independent ways:
//!
//! * renewal route: alpha solves c ∫ e^{-a t} E[zeta0(t) 1{zeta0 >= 2}] dt = 1,
//!   with the transient mean obtained from the truncated forward Kolmogorov
//!   system (Crank-Nicolson, adaptive step doubling);
//! * fixed-point route: alpha solves F(a) = a where F(a) = c Σ_{j>=2} j q*_j(a)
//!   and q*(a) is the stationary law of the chain with reset-to-1 at rate a.
//!
//! The chain has birth rate s·k and death rate c·k·1{k>=2} + (d/2)k(k-1);
//! the variant without the singleton exemption (death c·k from k = 1,
//! absorbing at 0) supplies f(t) = E[D~0(t)] for the droplet renewal
//! equation.

use crate::model::ModelParams;
use crate::numerics::solve_dense;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MalthusError {
    #[error("rates must satisfy c,s,d > 0, got c={c}, s={s}, d={d}")]
    NeedsPositiveRates { c: f64, s: f64, d: f64 },
    #[error("truncation tail mass {tail:.3e} exceeds 1e-10 at J = {j}")]
    TruncationViolated { j: usize, tail: f64 },
    #[error("no sign change for the renewal root on ({lo:.3e}, {hi:.3e})")]
    NoSignChange { lo: f64, hi: f64 },
    #[error("fixed-point bracket failure on ({lo:.3e}, {hi:.3e})")]
    BracketFailure { lo: f64, hi: f64 },
    #[error("truncated generator numerically singular at J = {0}")]
    SingularGenerator(usize),
    #[error("time grid must be nonempty, nonnegative, strictly increasing")]
    InvalidGrid,
    #[error("chain mean not settled by t = {0}; cannot close the renewal tail")]
    TailNotSettled(f64),
    #[error("chain march accuracy {got:.3e} misses the budget {want:.3e}")]
    AccuracyNotReached { want: f64, got: f64 },
}

const TAIL_LIMIT: f64 = 1e-10;
const J_CAP: usize = 4096;

/// Truncated single-site birth-death chain. States are particle counts;
/// vectors are indexed by size 0..=j_max (size 0 stays empty for the
/// exempt variant, absorbing for the migrating variant).
#[derive(Debug, Clone, Copy)]
pub struct BDChainSpec {
    pub s: f64,
    pub c: f64,
    pub d: f64,
    /// true: death c·k only from k >= 2 (occupied-site chain zeta0);
    /// false: death c·k from every k >= 1, absorbing at 0 (chain D~0).
    pub singleton_exempt: bool,
    pub j_max: usize,
}

impl BDChainSpec {
    /// Chain of an occupied site: singletons do not emigrate.
    pub fn occupied_chain(params: &ModelParams, j_max: usize) -> Self {
        BDChainSpec {
            s: params.s,
            c: params.c,
            d: params.d,
            singleton_exempt: true,
            j_max,
        }
    }

    /// Chain with every particle migrating (loss rate c·k from k = 1 up).
    pub fn migrating_chain(params: &ModelParams, j_max: usize) -> Self {
        BDChainSpec {
            s: params.s,
            c: params.c,
            d: params.d,
            singleton_exempt: false,
            j_max,
        }
    }

    fn birth(&self, k: usize) -> f64 {
        if k == 0 || k >= self.j_max {
            0.0 // truncation: no flux out of the top state
        } else {
            self.s * k as f64
        }
    }

    fn death(&self, k: usize) -> f64 {
        let kf = k as f64;
        let pair = 0.5 * self.d * kf * (kf - 1.0);
        let single = if k >= 2 || (!self.singleton_exempt && k == 1) {
            self.c * kf
        } else {
            0.0
        };
        pair + single
    }
}

/// Thomas solve of a tridiagonal system into `out`, with `cp` as scratch.
/// The CN matrix here is strictly diagonally dominant by columns, so no
/// pivoting is needed.
fn thomas_into(
    lower: &[f64],
    middle: &[f64],
    upper: &[f64],
    rhs: &[f64],
    cp: &mut [f64],
    out: &mut [f64],
) {
    let n = rhs.len();
    let mut beta = middle[0];
    cp[0] = upper[0] / beta;
    out[0] = rhs[0] / beta;
    for i in 1..n {
        beta = middle[i] - lower[i] * cp[i - 1];
        cp[i] = upper[i] / beta;
        out[i] = (rhs[i] - lower[i] * out[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        out[i] -= cp[i] * out[i + 1];
    }
}

/// One Crank-Nicolson lane of the chain march: keeps its own state vector,
/// factor arrays for the current substep, and scratch buffers.
struct CnLane {
    p: Vec<f64>,
    h: f64,
    lower: Vec<f64>,
    middle: Vec<f64>,
    upper: Vec<f64>,
    rhs: Vec<f64>,
    cp: Vec<f64>,
    next: Vec<f64>,
}

impl CnLane {
    fn new(n: usize) -> Self {
        let mut p = vec![0.0; n];
        p[1] = 1.0; // unit mass at size 1
        CnLane {
            p,
            h: f64::NAN,
            lower: vec![0.0; n],
            middle: vec![0.0; n],
            upper: vec![0.0; n],
            rhs: vec![0.0; n],
            cp: vec![0.0; n],
            next: vec![0.0; n],
        }
    }

    fn set_h(&mut self, h: f64, sub: &[f64], diag: &[f64], sup: &[f64]) {
        if self.h == h {
            return;
        }
        self.h = h;
        let half = 0.5 * h;
        for k in 0..sub.len() {
            self.lower[k] = -half * sub[k];
            self.middle[k] = 1.0 - half * diag[k];
            self.upper[k] = -half * sup[k];
        }
    }

    /// (I - h/2 A) p_next = (I + h/2 A) p.
    fn step(&mut self, sub: &[f64], diag: &[f64], sup: &[f64]) {
        let half = 0.5 * self.h;
        let n = self.p.len();
        for k in 0..n {
            let mut v = (1.0 + half * diag[k]) * self.p[k];
            if k > 0 {
                v += half * sub[k] * self.p[k - 1];
            }
            if k + 1 < n {
                v += half * sup[k] * self.p[k + 1];
            }
            self.rhs[k] = v;
        }
        thomas_into(
            &self.lower,
            &self.middle,
            &self.upper,
            &self.rhs,
            &mut self.cp,
            &mut self.next,
        );
        std::mem::swap(&mut self.p, &mut self.next);
    }
}

/// Integrates the forward Kolmogorov system dp/dt = Q^T p from a unit mass
/// at size 1 and emits (t, p) at each requested target time (targets must
/// be nonnegative and strictly increasing). Three Crank-Nicolson lanes at
/// nested fixed substeps h, h/2, h/4 are advanced together; the emitted
/// state is the Richardson extrapolation of the two finer lanes and the
/// disagreement of the two extrapolants bounds the error. `tol` is the L1
/// budget at time t, scaled as tol*(1 + t).
pub(crate) fn march_chain<F>(
    spec: &BDChainSpec,
    targets: &[f64],
    tol: f64,
    mut emit: F,
) -> Result<(), MalthusError>
where
    F: FnMut(f64, &[f64]),
{
    if targets.is_empty() || targets[0] < 0.0 {
        return Err(MalthusError::InvalidGrid);
    }
    for w in targets.windows(2) {
        if w[1] <= w[0] {
            return Err(MalthusError::InvalidGrid);
        }
    }
    let n = spec.j_max + 1;
    // Tridiagonal A = Q^T over sizes 0..=j_max.
    let mut sub = vec![0.0; n]; // sub[k] multiplies p[k-1]: birth(k-1)
    let mut diag = vec![0.0; n];
    let mut sup = vec![0.0; n]; // sup[k] multiplies p[k+1]: death(k+1)
    for k in 0..n {
        if k > 0 {
            sub[k] = spec.birth(k - 1);
        }
        diag[k] = -(spec.birth(k) + spec.death(k));
        if k + 1 < n {
            sup[k] = spec.death(k + 1);
        }
    }

    const BASE_MAX: f64 = 2.5e-3;
    const BASE_MIN: f64 = 1e-4;

    // Advances all three lanes from t to t + interval and returns
    // (extrapolant, error estimate); ext_b lands in `ext`.
    let run_interval = |lanes: &mut [CnLane; 3],
                        interval: f64,
                        base: f64,
                        ext: &mut [f64]|
     -> f64 {
        let n_sub = (interval / base).ceil().max(1.0) as usize;
        let h = interval / n_sub as f64;
        for (lane, refine) in lanes.iter_mut().zip([1usize, 2, 4]) {
            lane.set_h(h / refine as f64, &sub, &diag, &sup);
            for _ in 0..n_sub * refine {
                lane.step(&sub, &diag, &sup);
            }
        }
        let mut est = 0.0;
        for k in 0..n {
            let ext_a = (4.0 * lanes[1].p[k] - lanes[0].p[k]) / 3.0;
            let ext_b = (4.0 * lanes[2].p[k] - lanes[1].p[k]) / 3.0;
            est += (ext_b - ext_a).abs();
            ext[k] = ext_b;
        }
        est
    };

    // Calibration: march to min(1, t_end) at the coarsest substep and size
    // the production substep from the observed quartic error.
    let t_last = *targets.last().unwrap();
    let mut base = BASE_MAX;
    let t_cal = t_last.min(1.0);
    if t_cal > 0.0 {
        let mut lanes = [CnLane::new(n), CnLane::new(n), CnLane::new(n)];
        let mut ext = vec![0.0; n];
        let est = run_interval(&mut lanes, t_cal, BASE_MAX, &mut ext);
        let budget = 0.25 * tol * (1.0 + t_cal);
        if est > budget {
            base = (BASE_MAX * (budget / est).powf(0.25)).max(BASE_MIN);
        }
    }

    let tail_of = |p: &[f64]| -> f64 {
        let span = (spec.j_max / 64).max(2);
        p[n - span..].iter().map(|v| v.abs()).sum()
    };

    let mut lanes = [CnLane::new(n), CnLane::new(n), CnLane::new(n)];
    let mut ext = vec![0.0; n];
    let mut t = 0.0;
    for (idx, &target) in targets.iter().enumerate() {
        if target > t {
            let est = run_interval(&mut lanes, target - t, base, &mut ext);
            let budget = tol * (1.0 + target);
            if est > budget {
                return Err(MalthusError::AccuracyNotReached {
                    want: budget,
                    got: est,
                });
            }
            t = target;
        } else if idx == 0 {
            ext.copy_from_slice(&lanes[2].p); // target 0: initial state
        }
        let tail = tail_of(&ext);
        if tail > TAIL_LIMIT {
            return Err(MalthusError::TruncationViolated {
                j: spec.j_max,
                tail,
            });
        }
        emit(target, &ext);
    }
    Ok(())
}

/// E[zeta0(t)·1{zeta0(t) >= 2}] of the occupied-site chain on the given
/// grid, from the truncated forward Kolmogorov system.
pub fn bd_transient_mean(spec: &BDChainSpec, t_grid: &[f64]) -> Result<Vec<f64>, MalthusError> {
    let mut out = Vec::with_capacity(t_grid.len());
    march_chain(spec, t_grid, 1e-9, |_, p| {
        out.push(restricted_mean(p));
    })?;
    Ok(out)
}

/// f(t) = E[D~0(t)] of the migrating chain (death c·k from k = 1,
/// absorbing at 0) on the given grid.
pub fn dual_mean_f(
    params: &ModelParams,
    t_grid: &[f64],
    j_max: usize,
) -> Result<Vec<f64>, MalthusError> {
    let spec = BDChainSpec::migrating_chain(params, j_max);
    let mut out = Vec::with_capacity(t_grid.len());
    march_chain(&spec, t_grid, 1e-9, |_, p| {
        out.push(full_mean(p));
    })?;
    Ok(out)
}

fn restricted_mean(p: &[f64]) -> f64 {
    p.iter()
        .enumerate()
        .skip(2)
        .map(|(k, &v)| k as f64 * v)
        .sum()
}

fn full_mean(p: &[f64]) -> f64 {
    p.iter()
        .enumerate()
        .skip(1)
        .map(|(k, &v)| k as f64 * v)
        .sum()
}

/// Probability vector over sizes 1..=J (index j-1 holds size j).
/// Normalized exactly at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeDistribution {
    probs: Vec<f64>,
}

impl SizeDistribution {
    pub fn new(mut probs: Vec<f64>) -> Result<Self, MalthusError> {
        if probs.is_empty() {
            return Err(MalthusError::InvalidGrid);
        }
        for v in &mut probs {
            if *v < 0.0 {
                if *v < -1e-8 {
                    return Err(MalthusError::SingularGenerator(probs.len()));
                }
                *v = 0.0;
            }
        }
        let total: f64 = probs.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(MalthusError::SingularGenerator(probs.len()));
        }
        for v in &mut probs {
            *v /= total;
        }
        Ok(SizeDistribution { probs })
    }

    /// Probability of size j (1-based); 0 beyond the truncation.
    pub fn prob(&self, j: usize) -> f64 {
        if j == 0 {
            0.0
        } else {
            self.probs.get(j - 1).copied().unwrap_or(0.0)
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn mean_size(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(i, &v)| (i + 1) as f64 * v)
            .sum()
    }

    /// c·Σ_{j>=2} j·prob(j): the migrant flux functional F.
    pub fn flux(&self, c: f64) -> f64 {
        c * self
            .probs
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, &v)| (i + 1) as f64 * v)
            .sum::<f64>()
    }
}

/// Stationary law q*(a) of the occupied-site chain with an extra
/// reset-to-1 at rate a from every state >= 2, solved from the truncated
/// generator with a normalization row.
pub fn equilibrium_qstar(
    a: f64,
    params: &ModelParams,
    j_max: usize,
) -> Result<SizeDistribution, MalthusError> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(MalthusError::BracketFailure { lo: a, hi: a });
    }
    let spec = BDChainSpec::occupied_chain(params, j_max);
    let j = j_max;
    let n = j; // states 1..=J
    let idx = |size: usize| size - 1;

    // A = Q^T (columns: source state), built twice since the solver
    // destroys its input and we want a residual check afterwards.
    let build = || -> Vec<f64> {
        let mut m = vec![0.0f64; n * n];
        for size in 1..=j {
            let col = idx(size);
            let mut out_rate = 0.0;
            let b = spec.birth(size);
            if b > 0.0 {
                m[idx(size + 1) * n + col] += b;
                out_rate += b;
            }
            let dth = spec.death(size);
            if size >= 2 && dth > 0.0 {
                m[idx(size - 1) * n + col] += dth;
                out_rate += dth;
            }
            if size >= 2 {
                m[idx(1) * n + col] += a;
                out_rate += a;
            }
            m[col * n + col] -= out_rate;
        }
        m
    };

    let mut mat = build();
    let mut rhs = vec![0.0; n];
    // Replace the top-state balance row by normalization.
    for col in 0..n {
        mat[(n - 1) * n + col] = 1.0;
    }
    rhs[n - 1] = 1.0;
    let pi = solve_dense(&mut mat, &mut rhs, n).ok_or(MalthusError::SingularGenerator(j))?;

    // Residual of the untouched balance equations.
    let qt = build();
    let mut resid = 0.0f64;
    for row in 0..n - 1 {
        let mut acc = 0.0;
        for col in 0..n {
            acc += qt[row * n + col] * pi[col];
        }
        resid = resid.max(acc.abs());
    }
    if resid > 1e-8 {
        return Err(MalthusError::SingularGenerator(j));
    }

    let span = (j / 64).max(2);
    let tail: f64 = pi[n - span..].iter().map(|v| v.abs()).sum();
    if tail > TAIL_LIMIT {
        return Err(MalthusError::TruncationViolated { j, tail });
    }
    SizeDistribution::new(pi)
}

fn require_positive(params: &ModelParams) -> Result<(), MalthusError> {
    if params.c > 0.0 && params.s > 0.0 && params.d > 0.0 {
        Ok(())
    } else {
        Err(MalthusError::NeedsPositiveRates {
            c: params.c,
            s: params.s,
            d: params.d,
        })
    }
}

/// Renewal-equation value G(a) + 1 = c ∫_0^∞ e^{-a t} q(t) dt evaluated
/// from samples of q on a uniform grid (composite Simpson) plus the
/// analytic tail c·q(T)·e^{-aT}/a for the settled remainder.
fn renewal_value(q: &[f64], h: f64, a: f64) -> f64 {
    let n = q.len() - 1; // even by construction
    let mut acc = 0.0;
    for (k, &qk) in q.iter().enumerate() {
        let w = if k == 0 || k == n {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * qk * (-a * k as f64 * h).exp();
    }
    let integral = acc * h / 3.0;
    let t_end = n as f64 * h;
    integral + q[n] * (-a * t_end).exp() / a
}

/// Transient functional q(t) on a uniform grid fine enough for the
/// renewal quadrature, with the horizon extended until q has settled.
fn settled_grid(
    params: &ModelParams,
    j_max: usize,
) -> Result<(Vec<f64>, f64), MalthusError> {
    let h: f64 = 2.5e-3;
    for t_end in [60.0, 120.0, 240.0] {
        let n = {
            let raw = (t_end / h).round() as usize;
            raw + raw % 2
        };
        let targets: Vec<f64> = (0..=n).map(|k| k as f64 * h).collect();
        let spec = BDChainSpec::occupied_chain(params, j_max);
        let q = bd_transient_mean(&spec, &targets)?;
        let settle_window = (1.0 / h) as usize;
        let settled = (q[n] - q[n - settle_window]).abs() <= 1e-9 * q[n].abs().max(1.0);
        if settled {
            return Ok((q, h));
        }
    }
    Err(MalthusError::TailNotSettled(240.0))
}

fn bisect<G: FnMut(f64) -> f64>(
    mut lo: f64,
    mut hi: f64,
    mut g: G,
    tol_x: f64,
) -> Option<f64> {
    let mut glo = g(lo);
    let ghi = g(hi);
    if glo == 0.0 {
        return Some(lo);
    }
    if ghi == 0.0 {
        return Some(hi);
    }
    if glo.signum() == ghi.signum() {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let gm = g(mid);
        if gm == 0.0 || hi - lo < tol_x {
            return Some(mid);
        }
        if gm.signum() == glo.signum() {
            lo = mid;
            glo = gm;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

const ALPHA_TOL_X: f64 = 1e-8;

/// Growth constant by the renewal route. `j_max` is the starting
/// truncation; it doubles automatically (up to 4096) when the tail
/// criterion trips. Residual |c∫e^{-at}q - 1| < tol is enforced.
pub fn malthusian_renewal(
    params: &ModelParams,
    j_max: usize,
    tol: f64,
) -> Result<f64, MalthusError> {
    require_positive(params)?;
    let mut j = j_max.max(16);
    loop {
        match renewal_at(params, j, tol) {
            Err(MalthusError::TruncationViolated { .. }) if j < J_CAP => j *= 2,
            other => return other,
        }
    }
}

fn renewal_at(params: &ModelParams, j_max: usize, tol: f64) -> Result<f64, MalthusError> {
    let (q, h) = settled_grid(params, j_max)?;
    let c = params.c;
    let mut g = |a: f64| c * renewal_value(&q, h, a) - 1.0;
    let lo = 1e-9;
    let hi = params.s * (1.0 - 1e-12);
    if !(g(lo) > 0.0 && g(hi) < 0.0) {
        return Err(MalthusError::NoSignChange { lo, hi });
    }
    let alpha = bisect(lo, hi, &mut g, ALPHA_TOL_X)
        .ok_or(MalthusError::NoSignChange { lo, hi })?;
    let resid = g(alpha).abs();
    if resid > tol {
        return Err(MalthusError::NoSignChange { lo, hi });
    }
    Ok(alpha)
}

/// Growth constant and stable size distribution by the fixed-point route:
/// alpha solves F(a) = a with F(a) = c Σ_{j>=2} j q*_j(a), which is
/// decreasing while the identity increases, so the crossing is unique.
pub fn malthusian_fixed_point(
    params: &ModelParams,
    j_max: usize,
    tol: f64,
) -> Result<(f64, SizeDistribution), MalthusError> {
    require_positive(params)?;
    let mut j = j_max.max(16);
    loop {
        match fixed_point_at(params, j, tol) {
            Err(MalthusError::TruncationViolated { .. }) if j < J_CAP => j *= 2,
            other => return other,
        }
    }
}

fn fixed_point_at(
    params: &ModelParams,
    j_max: usize,
    tol: f64,
) -> Result<(f64, SizeDistribution), MalthusError> {
    let flux_gap = |a: f64| -> Result<f64, MalthusError> {
        Ok(equilibrium_qstar(a, params, j_max)?.flux(params.c) - a)
    };
    let lo_init = 1e-9;
    let mut hi = params.s.max(1.0);
    let mut attempts = 0;
    while flux_gap(hi)? >= 0.0 {
        hi *= 2.0;
        attempts += 1;
        if attempts >= 8 {
            return Err(MalthusError::BracketFailure { lo: lo_init, hi });
        }
    }
    if !(flux_gap(lo_init)? > 0.0) {
        return Err(MalthusError::BracketFailure { lo: lo_init, hi });
    }
    let mut lo = lo_init;
    for _ in 0..200 {
        if hi - lo < ALPHA_TOL_X {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if flux_gap(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let alpha = 0.5 * (lo + hi);
    let u_infty = equilibrium_qstar(alpha, params, j_max)?;
    let resid = (u_infty.flux(params.c) - alpha).abs();
    if resid > tol {
        return Err(MalthusError::BracketFailure { lo, hi });
    }
    Ok((alpha, u_infty))
}

/// Constants of the stable regime derived from the size distribution:
/// gamma = c·u(1), B = (alpha + gamma)/c, with alpha recomputed from the
/// flux functional as a self-consistency check.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StableConstants {
    pub gamma: f64,
    pub big_b: f64,
    pub alpha_recomputed: f64,
}

impl StableConstants {
    /// b = 1 + gamma/alpha = (alpha + gamma)/alpha.
    pub fn b(&self) -> f64 {
        1.0 + self.gamma / self.alpha_recomputed
    }
}

pub fn stable_constants(u_infty: &SizeDistribution, params: &ModelParams) -> StableConstants {
    let gamma = params.c * u_infty.prob(1);
    let alpha_recomputed = u_infty.flux(params.c);
    StableConstants {
        gamma,
        big_b: (alpha_recomputed + gamma) / params.c,
        alpha_recomputed,
    }
}

/// Both routes to alpha plus the derived constants, cross-checked.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MalthusResult {
    /// Fixed-point value; the one downstream modules consume.
    pub alpha: f64,
    pub alpha_renewal: f64,
    pub gamma: f64,
    pub big_b: f64,
    pub u_infty: SizeDistribution,
    pub cross_method_gap: f64,
}

impl MalthusResult {
    pub fn b(&self) -> f64 {
        1.0 + self.gamma / self.alpha
    }
}

pub fn malthus_summary(
    params: &ModelParams,
    j_max: usize,
    tol: f64,
) -> Result<MalthusResult, MalthusError> {
    let (alpha, u_infty) = malthusian_fixed_point(params, j_max, tol)?;
    let alpha_renewal = malthusian_renewal(params, j_max, tol)?;
    let consts = stable_constants(&u_infty, params);
    Ok(MalthusResult {
        alpha,
        alpha_renewal,
        gamma: consts.gamma,
        big_b: consts.big_b,
        u_infty,
        cross_method_gap: (alpha - alpha_renewal).abs(),
    })
}
