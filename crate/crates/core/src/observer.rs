//! Adaptive observer with torus-confined parameter search.
//!
//! The observer runs three coupled estimators driven by the measured output
//! `y = x0`:
//!
//! ```text
//! d/dt x0_hat    = -alpha (x0_hat - y) + theta_hat . phi_bar + c0(y, lambda_hat, t) + u(t)
//! d/dt theta_hat = -gamma_theta (x0_hat - y) phi_bar
//! d/dt z1_j      = gamma w_j e (z1_j - z2_j - z1_j r_j^2)      r_j^2 = z1_j^2 + z2_j^2
//! d/dt z2_j      = gamma w_j e (z1_j + z2_j - z2_j r_j^2)
//! ```
//!
//! where `phi_bar` is the extended regressor at the current `lambda_hat`,
//! `e = sigma(max(|x0 - x0_hat| - epsilon, 0))` is the dead-zoned output
//! error, and each `(z1_j, z2_j)` lives on the unit circle. The circle map
//!
//! ```text
//! lambda_hat_j = lo_j + (hi_j - lo_j) (z1_j + 1) / 2
//! ```
//!
//! confines every parameter estimate to its box by construction: while the
//! output error exceeds the dead zone, each pair rotates at warped speed
//! `gamma w_j e` and sweeps its interval; once the error falls inside the
//! dead zone the rotation freezes. Incommensurate `w_j` make the joint sweep
//! dense on the product of circles.
//!
//! The regressor is evaluated once per step at the pre-step `lambda_hat` and
//! held over the four integration stages; the cheap terms (`c0`, the output,
//! the parameter map) use per-stage values.

use serde::Serialize;
use thiserror::Error;

use crate::ode::{IntegrationGrid, OdeError, Rk4Scratch};
use crate::plant::{PlantError, PlantSpec, SignalFn, dot};
use crate::regressor::{
    DEFAULT_BANK_NODES, RegressorEngine, RegressorError, windowed_mu_quadrature_error,
};

#[derive(Debug, Error)]
pub enum ObserverError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Regressor(#[from] RegressorError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error("state diverged at t = {t}: component {component} = {value}")]
    Diverged { t: f64, component: usize, value: f64 },
}

/// Shaping function applied to the dead-zoned output error before it drives
/// the parameter-search rotation. Must be odd, increasing, zero at zero and
/// bounded by one in magnitude; the default is `tanh`.
#[derive(Clone)]
pub enum Sigma {
    Tanh,
    Custom(SignalFn),
}

impl Sigma {
    pub fn eval(&self, r: f64) -> f64 {
        match self {
            Sigma::Tanh => r.tanh(),
            Sigma::Custom(f) => f(r),
        }
    }
}

impl Default for Sigma {
    fn default() -> Self {
        Sigma::Tanh
    }
}

impl std::fmt::Debug for Sigma {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Sigma::Tanh => write!(f, "Sigma::Tanh"),
            Sigma::Custom(_) => write!(f, "Sigma::Custom(..)"),
        }
    }
}

/// `max(||v|| - epsilon, 0)`: Euclidean norm with a dead zone of radius
/// `epsilon` that absorbs residual errors below the noise floor.
pub fn deadzone_norm(v: &[f64], epsilon: f64) -> f64 {
    (dot(v, v).sqrt() - epsilon).max(0.0)
}

/// Map torus coordinates `(z1_j, z2_j)` to box-confined parameter values.
/// `z1_j` is clamped to `[-1, 1]` so off-circle transients cannot escape the
/// box.
pub fn lambda_from_torus(torus: &[f64], boxes: &[(f64, f64)]) -> Vec<f64> {
    debug_assert_eq!(torus.len(), 2 * boxes.len());
    boxes
        .iter()
        .enumerate()
        .map(|(j, &(lo, hi))| {
            let z1 = torus[2 * j].clamp(-1.0, 1.0);
            lo + 0.5 * (hi - lo) * (z1 + 1.0)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ObserverConfig {
    /// Output-error feedback gain (> 0).
    pub alpha: f64,
    /// Gradient adaptation gain for `theta_hat` (> 0).
    pub gamma_theta: f64,
    /// Parameter-search speed (>= 0; zero pins `lambda_hat` at its initial value).
    pub gamma: f64,
    /// Dead-zone radius on the output error (>= 0).
    pub epsilon: f64,
    /// Rotation frequencies, one per parameter component; incommensurate
    /// values give a dense sweep of the box product.
    pub omega: Vec<f64>,
    pub sigma: Sigma,
    /// Initial `theta_hat` (length = regressor dimension).
    pub theta_init: Vec<f64>,
    /// Initial `lambda_hat` (inside the box); `None` starts at the box midpoint.
    pub lambda_init: Option<Vec<f64>>,
}

impl ObserverConfig {
    /// Zero `theta_init`, midpoint `lambda_init`, unit frequencies, `tanh`.
    pub fn defaults_for(spec: &PlantSpec) -> Self {
        ObserverConfig {
            alpha: 1.0,
            gamma_theta: 1.0,
            gamma: 0.1,
            epsilon: 0.0,
            omega: vec![1.0; spec.lambda_dim()],
            sigma: Sigma::Tanh,
            theta_init: vec![0.0; spec.regressor_dim()],
            lambda_init: None,
        }
    }

    pub fn validate(&self, spec: &PlantSpec) -> Result<(), ObserverError> {
        let bad = |m: String| Err(ObserverError::Config(m));
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha = {} must be > 0", self.alpha));
        }
        if !(self.gamma_theta > 0.0) || !self.gamma_theta.is_finite() {
            return bad(format!("gamma_theta = {} must be > 0", self.gamma_theta));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return bad(format!("gamma = {} must be >= 0", self.gamma));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return bad(format!("epsilon = {} must be >= 0", self.epsilon));
        }
        if self.omega.len() != spec.lambda_dim() {
            return bad(format!(
                "omega has {} entries, parameter space has {}",
                self.omega.len(),
                spec.lambda_dim()
            ));
        }
        if self.omega.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return bad("all rotation frequencies must be positive".into());
        }
        if self.theta_init.len() != spec.regressor_dim() {
            return bad(format!(
                "theta_init has {} entries, regressor dimension is {}",
                self.theta_init.len(),
                spec.regressor_dim()
            ));
        }
        if let Some(lam) = &self.lambda_init {
            if lam.len() != spec.lambda_dim() {
                return bad(format!(
                    "lambda_init has {} entries, parameter space has {}",
                    lam.len(),
                    spec.lambda_dim()
                ));
            }
            for (j, (&v, &(lo, hi))) in lam.iter().zip(spec.lambda_box()).enumerate() {
                if !(v >= lo && v <= hi) {
                    return bad(format!("lambda_init[{j}] = {v} outside [{lo}, {hi}]"));
                }
            }
        }
        Ok(())
    }

    /// Torus coordinates realizing the initial `lambda_hat` (midpoint when
    /// unset): `z1 = 2 (lambda - lo) / (hi - lo) - 1`, `z2 = +sqrt(1 - z1^2)`.
    pub fn initial_torus(&self, spec: &PlantSpec) -> Vec<f64> {
        let boxes = spec.lambda_box();
        let mut torus = Vec::with_capacity(2 * boxes.len());
        for (j, &(lo, hi)) in boxes.iter().enumerate() {
            let z1 = match &self.lambda_init {
                Some(lam) if hi > lo => (2.0 * (lam[j] - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0),
                _ => 0.0,
            };
            torus.push(z1);
            torus.push((1.0 - z1 * z1).max(0.0).sqrt());
        }
        torus
    }
}

/// Offsets of the blocks inside the combined integration state:
/// `[plant x0..xn | x0_hat | theta_hat | torus pairs | reconstructed x_i]`.
#[derive(Clone, Copy, Debug)]
struct StateLayout {
    n: usize,
    d: usize,
    s: usize,
}

impl StateLayout {
    fn of(spec: &PlantSpec) -> Self {
        StateLayout { n: spec.n(), d: spec.regressor_dim(), s: spec.lambda_dim() }
    }

    fn dim(&self) -> usize {
        2 * self.n + self.d + 2 * self.s + 2
    }

    fn plant(&self) -> std::ops::Range<usize> {
        0..self.n + 1
    }

    fn x0_hat(&self) -> usize {
        self.n + 1
    }

    fn theta(&self) -> std::ops::Range<usize> {
        let a = self.n + 2;
        a..a + self.d
    }

    fn torus(&self) -> std::ops::Range<usize> {
        let a = self.n + 2 + self.d;
        a..a + 2 * self.s
    }

    fn recon(&self) -> std::ops::Range<usize> {
        let a = self.n + 2 + self.d + 2 * self.s;
        a..a + self.n
    }
}

/// Time derivatives of the observer blocks for a frozen regressor value.
/// Exposed for direct testing; the closed-loop runner drives it through the
/// combined state.
#[allow(clippy::too_many_arguments)]
pub fn observer_rhs(
    spec: &PlantSpec,
    cfg: &ObserverConfig,
    phi_bar: &[f64],
    t: f64,
    y: f64,
    x0_hat: f64,
    theta_hat: &[f64],
    torus: &[f64],
    out_x0_hat: &mut f64,
    out_theta: &mut [f64],
    out_torus: &mut [f64],
) {
    let lam = lambda_from_torus(torus, spec.lambda_box());
    let err = x0_hat - y;
    let e = cfg.sigma.eval(deadzone_norm(&[err], cfg.epsilon));
    *out_x0_hat = -cfg.alpha * err + dot(theta_hat, phi_bar) + spec.c0_eval(y, &lam, t)
        + spec.u_eval(t);
    for (o, &p) in out_theta.iter_mut().zip(phi_bar) {
        *o = -cfg.gamma_theta * err * p;
    }
    for j in 0..cfg.omega.len() {
        let z1 = torus[2 * j];
        let z2 = torus[2 * j + 1];
        let r2 = z1 * z1 + z2 * z2;
        let g = cfg.gamma * cfg.omega[j] * e;
        out_torus[2 * j] = g * (z1 - z2 - z1 * r2);
        out_torus[2 * j + 1] = g * (z1 + z2 - z2 * r2);
    }
}

/// Derivatives of the reconstructed (unmeasured) filtered states at the
/// current estimates: `d/dt xr_i = -beta_i(y, tau_hat_i, t) xr_i + theta_hat_i . phi_i(y, p_hat_i, t)`.
pub fn state_reconstruction_rhs(
    spec: &PlantSpec,
    t: f64,
    y: f64,
    lambda_hat: &[f64],
    theta_hat: &[f64],
    recon: &[f64],
    out: &mut [f64],
) {
    for i in 1..=spec.n() {
        let beta = spec.channel_beta(i, y, lambda_hat, t);
        let phi = spec.channel_phi(i, y, lambda_hat, t);
        let block = spec.theta_block(i);
        out[i - 1] = -beta * recon[i - 1] + dot(&theta_hat[block], &phi);
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub t_end: f64,
    pub dt: f64,
    /// Trailing window of output history feeding the filtered integrals.
    pub window: f64,
    /// Plant initial state `(x0, x1, ..., xn)` at `t = 0`.
    pub plant_init: Vec<f64>,
    /// Keep every `record_stride`-th grid point (the final point is always kept).
    pub record_stride: usize,
    /// Chebyshev nodes per decay-parameter panel.
    pub bank_nodes: usize,
    /// Fraction of the run (from the end) over which tail statistics are taken.
    pub tail_fraction: f64,
}

impl RunOptions {
    pub fn new(t_end: f64, dt: f64, window: f64, plant_init: Vec<f64>) -> Self {
        RunOptions {
            t_end,
            dt,
            window,
            plant_init,
            record_stride: 100,
            bank_nodes: DEFAULT_BANK_NODES,
            tail_fraction: 0.1,
        }
    }

    fn validate(&self, spec: &PlantSpec) -> Result<(), ObserverError> {
        let bad = |m: String| Err(ObserverError::Config(m));
        if self.plant_init.len() != spec.n() + 1 {
            return bad(format!(
                "plant_init has {} entries, plant dimension is {}",
                self.plant_init.len(),
                spec.n() + 1
            ));
        }
        if self.plant_init.iter().any(|v| !v.is_finite()) {
            return bad("plant_init must be finite".into());
        }
        if self.record_stride == 0 {
            return bad("record_stride must be >= 1".into());
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            return bad(format!("tail_fraction = {} must lie in (0, 1]", self.tail_fraction));
        }
        Ok(())
    }
}

/// Decimated time series of everything an experiment reports.
#[derive(Clone, Debug, Serialize)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub x0: Vec<f64>,
    pub x0_hat: Vec<f64>,
    /// `[record][component]`
    pub theta_hat: Vec<Vec<f64>>,
    /// `[record][component]`
    pub lambda_hat: Vec<Vec<f64>>,
    /// Dead-zoned output error `max(|x0 - x0_hat| - epsilon, 0)`.
    pub e_deadzone: Vec<f64>,
    /// True filtered states `(x1, ..., xn)` per record.
    pub plant_filtered: Vec<Vec<f64>>,
    /// Reconstructed filtered states per record.
    pub reconstructed: Vec<Vec<f64>>,
}

/// Statistics over the trailing `tail_fraction` of the run, accumulated at
/// every grid step (not just recorded points).
#[derive(Clone, Debug, Serialize)]
pub struct TailStats {
    pub start_time: f64,
    pub e_deadzone_mean: f64,
    /// Per-component total variation of `lambda_hat` over the tail.
    pub lambda_total_variation: Vec<f64>,
    pub theta_terminal: Vec<f64>,
    pub lambda_terminal: Vec<f64>,
    /// `||theta_hat(t_end) - theta_true||`.
    pub theta_error_norm: f64,
}

/// First time after which an estimate stays inside a relative band around the
/// truth: the last grid time found outside plus one step (`Some(0)` if never
/// outside, `None` if still outside at the end). Components with zero truth
/// use the band absolutely.
#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceReport {
    pub theta_within_5pct: Option<f64>,
    pub theta_within_10pct: Option<f64>,
    pub lambda_within_10pct: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunDiagnostics {
    pub steps: usize,
    pub dt: f64,
    pub window: f64,
    /// Steps integrated before every window was full.
    pub warm_up_steps: usize,
    /// Max per-step deviation of any torus pair from the unit circle before
    /// renormalization.
    pub max_torus_drift: f64,
    /// Window-truncation part of the regressor error report.
    pub truncation_bound: f64,
    /// Grid-refinement estimate of the quadrature part.
    pub quadrature_error: f64,
    /// `truncation_bound + quadrature_error`.
    pub delta_phi: f64,
    /// Disturbance pass-through `sum_i sup|xi_i| / tau_lo_i + sup|xi_0|`.
    pub delta_xi: f64,
    /// `||theta_true|| delta_phi + delta_xi`: total derivative-level residual.
    pub delta_total: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentResult {
    pub trajectory: TrajectoryRecord,
    pub tail: TailStats,
    pub convergence: ConvergenceReport,
    pub diagnostics: RunDiagnostics,
}

struct BandTracker {
    band: f64,
    last_outside: Option<f64>,
    outside_now: bool,
}

impl BandTracker {
    fn new(band: f64) -> Self {
        BandTracker { band, last_outside: None, outside_now: false }
    }

    fn observe(&mut self, t: f64, estimate: &[f64], truth: &[f64]) {
        let outside = estimate.iter().zip(truth).any(|(&e, &tr)| {
            let tol = if tr != 0.0 { self.band * tr.abs() } else { self.band };
            (e - tr).abs() > tol
        });
        self.outside_now = outside;
        if outside {
            self.last_outside = Some(t);
        }
    }

    fn settle_time(&self, dt: f64) -> Option<f64> {
        if self.outside_now {
            None
        } else {
            Some(self.last_outside.map_or(0.0, |t| t + dt))
        }
    }
}

/// Simulate plant and observer together over `[0, t_end]` and collect the
/// decimated trajectory, tail statistics, convergence times and the
/// regressor-error report.
///
/// Fails on configuration errors, non-finite states, or any state component
/// exceeding 1e6 in magnitude (divergence).
pub fn run_closed_loop(
    spec: &PlantSpec,
    cfg: &ObserverConfig,
    opts: &RunOptions,
) -> Result<ExperimentResult, ObserverError> {
    cfg.validate(spec)?;
    opts.validate(spec)?;
    let grid = IntegrationGrid::new(0.0, opts.t_end, opts.dt)?;
    let steps = grid.steps();
    let layout = StateLayout::of(spec);
    let dim = layout.dim();

    let mut engine = RegressorEngine::new(spec, opts.window, opts.dt, opts.bank_nodes)?;
    let mut scratch = Rk4Scratch::new(dim);

    let mut z = vec![0.0; dim];
    z[layout.plant()].copy_from_slice(&opts.plant_init);
    z[layout.x0_hat()] = opts.plant_init[0]; // output is measured at t = 0
    z[layout.theta()].copy_from_slice(&cfg.theta_init);
    z[layout.torus()].copy_from_slice(&cfg.initial_torus(spec));

    let n = layout.n;
    let s = layout.s;
    let tail_start = opts.t_end * (1.0 - opts.tail_fraction);

    let mut traj = TrajectoryRecord {
        times: vec![],
        x0: vec![],
        x0_hat: vec![],
        theta_hat: vec![],
        lambda_hat: vec![],
        e_deadzone: vec![],
        plant_filtered: vec![],
        reconstructed: vec![],
    };
    let mut theta5 = BandTracker::new(0.05);
    let mut theta10 = BandTracker::new(0.10);
    let mut lambda10 = BandTracker::new(0.10);
    let mut tail_e_sum = 0.0;
    let mut tail_count = 0usize;
    let mut tail_tv = vec![0.0; s];
    let mut prev_lambda_tail: Option<Vec<f64>> = None;
    let mut max_drift = 0.0f64;
    let mut xi_sup = vec![0.0; n];
    let mut xi0_sup = 0.0f64;

    for k in 0..=steps {
        let t = grid.time_at(k);
        let x0 = z[0];
        engine.push(spec, t, x0)?;

        let lam = lambda_from_torus(&z[layout.torus()], spec.lambda_box());
        let e_dz = deadzone_norm(&[z[layout.x0_hat()] - x0], cfg.epsilon);

        xi0_sup = xi0_sup.max(spec.xi0_eval(t).abs());
        for i in 1..=n {
            let v = (spec.channel(i).xi)(t).abs();
            if v > xi_sup[i - 1] {
                xi_sup[i - 1] = v;
            }
        }

        theta5.observe(t, &z[layout.theta()], spec.theta_true());
        theta10.observe(t, &z[layout.theta()], spec.theta_true());
        lambda10.observe(t, &lam, spec.lambda_true());

        if t >= tail_start {
            tail_e_sum += e_dz;
            tail_count += 1;
            if let Some(prev) = &prev_lambda_tail {
                for j in 0..s {
                    tail_tv[j] += (lam[j] - prev[j]).abs();
                }
            }
            prev_lambda_tail = Some(lam.clone());
        }

        if k % opts.record_stride == 0 || k == steps {
            traj.times.push(t);
            traj.x0.push(x0);
            traj.x0_hat.push(z[layout.x0_hat()]);
            traj.theta_hat.push(z[layout.theta()].to_vec());
            traj.lambda_hat.push(lam.clone());
            traj.e_deadzone.push(e_dz);
            traj.plant_filtered.push(z[1..n + 1].to_vec());
            traj.reconstructed.push(z[layout.recon()].to_vec());
        }

        if k == steps {
            break;
        }

        let phi_bar = engine.eval(spec, x0, &lam, t)?.components;
        let mut fault: Option<PlantError> = None;
        {
            let mut rhs = |tt: f64, x: &[f64], out: &mut [f64]| {
                match spec.plant_rhs(tt, &x[layout.plant()]) {
                    Ok(dx) => out[layout.plant()].copy_from_slice(&dx),
                    Err(e) => {
                        fault = Some(e);
                        out.fill(f64::NAN);
                        return;
                    }
                }
                let y = x[0];
                let (head, recon_out) = out.split_at_mut(layout.recon().start);
                let (mut ox0, mut oth, mut otor) = (0.0, vec![0.0; layout.d], vec![0.0; 2 * s]);
                observer_rhs(
                    spec,
                    cfg,
                    &phi_bar,
                    tt,
                    y,
                    x[layout.x0_hat()],
                    &x[layout.theta()],
                    &x[layout.torus()],
                    &mut ox0,
                    &mut oth,
                    &mut otor,
                );
                head[layout.x0_hat()] = ox0;
                head[layout.theta()].copy_from_slice(&oth);
                head[layout.torus()].copy_from_slice(&otor);
                let lam_stage = lambda_from_torus(&x[layout.torus()], spec.lambda_box());
                state_reconstruction_rhs(
                    spec,
                    tt,
                    y,
                    &lam_stage,
                    &x[layout.theta()],
                    &x[layout.recon()],
                    recon_out,
                );
            };
            let stepped = scratch.step_into(&mut rhs, t, opts.dt, &mut z);
            if let Some(e) = fault {
                return Err(e.into());
            }
            stepped?;
        }

        for (j, &v) in z.iter().enumerate() {
            if !v.is_finite() || v.abs() > 1e6 {
                return Err(ObserverError::Diverged { t: t + opts.dt, component: j, value: v });
            }
        }

        // Renormalize each torus pair onto the unit circle; skipped below
        // rounding level so a frozen search (gamma = 0 or zero error) stays
        // bit-identical.
        let tor = layout.torus();
        for j in 0..s {
            let z1 = z[tor.start + 2 * j];
            let z2 = z[tor.start + 2 * j + 1];
            let r2 = z1 * z1 + z2 * z2;
            let drift = (r2 - 1.0).abs();
            if drift > max_drift {
                max_drift = drift;
            }
            if drift > 1e-13 {
                let r = r2.sqrt();
                z[tor.start + 2 * j] = z1 / r;
                z[tor.start + 2 * j + 1] = z2 / r;
            }
        }
    }

    let lam_final = lambda_from_torus(&z[layout.torus()], spec.lambda_box());
    let truncation = engine.truncation_bound(spec)?;
    let mut quad = 0.0;
    for i in 1..=n {
        let ch = spec.channel(i);
        let tau = lam_final[ch.tau];
        let p: Vec<f64> = ch.p.iter().map(|&j| lam_final[j]).collect();
        quad += engine.c_sup(i)
            * windowed_mu_quadrature_error(spec, engine.buffer(), i, tau, &p, opts.t_end)?;
    }
    let delta_phi = truncation + quad;
    let mut delta_xi = xi0_sup;
    for i in 1..=n {
        let tau_lo = spec.lambda_box()[spec.channel(i).tau].0;
        delta_xi += xi_sup[i - 1] / tau_lo;
    }
    let theta_norm = dot(spec.theta_true(), spec.theta_true()).sqrt();
    let theta_term = z[layout.theta()].to_vec();
    let theta_err: f64 = theta_term
        .iter()
        .zip(spec.theta_true())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();

    Ok(ExperimentResult {
        trajectory: traj,
        tail: TailStats {
            start_time: tail_start,
            e_deadzone_mean: if tail_count > 0 { tail_e_sum / tail_count as f64 } else { 0.0 },
            lambda_total_variation: tail_tv,
            theta_terminal: theta_term,
            lambda_terminal: lam_final,
            theta_error_norm: theta_err,
        },
        convergence: ConvergenceReport {
            theta_within_5pct: theta5.settle_time(opts.dt),
            theta_within_10pct: theta10.settle_time(opts.dt),
            lambda_within_10pct: lambda10.settle_time(opts.dt),
        },
        diagnostics: RunDiagnostics {
            steps,
            dt: opts.dt,
            window: opts.window,
            warm_up_steps: ((opts.window / opts.dt).round() as usize).min(steps),
            max_torus_drift: max_drift,
            truncation_bound: truncation,
            quadrature_error: quad,
            delta_phi,
            delta_xi,
            delta_total: theta_norm * delta_phi + delta_xi,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::{self, IntegrationGrid};
    use crate::plant::PlantSpec;
    use std::sync::Arc;

    #[test]
    fn deadzone_absorbs_small_errors() {
        assert_eq!(deadzone_norm(&[0.005], 0.01), 0.0);
        assert_eq!(deadzone_norm(&[-0.01], 0.01), 0.0);
        assert!((deadzone_norm(&[0.03], 0.01) - 0.02).abs() < 1e-15);
        assert!((deadzone_norm(&[3.0, 4.0], 1.0) - 4.0).abs() < 1e-15);
        assert_eq!(deadzone_norm(&[0.5], 0.0), 0.5);
    }

    #[test]
    fn torus_map_covers_the_box() {
        let boxes = [(0.1, 1.1)];
        assert!((lambda_from_torus(&[-1.0, 0.0], &boxes)[0] - 0.1).abs() < 1e-15);
        assert!((lambda_from_torus(&[1.0, 0.0], &boxes)[0] - 1.1).abs() < 1e-15);
        assert!((lambda_from_torus(&[0.0, 1.0], &boxes)[0] - 0.6).abs() < 1e-15);
        // Off-circle excursions clamp to the box edge.
        assert!((lambda_from_torus(&[1.5, 0.0], &boxes)[0] - 1.1).abs() < 1e-15);
        let two = [(0.0, 200.0), (0.1, 1.1)];
        let lam = lambda_from_torus(&[0.5, 0.866, -0.5, 0.866], &two);
        assert!((lam[0] - 150.0).abs() < 1e-12);
        assert!((lam[1] - 0.35).abs() < 1e-12);
    }

    #[test]
    fn initial_torus_inverts_the_parameter_map() {
        let spec = smoke_spec_with_channel();
        let mut cfg = ObserverConfig::defaults_for(&spec);
        cfg.lambda_init = Some(vec![0.2]);
        let torus = cfg.initial_torus(&spec);
        let lam = lambda_from_torus(&torus, spec.lambda_box());
        assert!((lam[0] - 0.2).abs() < 1e-12);
        let r2 = torus[0] * torus[0] + torus[1] * torus[1];
        assert!((r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn torus_rotation_matches_closed_form() {
        // With e held constant the pair rotates rigidly: after time t the
        // phase advances by omega * gamma * e * t.
        let gamma = 0.5;
        let omega = 2.0;
        let e = 0.8;
        let mut rhs = |_t: f64, x: &[f64], out: &mut [f64]| {
            let (z1, z2) = (x[0], x[1]);
            let r2 = z1 * z1 + z2 * z2;
            let g = gamma * omega * e;
            out[0] = g * (z1 - z2 - z1 * r2);
            out[1] = g * (z1 + z2 - z2 * r2);
        };
        let grid = IntegrationGrid::new(0.0, 10.0, 1e-3).unwrap();
        let traj = ode::integrate(&mut rhs, &grid, &[1.0, 0.0], |_, _, _| {}).unwrap();
        let a = gamma * omega * e * 10.0;
        let last = traj.last_state();
        assert!((last[0] - a.cos()).abs() < 1e-8, "z1 {} vs {}", last[0], a.cos());
        assert!((last[1] - a.sin()).abs() < 1e-8);
        let r2 = last[0] * last[0] + last[1] * last[1];
        assert!((r2 - 1.0).abs() < 1e-7);
    }

    /// Scalar plant with no filtered channels: d/dt x0 = theta (-x0) + u.
    fn smoke_spec_scalar() -> PlantSpec {
        PlantSpec::builder()
            .measured_regressor(1, vec![], Arc::new(|x0: f64, _p: &[f64], _t| vec![-x0]))
            .input(Arc::new(|t: f64| t.sin()))
            .theta_true(vec![2.0])
            .theta_box(vec![(0.0, 5.0)])
            .lambda_true(vec![])
            .lambda_box(vec![])
            .build()
            .unwrap()
    }

    /// One constant-decay channel, for parameter-map tests.
    fn smoke_spec_with_channel() -> PlantSpec {
        use crate::plant::{Beta, FilteredChannel, zero_signal};
        PlantSpec::builder()
            .measured_regressor(1, vec![], Arc::new(|x0: f64, _p: &[f64], _t| vec![-x0]))
            .channel(FilteredChannel {
                dim: 1,
                phi: Arc::new(|x0, _p, _t| vec![x0]),
                p: vec![],
                beta: Beta::ConstantTau,
                tau: 0,
                c: Arc::new(|_x0, _q, _t| 1.0),
                q: vec![],
                xi: zero_signal(),
            })
            .theta_true(vec![2.0, 0.5])
            .theta_box(vec![(0.0, 5.0), (0.0, 2.0)])
            .lambda_true(vec![0.4])
            .lambda_box(vec![(0.1, 1.1)])
            .build()
            .unwrap()
    }

    #[test]
    fn gradient_loop_identifies_a_scalar_gain() {
        let spec = smoke_spec_scalar();
        let mut cfg = ObserverConfig::defaults_for(&spec);
        cfg.alpha = 2.0;
        cfg.gamma_theta = 5.0;
        cfg.gamma = 0.0;
        let mut opts = RunOptions::new(50.0, 1e-3, 1.0, vec![1.0]);
        opts.record_stride = 1000;
        let res = run_closed_loop(&spec, &cfg, &opts).unwrap();
        let th = res.tail.theta_terminal[0];
        assert!((th - 2.0).abs() < 0.05, "theta_hat = {th}");
        assert!(res.tail.e_deadzone_mean < 1e-3);
        assert_eq!(res.trajectory.times.len(), 51);
        assert_eq!(*res.trajectory.times.last().unwrap(), 50.0);
    }

    #[test]
    fn zero_search_speed_pins_lambda() {
        let spec = smoke_spec_with_channel();
        let mut cfg = ObserverConfig::defaults_for(&spec);
        cfg.gamma = 0.0;
        cfg.lambda_init = Some(vec![0.25]);
        let opts = RunOptions::new(5.0, 1e-3, 1.0, vec![1.0, 0.0]);
        let res = run_closed_loop(&spec, &cfg, &opts).unwrap();
        for lam in &res.trajectory.lambda_hat {
            assert_eq!(lam[0], res.trajectory.lambda_hat[0][0]);
        }
        assert!((res.trajectory.lambda_hat[0][0] - 0.25).abs() < 1e-12);
        assert_eq!(res.diagnostics.max_torus_drift, 0.0);
    }

    #[test]
    fn divergence_is_reported_with_time_and_component() {
        // Unstable feedback: theta_true positive on phi = +x0 makes the
        // plant blow up.
        let spec = PlantSpec::builder()
            .measured_regressor(1, vec![], Arc::new(|x0: f64, _p: &[f64], _t| vec![x0]))
            .theta_true(vec![3.0])
            .theta_box(vec![(0.0, 5.0)])
            .lambda_true(vec![])
            .lambda_box(vec![])
            .build()
            .unwrap();
        let cfg = ObserverConfig::defaults_for(&spec);
        let opts = RunOptions::new(20.0, 1e-2, 1.0, vec![1.0]);
        let err = run_closed_loop(&spec, &cfg, &opts).unwrap_err();
        assert!(matches!(err, ObserverError::Diverged { .. }), "got {err:?}");
    }

    #[test]
    fn config_validation_rejects_bad_gains() {
        let spec = smoke_spec_scalar();
        let mut cfg = ObserverConfig::defaults_for(&spec);
        cfg.alpha = 0.0;
        assert!(cfg.validate(&spec).is_err());
        let mut cfg = ObserverConfig::defaults_for(&spec);
        cfg.gamma = -0.1;
        assert!(cfg.validate(&spec).is_err());
        let mut cfg = ObserverConfig::defaults_for(&spec);
        cfg.theta_init = vec![0.0; 3];
        assert!(cfg.validate(&spec).is_err());
    }
}
