//! Fixed-step fourth-order Runge-Kutta integration on uniform time grids.
//!
//! Everything downstream (history buffers, windowed quadrature, replayed
//! experiments) assumes samples on an exactly uniform grid, so the integrator
//! is deliberately fixed-step: bitwise determinism and grid alignment outrank
//! adaptive efficiency at desk scale. Grid times are always computed as
//! `t0 + k * dt`, never accumulated, so the k-th sample time is identical
//! everywhere it is recomputed.

use thiserror::Error;

/// State vector alias; components are plain `f64` and must stay finite.
pub type StateVector = Vec<f64>;

/// Right-hand side writes `dx/dt` for `(t, x)` into `out`.
pub trait Rhs {
    fn eval(&mut self, t: f64, x: &[f64], out: &mut [f64]);
}

impl<F: FnMut(f64, &[f64], &mut [f64])> Rhs for F {
    fn eval(&mut self, t: f64, x: &[f64], out: &mut [f64]) {
        self(t, x, out)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OdeError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("non-finite state component {component} at t = {t}")]
    NonFinite { t: f64, component: usize },
}

/// Uniform time grid `t_k = t0 + k * dt`, `k = 0..=steps`.
///
/// `t_end` must sit on the grid: `(t_end - t0) / dt` has to be an integer to
/// within 1e-9 of a step. A zero-length grid (`t_end == t0`) is valid and
/// integrates to a single-point trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationGrid {
    pub t0: f64,
    pub t_end: f64,
    pub dt: f64,
}

impl IntegrationGrid {
    pub fn new(t0: f64, t_end: f64, dt: f64) -> Result<Self, OdeError> {
        let grid = IntegrationGrid { t0, t_end, dt };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), OdeError> {
        if !self.t0.is_finite() || !self.t_end.is_finite() || !self.dt.is_finite() {
            return Err(OdeError::InvalidGrid("non-finite grid parameter".into()));
        }
        if self.dt <= 0.0 {
            return Err(OdeError::InvalidGrid(format!("dt = {} must be > 0", self.dt)));
        }
        if self.t_end < self.t0 {
            return Err(OdeError::InvalidGrid(format!(
                "t_end = {} precedes t0 = {}",
                self.t_end, self.t0
            )));
        }
        let raw = (self.t_end - self.t0) / self.dt;
        if raw > 2.0_f64.powi(52) {
            return Err(OdeError::InvalidGrid(format!("{raw} steps exceed integer range")));
        }
        if (raw - raw.round()).abs() > 1e-9 * raw.max(1.0) {
            return Err(OdeError::InvalidGrid(format!(
                "(t_end - t0) / dt = {raw} is not an integer step count"
            )));
        }
        Ok(())
    }

    /// Number of RK4 steps (grid has `steps() + 1` sample points).
    pub fn steps(&self) -> usize {
        ((self.t_end - self.t0) / self.dt).round() as usize
    }

    pub fn time_at(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }
}

/// Reusable stage storage so stepping does not allocate.
#[derive(Debug, Clone)]
pub struct Rk4Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    stage: Vec<f64>,
}

impl Rk4Scratch {
    pub fn new(dim: usize) -> Self {
        Rk4Scratch {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            stage: vec![0.0; dim],
        }
    }

    /// One classical RK4 step in place. Non-finite results are reported per
    /// component; a NaN produced at any stage propagates into the combined
    /// state, so checking once per step catches stage failures too.
    pub fn step_into<R: Rhs>(
        &mut self,
        rhs: &mut R,
        t: f64,
        dt: f64,
        x: &mut [f64],
    ) -> Result<(), OdeError> {
        let n = x.len();
        debug_assert_eq!(self.k1.len(), n);
        let half = 0.5 * dt;

        rhs.eval(t, x, &mut self.k1);
        for j in 0..n {
            self.stage[j] = x[j] + half * self.k1[j];
        }
        rhs.eval(t + half, &self.stage, &mut self.k2);
        for j in 0..n {
            self.stage[j] = x[j] + half * self.k2[j];
        }
        rhs.eval(t + half, &self.stage, &mut self.k3);
        for j in 0..n {
            self.stage[j] = x[j] + dt * self.k3[j];
        }
        rhs.eval(t + dt, &self.stage, &mut self.k4);

        let sixth = dt / 6.0;
        for j in 0..n {
            x[j] += sixth * (self.k1[j] + 2.0 * self.k2[j] + 2.0 * self.k3[j] + self.k4[j]);
            if !x[j].is_finite() {
                return Err(OdeError::NonFinite { t: t + dt, component: j });
            }
        }
        Ok(())
    }
}

/// One RK4 step, returning the advanced state.
pub fn rk4_step<R: Rhs>(rhs: &mut R, t: f64, x: &[f64], dt: f64) -> Result<StateVector, OdeError> {
    let mut out = x.to_vec();
    let mut scratch = Rk4Scratch::new(x.len());
    scratch.step_into(rhs, t, dt, &mut out)?;
    Ok(out)
}

/// Dense trajectory on the integration grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<StateVector>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Samples of one component, borrowed per state.
    pub fn component(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.states.iter().map(move |s| s[j])
    }

    pub fn last_state(&self) -> &[f64] {
        self.states.last().expect("trajectory holds at least the initial point")
    }
}

/// Integrate over the whole grid, storing every sample point.
///
/// `hook` runs after each accepted step with `(step_index, t, state)`;
/// it sees the initial point as step 0.
pub fn integrate<R: Rhs>(
    rhs: &mut R,
    grid: &IntegrationGrid,
    x0: &[f64],
    mut hook: impl FnMut(usize, f64, &[f64]),
) -> Result<Trajectory, OdeError> {
    grid.validate()?;
    let steps = grid.steps();
    let mut state = x0.to_vec();
    let mut scratch = Rk4Scratch::new(state.len());
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);

    times.push(grid.t0);
    states.push(state.clone());
    hook(0, grid.t0, &state);

    for k in 0..steps {
        let t = grid.time_at(k);
        scratch.step_into(rhs, t, grid.dt, &mut state)?;
        let t_next = grid.time_at(k + 1);
        times.push(t_next);
        states.push(state.clone());
        hook(k + 1, t_next, &state);
    }
    Ok(Trajectory { times, states })
}
