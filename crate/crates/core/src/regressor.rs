//! Windowed filtered integrals and the extended regressor.
//!
//! Each filtered state contributes to the measured derivative through
//!
//! ```text
//! mu_i(t, tau_i, p_i) = integral over s in [t0, t] of
//!     exp(-integral over chi in [s, t] of beta_i(x0(chi), tau_i, chi)) * phi_i(x0(s), p_i, s) ds
//! ```
//!
//! evaluated here over a trailing window `[t - T, t]` once enough history has
//! accumulated (`mu_bar`); before that the integral runs from `t0`, so early
//! values are exact rather than truncated. The window length is chosen so the
//! discarded tail `exp(-beta_min T) * sup|phi| / beta_min` is negligible.
//!
//! Two evaluation paths exist and are tested against each other:
//!
//! - [`windowed_mu`]: direct trapezoidal quadrature over the history buffer,
//!   valid for any `beta_i(x0, tau_i, t) > 0`. Cost O(T/dt) per call.
//! - [`RegressorEngine`]: for channels with `beta_i = tau_i` constant and
//!   parameter-free `phi_i`, the windowed trapezoid sum obeys an exact O(1)
//!   sliding recursion at fixed `tau`. The engine maintains those recursions on
//!   a Chebyshev grid over the `tau` box and interpolates to the requested
//!   `tau` barycentrically, so every evaluation is pointwise in the current
//!   parameter estimate (no responses computed at stale estimates are mixed)
//!   while a step costs O(nodes) instead of O(T/dt).
//!
//! The sliding recursion, with `a = exp(-tau dt)`, `N = T/dt`, `S` the
//! windowed trapezoid value and `phi_k` the sample at `t - k dt`:
//!
//! ```text
//! S(t+dt) = a S(t) + dt/2 [ phi(t+dt) + a phi(t) ]                (window anchored at t0)
//! S(t+dt) = ... - dt/2 [ a^N phi(t+dt-T) + a^(N+1) phi(t-T) ]     (window sliding)
//! ```

use std::collections::VecDeque;

use serde::Serialize;
use thiserror::Error;

use crate::ode;
use crate::plant::{PlantSpec, dot};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegressorError {
    #[error("history buffer is empty")]
    EmptyBuffer,
    #[error("window misaligned: {0}")]
    WindowMisaligned(String),
    #[error("sample gap or out-of-order push: expected t = {expected}, got {got}")]
    SampleGap { expected: f64, got: f64 },
    #[error("non-finite sample at t = {0}")]
    NonFiniteSample(f64),
    #[error("evaluation time {requested} does not match newest sample {newest}")]
    TimeMismatch { requested: f64, newest: f64 },
    #[error("decay rate {value} is not positive at t = {t}")]
    NonPositiveDecay { t: f64, value: f64 },
    #[error("lambda[{index}] = {value} lies outside its box")]
    LambdaOutOfBox { index: usize, value: f64 },
    #[error("{0}")]
    BadParameter(String),
}

/// Ring of uniformly spaced `(t, x0)` output samples spanning the last
/// `window` time units (plus both endpoints).
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    dt: f64,
    window: f64,
    n_window: usize,
    data: VecDeque<(f64, f64)>,
}

impl HistoryBuffer {
    /// `window` must be a positive integer multiple of `dt` (to 1e-9
    /// relative): the window edge has to land on the sample grid.
    pub fn new(window: f64, dt: f64) -> Result<Self, RegressorError> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(RegressorError::BadParameter(format!("dt = {dt} must be > 0")));
        }
        if !(window > 0.0) || !window.is_finite() {
            return Err(RegressorError::BadParameter(format!(
                "window = {window} must be > 0"
            )));
        }
        let raw = window / dt;
        let n = raw.round();
        if n < 1.0 || (raw - n).abs() > 1e-9 * raw.max(1.0) {
            return Err(RegressorError::WindowMisaligned(format!(
                "window {window} is not an integer multiple of dt = {dt}"
            )));
        }
        let n_window = n as usize;
        Ok(HistoryBuffer {
            dt,
            window,
            n_window,
            data: VecDeque::with_capacity(n_window + 2),
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn window(&self) -> f64 {
        self.window
    }

    /// Window length in steps (`N`); the buffer holds at most `N + 1` samples.
    pub fn n_window(&self) -> usize {
        self.n_window
    }

    pub fn capacity(&self) -> usize {
        self.n_window + 1
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True once the buffer spans the full window.
    pub fn is_full(&self) -> bool {
        self.data.len() == self.capacity()
    }

    pub fn get(&self, k: usize) -> (f64, f64) {
        self.data[k]
    }

    pub fn newest(&self) -> Option<(f64, f64)> {
        self.data.back().copied()
    }

    pub fn oldest(&self) -> Option<(f64, f64)> {
        self.data.front().copied()
    }

    /// Append the next sample; `t` must advance by exactly `dt` from the
    /// previous sample (1e-9 relative tolerance). Old samples are evicted once
    /// the window is exceeded.
    pub fn push_sample(&mut self, t: f64, x0: f64) -> Result<(), RegressorError> {
        if !t.is_finite() || !x0.is_finite() {
            return Err(RegressorError::NonFiniteSample(t));
        }
        if let Some(&(last_t, _)) = self.data.back() {
            let expected = last_t + self.dt;
            let tol = 1e-9 * expected.abs().max(t.abs()).max(1.0);
            if (t - expected).abs() > tol {
                return Err(RegressorError::SampleGap { expected, got: t });
            }
        }
        self.data.push_back((t, x0));
        if self.data.len() > self.capacity() {
            self.data.pop_front();
        }
        Ok(())
    }
}

/// Result of a windowed filtered-integral evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedMu {
    pub value: Vec<f64>,
    /// True while the buffer spans less than the full window, in which case
    /// the integral runs from the first sample (exact, not truncated).
    pub warm_up: bool,
}

fn check_eval_time(buf: &HistoryBuffer, t: f64) -> Result<(), RegressorError> {
    let (newest, _) = buf.newest().ok_or(RegressorError::EmptyBuffer)?;
    if (t - newest).abs() > 1e-9 * newest.abs().max(t.abs()).max(1.0) {
        return Err(RegressorError::TimeMismatch { requested: t, newest });
    }
    Ok(())
}

/// Direct trapezoidal evaluation of the windowed filtered integral for
/// channel `i` at decay parameter `tau` and regressor parameters `p`.
///
/// The inner decay exponent is accumulated by cumulative trapezoid over the
/// same sample grid. Requires `beta_i > 0` across the window and `t` equal to
/// the newest buffered sample time.
pub fn windowed_mu(
    spec: &PlantSpec,
    buf: &HistoryBuffer,
    i: usize,
    tau: f64,
    p: &[f64],
    t: f64,
) -> Result<WindowedMu, RegressorError> {
    check_eval_time(buf, t)?;
    let ch = spec.channel(i);
    let dim = ch.dim;
    let m = buf.len();
    let used = m.min(buf.capacity());
    let lo = m - used;
    let dt = buf.dt();

    let mut acc = vec![0.0; dim];
    let (tk, x0k) = buf.get(m - 1);
    let mut prev_b = positive_beta(ch.beta.eval(x0k, tau, tk), tk)?;
    let mut prev_g = (ch.phi)(x0k, p, tk);
    debug_assert_eq!(prev_g.len(), dim);
    let mut exponent = 0.0;

    for k in (lo..m - 1).rev() {
        let (tk, x0k) = buf.get(k);
        let b = positive_beta(ch.beta.eval(x0k, tau, tk), tk)?;
        exponent += 0.5 * dt * (b + prev_b);
        let w = (-exponent).exp();
        let mut g = (ch.phi)(x0k, p, tk);
        for v in g.iter_mut() {
            *v *= w;
        }
        for c in 0..dim {
            acc[c] += 0.5 * dt * (g[c] + prev_g[c]);
        }
        prev_b = b;
        prev_g = g;
    }

    Ok(WindowedMu { value: acc, warm_up: !buf.is_full() })
}

fn positive_beta(b: f64, t: f64) -> Result<f64, RegressorError> {
    if b <= 0.0 || !b.is_finite() {
        return Err(RegressorError::NonPositiveDecay { t, value: b });
    }
    Ok(b)
}

/// Richardson estimate of the quadrature error of [`windowed_mu`]: the
/// trapezoid sum is recomputed on the stride-2 subgrid ending at `t` and the
/// deviation (over the span both grids share) is divided by 3.
pub fn windowed_mu_quadrature_error(
    spec: &PlantSpec,
    buf: &HistoryBuffer,
    i: usize,
    tau: f64,
    p: &[f64],
    t: f64,
) -> Result<f64, RegressorError> {
    check_eval_time(buf, t)?;
    let ch = spec.channel(i);
    let dim = ch.dim;
    let m = buf.len();
    let used = m.min(buf.capacity());
    if used < 3 {
        return Ok(0.0);
    }
    let pairs = (used - 1) / 2;
    let lo = m - (2 * pairs + 1); // shared span: even number of fine intervals
    let dt = buf.dt();

    let weighted = |k: usize, exponent: f64| -> Vec<f64> {
        let (tk, x0k) = buf.get(k);
        let w = (-exponent).exp();
        let mut g = (ch.phi)(x0k, p, tk);
        for v in g.iter_mut() {
            *v *= w;
        }
        g
    };

    // One backward pass accumulating the exponent on the fine grid and both
    // trapezoid sums; the coarse rule uses every second sample.
    let mut fine = vec![0.0; dim];
    let mut coarse = vec![0.0; dim];
    let mut exponent = 0.0;
    let (tk, x0k) = buf.get(m - 1);
    let mut prev_b = positive_beta(ch.beta.eval(x0k, tau, tk), tk)?;
    let mut prev_fine = weighted(m - 1, 0.0);
    let mut prev_coarse = prev_fine.clone();

    for k in (lo..m - 1).rev() {
        let (tk, x0k) = buf.get(k);
        let b = positive_beta(ch.beta.eval(x0k, tau, tk), tk)?;
        exponent += 0.5 * dt * (b + prev_b);
        let g = weighted(k, exponent);
        for c in 0..dim {
            fine[c] += 0.5 * dt * (g[c] + prev_fine[c]);
        }
        if (m - 1 - k) % 2 == 0 {
            for c in 0..dim {
                coarse[c] += dt * (g[c] + prev_coarse[c]);
            }
            prev_coarse = g.clone();
        }
        prev_b = b;
        prev_fine = g;
    }

    let mut diff2 = 0.0;
    for c in 0..dim {
        diff2 += (fine[c] - coarse[c]).powi(2);
    }
    Ok(diff2.sqrt() / 3.0)
}

/// One RK4 step of the auxiliary filter `d eta/dt = -tau eta + phi_val` with
/// the drive held constant over the step. Test oracle for the windowed
/// integrals; not used by the estimator itself.
pub fn aux_filter_step(
    state: &[f64],
    tau: f64,
    phi_val: &[f64],
    dt: f64,
) -> Result<Vec<f64>, RegressorError> {
    if phi_val.len() != state.len() {
        return Err(RegressorError::BadParameter(format!(
            "filter state has {} components, drive has {}",
            state.len(),
            phi_val.len()
        )));
    }
    let mut rhs = |_t: f64, x: &[f64], out: &mut [f64]| {
        for j in 0..x.len() {
            out[j] = -tau * x[j] + phi_val[j];
        }
    };
    ode::rk4_step(&mut rhs, 0.0, state, dt)
        .map_err(|e| RegressorError::BadParameter(format!("filter step failed: {e}")))
}

/// Tail bound `exp(-beta_min T) * phi_sup / beta_min` on the windowed
/// truncation error of one channel.
pub fn approximation_error_bound(
    window: f64,
    beta_min: f64,
    phi_sup: f64,
) -> Result<f64, RegressorError> {
    if !(beta_min > 0.0) {
        return Err(RegressorError::NonPositiveDecay { t: f64::NAN, value: beta_min });
    }
    if !(phi_sup >= 0.0) || !(window >= 0.0) {
        return Err(RegressorError::BadParameter(
            "window and phi_sup must be non-negative".into(),
        ));
    }
    Ok((-beta_min * window).exp() * phi_sup / beta_min)
}

/// Exact O(1)-per-step sliding evaluation of the windowed trapezoid sum of
/// `exp(-tau (t - s)) phi(s)` at one fixed `tau`. Equals [`windowed_mu`] with
/// constant `beta = tau` to rounding; the equality is covered by tests.
#[derive(Debug, Clone)]
pub struct SlidingConvolution {
    dim: usize,
    dt: f64,
    decay: f64,
    decay_window: f64,
    acc: Vec<f64>,
    seen: usize,
}

impl SlidingConvolution {
    pub fn new(tau: f64, dt: f64, n_window: usize, dim: usize) -> Self {
        let decay = (-tau * dt).exp();
        SlidingConvolution {
            dim,
            dt,
            decay,
            decay_window: (-tau * (n_window as f64) * dt).exp(),
            acc: vec![0.0; dim],
            seen: 0,
        }
    }

    /// Advance by one sample. `prev` is the previous newest `phi` sample;
    /// `tail1`/`tail0` are the second-oldest and oldest ring entries and must
    /// be given exactly when the ring already spans the full window.
    pub fn push(
        &mut self,
        phi_new: &[f64],
        prev: Option<&[f64]>,
        tails: Option<(&[f64], &[f64])>,
    ) {
        debug_assert_eq!(phi_new.len(), self.dim);
        self.seen += 1;
        let Some(prev) = prev else {
            return; // first sample: single-point trapezoid is zero
        };
        let a = self.decay;
        let h = 0.5 * self.dt;
        for c in 0..self.dim {
            self.acc[c] = a * self.acc[c] + h * (phi_new[c] + a * prev[c]);
        }
        if let Some((tail1, tail0)) = tails {
            let an = self.decay_window;
            for c in 0..self.dim {
                self.acc[c] -= h * (an * tail1[c] + a * an * tail0[c]);
            }
        }
    }

    pub fn value(&self) -> &[f64] {
        &self.acc
    }

    pub fn samples_seen(&self) -> usize {
        self.seen
    }
}

/// Ring of `phi` samples backing the sliding recursions (tail lookups).
#[derive(Debug, Clone)]
struct PhiRing {
    cap: usize,
    data: VecDeque<Vec<f64>>,
}

impl PhiRing {
    fn new(cap: usize) -> Self {
        PhiRing { cap, data: VecDeque::with_capacity(cap + 1) }
    }

    fn is_full(&self) -> bool {
        self.data.len() == self.cap
    }

    fn push(&mut self, v: Vec<f64>) {
        self.data.push_back(v);
        if self.data.len() > self.cap {
            self.data.pop_front();
        }
    }
}

/// Chebyshev-Gauss-Lobatto panel of sliding convolutions over a `tau`
/// subinterval, evaluated between nodes by barycentric interpolation.
#[derive(Debug, Clone)]
struct ChebPanel {
    lo: f64,
    hi: f64,
    nodes: Vec<f64>,
    bary: Vec<f64>,
    filters: Vec<SlidingConvolution>,
}

impl ChebPanel {
    fn new(lo: f64, hi: f64, n_nodes: usize, dt: f64, n_window: usize, dim: usize) -> Self {
        let (nodes, bary) = cgl_nodes(lo, hi, n_nodes);
        let filters = nodes
            .iter()
            .map(|&tau| SlidingConvolution::new(tau, dt, n_window, dim))
            .collect();
        ChebPanel { lo, hi, nodes, bary, filters }
    }

    fn push(&mut self, phi_new: &[f64], prev: Option<&[f64]>, tails: Option<(&[f64], &[f64])>) {
        for f in self.filters.iter_mut() {
            f.push(phi_new, prev, tails);
        }
    }

    fn eval_into(&self, tau: f64, out: &mut [f64]) {
        let scale = (self.hi - self.lo).abs().max(1.0);
        let mut num = vec![0.0; out.len()];
        let mut den = 0.0;
        for (j, &node) in self.nodes.iter().enumerate() {
            let d = tau - node;
            if d.abs() < 1e-14 * scale {
                out.copy_from_slice(self.filters[j].value());
                return;
            }
            let q = self.bary[j] / d;
            den += q;
            let v = self.filters[j].value();
            for c in 0..out.len() {
                num[c] += q * v[c];
            }
        }
        for c in 0..out.len() {
            out[c] = num[c] / den;
        }
    }
}

/// CGL nodes on `[lo, hi]` with their barycentric weights.
fn cgl_nodes(lo: f64, hi: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    if n <= 1 || hi - lo < 1e-12 {
        return (vec![0.5 * (lo + hi)], vec![1.0]);
    }
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let mut nodes = Vec::with_capacity(n);
    let mut bary = Vec::with_capacity(n);
    for k in 0..n {
        let angle = std::f64::consts::PI * k as f64 / (n - 1) as f64;
        nodes.push(mid + half * angle.cos());
        let mut w = if k % 2 == 0 { 1.0 } else { -1.0 };
        if k == 0 || k == n - 1 {
            w *= 0.5;
        }
        bary.push(w);
    }
    (nodes, bary)
}

fn lambda_in_box(lambda: &[f64], boxes: &[(f64, f64)]) -> Result<(), RegressorError> {
    for (j, (&v, &(lo, hi))) in lambda.iter().zip(boxes).enumerate() {
        let tol = 1e-9 * (hi - lo).abs().max(1.0);
        if !(v >= lo - tol && v <= hi + tol) {
            return Err(RegressorError::LambdaOutOfBox { index: j, value: v });
        }
    }
    Ok(())
}

/// Extended regressor value at one `(t, lambda)` point:
/// `(phi_0(x0, p0, t), c_1 mu_1, ..., c_n mu_n)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressorValue {
    pub components: Vec<f64>,
    pub at_time: f64,
    pub at_lambda: Vec<f64>,
    /// True while any channel's window is still anchored at the first sample.
    pub warm_up: bool,
}

/// Assemble the extended regressor by direct quadrature; the reference path.
pub fn assemble_regressor(
    spec: &PlantSpec,
    buf: &HistoryBuffer,
    x0: f64,
    lambda: &[f64],
    t: f64,
) -> Result<RegressorValue, RegressorError> {
    lambda_in_box(lambda, spec.lambda_box())?;
    check_eval_time(buf, t)?;
    let mut components = Vec::with_capacity(spec.regressor_dim());
    components.extend(spec.phi0_eval(x0, lambda, t));
    let mut warm_up = false;
    for i in 1..=spec.n() {
        let ch = spec.channel(i);
        let tau = lambda[ch.tau];
        let p: Vec<f64> = ch.p.iter().map(|&j| lambda[j]).collect();
        let mu = windowed_mu(spec, buf, i, tau, &p, t)?;
        warm_up |= mu.warm_up;
        let c = spec.channel_c(i, x0, lambda, t);
        components.extend(mu.value.iter().map(|&v| c * v));
    }
    debug_assert_eq!(components.len(), spec.regressor_dim());
    Ok(RegressorValue { components, at_time: t, at_lambda: lambda.to_vec(), warm_up })
}

enum EngineChannel {
    /// `beta = tau` and `phi` free of `p`: sliding recursions on a Chebyshev
    /// `tau` grid, sample cache for the window tails.
    Fast { ring: PhiRing, panels: Vec<ChebPanel>, dim: usize },
    /// Anything else: direct quadrature per evaluation.
    General,
}

/// Incremental regressor evaluator for a forward simulation pass.
///
/// Push exactly the integration samples in order; evaluate at the current
/// time and any `lambda` inside the box. Evaluations are pointwise in
/// `lambda`. Running suprema of `|phi_i|` and `|c_i|` are tracked for the
/// truncation-error report.
pub struct RegressorEngine {
    buf: HistoryBuffer,
    channels: Vec<EngineChannel>,
    phi_sup: Vec<f64>,
    c_sup: Vec<f64>,
}

/// Nodes per Chebyshev panel giving ~1e-9 interpolation error for windowed
/// exponential kernels with `T * box_halfwidth` up to ~50 (checked by tests).
pub const DEFAULT_BANK_NODES: usize = 48;

impl RegressorEngine {
    pub fn new(
        spec: &PlantSpec,
        window: f64,
        dt: f64,
        nodes_per_panel: usize,
    ) -> Result<Self, RegressorError> {
        let buf = HistoryBuffer::new(window, dt)?;
        let n_window = buf.n_window();
        let nodes = nodes_per_panel.max(4);
        let mut channels = Vec::with_capacity(spec.n());
        for i in 1..=spec.n() {
            let ch = spec.channel(i);
            if ch.beta.is_constant_tau() && ch.p.is_empty() {
                let (lo, hi) = spec.lambda_box()[ch.tau];
                // Keep T * panel_halfwidth <= 50 so barycentric interpolation
                // stays at ~1e-9; one panel suffices for every shipped box.
                let arg = window * 0.5 * (hi - lo);
                let n_panels = (arg / 50.0).ceil().max(1.0) as usize;
                let edge = (hi - lo) / n_panels as f64;
                let panels = (0..n_panels)
                    .map(|k| {
                        let plo = lo + k as f64 * edge;
                        let phi_edge = if k + 1 == n_panels { hi } else { plo + edge };
                        ChebPanel::new(plo, phi_edge, nodes, dt, n_window, ch.dim)
                    })
                    .collect();
                channels.push(EngineChannel::Fast {
                    ring: PhiRing::new(n_window + 1),
                    panels,
                    dim: ch.dim,
                });
            } else {
                channels.push(EngineChannel::General);
            }
        }
        Ok(RegressorEngine {
            buf,
            channels,
            phi_sup: vec![0.0; spec.n()],
            c_sup: vec![0.0; spec.n()],
        })
    }

    pub fn buffer(&self) -> &HistoryBuffer {
        &self.buf
    }

    /// Append one integration sample and advance every sliding recursion.
    pub fn push(&mut self, spec: &PlantSpec, t: f64, x0: f64) -> Result<(), RegressorError> {
        self.buf.push_sample(t, x0)?;
        for (idx, chan) in self.channels.iter_mut().enumerate() {
            if let EngineChannel::Fast { ring, panels, dim } = chan {
                let ch = spec.channel(idx + 1);
                let phi_new = (ch.phi)(x0, &[], t);
                debug_assert_eq!(phi_new.len(), *dim);
                let norm = dot(&phi_new, &phi_new).sqrt();
                if norm > self.phi_sup[idx] {
                    self.phi_sup[idx] = norm;
                }
                let tails = if ring.is_full() {
                    Some((
                        ring.data.get(1).unwrap().as_slice(),
                        ring.data.front().unwrap().as_slice(),
                    ))
                } else {
                    None
                };
                let prev = ring.data.back().map(|v| v.as_slice());
                // Split borrows: panels mutated while ring entries are read.
                for panel in panels.iter_mut() {
                    panel.push(&phi_new, prev, tails);
                }
                ring.push(phi_new);
            }
        }
        Ok(())
    }

    /// Windowed filtered integral of channel `i` at decay `tau`,
    /// using the sliding bank when the channel qualifies.
    pub fn mu_channel(
        &self,
        spec: &PlantSpec,
        i: usize,
        tau: f64,
        p: &[f64],
        t: f64,
    ) -> Result<Vec<f64>, RegressorError> {
        match &self.channels[i - 1] {
            EngineChannel::Fast { panels, dim, .. } => {
                let mut out = vec![0.0; *dim];
                let panel = panels
                    .iter()
                    .find(|pl| tau >= pl.lo - 1e-12 && tau <= pl.hi + 1e-12)
                    .ok_or(RegressorError::LambdaOutOfBox {
                        index: spec.channel(i).tau,
                        value: tau,
                    })?;
                panel.eval_into(tau, &mut out);
                Ok(out)
            }
            EngineChannel::General => Ok(windowed_mu(spec, &self.buf, i, tau, p, t)?.value),
        }
    }

    /// Extended regressor at the newest sample time and the given `lambda`.
    pub fn eval(
        &mut self,
        spec: &PlantSpec,
        x0: f64,
        lambda: &[f64],
        t: f64,
    ) -> Result<RegressorValue, RegressorError> {
        lambda_in_box(lambda, spec.lambda_box())?;
        check_eval_time(&self.buf, t)?;
        let mut components = Vec::with_capacity(spec.regressor_dim());
        components.extend(spec.phi0_eval(x0, lambda, t));
        let warm_up = !self.buf.is_full();
        for i in 1..=spec.n() {
            let ch = spec.channel(i);
            let tau = lambda[ch.tau];
            let p: Vec<f64> = ch.p.iter().map(|&j| lambda[j]).collect();
            let mu = self.mu_channel(spec, i, tau, &p, t)?;
            let c = spec.channel_c(i, x0, lambda, t);
            if c.abs() > self.c_sup[i - 1] {
                self.c_sup[i - 1] = c.abs();
            }
            if let EngineChannel::General = self.channels[i - 1] {
                let norm = {
                    let phi = (ch.phi)(x0, &p, t);
                    dot(&phi, &phi).sqrt()
                };
                if norm > self.phi_sup[i - 1] {
                    self.phi_sup[i - 1] = norm;
                }
            }
            components.extend(mu.iter().map(|&v| c * v));
        }
        Ok(RegressorValue { components, at_time: t, at_lambda: lambda.to_vec(), warm_up })
    }

    /// Sum over channels of the windowed-truncation tail bound, using the
    /// running suprema of `|c_i|` and `|phi_i|` and the lower box edge of each
    /// decay parameter.
    pub fn truncation_bound(&self, spec: &PlantSpec) -> Result<f64, RegressorError> {
        let mut total = 0.0;
        for i in 1..=spec.n() {
            let ch = spec.channel(i);
            let beta_min = spec.lambda_box()[ch.tau].0;
            total += self.c_sup[i - 1]
                * approximation_error_bound(self.buf.window(), beta_min, self.phi_sup[i - 1])?;
        }
        Ok(total)
    }

    pub fn phi_sup(&self, i: usize) -> f64 {
        self.phi_sup[i - 1]
    }

    pub fn c_sup(&self, i: usize) -> f64 {
        self.c_sup[i - 1]
    }
}

/// Regressor evaluator pinned to one `lambda`, for sweeps over parameter
/// grids (excitation analysis, constant estimation). Constant-`tau` channels
/// run one exact sliding recursion each, including `p`-dependent `phi`;
/// general channels fall back to direct quadrature per evaluation.
pub struct FixedLambdaRegressor {
    lambda: Vec<f64>,
    buf: HistoryBuffer,
    chans: Vec<FixedChannel>,
}

enum FixedChannel {
    Sliding { conv: SlidingConvolution, ring: PhiRing, p: Vec<f64> },
    General,
}

impl FixedLambdaRegressor {
    pub fn new(
        spec: &PlantSpec,
        lambda: &[f64],
        window: f64,
        dt: f64,
    ) -> Result<Self, RegressorError> {
        lambda_in_box(lambda, spec.lambda_box())?;
        let buf = HistoryBuffer::new(window, dt)?;
        let n_window = buf.n_window();
        let mut chans = Vec::with_capacity(spec.n());
        for i in 1..=spec.n() {
            let ch = spec.channel(i);
            if ch.beta.is_constant_tau() {
                let tau = lambda[ch.tau];
                chans.push(FixedChannel::Sliding {
                    conv: SlidingConvolution::new(tau, dt, n_window, ch.dim),
                    ring: PhiRing::new(n_window + 1),
                    p: ch.p.iter().map(|&j| lambda[j]).collect(),
                });
            } else {
                chans.push(FixedChannel::General);
            }
        }
        Ok(FixedLambdaRegressor { lambda: lambda.to_vec(), buf, chans })
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn push(&mut self, spec: &PlantSpec, t: f64, x0: f64) -> Result<(), RegressorError> {
        self.buf.push_sample(t, x0)?;
        for (idx, chan) in self.chans.iter_mut().enumerate() {
            if let FixedChannel::Sliding { conv, ring, p } = chan {
                let ch = spec.channel(idx + 1);
                let phi_new = (ch.phi)(x0, p, t);
                let tails = if ring.is_full() {
                    Some((
                        ring.data.get(1).unwrap().as_slice(),
                        ring.data.front().unwrap().as_slice(),
                    ))
                } else {
                    None
                };
                let prev = ring.data.back().map(|v| v.as_slice());
                conv.push(&phi_new, prev, tails);
                ring.push(phi_new);
            }
        }
        Ok(())
    }

    /// Extended regressor at the pinned `lambda` and the newest sample time.
    pub fn eval(&self, spec: &PlantSpec, x0: f64, t: f64) -> Result<Vec<f64>, RegressorError> {
        check_eval_time(&self.buf, t)?;
        let mut components = Vec::with_capacity(spec.regressor_dim());
        components.extend(spec.phi0_eval(x0, &self.lambda, t));
        for i in 1..=spec.n() {
            let mu = match &self.chans[i - 1] {
                FixedChannel::Sliding { conv, .. } => conv.value().to_vec(),
                FixedChannel::General => {
                    let ch = spec.channel(i);
                    let tau = self.lambda[ch.tau];
                    let p: Vec<f64> = ch.p.iter().map(|&j| self.lambda[j]).collect();
                    windowed_mu(spec, &self.buf, i, tau, &p, t)?.value
                }
            };
            let c = spec.channel_c(i, x0, &self.lambda, t);
            components.extend(mu.iter().map(|&v| c * v));
        }
        Ok(components)
    }
}
