//! The plant class: a measured scalar coordinate driven by exponentially
//! stable filtered states of known structure but unknown parameters.
//!
//! ```text
//! dx0/dt = theta_0' phi_0(x0, p0, t) + sum_i c_i(x0, q_i, t) x_i + c_0(x0, q0, t) + xi_0(t) + u(t)
//! dx_i/dt = -beta_i(x0, tau_i, t) x_i + theta_i' phi_i(x0, p_i, t) + xi_i(t)      i = 1..=n
//! y = x0
//! ```
//!
//! `beta_i > 0` is a model requirement, enforced wherever `beta_i` is
//! evaluated. The nonlinear parameter vector `lambda` is flat; each role
//! (`p_i`, `q_i`, `tau_i`) maps into it by index, so one physical parameter may
//! legitimately serve several roles (the bio-reactor's saturation constant
//! appears in both `c_0` and `c_1`). When no component is shared the layout
//! reduces to the stacked `col(p0, q0, tau_1, p_1, q_1, ...)` convention and
//! `dim(lambda) = n + sum_i (dim p_i + dim q_i)`.

use std::ops::Range;
use std::sync::Arc;

use thiserror::Error;

/// `phi_i(x0, p_i, t) -> R^{d_i}`.
pub type PhiFn = Arc<dyn Fn(f64, &[f64], f64) -> Vec<f64> + Send + Sync>;
/// `beta_i(x0, tau_i, t) -> R`.
pub type BetaFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;
/// `c_i(x0, q_i, t) -> R`.
pub type CoefFn = Arc<dyn Fn(f64, &[f64], f64) -> f64 + Send + Sync>;
/// Exogenous scalar signal of time (input `u`, disturbances `xi_i`).
pub type SignalFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlantError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("beta_{channel} = {value} is not positive at t = {t}")]
    BetaNonPositive { channel: usize, t: f64, value: f64 },
    #[error("parameter box violation: {0}")]
    BoxViolation(String),
    #[error("lambda layout: {0}")]
    Layout(String),
    #[error("singular transform: {0}")]
    SingularTransform(String),
}

/// Decay-rate structure of a filtered channel.
///
/// `ConstantTau` declares `beta_i(x0, tau_i, t) = tau_i` identically, which
/// makes the channel's filtered integral a plain exponential convolution and
/// unlocks the exact sliding-window fast path in [`crate::regressor`].
#[derive(Clone)]
pub enum Beta {
    ConstantTau,
    General(BetaFn),
}

impl Beta {
    pub fn eval(&self, x0: f64, tau: f64, t: f64) -> f64 {
        match self {
            Beta::ConstantTau => tau,
            Beta::General(f) => f(x0, tau, t),
        }
    }

    pub fn is_constant_tau(&self) -> bool {
        matches!(self, Beta::ConstantTau)
    }
}

/// One unmeasured filtered state `x_i`, `i >= 1`.
#[derive(Clone)]
pub struct FilteredChannel {
    /// Output dimension of `phi_i`.
    pub dim: usize,
    pub phi: PhiFn,
    /// Indices into `lambda` forming `p_i`.
    pub p: Vec<usize>,
    pub beta: Beta,
    /// Index into `lambda` of `tau_i`.
    pub tau: usize,
    /// Coupling coefficient `c_i` multiplying `x_i` in `dx0/dt`.
    pub c: CoefFn,
    /// Indices into `lambda` forming `q_i`.
    pub q: Vec<usize>,
    /// Disturbance `xi_i`; zero in the shipped configurations.
    pub xi: SignalFn,
}

/// Immutable description of one plant. Construct through [`PlantSpec::builder`];
/// safe to share across concurrently running integrations.
#[derive(Clone)]
pub struct PlantSpec {
    phi0: PhiFn,
    d0: usize,
    p0: Vec<usize>,
    c0: CoefFn,
    q0: Vec<usize>,
    xi0: SignalFn,
    u: SignalFn,
    channels: Vec<FilteredChannel>,
    theta_true: Vec<f64>,
    lambda_true: Vec<f64>,
    theta_box: Vec<(f64, f64)>,
    lambda_box: Vec<(f64, f64)>,
    /// Prefix offsets of the theta blocks: block `i` is
    /// `theta[offsets[i]..offsets[i+1]]`, block 0 belonging to `phi_0`.
    theta_offsets: Vec<usize>,
}

impl std::fmt::Debug for PlantSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PlantSpec")
            .field("n", &self.channels.len())
            .field("d0", &self.d0)
            .field("regressor_dim", &self.theta_true.len())
            .field("theta_true", &self.theta_true)
            .field("lambda_true", &self.lambda_true)
            .field("lambda_box", &self.lambda_box)
            .finish_non_exhaustive()
    }
}

pub fn zero_signal() -> SignalFn {
    Arc::new(|_t| 0.0)
}

pub fn zero_coef() -> CoefFn {
    Arc::new(|_x0, _q, _t| 0.0)
}

pub fn empty_phi() -> PhiFn {
    Arc::new(|_x0, _p, _t| Vec::new())
}

pub struct PlantBuilder {
    phi0: PhiFn,
    d0: usize,
    p0: Vec<usize>,
    c0: CoefFn,
    q0: Vec<usize>,
    xi0: SignalFn,
    u: SignalFn,
    channels: Vec<FilteredChannel>,
    theta_true: Vec<f64>,
    lambda_true: Vec<f64>,
    theta_box: Vec<(f64, f64)>,
    lambda_box: Vec<(f64, f64)>,
}

impl PlantSpec {
    pub fn builder() -> PlantBuilder {
        PlantBuilder {
            phi0: empty_phi(),
            d0: 0,
            p0: Vec::new(),
            c0: zero_coef(),
            q0: Vec::new(),
            xi0: zero_signal(),
            u: zero_signal(),
            channels: Vec::new(),
            theta_true: Vec::new(),
            lambda_true: Vec::new(),
            theta_box: Vec::new(),
            lambda_box: Vec::new(),
        }
    }

    /// Number of filtered states `n`.
    pub fn n(&self) -> usize {
        self.channels.len()
    }

    /// Total regressor dimension `d = d_0 + sum_i d_i`.
    pub fn regressor_dim(&self) -> usize {
        *self.theta_offsets.last().unwrap()
    }

    /// Dimension `s` of the flat nonlinear parameter vector.
    pub fn lambda_dim(&self) -> usize {
        self.lambda_true.len()
    }

    pub fn d0(&self) -> usize {
        self.d0
    }

    pub fn channel(&self, i: usize) -> &FilteredChannel {
        &self.channels[i - 1]
    }

    pub fn theta_true(&self) -> &[f64] {
        &self.theta_true
    }

    pub fn lambda_true(&self) -> &[f64] {
        &self.lambda_true
    }

    pub fn theta_box(&self) -> &[(f64, f64)] {
        &self.theta_box
    }

    pub fn lambda_box(&self) -> &[(f64, f64)] {
        &self.lambda_box
    }

    /// Theta block of channel `i` (`i = 0` addresses the `phi_0` block).
    pub fn theta_block(&self, i: usize) -> Range<usize> {
        self.theta_offsets[i]..self.theta_offsets[i + 1]
    }

    fn gather(&self, idx: &[usize], lambda: &[f64]) -> Vec<f64> {
        idx.iter().map(|&j| lambda[j]).collect()
    }

    pub fn phi0_eval(&self, x0: f64, lambda: &[f64], t: f64) -> Vec<f64> {
        let p = self.gather(&self.p0, lambda);
        let v = (self.phi0)(x0, &p, t);
        debug_assert_eq!(v.len(), self.d0);
        v
    }

    pub fn c0_eval(&self, x0: f64, lambda: &[f64], t: f64) -> f64 {
        let q = self.gather(&self.q0, lambda);
        (self.c0)(x0, &q, t)
    }

    pub fn u_eval(&self, t: f64) -> f64 {
        (self.u)(t)
    }

    pub fn xi0_eval(&self, t: f64) -> f64 {
        (self.xi0)(t)
    }

    pub fn channel_phi(&self, i: usize, x0: f64, lambda: &[f64], t: f64) -> Vec<f64> {
        let ch = self.channel(i);
        let p = self.gather(&ch.p, lambda);
        let v = (ch.phi)(x0, &p, t);
        debug_assert_eq!(v.len(), ch.dim);
        v
    }

    pub fn channel_tau(&self, i: usize, lambda: &[f64]) -> f64 {
        lambda[self.channel(i).tau]
    }

    pub fn channel_beta(&self, i: usize, x0: f64, lambda: &[f64], t: f64) -> f64 {
        let ch = self.channel(i);
        ch.beta.eval(x0, lambda[ch.tau], t)
    }

    pub fn channel_c(&self, i: usize, x0: f64, lambda: &[f64], t: f64) -> f64 {
        let ch = self.channel(i);
        let q = self.gather(&ch.q, lambda);
        (ch.c)(x0, &q, t)
    }

    /// Measured output `y = x0`.
    pub fn output(&self, x: &[f64]) -> f64 {
        x[0]
    }

    /// Full right-hand side at the true parameters.
    ///
    /// `x = (x0, x_1, ..., x_n)`. Fails if any `beta_i` evaluates non-positive
    /// (model violation) or the state dimension disagrees with the channel layout.
    pub fn plant_rhs(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, PlantError> {
        let n = self.n();
        if x.len() != n + 1 {
            return Err(PlantError::Dimension(format!(
                "state has {} components, plant needs {}",
                x.len(),
                n + 1
            )));
        }
        let x0 = x[0];
        let lambda = &self.lambda_true;
        let mut dx = vec![0.0; n + 1];

        let phi0 = self.phi0_eval(x0, lambda, t);
        let th0 = &self.theta_true[self.theta_block(0)];
        let mut dx0 = dot(th0, &phi0);
        dx0 += self.c0_eval(x0, lambda, t) + self.xi0_eval(t) + self.u_eval(t);

        for i in 1..=n {
            let ch = self.channel(i);
            let beta = self.channel_beta(i, x0, lambda, t);
            if beta <= 0.0 {
                return Err(PlantError::BetaNonPositive { channel: i, t, value: beta });
            }
            dx0 += self.channel_c(i, x0, lambda, t) * x[i];
            let phi = self.channel_phi(i, x0, lambda, t);
            let th = &self.theta_true[self.theta_block(i)];
            dx[i] = -beta * x[i] + dot(th, &phi) + (ch.xi)(t);
        }
        dx[0] = dx0;
        Ok(dx)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl PlantBuilder {
    /// `phi_0` with its output dimension and the `lambda` indices forming `p_0`.
    pub fn measured_regressor(mut self, dim: usize, p: Vec<usize>, phi0: PhiFn) -> Self {
        self.phi0 = phi0;
        self.d0 = dim;
        self.p0 = p;
        self
    }

    /// Additive known-structure term `c_0` with its `q_0` indices.
    pub fn additive_term(mut self, q: Vec<usize>, c0: CoefFn) -> Self {
        self.c0 = c0;
        self.q0 = q;
        self
    }

    pub fn input(mut self, u: SignalFn) -> Self {
        self.u = u;
        self
    }

    pub fn measured_noise(mut self, xi0: SignalFn) -> Self {
        self.xi0 = xi0;
        self
    }

    pub fn channel(mut self, ch: FilteredChannel) -> Self {
        self.channels.push(ch);
        self
    }

    pub fn theta_true(mut self, v: Vec<f64>) -> Self {
        self.theta_true = v;
        self
    }

    pub fn lambda_true(mut self, v: Vec<f64>) -> Self {
        self.lambda_true = v;
        self
    }

    pub fn theta_box(mut self, b: Vec<(f64, f64)>) -> Self {
        self.theta_box = b;
        self
    }

    pub fn lambda_box(mut self, b: Vec<(f64, f64)>) -> Self {
        self.lambda_box = b;
        self
    }

    pub fn build(self) -> Result<PlantSpec, PlantError> {
        let s = self.lambda_true.len();
        let mut offsets = Vec::with_capacity(self.channels.len() + 2);
        offsets.push(0);
        offsets.push(self.d0);
        for ch in &self.channels {
            offsets.push(offsets.last().unwrap() + ch.dim);
        }
        let d = *offsets.last().unwrap();

        if self.theta_true.len() != d {
            return Err(PlantError::Dimension(format!(
                "theta_true has {} components, blocks need {}",
                self.theta_true.len(),
                d
            )));
        }
        if self.theta_box.len() != d {
            return Err(PlantError::Dimension(format!(
                "theta_box has {} intervals, need {}",
                self.theta_box.len(),
                d
            )));
        }
        if self.lambda_box.len() != s {
            return Err(PlantError::Dimension(format!(
                "lambda_box has {} intervals, need {}",
                self.lambda_box.len(),
                s
            )));
        }

        let mut used = vec![false; s];
        let mut mark = |idx: &[usize], role: &str| -> Result<(), PlantError> {
            for &j in idx {
                if j >= s {
                    return Err(PlantError::Layout(format!(
                        "{role} references lambda[{j}] but dim(lambda) = {s}"
                    )));
                }
                used[j] = true;
            }
            Ok(())
        };
        mark(&self.p0, "p_0")?;
        mark(&self.q0, "q_0")?;
        for (i, ch) in self.channels.iter().enumerate() {
            mark(&ch.p, &format!("p_{}", i + 1))?;
            mark(&ch.q, &format!("q_{}", i + 1))?;
            mark(std::slice::from_ref(&ch.tau), &format!("tau_{}", i + 1))?;
        }
        if let Some(j) = used.iter().position(|&u| !u) {
            return Err(PlantError::Layout(format!("lambda[{j}] is bound to no role")));
        }

        check_box(&self.theta_box, &self.theta_true, "theta")?;
        check_box(&self.lambda_box, &self.lambda_true, "lambda")?;

        for (i, ch) in self.channels.iter().enumerate() {
            if ch.beta.is_constant_tau() && self.lambda_box[ch.tau].0 <= 0.0 {
                return Err(PlantError::BoxViolation(format!(
                    "channel {} has beta = tau, so the tau box must stay positive; \
                     lambda[{}] starts at {}",
                    i + 1,
                    ch.tau,
                    self.lambda_box[ch.tau].0
                )));
            }
        }

        Ok(PlantSpec {
            phi0: self.phi0,
            d0: self.d0,
            p0: self.p0,
            c0: self.c0,
            q0: self.q0,
            xi0: self.xi0,
            u: self.u,
            channels: self.channels,
            theta_true: self.theta_true,
            lambda_true: self.lambda_true,
            theta_box: self.theta_box,
            lambda_box: self.lambda_box,
            theta_offsets: offsets,
        })
    }
}

fn check_box(boxes: &[(f64, f64)], truth: &[f64], name: &str) -> Result<(), PlantError> {
    for (j, (&(lo, hi), &v)) in boxes.iter().zip(truth).enumerate() {
        if !(lo <= hi) {
            return Err(PlantError::BoxViolation(format!(
                "{name}_box[{j}] = [{lo}, {hi}] is empty"
            )));
        }
        if v < lo || v > hi {
            return Err(PlantError::BoxViolation(format!(
                "{name}_true[{j}] = {v} outside [{lo}, {hi}]"
            )));
        }
    }
    Ok(())
}

/// Bio-reactor coordinates `(s0, s1)` to class coordinates `(x0, x1)`:
/// `x0 = s0`, `x1 = r_max (b s1 + s0)`.
pub fn bioreactor_to_class(
    s0: f64,
    s1: f64,
    r_max: f64,
    b: f64,
) -> Result<(f64, f64), PlantError> {
    check_bioreactor_constants(r_max, b)?;
    Ok((s0, r_max * (b * s1 + s0)))
}

/// Recover the unmeasured substrate `s1` from class coordinates.
pub fn bioreactor_s1_from_class(
    x0: f64,
    x1: f64,
    r_max: f64,
    b: f64,
) -> Result<f64, PlantError> {
    check_bioreactor_constants(r_max, b)?;
    Ok((x1 / r_max - x0) / b)
}

fn check_bioreactor_constants(r_max: f64, b: f64) -> Result<(), PlantError> {
    if r_max == 0.0 || b == 0.0 {
        return Err(PlantError::SingularTransform(format!(
            "bio-reactor map needs r_max != 0 and b != 0 (got r_max = {r_max}, b = {b})"
        )));
    }
    Ok(())
}

/// Lotka-Volterra `(x, y)` to class coordinates: `x0 = x`, `x1 = y + delta x`.
pub fn lotka_volterra_to_class(x: f64, y: f64, delta: f64) -> (f64, f64) {
    (x, y + delta * x)
}

/// Recover the predator coordinate `y` from class coordinates.
pub fn lotka_volterra_y_from_class(x0: f64, x1: f64, delta: f64) -> f64 {
    x1 - delta * x0
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Minimal two-channel plant used by layout tests:
    /// dx0 = th1*x0 + c1*x1 + c2*x2, dx1 = -l0*x1 + th2*x0, dx2 = -b(x0)*x2 + th3.
    fn two_channel() -> PlantSpec {
        PlantSpec::builder()
            .measured_regressor(1, vec![], Arc::new(|x0, _p, _t| vec![x0]))
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
            .channel(FilteredChannel {
                dim: 1,
                phi: Arc::new(|_x0, _p, _t| vec![1.0]),
                p: vec![],
                beta: Beta::General(Arc::new(|x0, tau, _t| tau * (1.0 + x0 * x0))),
                tau: 1,
                c: Arc::new(|_x0, q, _t| q[0]),
                q: vec![2],
                xi: zero_signal(),
            })
            .theta_true(vec![0.5, 1.0, -0.3])
            .lambda_true(vec![0.4, 0.7, 2.0])
            .theta_box(vec![(-1.0, 1.0); 3])
            .lambda_box(vec![(0.1, 1.0), (0.1, 1.0), (-5.0, 5.0)])
            .build()
            .unwrap()
    }

    #[test]
    fn layout_and_dimensions() {
        let spec = two_channel();
        assert_eq!(spec.n(), 2);
        assert_eq!(spec.regressor_dim(), 3);
        assert_eq!(spec.lambda_dim(), 3);
        assert_eq!(spec.theta_block(0), 0..1);
        assert_eq!(spec.theta_block(1), 1..2);
        assert_eq!(spec.theta_block(2), 2..3);
        assert_eq!(spec.channel_tau(2, &[0.4, 0.7, 2.0]), 0.7);
    }

    #[test]
    fn rhs_assembles_all_terms() {
        let spec = two_channel();
        let x = [2.0, 3.0, -1.0];
        let dx = spec.plant_rhs(0.0, &x).unwrap();
        // dx0 = 0.5*2 + 1*3 + 2*(-1) = 2, dx1 = -0.4*3 + 1*2 = 0.8,
        // dx2 = -0.7*(1+4)*(-1) + (-0.3) = 3.2
        assert!((dx[0] - 2.0).abs() < 1e-12);
        assert!((dx[1] - 0.8).abs() < 1e-12);
        assert!((dx[2] - 3.2).abs() < 1e-12);
    }

    #[test]
    fn zero_plant_stays_zero() {
        let spec = PlantSpec::builder()
            .theta_true(vec![])
            .theta_box(vec![])
            .lambda_true(vec![])
            .lambda_box(vec![])
            .build()
            .unwrap();
        let dx = spec.plant_rhs(1.0, &[0.0]).unwrap();
        assert_eq!(dx, vec![0.0]);
    }

    #[test]
    fn rhs_is_linear_in_theta() {
        // Superposition over the theta blocks at fixed state.
        let base = two_channel();
        let with_theta = |th: Vec<f64>| {
            PlantSpec {
                theta_true: th,
                ..base.clone()
            }
        };
        let x = [1.3, -0.7, 0.9];
        let t = 2.5;
        let a = with_theta(vec![0.5, 1.0, -0.3]);
        let b = with_theta(vec![-0.2, 0.4, 0.9]);
        let sum = with_theta(vec![0.3, 1.4, 0.6]);
        let zero = with_theta(vec![0.0, 0.0, 0.0]);
        let da = a.plant_rhs(t, &x).unwrap();
        let db = b.plant_rhs(t, &x).unwrap();
        let ds = sum.plant_rhs(t, &x).unwrap();
        let dz = zero.plant_rhs(t, &x).unwrap();
        for j in 0..3 {
            let lin = (da[j] - dz[j]) + (db[j] - dz[j]) + dz[j];
            assert!((ds[j] - lin).abs() < 1e-12, "component {j}");
        }
    }

    #[test]
    fn nonpositive_beta_faults() {
        let spec = PlantSpec::builder()
            .channel(FilteredChannel {
                dim: 1,
                phi: Arc::new(|_x0, _p, _t| vec![1.0]),
                p: vec![],
                beta: Beta::General(Arc::new(|_x0, tau, t| tau - t)),
                tau: 0,
                c: Arc::new(|_x0, _q, _t| 1.0),
                q: vec![],
                xi: zero_signal(),
            })
            .theta_true(vec![1.0])
            .theta_box(vec![(-2.0, 2.0)])
            .lambda_true(vec![0.5])
            .lambda_box(vec![(0.0, 1.0)])
            .build()
            .unwrap();
        assert!(spec.plant_rhs(0.0, &[0.0, 0.0]).is_ok());
        let err = spec.plant_rhs(1.0, &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, PlantError::BetaNonPositive { channel: 1, .. }));
    }

    #[test]
    fn builder_rejects_bad_layouts() {
        // Unused lambda component.
        let err = PlantSpec::builder()
            .theta_true(vec![])
            .theta_box(vec![])
            .lambda_true(vec![1.0])
            .lambda_box(vec![(0.0, 2.0)])
            .build()
            .unwrap_err();
        assert!(matches!(err, PlantError::Layout(_)));

        // Truth outside its box.
        let err = PlantSpec::builder()
            .measured_regressor(1, vec![0], Arc::new(|x0, p, _t| vec![p[0] * x0]))
            .theta_true(vec![1.0])
            .theta_box(vec![(-0.5, 0.5)])
            .lambda_true(vec![1.0])
            .lambda_box(vec![(0.0, 2.0)])
            .build()
            .unwrap_err();
        assert!(matches!(err, PlantError::BoxViolation(_)));

        // Constant-tau channel with a box touching zero.
        let err = PlantSpec::builder()
            .channel(FilteredChannel {
                dim: 1,
                phi: Arc::new(|_x0, _p, _t| vec![1.0]),
                p: vec![],
                beta: Beta::ConstantTau,
                tau: 0,
                c: Arc::new(|_x0, _q, _t| 1.0),
                q: vec![],
                xi: zero_signal(),
            })
            .theta_true(vec![1.0])
            .theta_box(vec![(-2.0, 2.0)])
            .lambda_true(vec![0.5])
            .lambda_box(vec![(0.0, 1.0)])
            .build()
            .unwrap_err();
        assert!(matches!(err, PlantError::BoxViolation(_)));
    }

    #[test]
    fn bioreactor_transform_round_trip() {
        let (x0, x1) = bioreactor_to_class(20.0, 10.0, 1.0, 1.0).unwrap();
        assert_eq!((x0, x1), (20.0, 30.0));
        let s1 = bioreactor_s1_from_class(x0, x1, 1.0, 1.0).unwrap();
        assert!((s1 - 10.0).abs() < 1e-12);
        assert!(bioreactor_to_class(1.0, 1.0, 0.0, 1.0).is_err());
        assert!(bioreactor_s1_from_class(1.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn lotka_volterra_transform_round_trip() {
        let (x0, x1) = lotka_volterra_to_class(2.0, 1.0, 0.4);
        assert_eq!((x0, x1), (2.0, 1.8));
        let y = lotka_volterra_y_from_class(x0, x1, 0.4);
        assert!((y - 1.0).abs() < 1e-12);
    }
}
