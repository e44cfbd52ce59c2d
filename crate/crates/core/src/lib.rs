//! Adaptive observers for nonlinearly parameterized systems that fall outside
//! the canonical adaptive-observer form.
//!
//! The system class handled here has a measured scalar coordinate `x0` driven
//! by unmeasured filtered states `x_i`:
//!
//! ```text
//! dx0/dt = theta_0' phi_0(x0, p0, t) + sum_i c_i(x0, q_i, t) x_i + c_0(x0, q0, t) + xi_0(t) + u(t)
//! dx_i/dt = -beta_i(x0, tau_i, t) x_i + theta_i' phi_i(x0, p_i, t) + xi_i(t)
//! y = x0
//! ```
//!
//! with linear parameters `theta` and nonlinear parameters
//! `lambda = (p, q, tau)` confined to known boxes. Because each `x_i` is an
//! exponentially stable filter of known structure, its contribution to `dx0/dt`
//! can be rewritten through windowed filtered integrals of `phi_i`, giving an
//! extended regressor that is linear in `theta` but parameterized by `lambda`.
//!
//! The toolkit splits into:
//!
//! - [`ode`]: fixed-step RK4 integration on uniform grids (determinism first).
//! - [`plant`]: the system class, its callbacks, and coordinate transforms for
//!   the shipped examples.
//! - [`regressor`]: history buffers, windowed filtered integrals, and the
//!   extended regressor, including an exact sliding-window fast path.
//! - [`observer`]: the output estimator, gradient law for `theta`, the torus
//!   explorer that sweeps `lambda` estimates, and the closed-loop runner.
//! - [`excitation`]: persistency-of-excitation analysis over `lambda` grids and
//!   the nonlinear separation variant with equivalence classes.
//! - [`bounds`]: closed-form gain caps, error bounds, and empirical estimators
//!   for the constants they consume.
//! - [`experiments`]: shipped example configurations (Duffing oscillator,
//!   bio-reactor, Lotka-Volterra) and the plain-text config format.

pub mod bounds;
pub mod excitation;
pub mod experiments;
pub mod observer;
pub mod ode;
pub mod plant;
pub mod regressor;
