//! Numerical excitation analysis over sampled parameter grids.
//!
//! Two notions are checked, both on sampled data (grids over the parameter
//! box, uniform time samples), so verdicts are evidence, not proof, and every
//! report carries the sampling that produced it.
//!
//! - Parameter-uniform excitation: for each grid point `lambda`, the minimal
//!   eigenvalue of the window Gram matrix `int_t^{t+L} phi phi^T` minimized
//!   over window starts. The regressor family is uniformly exciting when the
//!   worst grid point still clears a threshold.
//! - Nonlinear excitation: the measured-derivative map
//!   `upsilon(lambda, t) = theta . phi_bar + c0` must separate parameter
//!   values: for all `lambda, lambda', t` some `t'` in the trailing window has
//!   `|upsilon(lambda,t) - upsilon(lambda',t')| >= beta dist(E(lambda), lambda')`,
//!   where `E(lambda)` collects parameters indistinguishable from `lambda`.
//!   The largest `beta` consistent with the samples is reported.

use std::collections::VecDeque;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExcitationError {
    #[error("empty sampling grid")]
    EmptyGrid,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("bad window: {0}")]
    BadWindow(String),
    #[error("eigensolver did not converge: {0}")]
    EigenFailed(String),
    #[error("window Gram matrix has eigenvalue {eigenvalue} at grid point {lambda_index}")]
    NotPsd { lambda_index: usize, eigenvalue: f64 },
}

/// Uniformly sampled vector series over a parameter grid:
/// `values[grid_index][time_index][component]` at times `t0 + k dt`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampledSeries {
    pub lambda_grid: Vec<Vec<f64>>,
    pub t0: f64,
    pub dt: f64,
    pub values: Vec<Vec<Vec<f64>>>,
}

impl SampledSeries {
    pub fn from_fn(
        lambda_grid: Vec<Vec<f64>>,
        t0: f64,
        dt: f64,
        n_samples: usize,
        f: impl Fn(&[f64], f64) -> Vec<f64>,
    ) -> Result<Self, ExcitationError> {
        if lambda_grid.is_empty() {
            return Err(ExcitationError::EmptyGrid);
        }
        if !(dt > 0.0) || n_samples == 0 {
            return Err(ExcitationError::BadWindow(format!(
                "dt = {dt}, n_samples = {n_samples}"
            )));
        }
        let values: Vec<Vec<Vec<f64>>> = lambda_grid
            .iter()
            .map(|lam| (0..n_samples).map(|k| f(lam, t0 + k as f64 * dt)).collect())
            .collect();
        let s = SampledSeries { lambda_grid, t0, dt, values };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ExcitationError> {
        if self.lambda_grid.is_empty() || self.values.len() != self.lambda_grid.len() {
            return Err(ExcitationError::EmptyGrid);
        }
        let n = self.values[0].len();
        let d = self.values[0].first().map_or(0, |v| v.len());
        if n == 0 || d == 0 {
            return Err(ExcitationError::Dimension("series has no samples".into()));
        }
        for per_lambda in &self.values {
            if per_lambda.len() != n || per_lambda.iter().any(|v| v.len() != d) {
                return Err(ExcitationError::Dimension(
                    "ragged series: all grid points need equal samples and dimension".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn len_time(&self) -> usize {
        self.values[0].len()
    }

    pub fn dim(&self) -> usize {
        self.values[0][0].len()
    }

    fn window_steps(&self, l: f64) -> Result<usize, ExcitationError> {
        let raw = l / self.dt;
        let n = raw.round();
        if !(l > 0.0) || n < 1.0 || (raw - n).abs() > 1e-9 * raw.max(1.0) {
            return Err(ExcitationError::BadWindow(format!(
                "window {l} is not a positive multiple of dt = {}",
                self.dt
            )));
        }
        let n = n as usize;
        if n >= self.len_time() {
            return Err(ExcitationError::BadWindow(format!(
                "window of {n} steps exceeds the {}-sample series",
                self.len_time()
            )));
        }
        Ok(n)
    }
}

/// Evenly spaced scalar grid as one-dimensional parameter points.
pub fn lambda_grid_1d(lo: f64, hi: f64, n: usize) -> Vec<Vec<f64>> {
    assert!(n >= 1);
    if n == 1 {
        return vec![vec![0.5 * (lo + hi)]];
    }
    (0..n)
        .map(|k| vec![lo + (hi - lo) * k as f64 / (n - 1) as f64])
        .collect()
}

/// Cartesian product of per-axis grids.
pub fn product_grid(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = vec![vec![]];
    for axis in axes {
        let mut next = Vec::with_capacity(out.len() * axis.len());
        for point in &out {
            for &v in axis {
                let mut p = point.clone();
                p.push(v);
                next.push(p);
            }
        }
        out = next;
    }
    out
}

/// Eigenvalues of a symmetric matrix (row-major, `n x n`) by cyclic Jacobi
/// rotations. Dimensions here are small; robustness beats speed.
pub(crate) fn symmetric_eigenvalues(a: &mut [f64], n: usize) -> Result<Vec<f64>, ExcitationError> {
    debug_assert_eq!(a.len(), n * n);
    if n == 1 {
        return Ok(vec![a[0]]);
    }
    let frob = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tol = 1e-14 * frob.max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() <= tol {
            return Ok((0..n).map(|k| a[k * n + k]).collect());
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= tol / (n as f64) {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[p * n + k] = a[k * n + p];
                    a[k * n + q] = s * akp + c * akq;
                    a[q * n + k] = a[k * n + q];
                }
            }
        }
    }
    Err(ExcitationError::EigenFailed(format!("{n}x{n} matrix, 100 sweeps")))
}

/// Window-Gram excitation report over a parameter grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PEReport {
    pub l: f64,
    pub lambda_grid: Vec<Vec<f64>>,
    /// Per grid point: minimal Gram eigenvalue, minimized over window starts.
    pub mu_of_lambda: Vec<f64>,
    /// Worst grid point.
    pub mu_uniform: f64,
    pub mu_threshold: f64,
    pub verdict: bool,
    // Sampling that produced the verdict.
    pub window_stride_steps: usize,
    pub t0: f64,
    pub dt: f64,
    pub n_time_samples: usize,
}

/// For each grid point, slide a length-`l` window over the series, accumulate
/// the Gram matrix of outer products by trapezoid, and take the minimal
/// eigenvalue; minimize over starts. `window_stride` defaults to a tenth of
/// the window.
pub fn check_lambda_upe(
    series: &SampledSeries,
    l: f64,
    window_stride: Option<usize>,
    mu_threshold: f64,
) -> Result<PEReport, ExcitationError> {
    series.validate()?;
    let n_l = series.window_steps(l)?;
    let stride = window_stride.unwrap_or((n_l / 10).max(1)).max(1);
    let len = series.len_time();
    if len - 1 < n_l + stride {
        return Err(ExcitationError::BadWindow(format!(
            "series spans {} steps; need window ({n_l}) plus one stride ({stride})",
            len - 1
        )));
    }
    let d = series.dim();
    let dt = series.dt;

    let mut mu_of_lambda = Vec::with_capacity(series.lambda_grid.len());
    let mut outer = vec![0.0; d * d];
    for (g, per_lambda) in series.values.iter().enumerate() {
        // Prefix sums of outer products; Gram(a,b) by trapezoid is
        // dt (P[b] - P[a] + op_a/2 - op_b/2).
        let mut prefix = vec![0.0f64; len * d * d];
        let mut run = vec![0.0f64; d * d];
        for (k, v) in per_lambda.iter().enumerate() {
            for i in 0..d {
                for j in 0..d {
                    run[i * d + j] += v[i] * v[j];
                }
            }
            prefix[k * d * d..(k + 1) * d * d].copy_from_slice(&run);
        }
        let op = |k: usize, out: &mut [f64]| {
            let v = &per_lambda[k];
            for i in 0..d {
                for j in 0..d {
                    out[i * d + j] = v[i] * v[j];
                }
            }
        };

        let mut mu = f64::INFINITY;
        let mut start = 0usize;
        let mut op_a = vec![0.0; d * d];
        while start + n_l <= len - 1 {
            let b = start + n_l;
            op(start, &mut op_a);
            op(b, &mut outer);
            let mut gram = vec![0.0; d * d];
            for e in 0..d * d {
                gram[e] = dt
                    * (prefix[b * d * d + e] - prefix[start * d * d + e] + 0.5 * op_a[e]
                        - 0.5 * outer[e]);
            }
            let eig = symmetric_eigenvalues(&mut gram, d)?;
            let lam_min = eig.into_iter().fold(f64::INFINITY, f64::min);
            if lam_min < -1e-10 {
                return Err(ExcitationError::NotPsd { lambda_index: g, eigenvalue: lam_min });
            }
            mu = mu.min(lam_min.max(0.0));
            start += stride;
        }
        mu_of_lambda.push(mu);
    }
    let mu_uniform = mu_of_lambda.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(PEReport {
        l,
        lambda_grid: series.lambda_grid.clone(),
        mu_of_lambda,
        mu_uniform,
        mu_threshold,
        verdict: mu_uniform >= mu_threshold,
        window_stride_steps: stride,
        t0: series.t0,
        dt: series.dt,
        n_time_samples: len,
    })
}

/// Grid points whose series stays within `sup_tolerance` (Euclidean, sup over
/// time) of the series at `index` — the sampled indistinguishability class.
pub fn equivalence_class(
    series: &SampledSeries,
    index: usize,
    sup_tolerance: f64,
) -> Result<Vec<usize>, ExcitationError> {
    series.validate()?;
    if index >= series.lambda_grid.len() {
        return Err(ExcitationError::Dimension(format!(
            "grid index {index} out of range"
        )));
    }
    let me = &series.values[index];
    let mut members = Vec::new();
    for (j, other) in series.values.iter().enumerate() {
        let mut sup = 0.0f64;
        for (a, b) in me.iter().zip(other) {
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            sup = sup.max(d2.sqrt());
            if sup > sup_tolerance {
                break;
            }
        }
        if sup <= sup_tolerance {
            members.push(j);
        }
    }
    Ok(members)
}

/// Greedy partition of the grid into indistinguishability classes. The
/// sup-distance relation at a tolerance need not be transitive; each class is
/// seeded by its lowest unassigned index.
pub fn equivalence_partition(
    series: &SampledSeries,
    sup_tolerance: f64,
) -> Result<Vec<Vec<usize>>, ExcitationError> {
    let n = series.lambda_grid.len();
    let mut assigned = vec![false; n];
    let mut classes = Vec::new();
    for i in 0..n {
        if assigned[i] {
            continue;
        }
        let members: Vec<usize> = equivalence_class(series, i, sup_tolerance)?
            .into_iter()
            .filter(|&j| !assigned[j])
            .collect();
        for &j in &members {
            assigned[j] = true;
        }
        classes.push(members);
    }
    Ok(classes)
}

/// Nonlinear-excitation report: the largest separation rate consistent with
/// the sampled tuples, and the sampled indistinguishability classes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NPEReport {
    pub l: f64,
    pub lambda_grid: Vec<Vec<f64>>,
    /// `None` when no sampled pair constrains the rate (single class / single
    /// point): reported as unconstrained.
    pub beta_estimate: Option<f64>,
    pub unconstrained: bool,
    pub equivalence_classes: Vec<Vec<usize>>,
    pub class_tolerance: f64,
    pub t0: f64,
    pub dt: f64,
    pub n_time_samples: usize,
}

/// Sliding min and max over trailing windows of `n_l + 1` samples, one entry
/// per time index from `n_l` on.
fn sliding_extrema(series: &[f64], n_l: usize) -> (Vec<f64>, Vec<f64>) {
    let len = series.len();
    let mut mins = Vec::with_capacity(len - n_l);
    let mut maxs = Vec::with_capacity(len - n_l);
    let mut min_dq: VecDeque<usize> = VecDeque::new();
    let mut max_dq: VecDeque<usize> = VecDeque::new();
    for k in 0..len {
        while min_dq.back().is_some_and(|&i| series[i] >= series[k]) {
            min_dq.pop_back();
        }
        min_dq.push_back(k);
        while max_dq.back().is_some_and(|&i| series[i] <= series[k]) {
            max_dq.pop_back();
        }
        max_dq.push_back(k);
        if k >= n_l {
            let lo = k - n_l;
            while *min_dq.front().unwrap() < lo {
                min_dq.pop_front();
            }
            while *max_dq.front().unwrap() < lo {
                max_dq.pop_front();
            }
            mins.push(series[*min_dq.front().unwrap()]);
            maxs.push(series[*max_dq.front().unwrap()]);
        }
    }
    (mins, maxs)
}

/// Estimate the separation rate of a scalar-valued series (dimension 1): for
/// every ordered grid pair with positive class distance and every time with a
/// full trailing window,
///
/// ```text
/// rate(i, j, t) = max_{t' in [t-L, t]} |v_i(t) - v_j(t')| / dist(class(i), grid[j])
/// ```
///
/// and the estimate is the minimum over all sampled tuples.
pub fn check_nonlinear_pe(
    series: &SampledSeries,
    l: f64,
    class_tolerance: f64,
) -> Result<NPEReport, ExcitationError> {
    series.validate()?;
    if series.dim() != 1 {
        return Err(ExcitationError::Dimension(format!(
            "separation check expects scalar series, got dimension {}",
            series.dim()
        )));
    }
    let n_l = series.window_steps(l)?;
    let len = series.len_time();
    let grid = &series.lambda_grid;
    let classes = equivalence_partition(series, class_tolerance)?;
    let mut class_of = vec![0usize; grid.len()];
    for (c, members) in classes.iter().enumerate() {
        for &m in members {
            class_of[m] = c;
        }
    }

    let scalars: Vec<Vec<f64>> = series
        .values
        .iter()
        .map(|per| per.iter().map(|v| v[0]).collect())
        .collect();
    let extrema: Vec<(Vec<f64>, Vec<f64>)> =
        scalars.iter().map(|s| sliding_extrema(s, n_l)).collect();

    let euclid = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };

    let mut beta = f64::INFINITY;
    let mut constrained = false;
    for i in 0..grid.len() {
        for j in 0..grid.len() {
            if i == j {
                continue;
            }
            // dist(E(lambda_i), lambda_j): nearest member of i's class.
            let dist = classes[class_of[i]]
                .iter()
                .map(|&m| euclid(&grid[m], &grid[j]))
                .fold(f64::INFINITY, f64::min);
            if dist <= 1e-12 {
                continue; // indistinguishable: no constraint
            }
            constrained = true;
            let (mins_j, maxs_j) = &extrema[j];
            let vi = &scalars[i];
            let mut worst = f64::INFINITY;
            for k in n_l..len {
                let a = vi[k];
                let reach = (a - mins_j[k - n_l]).max(maxs_j[k - n_l] - a);
                if reach < worst {
                    worst = reach;
                }
            }
            beta = beta.min(worst / dist);
        }
    }
    Ok(NPEReport {
        l,
        lambda_grid: grid.clone(),
        beta_estimate: if constrained { Some(beta.max(0.0)) } else { None },
        unconstrained: !constrained,
        equivalence_classes: classes,
        class_tolerance,
        t0: series.t0,
        dt: series.dt,
        n_time_samples: len,
    })
}
