//! Proximal-gradient covariance steering between two Gaussian beliefs.
//!
//! Each outer iteration linearises the model along the current nominal mean,
//! expands the hinge collision cost to second order, blends the linearised
//! drift with the previous closed loop and solves one linear covariance
//! steering problem for the estimated state. The error covariance of an EKF
//! running along the nominal accounts for partial observation: the steered
//! quantity is `Σ̂ = Σ − P` and the reported state covariance is `Σ̂ + P`.

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlAffineModel, LinearizedSystem};
use crate::error::check_dim;
use crate::grid::{hermite_samples, knot_values, rk4_forward, TimeGrid};
use crate::linalg::{self, symmetrize};
use crate::sdf::{hinge_cost, CollisionCostParams, SdfMap};
use crate::steering::{self, BoundaryMoments, LqDrivingTerms, ShootingOptions};
use crate::{Error, Result};

/// Mean and covariance of a Gaussian state.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        check_dim("covariance rows", mean.len(), covariance.nrows())?;
        check_dim("covariance cols", mean.len(), covariance.ncols())?;
        if !linalg::is_spd(&covariance, 1e-12) {
            return Err(Error::InvalidParameter(
                "belief covariance must be SPD".into(),
            ));
        }
        Ok(Self {
            mean,
            covariance: symmetrize(&covariance),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgcsParams {
    /// Proximal step size `η`.
    pub step_size: f64,
    pub max_iterations: usize,
    /// Stop once no knot of the nominal mean moves by more than this.
    pub tolerance: f64,
    /// Bound on terminal residuals (mean, absolute; covariance, relative
    /// Frobenius) required for an iterate to count as converged.
    pub terminal_tolerance: f64,
    /// Drive the estimated-state covariance with the innovation covariance
    /// `PHᵀR⁻¹HP` instead of `εBBᵀ`.
    pub innovation_noise: bool,
    /// Nominal means with a larger norm are treated as divergence.
    pub divergence_bound: f64,
}

impl Default for PgcsParams {
    fn default() -> Self {
        Self {
            step_size: 1e-3,
            max_iterations: 50,
            tolerance: 1e-4,
            terminal_tolerance: 1e-3,
            innovation_noise: false,
            divergence_bound: 1e6,
        }
    }
}

impl PgcsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "step size must be > 0, got {}",
                self.step_size
            )));
        }
        if self.max_iterations < 1 {
            return Err(Error::InvalidParameter(
                "max_iterations must be >= 1".into(),
            ));
        }
        if !(self.tolerance > 0.0)
            || !(self.terminal_tolerance > 0.0)
            || !(self.divergence_bound > 0.0)
        {
            return Err(Error::InvalidParameter(
                "pgcs tolerances must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Knot-wise moments and policy of one steered edge.
///
/// `gain` and `feedforward` act on the true model: the commanded input along
/// the mean is `u = K x̄ + d`, and `f(x) + B(Kx + d)` reproduces the closed
/// loop `A x + a` to first order around `x̄`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDistribution {
    pub times: Vec<f64>,
    pub mean: Vec<DVector<f64>>,
    pub covariance: Vec<DMatrix<f64>>,
    pub error_covariance: Vec<DMatrix<f64>>,
    pub estimate_covariance: Vec<DMatrix<f64>>,
    pub gain: Vec<DMatrix<f64>>,
    pub feedforward: Vec<DVector<f64>>,
    pub closed_loop_matrix: Vec<DMatrix<f64>>,
    pub closed_loop_offset: Vec<DVector<f64>>,
}

impl TrajectoryDistribution {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Mean-path control `K x̄ + d` at every knot.
    pub fn mean_control(&self) -> Vec<DVector<f64>> {
        self.gain
            .iter()
            .zip(&self.feedforward)
            .zip(&self.mean)
            .map(|((k, d), x)| k * x + d)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `∫ hinge² dt` along the mean produced by this iteration.
    pub hinge_integral: f64,
    pub mean_residual: f64,
    pub covariance_residual: f64,
    pub mean_change: f64,
}

#[derive(Debug, Clone)]
pub struct EdgeConnectionResult {
    pub trajectory: TrajectoryDistribution,
    /// Nominal stopped moving and terminal moments are within tolerance.
    pub converged: bool,
    /// Terminal moments are within tolerance, whether or not the nominal
    /// is still moving when the iteration budget runs out.
    pub moments_converged: bool,
    pub iterations: usize,
    pub diagnostics: Vec<IterationRecord>,
}

/// EKF error covariance `Ṗ = FP + PFᵀ + εBBᵀ − PHᵀR⁻¹HP` along a nominal
/// given at every half-knot; returns `P` at every half-knot.
pub fn ekf_riccati_samples(
    model: &ControlAffineModel,
    grid: &TimeGrid,
    nominal: &[DVector<f64>],
    p0: &DMatrix<f64>,
) -> Result<Vec<DMatrix<f64>>> {
    check_dim("nominal samples", grid.n_samples(), nominal.len())?;
    let n = model.state_dim();
    check_dim("initial error covariance", n, p0.nrows())?;
    if !linalg::is_psd(p0, 1e-10) {
        return Err(Error::InvalidParameter(
            "initial error covariance must be PSD".into(),
        ));
    }
    let eps = model.noise();
    let mut f = Vec::with_capacity(nominal.len());
    let mut diffusion = Vec::with_capacity(nominal.len());
    let mut info = Vec::with_capacity(nominal.len());
    for (j, x) in nominal.iter().enumerate() {
        let t = grid.sample_time(j);
        f.push(model.drift_jacobian(t, x)?);
        let b = model.input_matrix(t);
        diffusion.push(&b * b.transpose() * eps);
        let h = model.measurement_jacobian(x)?;
        info.push(h.transpose() * model.measurement_precision(t) * h);
    }
    filter_riccati_samples(grid, &f, &diffusion, &info, p0)
}

/// Linear filter Riccati `Ṗ = FP + PFᵀ + D − P S P` with `F`, the process
/// diffusion `D` and the measurement information `S = HᵀR⁻¹H` given at every
/// half-knot; returns `P` at every half-knot.
pub fn filter_riccati_samples(
    grid: &TimeGrid,
    f: &[DMatrix<f64>],
    diffusion: &[DMatrix<f64>],
    info: &[DMatrix<f64>],
    p0: &DMatrix<f64>,
) -> Result<Vec<DMatrix<f64>>> {
    check_dim("drift jacobian samples", grid.n_samples(), f.len())?;
    check_dim("diffusion samples", grid.n_samples(), diffusion.len())?;
    check_dim("information samples", grid.n_samples(), info.len())?;
    let field = |j: usize, p: &DMatrix<f64>| {
        let fp = &f[j] * p;
        &fp + fp.transpose() + &diffusion[j] - p * &info[j] * p
    };
    let knots = rk4_forward(grid, symmetrize(p0), field, |p| symmetrize(&p));
    for (i, p) in knots.iter().enumerate() {
        if !linalg::is_psd(p, 1e-10) {
            return Err(Error::NumericalInstability(format!(
                "error covariance lost positive semi-definiteness at knot {i}"
            )));
        }
    }
    Ok(hermite_samples(grid, &knots, field)
        .into_iter()
        .map(|p| symmetrize(&p))
        .collect())
}

/// EKF error covariance at every knot.
pub fn ekf_riccati(
    model: &ControlAffineModel,
    grid: &TimeGrid,
    nominal: &[DVector<f64>],
    p0: &DMatrix<f64>,
) -> Result<Vec<DMatrix<f64>>> {
    Ok(knot_values(&ekf_riccati_samples(model, grid, nominal, p0)?))
}

/// Quadratic state cost `½xᵀQx + xᵀr` of one proximal subproblem.
///
/// The collision part is the Gauss–Newton expansion of the hinge cost
/// around the nominal, weighted by `w = η/(1+η)`. Blending the drifts alone
/// drops one term of the proximal objective: with `u_k(x) = K_k x + d_k` the
/// previous policy relative to the current linearisation (`A_k = Â + BK_k`),
/// the state cost `½·η/(1+η)²·‖u_k(x)‖²` is added. Without it the optimum of
/// the original problem would not be a fixed point of the iteration.
#[allow(clippy::too_many_arguments)]
pub fn build_quadratic_weights(
    map: &SdfMap,
    params: &CollisionCostParams,
    nominal: &[DVector<f64>],
    previous_drift: &[DMatrix<f64>],
    previous_offset: &[DVector<f64>],
    linearized: &LinearizedSystem,
    input_pinv: &DMatrix<f64>,
    step_size: f64,
) -> (Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
    let w = step_size / (1.0 + step_size);
    let c = step_size / ((1.0 + step_size) * (1.0 + step_size));
    nominal
        .iter()
        .enumerate()
        .map(|(j, x)| {
            let k = input_pinv * (&previous_drift[j] - &linearized.drift_matrix[j]);
            let d = input_pinv * (&previous_offset[j] - &linearized.drift_offset[j]);
            let mut q = k.transpose() * &k * c;
            let mut r = k.transpose() * d * c;
            let h = hinge_cost(map, params, x);
            if h.hinge > 0.0 {
                r += (&h.gradient - &h.gn_hessian * x) * w;
                q += h.gn_hessian * w;
            }
            (q, r)
        })
        .unzip()
}

/// Mean and covariance of `dX = (A X + a) dt + B√ε dW` at every knot.
#[allow(clippy::too_many_arguments)]
pub fn propagate_nominal(
    model: &ControlAffineModel,
    grid: &TimeGrid,
    drift_matrix: &[DMatrix<f64>],
    drift_offset: &[DVector<f64>],
    m0: &DVector<f64>,
    sigma0: &DMatrix<f64>,
    divergence_bound: f64,
) -> Result<steering::Moments> {
    check_dim("drift samples", grid.n_samples(), drift_matrix.len())?;
    check_dim("offset samples", grid.n_samples(), drift_offset.len())?;
    let mean = steering::propagate_mean(grid, drift_matrix, drift_offset, m0);
    check_divergence(&mean, divergence_bound)?;
    let eps = model.noise();
    let cov = steering::propagate_covariance(
        grid,
        drift_matrix,
        |j| {
            let b = model.input_matrix(grid.sample_time(j));
            &b * b.transpose() * eps
        },
        sigma0,
    );
    steering::check_moments(&mean, &cov)?;
    Ok((mean, cov))
}

fn check_divergence(mean: &[DVector<f64>], bound: f64) -> Result<()> {
    for x in mean {
        let norm = x.norm();
        if !norm.is_finite() || norm > bound {
            return Err(Error::NumericalInstability(format!(
                "nominal mean diverged (norm {norm:.3e} exceeds {bound:.3e})"
            )));
        }
    }
    Ok(())
}

/// Trapezoidal `∫ hinge(S(x̄))² dt` over knot values.
pub fn hinge_integral(
    map: &SdfMap,
    params: &CollisionCostParams,
    grid: &TimeGrid,
    mean: &[DVector<f64>],
) -> f64 {
    mean.iter()
        .zip(grid.trapezoid_weights())
        .map(|(x, w)| {
            let h = hinge_cost(map, params, x).hinge;
            w * h * h
        })
        .sum()
}

/// Straight line in position with constant velocity, at every half-knot.
fn straight_line(
    grid: &TimeGrid,
    m0: &DVector<f64>,
    mt: &DVector<f64>,
    d: usize,
) -> Vec<DVector<f64>> {
    let t_end = grid.horizon();
    let vel = (mt.rows(0, d) - m0.rows(0, d)) / t_end;
    grid.sample_times()
        .iter()
        .map(|&t| {
            let mut x = DVector::zeros(2 * d);
            x.rows_mut(0, d).copy_from(&(m0.rows(0, d) + &vel * t));
            x.rows_mut(d, d).copy_from(&vel);
            x
        })
        .collect()
}

fn mean_samples(
    grid: &TimeGrid,
    knots: &[DVector<f64>],
    a: &[DMatrix<f64>],
    c: &[DVector<f64>],
) -> Vec<DVector<f64>> {
    hermite_samples(grid, knots, |j, x| &a[j] * x + &c[j])
}

/// Connect `start` to `goal` with proximal-gradient covariance steering.
///
/// `p0` is the error covariance of the filter at the start; `start.covariance
/// − p0` must be SPD.
#[allow(clippy::too_many_arguments)]
pub fn pgcs_connect(
    model: &ControlAffineModel,
    map: &SdfMap,
    collision: &CollisionCostParams,
    params: &PgcsParams,
    grid: &TimeGrid,
    start: &GaussianBelief,
    p0: &DMatrix<f64>,
    goal: &GaussianBelief,
) -> Result<EdgeConnectionResult> {
    params.validate()?;
    collision.validate()?;
    let n = model.state_dim();
    let d = model.spatial_dim();
    check_dim("start mean", n, start.mean.len())?;
    check_dim("goal mean", n, goal.mean.len())?;
    check_dim("map dimension", d, map.dim())?;
    check_dim("initial error covariance", n, p0.nrows())?;
    let sigma_hat0 = symmetrize(&(&start.covariance - p0));
    if !linalg::is_spd(&sigma_hat0, 1e-10) {
        return Err(Error::Infeasible(
            "initial covariance below estimation error (Σ0 − P0 not positive definite)".into(),
        ));
    }
    let eta = params.step_size;
    let ns = grid.n_samples();
    let b: Vec<DMatrix<f64>> = grid
        .sample_times()
        .iter()
        .map(|&t| model.input_matrix(t))
        .collect();
    let b_pinv = linalg::left_pinv(&b[0])?;

    let init = model.linearize_along(grid, &straight_line(grid, &start.mean, &goal.mean, d))?;
    let mut drift = init.drift_matrix;
    let mut offset = init.drift_offset;
    let mut mean = steering::propagate_mean(grid, &drift, &offset, &start.mean);
    check_divergence(&mean, params.divergence_bound)?;
    let mut nominal = mean_samples(grid, &mean, &drift, &offset);

    let mut shooting = ShootingOptions::default();
    let mut diagnostics = Vec::new();
    let mut converged = false;
    let mut sigma_hat = Vec::new();
    for k in 0..params.max_iterations {
        let p = ekf_riccati_samples(model, grid, &nominal, p0)?;
        let sigma_hat_t = symmetrize(&(&goal.covariance - p.last().unwrap()));
        if !linalg::is_spd(&sigma_hat_t, 1e-10) {
            return Err(Error::Infeasible(
                "terminal covariance below estimation error".into(),
            ));
        }
        let lin = model.linearize_along(grid, &nominal)?;
        let (q, r) = build_quadratic_weights(
            map, collision, &nominal, &drift, &offset, &lin, &b_pinv, eta,
        );
        let blend_a: Vec<DMatrix<f64>> = (0..ns)
            .map(|j| (&drift[j] + &lin.drift_matrix[j] * eta) / (1.0 + eta))
            .collect();
        let blend_c: Vec<DVector<f64>> = (0..ns)
            .map(|j| (&offset[j] + &lin.drift_offset[j] * eta) / (1.0 + eta))
            .collect();
        let mut terms =
            LqDrivingTerms::new(grid, blend_a, blend_c, b.clone(), q, r, model.noise())?;
        if params.innovation_noise {
            let innovation = (0..ns)
                .map(|j| {
                    let t = grid.sample_time(j);
                    let h = &lin.sensor[j];
                    &p[j] * h.transpose() * model.measurement_precision(t) * h * &p[j]
                })
                .collect();
            terms = terms.with_diffusion(innovation)?;
        }
        let boundary = BoundaryMoments::new(
            start.mean.clone(),
            sigma_hat0.clone(),
            goal.mean.clone(),
            sigma_hat_t.clone(),
        )?;
        let sol = steering::steer(&terms, &boundary, grid, &shooting)?;
        shooting.initial_guess = Some(sol.policy.riccati[0].clone());
        shooting.jacobian = Some(sol.shooting_jacobian.clone());

        let next_drift = sol.closed_loop_matrix.clone();
        let next_offset: Vec<DVector<f64>> = (0..ns)
            .map(|j| &terms.drift_offset[j] + &terms.input_matrix[j] * &sol.policy.feedforward[j])
            .collect();
        let change = sol
            .mean
            .iter()
            .zip(&mean)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        check_divergence(&sol.mean, params.divergence_bound)?;
        let p_knots = knot_values(&p);
        let record = IterationRecord {
            iteration: k,
            hinge_integral: hinge_integral(map, collision, grid, &sol.mean),
            mean_residual: (sol.mean.last().unwrap() - &goal.mean).norm(),
            covariance_residual: linalg::rel_frobenius(
                &(sol.covariance.last().unwrap() + p_knots.last().unwrap()),
                &goal.covariance,
            ),
            mean_change: change,
        };
        debug!(
            "pgcs iteration {k}: change {:.3e}, hinge {:.3e}, shooting iterations {}",
            change, record.hinge_integral, sol.shooting_iterations
        );
        diagnostics.push(record);
        drift = next_drift;
        offset = next_offset;
        mean = sol.mean;
        sigma_hat = sol.covariance;
        nominal = mean_samples(grid, &mean, &drift, &offset);
        if change < params.tolerance {
            converged = true;
            break;
        }
    }

    // moments reported along the final nominal
    let p = knot_values(&ekf_riccati_samples(model, grid, &nominal, p0)?);
    for (i, s) in sigma_hat.iter().enumerate() {
        if !linalg::is_spd(s, 1e-10) {
            return Err(Error::Infeasible(format!(
                "estimated-state covariance not positive definite at knot {i}"
            )));
        }
    }
    let covariance: Vec<DMatrix<f64>> = sigma_hat.iter().zip(&p).map(|(s, p)| s + p).collect();
    let mean_residual = (mean.last().unwrap() - &goal.mean).norm();
    let covariance_residual = linalg::rel_frobenius(covariance.last().unwrap(), &goal.covariance);
    let moments_converged = mean_residual <= params.terminal_tolerance * (1.0 + goal.mean.norm())
        && covariance_residual <= params.terminal_tolerance;
    converged = converged && moments_converged;

    let mut gain = Vec::with_capacity(grid.n_knots());
    let mut feedforward = Vec::with_capacity(grid.n_knots());
    for (i, x) in mean.iter().enumerate() {
        let j = 2 * i;
        let (a_true, c_true) = model.linearize(x, grid.knot(i))?;
        gain.push(&b_pinv * (&drift[j] - a_true));
        feedforward.push(&b_pinv * (&offset[j] - c_true));
    }
    let trajectory = TrajectoryDistribution {
        times: grid.knots(),
        mean,
        covariance,
        error_covariance: p,
        estimate_covariance: sigma_hat,
        gain,
        feedforward,
        closed_loop_matrix: knot_values(&drift),
        closed_loop_offset: knot_values(&offset),
    };
    Ok(EdgeConnectionResult {
        trajectory,
        converged,
        moments_converged,
        iterations: diagnostics.len(),
        diagnostics,
    })
}
