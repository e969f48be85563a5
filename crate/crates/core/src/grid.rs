//! Uniform time grid and the fixed-step integrator used by every solver.
//!
//! Time-varying coefficients are stored at the `2N + 1` half-knots
//! `s_j = j·dt/2`; knot `i` is half-knot `2i`. One classical RK4 step from
//! knot `i` to `i + 1` reads the coefficient samples `2i`, `2i + 1`, `2i + 2`,
//! so any two routines integrating the same sampled system produce the same
//! discrete trajectory bit-for-bit.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Uniform discretisation of `[0, T]` into `N` steps.
///
/// Knot times are computed as `t_i = (i·T)/N` with the last knot pinned to
/// `T`, so the grid always ends exactly at the horizon; `dt = T/N` is the
/// correctly rounded quotient and is only used as the integration step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "time horizon must be positive, got {horizon}"
            )));
        }
        if steps < 2 {
            return Err(Error::InvalidParameter(format!(
                "time grid needs at least 2 steps, got {steps}"
            )));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn n_knots(&self) -> usize {
        self.steps + 1
    }

    /// Number of half-knot coefficient samples, `2N + 1`.
    pub fn n_samples(&self) -> usize {
        2 * self.steps + 1
    }

    pub fn knot(&self, i: usize) -> f64 {
        if i >= self.steps {
            self.horizon
        } else {
            (i as f64 * self.horizon) / self.steps as f64
        }
    }

    /// Time of half-knot `j`.
    pub fn sample_time(&self, j: usize) -> f64 {
        if j >= 2 * self.steps {
            self.horizon
        } else {
            (j as f64 * self.horizon) / (2 * self.steps) as f64
        }
    }

    pub fn knots(&self) -> Vec<f64> {
        (0..self.n_knots()).map(|i| self.knot(i)).collect()
    }

    pub fn sample_times(&self) -> Vec<f64> {
        (0..self.n_samples()).map(|j| self.sample_time(j)).collect()
    }

    /// Same horizon, `factor` times as many steps.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            horizon: self.horizon,
            steps: self.steps * factor.max(1),
        }
    }

    /// Trapezoidal quadrature weights over the knots.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let dt = self.dt();
        (0..self.n_knots())
            .map(|i| {
                if i == 0 || i == self.steps {
                    0.5 * dt
                } else {
                    dt
                }
            })
            .collect()
    }
}

/// States the RK4 integrator can advance.
pub trait OdeState: Clone {
    /// `self + h·k`
    fn add_scaled(&self, k: &Self, h: f64) -> Self;
    fn all_finite(&self) -> bool;
}

impl OdeState for DMatrix<f64> {
    fn add_scaled(&self, k: &Self, h: f64) -> Self {
        self + k * h
    }
    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

impl OdeState for DVector<f64> {
    fn add_scaled(&self, k: &Self, h: f64) -> Self {
        self + k * h
    }
    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

fn rk4_step<S: OdeState>(
    y: &S,
    h: f64,
    j0: usize,
    jm: usize,
    j1: usize,
    rhs: &mut impl FnMut(usize, &S) -> S,
) -> S {
    let k1 = rhs(j0, y);
    let k2 = rhs(jm, &y.add_scaled(&k1, 0.5 * h));
    let k3 = rhs(jm, &y.add_scaled(&k2, 0.5 * h));
    let k4 = rhs(j1, &y.add_scaled(&k3, h));
    let incr = k1
        .add_scaled(&k2, 2.0)
        .add_scaled(&k3, 2.0)
        .add_scaled(&k4, 1.0);
    y.add_scaled(&incr, h / 6.0)
}

/// Integrate forward from knot 0, returning the state at every knot.
///
/// `rhs(j, y)` evaluates the vector field with coefficients at half-knot `j`.
/// `post` is applied after every step (symmetrisation of matrix states).
pub fn rk4_forward<S: OdeState>(
    grid: &TimeGrid,
    y0: S,
    mut rhs: impl FnMut(usize, &S) -> S,
    post: impl Fn(S) -> S,
) -> Vec<S> {
    let h = grid.dt();
    let mut out = Vec::with_capacity(grid.n_knots());
    out.push(y0);
    for i in 0..grid.steps() {
        let next = rk4_step(&out[i], h, 2 * i, 2 * i + 1, 2 * i + 2, &mut rhs);
        out.push(post(next));
    }
    out
}

/// Integrate backward from the terminal knot; output is in forward knot order.
pub fn rk4_backward<S: OdeState>(
    grid: &TimeGrid,
    yt: S,
    mut rhs: impl FnMut(usize, &S) -> S,
    post: impl Fn(S) -> S,
) -> Vec<S> {
    let h = grid.dt();
    let n = grid.steps();
    let mut rev = Vec::with_capacity(grid.n_knots());
    rev.push(yt);
    for s in 0..n {
        let i = n - s;
        let next = rk4_step(&rev[s], -h, 2 * i, 2 * i - 1, 2 * i - 2, &mut rhs);
        rev.push(post(next));
    }
    rev.reverse();
    rev
}

/// Expand knot values to all half-knots with cubic Hermite interpolation,
/// using the vector field at the knots as the derivative data.
pub fn hermite_samples<S: OdeState>(
    grid: &TimeGrid,
    knots: &[S],
    mut rhs: impl FnMut(usize, &S) -> S,
) -> Vec<S> {
    let h = grid.dt();
    let derivs: Vec<S> = knots
        .iter()
        .enumerate()
        .map(|(i, y)| rhs(2 * i, y))
        .collect();
    let mut out = Vec::with_capacity(grid.n_samples());
    for i in 0..grid.steps() {
        out.push(knots[i].clone());
        // (y0 + y1)/2 + h/8 (y0' - y1')
        let mid = knots[i]
            .add_scaled(&knots[i + 1], 1.0)
            .add_scaled(&derivs[i], 0.25 * h)
            .add_scaled(&derivs[i + 1], -0.25 * h);
        out.push(scale(&mid, 0.5));
    }
    out.push(knots[grid.steps()].clone());
    out
}

fn scale<S: OdeState>(y: &S, c: f64) -> S {
    // y + (c - 1) y
    y.add_scaled(y, c - 1.0)
}

/// Knot values (even indices) of a half-knot series.
pub fn knot_values<T: Clone>(samples: &[T]) -> Vec<T> {
    samples.iter().step_by(2).cloned().collect()
}

/// Piecewise-quadratic interpolation through the three half-knot samples of
/// the step containing `t`.
pub fn interpolate_samples<S: OdeState>(grid: &TimeGrid, samples: &[S], t: f64) -> S {
    let dt = grid.dt();
    let t = t.clamp(0.0, grid.horizon());
    let i = ((t / dt).floor() as usize).min(grid.steps() - 1);
    let s = (t - i as f64 * dt) / dt;
    let (y0, ym, y1) = (&samples[2 * i], &samples[2 * i + 1], &samples[2 * i + 2]);
    // Lagrange basis on nodes 0, 1/2, 1
    let l0 = 2.0 * (s - 0.5) * (s - 1.0);
    let lm = -4.0 * s * (s - 1.0);
    let l1 = 2.0 * s * (s - 0.5);
    scale(y0, l0).add_scaled(ym, lm).add_scaled(y1, l1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rejects_bad_parameters() {
        assert!(TimeGrid::new(0.0, 10).is_err());
        assert!(TimeGrid::new(-1.0, 10).is_err());
        assert!(TimeGrid::new(1.0, 1).is_err());
        assert!(TimeGrid::new(f64::NAN, 10).is_err());
    }

    #[test]
    fn grid_ends_exactly_at_horizon() {
        for &(t, n) in &[(0.3, 7), (2.0, 50), (1.1, 3), (5.7, 99)] {
            let g = TimeGrid::new(t, n).unwrap();
            assert_eq!(g.knot(n), t);
            assert_eq!(g.sample_time(2 * n), t);
            assert_eq!(g.knot(0), 0.0);
            assert_eq!(g.knots().len(), n + 1);
            let w: f64 = g.trapezoid_weights().iter().sum();
            assert!((w - t).abs() < 1e-12);
        }
    }

    #[test]
    fn rk4_is_fourth_order_on_exponential() {
        let err = |n: usize| {
            let g = TimeGrid::new(1.0, n).unwrap();
            let y = rk4_forward(&g, DVector::from_element(1, 1.0), |_, y| -y * 2.0, |y| y);
            (y[n][0] - (-2.0f64).exp()).abs()
        };
        let ratio = err(20) / err(40);
        assert!(ratio > 14.0 && ratio < 18.0, "ratio {ratio}");
    }

    #[test]
    fn backward_inverts_forward() {
        let g = TimeGrid::new(1.0, 40).unwrap();
        let f = |_: usize, y: &DVector<f64>| DVector::from_vec(vec![y[1], -y[0]]);
        let fwd = rk4_forward(&g, DVector::from_vec(vec![1.0, 0.0]), f, |y| y);
        let back = rk4_backward(&g, fwd[40].clone(), f, |y| y);
        assert!((&back[0] - &fwd[0]).norm() < 1e-9);
    }

    #[test]
    fn hermite_midpoints_are_accurate() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let knots: Vec<DVector<f64>> = g
            .knots()
            .iter()
            .map(|t| DVector::from_element(1, t.sin()))
            .collect();
        // derivative of sin is cos; feed it via the knot index
        let s = hermite_samples(&g, &knots, |j, _| {
            DVector::from_element(1, g.sample_time(j).cos())
        });
        for (j, v) in s.iter().enumerate() {
            assert!((v[0] - g.sample_time(j).sin()).abs() < 1e-6);
        }
        let mid = interpolate_samples(&g, &s, 0.333);
        assert!((mid[0] - 0.333f64.sin()).abs() < 1e-5);
    }
}
