//! Control-affine robot models `dX = f(t, X) dt + B(t)(u dt + √ε dW)` with a
//! measurement channel `z = h(X) + v`, `v ~ N(0, R)`.
//!
//! States are laid out as `(position, velocity)` with `d` spatial dimensions,
//! so `n = 2d` and the input acts on the velocity block (`p = d`).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::check_dim;
use crate::grid::TimeGrid;
use crate::linalg;
use crate::{Error, Result};

/// Drift families provided by the crate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dynamics {
    /// `ẋ₁ = x₂`, `ẋ₂ = u`.
    DoubleIntegrator { dimension: usize },
    /// `ẋ₁ = x₂`, `ẋ₂ = u − c_d‖x₂‖x₂`.
    DragDoubleIntegrator { dimension: usize, drag: f64 },
}

impl Dynamics {
    pub fn spatial_dim(&self) -> usize {
        match *self {
            Dynamics::DoubleIntegrator { dimension } => dimension,
            Dynamics::DragDoubleIntegrator { dimension, .. } => dimension,
        }
    }

    fn drag(&self) -> f64 {
        match *self {
            Dynamics::DoubleIntegrator { .. } => 0.0,
            Dynamics::DragDoubleIntegrator { drag, .. } => drag,
        }
    }

    pub fn is_linear(&self) -> bool {
        self.drag() == 0.0
    }
}

/// Measurement map `h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observation {
    /// `h(x) = x`
    FullState,
    /// `h(x) = position(x)`
    Position,
    /// `h(x) = ‖position(x)‖`
    Range,
    /// No sensor; the filter runs open loop.
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlAffineModel {
    dynamics: Dynamics,
    observation: Observation,
    noise: f64,
    measurement_noise: DMatrix<f64>,
    measurement_precision: DMatrix<f64>,
}

impl ControlAffineModel {
    /// Build a model; `measurement_noise` is the `m×m` covariance `R` (pass a
    /// `0×0` matrix for [`Observation::None`]).
    pub fn new(
        dynamics: Dynamics,
        observation: Observation,
        noise: f64,
        measurement_noise: DMatrix<f64>,
    ) -> Result<Self> {
        let d = dynamics.spatial_dim();
        if d == 0 {
            return Err(Error::InvalidParameter(
                "spatial dimension must be >= 1".into(),
            ));
        }
        if !(noise >= 0.0) || !noise.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "noise intensity must be finite and >= 0, got {noise}"
            )));
        }
        if !(dynamics.drag() >= 0.0) || !dynamics.drag().is_finite() {
            return Err(Error::InvalidParameter(
                "drag coefficient must be >= 0".into(),
            ));
        }
        let m = measurement_dim(observation, d);
        check_dim("measurement noise rows", m, measurement_noise.nrows())?;
        check_dim("measurement noise cols", m, measurement_noise.ncols())?;
        let measurement_precision = if m == 0 {
            DMatrix::zeros(0, 0)
        } else {
            if !linalg::is_spd(&measurement_noise, 0.0) {
                return Err(Error::InvalidParameter(
                    "measurement noise covariance must be SPD".into(),
                ));
            }
            linalg::spd_inverse(&measurement_noise, "measurement noise")?
        };
        Ok(Self {
            dynamics,
            observation,
            noise,
            measurement_noise,
            measurement_precision,
        })
    }

    /// Convenience constructor with `R = r·I`.
    pub fn with_scalar_noise(
        dynamics: Dynamics,
        observation: Observation,
        noise: f64,
        measurement_variance: f64,
    ) -> Result<Self> {
        let m = measurement_dim(observation, dynamics.spatial_dim());
        Self::new(
            dynamics,
            observation,
            noise,
            DMatrix::identity(m, m) * measurement_variance,
        )
    }

    pub fn dynamics(&self) -> Dynamics {
        self.dynamics
    }

    pub fn observation(&self) -> Observation {
        self.observation
    }

    /// Noise intensity `ε`.
    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn spatial_dim(&self) -> usize {
        self.dynamics.spatial_dim()
    }

    pub fn state_dim(&self) -> usize {
        2 * self.spatial_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.spatial_dim()
    }

    pub fn measurement_dim(&self) -> usize {
        measurement_dim(self.observation, self.spatial_dim())
    }

    /// `R(t)`; constant for the provided sensors.
    pub fn measurement_noise(&self, _t: f64) -> &DMatrix<f64> {
        &self.measurement_noise
    }

    pub fn measurement_precision(&self, _t: f64) -> &DMatrix<f64> {
        &self.measurement_precision
    }

    /// Input matrix `B(t) = [0; I]`.
    pub fn input_matrix(&self, _t: f64) -> DMatrix<f64> {
        let d = self.spatial_dim();
        let mut b = DMatrix::zeros(2 * d, d);
        b.view_mut((d, 0), (d, d)).fill_with_identity();
        b
    }

    pub fn position<'a>(&self, x: &'a DVector<f64>) -> nalgebra::DVectorView<'a, f64> {
        x.rows(0, self.spatial_dim())
    }

    /// Drift `f(t, x)`.
    pub fn drift(&self, _t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("state", self.state_dim(), x.len())?;
        let d = self.spatial_dim();
        let vel = x.rows(d, d);
        let mut out = DVector::zeros(2 * d);
        out.rows_mut(0, d).copy_from(&vel);
        let c = self.dynamics.drag();
        if c != 0.0 {
            let speed = vel.norm();
            out.rows_mut(d, d).copy_from(&(vel * (-c * speed)));
        }
        Ok(out)
    }

    /// Drift Jacobian `F = ∂f/∂x`.
    ///
    /// The drag block is `−c_d(‖v‖I + vvᵀ/‖v‖)`, defined as zero at `v = 0`.
    pub fn drift_jacobian(&self, _t: f64, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim("state", self.state_dim(), x.len())?;
        let d = self.spatial_dim();
        let mut jac = DMatrix::zeros(2 * d, 2 * d);
        jac.view_mut((0, d), (d, d)).fill_with_identity();
        let c = self.dynamics.drag();
        if c != 0.0 {
            let vel = x.rows(d, d).into_owned();
            let speed = vel.norm();
            if speed > 0.0 {
                let block = (DMatrix::identity(d, d) * speed + &vel * vel.transpose() / speed) * -c;
                jac.view_mut((d, d), (d, d)).copy_from(&block);
            }
        }
        if !linalg::is_finite(&jac) {
            return Err(Error::NonFinite("drift Jacobian".into()));
        }
        Ok(jac)
    }

    /// Local affine model `f(x) ≈ Âx + â` about `nominal`.
    pub fn linearize(
        &self,
        nominal: &DVector<f64>,
        t: f64,
    ) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let a_hat = self.drift_jacobian(t, nominal)?;
        let f = self.drift(t, nominal)?;
        let offset = f - &a_hat * nominal;
        if offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("linearisation offset".into()));
        }
        Ok((a_hat, offset))
    }

    /// Measurement map `h(x)`.
    pub fn measure(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("state", self.state_dim(), x.len())?;
        let d = self.spatial_dim();
        Ok(match self.observation {
            Observation::FullState => x.clone(),
            Observation::Position => x.rows(0, d).into_owned(),
            Observation::Range => DVector::from_element(1, x.rows(0, d).norm()),
            Observation::None => DVector::zeros(0),
        })
    }

    /// Measurement Jacobian `H = ∂h/∂x`.
    pub fn measurement_jacobian(&self, nominal: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim("state", self.state_dim(), nominal.len())?;
        let d = self.spatial_dim();
        let n = 2 * d;
        let h = match self.observation {
            Observation::FullState => DMatrix::identity(n, n),
            Observation::Position => {
                let mut h = DMatrix::zeros(d, n);
                h.view_mut((0, 0), (d, d)).fill_with_identity();
                h
            }
            Observation::Range => {
                let pos = nominal.rows(0, d);
                let r = pos.norm();
                let mut h = DMatrix::zeros(1, n);
                if r > 0.0 {
                    for k in 0..d {
                        h[(0, k)] = pos[k] / r;
                    }
                }
                h
            }
            Observation::None => DMatrix::zeros(0, n),
        };
        if !linalg::is_finite(&h) {
            return Err(Error::NonFinite("measurement Jacobian".into()));
        }
        Ok(h)
    }

    /// Linearise the drift and the sensor along a nominal trajectory given at
    /// every half-knot of `grid`.
    pub fn linearize_along(
        &self,
        grid: &TimeGrid,
        nominal: &[DVector<f64>],
    ) -> Result<LinearizedSystem> {
        check_dim("nominal samples", grid.n_samples(), nominal.len())?;
        let mut drift_matrix = Vec::with_capacity(nominal.len());
        let mut drift_offset = Vec::with_capacity(nominal.len());
        let mut sensor = Vec::with_capacity(nominal.len());
        for (j, x) in nominal.iter().enumerate() {
            let t = grid.sample_time(j);
            let (a, c) = self.linearize(x, t)?;
            drift_matrix.push(a);
            drift_offset.push(c);
            sensor.push(self.measurement_jacobian(x)?);
        }
        Ok(LinearizedSystem {
            drift_matrix,
            drift_offset,
            sensor,
        })
    }
}

fn measurement_dim(observation: Observation, d: usize) -> usize {
    match observation {
        Observation::FullState => 2 * d,
        Observation::Position => d,
        Observation::Range => 1,
        Observation::None => 0,
    }
}

/// Per-half-knot linearisation along a nominal trajectory. The drift Jacobian
/// `F` coincides with `Â`.
#[derive(Debug, Clone)]
pub struct LinearizedSystem {
    pub drift_matrix: Vec<DMatrix<f64>>,
    pub drift_offset: Vec<DVector<f64>>,
    pub sensor: Vec<DMatrix<f64>>,
}
