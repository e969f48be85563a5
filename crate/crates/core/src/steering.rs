//! Linear covariance steering.
//!
//! Solves
//!
//! ```text
//! min E ∫ ½‖u‖² + ½XᵀQX + Xᵀr dt
//! dX = (AX + a) dt + B(u dt + √ε dW),   X₀ ~ (m₀, Σ₀),  X_T ~ (m_T, Σ_T)
//! ```
//!
//! The mean and the covariance decouple. The mean is a deterministic
//! linear-quadratic two-point boundary problem solved through the Pontryagin
//! system. The covariance is steered by the feedback `K = −BᵀΠ` where `Π`
//! solves `−Π̇ = AᵀΠ + ΠA − ΠBBᵀΠ + Q`; the unknown initial value `Π(0)` is
//! found by damped Newton shooting on the terminal covariance mismatch,
//! started from the Hamiltonian closed form evaluated with the discrete
//! transition matrix.

use nalgebra::{DMatrix, DVector};

use crate::error::check_dim;
use crate::grid::{hermite_samples, rk4_backward, rk4_forward, TimeGrid};
use crate::linalg::{self, symmetrize};
use crate::{Error, Result};

/// Time-varying data of one linear steering problem, sampled at every
/// half-knot of the grid (`2N + 1` samples).
#[derive(Debug, Clone)]
pub struct LqDrivingTerms {
    pub drift_matrix: Vec<DMatrix<f64>>,
    pub drift_offset: Vec<DVector<f64>>,
    pub input_matrix: Vec<DMatrix<f64>>,
    pub state_weight: Vec<DMatrix<f64>>,
    pub state_linear: Vec<DVector<f64>>,
    pub noise: f64,
    input_gram: Vec<DMatrix<f64>>,
    diffusion: Vec<DMatrix<f64>>,
}

impl LqDrivingTerms {
    pub fn new(
        grid: &TimeGrid,
        drift_matrix: Vec<DMatrix<f64>>,
        drift_offset: Vec<DVector<f64>>,
        input_matrix: Vec<DMatrix<f64>>,
        state_weight: Vec<DMatrix<f64>>,
        state_linear: Vec<DVector<f64>>,
        noise: f64,
    ) -> Result<Self> {
        let ns = grid.n_samples();
        check_dim("drift matrix samples", ns, drift_matrix.len())?;
        check_dim("drift offset samples", ns, drift_offset.len())?;
        check_dim("input matrix samples", ns, input_matrix.len())?;
        check_dim("state weight samples", ns, state_weight.len())?;
        check_dim("state linear samples", ns, state_linear.len())?;
        if !(noise >= 0.0) || !noise.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "noise intensity must be >= 0, got {noise}"
            )));
        }
        let n = drift_matrix[0].nrows();
        for j in 0..ns {
            check_dim("drift matrix rows", n, drift_matrix[j].nrows())?;
            check_dim("drift matrix cols", n, drift_matrix[j].ncols())?;
            check_dim("drift offset", n, drift_offset[j].len())?;
            check_dim("input matrix rows", n, input_matrix[j].nrows())?;
            check_dim("state weight rows", n, state_weight[j].nrows())?;
            check_dim("state weight cols", n, state_weight[j].ncols())?;
            check_dim("state linear", n, state_linear[j].len())?;
        }
        let state_weight = state_weight
            .into_iter()
            .map(|q| {
                if q.iter().all(|&v| v == 0.0) {
                    q
                } else {
                    let q = symmetrize(&q);
                    if linalg::min_eigenvalue(&q) < 0.0 {
                        linalg::clamp_psd(&q)
                    } else {
                        q
                    }
                }
            })
            .collect();
        let input_gram: Vec<DMatrix<f64>> =
            input_matrix.iter().map(|b| b * b.transpose()).collect();
        let diffusion = input_gram.iter().map(|g| g * noise).collect();
        Ok(Self {
            drift_matrix,
            drift_offset,
            input_matrix,
            state_weight,
            state_linear,
            noise,
            input_gram,
            diffusion,
        })
    }

    /// Time-invariant problem data.
    pub fn constant(
        grid: &TimeGrid,
        a: &DMatrix<f64>,
        offset: &DVector<f64>,
        b: &DMatrix<f64>,
        q: &DMatrix<f64>,
        r: &DVector<f64>,
        noise: f64,
    ) -> Result<Self> {
        let ns = grid.n_samples();
        Self::new(
            grid,
            vec![a.clone(); ns],
            vec![offset.clone(); ns],
            vec![b.clone(); ns],
            vec![q.clone(); ns],
            vec![r.clone(); ns],
            noise,
        )
    }

    /// Replace the default diffusion `εBBᵀ` by explicit PSD samples.
    pub fn with_diffusion(mut self, diffusion: Vec<DMatrix<f64>>) -> Result<Self> {
        check_dim(
            "diffusion samples",
            self.drift_matrix.len(),
            diffusion.len(),
        )?;
        self.diffusion = diffusion.iter().map(symmetrize).collect();
        Ok(self)
    }

    pub fn state_dim(&self) -> usize {
        self.drift_matrix[0].nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.input_matrix[0].ncols()
    }

    pub fn diffusion(&self, j: usize) -> &DMatrix<f64> {
        &self.diffusion[j]
    }

    fn n_samples(&self) -> usize {
        self.drift_matrix.len()
    }
}

/// Boundary beliefs of a steering problem.
#[derive(Debug, Clone)]
pub struct BoundaryMoments {
    pub m0: DVector<f64>,
    pub mt: DVector<f64>,
    pub sigma0: DMatrix<f64>,
    pub sigmat: DMatrix<f64>,
}

impl BoundaryMoments {
    pub fn new(
        m0: DVector<f64>,
        sigma0: DMatrix<f64>,
        mt: DVector<f64>,
        sigmat: DMatrix<f64>,
    ) -> Result<Self> {
        let n = m0.len();
        check_dim("terminal mean", n, mt.len())?;
        check_dim("initial covariance", n, sigma0.nrows())?;
        check_dim("terminal covariance", n, sigmat.nrows())?;
        if !linalg::is_spd(&sigma0, 1e-12) {
            return Err(Error::Infeasible("initial covariance is not SPD".into()));
        }
        if !linalg::is_spd(&sigmat, 1e-12) {
            return Err(Error::Infeasible("terminal covariance is not SPD".into()));
        }
        Ok(Self {
            m0,
            mt,
            sigma0: symmetrize(&sigma0),
            sigmat: symmetrize(&sigmat),
        })
    }
}

/// Affine policy `u = K(t)X + d(t)` sampled at every half-knot, together
/// with the Riccati solution and the optimal mean it was built from.
///
/// `K = −BᵀΠ` and `d = v* + BᵀΠx̄*` hold sample by sample.
#[derive(Debug, Clone)]
pub struct FeedbackPolicy {
    pub gain: Vec<DMatrix<f64>>,
    pub feedforward: Vec<DVector<f64>>,
    pub riccati: Vec<DMatrix<f64>>,
    pub mean: Vec<DVector<f64>>,
    pub control: Vec<DVector<f64>>,
}

impl FeedbackPolicy {
    /// Zero-order-hold export: the knot values only.
    pub fn knot_gains(&self) -> Vec<DMatrix<f64>> {
        crate::grid::knot_values(&self.gain)
    }

    pub fn knot_feedforward(&self) -> Vec<DVector<f64>> {
        crate::grid::knot_values(&self.feedforward)
    }
}

/// Homogeneous transition and particular solution of the Pontryagin system
/// `ż = [A −BBᵀ; −Q −Aᵀ] z + [a; −r]`.
#[derive(Debug, Clone)]
pub struct HamiltonianFlow {
    /// Per-step transitions `Φ(t_{i+1}, t_i)`.
    pub steps: Vec<DMatrix<f64>>,
    /// Hermite midpoint transitions `Φ(t_i + h/2, t_i)`.
    pub midpoints: Vec<DMatrix<f64>>,
    /// `Φ(T, 0)`.
    pub transition: DMatrix<f64>,
    pub particular: DVector<f64>,
}

fn hamiltonian(terms: &LqDrivingTerms, j: usize) -> DMatrix<f64> {
    let n = terms.state_dim();
    let a = &terms.drift_matrix[j];
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(a);
    m.view_mut((0, n), (n, n))
        .copy_from(&(-&terms.input_gram[j]));
    m.view_mut((n, 0), (n, n))
        .copy_from(&(-&terms.state_weight[j]));
    m.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    m
}

fn hamiltonian_forcing(terms: &LqDrivingTerms, j: usize) -> DVector<f64> {
    let n = terms.state_dim();
    let mut c = DVector::zeros(2 * n);
    c.rows_mut(0, n).copy_from(&terms.drift_offset[j]);
    c.rows_mut(n, n).copy_from(&(-&terms.state_linear[j]));
    c
}

pub fn hamiltonian_flow(terms: &LqDrivingTerms, grid: &TimeGrid) -> Result<HamiltonianFlow> {
    check_dim("driving term samples", grid.n_samples(), terms.n_samples())?;
    let n = terms.state_dim();
    let ham: Vec<DMatrix<f64>> = (0..grid.n_samples())
        .map(|j| hamiltonian(terms, j))
        .collect();
    let forcing: Vec<DVector<f64>> = (0..grid.n_samples())
        .map(|j| hamiltonian_forcing(terms, j))
        .collect();
    let h = grid.dt();
    let eye = DMatrix::<f64>::identity(2 * n, 2 * n);
    // one RK4 step applied to the identity; the product over all steps equals
    // the RK4 transition over the horizon
    let steps: Vec<DMatrix<f64>> = (0..grid.steps())
        .map(|i| {
            let (h0, hm, h1) = (&ham[2 * i], &ham[2 * i + 1], &ham[2 * i + 2]);
            let k1 = h0.clone();
            let k2 = hm * (&eye + &k1 * (0.5 * h));
            let k3 = hm * (&eye + &k2 * (0.5 * h));
            let k4 = h1 * (&eye + &k3 * h);
            &eye + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
        })
        .collect();
    let midpoints: Vec<DMatrix<f64>> = steps
        .iter()
        .enumerate()
        .map(|(i, m)| (&eye + m) * 0.5 + (&ham[2 * i] - &ham[2 * i + 2] * m) * (h / 8.0))
        .collect();
    let transition = steps.iter().fold(eye.clone(), |acc, m| m * acc);
    let part = rk4_forward(
        grid,
        DVector::zeros(2 * n),
        |j, y| &ham[j] * y + &forcing[j],
        |y| y,
    );
    let particular = part.into_iter().last().unwrap();
    if !linalg::is_finite(&transition) || particular.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalInstability(
            "Hamiltonian transition overflowed".into(),
        ));
    }
    Ok(HamiltonianFlow {
        steps,
        midpoints,
        transition,
        particular,
    })
}

/// Optimal mean path and open-loop feed-forward at every half-knot.
#[derive(Debug, Clone)]
pub struct MeanSolution {
    pub mean: Vec<DVector<f64>>,
    pub control: Vec<DVector<f64>>,
    pub costate0: DVector<f64>,
}

/// Deterministic LQ two-point boundary problem for the mean.
pub fn solve_mean_bvp(
    terms: &LqDrivingTerms,
    m0: &DVector<f64>,
    mt: &DVector<f64>,
    grid: &TimeGrid,
) -> Result<MeanSolution> {
    let flow = hamiltonian_flow(terms, grid)?;
    solve_mean_bvp_with(terms, m0, mt, grid, &flow)
}

pub fn solve_mean_bvp_with(
    terms: &LqDrivingTerms,
    m0: &DVector<f64>,
    mt: &DVector<f64>,
    grid: &TimeGrid,
    flow: &HamiltonianFlow,
) -> Result<MeanSolution> {
    let n = terms.state_dim();
    check_dim("initial mean", n, m0.len())?;
    check_dim("terminal mean", n, mt.len())?;
    let phi = &flow.transition;
    let phi11 = phi.view((0, 0), (n, n));
    let phi12 = phi.view((0, n), (n, n)).into_owned();
    let rhs = mt - phi11 * m0 - flow.particular.rows(0, n);
    let rhs = DMatrix::from_column_slice(n, 1, rhs.as_slice());
    let lambda0 = linalg::solve_checked(&phi12, &rhs, 1e-13).ok_or_else(|| {
        Error::Infeasible(
            "reachability block of the transition matrix is singular (uncontrollable pair)".into(),
        )
    })?;
    let lambda0 = DVector::from_column_slice(lambda0.as_slice());

    let mut z0 = DVector::zeros(2 * n);
    z0.rows_mut(0, n).copy_from(m0);
    z0.rows_mut(n, n).copy_from(&lambda0);
    let ham: Vec<DMatrix<f64>> = (0..grid.n_samples())
        .map(|j| hamiltonian(terms, j))
        .collect();
    let forcing: Vec<DVector<f64>> = (0..grid.n_samples())
        .map(|j| hamiltonian_forcing(terms, j))
        .collect();
    let field = |j: usize, z: &DVector<f64>| &ham[j] * z + &forcing[j];
    let knots = rk4_forward(grid, z0, field, |y| y);
    let samples = hermite_samples(grid, &knots, field);
    let mut mean = Vec::with_capacity(samples.len());
    let mut control = Vec::with_capacity(samples.len());
    for (j, z) in samples.iter().enumerate() {
        mean.push(z.rows(0, n).into_owned());
        control.push(-terms.input_matrix[j].transpose() * z.rows(n, n));
    }
    if mean.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
        return Err(Error::NumericalInstability(
            "mean boundary solution overflowed".into(),
        ));
    }
    Ok(MeanSolution {
        mean,
        control,
        costate0: lambda0,
    })
}

/// Newton shooting settings for the coupled Riccati problem.
#[derive(Debug, Clone)]
pub struct ShootingOptions {
    pub max_iterations: usize,
    /// Terminal mismatch tolerance, Frobenius norm scaled by `max(1, ‖Σ_T‖)`.
    pub tolerance: f64,
    /// Accept a stalled iteration whose relative mismatch is below this.
    pub accept_relative: f64,
    pub initial_guess: Option<DMatrix<f64>>,
    /// Jacobian of the terminal mismatch from a previous, nearby solve.
    pub jacobian: Option<DMatrix<f64>>,
}

impl Default for ShootingOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            tolerance: 1e-9,
            accept_relative: 1e-6,
            initial_guess: None,
            jacobian: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    /// `Π` at every half-knot.
    pub riccati: Vec<DMatrix<f64>>,
    /// Closed-loop covariance at every knot.
    pub covariance: Vec<DMatrix<f64>>,
    pub iterations: usize,
    /// Relative Frobenius terminal mismatch.
    pub residual: f64,
    pub jacobian: DMatrix<f64>,
}

impl RiccatiSolution {
    pub fn initial(&self) -> &DMatrix<f64> {
        &self.riccati[0]
    }
}

/// `Π` at every half-knot from a given `Π(0)`.
///
/// Each knot step maps `[I; Π_i]` through its own short transition and
/// renormalises, `Π = Y X⁻¹` with `[X; Y] = Φ(t, t_i)[I; Π_i]`. This avoids
/// both the finite escape of a direct forward sweep and the ill-conditioning
/// of the full-horizon transition under large state weights. `None` is
/// returned at a conjugate point or on overflow.
pub fn riccati_from_flow(flow: &HamiltonianFlow, pi0: &DMatrix<f64>) -> Option<Vec<DMatrix<f64>>> {
    let n = pi0.nrows();
    let map = |phi: &DMatrix<f64>, p: &DMatrix<f64>| -> Option<DMatrix<f64>> {
        let x = phi.view((0, 0), (n, n)) + phi.view((0, n), (n, n)) * p;
        let y = phi.view((n, 0), (n, n)) + phi.view((n, n), (n, n)) * p;
        // Π = Y X⁻¹  ⇔  Xᵀ Πᵀ = Yᵀ
        let pi = symmetrize(&x.transpose().lu().solve(&y.transpose())?);
        linalg::is_finite(&pi).then_some(pi)
    };
    let mut out = Vec::with_capacity(2 * flow.steps.len() + 1);
    let mut p = symmetrize(pi0);
    for (step, mid) in flow.steps.iter().zip(&flow.midpoints) {
        let pm = map(mid, &p)?;
        let next = map(step, &p)?;
        out.push(std::mem::replace(&mut p, next));
        out.push(pm);
    }
    out.push(p);
    Some(out)
}

pub fn integrate_riccati(
    terms: &LqDrivingTerms,
    grid: &TimeGrid,
    pi0: &DMatrix<f64>,
) -> Result<Vec<DMatrix<f64>>> {
    let flow = hamiltonian_flow(terms, grid)?;
    riccati_from_flow(&flow, pi0)
        .ok_or_else(|| Error::NumericalInstability("Riccati solution escaped".into()))
}

/// Closed-loop covariance `Σ̇ = A_clΣ + ΣA_clᵀ + D` at every knot.
pub fn propagate_covariance(
    grid: &TimeGrid,
    closed_loop: &[DMatrix<f64>],
    diffusion: impl Fn(usize) -> DMatrix<f64>,
    sigma0: &DMatrix<f64>,
) -> Vec<DMatrix<f64>> {
    rk4_forward(
        grid,
        symmetrize(sigma0),
        |j, s| {
            let a = &closed_loop[j] * s;
            &a + a.transpose() + diffusion(j)
        },
        |s| symmetrize(&s),
    )
}

fn gains_from_riccati(
    terms: &LqDrivingTerms,
    riccati: &[DMatrix<f64>],
) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let gain: Vec<DMatrix<f64>> = riccati
        .iter()
        .zip(&terms.input_matrix)
        .map(|(p, b)| -(b.transpose() * p))
        .collect();
    let closed = terms
        .drift_matrix
        .iter()
        .zip(&terms.input_matrix)
        .zip(&gain)
        .map(|((a, b), k)| a + b * k)
        .collect();
    (gain, closed)
}

struct ShootingEval {
    riccati: Vec<DMatrix<f64>>,
    covariance: Vec<DMatrix<f64>>,
    residual: DVector<f64>,
}

struct Shooter<'a> {
    terms: &'a LqDrivingTerms,
    grid: &'a TimeGrid,
    flow: &'a HamiltonianFlow,
    sigma0: &'a DMatrix<f64>,
    sigmat: &'a DMatrix<f64>,
}

fn shoot(sh: &Shooter, theta: &DVector<f64>) -> Option<ShootingEval> {
    let (terms, grid, sigma0, sigmat) = (sh.terms, sh.grid, sh.sigma0, sh.sigmat);
    let n = terms.state_dim();
    let pi0 = linalg::unvech(theta, n);
    let riccati = riccati_from_flow(sh.flow, &pi0)?;
    let (_, closed) = gains_from_riccati(terms, &riccati);
    let covariance = propagate_covariance(grid, &closed, |j| terms.diffusion[j].clone(), sigma0);
    let last = covariance.last().unwrap();
    if !linalg::is_finite(last) {
        return None;
    }
    let residual = linalg::vech(&(last - sigmat));
    Some(ShootingEval {
        riccati,
        covariance,
        residual,
    })
}

/// Closed-form `Π(0)` of the continuous problem written with a (discrete)
/// Hamiltonian transition matrix `Φ(T, 0)`:
///
/// `Π₀ = (ε/2)Σ₀⁻¹ − Φ₁₂⁻¹Φ₁₁ − Σ₀^{-1/2}(ε²/4·I + Σ₀^{1/2}Φ₁₂⁻¹Σ_TΦ₁₂⁻ᵀΣ₀^{1/2})^{1/2}Σ₀^{-1/2}`
pub fn closed_form_initial_riccati(
    transition: &DMatrix<f64>,
    noise: f64,
    sigma0: &DMatrix<f64>,
    sigmat: &DMatrix<f64>,
) -> Option<DMatrix<f64>> {
    let n = sigma0.nrows();
    let phi11 = transition.view((0, 0), (n, n)).into_owned();
    let phi12 = transition.view((0, n), (n, n)).into_owned();
    let phi12_inv = linalg::solve_checked(&phi12, &DMatrix::identity(n, n), 1e-13)?;
    let s = symmetrize(&(&phi12_inv * phi11));
    let m = symmetrize(&(&phi12_inv * sigmat * phi12_inv.transpose()));
    let s0_half = linalg::sqrt_psd(sigma0);
    let s0_inv_half = linalg::map_eigenvalues(sigma0, |l| 1.0 / l.max(f64::MIN_POSITIVE).sqrt());
    let s0_inv = linalg::spd_inverse(sigma0, "initial covariance").ok()?;
    let inner = DMatrix::identity(n, n) * (0.25 * noise * noise) + &s0_half * m * &s0_half;
    let root = linalg::sqrt_psd(&inner);
    let pi0 = s0_inv * (0.5 * noise) - s - &s0_inv_half * root * &s0_inv_half;
    let pi0 = symmetrize(&pi0);
    linalg::is_finite(&pi0).then_some(pi0)
}

fn fd_jacobian(sh: &Shooter, theta: &DVector<f64>, base: &DVector<f64>) -> Option<DMatrix<f64>> {
    let k = theta.len();
    let mut jac = DMatrix::zeros(base.len(), k);
    for c in 0..k {
        let h = 1e-7 * theta[c].abs().max(1.0);
        let mut tp = theta.clone();
        tp[c] += h;
        let e = shoot(sh, &tp)?;
        jac.set_column(c, &((e.residual - base) / h));
    }
    Some(jac)
}

fn newton_step(jac: &DMatrix<f64>, residual: &DVector<f64>) -> Option<DVector<f64>> {
    let rhs = -residual;
    if let Some(step) = jac.clone().lu().solve(&rhs) {
        if step.iter().all(|v| v.is_finite()) {
            return Some(step);
        }
    }
    let step = jac.clone().svd(true, true).solve(&rhs, 1e-14).ok()?;
    step.iter().all(|v| v.is_finite()).then_some(step)
}

/// Boundary-coupled Riccati problem with default shooting settings.
pub fn solve_coupled_riccati(
    terms: &LqDrivingTerms,
    sigma0: &DMatrix<f64>,
    sigmat: &DMatrix<f64>,
    grid: &TimeGrid,
) -> Result<RiccatiSolution> {
    solve_coupled_riccati_with(
        terms,
        sigma0,
        sigmat,
        grid,
        &ShootingOptions::default(),
        None,
    )
}

/// Find `Π(0)` such that the closed-loop covariance started at `Σ₀` reaches
/// `Σ_T` on the discrete grid.
pub fn solve_coupled_riccati_with(
    terms: &LqDrivingTerms,
    sigma0: &DMatrix<f64>,
    sigmat: &DMatrix<f64>,
    grid: &TimeGrid,
    opts: &ShootingOptions,
    flow: Option<&HamiltonianFlow>,
) -> Result<RiccatiSolution> {
    let n = terms.state_dim();
    check_dim("driving term samples", grid.n_samples(), terms.n_samples())?;
    check_dim("initial covariance", n, sigma0.nrows())?;
    check_dim("terminal covariance", n, sigmat.nrows())?;
    if !linalg::is_spd(sigma0, 1e-12) || !linalg::is_spd(sigmat, 1e-12) {
        return Err(Error::Infeasible("boundary covariances must be SPD".into()));
    }
    let tol_abs = opts.tolerance * sigmat.norm().max(1.0);
    let sigmat_norm = sigmat.norm();

    let owned;
    let flow = match flow {
        Some(f) => f,
        None => {
            owned = hamiltonian_flow(terms, grid)?;
            &owned
        }
    };
    let sh = Shooter {
        terms,
        grid,
        flow,
        sigma0,
        sigmat,
    };
    let fallback =
        || linalg::spd_inverse(sigma0, "initial covariance").map(|s| s * (0.5 * terms.noise));
    // a warm start is used only if it beats the closed-form guess
    let mut best: Option<(DVector<f64>, ShootingEval)> = None;
    let candidates = [
        closed_form_initial_riccati(&flow.transition, terms.noise, sigma0, sigmat),
        opts.initial_guess.clone(),
    ];
    for g in candidates.into_iter().flatten() {
        let t = linalg::vech(&g);
        if let Some(e) = shoot(&sh, &t) {
            if best
                .as_ref()
                .is_none_or(|(_, b)| e.residual.norm() < b.residual.norm())
            {
                best = Some((t, e));
            }
        }
    }
    let (mut theta, mut current) = match best {
        Some((t, e)) => (t, Some(e)),
        None => (linalg::vech(&fallback()?), None),
    };
    if current.is_none() {
        // scale toward zero until X stays invertible
        let mut t = theta.clone();
        for _ in 0..60 {
            current = shoot(&sh, &t);
            if current.is_some() {
                break;
            }
            t *= 0.5;
        }
        theta = t;
    }
    let mut current = current.ok_or(Error::ShootingFailed {
        iterations: 0,
        residual: f64::INFINITY,
    })?;

    let mut jac = opts.jacobian.clone();
    let mut jac_fresh = false;
    let mut iterations = 0;
    let mut norm = current.residual.norm();
    while norm > tol_abs && iterations < opts.max_iterations {
        iterations += 1;
        if jac.is_none() {
            jac = fd_jacobian(&sh, &theta, &current.residual);
            jac_fresh = true;
            if jac.is_none() {
                break;
            }
        }
        let step = match newton_step(jac.as_ref().unwrap(), &current.residual) {
            Some(s) => s,
            None if !jac_fresh => {
                jac = None;
                continue;
            }
            None => break,
        };
        let mut accepted = None;
        let mut lambda = 1.0;
        for _ in 0..30 {
            let trial = &theta + &step * lambda;
            if let Some(e) = shoot(&sh, &trial) {
                let tn = e.residual.norm();
                if tn < norm * (1.0 - 1e-4 * lambda) || tn <= tol_abs {
                    accepted = Some((trial, e, tn));
                    break;
                }
            }
            lambda *= 0.5;
        }
        match accepted {
            Some((t, e, tn)) => {
                // a reused Jacobian that only yields slow progress is refreshed
                if !jac_fresh && tn > 0.5 * norm {
                    jac = None;
                }
                jac_fresh = false;
                theta = t;
                current = e;
                norm = tn;
            }
            None if !jac_fresh => {
                jac = None;
            }
            None => break,
        }
    }
    let rel = norm / sigmat_norm.max(f64::MIN_POSITIVE);
    if norm > tol_abs && rel > opts.accept_relative {
        return Err(Error::ShootingFailed {
            iterations,
            residual: rel,
        });
    }
    let jacobian = match jac {
        Some(j) => j,
        None => DMatrix::zeros(theta.len(), theta.len()),
    };
    Ok(RiccatiSolution {
        riccati: current.riccati,
        covariance: current.covariance,
        iterations,
        residual: rel,
        jacobian,
    })
}

/// Mean and covariance at every knot.
pub type Moments = (Vec<DVector<f64>>, Vec<DMatrix<f64>>);

/// Closed-loop moments under `u = KX + d` at every knot.
pub fn propagate_closed_loop(
    terms: &LqDrivingTerms,
    policy: &FeedbackPolicy,
    m0: &DVector<f64>,
    sigma0: &DMatrix<f64>,
    grid: &TimeGrid,
) -> Result<Moments> {
    check_dim("policy samples", grid.n_samples(), policy.gain.len())?;
    check_dim("policy samples", grid.n_samples(), policy.feedforward.len())?;
    let closed: Vec<DMatrix<f64>> = (0..grid.n_samples())
        .map(|j| &terms.drift_matrix[j] + &terms.input_matrix[j] * &policy.gain[j])
        .collect();
    let forcing: Vec<DVector<f64>> = (0..grid.n_samples())
        .map(|j| &terms.drift_offset[j] + &terms.input_matrix[j] * &policy.feedforward[j])
        .collect();
    let mean = propagate_mean(grid, &closed, &forcing, m0);
    let cov = propagate_covariance(grid, &closed, |j| terms.diffusion[j].clone(), sigma0);
    check_moments(&mean, &cov)?;
    Ok((mean, cov))
}

/// `ẋ = A x + a` at every knot.
pub fn propagate_mean(
    grid: &TimeGrid,
    drift: &[DMatrix<f64>],
    offset: &[DVector<f64>],
    m0: &DVector<f64>,
) -> Vec<DVector<f64>> {
    rk4_forward(grid, m0.clone(), |j, x| &drift[j] * x + &offset[j], |x| x)
}

pub(crate) fn check_moments(mean: &[DVector<f64>], cov: &[DMatrix<f64>]) -> Result<()> {
    if mean.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
        return Err(Error::NumericalInstability(
            "mean propagation overflowed".into(),
        ));
    }
    for (i, s) in cov.iter().enumerate() {
        if !linalg::is_psd(s, 1e-10) {
            return Err(Error::NumericalInstability(format!(
                "covariance lost positive definiteness at knot {i}; try a finer grid"
            )));
        }
    }
    Ok(())
}

/// Complete solution of one steering problem.
#[derive(Debug, Clone)]
pub struct SteeringSolution {
    pub policy: FeedbackPolicy,
    /// Closed-loop mean at every knot.
    pub mean: Vec<DVector<f64>>,
    /// Closed-loop covariance at every knot.
    pub covariance: Vec<DMatrix<f64>>,
    /// Closed-loop drift `A + BK` at every half-knot.
    pub closed_loop_matrix: Vec<DMatrix<f64>>,
    pub shooting_iterations: usize,
    pub shooting_jacobian: DMatrix<f64>,
    pub covariance_residual: f64,
}

/// Solve the mean and covariance parts and assemble the feedback policy.
///
/// The feed-forward is finally corrected by a minimum-energy term
/// `δd = Bᵀμ`, `μ̇ = −A_clᵀμ`, so that the discrete closed loop lands on
/// `m_T` to round-off; the correction is of the integrator's truncation
/// order.
pub fn steer(
    terms: &LqDrivingTerms,
    boundary: &BoundaryMoments,
    grid: &TimeGrid,
    opts: &ShootingOptions,
) -> Result<SteeringSolution> {
    let n = terms.state_dim();
    check_dim("initial mean", n, boundary.m0.len())?;
    let flow = hamiltonian_flow(terms, grid)?;
    let mean_sol = solve_mean_bvp_with(terms, &boundary.m0, &boundary.mt, grid, &flow)?;
    let ric = solve_coupled_riccati_with(
        terms,
        &boundary.sigma0,
        &boundary.sigmat,
        grid,
        opts,
        Some(&flow),
    )?;
    let (gain, closed) = gains_from_riccati(terms, &ric.riccati);
    let mut feedforward: Vec<DVector<f64>> = (0..grid.n_samples())
        .map(|j| &mean_sol.control[j] - &gain[j] * &mean_sol.mean[j])
        .collect();
    let forcing = |ff: &[DVector<f64>]| -> Vec<DVector<f64>> {
        (0..grid.n_samples())
            .map(|j| &terms.drift_offset[j] + &terms.input_matrix[j] * &ff[j])
            .collect()
    };
    let mut mean = propagate_mean(grid, &closed, &forcing(&feedforward), &boundary.m0);
    let miss = &boundary.mt - mean.last().unwrap();
    if miss.norm() > 1e-14 * (1.0 + boundary.mt.norm()) {
        let adj_field = |j: usize, mu: &DMatrix<f64>| -(closed[j].transpose() * mu);
        let adj_knots = rk4_backward(grid, DMatrix::identity(n, n), adj_field, |y| y);
        let adjoint = hermite_samples(grid, &adj_knots, adj_field);
        let gram = rk4_forward(
            grid,
            DMatrix::zeros(n, n),
            |j, y| &closed[j] * y + &terms.input_gram[j] * &adjoint[j],
            |y| y,
        );
        let miss_m = DMatrix::from_column_slice(n, 1, miss.as_slice());
        if let Some(c) = linalg::solve_checked(gram.last().unwrap(), &miss_m, 1e-15) {
            let c = DVector::from_column_slice(c.as_slice());
            for (j, ff) in feedforward.iter_mut().enumerate() {
                *ff += terms.input_matrix[j].transpose() * (&adjoint[j] * &c);
            }
            mean = propagate_mean(grid, &closed, &forcing(&feedforward), &boundary.m0);
        }
    }
    let fwd = forcing(&feedforward);
    let mean_samples = hermite_samples(grid, &mean, |j, x| &closed[j] * x + &fwd[j]);
    let control = (0..grid.n_samples())
        .map(|j| &gain[j] * &mean_samples[j] + &feedforward[j])
        .collect();
    let covariance = ric.covariance;
    check_moments(&mean, &covariance)?;
    Ok(SteeringSolution {
        policy: FeedbackPolicy {
            gain,
            feedforward,
            riccati: ric.riccati,
            mean: mean_samples,
            control,
        },
        mean,
        covariance,
        closed_loop_matrix: closed,
        shooting_iterations: ric.iterations,
        shooting_jacobian: ric.jacobian,
        covariance_residual: ric.residual,
    })
}
