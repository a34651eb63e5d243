//! Performance bounds for localization under model mismatch.
//!
//! The estimation parameter is the UE position plus a complex nuisance gain,
//! packed as `θ = (x, y, z, gain_re, gain_im)`. For a matched model the
//! classical Fisher information / position error bound (PEB) applies; when
//! the estimator assumes a model that differs from the one generating the
//! data (wrong RIS pose, failed elements, uncalibrated coupling), the
//! relevant tool is the misspecified Cramér–Rao bound built around the
//! pseudo-true parameter — the point in the assumed model family closest to
//! the true mean in least squares.
//!
//! All derivatives are taken numerically (central differences), so any mean
//! model — including ones with coupling operators or amplitude nonlinearities
//! — gets bounds without hand-derived gradients.

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use thiserror::Error;

use crate::channel::{
    apply_failure, sample_failure_mask, CascadeModel, ChannelError, Observation, RisProfile,
};
use crate::seeding::derive_seed;
use crate::{C64, Mat3, Vec3};

/// Number of estimation parameters: three position coordinates plus the real
/// and imaginary parts of the complex gain.
pub const N_PARAMS: usize = 5;
/// Number of leading position coordinates in the parameter vector.
pub const N_POSITION: usize = 3;

type Mat5 = SMatrix<f64, N_PARAMS, N_PARAMS>;
type Vec5 = SVector<f64, N_PARAMS>;

// ── errors ──────────────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("model evaluation failed: {0}")]
    Model(#[from] ChannelError),
    #[error("mean vector length mismatch: expected {expected}, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("information matrix is not symmetric positive semidefinite")]
    NotPsd,
    #[error("Fisher information is singular; the scenario is unidentifiable")]
    SingularFim,
    #[error("misspecified information matrix A is singular at the pseudo-true point")]
    SingularInformation,
    #[error(
        "pseudo-true search did not converge (residual {residual:.6e}, gradient {grad_norm:.6e})"
    )]
    NonConvergence {
        /// Best iterate found before the budget ran out.
        best: ParamVector,
        residual: f64,
        grad_norm: f64,
    },
}

// ── parameter vector ────────────────────────────────────────────────────────

/// Estimation parameters: UE position and complex path gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamVector {
    pub ue_position: Vec3,
    pub gain_re: f64,
    pub gain_im: f64,
}

impl ParamVector {
    pub fn new(ue_position: Vec3, gain: C64) -> Self {
        Self {
            ue_position,
            gain_re: gain.re,
            gain_im: gain.im,
        }
    }

    pub fn gain(&self) -> C64 {
        C64::new(self.gain_re, self.gain_im)
    }

    /// Coordinates in the fixed order `(x, y, z, gain_re, gain_im)`.
    pub fn as_array(&self) -> [f64; N_PARAMS] {
        [
            self.ue_position.x,
            self.ue_position.y,
            self.ue_position.z,
            self.gain_re,
            self.gain_im,
        ]
    }

    pub fn from_array(a: [f64; N_PARAMS]) -> Self {
        Self {
            ue_position: Vec3::new(a[0], a[1], a[2]),
            gain_re: a[3],
            gain_im: a[4],
        }
    }

    /// Returns a copy with coordinate `i` shifted by `delta`.
    pub fn nudged(&self, i: usize, delta: f64) -> Self {
        let mut a = self.as_array();
        a[i] += delta;
        Self::from_array(a)
    }
}

// ── mean models ─────────────────────────────────────────────────────────────

/// A deterministic observation-mean model μ(θ) with complex circular Gaussian
/// noise of per-sample variance σ².
///
/// The cascade channel implements this; small closures wrapped in
/// [`FnMeanModel`] are handy for unit tests and sanity studies.
pub trait MeanModel {
    /// Noise-free mean as a flat complex vector.
    fn mean(&self, theta: &ParamVector) -> Result<DVector<C64>, BoundsError>;
}

impl MeanModel for CascadeModel {
    fn mean(&self, theta: &ParamVector) -> Result<DVector<C64>, BoundsError> {
        let obs = self.mean_at(theta.ue_position, theta.gain())?;
        Ok(DVector::from_vec(obs.data))
    }
}

/// Wraps a plain function as a [`MeanModel`].
pub struct FnMeanModel<F: Fn(&ParamVector) -> Vec<C64>>(pub F);

impl<F: Fn(&ParamVector) -> Vec<C64>> MeanModel for FnMeanModel<F> {
    fn mean(&self, theta: &ParamVector) -> Result<DVector<C64>, BoundsError> {
        Ok(DVector::from_vec((self.0)(theta)))
    }
}

/// Flattens an observation into the vector layout used by the bound
/// machinery (the observation's own sample ordering).
pub fn observation_vector(obs: &Observation) -> DVector<C64> {
    DVector::from_column_slice(&obs.data)
}

// ── Jacobian ────────────────────────────────────────────────────────────────

/// Jacobian of the mean with respect to `(x, y, z, gain_re, gain_im)` by
/// central differences with per-coordinate step `h_i = max(1e-6, 1e-6·|θ_i|)`.
pub fn jacobian<M: MeanModel>(
    model: &M,
    theta: &ParamVector,
) -> Result<DMatrix<C64>, BoundsError> {
    jacobian_scaled(model, theta, 1.0)
}

/// Same as [`jacobian`] with all steps multiplied by `step_scale`; used for
/// step-halving consistency checks.
pub fn jacobian_scaled<M: MeanModel>(
    model: &M,
    theta: &ParamVector,
    step_scale: f64,
) -> Result<DMatrix<C64>, BoundsError> {
    if !(step_scale > 0.0 && step_scale.is_finite()) {
        return Err(BoundsError::InvalidParameter(
            "step_scale must be positive and finite",
        ));
    }
    let a = theta.as_array();
    let mut cols: Vec<DVector<C64>> = Vec::with_capacity(N_PARAMS);
    for (i, &ai) in a.iter().enumerate() {
        let h = step_scale * 1e-6_f64.max(1e-6 * ai.abs());
        let plus = model.mean(&theta.nudged(i, h))?;
        let minus = model.mean(&theta.nudged(i, -h))?;
        if plus.len() != minus.len() {
            return Err(BoundsError::SizeMismatch {
                expected: plus.len(),
                got: minus.len(),
            });
        }
        let col = (plus - minus).unscale(2.0 * h);
        if col.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(BoundsError::NonFinite("Jacobian column"));
        }
        cols.push(col);
    }
    let rows = cols[0].len();
    if cols.iter().any(|c| c.len() != rows) {
        return Err(BoundsError::SizeMismatch {
            expected: rows,
            got: cols.iter().map(|c| c.len()).find(|&l| l != rows).unwrap(),
        });
    }
    Ok(DMatrix::from_fn(rows, N_PARAMS, |r, c| cols[c][r]))
}

// ── Fisher information and PEB ──────────────────────────────────────────────

/// Fisher information matrix for complex circular Gaussian observations:
/// `FIM = (2/σ²)·Re(Jᴴ J)`, validated symmetric positive semidefinite.
#[derive(Debug, Clone, PartialEq)]
pub struct FimMatrix {
    m: Mat5,
}

impl FimMatrix {
    /// Validates symmetry (to rounding) and positive semidefiniteness with a
    /// relative eigenvalue tolerance of −1e-9.
    pub fn new(m: Mat5) -> Result<Self, BoundsError> {
        let scale = m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        if m.iter().any(|v| !v.is_finite()) {
            return Err(BoundsError::NonFinite("information matrix"));
        }
        let asym = (m - m.transpose()).norm();
        if asym > 1e-9 * scale.max(1.0) {
            return Err(BoundsError::NotPsd);
        }
        let sym = 0.5 * (m + m.transpose());
        let eigs = sym.symmetric_eigenvalues();
        let max_eig = eigs.iter().fold(0.0_f64, |acc, &v| acc.max(v.abs()));
        if eigs.iter().any(|&l| l < -1e-9 * max_eig.max(1.0)) {
            return Err(BoundsError::NotPsd);
        }
        Ok(Self { m: sym })
    }

    pub fn matrix(&self) -> &Mat5 {
        &self.m
    }

    /// The 3×3 position block (upper-left).
    pub fn position_block(&self) -> Mat3 {
        self.m.fixed_view::<3, 3>(0, 0).into_owned()
    }
}

/// Builds the FIM from a Jacobian and per-sample noise variance.
pub fn fim(j: &DMatrix<C64>, noise_variance: f64) -> Result<FimMatrix, BoundsError> {
    if !(noise_variance > 0.0 && noise_variance.is_finite()) {
        return Err(BoundsError::InvalidParameter(
            "noise variance must be positive and finite",
        ));
    }
    if j.ncols() != N_PARAMS {
        return Err(BoundsError::SizeMismatch {
            expected: N_PARAMS,
            got: j.ncols(),
        });
    }
    let g = j.adjoint() * j;
    let scale = 2.0 / noise_variance;
    let m = Mat5::from_fn(|r, c| scale * g[(r, c)].re);
    FimMatrix::new(m)
}

/// Inverts a symmetric 5×5 information matrix, rejecting numerically
/// singular inputs (smallest eigenvalue below `1e-14`× the largest).
fn invert_information(m: &Mat5, singular: BoundsError) -> Result<Mat5, BoundsError> {
    let eigs = m.symmetric_eigenvalues();
    let max_abs = eigs.iter().fold(0.0_f64, |acc, &v| acc.max(v.abs()));
    if max_abs == 0.0 || eigs.iter().any(|&l| l.abs() <= 1e-14 * max_abs) {
        return Err(singular);
    }
    m.try_inverse().ok_or(singular)
}

/// Position error bound: `sqrt` of the trace of the 3×3 position block of
/// the inverse FIM.
pub fn peb(f: &FimMatrix) -> Result<f64, BoundsError> {
    let inv = invert_information(&f.m, BoundsError::SingularFim)?;
    let tr = inv[(0, 0)] + inv[(1, 1)] + inv[(2, 2)];
    if !tr.is_finite() || tr < 0.0 {
        return Err(BoundsError::SingularFim);
    }
    Ok(tr.sqrt())
}

// ── pseudo-true parameter ───────────────────────────────────────────────────

/// Result of a pseudo-true parameter search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoTrueFit {
    pub params: ParamVector,
    /// ‖μ_true − μ̃(θ_pt)‖ at the solution.
    pub residual_norm: f64,
    /// Norm of the cost gradient at the solution.
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Default iteration budget for the pseudo-true search.
pub const PSEUDO_TRUE_MAX_ITERATIONS: usize = 200;

/// Finds the pseudo-true parameter `argmin_θ ‖μ_true − μ̃(θ)‖²` of a
/// (possibly mismatched) model by damped Gauss–Newton with a backtracking
/// line search, starting from `init`.
///
/// Converged when the cost gradient norm falls below `1e-8·‖μ_true‖`.
/// Non-convergence within the budget returns an error carrying the best
/// iterate.
pub fn pseudo_true<M: MeanModel>(
    true_mean: &DVector<C64>,
    model: &M,
    init: &ParamVector,
) -> Result<PseudoTrueFit, BoundsError> {
    pseudo_true_with_budget(true_mean, model, init, PSEUDO_TRUE_MAX_ITERATIONS)
}

/// [`pseudo_true`] with an explicit iteration budget.
pub fn pseudo_true_with_budget<M: MeanModel>(
    true_mean: &DVector<C64>,
    model: &M,
    init: &ParamVector,
    max_iterations: usize,
) -> Result<PseudoTrueFit, BoundsError> {
    let gtol = 1e-8 * true_mean.norm();

    let cost_at = |theta: &ParamVector| -> Result<(f64, DVector<C64>), BoundsError> {
        let mu = model.mean(theta)?;
        if mu.len() != true_mean.len() {
            return Err(BoundsError::SizeMismatch {
                expected: true_mean.len(),
                got: mu.len(),
            });
        }
        let r = mu - true_mean;
        let c = r.norm_squared();
        if !c.is_finite() {
            return Err(BoundsError::NonFinite("residual"));
        }
        Ok((c, r))
    };

    let mut theta = *init;
    let (mut cost, mut resid) = cost_at(&theta)?;
    let mut best = (theta, cost);
    let mut lambda = 1e-3;
    let mut last_grad = f64::INFINITY;

    for iter in 0..max_iterations {
        let j = jacobian(model, &theta)?;
        // Gradient and Gauss–Newton Hessian of ‖r‖² over the real parameters.
        let jhr = j.adjoint() * &resid;
        let g = Vec5::from_fn(|i, _| 2.0 * jhr[i].re);
        let gn = g.norm();
        last_grad = gn;
        let jhj = j.adjoint() * &j;
        let h = Mat5::from_fn(|r, c| 2.0 * jhj[(r, c)].re);
        if gn < gtol {
            // Criterion met; polish with a few undamped Gauss–Newton steps
            // to land on the stationary point to machine precision.
            let (theta_p, cost_p, gn_p) = polish(&cost_at, model, theta, cost, h, g)?;
            return Ok(PseudoTrueFit {
                params: theta_p,
                residual_norm: cost_p.sqrt(),
                grad_norm: gn_p,
                iterations: iter,
            });
        }
        let diag_floor = 1e-12 * (0..N_PARAMS).fold(0.0_f64, |acc, i| acc.max(h[(i, i)]));

        // Damped solve; escalate damping until a backtracked step decreases
        // the cost.
        let mut accepted = false;
        'damping: for _ in 0..40 {
            let mut hd = h;
            for i in 0..N_PARAMS {
                hd[(i, i)] += lambda * h[(i, i)].max(diag_floor).max(1e-300);
            }
            let delta = match nalgebra::linalg::Cholesky::new(hd) {
                Some(ch) => ch.solve(&(-g)),
                None => {
                    lambda *= 10.0;
              if lambda > 1e14 {
                        break 'damping;
                    }
                    continue;
                }
            };
            let mut alpha = 1.0;
            for _ in 0..8 {
                let candidate = ParamVector::from_array({
                    let mut a = theta.as_array();
                    for i in 0..N_PARAMS {
                        a[i] += alpha * delta[i];
                    }
                    a
                });
                if let Ok((c_new, r_new)) = cost_at(&candidate) {
                    if c_new < cost {
                        theta = candidate;
                        cost = c_new;
                        resid = r_new;
                        lambda = (lambda / 3.0).max(1e-12);
                        accepted = true;
                        break 'damping;
                    }
                }
                alpha *= 0.5;
            }
            lambda *= 10.0;
            if lambda > 1e14 {
                break 'damping;
            }
        }

        if cost < best.1 {
            best = (theta, cost);
        }
        if !accepted {
            // No descent possible at any damping: stationary to machine
            // precision or a genuinely stalled search.
            break;
        }
    }

    // Final gradient check in case the last accepted step reached the
    // stationary point exactly at the end of the budget.
    let j = jacobian(model, &theta)?;
    let jhr = j.adjoint() * &resid;
    let g = Vec5::from_fn(|i, _| 2.0 * jhr[i].re);
    if g.norm() < gtol {
        let jhj = j.adjoint() * &j;
        let h = Mat5::from_fn(|r, c| 2.0 * jhj[(r, c)].re);
        let (theta_p, cost_p, gn_p) = polish(&cost_at, model, theta, cost, h, g)?;
        return Ok(PseudoTrueFit {
            params: theta_p,
            residual_norm: cost_p.sqrt(),
            grad_norm: gn_p,
            iterations: max_iterations,
        });
    }
    Err(BoundsError::NonConvergence {
        best: best.0,
        residual: best.1.sqrt(),
        grad_norm: last_grad.min(g.norm()),
    })
}

/// Runs a few near-undamped Gauss–Newton steps from an already converged
/// iterate, refining it toward the stationary point at machine precision.
#[allow(clippy::type_complexity)]
fn polish<M: MeanModel>(
    cost_at: &impl Fn(&ParamVector) -> Result<(f64, DVector<C64>), BoundsError>,
    model: &M,
    mut theta: ParamVector,
    mut cost: f64,
    mut h: Mat5,
    mut g: Vec5,
) -> Result<(ParamVector, f64, f64), BoundsError> {
    let mut gn = g.norm();
    for _ in 0..3 {
        let floor = (0..N_PARAMS)
            .fold(0.0_f64, |acc, i| acc.max(h[(i, i)]))
            .max(1e-300)
            * 1e-14;
        let mut hd = h;
        for i in 0..N_PARAMS {
            hd[(i, i)] += floor;
        }
        let Some(ch) = nalgebra::linalg::Cholesky::new(hd) else {
            break;
        };
        let delta = ch.solve(&(-g));
        let candidate = ParamVector::from_array({
            let mut a = theta.as_array();
            for i in 0..N_PARAMS {
                a[i] += delta[i];
            }
            a
        });
        let Ok((c_new, r_new)) = cost_at(&candidate) else {
            break;
        };
        if c_new >= cost {
            break;
        }
        theta = candidate;
        cost = c_new;
        let j = jacobian(model, &theta)?;
        let jhr = j.adjoint() * &r_new;
        g = Vec5::from_fn(|i, _| 2.0 * jhr[i].re);
        let jhj = j.adjoint() * &j;
        h = Mat5::from_fn(|r, c| 2.0 * jhj[(r, c)].re);
        gn = g.norm();
    }
    Ok((theta, cost, gn))
}

/// Multi-start pseudo-true search: runs [`pseudo_true`] from `base` plus six
/// seeds perturbed by ±0.1 m along each position axis and returns the fit
/// with the smallest residual. Fails only if every start fails.
pub fn pseudo_true_multistart<M: MeanModel>(
    true_mean: &DVector<C64>,
    model: &M,
    base: &ParamVector,
) -> Result<PseudoTrueFit, BoundsError> {
    let mut starts = vec![*base];
    for axis in 0..N_POSITION {
        for sign in [1.0, -1.0] {
            starts.push(base.nudged(axis, sign * 0.1));
        }
    }
    let mut best: Option<PseudoTrueFit> = None;
    let mut last_err: Option<BoundsError> = None;
    for s in &starts {
        match pseudo_true(true_mean, model, s) {
            Ok(fit) => {
                if best
                    .as_ref()
                    .map(|b| fit.residual_norm < b.residual_norm)
                    .unwrap_or(true)
                {
                    best = Some(fit);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.expect("at least one start attempted"))
}

// ── misspecified bound ──────────────────────────────────────────────────────

/// Bound summary at a pseudo-true point.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    /// Classical PEB of the assumed model at the pseudo-true point (m).
    pub peb: f64,
    /// Misspecified lower bound: `sqrt(trace_position(A⁻¹BA⁻¹) + ‖p_pt − p_true‖²)` (m).
    pub lb: f64,
    /// High-SNR floor of the bound: the position bias `‖p_pt − p_true‖` (m).
    pub asymptotic_peb: f64,
    /// Pseudo-true parameter used for the evaluation.
    pub pseudo_true: ParamVector,
    /// Position block of the covariance sandwich `A⁻¹BA⁻¹`.
    pub mcrb_position: Mat3,
}

/// Misspecified Cramér–Rao bound at the pseudo-true point `theta_pt` of the
/// assumed `model`, with data generated by `true_mean` and the true UE at
/// `p_true`.
///
/// `A_ij = (2/σ²)·Re(∂μ̃ᴴ_i ∂μ̃_j − εᴴ ∂²μ̃_ij)` with `ε = μ_true − μ̃(θ_pt)`,
/// `B = (2/σ²)·Re(Jᴴ J)`; second derivatives come from central differences of
/// the Jacobian with a 1e-5 relative step.
pub fn mcrb_lb<M: MeanModel>(
    theta_pt: &ParamVector,
    model: &M,
    true_mean: &DVector<C64>,
    noise_variance: f64,
    p_true: Vec3,
) -> Result<BoundReport, BoundsError> {
    if !(noise_variance > 0.0 && noise_variance.is_finite()) {
        return Err(BoundsError::InvalidParameter(
            "noise variance must be positive and finite",
        ));
    }
    let mu = model.mean(theta_pt)?;
    if mu.len() != true_mean.len() {
        return Err(BoundsError::SizeMismatch {
            expected: true_mean.len(),
            got: mu.len(),
        });
    }
    let eps = true_mean - mu;
    let j = jacobian(model, theta_pt)?;
    let b = fim(&j, noise_variance)?;

    // D_ij = Re(εᴴ ∂²μ̃/∂θ_i∂θ_j), rows via differences of the Jacobian.
    let a_arr = theta_pt.as_array();
    let mut d = Mat5::zeros();
    for i in 0..N_PARAMS {
        let h = 1e-5_f64.max(1e-5 * a_arr[i].abs());
        let jp = jacobian(model, &theta_pt.nudged(i, h))?;
        let jm = jacobian(model, &theta_pt.nudged(i, -h))?;
        let dj = (jp - jm).unscale(2.0 * h);
        let row = eps.adjoint() * dj;
        for c in 0..N_PARAMS {
            d[(i, c)] = row[(0, c)].re;
        }
    }
    let d = 0.5 * (d + d.transpose());
    if d.iter().any(|v| !v.is_finite()) {
        return Err(BoundsError::NonFinite("Hessian contraction"));
    }

    let a_mat = b.matrix() - (2.0 / noise_variance) * d;
    let a_inv = invert_information(&a_mat, BoundsError::SingularInformation)?;
    let sandwich = a_inv * b.matrix() * a_inv;

    let raw_trace = sandwich[(0, 0)] + sandwich[(1, 1)] + sandwich[(2, 2)];
    let trace_scale = (0..N_POSITION).fold(0.0_f64, |acc, i| acc + sandwich[(i, i)].abs());
    if !raw_trace.is_finite() || raw_trace < -1e-9 * trace_scale.max(1.0) {
        return Err(BoundsError::NonFinite("covariance sandwich trace"));
    }
    let trace_pos = raw_trace.max(0.0);

    let bias = (theta_pt.ue_position - p_true).norm();
    Ok(BoundReport {
        peb: peb(&b)?,
        lb: (trace_pos + bias * bias).sqrt(),
        asymptotic_peb: bias,
        pseudo_true: *theta_pt,
        mcrb_position: sandwich.fixed_view::<3, 3>(0, 0).into_owned(),
    })
}

// ── failure-averaged bound ──────────────────────────────────────────────────

/// Inputs for the pixel-failure bound study: the failure-free cascade the
/// estimator assumes, and the true parameters generating the data.
#[derive(Debug, Clone)]
pub struct FailureStudy {
    pub model: CascadeModel,
    pub theta_true: ParamVector,
}

/// Default number of failure-mask realizations.
pub const FAILURE_LB_REALIZATIONS: usize = 50;

/// Per-realization misspecified bounds when a fraction `p_fail` of RIS
/// elements is stuck while the estimator assumes the failure-free model.
///
/// Realization `i` draws its mask from a seed derived from
/// `(rng_seed, "failure-mask", i)`, so masks are nested across `p_fail`
/// values at a common seed (common random numbers).
pub fn failure_lb_samples(
    study: &FailureStudy,
    p_fail: f64,
    n_realizations: usize,
    rng_seed: u64,
) -> Result<Vec<f64>, BoundsError> {
    if !(0.0..=1.0).contains(&p_fail) {
        return Err(BoundsError::InvalidParameter(
            "failure probability must lie in [0, 1]",
        ));
    }
    if n_realizations == 0 {
        return Err(BoundsError::InvalidParameter(
            "need at least one failure realization",
        ));
    }
    if study.model.coupled_operators.is_some() {
        return Err(BoundsError::InvalidParameter(
            "failure study expects a diagonal-profile cascade",
        ));
    }
    let assumed = &study.model;
    let sigma2 = assumed.noise_variance();
    let n_elem = assumed.ris.n_elements();

    let mut out = Vec::with_capacity(n_realizations);
    for i in 0..n_realizations {
        let mask_seed = derive_seed(rng_seed, "failure-mask", i as u64);
        let mask = sample_failure_mask(n_elem, p_fail, mask_seed);

        let (true_mean, fit_params) = if mask.n_failed() == 0 {
            (assumed.mean(&study.theta_true)?, study.theta_true)
        } else {
            let failed_profiles = apply_failure(&assumed.profiles, &mask)?;
            let true_model = with_profiles(assumed, failed_profiles)?;
            let true_mean = true_model.mean(&study.theta_true)?;
            let fit = pseudo_true_multistart(&true_mean, assumed, &study.theta_true)?;
            (true_mean, fit.params)
        };

        let report = mcrb_lb(
            &fit_params,
            assumed,
            &true_mean,
            sigma2,
            study.theta_true.ue_position,
        )?;
        out.push(report.lb);
    }
    Ok(out)
}

/// Root-mean-square of [`failure_lb_samples`] over the mask realizations.
pub fn failure_lb(
    study: &FailureStudy,
    p_fail: f64,
    n_realizations: usize,
    rng_seed: u64,
) -> Result<f64, BoundsError> {
    let samples = failure_lb_samples(study, p_fail, n_realizations, rng_seed)?;
    let ms = samples.iter().map(|l| l * l).sum::<f64>() / samples.len() as f64;
    Ok(ms.sqrt())
}

/// Rebuilds a cascade with different profiles, keeping every other setting.
fn with_profiles(
    model: &CascadeModel,
    profiles: RisProfile,
) -> Result<CascadeModel, BoundsError> {
    let rebuilt = CascadeModel::new(model.bs, model.ris, model.spec, profiles)?
        .with_amplitude(model.amplitude)
        .with_phase_model(model.phase_model)
        .with_rx_offsets(model.rx_offsets.clone());
    Ok(rebuilt)
}

// ── tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{PhaseModel, RisProfile, SignalSpec};
    use crate::geometry::{ArrayLayout, GeometryError, Pose, RisPanel};
    use crate::C0;
    use approx::assert_relative_eq;
    use nalgebra::Complex;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    // ── fixtures ────────────────────────────────────────────────────────

    fn tiny_spec() -> SignalSpec {
        SignalSpec {
            carrier_hz: 28e9,
            bandwidth_hz: 400e6,
            n_subcarriers: 8,
            n_transmissions: 3,
            tx_power_dbm: 10.0,
            noise_psd_dbm_hz: -173.855,
            noise_figure_db: 10.0,
        }
    }

    fn tiny_cascade() -> CascadeModel {
        let lam = C0 / 28e9;
        let panel = RisPanel::new(
            ArrayLayout::new(2, 2, lam / 2.0).unwrap(),
            Pose::identity_at(Vec3::zeros()),
        );
        let ph = [
            [0.3, -1.2, 2.5, 0.9],
            [1.7, 0.4, -2.2, -0.6],
            [-0.8, 2.9, 0.1, 1.3],
        ];
        let profiles = RisProfile::new(
            ph.iter()
                .map(|row| row.iter().map(|&p| C64::from_polar(1.0, p)).collect())
                .collect(),
        )
        .unwrap();
        CascadeModel::new(
            Pose::identity_at(Vec3::new(1.0, 1.0, 2.0)),
            panel,
            tiny_spec(),
            profiles,
        )
        .unwrap()
        .with_phase_model(PhaseModel::Narrowband)
    }

    const TINY_UE: Vec3 = Vec3::new(-1.0, 0.5, 1.5);

    fn tiny_truth() -> ParamVector {
        ParamVector::new(TINY_UE, C64::new(1.0, 0.0))
    }

    /// A desk-scale cascade with a well-conditioned position FIM (PEB far
    /// below the geometry scale), for solver and failure-bound tests.
    fn strong_cascade() -> CascadeModel {
        let lam = C0 / 28e9;
        let panel = RisPanel::new(
            ArrayLayout::new(12, 12, lam / 2.0).unwrap(),
            Pose::identity_at(Vec3::zeros()),
        );
        let spec = SignalSpec {
            carrier_hz: 28e9,
            bandwidth_hz: 400e6,
            n_subcarriers: 16,
            n_transmissions: 4,
            tx_power_dbm: 30.0,
            noise_psd_dbm_hz: -173.855,
            noise_figure_db: 10.0,
        };
        let profiles = crate::channel::random_profiles(panel.n_elements(), 4, 5);
        CascadeModel::new(
            Pose::identity_at(Vec3::new(0.5, 0.3, 0.8)),
            panel,
            spec,
            profiles,
        )
        .unwrap()
    }

    const STRONG_UE: Vec3 = Vec3::new(-0.4, 0.25, 0.6);

    fn strong_truth() -> ParamVector {
        ParamVector::new(STRONG_UE, C64::new(1.0, 0.0))
    }

    /// Complex affine model μ(θ) = Aθ + b with a fixed pseudo-random A.
    fn affine_model() -> (DMatrix<C64>, DVector<C64>, impl MeanModel) {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let m = 12;
        let a = DMatrix::from_fn(m, N_PARAMS, |_, _| {
            C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let b = DVector::from_fn(m, |_, _| {
            C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let (ac, bc) = (a.clone(), b.clone());
        let model = FnMeanModel(move |theta: &ParamVector| {
            let t = DVector::from_iterator(
                N_PARAMS,
                theta.as_array().iter().map(|&v| C64::new(v, 0.0)),
            );
            (&ac * t + &bc).iter().copied().collect()
        });
        (a, b, model)
    }

    /// Frequency-fit toy: assumed mean sin(x·t_j) on a time grid plus an
    /// identity block tying down (y, z, gain_re, gain_im).
    fn sinusoid_grid() -> Vec<f64> {
        (1..=40).map(|j| 0.1 * j as f64).collect()
    }

    fn sinusoid_model() -> impl MeanModel {
        let ts = sinusoid_grid();
        FnMeanModel(move |theta: &ParamVector| {
            let x = theta.ue_position.x;
            let mut v: Vec<C64> = ts
                .iter()
                .map(|&t| C64::new((x * t).sin(), 0.0))
                .collect();
            v.push(C64::new(theta.ue_position.y, 0.0));
            v.push(C64::new(theta.ue_position.z, 0.0));
            v.push(C64::new(theta.gain_re, 0.0));
            v.push(C64::new(theta.gain_im, 0.0));
            v
        })
    }

    fn sinusoid_true_mean(amp: f64, omega: f64) -> DVector<C64> {
        let ts = sinusoid_grid();
        let mut v: Vec<C64> = ts
            .iter()
            .map(|&t| C64::new(amp * (omega * t).sin(), 0.0))
            .collect();
        v.extend_from_slice(&[C64::new(0.0, 0.0); 4]);
        DVector::from_vec(v)
    }

    // ── jacobian ────────────────────────────────────────────────────────

    #[test]
    fn jacobian_of_affine_model_equals_coefficient_matrix() {
        let (a, _, model) = affine_model();
        let theta = ParamVector::from_array([0.4, -0.2, 1.1, 0.7, -0.5]);
        let j = jacobian(&model, &theta).unwrap();
        let scale = a.iter().fold(0.0_f64, |acc, v| acc.max(v.norm()));
        for r in 0..a.nrows() {
            for c in 0..N_PARAMS {
                assert!((j[(r, c)] - a[(r, c)]).norm() <= 1e-9 * scale);
            }
        }
    }

    #[test]
    fn jacobian_of_quadratic_scalar_matches_analytic_derivative() {
        let model = FnMeanModel(|theta: &ParamVector| {
            vec![
                C64::new(theta.ue_position.x * theta.ue_position.x, 0.0),
                C64::new(theta.ue_position.y, 0.0),
                C64::new(theta.ue_position.z, 0.0),
                C64::new(theta.gain_re, 0.0),
                C64::new(theta.gain_im, 0.0),
            ]
        });
        let theta = ParamVector::from_array([3.0, 0.0, 0.0, 1.0, 0.0]);
        let j = jacobian(&model, &theta).unwrap();
        assert_relative_eq!(j[(0, 0)].re, 6.0, max_relative = 1e-6);
        assert_relative_eq!(j[(1, 1)].re, 1.0, max_relative = 1e-9);
    }

    #[test]
    fn jacobian_rejects_non_finite_model_output() {
        let model = FnMeanModel(|theta: &ParamVector| {
            vec![C64::new(
                if theta.ue_position.x > 0.0 {
                    f64::NAN
                } else {
                    0.0
                },
                0.0,
            )]
        });
        let theta = ParamVector::from_array([1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            jacobian(&model, &theta),
            Err(BoundsError::NonFinite(_))
        ));
    }

    #[test]
    fn jacobian_step_halving_is_consistent_on_the_cascade() {
        let model = tiny_cascade();
        let theta = tiny_truth();
        let j1 = jacobian_scaled(&model, &theta, 1.0).unwrap();
        let j2 = jacobian_scaled(&model, &theta, 0.5).unwrap();
        let diff = (&j1 - &j2).norm() / j1.norm();
        assert!(diff < 1e-6, "step-halving relative change {diff:.3e}");
    }

    // ── fim / peb ───────────────────────────────────────────────────────

    #[test]
    fn fim_scalar_formula() {
        // One real sample with dμ/dx = 1 and σ² = 2 → FIM_xx = (2/2)·1 = 1.
        let model = FnMeanModel(|theta: &ParamVector| {
            vec![C64::new(theta.ue_position.x, 0.0)]
        });
        let theta = ParamVector::from_array([0.3, 0.0, 0.0, 0.0, 0.0]);
        let j = jacobian(&model, &theta).unwrap();
        let f = fim(&j, 2.0).unwrap();
        assert_relative_eq!(f.matrix()[(0, 0)], 1.0, max_relative = 1e-9);
        assert_relative_eq!(f.matrix()[(1, 1)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn fim_matches_ml_estimator_variance_on_linear_toy() {
        // Linear complex-Gaussian model: the ML estimator is least squares
        // and its covariance equals the inverse FIM exactly; check the x
        // variance over Monte-Carlo trials.
        let (a, b, model) = affine_model();
        let theta0 = ParamVector::from_array([0.2, -0.4, 0.9, 1.2, -0.3]);
        let sigma2 = 0.05;
        let j = jacobian(&model, &theta0).unwrap();
        let f = fim(&j, sigma2).unwrap();
        let predicted_var = f.matrix().try_inverse().unwrap()[(0, 0)];

        let mu0 = model.mean(&theta0).unwrap();
        let h = Mat5::from_fn(|r, c| (a.column(r).adjoint() * a.column(c))[(0, 0)].re);
        let h_inv = h.try_inverse().unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let sd = (sigma2 / 2.0).sqrt();
        let n_trials = 10_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n_trials {
            let y = DVector::from_fn(mu0.len(), |i, _| {
                mu0[i]
                    + C64::new(
                        sd * rng.sample::<f64, _>(rand_distr::StandardNormal),
                        sd * rng.sample::<f64, _>(rand_distr::StandardNormal),
                    )
            });
            // LS solution of min‖y − Aθ − b‖² over real θ.
            let rhs_c = a.adjoint() * (y - &b);
            let rhs = Vec5::from_fn(|i, _| rhs_c[i].re);
            let est = h_inv * rhs;
            sum += est[0];
            sum_sq += est[0] * est[0];
        }
        let mean = sum / n_trials as f64;
        let var = sum_sq / n_trials as f64 - mean * mean;
        assert_relative_eq!(var, predicted_var, max_relative = 0.05);
    }

    #[test]
    fn peb_of_block_diagonal_fim_has_closed_form() {
        let mut m = Mat5::zeros();
        let a = 400.0;
        for i in 0..3 {
            m[(i, i)] = a;
        }
        m[(3, 3)] = 7.0;
        m[(4, 4)] = 9.0;
        let f = FimMatrix::new(m).unwrap();
        assert_relative_eq!(peb(&f).unwrap(), (3.0 / a).sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn peb_scales_inversely_with_sqrt_power() {
        // Transmit power ×100 scales the mean by 10, the FIM by 100, and the
        // PEB by exactly 0.1.
        let model = tiny_cascade();
        let theta = tiny_truth();
        let j = jacobian(&model, &theta).unwrap();
        let sigma2 = model.noise_variance();
        let p1 = peb(&fim(&j, sigma2).unwrap()).unwrap();
        let j_scaled = j.map(|v| v * Complex::new(10.0, 0.0));
        let p2 = peb(&fim(&j_scaled, sigma2).unwrap()).unwrap();
        assert_relative_eq!(p2, 0.1 * p1, max_relative = 1e-12);
    }

    #[test]
    fn peb_rejects_singular_fim() {
        let mut m = Mat5::zeros();
        m[(3, 3)] = 1.0;
        m[(4, 4)] = 1.0;
        let f = FimMatrix::new(m).unwrap();
        assert!(matches!(peb(&f), Err(BoundsError::SingularFim)));
    }

    #[test]
    fn fim_construction_rejects_indefinite_matrix() {
        let mut m = Mat5::identity();
        m[(0, 0)] = -1.0;
        assert!(matches!(FimMatrix::new(m), Err(BoundsError::NotPsd)));
    }

    // ── pseudo-true ─────────────────────────────────────────────────────

    #[test]
    fn pseudo_true_recovers_truth_under_zero_mismatch() {
        let model = strong_cascade();
        let truth = strong_truth();
        let true_mean = model.mean(&truth).unwrap();
        let init = ParamVector::new(STRONG_UE + Vec3::new(0.05, -0.04, 0.03), C64::new(0.9, 0.1));
        let fit = pseudo_true(&true_mean, &model, &init).unwrap();
        assert!((fit.params.ue_position - STRONG_UE).norm() < 1e-9);
        assert!(fit.residual_norm < 1e-10);
    }

    #[test]
    fn pseudo_true_on_affine_model_matches_normal_equations() {
        let (a, b, model) = affine_model();
        // A target outside the affine model's range: the normal equations
        // give the unique least-squares fit over the real parameters.
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let y = DVector::from_fn(a.nrows(), |_, _| {
            C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let h = Mat5::from_fn(|r, c| (a.column(r).adjoint() * a.column(c))[(0, 0)].re);
        let rhs_c = a.adjoint() * (&y - &b);
        let rhs = Vec5::from_fn(|i, _| rhs_c[i].re);
        let expected = h.try_inverse().unwrap() * rhs;

        let init = ParamVector::from_array([0.0; 5]);
        let fit = pseudo_true(&y, &model, &init).unwrap();
        let got = Vec5::from_column_slice(&fit.params.as_array());
        assert!((got - expected).norm() < 1e-9 * expected.norm().max(1.0));
    }

    #[test]
    fn pseudo_true_exhausted_budget_carries_best_iterate() {
        let model = sinusoid_model();
        let true_mean = sinusoid_true_mean(1.3, 2.0);
        let init = ParamVector::from_array([2.1, 0.0, 0.0, 0.0, 0.0]);
        match pseudo_true_with_budget(&true_mean, &model, &init, 0) {
            Err(BoundsError::NonConvergence { best, .. }) => {
                assert_eq!(best, init);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn pseudo_true_multistart_agrees_across_all_starts() {
        // Mismatched panel pose: every start in the multi-start set must land
        // on the same pseudo-true point.
        let truth = strong_truth();
        let true_model = strong_cascade();
        let true_mean = true_model.mean(&truth).unwrap();

        let mut assumed = strong_cascade();
        assumed.ris = assumed.ris.perturbed(GeometryError::new(0.005, 0.0));
        let assumed = with_profiles(&assumed, true_model.profiles.clone()).unwrap();

        let mut fits = vec![pseudo_true(&true_mean, &assumed, &truth).unwrap()];
        for axis in 0..3 {
            for sign in [1.0, -1.0] {
                let start = truth.nudged(axis, sign * 0.1);
                fits.push(pseudo_true(&true_mean, &assumed, &start).unwrap());
            }
        }
        for w in fits.windows(2) {
            let d = (w[0].params.ue_position - w[1].params.ue_position).norm();
            assert!(d < 1e-6, "multi-start disagreement {d:.3e} m");
        }
        let best = pseudo_true_multistart(&true_mean, &assumed, &truth).unwrap();
        assert!((best.params.ue_position - fits[0].params.ue_position).norm() < 1e-6);
    }

    // ── mcrb ────────────────────────────────────────────────────────────

    #[test]
    fn mcrb_degenerates_to_crb_without_mismatch() {
        let model = tiny_cascade();
        let truth = tiny_truth();
        let true_mean = model.mean(&truth).unwrap();
        let sigma2 = model.noise_variance();
        let report = mcrb_lb(&truth, &model, &true_mean, sigma2, TINY_UE).unwrap();
        assert_relative_eq!(report.lb, report.peb, max_relative = 1e-6);
        assert_eq!(report.asymptotic_peb, 0.0);

        let j = jacobian(&model, &truth).unwrap();
        let direct_peb = peb(&fim(&j, sigma2).unwrap()).unwrap();
        assert_relative_eq!(report.peb, direct_peb, max_relative = 1e-12);
    }

    #[test]
    fn mcrb_matches_hand_derived_sandwich_on_sinusoid_toy() {
        // True mean 1.3·sin(2t); assumed family sin(x·t). The amplitude
        // mismatch shifts the pseudo-true frequency and activates the
        // second-derivative term, so A ≠ B.
        let model = sinusoid_model();
        let true_mean = sinusoid_true_mean(1.3, 2.0);
        let sigma2 = 0.02;
        let init = ParamVector::from_array([2.05, 0.0, 0.0, 0.0, 0.0]);
        let fit = pseudo_true(&true_mean, &model, &init).unwrap();
        let x = fit.params.ue_position.x;

        // Hand-derived 1-D sandwich on the sinusoid block plus the exact
        // identity-block contributions for y and z.
        let ts = sinusoid_grid();
        let (mut a_xx, mut b_xx) = (0.0, 0.0);
        for &t in &ts {
            let dmu = t * (x * t).cos();
            let d2mu = -t * t * (x * t).sin();
            let eps = 1.3 * (2.0 * t).sin() - (x * t).sin();
            b_xx += dmu * dmu;
            a_xx += dmu * dmu - eps * d2mu;
        }
        let scale = 2.0 / sigma2;
        let sandwich_xx = (scale * b_xx) / (scale * a_xx * scale * a_xx);
        let trace_pos = sandwich_xx + sigma2 / 2.0 + sigma2 / 2.0;
        let bias = (x - 2.0).abs();
        let expected_lb = (trace_pos + bias * bias).sqrt();

        let report = mcrb_lb(
            &fit.params,
            &model,
            &true_mean,
            sigma2,
            Vec3::new(2.0, 0.0, 0.0),
        )
        .unwrap();
        assert_relative_eq!(report.lb, expected_lb, max_relative = 1e-6);
        assert_relative_eq!(report.asymptotic_peb, bias, max_relative = 1e-9);
        assert_relative_eq!(
            report.mcrb_position[(0, 0)],
            sandwich_xx,
            max_relative = 1e-6
        );
    }

    #[test]
    fn mcrb_lb_never_falls_below_the_asymptotic_floor() {
        let truth = strong_truth();
        let true_model = strong_cascade();
        let true_mean = true_model.mean(&truth).unwrap();

        let mut assumed = strong_cascade();
        assumed.ris = assumed.ris.perturbed(GeometryError::new(0.005, 0.2));
        let assumed = with_profiles(&assumed, true_model.profiles.clone()).unwrap();

        let fit = pseudo_true_multistart(&true_mean, &assumed, &truth).unwrap();
        let report = mcrb_lb(
            &fit.params,
            &assumed,
            &true_mean,
            assumed.noise_variance(),
            STRONG_UE,
        )
        .unwrap();
        assert!(report.asymptotic_peb > 0.0, "perturbation must bias the fit");
        assert!(report.lb >= report.asymptotic_peb - 1e-12);
    }

    // ── failure lb ──────────────────────────────────────────────────────

    #[test]
    fn failure_lb_with_zero_probability_equals_matched_peb() {
        let model = tiny_cascade();
        let truth = tiny_truth();
        let study = FailureStudy {
            model: model.clone(),
            theta_true: truth,
        };
        let lb = failure_lb(&study, 0.0, 5, 11).unwrap();
        let j = jacobian(&model, &truth).unwrap();
        let p = peb(&fim(&j, model.noise_variance()).unwrap()).unwrap();
        assert_relative_eq!(lb, p, max_relative = 1e-9);
    }

    #[test]
    fn failure_lb_grows_with_failure_probability_and_is_deterministic() {
        let study = FailureStudy {
            model: strong_cascade(),
            theta_true: strong_truth(),
        };
        let lb0 = failure_lb(&study, 0.0, 4, 42).unwrap();
        let lb25 = failure_lb(&study, 0.25, 4, 42).unwrap();
        assert!(
            lb25 > lb0 * (1.0 + 1e-6),
            "failures must raise the bound: {lb0:.3e} vs {lb25:.3e}"
        );
        assert_eq!(failure_lb(&study, 0.25, 4, 42).unwrap(), lb25);
    }

    #[test]
    fn failure_lb_rejects_invalid_probability() {
        let study = FailureStudy {
            model: tiny_cascade(),
            theta_true: tiny_truth(),
        };
        assert!(failure_lb(&study, -0.1, 3, 1).is_err());
        assert!(failure_lb(&study, 1.5, 3, 1).is_err());
    }

    // ── properties ──────────────────────────────────────────────────────

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn fim_is_psd_for_random_jacobians(seed in 0u64..1_000) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let rows = rng.gen_range(5..12);
            let j = DMatrix::from_fn(rows, N_PARAMS, |_, _| {
                C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            });
            // Construction validates symmetry and PSD internally.
            let f = fim(&j, 0.3).unwrap();
            let eigs = f.matrix().symmetric_eigenvalues();
            let max_eig = eigs.iter().fold(0.0_f64, |acc, &v| acc.max(v.abs()));
            prop_assert!(eigs.iter().all(|&l| l >= -1e-9 * max_eig.max(1.0)));
        }

        #[test]
        fn peb_decreases_monotonically_with_power(scale_db in 1.0f64..30.0) {
            let model = tiny_cascade();
            let theta = tiny_truth();
            let j = jacobian(&model, &theta).unwrap();
            let sigma2 = model.noise_variance();
            let base = peb(&fim(&j, sigma2).unwrap()).unwrap();
            let amp = 10f64.powf(scale_db / 20.0);
            let j2 = j.map(|v| v * Complex::new(amp, 0.0));
            let boosted = peb(&fim(&j2, sigma2).unwrap()).unwrap();
            prop_assert!(boosted < base);
            // Log-log slope against linear power is exactly −1/2.
            let slope = (boosted / base).log10() / (amp * amp).log10();
            prop_assert!((slope + 0.5).abs() < 1e-6);
        }
    }
}
