//! Estimators operating on cascade observations: maximum-likelihood
//! localization, joint localization and failure diagnosis, and array pose
//! calibration from anchor measurements.
//!
//! All estimators minimize least-squares mean mismatch, so the machinery of
//! [`crate::bounds`] (finite-difference Jacobians, damped Gauss–Newton) is
//! reused for the refinement stages. The complex cascade gain is never
//! searched over: it is profiled out in closed form at every position
//! candidate.

use nalgebra::{DMatrix, DVector, SVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::bounds::{
    self, observation_vector, BoundsError, MeanModel, ParamVector,
};
use crate::channel::{
    apply_failure, CascadeModel, ChannelError, FailureMask, Observation, RisProfile,
};
use crate::geometry::{GeometryValidationError, Pose};
use crate::{C0, C64, Mat3, Vec3};

// ── errors ──────────────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("bound machinery failed: {0}")]
    Bounds(#[from] BoundsError),
    #[error("model evaluation failed: {0}")]
    Model(#[from] ChannelError),
    #[error("geometry construction failed: {0}")]
    Geometry(#[from] GeometryValidationError),
    #[error(
        "position is under-determined: {got} time-of-arrival anchors give {got} \
         path-length observations for 3 position unknowns; at least 3 \
         non-collinear anchors are required"
    )]
    InsufficientToa { got: usize },
    #[error(
        "position is under-determined: the time-of-arrival anchors are collinear, \
         so the position is not identifiable around the anchor axis"
    )]
    CollinearToaAnchors,
    #[error(
        "orientation is under-determined: {got} angle-of-departure anchor(s) \
         cannot fix 3 orientation unknowns; at least 2 anchors with \
         non-parallel directions are required"
    )]
    InsufficientAod { got: usize },
    #[error(
        "orientation is under-determined: all angle-of-departure directions are \
         parallel, leaving the rotation about that axis free"
    )]
    ParallelAodDirections,
    #[error("anchor id {id} has no pose (only {n_anchors} anchors supplied)")]
    UnknownAnchor { id: usize, n_anchors: usize },
}

// ── search grid ─────────────────────────────────────────────────────────────

/// Axis-aligned coarse search grid for the global stage of the ML estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchGrid {
    pub center: Vec3,
    pub half_widths: Vec3,
    pub points: [usize; 3],
}

impl SearchGrid {
    /// Builds a grid, validating that every half-width is positive and every
    /// axis carries at least two points.
    pub fn new(
        center: Vec3,
        half_widths: Vec3,
        points: [usize; 3],
    ) -> Result<Self, EstimatorError> {
        if !center.iter().all(|v| v.is_finite()) {
            return Err(EstimatorError::InvalidParameter(
                "grid center must be finite",
            ));
        }
        if !half_widths.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(EstimatorError::InvalidParameter(
                "grid half-widths must be positive and finite",
            ));
        }
        if points.iter().any(|&p| p < 2) {
            return Err(EstimatorError::InvalidParameter(
                "grid needs at least 2 points per axis",
            ));
        }
        Ok(Self {
            center,
            half_widths,
            points,
        })
    }

    /// Default grid: a ±1 m cube with 21 points per axis.
    pub fn around(center: Vec3) -> Self {
        Self {
            center,
            half_widths: Vec3::new(1.0, 1.0, 1.0),
            points: [21, 21, 21],
        }
    }

    pub fn n_candidates(&self) -> usize {
        self.points[0] * self.points[1] * self.points[2]
    }

    /// Grid candidates in row-major (x outermost) order.
    pub fn candidates(&self) -> Vec<Vec3> {
        let axis = |i: usize| -> Vec<f64> {
            let n = self.points[i];
            let c = self.center[i];
            let h = self.half_widths[i];
            (0..n)
                .map(|k| c - h + 2.0 * h * k as f64 / (n - 1) as f64)
                .collect()
        };
        let (xs, ys, zs) = (axis(0), axis(1), axis(2));
        let mut out = Vec::with_capacity(self.n_candidates());
        for &x in &xs {
            for &y in &ys {
                for &z in &zs {
                    out.push(Vec3::new(x, y, z));
                }
            }
        }
        out
    }
}

// ── maximum-likelihood localization ─────────────────────────────────────────

/// Output of [`ml_localize`].
#[derive(Debug, Clone, Copy)]
pub struct MlFit {
    pub position: Vec3,
    /// Closed-form complex gain at the returned position.
    pub gain: C64,
    /// ‖y − μ̃(θ̂)‖ at the solution.
    pub residual_norm: f64,
    /// `false` when Gauss–Newton refinement failed to converge and the
    /// best available iterate (grid or partial refinement) was returned.
    pub converged: bool,
}

/// Profiles the complex gain out of `‖y − g·m‖²` in closed form.
/// Returns `(g_hat, residual²)`; a numerically zero mean gives `g = 0`.
fn profile_gain(y: &DVector<C64>, m: &DVector<C64>) -> (C64, f64) {
    let mm = m.norm_squared();
    if mm <= 0.0 {
        return (C64::new(0.0, 0.0), y.norm_squared());
    }
    let my = m.dotc(y); // mᴴ·y
    let g = my / C64::from(mm);
    let res2 = (y.norm_squared() - my.norm_sqr() / mm).max(0.0);
    (g, res2)
}

/// Maximum-likelihood position estimate: coarse grid search with the gain
/// profiled out per candidate, followed by damped Gauss–Newton refinement of
/// the full `(position, gain)` parameter.
///
/// The grid must cover the sought minimizer; refinement that fails to
/// converge falls back to the best available iterate with
/// [`MlFit::converged`] set to `false`.
pub fn ml_localize(
    obs: &Observation,
    model: &CascadeModel,
    grid: &SearchGrid,
) -> Result<MlFit, EstimatorError> {
    let y = observation_vector(obs);
    let mut best: Option<(f64, Vec3, C64)> = None;
    for cand in grid.candidates() {
        let mean = model.mean(&ParamVector::new(cand, C64::new(1.0, 0.0)))?;
        let (g, res2) = profile_gain(&y, &mean);
        if best.as_ref().is_none_or(|(b, _, _)| res2 < *b) {
            best = Some((res2, cand, g));
        }
    }
    let (grid_res2, grid_pos, grid_gain) =
        best.ok_or(EstimatorError::InvalidParameter("empty search grid"))?;

    let init = ParamVector::new(grid_pos, grid_gain);
    match bounds::pseudo_true(&y, model, &init) {
        Ok(fit) => Ok(MlFit {
            position: fit.params.ue_position,
            gain: fit.params.gain(),
            residual_norm: fit.residual_norm,
            converged: true,
        }),
        Err(BoundsError::NonConvergence { best, residual, .. }) => {
            // fall back to whichever iterate explains the data better
            if residual * residual <= grid_res2 {
                Ok(MlFit {
                    position: best.ue_position,
                    gain: best.gain(),
                    residual_norm: residual,
                    converged: false,
                })
            } else {
                Ok(MlFit {
                    position: grid_pos,
                    gain: grid_gain,
                    residual_norm: grid_res2.sqrt(),
                    converged: false,
                })
            }
        }
        Err(e) => Err(e.into()),
    }
}

// ── joint localization and failure diagnosis ────────────────────────────────

/// Configuration of the alternating diagnosis loop.
#[derive(Debug, Clone, Copy)]
pub struct JlfdConfig {
    /// Maximum number of localize→diagnose rounds. Each round changes the
    /// estimated mask by at most one element, so the budget should comfortably
    /// exceed the expected failure count.
    pub budget: usize,
    /// Family-wise false-alarm rate of the per-element failure tests,
    /// Bonferroni-split across elements. `0` disables detection entirely,
    /// reducing the estimator to the failure-agnostic one.
    pub family_false_alarm: f64,
}

impl Default for JlfdConfig {
    fn default() -> Self {
        Self {
            budget: 24,
            family_false_alarm: 0.01,
        }
    }
}

/// Output of [`jlfd`].
#[derive(Debug, Clone)]
pub struct JlfdResult {
    pub position: Vec3,
    pub gain: C64,
    /// Estimated stuck set. The support (which elements failed) is the
    /// identifiable quantity; the per-element coefficients are the
    /// minimum-norm representatives of the aggregate stuck contribution,
    /// which is all a narrowband single-receiver observation determines
    /// (every stuck element excites the same transmission-constant signal
    /// direction).
    pub mask: FailureMask,
    /// Alternating rounds used (≤ the configured budget).
    pub iterations: usize,
    pub residual_norm: f64,
    /// `false` when the budget ran out before the mask stabilized.
    pub stabilized: bool,
}

/// Rebuilds a cascade model with different profiles, keeping every other
/// setting. Coupled operators are rejected: per-element diagnosis needs the
/// diagonal narrowband cascade.
fn with_profiles(
    model: &CascadeModel,
    profiles: RisProfile,
) -> Result<CascadeModel, EstimatorError> {
    if model.coupled_operators.is_some() {
        return Err(EstimatorError::InvalidParameter(
            "failure diagnosis requires a diagonal (uncoupled) cascade",
        ));
    }
    Ok(CascadeModel::new(model.bs, model.ris, model.spec, profiles)?
        .with_amplitude(model.amplitude)
        .with_phase_model(model.phase_model)
        .with_rx_offsets(model.rx_offsets.clone()))
}

/// Joint fit of position, gain, and the stuck coefficients of a fixed
/// flagged set.
///
/// At a fixed position the mean is exactly linear in `(g, g·c_e)` — gain
/// times the failure-free-silenced response plus one basis column per
/// flagged element — so those are profiled out by linear least squares and
/// damped Gauss–Newton runs over position alone. This avoids the slow
/// zigzag of alternating (position, gain) and coefficient refits, which are
/// strongly coupled.
struct JointFit {
    position: Vec3,
    gain: C64,
    /// Stuck coefficient per flagged element, aligned with the input set.
    coeffs: Vec<C64>,
    residual_norm: f64,
    converged: bool,
}

fn joint_fit(
    y: &DVector<C64>,
    model: &CascadeModel,
    commanded: &RisProfile,
    flagged: &[usize],
    p0: Vec3,
) -> Result<JointFit, EstimatorError> {
    let silenced = FailureMask::from_stuck({
        let mut v = vec![None; commanded.n_elements()];
        for &e in flagged {
            v[e] = Some(C64::new(0.0, 0.0));
        }
        v
    })?;
    let model0 = with_profiles(model, apply_failure(commanded, &silenced)?)?;
    let ncols = 1 + flagged.len();

    // residual and linear coefficients at a candidate position
    let eval = |p: Vec3| -> Result<(DVector<C64>, DVector<C64>), EstimatorError> {
        let m0 = model0.mean(&ParamVector::new(p, C64::new(1.0, 0.0)))?;
        let basis = model0.element_responses(p)?;
        let m_rows = m0.len();
        let mut a = DMatrix::from_element(m_rows, ncols, C64::new(0.0, 0.0));
        a.set_column(0, &m0);
        for (j, &e) in flagged.iter().enumerate() {
            for row in 0..m_rows {
                a[(row, 1 + j)] = basis[(row, e)];
            }
        }
        // column-scaled normal equations: the silenced-mean column is ~N
        // times larger than a single-element column
        let scales: Vec<f64> = (0..ncols)
            .map(|c| a.column(c).norm().max(1e-300))
            .collect();
        for (c, s) in scales.iter().enumerate() {
            let col = a.column(c) / C64::from(*s);
            a.set_column(c, &col);
        }
        // minimum-norm least squares: the stuck columns are collinear in a
        // narrowband single-receiver observation (each is the same
        // transmission-constant vector scaled by the element response), so
        // the normal system is singular whenever two or more elements are
        // flagged and only the aggregate coefficient is identifiable
        let gram = a.adjoint() * &a;
        let rhs = a.adjoint() * y;
        let svd = nalgebra::SVD::new(gram, true, true);
        let smax = svd.singular_values.max();
        let mut beta = svd.solve(&rhs, smax * 1e-12).map_err(|_| {
            EstimatorError::InvalidParameter("joint stuck-fit system is degenerate")
        })?;
        let resid = y - &a * &beta;
        for (c, s) in scales.iter().enumerate() {
            beta[c] /= C64::from(*s);
        }
        Ok((resid, beta))
    };

    let mut p = p0;
    let (mut resid, mut beta) = eval(p)?;
    let mut cost = resid.norm_squared();
    let mut converged = false;
    let mut lambda = 0.0_f64;
    for _ in 0..40 {
        // profiled-residual Jacobian over position (forward differences —
        // the linear parameters re-profile at every probe)
        let h = 1e-7;
        let mut jtj = Mat3::zeros();
        let mut jtr = Vec3::zeros();
        let mut cols: Vec<DVector<C64>> = Vec::with_capacity(3);
        for axis in 0..3 {
            let mut pp = p;
            pp[axis] += h;
            let (rp, _) = eval(pp)?;
            cols.push((rp - &resid) / C64::from(h));
        }
        for (i, ci) in cols.iter().enumerate() {
            for (j, cj) in cols.iter().enumerate().skip(i) {
                let v = ci.dotc(cj).re;
                jtj[(i, j)] = v;
                jtj[(j, i)] = v;
            }
            jtr[i] = cols[i].dotc(&resid).re;
        }
        let scale = jtj.trace().max(1e-300) / 3.0;
        let mut accepted = false;
        for _ in 0..8 {
            let damped = jtj + Mat3::identity() * (lambda * scale);
            let Some(step) = damped.lu().solve(&(-jtr)) else {
                lambda = (lambda * 10.0).max(1e-6);
                continue;
            };
            let p_new = p + step;
            let (r_new, b_new) = eval(p_new)?;
            let c_new = r_new.norm_squared();
            if c_new <= cost {
                let rel_drop = (cost - c_new) / cost.max(1e-300);
                p = p_new;
                resid = r_new;
                beta = b_new;
                cost = c_new;
                lambda = (lambda / 10.0).max(0.0);
                accepted = true;
                if rel_drop < 1e-14 || step.norm() < 1e-11 {
                    converged = true;
                }
                break;
            }
            lambda = (lambda * 10.0).max(1e-6);
        }
        if !accepted {
            // eight rejected damped steps: the gradient is numerically zero
            converged = true;
        }
        if converged {
            break;
        }
    }

    let gain = beta[0];
    let coeffs = flagged
        .iter()
        .enumerate()
        .map(|(j, _)| {
            if gain.norm() > 1e-300 {
                beta[1 + j] / gain
            } else {
                C64::new(0.0, 0.0)
            }
        })
        .collect();
    Ok(JointFit {
        position: p,
        gain,
        coeffs,
        residual_norm: cost.sqrt(),
        converged,
    })
}

/// [`joint_fit`] restarted at wavelength-scale offsets along the
/// array→position range direction. The likelihood over position has local
/// minima spaced roughly one wavelength apart in path length, and a fit
/// warm-started from a biased early round can settle one basin over; range
/// restarts recover the global basin at fixed flagged support.
fn joint_fit_multistart(
    y: &DVector<C64>,
    model: &CascadeModel,
    commanded: &RisProfile,
    flagged: &[usize],
    p0: Vec3,
) -> Result<JointFit, EstimatorError> {
    let lam = crate::C0 / model.spec.carrier_hz;
    let radial = p0 - model.ris.centroid();
    let u = if radial.norm() > 1e-12 {
        radial / radial.norm()
    } else {
        Vec3::new(0.0, 0.0, 1.0)
    };
    let mut best: Option<JointFit> = None;
    for o in [0.0, 0.25, -0.25, 0.5, -0.5, 0.75, -0.75, 1.0, -1.0] {
        let jf = joint_fit(y, model, commanded, flagged, p0 + u * (o * lam))?;
        if best
            .as_ref()
            .is_none_or(|b| jf.residual_norm < b.residual_norm)
        {
            best = Some(jf);
        }
    }
    best.ok_or(EstimatorError::InvalidParameter("no joint-fit start succeeded"))
}

/// Packs per-element stuck estimates into a [`FailureMask`], clamping each
/// fitted coefficient onto the passive disc (a truly stuck element is
/// passive; noise can push the unconstrained least-squares fit slightly
/// outside).
fn clamped_mask(stuck: &[Option<C64>]) -> Result<FailureMask, EstimatorError> {
    FailureMask::from_stuck(
        stuck
            .iter()
            .map(|s| {
                s.map(|c| {
                    let n = c.norm();
                    if n > 1.0 {
                        c / C64::from(n)
                    } else {
                        c
                    }
                })
            })
            .collect(),
    )
    .map_err(Into::into)
}

/// Per-element generalized-likelihood test against the current fit.
///
/// For each element the commanded hypothesis (coefficient `ω_{t,n}` as
/// commanded) is compared with the stuck hypothesis (one unknown complex
/// coefficient `c_n` constant across transmissions, fitted by least squares).
/// Writing `v_n` for the part of the commanded contribution that the stuck
/// subspace cannot represent, the residual-reduction statistic under a
/// healthy element is `‖P_n e‖² − 2Re⟨e, v_n⟩ − ‖v_n‖²` with `e` the noise,
/// so a union bound over the exponential tail of `‖P_n e‖²` (one complex
/// dimension) and the Gaussian tail of `2Re⟨e, v_n⟩` keeps the false-alarm
/// probability of the threshold
/// `γ_n = max(0, z_{1−α/2}·√(2σ²)·‖v_n‖ − ‖v_n‖²) + σ²·ln(2/α)`
/// below `α`; `α` is the family rate divided by the element count.
struct FailureSweep {
    /// `Δ_n − γ_n` per element: positive means the stuck hypothesis wins.
    exceedance: Vec<f64>,
    /// Least-squares stuck coefficient per element.
    stuck: Vec<C64>,
}

#[allow(clippy::too_many_arguments)]
fn failure_sweep(
    y: &DVector<C64>,
    model_fit: &CascadeModel,
    commanded: &RisProfile,
    working: &RisProfile,
    position: Vec3,
    gain: C64,
    noise_variance: f64,
    per_element_alpha: f64,
) -> Result<FailureSweep, EstimatorError> {
    let basis = model_fit.element_responses(position)?;
    let n = commanded.n_elements();
    let tt = commanded.n_transmissions();
    let rr = model_fit.n_rx();
    let m_rows = basis.nrows();
    let mu = model_fit.mean(&ParamVector::new(position, gain))?;
    let r = y - &mu;

    let z = normal_quantile(1.0 - per_element_alpha / 2.0);
    let chi_term = noise_variance * (2.0 / per_element_alpha).ln();

    let t_of_row = |row: usize| (row / rr) % tt;
    let mut exceedance = vec![f64::NEG_INFINITY; n];
    let mut stuck = vec![C64::new(0.0, 0.0); n];
    for e in 0..n {
        // u = r + current element-e contribution is the residual with the
        // element removed entirely; all norms and inner products against
        // the stuck direction s and the commanded contribution h accumulate
        // in one pass without materializing u
        let mut s_norm2 = 0.0;
        let mut u_norm2 = 0.0;
        let mut su = C64::new(0.0, 0.0); // ⟨s, u⟩ = sᴴu
        let mut sh = C64::new(0.0, 0.0); // ⟨s, h⟩
        let mut h_norm2 = 0.0;
        let mut uh = C64::new(0.0, 0.0); // ⟨u, h⟩
        for row in 0..m_rows {
            let t = t_of_row(row);
            let s = gain * basis[(row, e)];
            let cur = s * working.transmission(t)[e];
            let h = s * commanded.transmission(t)[e];
            let ui = r[row] + cur;
            s_norm2 += s.norm_sqr();
            u_norm2 += ui.norm_sqr();
            su += s.conj() * ui;
            sh += s.conj() * h;
            h_norm2 += h.norm_sqr();
            uh += ui.conj() * h;
        }
        if s_norm2 <= 0.0 {
            continue; // dead basis direction: nothing to test
        }
        // ‖u − h‖² without materializing the difference
        let resid_commanded = (u_norm2 - 2.0 * uh.re + h_norm2).max(0.0);
        let c_hat = su / C64::from(s_norm2);
        let resid_stuck = (u_norm2 - su.norm_sqr() / s_norm2).max(0.0);
        let reduction = resid_commanded - resid_stuck;
        let v_norm2 = (h_norm2 - sh.norm_sqr() / s_norm2).max(0.0);
        let gauss_term =
            z * (2.0 * noise_variance * v_norm2).sqrt() - v_norm2;
        let threshold = gauss_term.max(0.0) + chi_term;
        exceedance[e] = reduction - threshold;
        stuck[e] = c_hat;
    }
    Ok(FailureSweep { exceedance, stuck })
}

/// Joint localization and failure diagnosis: alternates a localization fit
/// with per-element stuck-coefficient hypothesis tests until the estimated
/// mask is stable or the round budget is exhausted.
///
/// Each round changes the mask support by at most one element — the one with
/// the most significant disagreement between its test decision and its
/// current state — and then relocalizes. Applying one change at a time keeps
/// the position fit anchored: an early biased fit inflates every element's
/// stuck-hypothesis score (the free coefficient absorbs the common position
/// error), so committing the whole sweep at once would flag far more
/// elements than have failed. Flagged elements are re-tested every round and
/// dropped once a better fit no longer supports them.
///
/// `model` is the failure-free assumed cascade (narrowband, diagonal, ideal
/// element amplitudes — the stuck hypothesis estimates realized coefficients
/// directly). The first round localizes from the grid; later rounds refine
/// from the previous fit.
pub fn jlfd(
    obs: &Observation,
    model: &CascadeModel,
    grid: &SearchGrid,
    config: &JlfdConfig,
) -> Result<JlfdResult, EstimatorError> {
    if config.budget == 0 {
        return Err(EstimatorError::InvalidParameter(
            "diagnosis budget must be at least 1",
        ));
    }
    if !(0.0..1.0).contains(&config.family_false_alarm) {
        return Err(EstimatorError::InvalidParameter(
            "family false-alarm rate must lie in [0, 1)",
        ));
    }
    if !model.amplitude.is_ideal() {
        return Err(EstimatorError::InvalidParameter(
            "failure diagnosis assumes ideal element amplitudes",
        ));
    }
    let commanded = model.profiles.clone();
    let n = commanded.n_elements();
    let alpha = config.family_false_alarm / n as f64;
    let y = observation_vector(obs);
    let sigma2 = obs.noise_variance;
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(EstimatorError::InvalidParameter(
            "observation noise variance must be positive",
        ));
    }

    let mut mask: Vec<Option<C64>> = vec![None; n];
    let mut fit: Option<MlFit> = None;
    let mut rounds = 0;
    let mut stabilized = false;
    while rounds < config.budget {
        rounds += 1;
        let flagged: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.map(|_| i))
            .collect();

        // fit position, gain, and (jointly) the flagged coefficients
        let new_fit = if flagged.is_empty() {
            let model_c = with_profiles(model, commanded.clone())?;
            match &fit {
                None => ml_localize(obs, &model_c, grid)?,
                Some(prev) => {
                    let init = ParamVector::new(prev.position, prev.gain);
                    match bounds::pseudo_true(&y, &model_c, &init) {
                        Ok(f) => MlFit {
                            position: f.params.ue_position,
                            gain: f.params.gain(),
                            residual_norm: f.residual_norm,
                            converged: true,
                        },
                        Err(BoundsError::NonConvergence { best, residual, .. }) => MlFit {
                            position: best.ue_position,
                            gain: best.gain(),
                            residual_norm: residual,
                            converged: false,
                        },
                        Err(e) => return Err(e.into()),
                    }
                }
            }
        } else {
            let init_p = fit.as_ref().map_or(grid.center, |f| f.position);
            let jf = joint_fit_multistart(&y, model, &commanded, &flagged, init_p)?;
            for (j, &e) in flagged.iter().enumerate() {
                mask[e] = Some(jf.coeffs[j]);
            }
            MlFit {
                position: jf.position,
                gain: jf.gain,
                residual_norm: jf.residual_norm,
                converged: jf.converged,
            }
        };

        let prof = apply_failure(&commanded, &clamped_mask(&mask)?)?;
        let model_w = with_profiles(model, prof.clone())?;
        let sweep = failure_sweep(
            &y,
            &model_w,
            &commanded,
            &prof,
            new_fit.position,
            new_fit.gain,
            sigma2,
            alpha,
        )?;
        fit = Some(new_fit);

        // most significant disagreement between decision and current state
        let mut change: Option<(usize, f64)> = None;
        for (e, slot) in mask.iter().enumerate() {
            let is_flagged = slot.is_some();
            let wants = sweep.exceedance[e] > 0.0;
            if wants != is_flagged {
                let score = sweep.exceedance[e].abs();
                if change.as_ref().is_none_or(|(_, s)| score > *s) {
                    change = Some((e, score));
                }
            }
        }
        match change {
            None => {
                stabilized = true;
                break;
            }
            Some((e, _)) => {
                mask[e] = if mask[e].is_some() {
                    None
                } else {
                    Some(sweep.stuck[e])
                };
            }
        }
    }

    let mut fit = fit.expect("at least one round runs");
    // final refit at the reported support with range restarts: the in-loop
    // single-start fits can settle one wavelength basin away from the global
    // minimum, and a toggle in the last round leaves the fit one mask behind
    let flagged: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|_| i))
        .collect();
    if !flagged.is_empty() {
        let jf = joint_fit_multistart(&y, model, &commanded, &flagged, fit.position)?;
        if jf.residual_norm <= fit.residual_norm {
            for (j, &e) in flagged.iter().enumerate() {
                mask[e] = Some(jf.coeffs[j]);
            }
            fit = MlFit {
                position: jf.position,
                gain: jf.gain,
                residual_norm: jf.residual_norm,
                converged: jf.converged,
            };
        }
    }

    Ok(JlfdResult {
        position: fit.position,
        gain: fit.gain,
        mask: clamped_mask(&mask)?,
        iterations: rounds,
        residual_norm: fit.residual_norm,
        stabilized,
    })
}

// ── anchor-based pose calibration ───────────────────────────────────────────

/// One anchor's measurement of the BS–array–anchor geometry: the
/// time-of-arrival of the reflected path, and optionally the departure
/// direction from the array expressed in the array frame.
#[derive(Debug, Clone, Copy)]
pub struct AnchorMeasurement {
    /// Index into the anchor pose list.
    pub anchor_id: usize,
    /// Time of arrival over the BS–array–anchor path [s]; must be positive.
    pub toa: f64,
    /// Departure direction in the array frame, `(azimuth, elevation)` [rad],
    /// when the anchor can measure angles.
    pub aod: Option<(f64, f64)>,
    /// Measurement noise standard deviations: TOA [s] and AOD [rad].
    /// Zero means exact.
    pub noise_std_toa: f64,
    pub noise_std_aod: f64,
}

/// Unit direction for an `(azimuth, elevation)` pair in the array frame.
fn aod_direction(az: f64, el: f64) -> Vec3 {
    Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
}

/// `(azimuth, elevation)` of a unit direction.
fn direction_angles(d: Vec3) -> (f64, f64) {
    (d.y.atan2(d.x), d.z.clamp(-1.0, 1.0).asin())
}

fn wrap_angle(a: f64) -> f64 {
    let mut x = a % std::f64::consts::TAU;
    if x > std::f64::consts::PI {
        x -= std::f64::consts::TAU;
    }
    if x < -std::f64::consts::PI {
        x += std::f64::consts::TAU;
    }
    x
}

/// Forward-simulates anchor measurements for a known array pose. Noise draws
/// are deterministic per seed; zero stds give exact measurements. Every
/// anchor reports both TOA and AOD — strip fields afterwards to model less
/// capable anchors.
pub fn simulate_anchor_measurements(
    array: &Pose,
    bs: &Pose,
    anchors: &[Pose],
    noise_std_toa: f64,
    noise_std_aod: f64,
    rng_seed: u64,
) -> Vec<AnchorMeasurement> {
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    let std_n = Normal::new(0.0, 1.0).expect("unit normal");
    anchors
        .iter()
        .enumerate()
        .map(|(id, a)| {
            let d1 = (bs.position - array.position).norm();
            let d2 = (a.position - array.position).norm();
            let toa = (d1 + d2) / C0 + noise_std_toa * std_n.sample(&mut rng);
            let local = array.rotation.transpose() * (a.position - array.position);
            let (az, el) = direction_angles(local / local.norm());
            let aod = (
                wrap_angle(az + noise_std_aod * std_n.sample(&mut rng)),
                el + noise_std_aod * std_n.sample(&mut rng),
            );
            AnchorMeasurement {
                anchor_id: id,
                toa,
                aod: Some(aod),
                noise_std_toa,
                noise_std_aod,
            }
        })
        .collect()
}

/// Smallest rotation angle between two rotation matrices [rad].
pub fn rotation_angle(a: &Mat3, b: &Mat3) -> f64 {
    let r = a.transpose() * b;
    let c = ((r[(0, 0)] + r[(1, 1)] + r[(2, 2)] - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos()
}

/// Gauss–Newton position fit on the TOA path-length residuals, in metres.
fn toa_position_fit(
    start: Vec3,
    bs: Vec3,
    toa_set: &[(Vec3, f64, f64)], // (anchor position, range = c·toa, weight)
) -> (Vec3, f64) {
    let mut p = start;
    let mut cost = f64::INFINITY;
    for _ in 0..100 {
        let mut jt_j = Mat3::zeros();
        let mut jt_r = Vec3::zeros();
        let mut c = 0.0;
        for &(a, range, w) in toa_set {
            let d1v = p - bs;
            let d2v = p - a;
            let (d1, d2) = (d1v.norm(), d2v.norm());
            if d1 == 0.0 || d2 == 0.0 {
                return (p, f64::INFINITY);
            }
            let res = w * (d1 + d2 - range);
            let grad = (d1v / d1 + d2v / d2) * w;
            jt_j += grad * grad.transpose();
            jt_r += grad * res;
            c += res * res;
        }
        cost = c;
        // small Levenberg damping keeps the step sane near degeneracy
        let damped = jt_j + Mat3::identity() * (1e-12 * jt_j.trace().max(1e-300));
        let Some(step) = damped.lu().solve(&(-jt_r)) else {
            break;
        };
        p += step;
        if step.norm() < 1e-12 * (1.0 + p.norm()) {
            break;
        }
    }
    (p, cost)
}

/// Orientation from AOD direction pairs by the orthogonal Procrustes
/// solution: rotation R maximizing Σ wᵢ·⟨wᵢ_world, R·mᵢ_local⟩.
fn wahba_rotation(pairs: &[(Vec3, Vec3, f64)]) -> Mat3 {
    let mut h = Mat3::zeros();
    for &(world, local, w) in pairs {
        h += w * world * local.transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd requested");
    let vt = svd.v_t.expect("svd requested");
    let d = (u * vt).determinant();
    let mut s = Mat3::identity();
    s[(2, 2)] = d.signum();
    u * s * vt
}

/// Joint 6-parameter polish: Gauss–Newton on stacked TOA and AOD residuals
/// over (position, z-y-x rotation offsets applied to the current rotation).
fn joint_polish(
    mut p: Vec3,
    mut rot: Mat3,
    bs: Vec3,
    toa_set: &[(Vec3, f64, f64)],
    aod_set: &[(Vec3, f64, f64, f64)], // (anchor position, az, el, weight)
) -> (Vec3, Mat3) {
    let residuals = |p: Vec3, rot: &Mat3| -> DVector<f64> {
        let mut out = Vec::with_capacity(toa_set.len() + 2 * aod_set.len());
        for &(a, range, w) in toa_set {
            out.push(w * ((p - bs).norm() + (p - a).norm() - range));
        }
        for &(a, az, el, w) in aod_set {
            let local = rot.transpose() * (a - p);
            let (paz, pel) = direction_angles(local / local.norm());
            out.push(w * wrap_angle(paz - az));
            out.push(w * (pel - el));
        }
        DVector::from_vec(out)
    };
    let apply = |p: Vec3, rot: &Mat3, d: &SVector<f64, 6>| -> (Vec3, Mat3) {
        let dr = nalgebra::Rotation3::from_euler_angles(d[3], d[4], d[5]);
        (p + Vec3::new(d[0], d[1], d[2]), dr.into_inner() * rot)
    };

    for _ in 0..30 {
        let r0 = residuals(p, &rot);
        let m = r0.len();
        let mut j = DMatrix::zeros(m, 6);
        for c in 0..6 {
            let h = 1e-7;
            let mut dp = SVector::<f64, 6>::zeros();
            dp[c] = h;
            let (pp, rp) = apply(p, &rot, &dp);
            dp[c] = -h;
            let (pm, rm) = apply(p, &rot, &dp);
            let col = (residuals(pp, &rp) - residuals(pm, &rm)) / (2.0 * h);
            j.set_column(c, &col);
        }
        let jtj = j.transpose() * &j;
        let jtr = j.transpose() * &r0;
        let damped = &jtj
            + DMatrix::identity(6, 6) * (1e-12 * jtj.trace().max(1e-300));
        let Some(step) = damped.lu().solve(&(-&jtr)) else {
            break;
        };
        let sv = SVector::<f64, 6>::from_column_slice(step.as_slice());
        let (pn, rn) = apply(p, &rot, &sv);
        if residuals(pn, &rn).norm_squared() <= r0.norm_squared() {
            p = pn;
            rot = rn;
        } else {
            break;
        }
        if sv.norm() < 1e-14 {
            break;
        }
    }
    (p, rot)
}

/// Calibrates an array pose from anchor measurements: least-squares position
/// from the BS–array–anchor path lengths (multi-start Gauss–Newton),
/// orientation from the departure directions (Procrustes fit), then a joint
/// polish over all six pose parameters.
///
/// Requires at least 3 non-collinear anchors with TOA and at least 2 anchors
/// with non-parallel AOD; anything less is rejected with an error naming the
/// missing observable.
pub fn ris_pose_calibrate(
    measurements: &[AnchorMeasurement],
    bs: &Pose,
    anchors: &[Pose],
) -> Result<Pose, EstimatorError> {
    for m in measurements {
        if m.anchor_id >= anchors.len() {
            return Err(EstimatorError::UnknownAnchor {
                id: m.anchor_id,
                n_anchors: anchors.len(),
            });
        }
        if !(m.toa > 0.0 && m.toa.is_finite()) {
            return Err(EstimatorError::InvalidParameter(
                "time of arrival must be positive and finite",
            ));
        }
        if let Some((az, el)) = m.aod {
            if !(az.is_finite() && el.is_finite() && el.abs() <= std::f64::consts::FRAC_PI_2) {
                return Err(EstimatorError::InvalidParameter(
                    "departure angles must be finite with |elevation| ≤ π/2",
                ));
            }
        }
    }

    // — position observability —
    let toa_set: Vec<(Vec3, f64, f64)> = measurements
        .iter()
        .map(|m| {
            let w = 1.0 / (C0 * m.noise_std_toa).max(1e-9);
            (anchors[m.anchor_id].position, C0 * m.toa, w)
        })
        .collect();
    let toa_anchors: Vec<Vec3> = {
        let mut ids: Vec<usize> = measurements.iter().map(|m| m.anchor_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.iter().map(|&i| anchors[i].position).collect()
    };
    if toa_anchors.len() < 3 {
        return Err(EstimatorError::InsufficientToa {
            got: toa_anchors.len(),
        });
    }
    let centroid: Vec3 =
        toa_anchors.iter().sum::<Vec3>() / toa_anchors.len() as f64;
    let mut scatter = Mat3::zeros();
    for a in &toa_anchors {
        let d = a - centroid;
        scatter += d * d.transpose();
    }
    let eig = nalgebra::SymmetricEigen::new(scatter);
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    if ev[1] <= 1e-12 * ev[2].max(1e-300) {
        return Err(EstimatorError::CollinearToaAnchors);
    }

    // — orientation observability —
    let aod_ms: Vec<&AnchorMeasurement> =
        measurements.iter().filter(|m| m.aod.is_some()).collect();
    if aod_ms.len() < 2 {
        return Err(EstimatorError::InsufficientAod { got: aod_ms.len() });
    }
    let dirs: Vec<Vec3> = aod_ms
        .iter()
        .map(|m| {
            let (az, el) = m.aod.expect("filtered");
            aod_direction(az, el)
        })
        .collect();
    let parallel = dirs
        .iter()
        .skip(1)
        .all(|d| d.cross(&dirs[0]).norm() <= 1e-9);
    if parallel {
        return Err(EstimatorError::ParallelAodDirections);
    }

    // — stage 1: multi-start position fit —
    let spread = toa_anchors
        .iter()
        .map(|a| (a - centroid).norm())
        .fold(0.0_f64, f64::max)
        .max(1.0);
    let mut starts = vec![
        centroid,
        centroid + (bs.position - centroid) * 0.5,
        bs.position,
    ];
    for axis in 0..3 {
        let mut e = Vec3::zeros();
        e[axis] = spread;
        starts.push(centroid + e);
        starts.push(centroid - e);
    }
    let mut best: Option<(f64, Vec3)> = None;
    for s in starts {
        let (p, cost) = toa_position_fit(s, bs.position, &toa_set);
        if cost.is_finite() && best.as_ref().is_none_or(|(b, _)| cost < *b) {
            best = Some((cost, p));
        }
    }
    let (_, p_hat) =
        best.ok_or(EstimatorError::InvalidParameter("position fit failed"))?;

    // — stage 2: orientation from directions —
    let pairs: Vec<(Vec3, Vec3, f64)> = aod_ms
        .iter()
        .zip(dirs.iter())
        .map(|(m, local)| {
            let w = 1.0 / m.noise_std_aod.max(1e-9);
            let world = anchors[m.anchor_id].position - p_hat;
            (world / world.norm(), *local, w)
        })
        .collect();
    let r_hat = wahba_rotation(&pairs);

    // — stage 3: joint polish —
    let aod_set: Vec<(Vec3, f64, f64, f64)> = aod_ms
        .iter()
        .map(|m| {
            let (az, el) = m.aod.expect("filtered");
            let w = 1.0 / m.noise_std_aod.max(1e-9);
            (anchors[m.anchor_id].position, az, el, w)
        })
        .collect();
    let (p, rot) = joint_polish(p_hat, r_hat, bs.position, &toa_set, &aod_set);
    Ok(Pose::new(p, orthonormalize(rot))?)
}

/// Projects a near-rotation onto the closest proper rotation (polar
/// decomposition via SVD), guarding `Pose::new`'s orthonormality check
/// against accumulated rounding.
fn orthonormalize(r: Mat3) -> Mat3 {
    let svd = r.svd(true, true);
    let u = svd.u.expect("svd requested");
    let vt = svd.v_t.expect("svd requested");
    let d = (u * vt).determinant();
    let mut s = Mat3::identity();
    s[(2, 2)] = d.signum();
    u * s * vt
}

// ── normal quantile ─────────────────────────────────────────────────────────

/// Inverse standard-normal CDF (Acklam's rational approximation, absolute
/// error below 1.2e-9 over (0, 1)). Returns ±∞ at the endpoints.
fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.38357751867269e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

// ── tests ───────────────────────────────────────────────────────────────────
