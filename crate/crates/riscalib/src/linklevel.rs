//! Communication-side metrics for a RIS-aided downlink.
//!
//! The localization machinery answers "how well can the UE be placed"; this
//! module answers the companion question "what does the data link get out of
//! it". It covers four pieces:
//!
//! * [`energy_split`] — dividing a total energy budget between pilot and
//!   data transmissions ([`TradeoffPlan`]);
//! * [`pilot_beam_select`] — drawing candidate positional beams from a prior
//!   [`UncertaintyRegion`] and keeping the one with the highest true
//!   received power;
//! * [`comm_rate`] — the achievable data rate of a plan/beam pair;
//! * [`spectral_efficiency`] — SIMO spectral efficiency of a mutually
//!   coupled surface, optimized against an *assumed* scattering matrix and
//!   evaluated on the *true* one.
//!
//! Together these expose the pilot/data trade-off: more pilot energy tightens
//! the position estimate but starves the data phase, and hardware knowledge
//! (coupling calibration) moves the achievable rate without touching the
//! energy budget.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::channel::{
    apply_failure, noise_variance, positional_beam, CascadeModel, ChannelError, FailureMask,
    RisProfile, SignalSpec,
};
use crate::coupling::{coupled_ris_operator, CouplingError, ScatterMatrix};
use crate::{C64, Vec3};

// ── errors ──────────────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum LinkError {
    /// A scalar argument violated its documented domain.
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    /// The pilot phase alone overdraws the energy budget, so no non-negative
    /// data power exists.
    #[error(
        "infeasible energy split: pilots consume {pilot_energy:.6} W·transmissions \
         but the total budget is {budget:.6}"
    )]
    InfeasibleSplit { pilot_energy: f64, budget: f64 },
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Coupling(#[from] CouplingError),
}

// ── pilot/data energy split ─────────────────────────────────────────────────

/// Allocation of `t_total` transmissions and a total energy budget between a
/// pilot phase (`t_pilot` uses at `p_pilot_w` watts) and a data phase (the
/// remaining uses at `p_data_w` watts).
///
/// Invariants (checked by [`TradeoffPlan::validate`]): the data phase has
/// non-negative duration, both powers are non-negative, and
/// `t_pilot·p_pilot_w + t_data·p_data_w ≤ e_total + 1e-9`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TradeoffPlan {
    pub t_total: f64,
    pub t_pilot: f64,
    pub p_pilot_w: f64,
    pub p_data_w: f64,
    pub e_total: f64,
}

impl TradeoffPlan {
    /// Transmissions left for the data phase.
    pub fn t_data(&self) -> f64 {
        self.t_total - self.t_pilot
    }

    /// Energy actually spent by the plan, `t_pilot·p_pilot_w + t_data·p_data_w`.
    pub fn energy_spent(&self) -> f64 {
        self.t_pilot * self.p_pilot_w + self.t_data() * self.p_data_w
    }

    pub fn validate(&self) -> Result<(), LinkError> {
        let fields = [
            self.t_total,
            self.t_pilot,
            self.p_pilot_w,
            self.p_data_w,
            self.e_total,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(LinkError::InvalidParameter(
                "trade-off plan fields must be finite",
            ));
        }
        if self.t_total <= 0.0 {
            return Err(LinkError::InvalidParameter(
                "total transmission count must be positive",
            ));
        }
        if self.t_pilot < 0.0 || self.t_data() < 0.0 {
            return Err(LinkError::InvalidParameter(
                "pilot and data phases must both have non-negative duration",
            ));
        }
        if self.p_pilot_w < 0.0 || self.p_data_w < 0.0 {
            return Err(LinkError::InvalidParameter(
                "pilot and data powers must be non-negative",
            ));
        }
        if self.energy_spent() > self.e_total + 1e-9 {
            return Err(LinkError::InvalidParameter(
                "plan exceeds its total energy budget",
            ));
        }
        Ok(())
    }
}

/// Splits the energy budget: the pilot phase takes `t_pilot·p_pilot_w`, and
/// the data phase absorbs every remaining joule-equivalent,
/// `p_data_w = (e_total − t_pilot·p_pilot_w)/(t_total − t_pilot)`, so the
/// emitted plan meets the budget with equality.
///
/// Requires `0 < t_pilot < t_total` and `p_pilot_w ≥ 0`. A pilot phase that
/// overdraws the budget (negative data power) is rejected with
/// [`LinkError::InfeasibleSplit`]; the exact boundary `p_pilot_w =
/// e_total/t_pilot` yields zero data power.
pub fn energy_split(
    t_total: f64,
    t_pilot: f64,
    p_pilot_w: f64,
    e_total: f64,
) -> Result<TradeoffPlan, LinkError> {
    if ![t_total, t_pilot, p_pilot_w, e_total]
        .iter()
        .all(|v| v.is_finite())
    {
        return Err(LinkError::InvalidParameter(
            "energy split arguments must be finite",
        ));
    }
    if !(t_pilot > 0.0 && t_pilot < t_total) {
        return Err(LinkError::InvalidParameter(
            "pilot transmissions must satisfy 0 < t_pilot < t_total",
        ));
    }
    if p_pilot_w < 0.0 {
        return Err(LinkError::InvalidParameter(
            "pilot power must be non-negative",
        ));
    }
    if e_total < 0.0 {
        return Err(LinkError::InvalidParameter(
            "energy budget must be non-negative",
        ));
    }
    let pilot_energy = t_pilot * p_pilot_w;
    let slack = e_total - pilot_energy;
    // Absolute rounding guard so the exact boundary p_pilot = e_total/t_pilot
    // lands on zero data power instead of a spurious infeasibility.
    let tol = 1e-9 * e_total.abs().max(1.0);
    if slack < -tol {
        return Err(LinkError::InfeasibleSplit {
            pilot_energy,
            budget: e_total,
        });
    }
    let p_data_w = slack.max(0.0) / (t_total - t_pilot);
    Ok(TradeoffPlan {
        t_total,
        t_pilot,
        p_pilot_w,
        p_data_w,
        e_total,
    })
}

// ── pilot beam selection ────────────────────────────────────────────────────

/// Axis-aligned box of prior knowledge about the UE position. Zero half-widths
/// are allowed (a collapsed region is a known point).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UncertaintyRegion {
    pub center: Vec3,
    pub half_widths: Vec3,
}

impl UncertaintyRegion {
    pub fn new(center: Vec3, half_widths: Vec3) -> Result<Self, LinkError> {
        let r = Self {
            center,
            half_widths,
        };
        r.validate()?;
        Ok(r)
    }

    /// Region collapsed to a single point.
    pub fn point(center: Vec3) -> Self {
        Self {
            center,
            half_widths: Vec3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<(), LinkError> {
        if !(self.center.iter().all(|v| v.is_finite())
            && self.half_widths.iter().all(|v| v.is_finite()))
        {
            return Err(LinkError::InvalidParameter(
                "uncertainty region fields must be finite",
            ));
        }
        if self.half_widths.iter().any(|&v| v < 0.0) {
            return Err(LinkError::InvalidParameter(
                "uncertainty region half-widths must be non-negative",
            ));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> Vec3 {
        let mut p = self.center;
        for i in 0..3 {
            let u: f64 = rng.gen();
            p[i] += self.half_widths[i] * (2.0 * u - 1.0);
        }
        p
    }
}

/// Outcome of [`pilot_beam_select`]: the drawn aim points, the commanded
/// candidate beams (one transmission each), the true received power of each
/// candidate, and the index of the winner.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotSelection {
    pub targets: Vec<Vec3>,
    pub candidates: RisProfile,
    pub powers_w: Vec<f64>,
    pub selected: usize,
}

impl PilotSelection {
    /// The winning beam as a standalone single-transmission profile.
    pub fn selected_beam(&self) -> RisProfile {
        RisProfile::new(vec![self.candidates.transmission(self.selected).to_vec()])
            .expect("a transmission of a validated profile is itself a valid profile")
    }
}

/// Draws `n_beams` aim points uniformly from `region`, forms the positional
/// beam toward each, and selects the beam with the highest power actually
/// received at `ue_true` — including any element failures in `mask`, which
/// the beams are commanded without knowing. Ties keep the lowest beam index,
/// so a fixed seed always reproduces the same selection.
///
/// The received powers are evaluated single-carrier at the UE reference
/// antenna with the model's own transmit power; selection only compares them,
/// so any common power scale works.
pub fn pilot_beam_select(
    region: &UncertaintyRegion,
    n_beams: usize,
    model: &CascadeModel,
    ue_true: Vec3,
    mask: &FailureMask,
    rng_seed: u64,
) -> Result<PilotSelection, LinkError> {
    region.validate()?;
    if n_beams == 0 {
        return Err(LinkError::InvalidParameter(
            "at least one candidate beam is required",
        ));
    }
    let lam = model.spec.wavelength();
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    let targets: Vec<Vec3> = (0..n_beams).map(|_| region.sample(&mut rng)).collect();
    let rows: Vec<Vec<C64>> = targets
        .iter()
        .map(|&q| positional_beam(q, &model.bs, &model.ris, lam).transmission(0).to_vec())
        .collect();
    let candidates = RisProfile::new(rows)?;
    let realized = apply_failure(&candidates, mask)?;

    let spec = SignalSpec {
        n_subcarriers: 1,
        n_transmissions: n_beams,
        ..model.spec
    };
    let eval = CascadeModel::new(model.bs, model.ris, spec, realized)?
        .with_amplitude(model.amplitude);
    let obs = eval.mean_at(ue_true, C64::new(1.0, 0.0))?;
    let powers_w: Vec<f64> = (0..n_beams).map(|t| obs.at(0, t, 0).norm_sqr()).collect();

    let mut selected = 0;
    for (i, &p) in powers_w.iter().enumerate() {
        if p > powers_w[selected] {
            selected = i;
        }
    }
    Ok(PilotSelection {
        targets,
        candidates,
        powers_w,
        selected,
    })
}

// ── achievable data rate ────────────────────────────────────────────────────

/// Achievable rate of the data phase in bits/s/Hz:
/// `(t_data/t_total)·log2(1 + p_data_w·|h|²/σ²)`, where `h` is the
/// single-carrier cascade inner product of the commanded `beam` (with `mask`
/// applied) evaluated at **unit** transmit power, and `σ²` the full-band
/// noise power. `plan.p_data_w` is therefore the only power knob; the
/// model's own transmit power setting does not enter.
pub fn comm_rate(
    plan: &TradeoffPlan,
    beam: &RisProfile,
    model: &CascadeModel,
    ue: Vec3,
    mask: &FailureMask,
) -> Result<f64, LinkError> {
    plan.validate()?;
    if beam.n_transmissions() != 1 {
        return Err(LinkError::InvalidParameter(
            "the data beam must be a single-transmission profile",
        ));
    }
    let realized = apply_failure(beam, mask)?;
    let spec = SignalSpec {
        n_subcarriers: 1,
        n_transmissions: 1,
        tx_power_dbm: 30.0, // exactly one watt: h carries no power of its own
        ..model.spec
    };
    let eval = CascadeModel::new(model.bs, model.ris, spec, realized)?
        .with_amplitude(model.amplitude);
    let h = eval.mean_at(ue, C64::new(1.0, 0.0))?.at(0, 0, 0);
    let sigma2 = noise_variance(&spec);
    let snr = plan.p_data_w * h.norm_sqr() / sigma2;
    Ok(plan.t_data() / plan.t_total * (1.0 + snr).log2())
}

// ── coupled spectral efficiency ─────────────────────────────────────────────

/// Knobs of the spectral-efficiency ascent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeConfig {
    /// Maximum alternating rounds (combiner update + one phase sweep each).
    pub max_iterations: usize,
    /// Coarse phase candidates per element update; each update then refines
    /// the best candidate by interval halving.
    pub phase_grid: usize,
    /// Relative design-objective improvement below which the ascent counts
    /// as stationary.
    pub tolerance: f64,
    /// Tolerated objective *decreases* (numerical noise) before giving up.
    pub stall_budget: usize,
}

impl Default for SeConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            phase_grid: 16,
            tolerance: 1e-8,
            stall_budget: 2,
        }
    }
}

/// Outcome of [`spectral_efficiency`].
#[derive(Debug, Clone, PartialEq)]
pub struct SeResult {
    /// Spectral efficiency of the designed (combiner, profile) pair on the
    /// TRUE coupled channel, bits/s/Hz.
    pub se_bits: f64,
    /// The same design scored on the assumed channel it was optimized for.
    pub design_bits: f64,
    /// Final element phases.
    pub phases: Vec<f64>,
    /// Design objective `‖h‖²` after the initial profile and after each
    /// alternating round; non-decreasing by construction.
    pub trace: Vec<f64>,
    /// True when the ascent stopped without reaching a stationary value
    /// (objective decreased `stall_budget+1` times, or the round budget ran
    /// out first); `se_bits` then reports the best design found.
    pub flagged: bool,
}

/// Per-antenna channel vector of the coupled cascade for unit-modulus element
/// phases, built on scattering matrix `s`.
fn rx_channel(
    base: &CascadeModel,
    phases: &[f64],
    s: &ScatterMatrix,
    ue: Vec3,
) -> Result<Vec<C64>, LinkError> {
    let coeffs: Vec<C64> = phases.iter().map(|&p| C64::from_polar(1.0, p)).collect();
    let op = coupled_ris_operator(&coeffs, s)?;
    let model = base.clone().with_coupled_operators(vec![op])?;
    let obs = model.mean_at(ue, C64::new(1.0, 0.0))?;
    Ok((0..model.n_rx()).map(|r| obs.at(0, 0, r)).collect())
}

/// Incremental evaluator of the coupled design channel for the coordinate
/// sweep. The channel is linear in the RIS operator, `h_r(op) = Σ_{ij}
/// (w_r[i]/a_in[i])·op_{ij}·a_in[j]`, so the per-element physical weights
/// `w_r[i]` are recovered once by probing the exact channel model with
/// single-entry operators; only the incident steering phase is rebuilt
/// locally. A single element's phase is then a rank-one change of
/// `A = I − SΓ`, so every candidate costs `O(N)` via the Sherman–Morrison
/// identity instead of a fresh `N³` solve.
struct FastCoupled {
    s: DMatrix<C64>,
    a_in: DVector<C64>,
    /// Per-rx probe weights: `w[r][i]` is the exact channel of the
    /// single-entry operator `E_ii`.
    w: Vec<DVector<C64>>,
    gamma: DVector<C64>,
    ainv: DMatrix<C64>,
    y: DVector<C64>,
}

impl FastCoupled {
    fn new(model: &CascadeModel, s: &ScatterMatrix, ue: Vec3) -> Result<Self, LinkError> {
        let n = model.ris.n_elements();
        let rr = model.n_rx();
        let lam = model.spec.wavelength();
        let els = model.ris.elements();
        let centroid = model.ris.centroid();
        let d1c = (model.bs.position - centroid).norm();
        let a_in = DVector::from_iterator(
            n,
            els.iter().map(|e| {
                let d = (e - model.bs.position).norm();
                C64::from_polar(1.0, -std::f64::consts::TAU * (d - d1c) / lam)
            }),
        );
        let mut w = vec![DVector::<C64>::zeros(n); rr];
        for i in 0..n {
            let mut op = DMatrix::<C64>::zeros(n, n);
            op[(i, i)] = C64::new(1.0, 0.0);
            let probe = model.clone().with_coupled_operators(vec![op])?;
            let obs = probe.mean_at(ue, C64::new(1.0, 0.0))?;
            for (r, wr) in w.iter_mut().enumerate() {
                wr[i] = obs.at(0, 0, r);
            }
        }
        Ok(Self {
            s: s.matrix().clone(),
            a_in,
            w,
            gamma: DVector::zeros(n),
            ainv: DMatrix::identity(n, n),
            y: DVector::zeros(n),
        })
    }

    /// Rebuilds `A⁻¹ = (I − SΓ)⁻¹` and `y = A⁻¹·a_in` from scratch, resetting
    /// any drift the rank-one updates accumulated.
    fn refresh(&mut self, phases: &[f64]) -> Result<(), LinkError> {
        let n = self.a_in.len();
        self.gamma =
            DVector::from_iterator(n, phases.iter().map(|&p| C64::from_polar(1.0, p)));
        let mut a = DMatrix::<C64>::identity(n, n);
        for j in 0..n {
            let g = self.gamma[j];
            for i in 0..n {
                a[(i, j)] -= self.s[(i, j)] * g;
            }
        }
        self.ainv = a
            .try_inverse()
            .ok_or(LinkError::Coupling(CouplingError::Singular {
                what: "spectral-efficiency design channel",
            }))?;
        self.y = &self.ainv * &self.a_in;
        Ok(())
    }

    /// `A⁻¹·S·e_e`, shared by every candidate phase of element `e`.
    fn q_col(&self, e: usize) -> DVector<C64> {
        &self.ainv * self.s.column(e)
    }

    /// Folds the matched-filter combiner and the outgoing steering into one
    /// weight vector so a candidate's combined channel is a single dot
    /// product: `cᴴh = Σ_i wc[i]·(Γy)_i`.
    fn combiner_weights(&self, c: &[C64]) -> DVector<C64> {
        DVector::from_iterator(
            self.a_in.len(),
            (0..self.a_in.len()).map(|i| {
                let sum: C64 = c
                    .iter()
                    .zip(&self.w)
                    .map(|(cr, wr)| cr.conj() * wr[i])
                    .sum();
                sum * self.a_in[i].conj()
            }),
        )
    }

    /// Combined power `|cᴴh|²` with element `e` moved to `phase` and all
    /// others fixed; `None` when the rank-one update is degenerate there.
    fn candidate(
        &self,
        e: usize,
        phase: f64,
        q: &DVector<C64>,
        wc: &DVector<C64>,
    ) -> Option<f64> {
        let gnew = C64::from_polar(1.0, phase);
        let delta = gnew - self.gamma[e];
        let denom = C64::new(1.0, 0.0) - delta * q[e];
        if denom.norm() < 1e-12 {
            return None;
        }
        let scale = delta * self.y[e] / denom;
        let mut inner = C64::new(0.0, 0.0);
        for i in 0..self.y.len() {
            let yi = self.y[i] + scale * q[i];
            let gi = if i == e { gnew } else { self.gamma[i] };
            inner += wc[i] * gi * yi;
        }
        Some(inner.norm_sqr())
    }

    /// Locks in element `e` at `phase` (Sherman–Morrison update of `A⁻¹`).
    /// `q` must be [`FastCoupled::q_col`] of `e` for the *current* state.
    fn commit(&mut self, e: usize, phase: f64, q: &DVector<C64>) {
        let gnew = C64::from_polar(1.0, phase);
        let delta = gnew - self.gamma[e];
        let denom = C64::new(1.0, 0.0) - delta * q[e];
        let row = self.ainv.row(e).clone_owned();
        self.ainv += (q * &row) * (delta / denom);
        self.gamma[e] = gnew;
        self.y = &self.ainv * &self.a_in;
    }
}

fn norm_sqr(v: &[C64]) -> f64 {
    v.iter().map(|x| x.norm_sqr()).sum()
}

/// `|cᴴ h|²` for a fixed (already normalized) combiner.
fn combined_power(c: &[C64], h: &[C64]) -> f64 {
    let inner: C64 = c.iter().zip(h).map(|(ci, hi)| ci.conj() * hi).sum();
    inner.norm_sqr()
}

/// SIMO spectral efficiency of a mutually coupled RIS link under imperfect
/// coupling knowledge.
///
/// The (combiner, profile) design is optimized by alternating ascent against
/// the channel built from the *assumed* scattering matrix `s_assumed`: each
/// round applies the closed-form matched-filter combiner for the current
/// design channel, then sweeps the elements once, updating each phase by a
/// coarse grid plus interval-halving refinement of the combined power. Both
/// half-steps can only increase the design objective, so the reported trace
/// is non-decreasing. The final design is then scored on the channel built
/// from the *true* matrix `s_true`:
/// `se = log2(1 + |cᴴ h_true|²/σ²)`.
///
/// `model` must be single-carrier and single-transmission (its profile acts
/// as a placeholder; the optimizer owns the phases). Receive antennas come
/// from the model's rx offsets; an empty set means one antenna at the UE.
/// Reflection is unit-modulus (lossless elements), matching the passivity
/// assumption of the scattering model.
pub fn spectral_efficiency(
    model: &CascadeModel,
    s_true: &ScatterMatrix,
    s_assumed: &ScatterMatrix,
    ue: Vec3,
    config: &SeConfig,
) -> Result<SeResult, LinkError> {
    if model.spec.n_subcarriers != 1 || model.spec.n_transmissions != 1 {
        return Err(LinkError::InvalidParameter(
            "spectral efficiency expects a single-carrier, single-transmission model",
        ));
    }
    let n = model.ris.n_elements();
    if s_true.n() != n || s_assumed.n() != n {
        return Err(LinkError::InvalidParameter(
            "scattering matrices must match the panel element count",
        ));
    }
    if config.max_iterations == 0 || config.phase_grid < 4 {
        return Err(LinkError::InvalidParameter(
            "the ascent needs at least one round and a phase grid of at least 4",
        ));
    }
    if !(config.tolerance.is_finite() && config.tolerance >= 0.0) {
        return Err(LinkError::InvalidParameter(
            "tolerance must be finite and non-negative",
        ));
    }

    // Start from the decoupled co-phasing beam toward the UE: exact optimum
    // for S = 0 with one receive antenna, and a strong basin elsewhere.
    let lam = model.spec.wavelength();
    let mut phases: Vec<f64> = positional_beam(ue, &model.bs, &model.ris, lam)
        .transmission(0)
        .iter()
        .map(|w| w.arg())
        .collect();

    let mut fast = FastCoupled::new(model, s_assumed, ue)?;
    let mut h = rx_channel(model, &phases, s_assumed, ue)?;
    let mut objective = norm_sqr(&h);
    let mut trace = vec![objective];
    let mut stalls = 0usize;
    let mut flagged = true; // cleared on reaching a stationary value
    let mut best = (phases.clone(), objective);

    for _ in 0..config.max_iterations {
        // Matched-filter combiner for the current design channel.
        let hnorm = norm_sqr(&h).sqrt();
        if hnorm == 0.0 {
            break; // dead channel: nothing to combine or improve
        }
        let c: Vec<C64> = h.iter().map(|x| x / hnorm).collect();

        // One coordinate-ascent sweep at fixed combiner; candidates are
        // scored by the rank-one evaluator, the current phase always among
        // them, so the combined power cannot drop.
        fast.refresh(&phases)?;
        let wc = fast.combiner_weights(&c);
        // `phases[e]` is written mid-loop, so the index form is the honest one.
        #[allow(clippy::needless_range_loop)]
        for e in 0..n {
            let q = fast.q_col(e);
            let current = phases[e];
            let mut best_phase = current;
            let mut best_power = match fast.candidate(e, current, &q, &wc) {
                Some(p) => p,
                None => continue,
            };
            let step = std::f64::consts::TAU / config.phase_grid as f64;
            for g in 1..config.phase_grid {
                let cand = current + g as f64 * step;
                if let Some(p) = fast.candidate(e, cand, &q, &wc) {
                    if p > best_power {
                        best_power = p;
                        best_phase = cand;
                    }
                }
            }
            // Interval halving around the best coarse candidate.
            let mut width = step;
            for _ in 0..14 {
                width *= 0.5;
                for cand in [best_phase - width, best_phase + width] {
                    if let Some(p) = fast.candidate(e, cand, &q, &wc) {
                        if p > best_power {
                            best_power = p;
                            best_phase = cand;
                        }
                    }
                }
            }
            if best_phase != current {
                fast.commit(e, best_phase, &q);
                phases[e] = best_phase;
            }
        }

        h = rx_channel(model, &phases, s_assumed, ue)?;
        let new_objective = norm_sqr(&h);
        trace.push(new_objective);
        if new_objective > best.1 {
            best = (phases.clone(), new_objective);
        }
        let rel = (new_objective - objective) / objective.max(f64::MIN_POSITIVE);
        objective = new_objective;
        if rel < -config.tolerance {
            stalls += 1;
            if stalls > config.stall_budget {
                break; // ascent broke down numerically; report best, flagged
            }
        } else if rel < config.tolerance {
            flagged = false; // stationary value reached
            break;
        }
    }

    let (best_phases, _) = best;
    let h_design = rx_channel(model, &best_phases, s_assumed, ue)?;
    let sigma2 = model.noise_variance();
    let design_bits = (1.0 + norm_sqr(&h_design) / sigma2).log2();

    let h_true = rx_channel(model, &best_phases, s_true, ue)?;
    let dnorm = norm_sqr(&h_design).sqrt();
    let se_bits = if dnorm == 0.0 {
        0.0
    } else {
        let c: Vec<C64> = h_design.iter().map(|x| x / dnorm).collect();
        (1.0 + combined_power(&c, &h_true) / sigma2).log2()
    };

    Ok(SeResult {
        se_bits,
        design_bits,
        phases: best_phases,
        trace,
        flagged,
    })
}

// ── tests ───────────────────────────────────────────────────────────────────
