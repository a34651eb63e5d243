//! OFDM cascade observation model: noise-free means, noise injection, RIS
//! profiles, and element-level impairments.
//!
//! The modeled link is a downlink in which a base station (BS) illuminates a
//! reconfigurable surface and a user (UE) receives only the reflected
//! BS–RIS–UE cascade; no direct path is present. Observations are complex
//! samples indexed by subcarrier, transmission, and (optionally) receive
//! antenna.
//!
//! Two phase models are provided:
//!
//! - [`PhaseModel::Narrowband`]: the per-element response is evaluated at the
//!   carrier only and the subcarrier-dependent delay phase is carried by the
//!   centroid path delay. This is the classical factorized cascade.
//! - [`PhaseModel::Wideband`]: every element keeps its exact delay at every
//!   subcarrier, so delay dispersion across the aperture (beam squint) is
//!   captured. Evaluated through a scaled moment expansion that is accurate
//!   to machine precision and far cheaper than the naive double sum.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::geometry::{Pose, RisPanel, Vec3};
use crate::{C0, C64};

// ── errors ──────────────────────────────────────────────────────────────────

/// Errors produced by observation-model constructors and operations.
#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    /// A signal-specification field is out of its allowed range.
    #[error("signal field `{field}` must be {requirement} (got {value})")]
    InvalidSignal {
        field: &'static str,
        requirement: &'static str,
        value: f64,
    },
    /// Two containers that must agree in length do not.
    #[error("size mismatch in `{what}`: expected {expected}, got {got}")]
    SizeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    /// A reflection coefficient exceeds unit modulus.
    #[error("profile entry {index} has modulus {modulus:.6} > 1; passive RIS requires |ω| ≤ 1")]
    NotPassive { index: usize, modulus: f64 },
    /// The BS or a receive point coincides with the RIS.
    #[error("transmitter, receiver, and RIS must be pairwise non-coincident")]
    CoincidentGeometry,
}

// ── signal specification ────────────────────────────────────────────────────

/// OFDM signal and radio parameters shared by every observation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SignalSpec {
    /// Carrier frequency [Hz].
    pub carrier_hz: f64,
    /// Total occupied bandwidth [Hz].
    pub bandwidth_hz: f64,
    /// Number of subcarriers K; subcarrier spacing is `bandwidth_hz / K`.
    pub n_subcarriers: usize,
    /// Number of pilot transmissions T.
    pub n_transmissions: usize,
    /// Total transmit power [dBm], split evenly across subcarriers.
    pub tx_power_dbm: f64,
    /// Noise power spectral density [dBm/Hz].
    pub noise_psd_dbm_hz: f64,
    /// Receiver noise figure [dB].
    pub noise_figure_db: f64,
}

impl SignalSpec {
    /// Validates ranges; `tx_power_dbm = -inf` is allowed and means zero power.
    pub fn validate(&self) -> Result<(), ChannelError> {
        let finite = |field: &'static str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(ChannelError::InvalidSignal {
                    field,
                    requirement: "finite",
                    value: v,
                })
            }
        };
        if !(self.carrier_hz.is_finite() && self.carrier_hz > 0.0) {
            return Err(ChannelError::InvalidSignal {
                field: "carrier_hz",
                requirement: "finite and positive",
                value: self.carrier_hz,
            });
        }
        if !(self.bandwidth_hz.is_finite() && self.bandwidth_hz > 0.0) {
            return Err(ChannelError::InvalidSignal {
                field: "bandwidth_hz",
                requirement: "finite and positive",
                value: self.bandwidth_hz,
            });
        }
        if self.n_subcarriers == 0 {
            return Err(ChannelError::InvalidSignal {
                field: "n_subcarriers",
                requirement: "at least 1",
                value: 0.0,
            });
        }
        if self.n_transmissions == 0 {
            return Err(ChannelError::InvalidSignal {
                field: "n_transmissions",
                requirement: "at least 1",
                value: 0.0,
            });
        }
        if self.tx_power_dbm.is_nan() || self.tx_power_dbm == f64::INFINITY {
            return Err(ChannelError::InvalidSignal {
                field: "tx_power_dbm",
                requirement: "not NaN or +inf",
                value: self.tx_power_dbm,
            });
        }
        finite("noise_psd_dbm_hz", self.noise_psd_dbm_hz)?;
        finite("noise_figure_db", self.noise_figure_db)?;
        Ok(())
    }

    /// Carrier wavelength [m].
    pub fn wavelength(&self) -> f64 {
        C0 / self.carrier_hz
    }

    /// Subcarrier spacing Δf [Hz].
    pub fn delta_f(&self) -> f64 {
        self.bandwidth_hz / self.n_subcarriers as f64
    }

    /// Total transmit power [W].
    pub fn tx_power_w(&self) -> f64 {
        10f64.powf(self.tx_power_dbm / 10.0) * 1e-3
    }

    /// Copy with a different transmit power.
    pub fn with_tx_power_dbm(mut self, dbm: f64) -> Self {
        self.tx_power_dbm = dbm;
        self
    }
}

/// Noise variance per complex subcarrier sample [W]:
/// `σ² = 10^((PSD + NF)/10) · 1e−3 · (bandwidth / n_subcarriers)`.
pub fn noise_variance(spec: &SignalSpec) -> f64 {
    10f64.powf((spec.noise_psd_dbm_hz + spec.noise_figure_db) / 10.0)
        * 1e-3
        * (spec.bandwidth_hz / spec.n_subcarriers as f64)
}

// ── RIS profiles ────────────────────────────────────────────────────────────

/// Per-element complex reflection coefficients, one vector per transmission.
///
/// Entries are the *commanded* coefficients; impairments (stuck pixels,
/// phase-dependent amplitude, mutual coupling) transform them into realized
/// ones downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct RisProfile {
    per_transmission: Vec<Vec<C64>>,
}

impl RisProfile {
    /// Builds a profile, checking passivity (`|ω| ≤ 1`) of every entry.
    pub fn new(per_transmission: Vec<Vec<C64>>) -> Result<Self, ChannelError> {
        let n = per_transmission.first().map_or(0, Vec::len);
        for (t, v) in per_transmission.iter().enumerate() {
            if v.len() != n {
                return Err(ChannelError::SizeMismatch {
                    what: "profile transmission lengths",
                    expected: n,
                    got: v.len(),
                });
            }
            for (i, w) in v.iter().enumerate() {
                let m = w.norm();
                if m > 1.0 + 1e-9 {
                    return Err(ChannelError::NotPassive {
                        index: t * n + i,
                        modulus: m,
                    });
                }
            }
        }
        Ok(Self { per_transmission })
    }

    pub fn n_transmissions(&self) -> usize {
        self.per_transmission.len()
    }

    pub fn n_elements(&self) -> usize {
        self.per_transmission.first().map_or(0, Vec::len)
    }

    /// Coefficients of transmission `t`.
    pub fn transmission(&self, t: usize) -> &[C64] {
        &self.per_transmission[t]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[C64]> {
        self.per_transmission.iter().map(Vec::as_slice)
    }

    /// Concatenates the transmissions of `self` and `other` (element counts
    /// must match).
    pub fn concat(&self, other: &RisProfile) -> Result<RisProfile, ChannelError> {
        if self.n_elements() != other.n_elements() && self.n_transmissions() > 0 {
            return Err(ChannelError::SizeMismatch {
                what: "profile element counts",
                expected: self.n_elements(),
                got: other.n_elements(),
            });
        }
        let mut v = self.per_transmission.clone();
        v.extend(other.per_transmission.iter().cloned());
        RisProfile::new(v)
    }
}

/// Independent uniform phases in `[0, 2π)` with unit amplitude, for
/// `n_transmissions` transmissions over `n_elements` elements.
pub fn random_profiles(n_elements: usize, n_transmissions: usize, rng_seed: u64) -> RisProfile {
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    let per_transmission = (0..n_transmissions)
        .map(|_| {
            (0..n_elements)
                .map(|_| C64::from_polar(1.0, rng.gen::<f64>() * std::f64::consts::TAU))
                .collect()
        })
        .collect();
    RisProfile { per_transmission }
}

/// Single-transmission profile that co-phases the cascade toward `target`:
/// each element conjugates the sum of its incoming (BS→element) and outgoing
/// (element→target) near-field phases. Unit amplitudes.
pub fn positional_beam(target: Vec3, bs: &Pose, ris: &RisPanel, wavelength: f64) -> RisProfile {
    let els = ris.elements();
    let c = ris.centroid();
    let d1c = (bs.position - c).norm();
    let d2c = (target - c).norm();
    let k = std::f64::consts::TAU / wavelength;
    let entries = els
        .iter()
        .map(|e| {
            let d1 = (e - bs.position).norm();
            let d2 = (e - target).norm();
            // conjugate of the element's response phase −k·((d1−d1c)+(d2−d2c))
            C64::from_polar(1.0, k * ((d1 - d1c) + (d2 - d2c)))
        })
        .collect();
    RisProfile {
        per_transmission: vec![entries],
    }
}

// ── phase-dependent amplitude ───────────────────────────────────────────────

/// Lorentzian-like amplitude response of a reflecting element as a function
/// of its applied phase shift: `β(θ) = (1−β_min)·((sin(θ−φ)+1)/2)^κ + β_min`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AmplitudeModel {
    /// Minimum amplitude, in [0, 1].
    pub beta_min: f64,
    /// Phase of peak absorption [rad].
    pub phi: f64,
    /// Steepness exponent, ≥ 0.
    pub kappa: f64,
}

impl AmplitudeModel {
    /// Ideal lossless element: β ≡ 1 for every phase.
    pub const IDEAL: AmplitudeModel = AmplitudeModel {
        beta_min: 1.0,
        phi: 0.0,
        kappa: 0.0,
    };

    pub fn is_ideal(&self) -> bool {
        self.beta_min >= 1.0
    }

    /// Amplitude β(θ) alone.
    pub fn beta(&self, theta: f64) -> f64 {
        if self.is_ideal() {
            return 1.0;
        }
        (1.0 - self.beta_min) * (((theta - self.phi).sin() + 1.0) / 2.0).powf(self.kappa)
            + self.beta_min
    }
}

impl Default for AmplitudeModel {
    /// Representative semiconductor-varactor values.
    fn default() -> Self {
        AmplitudeModel {
            beta_min: 0.2,
            phi: 0.43 * std::f64::consts::PI,
            kappa: 1.6,
        }
    }
}

/// Realized reflection coefficient `β(θ)·e^{jθ}` for a commanded phase shift
/// `theta` under the given amplitude model.
pub fn phase_amp_coefficient(theta: f64, model: &AmplitudeModel) -> C64 {
    C64::from_polar(model.beta(theta), theta)
}

// ── pixel failures ──────────────────────────────────────────────────────────

/// What a failed pixel does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    /// The element keeps reflecting with unit amplitude at a random phase
    /// that is fixed across transmissions and ignores the commanded one.
    StuckPhase,
    /// The element stops reflecting entirely.
    ZeroAmplitude,
}

/// Per-element failure status; `None` means healthy, `Some(c)` means the
/// element always reflects with the stuck coefficient `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct FailureMask {
    stuck: Vec<Option<C64>>,
}

impl FailureMask {
    /// All elements healthy.
    pub fn healthy(n_elements: usize) -> Self {
        Self {
            stuck: vec![None; n_elements],
        }
    }

    /// Builds a mask from explicit per-element stuck coefficients.
    pub fn from_stuck(stuck: Vec<Option<C64>>) -> Result<Self, ChannelError> {
        for (i, s) in stuck.iter().enumerate() {
            if let Some(c) = s {
                if c.norm() > 1.0 + 1e-9 {
                    return Err(ChannelError::NotPassive {
                        index: i,
                        modulus: c.norm(),
                    });
                }
            }
        }
        Ok(Self { stuck })
    }

    pub fn n_elements(&self) -> usize {
        self.stuck.len()
    }

    pub fn n_failed(&self) -> usize {
        self.stuck.iter().filter(|s| s.is_some()).count()
    }

    pub fn is_failed(&self, i: usize) -> bool {
        self.stuck[i].is_some()
    }

    /// Stuck coefficient of element `i`, if failed.
    pub fn stuck_coefficient(&self, i: usize) -> Option<C64> {
        self.stuck[i]
    }

    /// Indices of failed elements, ascending.
    pub fn failed_indices(&self) -> Vec<usize> {
        self.stuck
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|_| i))
            .collect()
    }
}

/// Draws an independent failure per element with probability `p_fail`;
/// failed elements get a unit-amplitude stuck coefficient at a uniform
/// random phase ([`FailureKind::StuckPhase`]).
///
/// For a fixed seed the set of failed elements is *nested* across `p_fail`:
/// raising the probability only adds failures. This common-random-numbers
/// coupling makes sweeps over `p_fail` monotone realization by realization.
pub fn sample_failure_mask(n_elements: usize, p_fail: f64, rng_seed: u64) -> FailureMask {
    sample_failure_mask_with(n_elements, p_fail, rng_seed, FailureKind::StuckPhase)
}

/// [`sample_failure_mask`] with an explicit failure behavior.
pub fn sample_failure_mask_with(
    n_elements: usize,
    p_fail: f64,
    rng_seed: u64,
    kind: FailureKind,
) -> FailureMask {
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    let stuck = (0..n_elements)
        .map(|_| {
            // Both draws happen unconditionally so that masks with the same
            // seed are nested across p_fail.
            let u: f64 = rng.gen();
            let phase = rng.gen::<f64>() * std::f64::consts::TAU;
            if u < p_fail {
                Some(match kind {
                    FailureKind::StuckPhase => C64::from_polar(1.0, phase),
                    FailureKind::ZeroAmplitude => C64::new(0.0, 0.0),
                })
            } else {
                None
            }
        })
        .collect();
    FailureMask { stuck }
}

/// Replaces the commanded coefficient of every failed element by its stuck
/// coefficient, in every transmission. Healthy entries pass through.
pub fn apply_failure(profile: &RisProfile, mask: &FailureMask) -> Result<RisProfile, ChannelError> {
    if profile.n_elements() != mask.n_elements() {
        return Err(ChannelError::SizeMismatch {
            what: "failure mask vs profile elements",
            expected: profile.n_elements(),
            got: mask.n_elements(),
        });
    }
    let per_transmission = profile
        .per_transmission
        .iter()
        .map(|v| {
            v.iter()
                .zip(mask.stuck.iter())
                .map(|(w, s)| s.unwrap_or(*w))
                .collect()
        })
        .collect();
    Ok(RisProfile { per_transmission })
}

// ── observations ────────────────────────────────────────────────────────────

/// Complex baseband samples indexed by `(subcarrier, transmission, rx antenna)`,
/// flattened row-major as `(k·T + t)·R + r`, plus the per-sample noise
/// variance they were (or would be) generated with.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub data: Vec<C64>,
    pub n_subcarriers: usize,
    pub n_transmissions: usize,
    pub n_rx: usize,
    /// Noise variance per complex sample [W].
    pub noise_variance: f64,
}

impl Observation {
    pub fn index(&self, k: usize, t: usize, r: usize) -> usize {
        (k * self.n_transmissions + t) * self.n_rx + r
    }

    pub fn at(&self, k: usize, t: usize, r: usize) -> C64 {
        self.data[self.index(k, t, r)]
    }

    pub fn n_samples(&self) -> usize {
        self.data.len()
    }

    /// Total sample energy `Σ|x|²`.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }
}

/// Adds independent circularly-symmetric complex Gaussian noise with the
/// observation's own per-sample variance (σ²/2 per real dimension).
pub fn add_noise(mean: &Observation, rng_seed: u64) -> Observation {
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    let s = (mean.noise_variance / 2.0).sqrt();
    let data = mean
        .data
        .iter()
        .map(|m| {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            m + C64::new(s * re, s * im)
        })
        .collect();
    Observation {
        data,
        ..mean.clone()
    }
}

// ── cascade model ───────────────────────────────────────────────────────────

/// How per-element delays enter the subcarrier phases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhaseModel {
    /// Factorized cascade: per-element responses at the carrier frequency
    /// only; the subcarrier delay ramp uses the centroid path delay.
    Narrowband,
    /// Exact per-element phases `exp(−j2π(f_c + kΔf)τ_n)`. `ref_point`, when
    /// set, fixes a constant bulk delay — the model's own centroid path delay
    /// evaluated with the UE at that point — that is subtracted from every
    /// element delay. This mimics receiver timing synchronization acquired at
    /// a nominal position: absolute bulk delay is absorbed, relative delay
    /// structure is kept.
    Wideband { ref_point: Option<Vec3> },
}

/// Assembled observation model for one BS–RIS–UE cascade: geometry, signal
/// parameters, profiles, and impairments, ready to evaluate noise-free means
/// at arbitrary UE positions.
///
/// The per-sample amplitude convention is
/// `√(P/K) · λ²/((4π)²·d₁·d₂) · cosθ_in · cosθ_out · (A_cell/A_ref)`, with
/// `d₁, d₂` the BS–centroid and centroid–UE distances, the cosines measured
/// from the surface normal (projected-aperture illumination), and
/// `A_cell/A_ref = (min(pitch, λ/2)/(λ/2))²` the element effective-aperture
/// factor (a unit cell captures at most its own area; λ/2 pitch is the
/// unit-gain reference). The complex gain `g` passed at evaluation time is
/// dimensionless and rides on top of this physical scale; its phase is the
/// global phase nuisance.
#[derive(Debug, Clone)]
pub struct CascadeModel {
    pub bs: Pose,
    pub ris: RisPanel,
    pub spec: SignalSpec,
    pub profiles: RisProfile,
    pub amplitude: AmplitudeModel,
    pub phase_model: PhaseModel,
    /// Receive-antenna offsets relative to the UE position; empty = single
    /// antenna at the UE position itself.
    pub rx_offsets: Vec<Vec3>,
    /// Realized (possibly non-diagonal) RIS operators per transmission when
    /// mutual coupling is modeled; overrides `profiles` in the inner product.
    pub coupled_operators: Option<Vec<DMatrix<C64>>>,

    // precomputed geometry
    elements: Vec<Vec3>,
    d1n: Vec<f64>,
    d1c: f64,
    cos_in: f64,
    ref_delay: f64,
}

impl CascadeModel {
    pub fn new(
        bs: Pose,
        ris: RisPanel,
        spec: SignalSpec,
        profiles: RisProfile,
    ) -> Result<Self, ChannelError> {
        spec.validate()?;
        if profiles.n_transmissions() != spec.n_transmissions {
            return Err(ChannelError::SizeMismatch {
                what: "profile transmissions vs signal spec",
                expected: spec.n_transmissions,
                got: profiles.n_transmissions(),
            });
        }
        if profiles.n_elements() != ris.n_elements() {
            return Err(ChannelError::SizeMismatch {
                what: "profile elements vs RIS panel",
                expected: ris.n_elements(),
                got: profiles.n_elements(),
            });
        }
        let elements = ris.elements();
        let c = ris.centroid();
        let d1c = (bs.position - c).norm();
        if d1c == 0.0 || elements.iter().any(|e| (e - bs.position).norm() == 0.0) {
            return Err(ChannelError::CoincidentGeometry);
        }
        let d1n = elements.iter().map(|e| (e - bs.position).norm()).collect();
        let cos_in = (bs.position - c).dot(&ris.normal()).abs() / d1c;
        Ok(Self {
            bs,
            ris,
            spec,
            profiles,
            amplitude: AmplitudeModel::IDEAL,
            phase_model: PhaseModel::Narrowband,
            rx_offsets: Vec::new(),
            coupled_operators: None,
            elements,
            d1n,
            d1c,
            cos_in,
            ref_delay: 0.0,
        })
    }

    /// Sets the element amplitude model (realized coefficient
    /// `β(arg ω)·|ω|·e^{j arg ω}`).
    pub fn with_amplitude(mut self, model: AmplitudeModel) -> Self {
        self.amplitude = model;
        self
    }

    /// Sets the phase model and (for the wideband model) resolves the bulk
    /// delay reference from this panel's centroid.
    pub fn with_phase_model(mut self, pm: PhaseModel) -> Self {
        self.phase_model = pm;
        self.ref_delay = match pm {
            PhaseModel::Narrowband | PhaseModel::Wideband { ref_point: None } => 0.0,
            PhaseModel::Wideband {
                ref_point: Some(p),
            } => {
                let c = self.ris.centroid();
                (self.d1c + (p - c).norm()) / C0
            }
        };
        self
    }

    /// Sets receive-antenna offsets (SIMO). Offsets are added to the UE
    /// position at evaluation time.
    pub fn with_rx_offsets(mut self, offsets: Vec<Vec3>) -> Self {
        self.rx_offsets = offsets;
        self
    }

    /// Replaces the diagonal profile action by full per-transmission RIS
    /// operators (mutual coupling). The operator is held at its carrier
    /// realization; under the wideband model the steering phases still sweep
    /// the full band.
    pub fn with_coupled_operators(
        mut self,
        ops: Vec<DMatrix<C64>>,
    ) -> Result<Self, ChannelError> {
        if ops.len() != self.spec.n_transmissions {
            return Err(ChannelError::SizeMismatch {
                what: "coupled operators vs transmissions",
                expected: self.spec.n_transmissions,
                got: ops.len(),
            });
        }
        let n = self.ris.n_elements();
        for op in &ops {
            if op.nrows() != n || op.ncols() != n {
                return Err(ChannelError::SizeMismatch {
                    what: "coupled operator dimensions",
                    expected: n,
                    got: op.nrows(),
                });
            }
        }
        self.coupled_operators = Some(ops);
        Ok(self)
    }

    pub fn n_rx(&self) -> usize {
        self.rx_offsets.len().max(1)
    }

    /// Noise variance per sample for this model's signal spec.
    pub fn noise_variance(&self) -> f64 {
        noise_variance(&self.spec)
    }

    /// Realized per-element coefficients for transmission `t` after the
    /// amplitude model.
    fn realized(&self, t: usize) -> Vec<C64> {
        let raw = self.profiles.transmission(t);
        if self.amplitude.is_ideal() {
            raw.to_vec()
        } else {
            raw.iter()
                .map(|w| {
                    let theta = w.arg();
                    w.norm() * phase_amp_coefficient(theta, &self.amplitude)
                })
                .collect()
        }
    }

    /// Per-element unit-coefficient responses at `ue`: an `M×N` matrix `B`
    /// with rows ordered like [`Observation::index`] such that the narrowband
    /// mean factorizes as `μ_{(k,t,r)} = g · Σ_n B[(k,t,r),n] · ω_{t,n}` over
    /// the realized per-element coefficients `ω`. Only the narrowband model
    /// without coupled operators supports this: once the operator mixes
    /// elements (or each element carries its own subcarrier ramp), the
    /// per-element attribution used by failure diagnosis no longer holds.
    pub fn element_responses(&self, ue: Vec3) -> Result<DMatrix<C64>, ChannelError> {
        if !matches!(self.phase_model, PhaseModel::Narrowband)
            || self.coupled_operators.is_some()
        {
            return Err(ChannelError::InvalidSignal {
                field: "phase_model",
                requirement: "narrowband diagonal model for per-element responses",
                value: f64::NAN,
            });
        }
        let spec = &self.spec;
        let (kk, tt, rr) = (spec.n_subcarriers, spec.n_transmissions, self.n_rx());
        let n = self.elements.len();
        let mut b = DMatrix::from_element(kk * tt * rr, n, C64::new(0.0, 0.0));

        let rx_points: Vec<Vec3> = if self.rx_offsets.is_empty() {
            vec![ue]
        } else {
            self.rx_offsets.iter().map(|o| ue + o).collect()
        };
        let c = self.ris.centroid();
        let lam = spec.wavelength();
        let fc = spec.carrier_hz;
        let df = spec.delta_f();
        for (r, &rx) in rx_points.iter().enumerate() {
            let d2c = (rx - c).norm();
            if d2c == 0.0 {
                return Err(ChannelError::CoincidentGeometry);
            }
            let d2n: Vec<f64> = self.elements.iter().map(|e| (e - rx).norm()).collect();
            if d2n.contains(&0.0) {
                return Err(ChannelError::CoincidentGeometry);
            }
            let cos_out = (rx - c).dot(&self.ris.normal()).abs() / d2c;
            let cell = self.ris.layout.spacing.min(lam / 2.0);
            let aperture = (cell / (lam / 2.0)).powi(2);
            let amp = (spec.tx_power_w() / spec.n_subcarriers as f64).sqrt()
                * lam
                * lam
                / (16.0 * std::f64::consts::PI * std::f64::consts::PI * self.d1c * d2c)
                * self.cos_in
                * cos_out
                * aperture;
            let tau_c = (self.d1c + d2c) / C0;
            let a: Vec<C64> = (0..n)
                .map(|i| {
                    let dt = (self.d1n[i] + d2n[i] - self.d1c - d2c) / C0;
                    C64::from_polar(amp, -std::f64::consts::TAU * fc * dt)
                })
                .collect();
            for k in 0..kk {
                let ph = C64::from_polar(
                    1.0,
                    -std::f64::consts::TAU * k as f64 * df * tau_c,
                );
                for t in 0..tt {
                    let row = (k * tt + t) * rr + r;
                    for (i, ai) in a.iter().enumerate() {
                        b[(row, i)] = ph * ai;
                    }
                }
            }
        }
        Ok(b)
    }

    /// Noise-free mean observation with the UE at `ue` and complex gain
    /// `gain` (use `1` for the physical convention).
    pub fn mean_at(&self, ue: Vec3, gain: C64) -> Result<Observation, ChannelError> {
        let spec = &self.spec;
        let (kk, tt, rr) = (spec.n_subcarriers, spec.n_transmissions, self.n_rx());
        let mut data = vec![C64::new(0.0, 0.0); kk * tt * rr];

        let rx_points: Vec<Vec3> = if self.rx_offsets.is_empty() {
            vec![ue]
        } else {
            self.rx_offsets.iter().map(|o| ue + o).collect()
        };

        for (r, &rx) in rx_points.iter().enumerate() {
            self.accumulate_rx(rx, gain, r, rr, &mut data)?;
        }
        Ok(Observation {
            data,
            n_subcarriers: kk,
            n_transmissions: tt,
            n_rx: rr,
            noise_variance: self.noise_variance(),
        })
    }

    fn accumulate_rx(
        &self,
        rx: Vec3,
        gain: C64,
        r: usize,
        rr: usize,
        data: &mut [C64],
    ) -> Result<(), ChannelError> {
        let spec = &self.spec;
        let (kk, tt) = (spec.n_subcarriers, spec.n_transmissions);
        let n = self.elements.len();
        let c = self.ris.centroid();
        let d2c = (rx - c).norm();
        if d2c == 0.0 {
            return Err(ChannelError::CoincidentGeometry);
        }
        let d2n: Vec<f64> = self.elements.iter().map(|e| (e - rx).norm()).collect();
        if d2n.contains(&0.0) {
            return Err(ChannelError::CoincidentGeometry);
        }
        let cos_out = (rx - c).dot(&self.ris.normal()).abs() / d2c;
        let lam = spec.wavelength();
        // Element effective aperture: a unit cell can capture at most its own
        // area, so sub-half-wavelength pitches scale the per-element field
        // amplitude by cell_area/reference_area with a λ/2 reference cell.
        // Half-wavelength (and coarser) layouts keep the unit-gain-element
        // convention unchanged.
        let cell = self.ris.layout.spacing.min(lam / 2.0);
        let aperture = (cell / (lam / 2.0)).powi(2);
        let amp = (spec.tx_power_w() / spec.n_subcarriers as f64).sqrt()
            * lam
            * lam
            / (16.0 * std::f64::consts::PI * std::f64::consts::PI * self.d1c * d2c)
            * self.cos_in
            * cos_out
            * aperture;
        let pref = gain * amp;
        let fc = spec.carrier_hz;
        let df = spec.delta_f();
        let tau_c = (self.d1c + d2c) / C0;

        // per-element delay deviation from the centroid path
        let dtau: Vec<f64> = (0..n)
            .map(|i| (self.d1n[i] + d2n[i] - self.d1c - d2c) / C0)
            .collect();

        match (&self.phase_model, &self.coupled_operators) {
            (PhaseModel::Narrowband, None) => {
                // inner product per transmission at the carrier
                let a: Vec<C64> = dtau
                    .iter()
                    .map(|&dt| C64::from_polar(1.0, -std::f64::consts::TAU * fc * dt))
                    .collect();
                for t in 0..tt {
                    let w = self.realized(t);
                    let s: C64 = w.iter().zip(a.iter()).map(|(wi, ai)| wi * ai).sum();
                    for k in 0..kk {
                        let ph = C64::from_polar(
                            1.0,
                            -std::f64::consts::TAU * k as f64 * df * tau_c,
                        );
                        data[(k * tt + t) * rr + r] += pref * ph * s;
                    }
                }
            }
            (PhaseModel::Narrowband, Some(ops)) => {
                // a_outᵀ · Θ_eff · a_in at the carrier; Θ_eff may mix elements
                let a_in: Vec<C64> = self
                    .d1n
                    .iter()
                    .map(|&d| C64::from_polar(1.0, -std::f64::consts::TAU * (d - self.d1c) / lam))
                    .collect();
                let a_out: Vec<C64> = d2n
                    .iter()
                    .map(|&d| C64::from_polar(1.0, -std::f64::consts::TAU * (d - d2c) / lam))
                    .collect();
                for t in 0..tt {
                    let op = &ops[t];
                    let mut s = C64::new(0.0, 0.0);
                    for i in 0..n {
                        let mut row = C64::new(0.0, 0.0);
                        for j in 0..n {
                            row += op[(i, j)] * a_in[j];
                        }
                        s += a_out[i] * row;
                    }
                    for k in 0..kk {
                        let ph = C64::from_polar(
                            1.0,
                            -std::f64::consts::TAU * k as f64 * df * tau_c,
                        );
                        data[(k * tt + t) * rr + r] += pref * ph * s;
                    }
                }
            }
            (PhaseModel::Wideband { .. }, Some(ops)) => {
                // direct per-subcarrier evaluation: the RIS operator stays at
                // its carrier realization while both steering vectors pick up
                // the full `f_c + kΔf` phase, so
                // `s_k = Σ_ij a_out,i(f_k)·Θ_ij·a_in,j(f_k)`.
                let dt1: Vec<f64> = self
                    .d1n
                    .iter()
                    .map(|&d| (d - self.d1c) / C0)
                    .collect();
                let dt2: Vec<f64> = d2n.iter().map(|&d| (d - d2c) / C0).collect();
                let bulk = tau_c - self.ref_delay;
                let mut a_in = vec![C64::new(0.0, 0.0); n];
                let mut a_out = vec![C64::new(0.0, 0.0); n];
                for k in 0..kk {
                    let f = fc + k as f64 * df;
                    for j in 0..n {
                        a_in[j] =
                            C64::from_polar(1.0, -std::f64::consts::TAU * f * dt1[j]);
                    }
                    for i in 0..n {
                        a_out[i] =
                            C64::from_polar(1.0, -std::f64::consts::TAU * f * dt2[i]);
                    }
                    let ph = C64::from_polar(1.0, -std::f64::consts::TAU * f * bulk);
                    for t in 0..tt {
                        let op = &ops[t];
                        let mut s = C64::new(0.0, 0.0);
                        for i in 0..n {
                            let mut row = C64::new(0.0, 0.0);
                            for j in 0..n {
                                row += op[(i, j)] * a_in[j];
                            }
                            s += a_out[i] * row;
                        }
                        data[(k * tt + t) * rr + r] += pref * ph * s;
                    }
                }
            }
            (PhaseModel::Wideband { .. }, None) => {
                self.wideband_accumulate(
                    &dtau, tau_c, pref, fc, df, kk, tt, rr, r, data,
                );
            }
        }
        Ok(())
    }

    /// Exact wideband evaluation through a scaled moment expansion.
    ///
    /// With `δτ_n = τ_n − τ_c` and `x_k = 2π·k·Δf`,
    /// `Σ_n w_n e^{−j2π(f_c+kΔf)δτ_n} = Σ_m (−j x_k δτ_max)^m/m! · S_m`,
    /// `S_m = Σ_n w_n e^{−j2πf_c δτ_n} (δτ_n/δτ_max)^m`. The normalization by
    /// `δτ_max` keeps every intermediate within floating-point range. Terms
    /// are added until the coefficient magnitude falls below 1e−16 relative.
    #[allow(clippy::too_many_arguments)]
    fn wideband_accumulate(
        &self,
        dtau: &[f64],
        tau_c: f64,
        pref: C64,
        fc: f64,
        df: f64,
        kk: usize,
        tt: usize,
        rr: usize,
        r: usize,
        data: &mut [C64],
    ) {
        let tau = std::f64::consts::TAU;
        let dt_max = dtau.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        // maximum dispersion phase across the band
        let x_max = tau * (kk.saturating_sub(1)) as f64 * df * dt_max;
        let n_terms = moment_terms(x_max);

        // moments S[t][m]
        let mut s = vec![vec![C64::new(0.0, 0.0); n_terms + 1]; tt];
        for (t, st) in s.iter_mut().enumerate() {
            let w = self.realized(t);
            for (i, &dt) in dtau.iter().enumerate() {
                let v = if dt_max > 0.0 { dt / dt_max } else { 0.0 };
                let mut q = w[i] * C64::from_polar(1.0, -tau * fc * dt);
                for sm in st.iter_mut() {
                    *sm += q;
                    q *= v;
                }
            }
        }

        let bulk = tau_c - self.ref_delay;
        for k in 0..kk {
            let xk = tau * k as f64 * df * dt_max; // |argument| of the expansion
            let jxk = C64::new(0.0, -xk);
            let ph = C64::from_polar(1.0, -tau * (fc + k as f64 * df) * bulk);
            for t in 0..tt {
                let mut acc = C64::new(0.0, 0.0);
                let mut cm = C64::new(1.0, 0.0); // (−j·xk)^m / m!
                for (m, sm) in s[t].iter().enumerate() {
                    acc += cm * sm;
                    cm = cm * jxk / (m as f64 + 1.0);
                }
                data[(k * tt + t) * rr + r] += pref * ph * acc;
            }
        }
    }
}

/// Number of series terms needed for `e^{−jx}` truncation error below 1e−16
/// relative at argument magnitude `x_max`.
fn moment_terms(x_max: f64) -> usize {
    if x_max == 0.0 {
        return 0;
    }
    let mut m = 1usize;
    let mut term = 1.0f64;
    loop {
        term *= x_max / m as f64;
        if term < 1e-17 && m as f64 > x_max {
            return m + 2;
        }
        m += 1;
        if m > 400 {
            return 400;
        }
    }
}

/// Noise-free cascade mean with the physical gain convention (`g = 1`):
/// `μ[k,t] = √(P/K)·g_path·e^{−j2πkΔf·τ_c}·(a_outᵀ·diag(ω_t)·a_in)` in the
/// narrowband model, where `τ_c` is the centroid path delay.
pub fn cascade_mean(
    bs: &Pose,
    ue: Vec3,
    ris: &RisPanel,
    spec: &SignalSpec,
    profiles: &RisProfile,
) -> Result<Observation, ChannelError> {
    CascadeModel::new(*bs, *ris, *spec, profiles.clone())?.mean_at(ue, C64::new(1.0, 0.0))
}

// ── tests ───────────────────────────────────────────────────────────────────
