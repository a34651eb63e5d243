//! Scenario files, named experiment runners, and CSV emission.
//!
//! A [`Scenario`] is a JSON document holding the common physical setup
//! (geometry, signal) plus one optional section per study. Each experiment
//! name maps to a runner that consumes its section and produces a flat list
//! of [`ResultRow`]s covering the sweep grid declared in the scenario:
//!
//! * `exp-geo-mismatch` — localization bounds vs transmit power under RIS
//!   pose errors;
//! * `exp-failure-bounds` — localization bounds vs SNR under random pixel
//!   failures;
//! * `exp-jlfd` — Monte-Carlo RMSE of the failure-agnostic estimator vs the
//!   joint localization-and-diagnosis estimator;
//! * `exp-tradeoff` — pilot/data energy trade-off: data rate vs localization
//!   bound under failures;
//! * `exp-coupling` — mutual-coupling impact on the asymptotic position
//!   bound and spectral efficiency vs element spacing.
//!
//! Determinism contract: for a fixed `(experiment, scenario, seed)` the
//! emitted rows — and therefore the CSV bytes — are identical for any worker
//! count. Every Monte-Carlo trial derives its own seed from the master seed,
//! the experiment label, and the trial index, never from shared-stream
//! consumption order, and parallel results are assembled by grid index.

use rayon::prelude::*;
use std::path::Path;
use thiserror::Error;

use crate::bounds::{
    fim, jacobian, mcrb_lb, peb, pseudo_true, pseudo_true_multistart, BoundsError, MeanModel,
    ParamVector, PseudoTrueFit,
};
use crate::channel::{
    add_noise, apply_failure, random_profiles, sample_failure_mask, CascadeModel, ChannelError,
    PhaseModel, RisProfile, SignalSpec,
};
use crate::coupling::{
    coupled_ris_operator, mutual_impedance_matrix, noisy_calibration, z_to_s, CouplingError,
    ScatterMatrix,
};
use crate::estimators::{jlfd, ml_localize, EstimatorError, JlfdConfig, SearchGrid};
use crate::geometry::{
    rot_zyx, ArrayLayout, GeometryError, GeometryValidationError, Pose, RisPanel,
};
use crate::linklevel::{
    comm_rate, energy_split, pilot_beam_select, spectral_efficiency, LinkError, SeConfig,
    UncertaintyRegion,
};
use crate::seeding::derive_seed;
use crate::{C64, Vec3};

// ── errors ──────────────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    /// The scenario file is not syntactically valid JSON for the schema.
    #[error("scenario parse error: {message}")]
    Parse { message: String },
    /// The scenario parsed but violates a documented invariant.
    #[error("scenario validation error: {0}")]
    Validation(String),
    #[error("unknown experiment `{name}`; known experiments: {known}")]
    UnknownExperiment { name: String, known: String },
    #[error("experiment `{experiment}` needs the `{section}` section of the scenario")]
    MissingSection {
        experiment: &'static str,
        section: &'static str,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryValidationError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Coupling(#[from] CouplingError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl ExperimentError {
    /// Process exit code contract: 2 for input/validation problems, 3 for
    /// numeric failures inside an otherwise valid run.
    pub fn exit_code(&self) -> u8 {
        match self {
            ExperimentError::Io(_)
            | ExperimentError::Parse { .. }
            | ExperimentError::Validation(_)
            | ExperimentError::UnknownExperiment { .. }
            | ExperimentError::MissingSection { .. }
            | ExperimentError::Geometry(_) => 2,
            _ => 3,
        }
    }
}

// ── scenario schema ─────────────────────────────────────────────────────────

/// RIS panel description. Exactly one of `spacing_m` / `spacing_wavelengths`
/// must be given; `rotation_zyx_deg` lists intrinsic rotations about the
/// z, y, and x axes, applied in that order.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RisConfig {
    pub rows: usize,
    pub cols: usize,
    #[serde(default)]
    pub spacing_m: Option<f64>,
    #[serde(default)]
    pub spacing_wavelengths: Option<f64>,
    pub position: Vec3,
    #[serde(default)]
    pub rotation_zyx_deg: [f64; 3],
}

impl RisConfig {
    pub fn spacing(&self, wavelength: f64) -> Result<f64, ExperimentError> {
        match (self.spacing_m, self.spacing_wavelengths) {
            (Some(m), None) => Ok(m),
            (None, Some(w)) => Ok(w * wavelength),
            _ => Err(ExperimentError::Validation(
                "ris: exactly one of `spacing_m` and `spacing_wavelengths` must be set"
                    .to_string(),
            )),
        }
    }

    pub fn panel(&self, wavelength: f64) -> Result<RisPanel, ExperimentError> {
        let layout = ArrayLayout::new(self.rows, self.cols, self.spacing(wavelength)?)?;
        let [z, y, x] = self.rotation_zyx_deg;
        let pose = Pose::new(self.position, rot_zyx(z, y, x))?;
        Ok(RisPanel::new(layout, pose))
    }
}

/// One RIS pose-error setting of the geometry-mismatch study.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryErrorSetting {
    pub err_pos_m: f64,
    pub err_ori_deg: f64,
}

/// Sweep section of `exp-geo-mismatch`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    /// Transmit powers [dBm]. Bounds are evaluated once at the scenario's
    /// own `tx_power_dbm` and rescaled exactly (the sandwich covariance is
    /// proportional to 1/P and the bias is power-invariant).
    pub power_dbm: Vec<f64>,
    pub error_settings: Vec<GeometryErrorSetting>,
}

/// Sweep section of `exp-failure-bounds`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureSection {
    /// Per-sample SNR points [dB]; the transmit power realizing each SNR is
    /// calibrated on the failure-free cascade at the scenario's power.
    pub snr_db: Vec<f64>,
    pub p_fail: Vec<f64>,
}

/// Section of `exp-jlfd`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JlfdSection {
    pub snr_db: Vec<f64>,
    pub p_fail: f64,
    #[serde(default = "default_jlfd_budget")]
    pub budget: usize,
    #[serde(default = "default_jlfd_fa")]
    pub family_false_alarm: f64,
    /// Half-width of the coarse position search box around the nominal UE.
    #[serde(default = "default_grid_half_width")]
    pub grid_half_width_m: f64,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
}

fn default_jlfd_budget() -> usize {
    JlfdConfig::default().budget
}
fn default_jlfd_fa() -> f64 {
    JlfdConfig::default().family_false_alarm
}
fn default_grid_half_width() -> f64 {
    0.5
}
fn default_grid_points() -> usize {
    9
}

/// Section of `exp-tradeoff`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TradeoffSection {
    pub t_total: f64,
    /// Pilot transmissions; also the number of candidate beams drawn.
    pub t_pilot: f64,
    /// Total energy budget [W·transmissions].
    pub e_total: f64,
    pub p_pilot_dbw: Vec<f64>,
    pub p_fail: Vec<f64>,
    pub region_half_widths_m: [f64; 3],
}

/// Section of `exp-coupling`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSection {
    pub spacing_wavelengths: Vec<f64>,
    /// Relative calibration residual levels; the uncalibrated case is always
    /// evaluated in addition.
    pub calibration_sigmas: Vec<f64>,
    pub n_rx: usize,
    #[serde(default = "default_rx_spacing")]
    pub rx_spacing_wavelengths: f64,
    #[serde(default = "default_z0")]
    pub z0_ohm: f64,
    #[serde(default = "default_loss_resistance")]
    pub loss_resistance_ohm: f64,
    #[serde(default = "default_dipole_length")]
    pub dipole_length_wavelengths: f64,
}

fn default_rx_spacing() -> f64 {
    0.5
}
fn default_z0() -> f64 {
    50.0
}
fn default_loss_resistance() -> f64 {
    5.0
}
fn default_dipole_length() -> f64 {
    0.5
}

/// Complete experiment configuration: shared physical setup plus one
/// optional section per study.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub bs_position: Vec3,
    pub ue_position: Vec3,
    pub ris: RisConfig,
    pub signal: SignalSpec,
    /// Monte-Carlo realization count for the sections that average over
    /// random draws (failure masks, trials, calibration noise).
    #[serde(default = "default_realizations")]
    pub n_realizations: usize,
    #[serde(default)]
    pub geometry: Option<GeometrySection>,
    #[serde(default)]
    pub failures: Option<FailureSection>,
    #[serde(default)]
    pub jlfd: Option<JlfdSection>,
    #[serde(default)]
    pub tradeoff: Option<TradeoffSection>,
    #[serde(default)]
    pub coupling: Option<CouplingSection>,
}

fn default_realizations() -> usize {
    1
}

impl Scenario {
    /// Checks every declared section against its documented invariants and
    /// returns an error naming the violated one.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.signal.validate()?;
        let lam = self.signal.wavelength();
        self.ris.panel(lam)?;
        for (name, p) in [("bs_position", self.bs_position), ("ue_position", self.ue_position)] {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(ExperimentError::Validation(format!(
                    "{name} must be finite"
                )));
            }
        }
        if self.n_realizations == 0 {
            return Err(ExperimentError::Validation(
                "n_realizations must be at least 1".to_string(),
            ));
        }
        if let Some(g) = &self.geometry {
            if g.power_dbm.is_empty() || g.error_settings.is_empty() {
                return Err(ExperimentError::Validation(
                    "geometry: power_dbm and error_settings must be non-empty".to_string(),
                ));
            }
            if g.power_dbm.iter().any(|v| !v.is_finite()) {
                return Err(ExperimentError::Validation(
                    "geometry: power_dbm entries must be finite".to_string(),
                ));
            }
            for s in &g.error_settings {
                if !(s.err_pos_m.is_finite() && s.err_ori_deg.is_finite()) {
                    return Err(ExperimentError::Validation(
                        "geometry: error settings must be finite".to_string(),
                    ));
                }
            }
        }
        if let Some(f) = &self.failures {
            if f.snr_db.is_empty() || f.p_fail.is_empty() {
                return Err(ExperimentError::Validation(
                    "failures: snr_db and p_fail must be non-empty".to_string(),
                ));
            }
            if f.p_fail.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(ExperimentError::Validation(
                    "failures: p_fail entries must lie in [0, 1]".to_string(),
                ));
            }
        }
        if let Some(j) = &self.jlfd {
            if j.snr_db.is_empty() {
                return Err(ExperimentError::Validation(
                    "jlfd: snr_db must be non-empty".to_string(),
                ));
            }
            if !(0.0..=1.0).contains(&j.p_fail) {
                return Err(ExperimentError::Validation(
                    "jlfd: p_fail must lie in [0, 1]".to_string(),
                ));
            }
            if j.budget == 0 || j.grid_points < 2 || !(j.grid_half_width_m > 0.0) {
                return Err(ExperimentError::Validation(
                    "jlfd: budget ≥ 1, grid_points ≥ 2 and grid_half_width_m > 0 required"
                        .to_string(),
                ));
            }
            if !(0.0..1.0).contains(&j.family_false_alarm) {
                return Err(ExperimentError::Validation(
                    "jlfd: family_false_alarm must lie in [0, 1)".to_string(),
                ));
            }
        }
        if let Some(t) = &self.tradeoff {
            if !(t.t_pilot > 0.0 && t.t_pilot < t.t_total) {
                return Err(ExperimentError::Validation(
                    "tradeoff: 0 < t_pilot < t_total required".to_string(),
                ));
            }
            if t.t_pilot.fract() != 0.0 {
                return Err(ExperimentError::Validation(
                    "tradeoff: t_pilot must be an integer (one beam per pilot transmission)"
                        .to_string(),
                ));
            }
            if !(t.e_total.is_finite() && t.e_total > 0.0) {
                return Err(ExperimentError::Validation(
                    "tradeoff: e_total must be positive".to_string(),
                ));
            }
            if t.p_pilot_dbw.is_empty() || t.p_fail.is_empty() {
                return Err(ExperimentError::Validation(
                    "tradeoff: p_pilot_dbw and p_fail must be non-empty".to_string(),
                ));
            }
            if t.p_fail.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(ExperimentError::Validation(
                    "tradeoff: p_fail entries must lie in [0, 1]".to_string(),
                ));
            }
            if t.region_half_widths_m.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(ExperimentError::Validation(
                    "tradeoff: region_half_widths_m must be non-negative and finite".to_string(),
                ));
            }
        }
        if let Some(c) = &self.coupling {
            if c.spacing_wavelengths.is_empty() {
                return Err(ExperimentError::Validation(
                    "coupling: spacing_wavelengths must be non-empty".to_string(),
                ));
            }
            if c.spacing_wavelengths.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
                return Err(ExperimentError::Validation(
                    "coupling: spacing_wavelengths entries must be positive".to_string(),
                ));
            }
            if c.calibration_sigmas.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
                return Err(ExperimentError::Validation(
                    "coupling: calibration_sigmas entries must be non-negative".to_string(),
                ));
            }
            if c.n_rx == 0 {
                return Err(ExperimentError::Validation(
                    "coupling: n_rx must be at least 1".to_string(),
                ));
            }
            if !(c.rx_spacing_wavelengths > 0.0)
                || !(c.z0_ohm > 0.0)
                || !(c.loss_resistance_ohm >= 0.0)
                || !(c.dipole_length_wavelengths > 0.0)
            {
                return Err(ExperimentError::Validation(
                    "coupling: rx spacing, z0 and dipole length must be positive, \
                     loss resistance non-negative"
                        .to_string(),
                ));
            }
        }
        Ok(())
    }
}

/// Reads and validates a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ExperimentError> {
    let text = std::fs::read_to_string(path)?;
    let scenario: Scenario =
        serde_json::from_str(&text).map_err(|e| ExperimentError::Parse {
            message: e.to_string(),
        })?;
    scenario.validate()?;
    Ok(scenario)
}

// ── result rows and CSV ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowStatus {
    Ok,
    /// The sweep point has no feasible configuration (e.g. the pilot phase
    /// overdraws the energy budget); the row is kept with an empty value.
    Infeasible,
    /// The computation at this point did not produce a finite value.
    Diverged,
}

impl RowStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RowStatus::Ok => "ok",
            RowStatus::Infeasible => "infeasible",
            RowStatus::Diverged => "diverged",
        }
    }
}

/// One output record: a metric value at one sweep coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub experiment: &'static str,
    pub metric: &'static str,
    /// Sweep coordinates; every row of an experiment carries the same axis
    /// names, with `None` for axes that do not apply to the metric (the CSV
    /// cell stays empty).
    pub axes: Vec<(&'static str, Option<f64>)>,
    /// `None` for non-ok rows; finite otherwise.
    pub value: Option<f64>,
    pub seed: u64,
    pub n_realizations: usize,
    pub status: RowStatus,
}

impl ResultRow {
    fn ok(
        experiment: &'static str,
        metric: &'static str,
        axes: Vec<(&'static str, Option<f64>)>,
        value: f64,
        seed: u64,
        n_realizations: usize,
    ) -> Self {
        let status = if value.is_finite() {
            RowStatus::Ok
        } else {
            RowStatus::Diverged
        };
        ResultRow {
            experiment,
            metric,
            axes,
            value: status.eq(&RowStatus::Ok).then_some(value),
            seed,
            n_realizations,
            status,
        }
    }
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes rows as UTF-8 CSV with the header
/// `experiment,metric,<axes…>,value,seed,n_realizations,status`. Rows are
/// written in the order given (runners emit them sorted by sweep
/// coordinates); identical rows produce identical bytes, which is what the
/// worker-independence contract is checked against.
pub fn write_csv(rows: &[ResultRow], path: impl AsRef<Path>) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let axis_names: Vec<&'static str> = rows
        .first()
        .map(|r| r.axes.iter().map(|(n, _)| *n).collect())
        .unwrap_or_default();
    let mut header = vec!["experiment", "metric"];
    header.extend(axis_names.iter().copied());
    header.extend(["value", "seed", "n_realizations", "status"]);
    w.write_record(&header)?;
    for row in rows {
        let names: Vec<&'static str> = row.axes.iter().map(|(n, _)| *n).collect();
        if names != axis_names {
            return Err(ExperimentError::Validation(format!(
                "internal: inconsistent axis columns in `{}` rows",
                row.experiment
            )));
        }
        let mut rec = vec![row.experiment.to_string(), row.metric.to_string()];
        rec.extend(row.axes.iter().map(|(_, v)| fmt_cell(*v)));
        rec.push(fmt_cell(row.value));
        rec.push(row.seed.to_string());
        rec.push(row.n_realizations.to_string());
        rec.push(row.status.as_str().to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

// ── experiment registry ─────────────────────────────────────────────────────

/// Name and one-line description of a named experiment.
pub struct ExperimentInfo {
    pub name: &'static str,
    pub description: &'static str,
}

pub const EXPERIMENTS: [ExperimentInfo; 5] = [
    ExperimentInfo {
        name: "exp-geo-mismatch",
        description: "localization bounds vs transmit power under RIS pose errors",
    },
    ExperimentInfo {
        name: "exp-failure-bounds",
        description: "localization bounds vs SNR under random pixel failures",
    },
    ExperimentInfo {
        name: "exp-jlfd",
        description: "joint localization and failure diagnosis vs the failure-agnostic estimator",
    },
    ExperimentInfo {
        name: "exp-tradeoff",
        description: "pilot/data energy trade-off: data rate vs localization bound under failures",
    },
    ExperimentInfo {
        name: "exp-coupling",
        description: "mutual-coupling impact on localization and spectral efficiency vs spacing",
    },
];

/// Runs a named experiment. `workers = 0` uses all cores; any worker count
/// yields identical rows for fixed `(name, scenario, seed)`. `full` lifts
/// the desk-scale reduction (currently: `exp-geo-mismatch` caps the panel at
/// 16×16 elements and 300 subcarriers unless `full` is set).
pub fn run_experiment(
    name: &str,
    scenario: &Scenario,
    seed: u64,
    workers: usize,
    full: bool,
) -> Result<Vec<ResultRow>, ExperimentError> {
    scenario.validate()?;
    let runner: fn(&Scenario, u64, bool) -> Result<Vec<ResultRow>, ExperimentError> = match name
    {
        "exp-geo-mismatch" => run_geo_mismatch,
        "exp-failure-bounds" => run_failure_bounds,
        "exp-jlfd" => run_jlfd,
        "exp-tradeoff" => run_tradeoff,
        "exp-coupling" => run_coupling,
        other => {
            return Err(ExperimentError::UnknownExperiment {
                name: other.to_string(),
                known: EXPERIMENTS
                    .iter()
                    .map(|e| e.name)
                    .collect::<Vec<_>>()
                    .join(", "),
            })
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ExperimentError::Validation(format!("worker pool: {e}")))?;
    pool.install(|| runner(scenario, seed, full))
}

// ── shared helpers ──────────────────────────────────────────────────────────

/// `10^(Δ/10)` power ratio between the reference and target powers.
fn power_ratio(ref_dbm: f64, target_dbm: f64) -> f64 {
    10f64.powf((ref_dbm - target_dbm) / 10.0)
}

/// Mismatch bound at a target power from a fit evaluated at the reference
/// power: the covariance sandwich scales exactly like 1/P and the bias is
/// power-invariant.
fn scaled_lb(tr_ref: f64, bias: f64, ref_dbm: f64, target_dbm: f64) -> f64 {
    (tr_ref * power_ratio(ref_dbm, target_dbm) + bias * bias).sqrt()
}

/// Per-sample SNR `‖μ‖²/(M·σ²)` of a cascade at the true parameters.
fn per_sample_snr(model: &CascadeModel, theta: &ParamVector) -> Result<f64, ExperimentError> {
    let mu = model.mean(theta)?;
    Ok(mu.norm_squared() / (mu.len() as f64 * model.noise_variance()))
}

/// Transmit power [dBm] realizing a target per-sample SNR, calibrated on the
/// given model (SNR is proportional to transmit power).
fn power_for_snr(
    model: &CascadeModel,
    theta: &ParamVector,
    snr_db: f64,
) -> Result<f64, ExperimentError> {
    let snr_ref = per_sample_snr(model, theta)?;
    Ok(model.spec.tx_power_dbm + snr_db - 10.0 * snr_ref.log10())
}

/// Root mean square.
fn rms(values: &[f64]) -> f64 {
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Rebuilds a cascade with the given profiles, keeping every other setting.
fn with_profiles(
    model: &CascadeModel,
    profiles: RisProfile,
) -> Result<CascadeModel, ExperimentError> {
    Ok(CascadeModel::new(model.bs, model.ris, model.spec, profiles)?
        .with_amplitude(model.amplitude)
        .with_phase_model(model.phase_model)
        .with_rx_offsets(model.rx_offsets.clone()))
}

/// Pseudo-true fit of `assumed` against `true_mean`, trying the axis-nudged
/// multistart plus wavelength-spaced offsets along the range direction (the
/// likelihood of a phase-coherent cascade has basins about one wavelength
/// apart in path length).
fn pseudo_true_lambda_multistart<M: MeanModel>(
    true_mean: &nalgebra::DVector<C64>,
    assumed: &M,
    base: &ParamVector,
    wavelength: f64,
    range_dir: Vec3,
) -> Result<PseudoTrueFit, ExperimentError> {
    let mut best = pseudo_true_multistart(true_mean, assumed, base)?;
    for k in [-2.0, -1.0, 1.0, 2.0] {
        let start = ParamVector::new(
            base.ue_position + range_dir * (k * wavelength),
            base.gain(),
        );
        if let Ok(fit) = pseudo_true(true_mean, assumed, &start) {
            if fit.residual_norm < best.residual_norm {
                best = fit;
            }
        }
    }
    Ok(best)
}

// ── exp-geo-mismatch ────────────────────────────────────────────────────────

fn run_geo_mismatch(
    scenario: &Scenario,
    seed: u64,
    full: bool,
) -> Result<Vec<ResultRow>, ExperimentError> {
    let section = scenario
        .geometry
        .as_ref()
        .ok_or(ExperimentError::MissingSection {
            experiment: "exp-geo-mismatch",
            section: "geometry",
        })?;

    // Desk-scale reduction: the full panel/grid is only needed for absolute
    // reference numbers; trends and the machinery are identical at 16×16/300.
    let mut ris_cfg = scenario.ris.clone();
    let mut spec = scenario.signal;
    if !full {
        ris_cfg.rows = ris_cfg.rows.min(16);
        ris_cfg.cols = ris_cfg.cols.min(16);
        spec.n_subcarriers = spec.n_subcarriers.min(300);
    }
    let lam = spec.wavelength();
    let panel = ris_cfg.panel(lam)?;
    let n = panel.n_elements();
    let bs = Pose::new(scenario.bs_position, nalgebra::Matrix3::identity())?;
    let ue = scenario.ue_position;
    let theta_true = ParamVector::new(ue, C64::new(1.0, 0.0));
    let profiles = random_profiles(
        n,
        spec.n_transmissions,
        derive_seed(seed, "exp-geo-mismatch/profiles", 0),
    );
    // Bulk-delay referencing at the nominal UE: each model keeps its own
    // centroid delay there, mimicking timing sync at the nominal position.
    let phase_model = PhaseModel::Wideband {
        ref_point: Some(ue),
    };
    let assumed = CascadeModel::new(bs, panel, spec, profiles.clone())?
        .with_phase_model(phase_model);
    let sigma2 = assumed.noise_variance();
    let p_ref = spec.tx_power_dbm;

    // Matched bound at the reference power; exact 1/√P rescaling below.
    let j = jacobian(&assumed, &theta_true)?;
    let peb_ref = peb(&fim(&j, sigma2)?)?;

    // One pseudo-true fit per error setting (power-invariant), in parallel.
    let fits: Vec<(f64, f64)> = section
        .error_settings
        .par_iter()
        .map(|setting| -> Result<(f64, f64), ExperimentError> {
            let err = GeometryError::new(setting.err_pos_m, setting.err_ori_deg);
            let true_panel = panel.perturbed(err);
            let true_model = CascadeModel::new(bs, true_panel, spec, profiles.clone())?
                .with_phase_model(phase_model);
            let true_mean = true_model.mean(&theta_true)?;
            let fit = pseudo_true_multistart(&true_mean, &assumed, &theta_true)?;
            let report = mcrb_lb(&fit.params, &assumed, &true_mean, sigma2, ue)?;
            Ok((report.mcrb_position.trace(), report.asymptotic_peb))
        })
        .collect::<Result<_, _>>()?;

    let axes = |power: Option<f64>, s: Option<&GeometryErrorSetting>| {
        vec![
            ("power_dbm", power),
            ("err_pos_m", Some(s.map_or(0.0, |s| s.err_pos_m))),
            ("err_ori_deg", Some(s.map_or(0.0, |s| s.err_ori_deg))),
        ]
    };

    let mut rows = Vec::new();
    for &p in &section.power_dbm {
        let v = peb_ref * power_ratio(p_ref, p).sqrt();
        rows.push(ResultRow::ok(
            "exp-geo-mismatch",
            "peb",
            axes(Some(p), None),
            v,
            seed,
            1,
        ));
    }
    for (setting, (tr_ref, bias)) in section.error_settings.iter().zip(&fits) {
        for &p in &section.power_dbm {
            let v = scaled_lb(*tr_ref, *bias, p_ref, p);
            rows.push(ResultRow::ok(
                "exp-geo-mismatch",
                "lb",
                axes(Some(p), Some(setting)),
                v,
                seed,
                1,
            ));
        }
    }
    // Asymptotes: the matched model's (exactly zero bias) plus one per error
    // setting, unless the zero setting is itself part of the sweep.
    let has_zero_setting = section
        .error_settings
        .iter()
        .any(|s| s.err_pos_m == 0.0 && s.err_ori_deg == 0.0);
    if !has_zero_setting {
        rows.push(ResultRow::ok(
            "exp-geo-mismatch",
            "asym_peb",
            axes(None, None),
            0.0,
            seed,
            1,
        ));
    }
    for (setting, (_, bias)) in section.error_settings.iter().zip(&fits) {
        rows.push(ResultRow::ok(
            "exp-geo-mismatch",
            "asym_peb",
            axes(None, Some(setting)),
            *bias,
            seed,
            1,
        ));
    }
    Ok(rows)
}

// ── exp-failure-bounds ──────────────────────────────────────────────────────

fn run_failure_bounds(
    scenario: &Scenario,
    seed: u64,
    _full: bool,
) -> Result<Vec<ResultRow>, ExperimentError> {
    let section = scenario
        .failures
        .as_ref()
        .ok_or(ExperimentError::MissingSection {
            experiment: "exp-failure-bounds",
            section: "failures",
        })?;
    let spec = scenario.signal;
    let lam = spec.wavelength();
    let panel = scenario.ris.panel(lam)?;
    let n = panel.n_elements();
    let bs = Pose::new(scenario.bs_position, nalgebra::Matrix3::identity())?;
    let ue = scenario.ue_position;
    let theta_true = ParamVector::new(ue, C64::new(1.0, 0.0));
    let profiles = random_profiles(
        n,
        spec.n_transmissions,
        derive_seed(seed, "exp-failure-bounds/profiles", 0),
    );
    let assumed = CascadeModel::new(bs, panel, spec, profiles)?;
    let sigma2 = assumed.noise_variance();
    let p_ref = spec.tx_power_dbm;
    let n_real = scenario.n_realizations;

    // Matched bound at the reference power.
    let j = jacobian(&assumed, &theta_true)?;
    let peb_ref = peb(&fim(&j, sigma2)?)?;

    // SNR → power calibration on the failure-free cascade.
    let snr_ref_db = 10.0 * per_sample_snr(&assumed, &theta_true)?.log10();

    // One pseudo-true fit per (p_fail, mask realization); the sandwich
    // trace and bias then rescale exactly across the SNR sweep. Masks are
    // common across SNR points and nested across p_fail values (common
    // random numbers), so curves differ only through the failure level.
    let grid: Vec<(usize, usize)> = (0..section.p_fail.len())
        .flat_map(|pi| (0..n_real).map(move |t| (pi, t)))
        .collect();
    let fits: Vec<(f64, f64)> = grid
        .par_iter()
        .map(|&(pi, t)| -> Result<(f64, f64), ExperimentError> {
            let p_fail = section.p_fail[pi];
            let mask = sample_failure_mask(
                n,
                p_fail,
                derive_seed(seed, "exp-failure-bounds/mask", t as u64),
            );
            let (true_mean, fit_params) = if mask.n_failed() == 0 {
                (assumed.mean(&theta_true)?, theta_true)
            } else {
                let true_model =
                    with_profiles(&assumed, apply_failure(&assumed.profiles, &mask)?)?;
                let true_mean = true_model.mean(&theta_true)?;
                let fit = pseudo_true_multistart(&true_mean, &assumed, &theta_true)?;
                (true_mean, fit.params)
            };
            let report = mcrb_lb(&fit_params, &assumed, &true_mean, sigma2, ue)?;
            Ok((report.mcrb_position.trace(), report.asymptotic_peb))
        })
        .collect::<Result<_, _>>()?;

    let axes = |snr: f64, p_fail: f64| vec![("snr_db", Some(snr)), ("p_fail", Some(p_fail))];

    let mut rows = Vec::new();
    for &s in &section.snr_db {
        let p_dbm = p_ref + s - snr_ref_db;
        let v = peb_ref * power_ratio(p_ref, p_dbm).sqrt();
        rows.push(ResultRow::ok(
            "exp-failure-bounds",
            "peb",
            axes(s, 0.0),
            v,
            seed,
            1,
        ));
    }
    for (pi, &p_fail) in section.p_fail.iter().enumerate() {
        for &s in &section.snr_db {
            let p_dbm = p_ref + s - snr_ref_db;
            let samples: Vec<f64> = (0..n_real)
                .map(|t| {
                    let (tr_ref, bias) = fits[pi * n_real + t];
                    scaled_lb(tr_ref, bias, p_ref, p_dbm)
                })
                .collect();
            rows.push(ResultRow::ok(
                "exp-failure-bounds",
                "lb",
                axes(s, p_fail),
                rms(&samples),
                seed,
                n_real,
            ));
        }
    }
    Ok(rows)
}

// ── exp-jlfd ────────────────────────────────────────────────────────────────

fn run_jlfd(scenario: &Scenario, seed: u64, _full: bool) -> Result<Vec<ResultRow>, ExperimentError> {
    let section = scenario
        .jlfd
        .as_ref()
        .ok_or(ExperimentError::MissingSection {
            experiment: "exp-jlfd",
            section: "jlfd",
        })?;
    let spec = scenario.signal;
    let lam = spec.wavelength();
    let panel = scenario.ris.panel(lam)?;
    let n = panel.n_elements();
    let bs = Pose::new(scenario.bs_position, nalgebra::Matrix3::identity())?;
    let ue = scenario.ue_position;
    let theta_true = ParamVector::new(ue, C64::new(1.0, 0.0));
    let profiles = random_profiles(
        n,
        spec.n_transmissions,
        derive_seed(seed, "exp-jlfd/profiles", 0),
    );
    let reference = CascadeModel::new(bs, panel, spec, profiles)?;
    let n_trials = scenario.n_realizations;
    let grid = SearchGrid::new(
        ue,
        Vec3::from_element(section.grid_half_width_m),
        [section.grid_points; 3],
    )?;
    let config = JlfdConfig {
        budget: section.budget,
        family_false_alarm: section.family_false_alarm,
    };

    let axes = |snr: f64| vec![("snr_db", Some(snr)), ("p_fail", Some(section.p_fail))];
    let mut rows = Vec::new();
    for &snr in &section.snr_db {
        let p_dbm = power_for_snr(&reference, &theta_true, snr)?;
        let spec_at = spec.with_tx_power_dbm(p_dbm);
        let assumed = with_profiles(
            &CascadeModel::new(bs, panel, spec_at, reference.profiles.clone())?,
            reference.profiles.clone(),
        )?;
        let sigma2 = assumed.noise_variance();

        // Failure-free bound.
        let j = jacobian(&assumed, &theta_true)?;
        let peb_free = peb(&fim(&j, sigma2)?)?;

        // Monte-Carlo trials: one failure mask + one noise draw each.
        let trials: Vec<(f64, f64, f64)> = (0..n_trials)
            .into_par_iter()
            .map(|t| -> Result<(f64, f64, f64), ExperimentError> {
                let mask = sample_failure_mask(
                    n,
                    section.p_fail,
                    derive_seed(seed, "exp-jlfd/mask", t as u64),
                );
                let true_model =
                    with_profiles(&assumed, apply_failure(&assumed.profiles, &mask)?)?;
                let true_mean_obs = true_model.mean_at(ue, C64::new(1.0, 0.0))?;
                let obs = add_noise(&true_mean_obs, derive_seed(seed, "exp-jlfd/noise", t as u64));

                let agnostic = ml_localize(&obs, &assumed, &grid)?;
                let diagnosed = jlfd(&obs, &assumed, &grid, &config)?;

                // Mismatch bound for the agnostic estimator on this mask.
                let true_mean = nalgebra::DVector::from_column_slice(&true_mean_obs.data);
                let lb = if mask.n_failed() == 0 {
                    peb_free
                } else {
                    let fit = pseudo_true_multistart(&true_mean, &assumed, &theta_true)?;
                    mcrb_lb(&fit.params, &assumed, &true_mean, sigma2, ue)?.lb
                };
                Ok((
                    (agnostic.position - ue).norm_squared(),
                    (diagnosed.position - ue).norm_squared(),
                    lb,
                ))
            })
            .collect::<Result<_, _>>()?;

        let agn_sq: Vec<f64> = trials.iter().map(|t| t.0).collect();
        let jl_sq: Vec<f64> = trials.iter().map(|t| t.1).collect();
        let lbs: Vec<f64> = trials.iter().map(|t| t.2).collect();
        rows.push(ResultRow::ok(
            "exp-jlfd",
            "peb",
            axes(snr),
            peb_free,
            seed,
            1,
        ));
        rows.push(ResultRow::ok(
            "exp-jlfd",
            "lb",
            axes(snr),
            rms(&lbs),
            seed,
            n_trials,
        ));
        rows.push(ResultRow::ok(
            "exp-jlfd",
            "rmse_agnostic",
            axes(snr),
            mean(&agn_sq).sqrt(),
            seed,
            n_trials,
        ));
        rows.push(ResultRow::ok(
            "exp-jlfd",
            "rmse_jlfd",
            axes(snr),
            mean(&jl_sq).sqrt(),
            seed,
            n_trials,
        ));
    }
    Ok(rows)
}

// ── exp-tradeoff ────────────────────────────────────────────────────────────

fn run_tradeoff(
    scenario: &Scenario,
    seed: u64,
    _full: bool,
) -> Result<Vec<ResultRow>, ExperimentError> {
    let section = scenario
        .tradeoff
        .as_ref()
        .ok_or(ExperimentError::MissingSection {
            experiment: "exp-tradeoff",
            section: "tradeoff",
        })?;
    let spec = scenario.signal;
    let lam = spec.wavelength();
    let panel = scenario.ris.panel(lam)?;
    let n = panel.n_elements();
    let bs = Pose::new(scenario.bs_position, nalgebra::Matrix3::identity())?;
    let ue = scenario.ue_position;
    let theta_true = ParamVector::new(ue, C64::new(1.0, 0.0));
    let t_pilot = section.t_pilot as usize;
    let n_real = scenario.n_realizations;
    let region = UncertaintyRegion::new(ue, Vec3::from_row_slice(&section.region_half_widths_m))?;

    // Carrier model used for beam evaluation and the data link; its transmit
    // power is irrelevant (selection compares powers, the rate uses the
    // plan's data power).
    let base = CascadeModel::new(
        bs,
        panel,
        SignalSpec {
            n_transmissions: 1,
            ..spec
        },
        RisProfile::new(vec![vec![C64::new(1.0, 0.0); n]])?,
    )?;

    // Per (p_fail, trial): draw the mask and candidate beams (both
    // independent of pilot power), select, and fit the pilot-phase
    // mismatch bound once at a reference pilot power. Rate and bound are
    // then exact functions of the swept pilot power.
    let p_ref_dbw = 10.0; // reference pilot power for the fit: 10 W
    let grid: Vec<(usize, usize)> = (0..section.p_fail.len())
        .flat_map(|pi| (0..n_real).map(move |t| (pi, t)))
        .collect();
    struct TrialFit {
        beam: RisProfile,
        mask: crate::channel::FailureMask,
        tr_ref: f64,
        bias: f64,
    }
    let fits: Vec<TrialFit> = grid
        .par_iter()
        .map(|&(pi, t)| -> Result<TrialFit, ExperimentError> {
            let p_fail = section.p_fail[pi];
            let mask = sample_failure_mask(
                n,
                p_fail,
                derive_seed(seed, "exp-tradeoff/mask", t as u64),
            );
            let selection = pilot_beam_select(
                &region,
                t_pilot,
                &base,
                ue,
                &mask,
                derive_seed(seed, "exp-tradeoff/beams", t as u64),
            )?;

            // Pilot-phase cascade: the T_p candidate beams at the reference
            // pilot power; the estimator assumes them healthy.
            let spec_pilot = SignalSpec {
                n_transmissions: t_pilot,
                tx_power_dbm: p_ref_dbw + 30.0,
                ..spec
            };
            let assumed = CascadeModel::new(bs, panel, spec_pilot, selection.candidates.clone())?;
            let (tr_ref, bias) = if mask.n_failed() == 0 {
                let j = jacobian(&assumed, &theta_true)?;
                let inv_tr = mcrb_lb(
                    &theta_true,
                    &assumed,
                    &assumed.mean(&theta_true)?,
                    assumed.noise_variance(),
                    ue,
                )?;
                // Matched case: sandwich equals the inverse FIM, bias is zero.
                let _ = j;
                (inv_tr.mcrb_position.trace(), inv_tr.asymptotic_peb)
            } else {
                let true_model =
                    with_profiles(&assumed, apply_failure(&selection.candidates, &mask)?)?;
                let true_mean = true_model.mean(&theta_true)?;
                let fit = pseudo_true_multistart(&true_mean, &assumed, &theta_true)?;
                let report =
                    mcrb_lb(&fit.params, &assumed, &true_mean, assumed.noise_variance(), ue)?;
                (report.mcrb_position.trace(), report.asymptotic_peb)
            };
            Ok(TrialFit {
                beam: selection.selected_beam(),
                mask,
                tr_ref,
                bias,
            })
        })
        .collect::<Result<_, _>>()?;

    let axes =
        |p_dbw: f64, p_fail: f64| vec![("p_pilot_dbw", Some(p_dbw)), ("p_fail", Some(p_fail))];

    let mut rows = Vec::new();
    for &p_dbw in &section.p_pilot_dbw {
        let p_pilot_w = 10f64.powf(p_dbw / 10.0);
        let plan = energy_split(section.t_total, section.t_pilot, p_pilot_w, section.e_total);
        for (pi, &p_fail) in section.p_fail.iter().enumerate() {
            match &plan {
                Err(LinkError::InfeasibleSplit { .. }) => {
                    for metric in ["rate", "lb"] {
                        rows.push(ResultRow {
                            experiment: "exp-tradeoff",
                            metric: if metric == "rate" { "rate" } else { "lb" },
                            axes: axes(p_dbw, p_fail),
                            value: None,
                            seed,
                            n_realizations: n_real,
                            status: RowStatus::Infeasible,
                        });
                    }
                }
                Err(e) => {
                    return Err(ExperimentError::Validation(format!(
                        "tradeoff plan at {p_dbw} dBW: {e}"
                    )))
                }
                Ok(plan) => {
                    let mut rates = Vec::with_capacity(n_real);
                    let mut lbs = Vec::with_capacity(n_real);
                    for t in 0..n_real {
                        let fit = &fits[pi * n_real + t];
                        rates.push(comm_rate(plan, &fit.beam, &base, ue, &fit.mask)?);
                        lbs.push(scaled_lb(
                            fit.tr_ref,
                            fit.bias,
                            p_ref_dbw + 30.0,
                            p_dbw + 30.0,
                        ));
                    }
                    rows.push(ResultRow::ok(
                        "exp-tradeoff",
                        "rate",
                        axes(p_dbw, p_fail),
                        mean(&rates),
                        seed,
                        n_real,
                    ));
                    rows.push(ResultRow::ok(
                        "exp-tradeoff",
                        "lb",
                        axes(p_dbw, p_fail),
                        rms(&lbs),
                        seed,
                        n_real,
                    ));
                }
            }
        }
    }
    Ok(rows)
}

// ── exp-coupling ────────────────────────────────────────────────────────────

fn run_coupling(
    scenario: &Scenario,
    seed: u64,
    _full: bool,
) -> Result<Vec<ResultRow>, ExperimentError> {
    let section = scenario
        .coupling
        .as_ref()
        .ok_or(ExperimentError::MissingSection {
            experiment: "exp-coupling",
            section: "coupling",
        })?;
    let spec = scenario.signal;
    let lam = spec.wavelength();
    let bs = Pose::new(scenario.bs_position, nalgebra::Matrix3::identity())?;
    let ue = scenario.ue_position;
    let theta_true = ParamVector::new(ue, C64::new(1.0, 0.0));
    let n = scenario.ris.rows * scenario.ris.cols;
    let n_real = scenario.n_realizations;
    let rx_offsets: Vec<Vec3> = (0..section.n_rx)
        .map(|r| Vec3::new(0.0, r as f64 * section.rx_spacing_wavelengths * lam, 0.0))
        .collect();
    let profiles = random_profiles(
        n,
        spec.n_transmissions,
        derive_seed(seed, "exp-coupling/profiles", 0),
    );
    let se_config = SeConfig::default();

    let axes =
        |sp: f64, sigma: Option<f64>| vec![("spacing_wavelengths", Some(sp)), ("sigma", sigma)];

    // Evaluate spacings in parallel; each produces its own row block.
    let blocks: Vec<Vec<ResultRow>> = section
        .spacing_wavelengths
        .par_iter()
        .enumerate()
        .map(|(si, &sp)| -> Result<Vec<ResultRow>, ExperimentError> {
            let mut ris_cfg = scenario.ris.clone();
            ris_cfg.spacing_m = Some(sp * lam);
            ris_cfg.spacing_wavelengths = None;
            let panel = ris_cfg.panel(lam)?;
            let s_true = z_to_s(
                &mutual_impedance_matrix(
                    &panel.layout,
                    lam,
                    section.dipole_length_wavelengths * lam,
                    section.z0_ohm,
                )?
                .with_loss_resistance(section.loss_resistance_ohm)?,
            )?;

            let diagonal = CascadeModel::new(bs, panel, spec, profiles.clone())?
                .with_rx_offsets(rx_offsets.clone());
            let ops_true = coupled_ops(&profiles, &s_true)?;
            let true_model = diagonal.clone().with_coupled_operators(ops_true)?;
            let true_mean = true_model.mean(&theta_true)?;
            let range_dir = (ue - true_model.ris.centroid()).normalize();

            let mut rows = Vec::new();

            // Uncalibrated: the estimator ignores coupling entirely.
            let fit = pseudo_true_lambda_multistart(
                &true_mean,
                &diagonal,
                &theta_true,
                lam,
                range_dir,
            )?;
            rows.push(ResultRow::ok(
                "exp-coupling",
                "asym_peb",
                axes(sp, None),
                (fit.params.ue_position - ue).norm(),
                seed,
                1,
            ));

            // Calibrated at each residual level, averaged over noisy draws.
            for &sigma in &section.calibration_sigmas {
                let mut biases = Vec::with_capacity(n_real);
                for d in 0..n_real {
                    let cal_seed =
                        derive_seed(seed, "exp-coupling/calib", (si * n_real + d) as u64);
                    let s_hat = noisy_calibration(&s_true, sigma, cal_seed).s_hat;
                    let assumed = diagonal
                        .clone()
                        .with_coupled_operators(coupled_ops(&profiles, &s_hat)?)?;
                    let fit = pseudo_true_lambda_multistart(
                        &true_mean,
                        &assumed,
                        &theta_true,
                        lam,
                        range_dir,
                    )?;
                    biases.push((fit.params.ue_position - ue).norm());
                }
                rows.push(ResultRow::ok(
                    "exp-coupling",
                    "asym_peb",
                    axes(sp, Some(sigma)),
                    rms(&biases),
                    seed,
                    n_real,
                ));
            }

            // Spectral efficiency: single-carrier SIMO model.
            let se_model = CascadeModel::new(
                bs,
                panel,
                SignalSpec {
                    n_subcarriers: 1,
                    n_transmissions: 1,
                    ..spec
                },
                RisProfile::new(vec![vec![C64::new(1.0, 0.0); n]])?,
            )?
            .with_rx_offsets(rx_offsets.clone());
            let s_zero = ScatterMatrix::zero(n, section.z0_ohm);
            let se_unc = spectral_efficiency(&se_model, &s_true, &s_zero, ue, &se_config)?;
            rows.push(ResultRow::ok(
                "exp-coupling",
                "se",
                axes(sp, None),
                se_unc.se_bits,
                seed,
                1,
            ));
            for &sigma in &section.calibration_sigmas {
                let mut ses = Vec::with_capacity(n_real);
                for d in 0..n_real {
                    let cal_seed =
                        derive_seed(seed, "exp-coupling/calib", (si * n_real + d) as u64);
                    let s_hat = noisy_calibration(&s_true, sigma, cal_seed).s_hat;
                    let se = spectral_efficiency(&se_model, &s_true, &s_hat, ue, &se_config)?;
                    ses.push(se.se_bits);
                }
                rows.push(ResultRow::ok(
                    "exp-coupling",
                    "se",
                    axes(sp, Some(sigma)),
                    mean(&ses),
                    seed,
                    n_real,
                ));
            }
            Ok(rows)
        })
        .collect::<Result<_, _>>()?;

    Ok(blocks.into_iter().flatten().collect())
}

/// Per-transmission coupled RIS operators for a commanded profile set.
fn coupled_ops(
    profiles: &RisProfile,
    s: &ScatterMatrix,
) -> Result<Vec<nalgebra::DMatrix<C64>>, ExperimentError> {
    profiles
        .iter()
        .map(|t| coupled_ris_operator(t, s).map_err(ExperimentError::from))
        .collect()
}

// ── tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny_geo_scenario() -> Scenario {
        serde_json::from_str(
            r#"{
                "name": "tiny-geo",
                "bs_position": [5.0, 0.0, 3.0],
                "ue_position": [-2.5, 2.5, 0.0],
                "ris": {
                    "rows": 4, "cols": 4, "spacing_wavelengths": 0.5,
                    "position": [0.0, -5.0, 2.5], "rotation_zyx_deg": [0.0, 0.0, -90.0]
                },
                "signal": {
                    "carrier_hz": 28e9, "bandwidth_hz": 4e8,
                    "n_subcarriers": 16, "n_transmissions": 8,
                    "tx_power_dbm": 30.0,
                    "noise_psd_dbm_hz": -173.855, "noise_figure_db": 10.0
                },
                "geometry": {
                    "power_dbm": [0.0, 10.0, 20.0],
                    "error_settings": [
                        {"err_pos_m": 0.02, "err_ori_deg": 0.0},
                        {"err_pos_m": 0.0, "err_ori_deg": 0.2}
                    ]
                }
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn scenario_json_round_trips() {
        let sc = tiny_geo_scenario();
        let text = serde_json::to_string(&sc).unwrap();
        let back: Scenario = serde_json::from_str(&text).unwrap();
        assert_eq!(back.name, sc.name);
        assert_eq!(back.ris.rows, 4);
        assert_eq!(back.signal.n_subcarriers, 16);
    }

    #[test]
    fn load_scenario_reports_missing_fields_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.json");
        std::fs::write(&path, r#"{"name": "x"}"#).unwrap();
        let err = load_scenario(&path).unwrap_err();
        match err {
            ExperimentError::Parse { message } => {
                assert!(message.contains("bs_position"), "message: {message}")
            }
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_scenario_rejects_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("extra.json");
        let mut sc = serde_json::to_value(tiny_geo_scenario()).unwrap();
        sc.as_object_mut()
            .unwrap()
            .insert("surprise".to_string(), serde_json::json!(1));
        std::fs::write(&path, serde_json::to_string(&sc).unwrap()).unwrap();
        let err = load_scenario(&path).unwrap_err();
        assert!(matches!(err, ExperimentError::Parse { .. }));
    }

    #[test]
    fn zero_spacing_is_a_named_validation_error() {
        let mut sc = tiny_geo_scenario();
        sc.ris.spacing_wavelengths = Some(0.0);
        let err = sc.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("spacing"), "message: {msg}");
    }

    #[test]
    fn spacing_must_be_given_exactly_once() {
        let mut sc = tiny_geo_scenario();
        sc.ris.spacing_m = Some(0.005);
        assert!(matches!(
            sc.validate(),
            Err(ExperimentError::Validation(_))
        ));
        sc.ris.spacing_m = None;
        sc.ris.spacing_wavelengths = None;
        assert!(matches!(
            sc.validate(),
            Err(ExperimentError::Validation(_))
        ));
    }

    #[test]
    fn unknown_experiment_names_are_rejected_with_the_known_list() {
        let sc = tiny_geo_scenario();
        let err = run_experiment("exp-nope", &sc, 1, 1, false).unwrap_err();
        match err {
            ExperimentError::UnknownExperiment { name, known } => {
                assert_eq!(name, "exp-nope");
                assert!(known.contains("exp-geo-mismatch"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn a_missing_section_is_a_named_error() {
        let mut sc = tiny_geo_scenario();
        sc.geometry = None;
        let err = run_experiment("exp-geo-mismatch", &sc, 1, 1, false).unwrap_err();
        match err {
            ExperimentError::MissingSection {
                experiment,
                section,
            } => {
                assert_eq!(experiment, "exp-geo-mismatch");
                assert_eq!(section, "geometry");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn geo_mismatch_emits_the_full_sweep_grid() {
        let sc = tiny_geo_scenario();
        let rows = run_experiment("exp-geo-mismatch", &sc, 7, 1, false).unwrap();
        // 3 matched PEB rows + 2 settings × 3 powers LB rows + 3 asymptotes
        // (zero-error + 2 settings).
        assert_eq!(rows.len(), 3 + 6 + 3);
        assert_eq!(rows.iter().filter(|r| r.metric == "peb").count(), 3);
        assert_eq!(rows.iter().filter(|r| r.metric == "lb").count(), 6);
        assert_eq!(rows.iter().filter(|r| r.metric == "asym_peb").count(), 3);
        assert!(rows.iter().all(|r| r.status == RowStatus::Ok));
    }

    #[test]
    fn matched_peb_follows_the_exact_power_law() {
        let sc = tiny_geo_scenario();
        let rows = run_experiment("exp-geo-mismatch", &sc, 7, 1, false).unwrap();
        let peb: Vec<f64> = rows
            .iter()
            .filter(|r| r.metric == "peb")
            .map(|r| r.value.unwrap())
            .collect();
        // Powers 0, 10, 20 dBm: each decade of power shrinks the bound 10×
        // in standard deviation… i.e. √10 per 10 dB.
        assert_relative_eq!(peb[0] / peb[1], 10f64.sqrt(), max_relative = 1e-12);
        assert_relative_eq!(peb[1] / peb[2], 10f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn the_mismatch_bound_saturates_at_its_asymptote() {
        let mut sc = tiny_geo_scenario();
        sc.geometry.as_mut().unwrap().power_dbm = vec![-10.0, 60.0];
        let rows = run_experiment("exp-geo-mismatch", &sc, 7, 1, false).unwrap();
        let lb_hi = rows
            .iter()
            .find(|r| {
                r.metric == "lb"
                    && r.axes[0].1 == Some(60.0)
                    && r.axes[1].1 == Some(0.02)
            })
            .unwrap()
            .value
            .unwrap();
        let asym = rows
            .iter()
            .find(|r| {
                r.metric == "asym_peb" && r.axes[1].1 == Some(0.02) && r.axes[2].1 == Some(0.0)
            })
            .unwrap()
            .value
            .unwrap();
        assert!(lb_hi >= asym);
        assert!(lb_hi / asym < 1.05, "lb {lb_hi} vs asymptote {asym}");
    }

    #[test]
    fn worker_count_does_not_change_the_rows() {
        let sc = tiny_geo_scenario();
        let one = run_experiment("exp-geo-mismatch", &sc, 42, 1, false).unwrap();
        let many = run_experiment("exp-geo-mismatch", &sc, 42, 4, false).unwrap();
        assert_eq!(one, many);
    }

    #[test]
    fn csv_bytes_are_deterministic() {
        let sc = tiny_geo_scenario();
        let rows = run_experiment("exp-geo-mismatch", &sc, 42, 2, false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        write_csv(&rows, &p1).unwrap();
        write_csv(&rows, &p2).unwrap();
        let (b1, b2) = (std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert!(!b1.is_empty());
        assert_eq!(b1, b2);
        let text = String::from_utf8(b1).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(
            header,
            "experiment,metric,power_dbm,err_pos_m,err_ori_deg,value,seed,n_realizations,status"
        );
        assert!(!text.contains("NaN"));
    }

    fn tiny_failure_scenario() -> Scenario {
        serde_json::from_str(
            r#"{
                "name": "tiny-failures",
                "bs_position": [-5.0, 5.0, 5.0],
                "ue_position": [1.7, 1.7, 1.7],
                "ris": {
                    "rows": 6, "cols": 6, "spacing_wavelengths": 0.5,
                    "position": [0.0, 0.0, 0.0]
                },
                "signal": {
                    "carrier_hz": 28e9, "bandwidth_hz": 1e8,
                    "n_subcarriers": 8, "n_transmissions": 10,
                    "tx_power_dbm": 10.0,
                    "noise_psd_dbm_hz": -173.855, "noise_figure_db": 10.0
                },
                "n_realizations": 4,
                "failures": { "snr_db": [0.0, 30.0], "p_fail": [0.01, 0.05] }
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn failure_bounds_cover_the_grid_and_scale_with_snr() {
        let sc = tiny_failure_scenario();
        let rows = run_experiment("exp-failure-bounds", &sc, 3, 1, false).unwrap();
        // 2 PEB rows + 2 p_fail × 2 SNR LB rows.
        assert_eq!(rows.len(), 2 + 4);
        let peb0 = rows
            .iter()
            .find(|r| r.metric == "peb" && r.axes[0].1 == Some(0.0))
            .unwrap()
            .value
            .unwrap();
        let peb30 = rows
            .iter()
            .find(|r| r.metric == "peb" && r.axes[0].1 == Some(30.0))
            .unwrap()
            .value
            .unwrap();
        // Exact 1/√SNR law by construction of the power calibration.
        assert_relative_eq!(peb0 / peb30, 10f64.powf(1.5), max_relative = 1e-9);
        // The mismatch bound can only exceed the matched bound, and decreases
        // with SNR.
        for p in [0.01, 0.05] {
            let lb0 = rows
                .iter()
                .find(|r| r.metric == "lb" && r.axes[0].1 == Some(0.0) && r.axes[1].1 == Some(p))
                .unwrap()
                .value
                .unwrap();
            let lb30 = rows
                .iter()
                .find(|r| {
                    r.metric == "lb" && r.axes[0].1 == Some(30.0) && r.axes[1].1 == Some(p)
                })
                .unwrap()
                .value
                .unwrap();
            assert!(lb0 > lb30);
            assert!(lb30 >= peb30 * 0.999);
        }
    }

    fn tiny_tradeoff_scenario() -> Scenario {
        serde_json::from_str(
            r#"{
                "name": "tiny-tradeoff",
                "bs_position": [-4.0, 4.0, 4.0],
                "ue_position": [2.0, 2.0, 2.0],
                "ris": {
                    "rows": 6, "cols": 6, "spacing_wavelengths": 0.5,
                    "position": [0.0, 0.0, 0.0]
                },
                "signal": {
                    "carrier_hz": 28e9, "bandwidth_hz": 1e8,
                    "n_subcarriers": 8, "n_transmissions": 6,
                    "tx_power_dbm": 10.0,
                    "noise_psd_dbm_hz": -173.855, "noise_figure_db": 10.0
                },
                "n_realizations": 3,
                "tradeoff": {
                    "t_total": 30.0, "t_pilot": 6.0, "e_total": 300.0,
                    "p_pilot_dbw": [0.0, 10.0, 20.0],
                    "p_fail": [0.0, 0.02],
                    "region_half_widths_m": [0.3, 0.3, 0.3]
                }
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn tradeoff_marks_overdrawn_pilot_powers_infeasible() {
        // 20 dBW = 100 W over 6 pilots needs 600 W·transmissions; the budget
        // is 300, so that sweep point must be kept but marked.
        let sc = tiny_tradeoff_scenario();
        let rows = run_experiment("exp-tradeoff", &sc, 5, 1, false).unwrap();
        assert_eq!(rows.len(), 3 * 2 * 2);
        let infeasible: Vec<_> = rows
            .iter()
            .filter(|r| r.status == RowStatus::Infeasible)
            .collect();
        assert_eq!(infeasible.len(), 4); // rate+lb × 2 p_fail at 20 dBW
        assert!(infeasible.iter().all(|r| r.axes[0].1 == Some(20.0)));
        assert!(infeasible.iter().all(|r| r.value.is_none()));
        // Feasible rows carry finite values.
        assert!(rows
            .iter()
            .filter(|r| r.status == RowStatus::Ok)
            .all(|r| r.value.unwrap().is_finite()));
    }

    #[test]
    fn tradeoff_bound_tightens_with_pilot_power_while_rate_drops() {
        let sc = tiny_tradeoff_scenario();
        let rows = run_experiment("exp-tradeoff", &sc, 5, 1, false).unwrap();
        let get = |metric: &str, p_dbw: f64, p_fail: f64| {
            rows.iter()
                .find(|r| {
                    r.metric == metric
                        && r.axes[0].1 == Some(p_dbw)
                        && r.axes[1].1 == Some(p_fail)
                })
                .unwrap()
                .value
                .unwrap()
        };
        // More pilot power → tighter localization bound at p_fail = 0…
        assert!(get("lb", 10.0, 0.0) < get("lb", 0.0, 0.0));
        // …and less data energy → lower rate.
        assert!(get("rate", 10.0, 0.0) < get("rate", 0.0, 0.0));
    }

    fn tiny_coupling_scenario() -> Scenario {
        serde_json::from_str(
            r#"{
                "name": "tiny-coupling",
                "bs_position": [2.0, 0.5, 3.0],
                "ue_position": [-1.5, 1.0, 2.5],
                "ris": {
                    "rows": 1, "cols": 8, "spacing_wavelengths": 0.5,
                    "position": [0.0, 0.0, 0.0]
                },
                "signal": {
                    "carrier_hz": 30e9, "bandwidth_hz": 1e6,
                    "n_subcarriers": 1, "n_transmissions": 6,
                    "tx_power_dbm": 40.0,
                    "noise_psd_dbm_hz": -173.855, "noise_figure_db": 10.0
                },
                "n_realizations": 2,
                "coupling": {
                    "spacing_wavelengths": [0.5, 0.125],
                    "calibration_sigmas": [0.01],
                    "n_rx": 2
                }
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn coupling_rows_cover_both_metrics_at_every_spacing() {
        let sc = tiny_coupling_scenario();
        let rows = run_experiment("exp-coupling", &sc, 11, 1, false).unwrap();
        // Per spacing: asym_peb (uncal + 1 sigma) + se (uncal + 1 sigma).
        assert_eq!(rows.len(), 2 * 4);
        for &sp in &[0.5, 0.125] {
            for metric in ["asym_peb", "se"] {
                let uncal = rows.iter().find(|r| {
                    r.metric == metric && r.axes[0].1 == Some(sp) && r.axes[1].1.is_none()
                });
                let cal = rows.iter().find(|r| {
                    r.metric == metric && r.axes[0].1 == Some(sp) && r.axes[1].1 == Some(0.01)
                });
                assert!(uncal.is_some() && cal.is_some());
            }
        }
        assert!(rows.iter().all(|r| r.status == RowStatus::Ok));
        // Perfectly spaced λ/2 elements couple weakly: the uncalibrated
        // asymptotic bias should stay small compared to the dense case.
        let bias_half = rows
            .iter()
            .find(|r| r.metric == "asym_peb" && r.axes[0].1 == Some(0.5) && r.axes[1].1.is_none())
            .unwrap()
            .value
            .unwrap();
        let bias_dense = rows
            .iter()
            .find(|r| {
                r.metric == "asym_peb" && r.axes[0].1 == Some(0.125) && r.axes[1].1.is_none()
            })
            .unwrap()
            .value
            .unwrap();
        assert!(bias_half < bias_dense);
    }

    #[test]
    fn jlfd_rows_report_both_estimators() {
        let sc: Scenario = serde_json::from_str(
            r#"{
                "name": "tiny-jlfd",
                "bs_position": [-5.0, 5.0, 5.0],
                "ue_position": [1.7, 1.7, 1.7],
                "ris": {
                    "rows": 6, "cols": 6, "spacing_wavelengths": 0.5,
                    "position": [0.0, 0.0, 0.0]
                },
                "signal": {
                    "carrier_hz": 28e9, "bandwidth_hz": 1e8,
                    "n_subcarriers": 8, "n_transmissions": 10,
                    "tx_power_dbm": 10.0,
                    "noise_psd_dbm_hz": -173.855, "noise_figure_db": 10.0
                },
                "n_realizations": 2,
                "jlfd": {
                    "snr_db": [25.0], "p_fail": 0.03,
                    "grid_half_width_m": 0.4, "grid_points": 7
                }
            }"#,
        )
        .unwrap();
        let rows = run_experiment("exp-jlfd", &sc, 9, 1, false).unwrap();
        assert_eq!(rows.len(), 4);
        for metric in ["peb", "lb", "rmse_agnostic", "rmse_jlfd"] {
            let row = rows.iter().find(|r| r.metric == metric).unwrap();
            assert!(row.value.unwrap().is_finite());
            assert!(row.value.unwrap() > 0.0);
        }
    }
}
