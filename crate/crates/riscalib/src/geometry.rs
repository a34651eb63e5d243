//! Array geometry: poses, rotation conventions, element grids, and near-field
//! responses.
//!
//! Conventions used throughout the crate:
//!
//! - right-handed global frame, positions in metres;
//! - planar arrays live in their local x–y plane (surface normal = local +z)
//!   and are carried into the world frame by a [`Pose`];
//! - rotations compose as `Rz(γz)·Ry(γy)·Rx(γx)` with angles in degrees;
//! - near-field array responses are unit-modulus spherical-wavefront phases
//!   referenced to a fixed point, usually the array centroid.

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex;
use thiserror::Error;

use crate::C64;

/// 3-D position or direction in the global frame [m].
pub type Vec3 = Vector3<f64>;
/// 3×3 real matrix (rotations, frames).
pub type Mat3 = Matrix3<f64>;

/// Signed perturbation applied to an array pose: a position offset along
/// `[1, 1, 1]` in metres and an orientation offset in degrees applied on all
/// three axes.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GeometryError {
    /// Position offset along `[1, 1, 1]` [m].
    pub err_pos: f64,
    /// Orientation offset, applied as `rot_zyx(err_ori, err_ori, err_ori)` [deg].
    pub err_ori: f64,
}

impl GeometryError {
    pub const NONE: GeometryError = GeometryError {
        err_pos: 0.0,
        err_ori: 0.0,
    };

    pub fn new(err_pos: f64, err_ori: f64) -> Self {
        Self { err_pos, err_ori }
    }

    pub fn is_zero(&self) -> bool {
        self.err_pos == 0.0 && self.err_ori == 0.0
    }
}

/// Errors produced by geometric constructors and responses.
#[derive(Debug, Error, PartialEq)]
pub enum GeometryValidationError {
    /// The supplied matrix is not orthonormal with determinant +1.
    #[error("rotation matrix is not orthonormal with unit determinant (deviation {deviation:.2e})")]
    NotARotation {
        /// Frobenius-norm deviation from `RᵀR = I` plus `|det R − 1|`.
        deviation: f64,
    },
    /// A layout field is out of range (zero element count, non-positive spacing, …).
    #[error("layout field `{field}` must be {requirement} (got {value})")]
    InvalidLayout {
        field: &'static str,
        requirement: &'static str,
        value: f64,
    },
    /// A source point coincides with an array element or the phase reference.
    #[error("source coincides with an element or reference point; near-field response undefined")]
    DegenerateGeometry,
    /// An input that must be finite is NaN or infinite.
    #[error("input `{field}` must be finite")]
    NonFinite { field: &'static str },
}

// ── rotations ──────────────────────────────────────────────────────────────

/// Rotation about the global x axis by `deg` degrees.
pub fn rot_x_deg(deg: f64) -> Mat3 {
    let (s, c) = deg.to_radians().sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

/// Rotation about the global y axis by `deg` degrees.
pub fn rot_y_deg(deg: f64) -> Mat3 {
    let (s, c) = deg.to_radians().sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Rotation about the global z axis by `deg` degrees.
pub fn rot_z_deg(deg: f64) -> Mat3 {
    let (s, c) = deg.to_radians().sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Composed rotation `Rz(z_deg)·Ry(y_deg)·Rx(x_deg)`, angles in degrees.
///
/// This is the single rotation convention used for array mounting and for
/// orientation perturbations.
pub fn rot_zyx(z_deg: f64, y_deg: f64, x_deg: f64) -> Mat3 {
    rot_z_deg(z_deg) * rot_y_deg(y_deg) * rot_x_deg(x_deg)
}

fn rotation_deviation(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).norm() + (r.determinant() - 1.0).abs()
}

// ── pose ───────────────────────────────────────────────────────────────────

/// Rigid placement of an array: centroid position plus local→world rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vec3,
    pub rotation: Mat3,
}

impl Pose {
    /// Builds a pose, validating that `rotation` is a proper rotation matrix
    /// and that `position` is finite.
    pub fn new(position: Vec3, rotation: Mat3) -> Result<Self, GeometryValidationError> {
        if !position.iter().all(|v| v.is_finite()) {
            return Err(GeometryValidationError::NonFinite { field: "position" });
        }
        if !rotation.iter().all(|v| v.is_finite()) {
            return Err(GeometryValidationError::NonFinite { field: "rotation" });
        }
        let deviation = rotation_deviation(&rotation);
        if deviation > 1e-9 {
            return Err(GeometryValidationError::NotARotation { deviation });
        }
        Ok(Self { position, rotation })
    }

    /// Pose with identity orientation.
    pub fn identity_at(position: Vec3) -> Self {
        Self {
            position,
            rotation: Mat3::identity(),
        }
    }

    /// World-frame surface normal (the local +z axis).
    pub fn normal(&self) -> Vec3 {
        self.rotation.column(2).into()
    }
}

/// Applies the standard geometry perturbation: the position moves by
/// `err.err_pos` along `[1, 1, 1]` and the orientation is pre-multiplied by
/// `rot_zyx(err.err_ori, err.err_ori, err.err_ori)`.
///
/// Feeding the output to one model and the input to another creates the
/// pose mismatch studied by the misspecified bounds.
pub fn apply_geometry_error(pose: &Pose, err: GeometryError) -> Pose {
    Pose {
        position: pose.position + Vec3::new(err.err_pos, err.err_pos, err.err_pos),
        rotation: rot_zyx(err.err_ori, err.err_ori, err.err_ori) * pose.rotation,
    }
}

// ── array layout ───────────────────────────────────────────────────────────

/// Regular planar grid of elements in the local x–y plane, centred on the
/// pose position. `rows` indexes the local x axis, `cols` the local y axis.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArrayLayout {
    pub rows: usize,
    pub cols: usize,
    /// Element pitch [m], identical along both axes.
    pub spacing: f64,
}

impl ArrayLayout {
    /// Builds a layout, validating element counts and spacing.
    pub fn new(rows: usize, cols: usize, spacing: f64) -> Result<Self, GeometryValidationError> {
        if rows == 0 {
            return Err(GeometryValidationError::InvalidLayout {
                field: "rows",
                requirement: "at least 1",
                value: 0.0,
            });
        }
        if cols == 0 {
            return Err(GeometryValidationError::InvalidLayout {
                field: "cols",
                requirement: "at least 1",
                value: 0.0,
            });
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(GeometryValidationError::InvalidLayout {
                field: "spacing",
                requirement: "finite and positive",
                value: spacing,
            });
        }
        Ok(Self { rows, cols, spacing })
    }

    /// Uniform linear array of `n` elements along the local x axis.
    pub fn ula(n: usize, spacing: f64) -> Result<Self, GeometryValidationError> {
        Self::new(n, 1, spacing)
    }

    /// Total element count.
    pub fn n_elements(&self) -> usize {
        self.rows * self.cols
    }

    /// World-frame element positions in row-major order. The grid is centred
    /// so that the mean of the returned positions equals `pose.position`.
    pub fn element_positions(&self, pose: &Pose) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(self.n_elements());
        let x0 = (self.rows as f64 - 1.0) / 2.0;
        let y0 = (self.cols as f64 - 1.0) / 2.0;
        for r in 0..self.rows {
            for c in 0..self.cols {
                let local = Vec3::new(
                    (r as f64 - x0) * self.spacing,
                    (c as f64 - y0) * self.spacing,
                    0.0,
                );
                out.push(pose.position + pose.rotation * local);
            }
        }
        out
    }
}

// ── RIS panel ──────────────────────────────────────────────────────────────

/// A reconfigurable surface: a planar element grid placed at a pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RisPanel {
    pub layout: ArrayLayout,
    pub pose: Pose,
}

impl RisPanel {
    pub fn new(layout: ArrayLayout, pose: Pose) -> Self {
        Self { layout, pose }
    }

    pub fn n_elements(&self) -> usize {
        self.layout.n_elements()
    }

    /// World-frame element positions (row-major).
    pub fn elements(&self) -> Vec<Vec3> {
        self.layout.element_positions(&self.pose)
    }

    /// Grid centroid (equals the pose position by construction).
    pub fn centroid(&self) -> Vec3 {
        self.pose.position
    }

    /// World-frame surface normal.
    pub fn normal(&self) -> Vec3 {
        self.pose.normal()
    }

    /// Panel with the standard perturbation applied to its pose.
    pub fn perturbed(&self, err: GeometryError) -> Self {
        Self {
            layout: self.layout,
            pose: apply_geometry_error(&self.pose, err),
        }
    }
}

// ── near-field response ────────────────────────────────────────────────────

/// Spherical-wavefront array response for a point source.
///
/// Entry `n` is `exp(−j·2π/λ·(‖eₙ − s‖ − ‖c − s‖))` where `c` is the centroid
/// of `elements`: the exact propagation phase of element `n` relative to the
/// phase at the array centre. All entries have unit modulus; amplitude
/// roll-off across the aperture is handled separately by the channel gain
/// model.
pub fn nearfield_response(
    elements: &[Vec3],
    source: Vec3,
    wavelength: f64,
) -> Result<Vec<C64>, GeometryValidationError> {
    if !(wavelength.is_finite() && wavelength > 0.0) {
        return Err(GeometryValidationError::InvalidLayout {
            field: "wavelength",
            requirement: "finite and positive",
            value: wavelength,
        });
    }
    if !source.iter().all(|v| v.is_finite()) {
        return Err(GeometryValidationError::NonFinite { field: "source" });
    }
    if elements.is_empty() {
        return Err(GeometryValidationError::DegenerateGeometry);
    }
    let centroid = elements.iter().sum::<Vec3>() / elements.len() as f64;
    let d_ref = (centroid - source).norm();
    if d_ref == 0.0 {
        return Err(GeometryValidationError::DegenerateGeometry);
    }
    let k = 2.0 * std::f64::consts::PI / wavelength;
    elements
        .iter()
        .map(|e| {
            let d = (e - source).norm();
            if d == 0.0 {
                return Err(GeometryValidationError::DegenerateGeometry);
            }
            Ok(Complex::from_polar(1.0, -k * (d - d_ref)))
        })
        .collect()
}

// ── tests ──────────────────────────────────────────────────────────────────
