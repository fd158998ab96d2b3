//! Camera model, rigid poses and the RGB-D observation type.

use crate::error::{invalid, Result};
use diffcore::Tensor;
use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(invalid(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }

    /// Camera-frame point of pixel `(i, j)` (row, column) at `depth`.
    pub fn unproject_pixel(&self, i: f64, j: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(depth * (j - self.cx) / self.fx, depth * (i - self.cy) / self.fy, depth)
    }

    /// Continuous pixel coordinates `(i, j)` of a camera-frame point, `None`
    /// when the point is not in front of the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fy * p.y / p.z + self.cy, self.fx * p.x / p.z + self.cx))
    }
}

/// Rigid transform mapping points from a local frame into the world.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

const ORTHO_TOL: f64 = 1e-9;

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(err <= ORTHO_TOL) || (rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(invalid(format!(
                "rotation is not a proper orthonormal matrix (|RᵀR−I|∞ = {err:e}, det = {})",
                rotation.determinant()
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite translation"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Ground-vehicle pose at `position` heading `yaw` radians about +Z.
    pub fn from_yaw(position: Vector3<f64>, yaw: f64) -> Self {
        Self {
            rotation: *Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix(),
            translation: position,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// `self ∘ other`: maps points from `other`'s local frame to the world.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point3(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.transform_point(&p.coords))
    }

    /// Row-major rotation entries.
    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]]
    }

    pub fn from_row_major(rotation: &[f64; 9], translation: &[f64; 3]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(rotation), Vector3::from_row_slice(translation))
    }
}

/// Camera orientation for a forward-looking camera pitched down by `pitch`
/// radians on a vehicle heading along world +X (Z up). Camera axes are
/// x right, y down, z forward.
pub fn camera_mount_rotation(pitch: f64) -> Matrix3<f64> {
    let (s, c) = pitch.sin_cos();
    let x = Vector3::new(0.0, -1.0, 0.0);
    let y = Vector3::new(-s, 0.0, -c);
    let z = Vector3::new(c, 0.0, -s);
    Matrix3::from_columns(&[x, y, z])
}

/// One time-stamped RGB-D observation.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbdFrame {
    /// `3×h×w` in `[0, 1]`.
    pub rgb: Tensor,
    /// `1×h×w` meters, 0 marks invalid.
    pub depth: Tensor,
    pub intrinsics: Intrinsics,
    /// World-from-camera.
    pub pose: Pose,
    pub frame_id: u64,
    /// Seconds, on the same clock as trajectory timestamps.
    pub stamp: f64,
}

impl RgbdFrame {
    pub fn new(rgb: Tensor, depth: Tensor, intrinsics: Intrinsics, pose: Pose, frame_id: u64, stamp: f64) -> Result<Self> {
        let f = Self {
            rgb,
            depth,
            intrinsics,
            pose,
            frame_id,
            stamp,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let (rs, ds) = (self.rgb.shape(), self.depth.shape());
        if rs.len() != 3 || rs[0] != 3 || ds.len() != 3 || ds[0] != 1 || rs[1..] != ds[1..] {
            return Err(invalid(format!("rgb {rs:?} and depth {ds:?} are not 3×h×w / 1×h×w")));
        }
        if !self.rgb.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(invalid("rgb values outside [0, 1]"));
        }
        if !self.depth.data().iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(invalid("depth must be finite and non-negative"));
        }
        self.intrinsics.validate()
    }

    pub fn height(&self) -> usize {
        self.depth.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.depth.shape()[2]
    }

    /// Four-channel network input: rgb followed by inverse depth clipped to
    /// `[0, 1]`, with invalid depth mapped to 0.
    pub fn network_input(&self) -> Tensor {
        let mut data = self.rgb.data().to_vec();
        data.extend(self.depth.data().iter().map(|&d| if d > 0.0 { (1.0 / d).min(1.0) } else { 0.0 }));
        Tensor::new(&[4, self.height(), self.width()], data).expect("consistent frame shapes")
    }
}

/// Per-pixel unit normals in the camera frame with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceNormalImage {
    /// `3×h×w`.
    pub normals: Tensor,
    /// `1×h×w`, 1 where the normal is defined.
    pub validity: Tensor,
}

impl SurfaceNormalImage {
    pub fn new(normals: Tensor, validity: Tensor) -> Result<Self> {
        let (ns, vs) = (normals.shape(), validity.shape());
        if ns.len() != 3 || ns[0] != 3 || vs.len() != 3 || vs[0] != 1 || ns[1..] != vs[1..] {
            return Err(invalid(format!("normals {ns:?} and validity {vs:?} are not 3×h×w / 1×h×w")));
        }
        Ok(Self { normals, validity })
    }

    /// Fully valid image.
    pub fn all_valid(normals: Tensor) -> Result<Self> {
        let s = normals.shape().to_vec();
        let validity = Tensor::ones(&[1, *s.get(1).unwrap_or(&1), *s.get(2).unwrap_or(&1)]);
        Self::new(normals, validity)
    }

    pub fn height(&self) -> usize {
        self.normals.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.normals.shape()[2]
    }

    pub fn normal(&self, i: usize, j: usize) -> Vector3<f64> {
        Vector3::new(self.normals.get(&[0, i, j]), self.normals.get(&[1, i, j]), self.normals.get(&[2, i, j]))
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.validity.get(&[0, i, j]) > 0.5
    }

    /// Largest deviation from unit length over valid pixels.
    pub fn max_norm_error(&self) -> f64 {
        let (h, w) = (self.height(), self.width());
        let mut worst: f64 = 0.0;
        for i in 0..h {
            for j in 0..w {
                if self.is_valid(i, j) {
                    worst = worst.max((self.normal(i, j).norm() - 1.0).abs());
                }
            }
        }
        worst
    }

    /// Mean angle in degrees between corresponding normals, over pixels valid
    /// in `other`. `None` when there are none.
    pub fn mean_angular_error_deg(&self, other: &SurfaceNormalImage) -> Option<f64> {
        let (h, w) = (self.height(), self.width());
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in 0..h {
            for j in 0..w {
                if other.is_valid(i, j) {
                    let a = self.normal(i, j);
                    let b = other.normal(i, j);
                    let c = (a.dot(&b) / (a.norm() * b.norm()).max(1e-300)).clamp(-1.0, 1.0);
                    sum += c.acos().to_degrees();
                    n += 1;
                }
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}
