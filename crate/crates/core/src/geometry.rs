//! Pinhole geometry, normals from depth and footprint projection.

use crate::error::{invalid, Result};
use crate::frame::{Intrinsics, Pose, RgbdFrame, SurfaceNormalImage};
use diffcore::Tensor;
use nalgebra::Vector3;

/// Default footprint horizon in meters.
pub const FOOTPRINT_HORIZON: f64 = 10.0;
const NEAR_PLANE: f64 = 1e-3;

/// Time-stamped world-from-robot poses. The robot frame has its origin on
/// the ground with +X forward and +Y left.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    poses: Vec<(f64, Pose)>,
    robot_width: f64,
}

impl Trajectory {
    pub fn new(poses: Vec<(f64, Pose)>, robot_width: f64) -> Result<Self> {
        if !(robot_width > 0.0 && robot_width.is_finite()) {
            return Err(invalid(format!("robot width must be positive, got {robot_width}")));
        }
        if poses.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(invalid("trajectory timestamps must be strictly increasing"));
        }
        Ok(Self { poses, robot_width })
    }

    pub fn poses(&self) -> &[(f64, Pose)] {
        &self.poses
    }

    pub fn robot_width(&self) -> f64 {
        self.robot_width
    }

    pub fn with_width(&self, robot_width: f64) -> Result<Self> {
        Self::new(self.poses.clone(), robot_width)
    }

    /// Ground positions `(x, y)` of the poses.
    pub fn xy(&self) -> Vec<[f64; 2]> {
        self.poses.iter().map(|(_, p)| [p.translation().x, p.translation().y]).collect()
    }
}

/// Binary footprint label with its validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FootprintMask {
    /// `1×h×w` in {0, 1}.
    pub mask: Tensor,
    /// `1×h×w` in {0, 1}.
    pub valid: Tensor,
}

impl FootprintMask {
    pub fn new(mask: Tensor, valid: Tensor) -> Result<Self> {
        if mask.shape() != valid.shape() || mask.ndim() != 3 || mask.shape()[0] != 1 {
            return Err(invalid(format!("footprint mask {:?} / valid {:?} must both be 1×h×w", mask.shape(), valid.shape())));
        }
        let binary = |t: &Tensor| t.data().iter().all(|&v| v == 0.0 || v == 1.0);
        if !binary(&mask) || !binary(&valid) {
            return Err(invalid("footprint mask and valid must be binary"));
        }
        if mask.data().iter().zip(valid.data()).any(|(&m, &v)| m == 1.0 && v == 0.0) {
            return Err(invalid("footprint pixel marked invalid"));
        }
        Ok(Self { mask, valid })
    }

    pub fn count(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v == 1.0).count()
    }
}

/// Camera-frame points for every pixel; invalid depth gives the origin.
pub fn unproject(depth: &Tensor, k: &Intrinsics) -> Result<Tensor> {
    let (h, w) = plane_dims(depth)?;
    k.validate()?;
    let mut out = vec![0.0; 3 * h * w];
    for i in 0..h {
        for j in 0..w {
            let d = depth.data()[i * w + j];
            if d > 0.0 {
                let p = k.unproject_pixel(i as f64, j as f64, d);
                for c in 0..3 {
                    out[c * h * w + i * w + j] = p[c];
                }
            }
        }
    }
    Ok(Tensor::new(&[3, h, w], out)?)
}

/// Continuous pixel `(i, j)` of a camera-frame point.
pub fn project(p: &Vector3<f64>, k: &Intrinsics) -> Option<(f64, f64)> {
    k.project(p)
}

fn plane_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [1, h, w] => Ok((*h, *w)),
        s => Err(invalid(format!("expected a 1×h×w tensor, got {s:?}"))),
    }
}

/// Normals from depth by differencing unprojected neighbours: central
/// differences inside the image, one-sided at its border. Pixels whose own
/// depth or any used neighbour's depth is invalid are marked invalid.
pub fn normals_from_depth(depth: &Tensor, k: &Intrinsics) -> Result<SurfaceNormalImage> {
    let (h, w) = plane_dims(depth)?;
    let pts = unproject(depth, k)?;
    let d = depth.data();
    let at = |i: usize, j: usize| Vector3::new(pts.data()[i * w + j], pts.data()[h * w + i * w + j], pts.data()[2 * h * w + i * w + j]);
    let span = |x: usize, n: usize| -> Option<(usize, usize)> {
        match (x.checked_sub(1), x + 1 < n) {
            (Some(a), true) => Some((a, x + 1)),
            (None, true) => Some((x, x + 1)),
            (Some(a), false) => Some((a, x)),
            (None, false) => None,
        }
    };
    let mut normals = vec![0.0; 3 * h * w];
    let mut valid = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let (Some((j0, j1)), Some((i0, i1))) = (span(j, w), span(i, h)) else {
                continue;
            };
            let used = [(i, j), (i, j0), (i, j1), (i0, j), (i1, j)];
            if used.iter().any(|&(a, b)| d[a * w + b] <= 0.0) {
                continue;
            }
            let du = at(i, j1) - at(i, j0);
            let dv = at(i1, j) - at(i0, j);
            let mut n = du.cross(&dv);
            let len = n.norm();
            if !(len > 0.0 && len.is_finite()) {
                continue;
            }
            n /= len;
            if n.dot(&at(i, j)) > 0.0 {
                n = -n;
            }
            for c in 0..3 {
                normals[c * h * w + i * w + j] = n[c];
            }
            valid[i * w + j] = 1.0;
        }
    }
    SurfaceNormalImage::new(Tensor::new(&[3, h, w], normals)?, Tensor::new(&[1, h, w], valid)?)
}

/// Footprint of the trajectory ahead of the frame: the strip swept by the
/// robot width over at most `horizon` meters of travel from the first pose
/// at or after the frame's stamp. The second value is `true` when there are
/// no future poses, in which case the mask is empty.
pub fn project_footprint(traj: &Trajectory, frame: &RgbdFrame) -> Result<(FootprintMask, bool)> {
    project_footprint_with_horizon(traj, frame, FOOTPRINT_HORIZON)
}

pub fn project_footprint_with_horizon(traj: &Trajectory, frame: &RgbdFrame, horizon: f64) -> Result<(FootprintMask, bool)> {
    let (h, w) = (frame.height(), frame.width());
    let future: Vec<&Pose> = traj.poses().iter().filter(|(t, _)| *t >= frame.stamp).map(|(_, p)| p).collect();
    let mut mask = vec![0.0; h * w];
    let valid = Tensor::ones(&[1, h, w]);
    if future.len() < 2 {
        log::warn!("frame {}: no future poses for footprint", frame.frame_id);
        return Ok((FootprintMask::new(Tensor::new(&[1, h, w], mask)?, valid)?, true));
    }
    let half = traj.robot_width() / 2.0;
    let mut travelled = 0.0;
    for pair in future.windows(2) {
        if travelled >= horizon {
            break;
        }
        let (a, b) = (pair[0], pair[1]);
        let (pa, mut pb) = (*a.translation(), *b.translation());
        let len = (pb - pa).norm();
        let mut lb = b.rotation() * Vector3::y();
        if travelled + len > horizon {
            let s = (horizon - travelled) / len;
            pb = pa + (pb - pa) * s;
            let la = a.rotation() * Vector3::y();
            lb = la + (lb - la) * s;
        }
        travelled += len;
        let la = a.rotation() * Vector3::y();
        let quad = [pa + la * half, pb + lb * half, pb - lb * half, pa - la * half];
        let cam: Vec<Vector3<f64>> = quad.iter().map(|q| frame.pose.inverse_transform_point(q)).collect();
        let clipped = clip_near(&cam, NEAR_PLANE);
        if clipped.len() < 3 {
            continue;
        }
        let poly: Vec<(f64, f64)> = clipped.iter().filter_map(|p| frame.intrinsics.project(p)).collect();
        rasterize_polygon(&poly, h, w, &mut mask);
    }
    Ok((FootprintMask::new(Tensor::new(&[1, h, w], mask)?, valid)?, false))
}

/// Sutherland–Hodgman clip of a polygon to the half-space `z ≥ near`.
fn clip_near(poly: &[Vector3<f64>], near: f64) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for idx in 0..poly.len() {
        let cur = poly[idx];
        let prev = poly[(idx + poly.len() - 1) % poly.len()];
        let (cin, pin) = (cur.z >= near, prev.z >= near);
        if cin != pin {
            let t = (near - prev.z) / (cur.z - prev.z);
            out.push(prev + (cur - prev) * t);
        }
        if cin {
            out.push(cur);
        }
    }
    out
}

/// Sets pixels whose centers fall inside the polygon (even-odd rule) to 1.
/// Vertices are continuous `(i, j)` coordinates.
pub fn rasterize_polygon(poly: &[(f64, f64)], h: usize, w: usize, mask: &mut [f64]) {
    if poly.len() < 3 {
        return;
    }
    let (mut imin, mut imax) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(i, _) in poly {
        imin = imin.min(i);
        imax = imax.max(i);
    }
    let r0 = imin.ceil().max(0.0) as usize;
    let r1 = imax.floor().min(h as f64 - 1.0);
    if r1 < 0.0 {
        return;
    }
    for r in r0..=(r1 as usize) {
        let y = r as f64;
        // column crossings of the scanline with each edge
        let mut xs: Vec<f64> = Vec::new();
        for e in 0..poly.len() {
            let (a, b) = (poly[e], poly[(e + 1) % poly.len()]);
            if (a.0 <= y) != (b.0 <= y) {
                xs.push(a.1 + (y - a.0) / (b.0 - a.0) * (b.1 - a.1));
            }
        }
        xs.sort_by(f64::total_cmp);
        for span in xs.chunks_exact(2) {
            let c0 = span[0].ceil().max(0.0);
            let c1 = span[1].min(w as f64 - 1.0);
            if c1 < c0 {
                continue;
            }
            for c in (c0 as usize)..=(c1.floor() as usize) {
                mask[r * w + c] = 1.0;
            }
        }
    }
}
