//! Procedural RGB-D scenes with analytic ground truth: a heightfield with a
//! smooth drivable corridor, bumpy surroundings and obstacle mounds.

use crate::error::{invalid, Result};
use crate::frame::{camera_mount_rotation, Intrinsics, Pose, RgbdFrame, SurfaceNormalImage};
use crate::dataset::Sample;
use crate::geometry::{project_footprint, Trajectory};
use diffcore::Tensor;
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Farthest depth reported; more distant surfaces count as invalid.
pub const MAX_DEPTH: f64 = 30.0;
/// Obstacle height above which a point belongs to the obstacle.
const OBSTACLE_LEVEL: f64 = 0.05;
/// Lateral width over which bumps fade in outside the corridor.
const ROUGHNESS_BLEND: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerrainSpec {
    /// Ground inclination along +X in degrees.
    pub slope_deg: f64,
    /// Bump amplitude in meters.
    pub bump_amplitude: f64,
    /// Bump angular frequency in rad/m.
    pub bump_frequency: f64,
    pub bump_phases: [f64; 3],
    /// Fraction of the bump amplitude kept inside the corridor.
    pub corridor_roughness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorridorSpec {
    /// Centerline vertices with strictly increasing x.
    pub polyline: Vec<[f64; 2]>,
    pub width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub position: [f64; 2],
    pub radius: f64,
    pub height: f64,
}

/// Color statistics of one surface class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureClass {
    pub mean: [f64; 3],
    /// Per-channel iid noise standard deviation.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Textures {
    pub corridor: TextureClass,
    pub terrain: TextureClass,
    pub obstacle: TextureClass,
    pub sky: TextureClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    /// `[xmin, ymin, xmax, ymax]` of the terrain in meters.
    pub bounds: [f64; 4],
    pub terrain: TerrainSpec,
    pub corridor: CorridorSpec,
    pub obstacles: Vec<Obstacle>,
    pub textures: Textures,
    /// Width of the robot whose trajectory follows the corridor, m.
    pub robot_width: f64,
    #[serde(default)]
    pub robot_lane: RobotLane,
}

/// Lateral position of the driven path relative to the corridor
/// centerline: `offset + weave·sin(2πx/wavelength + phase)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotLane {
    pub offset: f64,
    pub weave: f64,
    pub wavelength: f64,
    pub phase: f64,
}

impl Default for RobotLane {
    fn default() -> Self {
        Self {
            offset: 0.0,
            weave: 0.0,
            wavelength: 10.0,
            phase: 0.0,
        }
    }
}

impl RobotLane {
    /// Offset and its x-derivative.
    fn at(&self, x: f64) -> (f64, f64) {
        let k = std::f64::consts::TAU / self.wavelength;
        let a = k * x + self.phase;
        (self.offset + self.weave * a.sin(), self.weave * k * a.cos())
    }
}

/// Surface class of a terrain point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    Corridor,
    Terrain,
    Obstacle,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let [x0, y0, x1, y1] = self.bounds;
        if !(x1 > x0 && y1 > y0) {
            return Err(invalid(format!("empty terrain bounds {:?}", self.bounds)));
        }
        let poly = &self.corridor.polyline;
        if poly.len() < 2 || poly.windows(2).any(|w| !(w[1][0] > w[0][0])) {
            return Err(invalid("corridor polyline needs ≥ 2 vertices with increasing x"));
        }
        if poly.iter().any(|p| p[0] < x0 || p[0] > x1 || p[1] < y0 || p[1] > y1) {
            return Err(invalid("corridor leaves the terrain bounds"));
        }
        if !(self.corridor.width > 0.0) {
            return Err(invalid("corridor width must be positive"));
        }
        if !(self.robot_width > 0.0 && self.robot_width < self.corridor.width) {
            return Err(invalid("robot width must be positive and narrower than the corridor"));
        }
        let lane = &self.robot_lane;
        if !(lane.wavelength > 0.0) || !lane.offset.is_finite() || !lane.phase.is_finite() || !(lane.weave >= 0.0) {
            return Err(invalid("robot lane needs a positive wavelength and finite offset, weave and phase"));
        }
        if lane.offset.abs() + lane.weave + self.robot_width / 2.0 >= self.corridor.width / 2.0 {
            return Err(invalid("robot lane leaves the corridor"));
        }
        if self.obstacles.iter().any(|o| !(o.radius > 0.0)) {
            return Err(invalid("obstacle radii must be positive"));
        }
        Ok(())
    }

    /// Corridor centerline offset and slope at `x` (clamped at the ends).
    fn centerline(&self, x: f64) -> (f64, f64) {
        let p = &self.corridor.polyline;
        let k = p.partition_point(|v| v[0] <= x).clamp(1, p.len() - 1);
        let (a, b) = (p[k - 1], p[k]);
        let slope = (b[1] - a[1]) / (b[0] - a[0]);
        let xc = x.clamp(p[0][0], p[p.len() - 1][0]);
        let dslope = if x < p[0][0] || x > p[p.len() - 1][0] { 0.0 } else { slope };
        (a[1] + slope * (xc - a[0]), dslope)
    }

    /// Signed lateral offset from the centerline.
    pub fn lateral_offset(&self, x: f64, y: f64) -> f64 {
        y - self.centerline(x).0
    }

    pub fn in_corridor(&self, x: f64, y: f64) -> bool {
        self.lateral_offset(x, y).abs() <= self.corridor.width / 2.0
    }

    fn obstacle_height(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let (mut h, mut hx, mut hy) = (0.0, 0.0, 0.0);
        for o in &self.obstacles {
            let (dx, dy) = (x - o.position[0], y - o.position[1]);
            let r2 = (dx * dx + dy * dy) / (o.radius * o.radius);
            let v = o.height * (-r2 * r2).exp();
            // d/dx exp(-(r²)²) = -2 r² · 2dx/R² · exp
            let g = -4.0 * r2 / (o.radius * o.radius) * v;
            h += v;
            hx += g * dx;
            hy += g * dy;
        }
        (h, hx, hy)
    }

    /// Terrain height and its gradient at `(x, y)`.
    pub fn height(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let t = &self.terrain;
        let base_slope = t.slope_deg.to_radians().tan();
        let (cx, cslope) = self.centerline(x);
        let delta = y - cx;
        let u = ((delta.abs() - self.corridor.width / 2.0) / ROUGHNESS_BLEND).clamp(0.0, 1.0);
        let r = t.corridor_roughness;
        let atten = r + (1.0 - r) * u * u * (3.0 - 2.0 * u);
        let datten_ddelta = if u > 0.0 && u < 1.0 {
            (1.0 - r) * 6.0 * u * (1.0 - u) / ROUGHNESS_BLEND * delta.signum()
        } else {
            0.0
        };
        let (f, [p1, p2, p3], a) = (t.bump_frequency, t.bump_phases, t.bump_amplitude);
        let s1 = (f * x + p1).sin();
        let c2 = (0.8 * f * y + p2).cos();
        let arg3 = 1.7 * f * x + 1.3 * f * y + p3;
        let bump = a * (s1 * c2 + 0.5 * arg3.sin());
        let bx = a * (f * (f * x + p1).cos() * c2 + 0.5 * 1.7 * f * arg3.cos());
        let by = a * (-0.8 * f * s1 * (0.8 * f * y + p2).sin() + 0.5 * 1.3 * f * arg3.cos());
        let (oh, ohx, ohy) = self.obstacle_height(x, y);
        let h = base_slope * x + atten * bump + oh;
        let hx = base_slope + atten * bx + datten_ddelta * (-cslope) * bump + ohx;
        let hy = atten * by + datten_ddelta * bump + ohy;
        (h, hx, hy)
    }

    pub fn surface(&self, x: f64, y: f64) -> Surface {
        if self.obstacle_height(x, y).0 > OBSTACLE_LEVEL {
            Surface::Obstacle
        } else if self.in_corridor(x, y) {
            Surface::Corridor
        } else {
            Surface::Terrain
        }
    }

    /// Upward unit normal of the terrain in world coordinates.
    pub fn world_normal(&self, x: f64, y: f64) -> Vector3<f64> {
        let (_, hx, hy) = self.height(x, y);
        Vector3::new(-hx, -hy, 1.0).normalize()
    }

    /// Robot poses along the driven lane from `x = 0`, spaced
    /// `spacing` meters in x, timestamped at 1 m/s of x-progress.
    pub fn trajectory(&self, robot_width: f64, spacing: f64, length: f64) -> Result<Trajectory> {
        let n = (length / spacing).floor() as usize;
        let poses = (0..=n)
            .map(|k| {
                let x = k as f64 * spacing;
                (x, self.robot_pose(x))
            })
            .collect();
        Trajectory::new(poses, robot_width)
    }

    /// Ground-level, yaw-only robot pose on the driven lane at `x`.
    pub fn robot_pose(&self, x: f64) -> Pose {
        let (yc, sc) = self.centerline(x);
        let (yl, sl) = self.robot_lane.at(x);
        let (y, slope) = (yc + yl, sc + sl);
        let z = self.height(x, y).0;
        Pose::from_yaw(Vector3::new(x, y, z), slope.atan())
    }
}

/// Camera mounting on the robot and image geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraRig {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    /// Mount height above the ground in meters.
    pub mount_height: f64,
    /// Downward pitch in degrees.
    pub pitch_deg: f64,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            fx: 40.0,
            fy: 40.0,
            mount_height: 1.5,
            pitch_deg: 20.0,
        }
    }
}

/// A posed pinhole camera with image size.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    /// World-from-camera.
    pub pose: Pose,
    pub width: usize,
    pub height: usize,
}

impl CameraRig {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
        }
    }

    /// Camera mounted on a robot at `robot` (world-from-robot).
    pub fn camera(&self, robot: &Pose) -> Camera {
        let mount = Pose::new(camera_mount_rotation(self.pitch_deg.to_radians()), Vector3::new(0.0, 0.0, self.mount_height))
            .expect("mount rotation is proper");
        Camera {
            intrinsics: self.intrinsics(),
            pose: robot.compose(&mount),
            width: self.width,
            height: self.height,
        }
    }
}

/// Ranges for random scene sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSampler {
    pub slope_deg: [f64; 2],
    pub bump_amplitude: [f64; 2],
    pub bump_frequency: [f64; 2],
    pub corridor_roughness: f64,
    pub corridor_width: [f64; 2],
    /// Largest lateral excursion of the corridor centerline, m.
    pub corridor_sway: f64,
    pub obstacle_count: [usize; 2],
    pub obstacle_radius: [f64; 2],
    pub obstacle_height: [f64; 2],
    pub corridor_color: [f64; 3],
    pub terrain_color: [f64; 3],
    pub obstacle_color: [f64; 3],
    pub sky_color: [f64; 3],
    /// Per-scene uniform jitter of each class mean, per channel.
    pub color_jitter: f64,
    pub color_noise: f64,
    pub robot_width: f64,
    /// Fraction of the free lateral room the driven lane may use.
    pub lane_spread: f64,
    /// Range of the weave amplitude as a fraction of that room; the rest
    /// bounds the constant offset.
    pub lane_weave: [f64; 2],
}

impl Default for SceneSampler {
    fn default() -> Self {
        Self {
            slope_deg: [-4.0, 4.0],
            bump_amplitude: [0.15, 0.35],
            bump_frequency: [1.0, 2.0],
            corridor_roughness: 0.1,
            corridor_width: [3.0, 4.5],
            corridor_sway: 3.0,
            obstacle_count: [1, 4],
            obstacle_radius: [0.6, 1.2],
            obstacle_height: [0.6, 1.5],
            corridor_color: [0.55, 0.45, 0.33],
            terrain_color: [0.36, 0.44, 0.26],
            obstacle_color: [0.45, 0.43, 0.42],
            sky_color: [0.60, 0.72, 0.90],
            color_jitter: 0.05,
            color_noise: 0.14,
            robot_width: 0.8,
            lane_spread: 0.9,
            lane_weave: [0.3, 0.8],
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..r[1])
    } else {
        r[0]
    }
}

impl SceneSampler {
    /// Random scene; the corridor starts at the origin.
    pub fn sample(&self, seed: u64) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = uniform(&mut rng, self.corridor_width);
        let sway = rng.gen_range(-self.corridor_sway..=self.corridor_sway.max(1e-12));
        let wave = rng.gen_range(0.08..0.18);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let polyline: Vec<[f64; 2]> = (0..=90)
            .map(|k| {
                let x = -5.0 + 0.5 * k as f64;
                let y = sway * ((wave * x + phase).sin() - phase.sin());
                [x, y]
            })
            .collect();
        let terrain = TerrainSpec {
            slope_deg: uniform(&mut rng, self.slope_deg),
            bump_amplitude: uniform(&mut rng, self.bump_amplitude),
            bump_frequency: uniform(&mut rng, self.bump_frequency),
            bump_phases: [rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3)],
            corridor_roughness: self.corridor_roughness,
        };
        let n_obs = if self.obstacle_count[1] > self.obstacle_count[0] {
            rng.gen_range(self.obstacle_count[0]..=self.obstacle_count[1])
        } else {
            self.obstacle_count[0]
        };
        let mut spec = SceneSpec {
            seed,
            bounds: [-5.0, -25.0, 40.0, 25.0],
            terrain,
            corridor: CorridorSpec { polyline, width },
            obstacles: Vec::new(),
            robot_width: self.robot_width,
            robot_lane: RobotLane::default(),
            textures: Textures {
                corridor: TextureClass {
                    mean: [0.0; 3],
                    std: self.color_noise,
                },
                terrain: TextureClass {
                    mean: [0.0; 3],
                    std: self.color_noise,
                },
                obstacle: TextureClass {
                    mean: [0.0; 3],
                    std: self.color_noise,
                },
                sky: TextureClass {
                    mean: self.sky_color,
                    std: self.color_noise / 3.0,
                },
            },
        };
        let jitter = |base: [f64; 3], rng: &mut ChaCha8Rng| base.map(|c| (c + rng.gen_range(-1.0..=1.0) * self.color_jitter).clamp(0.0, 1.0));
        spec.textures.corridor.mean = jitter(self.corridor_color, &mut rng);
        spec.textures.terrain.mean = jitter(self.terrain_color, &mut rng);
        spec.textures.obstacle.mean = jitter(self.obstacle_color, &mut rng);
        for _ in 0..n_obs {
            let radius = uniform(&mut rng, self.obstacle_radius);
            let height = uniform(&mut rng, self.obstacle_height);
            let x = rng.gen_range(4.0..22.0);
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let clear = spec.corridor.width / 2.0 + 1.5 * radius + 0.5;
            let lateral = side * (clear + rng.gen_range(0.0..4.0));
            let y = spec.centerline(x).0 + lateral;
            spec.obstacles.push(Obstacle {
                position: [x, y],
                radius,
                height,
            });
        }
        let room = (spec.corridor.width - self.robot_width) / 2.0 * self.lane_spread.clamp(0.0, 0.999);
        let weave = room * uniform(&mut rng, self.lane_weave).clamp(0.0, 1.0);
        spec.robot_lane = RobotLane {
            offset: (room - weave) * rng.gen_range(-1.0..1.0),
            weave,
            wavelength: rng.gen_range(8.0..16.0),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        };
        spec
    }
}

/// Rendered frame with its analytic ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub frame: RgbdFrame,
    pub gt_normals: SurfaceNormalImage,
    /// `1×h×w` binary: the ray hits the corridor.
    pub gt_traversable: Tensor,
    pub trajectory: Trajectory,
}

impl Scene {
    /// Training sample: the projected footprint plus both ground truths.
    pub fn to_sample(&self) -> Result<Sample> {
        let (footprint, _) = project_footprint(&self.trajectory, &self.frame)?;
        Ok(Sample {
            frame: self.frame.clone(),
            footprint,
            gt_normals: Some(self.gt_normals.clone()),
            gt_traversable: Some(self.gt_traversable.clone()),
        })
    }
}

const TRAJ_SPACING: f64 = 0.25;
const TRAJ_LENGTH: f64 = 30.0;

/// First intersection of the ray `o + s·d` (for `s` in camera depth
/// units) with the terrain, or `None` beyond [`MAX_DEPTH`] / the bounds.
fn cast(spec: &SceneSpec, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
    let [x0, y0, x1, y1] = spec.bounds;
    let gap = |s: f64| {
        let p = o + d * s;
        p.z - spec.height(p.x, p.y).0
    };
    let mut prev = 0.0;
    let mut s = 0.05;
    loop {
        if s > MAX_DEPTH {
            return None;
        }
        let p = o + d * s;
        if p.x < x0 || p.x > x1 || p.y < y0 || p.y > y1 {
            return None;
        }
        if gap(s) <= 0.0 {
            break;
        }
        prev = s;
        s += 0.02 + 0.01 * s;
    }
    let (mut lo, mut hi) = (prev, s);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if gap(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s = 0.5 * (lo + hi);
    (s <= MAX_DEPTH).then_some(s)
}

const SUN: [f64; 3] = [0.4, 0.3, 0.866];

/// Renders a scene from `camera`. The trajectory follows the driven lane
/// from `x = 0` and the frame stamp is the x of the camera.
pub fn generate_scene(spec: &SceneSpec, camera: &Camera) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (camera.height, camera.width);
    let o = *camera.pose.translation();
    if o.z <= spec.height(o.x, o.y).0 {
        return Err(invalid(format!("camera at {o:?} is below the terrain")));
    }
    let r: &Matrix3<f64> = camera.pose.rotation();
    let k = camera.intrinsics;
    let sun = Vector3::from(SUN).normalize();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_C0102);
    let plane = h * w;
    let mut rgb = vec![0.0; 3 * plane];
    let mut depth = vec![0.0; plane];
    let mut normals = vec![0.0; 3 * plane];
    let mut nvalid = vec![0.0; plane];
    let mut trav = vec![0.0; plane];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let dc = Vector3::new((j as f64 - k.cx) / k.fx, (i as f64 - k.cy) / k.fy, 1.0);
            let dw = r * dc;
            let noise: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            let (class, shade) = match cast(spec, &o, &dw) {
                Some(s) => {
                    let hit = o + dw * s;
                    let nw = spec.world_normal(hit.x, hit.y);
                    let nc = r.transpose() * nw;
                    depth[p] = s;
                    for c in 0..3 {
                        normals[c * plane + p] = nc[c];
                    }
                    nvalid[p] = 1.0;
                    let surf = spec.surface(hit.x, hit.y);
                    if surf == Surface::Corridor {
                        trav[p] = 1.0;
                    }
                    let tex = match surf {
                        Surface::Corridor => &spec.textures.corridor,
                        Surface::Terrain => &spec.textures.terrain,
                        Surface::Obstacle => &spec.textures.obstacle,
                    };
                    (tex, 0.6 + 0.4 * nw.dot(&sun).max(0.0))
                }
                None => (&spec.textures.sky, 1.0),
            };
            for c in 0..3 {
                rgb[c * plane + p] = (class.mean[c] * shade + class.std * noise[c]).clamp(0.0, 1.0);
            }
        }
    }
    let stamp = camera.pose.translation().x;
    let frame = RgbdFrame::new(
        Tensor::new(&[3, h, w], rgb)?,
        Tensor::new(&[1, h, w], depth)?,
        k,
        camera.pose,
        spec.seed,
        stamp,
    )?;
    Ok(Scene {
        frame,
        gt_normals: SurfaceNormalImage::new(Tensor::new(&[3, h, w], normals)?, Tensor::new(&[1, h, w], nvalid)?)?,
        gt_traversable: Tensor::new(&[1, h, w], trav)?,
        trajectory: spec.trajectory(spec.robot_width, TRAJ_SPACING, TRAJ_LENGTH)?,
    })
}

/// Renders the scene from a camera on the robot at the corridor start.
pub fn generate_default(spec: &SceneSpec, rig: &CameraRig) -> Result<Scene> {
    generate_scene(spec, &rig.camera(&spec.robot_pose(0.0)))
}

/// Best balanced accuracy of a single threshold on one color feature
/// (each channel, pairwise channel differences and the mean intensity) at
/// separating corridor pixels from other valid-depth pixels.
pub fn color_threshold_oracle(scenes: &[(&Tensor, &Tensor, &Tensor)]) -> f64 {
    let features: [fn(&[f64; 3]) -> f64; 7] = [
        |c| c[0],
        |c| c[1],
        |c| c[2],
        |c| c[0] - c[1],
        |c| c[0] - c[2],
        |c| c[1] - c[2],
        |c| (c[0] + c[1] + c[2]) / 3.0,
    ];
    let mut best: f64 = 0.5;
    for f in features {
        let mut vals: Vec<(f64, bool)> = Vec::new();
        for (rgb, depth, trav) in scenes {
            let plane = depth.len();
            for p in 0..plane {
                if depth.data()[p] > 0.0 {
                    let c = [rgb.data()[p], rgb.data()[plane + p], rgb.data()[2 * plane + p]];
                    vals.push((f(&c), trav.data()[p] > 0.5));
                }
            }
        }
        vals.sort_by(|a, b| a.0.total_cmp(&b.0));
        let pos = vals.iter().filter(|v| v.1).count() as f64;
        let neg = vals.len() as f64 - pos;
        if pos == 0.0 || neg == 0.0 {
            continue;
        }
        // sweep thresholds: predict positive above (or below) the cut
        let (mut pos_below, mut neg_below) = (0.0, 0.0);
        for (k, v) in vals.iter().enumerate() {
            if v.1 {
                pos_below += 1.0;
            } else {
                neg_below += 1.0;
            }
            if k + 1 < vals.len() && vals[k + 1].0 == v.0 {
                continue;
            }
            let above = 0.5 * ((pos - pos_below) / pos + neg_below / neg);
            let below = 0.5 * (pos_below / pos + (neg - neg_below) / neg);
            best = best.max(above).max(below);
        }
    }
    best
}
