//! Global ground-plane cost map accumulated from per-frame predictions.

use crate::error::{invalid, io_err, Error, Result};
use crate::frame::RgbdFrame;
use crate::fsm::TraversabilityMap;
use diffcore::Tensor;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const UNKNOWN_COST: f64 = 0.5;
pub const DEFAULT_RESOLUTION: f64 = 0.2;
pub const DEFAULT_MAX_RANGE: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Accumulation {
    #[default]
    Mean,
    Max,
}

/// Grid over world `(x, y)`; cell `(ix, iy)` covers
/// `[ox + ix·r, ox + (ix+1)·r) × [oy + iy·r, oy + (iy+1)·r)` and is stored
/// at `iy·width + ix`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalCostMap {
    resolution: f64,
    origin: [f64; 2],
    width: usize,
    height: usize,
    accumulation: Accumulation,
    /// Sum of samples (mean) or largest sample (max).
    acc: Vec<f64>,
    hits: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    resolution: f64,
    origin: [f64; 2],
    width: usize,
    height: usize,
    accumulation: Accumulation,
}

impl GlobalCostMap {
    /// All-unknown map.
    pub fn new(resolution: f64, origin: [f64; 2], width: usize, height: usize, accumulation: Accumulation) -> Result<Self> {
        if !(resolution > 0.0 && resolution.is_finite()) || width == 0 || height == 0 {
            return Err(invalid(format!("invalid cost map geometry: resolution {resolution}, {width}×{height}")));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite cost map origin"));
        }
        Ok(Self {
            resolution,
            origin,
            width,
            height,
            accumulation,
            acc: vec![0.0; width * height],
            hits: vec![0; width * height],
        })
    }

    /// Fully observed map with the given row-major costs (one hit each).
    pub fn from_costs(resolution: f64, origin: [f64; 2], width: usize, height: usize, costs: &[f64]) -> Result<Self> {
        if costs.len() != width * height {
            return Err(invalid(format!("{} costs for a {width}×{height} map", costs.len())));
        }
        if !costs.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(invalid("costs must lie in [0, 1]"));
        }
        let mut m = Self::new(resolution, origin, width, height, Accumulation::Mean)?;
        m.acc.copy_from_slice(costs);
        m.hits.fill(1);
        Ok(m)
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn accumulation(&self) -> Accumulation {
        self.accumulation
    }

    /// World extent `[xmin, ymin, xmax, ymax]`.
    pub fn bounds(&self) -> [f64; 4] {
        let [ox, oy] = self.origin;
        [ox, oy, ox + self.width as f64 * self.resolution, oy + self.height as f64 * self.resolution]
    }

    fn cell_cost(&self, idx: usize) -> f64 {
        match (self.hits[idx], self.accumulation) {
            (0, _) => UNKNOWN_COST,
            (n, Accumulation::Mean) => self.acc[idx] / n as f64,
            (_, Accumulation::Max) => self.acc[idx],
        }
    }

    pub fn cost(&self, ix: usize, iy: usize) -> f64 {
        self.cell_cost(iy * self.width + ix)
    }

    pub fn hits(&self, ix: usize, iy: usize) -> u32 {
        self.hits[iy * self.width + ix]
    }

    /// Row-major cost array.
    pub fn costs(&self) -> Vec<f64> {
        (0..self.acc.len()).map(|i| self.cell_cost(i)).collect()
    }

    pub fn hit_counts(&self) -> &[u32] {
        &self.hits
    }

    pub fn world_to_cell(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = ((x - self.origin[0]) / self.resolution).floor();
        let fy = ((y - self.origin[1]) / self.resolution).floor();
        (fx >= 0.0 && fy >= 0.0 && fx < self.width as f64 && fy < self.height as f64).then(|| (fx as usize, fy as usize))
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> [f64; 2] {
        [
            self.origin[0] + (ix as f64 + 0.5) * self.resolution,
            self.origin[1] + (iy as f64 + 0.5) * self.resolution,
        ]
    }

    /// Cost at a world position, `None` outside the map.
    pub fn cost_at(&self, x: f64, y: f64) -> Option<f64> {
        self.world_to_cell(x, y).map(|(ix, iy)| self.cost(ix, iy))
    }

    /// Grows the map by doubling its extent toward `(x, y)` until the point
    /// is covered. Stored cells keep their world coordinates.
    pub fn ensure_contains(&mut self, x: f64, y: f64) {
        while self.world_to_cell(x, y).is_none() {
            let [xmin, ymin, xmax, ymax] = self.bounds();
            let (mut dx0, mut dy0, mut nw, mut nh) = (0, 0, self.width, self.height);
            if x < xmin {
                dx0 = self.width;
                nw *= 2;
            } else if x >= xmax {
                nw *= 2;
            }
            if y < ymin {
                dy0 = self.height;
                nh *= 2;
            } else if y >= ymax {
                nh *= 2;
            }
            let mut acc = vec![0.0; nw * nh];
            let mut hits = vec![0; nw * nh];
            for iy in 0..self.height {
                for ix in 0..self.width {
                    let (o, n) = (iy * self.width + ix, (iy + dy0) * nw + ix + dx0);
                    acc[n] = self.acc[o];
                    hits[n] = self.hits[o];
                }
            }
            self.origin[0] -= dx0 as f64 * self.resolution;
            self.origin[1] -= dy0 as f64 * self.resolution;
            self.width = nw;
            self.height = nh;
            self.acc = acc;
            self.hits = hits;
        }
    }

    /// Adds one cost sample at a world position, growing the map if needed.
    pub fn deposit(&mut self, x: f64, y: f64, cost: f64) {
        self.ensure_contains(x, y);
        let (ix, iy) = self.world_to_cell(x, y).expect("map grown to contain point");
        let idx = iy * self.width + ix;
        let c = cost.clamp(0.0, 1.0);
        match self.accumulation {
            Accumulation::Mean => self.acc[idx] += c,
            Accumulation::Max => self.acc[idx] = if self.hits[idx] == 0 { c } else { self.acc[idx].max(c) },
        }
        self.hits[idx] += 1;
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header = Header {
            resolution: self.resolution,
            origin: self.origin,
            width: self.width,
            height: self.height,
            accumulation: self.accumulation,
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        let mut buf = Vec::with_capacity(8 * self.acc.len());
        for c in self.costs() {
            buf.extend_from_slice(&(c as f32).to_le_bytes());
        }
        for h in &self.hits {
            buf.extend_from_slice(&h.to_le_bytes());
        }
        out.write_all(&buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write(&mut v).expect("writing to memory");
        v
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or("missing header line")?;
        let h: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| format!("bad header: {e}"))?;
        let mut m = Self::new(h.resolution, h.origin, h.width, h.height, h.accumulation).map_err(|e| e.to_string())?;
        let n = h.width * h.height;
        let body = &bytes[nl + 1..];
        if body.len() != 8 * n {
            return Err(format!("expected {} data bytes for {}×{} cells, found {}", 8 * n, h.width, h.height, body.len()));
        }
        for i in 0..n {
            let c = f32::from_le_bytes(body[4 * i..4 * i + 4].try_into().unwrap()) as f64;
            let k = u32::from_le_bytes(body[4 * (n + i)..4 * (n + i) + 4].try_into().unwrap());
            if !(0.0..=1.0).contains(&c) {
                return Err(format!("cell {i} has cost {c} outside [0, 1]"));
            }
            m.hits[i] = k;
            m.acc[i] = match (k, h.accumulation) {
                (0, _) => 0.0,
                (_, Accumulation::Mean) => c * k as f64,
                (_, Accumulation::Max) => c,
            };
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes).map_err(|msg| Error::Format {
            path: path.to_path_buf(),
            msg,
        })
    }
}

/// World `(x, y)` and cost `1 − p` of every valid-depth pixel within
/// `max_range` meters of the camera.
pub fn frame_samples(p_trav: &TraversabilityMap, frame: &RgbdFrame, max_range: f64) -> Result<Vec<(f64, f64, f64)>> {
    let (h, w) = (frame.height(), frame.width());
    if p_trav.prob.shape() != [1, h, w] {
        return Err(invalid(format!("traversability {:?} does not match frame {h}×{w}", p_trav.prob.shape())));
    }
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let d = frame.depth.data()[i * w + j];
            if d <= 0.0 {
                continue;
            }
            let pc = frame.intrinsics.unproject_pixel(i as f64, j as f64, d);
            if pc.norm() > max_range {
                continue;
            }
            let pw = frame.pose.transform_point(&pc);
            out.push((pw.x, pw.y, 1.0 - p_trav.prob.data()[i * w + j]));
        }
    }
    Ok(out)
}

/// Deposits one frame's predictions into the map.
pub fn integrate_frame(map: &mut GlobalCostMap, p_trav: &TraversabilityMap, frame: &RgbdFrame, max_range: f64) -> Result<()> {
    for (x, y, c) in frame_samples(p_trav, frame, max_range)? {
        map.deposit(x, y, c);
    }
    Ok(())
}

/// 1 where `cost < 0.5`, else 0.
pub fn freespace_mask(costs: &Tensor) -> Tensor {
    costs.map(|c| if c < 0.5 { 1.0 } else { 0.0 })
}

impl GlobalCostMap {
    /// Freespace as an `height×width` binary tensor.
    pub fn freespace(&self) -> Tensor {
        let t = Tensor::new(&[self.height, self.width], self.costs()).expect("consistent map");
        freespace_mask(&t)
    }
}
