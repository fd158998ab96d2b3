#![allow(dead_code)]

use ftfoot::costmap::GlobalCostMap;

pub const RES: f64 = 0.2;
/// Fixture maps span 20 m × 10 m.
pub const W: usize = 100;
pub const H: usize = 50;
pub const WALL_X: [usize; 2] = [49, 51];
/// Gap rows of the wall fixture.
pub const GAP_Y: [usize; 2] = [22, 28];
pub const START: [f64; 2] = [2.0, 2.0];
pub const GOAL: [f64; 2] = [18.0, 8.0];

pub fn uniform_map(c: f64) -> GlobalCostMap {
    GlobalCostMap::from_costs(RES, [0.0, 0.0], W, H, &vec![c; W * H]).unwrap()
}

/// Full-height cost-1 wall across the middle, optionally with a zero-cost gap.
pub fn wall_map(gap: bool) -> GlobalCostMap {
    let mut costs = vec![0.0; W * H];
    for iy in 0..H {
        for ix in WALL_X[0]..WALL_X[1] {
            let in_gap = gap && (GAP_Y[0]..GAP_Y[1]).contains(&iy);
            if !in_gap {
                costs[iy * W + ix] = 1.0;
            }
        }
    }
    GlobalCostMap::from_costs(RES, [0.0, 0.0], W, H, &costs).unwrap()
}

/// Whether every crossing of the wall columns happens inside the gap rows.
pub fn crosses_through_gap(points: &[[f64; 2]], map: &GlobalCostMap) -> bool {
    points.iter().all(|p| {
        let (ix, iy) = map.world_to_cell(p[0], p[1]).unwrap();
        !(WALL_X[0]..WALL_X[1]).contains(&ix) || (GAP_Y[0]..GAP_Y[1]).contains(&iy)
    })
}

use diffcore::{ops, ConvParams, Tensor};
use ftfoot::gfn::GuideFilterParams;
use ftfoot::fsm::FsmConfig;
use ftfoot::geometry::FootprintMask;
use ftfoot::gfn::GfnConfig;
use ftfoot::{Intrinsics, ModelConfig, Pose, RgbdFrame, SurfaceNormalImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng(seed))
}

/// Two-stage model small enough for exhaustive checks.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        gfn: GfnConfig {
            num_stages: 2,
            channels: vec![4, 6],
            strides: vec![1, 2],
            kernel_size: 3,
            spatial_center_logit: 4.0,
        },
        fsm: FsmConfig {
            grid: 8,
            ..Default::default()
        },
    }
}

pub fn random_frame(h: usize, w: usize, seed: u64) -> RgbdFrame {
    let rgb = Tensor::rand_uniform(&[3, h, w], 0.0, 1.0, &mut rng(seed));
    let depth = Tensor::rand_uniform(&[1, h, w], 1.0, 8.0, &mut rng(seed + 1));
    let k = Intrinsics::new(w as f64, w as f64, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0).unwrap();
    RgbdFrame::new(rgb, depth, k, Pose::identity(), seed, 0.0).unwrap()
}

pub fn random_footprint(h: usize, w: usize, seed: u64) -> FootprintMask {
    let m = rand_t(&[1, h, w], seed).map(|v| if v > 0.3 { 1.0 } else { 0.0 });
    FootprintMask::new(m, Tensor::ones(&[1, h, w])).unwrap()
}

pub fn random_normals(h: usize, w: usize, seed: u64) -> SurfaceNormalImage {
    let mut n = rand_t(&[3, h, w], seed);
    let plane = h * w;
    for p in 0..plane {
        let l = (0..3).map(|c| n.data()[c * plane + p].powi(2)).sum::<f64>().sqrt();
        for c in 0..3 {
            n.data_mut()[c * plane + p] /= l;
        }
    }
    let valid = rand_t(&[1, h, w], seed + 7).map(|v| if v > -0.6 { 1.0 } else { 0.0 });
    SurfaceNormalImage::new(n, valid).unwrap()
}

/// Undecomposed per-pixel dynamic convolution with `K_ij = K″_ij ∘ K′_ij`,
/// with every intermediate computed from plain convolutions.
pub fn dense_oracle(xg: &Tensor, xc: &Tensor, p: &GuideFilterParams) -> Vec<f64> {
    let (c, h, w) = (xc.shape()[0], xc.shape()[1], xc.shape()[2]);
    let plane = h * w;
    let both = |a: &Tensor, b: &Tensor| {
        let mut d = a.data().to_vec();
        d.extend_from_slice(b.data());
        Tensor::new(&[2 * c, h, w], d).unwrap()
    };
    let gl = ops::conv2d(&both(xg, xc), &p.gate).unwrap();
    let mut g = xg.clone();
    let mut cc = xc.clone();
    for q in 0..plane {
        let (a, b) = (gl.data()[q], gl.data()[plane + q]);
        let ea = 1.0 / (1.0 + (b - a).exp());
        for ch in 0..c {
            g.data_mut()[ch * plane + q] *= ea;
            cc.data_mut()[ch * plane + q] *= 1.0 - ea;
        }
    }
    let gc = both(&g, &cc);
    let sl = ops::conv2d(&gc, &p.spatial).unwrap();
    let pl = ops::conv2d(&gc, &p.pointwise).unwrap();
    let taps = p.spatial.kernel.shape()[0];
    let k = (taps as f64).sqrt() as usize;
    let r = (k / 2) as i64;
    let mut y = vec![0.0; c * plane];
    for i in 0..h {
        for j in 0..w {
            let q = i * w + j;
            let m = (0..taps).map(|t| sl.data()[t * plane + q]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..taps).map(|t| (sl.data()[t * plane + q] - m).exp()).sum();
            let kp = |a: usize, b: usize| (sl.data()[(a * k + b) * plane + q] - m).exp() / z;
            let kpp = |o: usize, ch: usize| pl.data()[(o * c + ch) * plane + q];
            for o in 0..c {
                let mut acc = 0.0;
                for ch in 0..c {
                    for a in 0..k {
                        for b in 0..k {
                            let (si, sj) = (i as i64 + a as i64 - r, j as i64 + b as i64 - r);
                            if si < 0 || sj < 0 || si >= h as i64 || sj >= w as i64 {
                                continue;
                            }
                            acc += kpp(o, ch) * kp(a, b) * xc.data()[ch * plane + si as usize * w + sj as usize];
                        }
                    }
                }
                y[o * plane + q] = acc;
            }
        }
    }
    y
}


pub fn random_params(c: usize, k: usize, seed: u64) -> GuideFilterParams {
    GuideFilterParams {
        gate: ConvParams::new(rand_t(&[2, 2 * c, 3, 3], seed), rand_t(&[2], seed + 1), 1, 1).unwrap(),
        spatial: ConvParams::new(rand_t(&[k * k, 2 * c, 3, 3], seed + 2), rand_t(&[k * k], seed + 3), 1, 1).unwrap(),
        pointwise: ConvParams::new(rand_t(&[c * c, 2 * c, 1, 1], seed + 4), rand_t(&[c * c], seed + 5), 1, 0).unwrap(),
    }
}
