//! Footprint supervision: affinity random walk over the fused features,
//! the traversability head and the training losses.

use crate::error::{invalid, Result};
use crate::nn::{Bound, Conv, ParamSet};
use diffcore::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use crate::geometry::FootprintMask;

/// Positive / negative class weights of the footprint cross-entropy.
pub const BCE_WEIGHTS: (f64, f64) = (1.0, 0.1);
pub const BCE_CLAMP: f64 = 1e-7;
pub const ALPHA: &str = "fsm.alpha";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FsmConfig {
    /// Side of the square grid the features are pooled to before the walk.
    pub grid: usize,
    /// Largest admissible number of affinity nodes.
    pub affinity_cap: usize,
    pub alpha_init: f64,
    /// When false, α keeps its initial value during training.
    pub learn_alpha: bool,
    pub rw_at_inference: bool,
    /// L2-normalize each position's features before the Gram product.
    pub normalize_features: bool,
    /// Multiplier on the Gram matrix before the row softmax.
    pub affinity_scale: f64,
    /// Apply the consistency loss after (true) or before the walk.
    pub ss_after_rw: bool,
}

impl Default for FsmConfig {
    fn default() -> Self {
        Self {
            grid: 32,
            affinity_cap: 4096,
            alpha_init: 0.5,
            learn_alpha: true,
            rw_at_inference: true,
            normalize_features: false,
            affinity_scale: 1.0,
            ss_after_rw: true,
        }
    }
}

impl FsmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.grid * self.grid > self.affinity_cap {
            return Err(invalid(format!(
                "grid {}×{} exceeds the affinity cap {}",
                self.grid, self.grid, self.affinity_cap
            )));
        }
        if !self.alpha_init.is_finite() || !self.affinity_scale.is_finite() {
            return Err(invalid("alpha_init and affinity_scale must be finite"));
        }
        Ok(())
    }
}

/// Row-stochastic `n×n` transition matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix {
    pub entries: Tensor,
}

/// Per-pixel traversability probability, `1×h×w` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TraversabilityMap {
    pub prob: Tensor,
}

impl TraversabilityMap {
    pub fn new(prob: Tensor) -> Result<Self> {
        if prob.ndim() != 3 || prob.shape()[0] != 1 {
            return Err(invalid(format!("traversability map must be 1×h×w, got {:?}", prob.shape())));
        }
        if !prob.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(invalid("traversability outside [0, 1]"));
        }
        Ok(Self { prob })
    }
}

/// Spatial augmentation used by the consistency loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformSpec {
    Identity,
    HorizontalFlip,
    /// Positive `dx` shifts content right, positive `dy` down.
    Translate { dx: i64, dy: i64 },
}

impl TransformSpec {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if let Self::Translate { dx, dy } = *self {
            if dx.unsigned_abs() as f64 > 0.1 * w as f64 || dy.unsigned_abs() as f64 > 0.1 * h as f64 {
                return Err(invalid(format!("translation ({dx}, {dy}) exceeds 10% of {h}×{w}")));
            }
        }
        Ok(())
    }

    /// The same transform on a grid of width `w_to` instead of `w_from`
    /// (and height `h_to` instead of `h_from`).
    pub fn rescaled(&self, h_from: usize, w_from: usize, h_to: usize, w_to: usize) -> Self {
        match *self {
            Self::Translate { dx, dy } => Self::Translate {
                dx: (dx as f64 * w_to as f64 / w_from as f64).round() as i64,
                dy: (dy as f64 * h_to as f64 / h_from as f64).round() as i64,
            },
            t => t,
        }
    }

    /// For each output pixel, the source pixel it copies (`None` = filled).
    pub fn pixel_map(&self, h: usize, w: usize) -> Vec<Option<usize>> {
        let mut map = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                map.push(match *self {
                    Self::Identity => Some(i * w + j),
                    Self::HorizontalFlip => Some(i * w + (w - 1 - j)),
                    Self::Translate { dx, dy } => {
                        let (si, sj) = (i as i64 - dy, j as i64 - dx);
                        (si >= 0 && sj >= 0 && si < h as i64 && sj < w as i64).then(|| si as usize * w + sj as usize)
                    }
                });
            }
        }
        map
    }
}

/// Applies a transform to a `c×h×w` tensor. Returns the result and a
/// `1×h×w` mask that is 0 on filled pixels.
pub fn transform_apply(x: &Tensor, tr: &TransformSpec) -> Result<(Tensor, Tensor)> {
    let [c, h, w] = *x.shape() else {
        return Err(invalid(format!("transform expects c×h×w, got {:?}", x.shape())));
    };
    let map = tr.pixel_map(h, w);
    let plane = h * w;
    let mut out = vec![0.0; c * plane];
    for ch in 0..c {
        for (p, m) in map.iter().enumerate() {
            if let Some(s) = m {
                out[ch * plane + p] = x.data()[ch * plane + s];
            }
        }
    }
    let valid = map.iter().map(|m| if m.is_some() { 1.0 } else { 0.0 }).collect();
    Ok((Tensor::new(&[c, h, w], out)?, Tensor::new(&[1, h, w], valid)?))
}

/// Row softmax of `scale·FᵀF` for `F` of shape `c×n`, on a tape.
pub fn affinity_on(tape: &mut Tape, f: Var, scale: f64, cap: usize) -> Result<Var> {
    let [_, n] = *tape.shape(f) else {
        return Err(invalid(format!("affinity expects c×n features, got {:?}", tape.shape(f))));
    };
    if n > cap {
        return Err(invalid(format!("{n} affinity nodes exceed the cap of {cap}")));
    }
    let ft = tape.transpose(f)?;
    let gram = tape.matmul(ft, f)?;
    let gram = if scale == 1.0 { gram } else { tape.scale(gram, scale) };
    Ok(tape.softmax(gram, 1)?)
}

/// `α·A·F + F` for `F` of shape `n×c`, on a tape.
pub fn random_walk_on(tape: &mut Tape, f: Var, a: Var, alpha: Var) -> Result<Var> {
    let af = tape.matmul(a, f)?;
    let scaled = tape.scalar_mul(alpha, af)?;
    Ok(tape.add(scaled, f)?)
}

/// Eager affinity with the default cap.
pub fn affinity_matrix(f: &Tensor) -> Result<AffinityMatrix> {
    let mut t = Tape::new();
    let v = t.constant(f.clone());
    let a = affinity_on(&mut t, v, 1.0, FsmConfig::default().affinity_cap)?;
    Ok(AffinityMatrix {
        entries: t.value(a).clone(),
    })
}

/// Eager random walk.
pub fn random_walk(f: &Tensor, a: &AffinityMatrix, alpha: f64) -> Result<Tensor> {
    let mut t = Tape::new();
    let fv = t.constant(f.clone());
    let av = t.constant(a.entries.clone());
    let al = t.constant(Tensor::scalar(alpha));
    let y = random_walk_on(&mut t, fv, av, al)?;
    Ok(t.value(y).clone())
}

/// Features around the random walk, each `c×h_d×w_d`.
#[derive(Clone, Copy, Debug)]
pub struct WalkFeatures {
    pub before: Var,
    pub after: Var,
}

/// Random walk module plus the 1-channel classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct Fsm {
    config: FsmConfig,
    head: Conv,
}

impl Fsm {
    pub fn new(config: FsmConfig, channels: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            head: Conv::new("fsm.head", channels, 1, 3, 1),
        })
    }

    pub fn config(&self) -> &FsmConfig {
        &self.config
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParamSet, rng: &mut R) {
        self.head.init(ps, rng);
        ps.insert(ALPHA, Tensor::scalar(self.config.alpha_init));
    }

    /// Pools `Fx` to the walk grid and propagates once (skipped when
    /// `walk` is false).
    pub fn walk(&self, tape: &mut Tape, p: &Bound, fx: Var, walk: bool) -> Result<WalkFeatures> {
        let [c, h, w] = *tape.shape(fx) else {
            return Err(invalid(format!("fsm expects c×h×w features, got {:?}", tape.shape(fx))));
        };
        let g = self.config.grid;
        let (hd, wd) = (h.min(g), w.min(g));
        if h % hd != 0 || w % wd != 0 || h / hd != w / wd {
            return Err(invalid(format!("features {h}×{w} cannot be pooled to a {hd}×{wd} grid")));
        }
        let n = hd * wd;
        if n > self.config.affinity_cap {
            return Err(invalid(format!("{n} affinity nodes exceed the cap of {}", self.config.affinity_cap)));
        }
        let pooled = if h == hd { fx } else { tape.avg_pool(fx, h / hd)? };
        if !walk {
            return Ok(WalkFeatures {
                before: pooled,
                after: pooled,
            });
        }
        let flat = tape.reshape(pooled, &[c, n])?;
        let basis = if self.config.normalize_features {
            let unit = tape.normalize_channels(pooled, 1e-12, None)?;
            tape.reshape(unit, &[c, n])?
        } else {
            flat
        };
        let a = affinity_on(tape, basis, self.config.affinity_scale, self.config.affinity_cap)?;
        let f_nc = tape.transpose(flat)?;
        let alpha = p.get(ALPHA)?;
        let walked = random_walk_on(tape, f_nc, a, alpha)?;
        let back = tape.transpose(walked)?;
        let after = tape.reshape(back, &[c, hd, wd])?;
        Ok(WalkFeatures { before: pooled, after })
    }

    /// Upsamples walked features to `h×w` and applies the head and sigmoid.
    pub fn classify(&self, tape: &mut Tape, p: &Bound, feats: Var, h: usize, w: usize) -> Result<Var> {
        let up = if tape.shape(feats)[1..] == [h, w] { feats } else { tape.resize_bilinear(feats, h, w)? };
        let logits = self.head.forward(tape, p, up)?;
        Ok(tape.sigmoid(logits))
    }

    /// Full module: pool, walk, upsample, classify.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, fx: Var, walk: bool) -> Result<(WalkFeatures, Var)> {
        let (h, w) = (tape.shape(fx)[1], tape.shape(fx)[2]);
        let wf = self.walk(tape, p, fx, walk)?;
        let prob = self.classify(tape, p, wf.after, h, w)?;
        Ok((wf, prob))
    }
}

/// Footprint cross-entropy on a tape.
pub fn weighted_bce_on(tape: &mut Tape, p: Var, y: &FootprintMask) -> Result<Var> {
    Ok(tape.weighted_bce(p, &y.mask, &y.valid, BCE_WEIGHTS, BCE_CLAMP)?)
}

/// Eager footprint cross-entropy: mean over valid pixels of
/// `−[y ln p + 0.1 (1−y) ln(1−p)]` with `p` clamped away from 0 and 1.
pub fn weighted_bce(p: &TraversabilityMap, y: &FootprintMask) -> Result<f64> {
    let mut t = Tape::new();
    let pv = t.constant(p.prob.clone());
    let l = weighted_bce_on(&mut t, pv, y)?;
    Ok(t.value(l).item())
}

/// Mean over jointly valid positions of `‖Tr(a) − b‖²`, on a tape, where
/// `a` and `b` are `c×h×w` maps. Flag set when nothing is valid.
pub fn consistency_on(tape: &mut Tape, a: Var, b: Var, tr: &TransformSpec) -> Result<(Var, bool)> {
    let [_, h, w] = *tape.shape(a) else {
        return Err(invalid("consistency expects c×h×w maps"));
    };
    let map = tr.pixel_map(h, w);
    let n_valid = map.iter().filter(|m| m.is_some()).count();
    let valid = Tensor::new(&[1, h, w], map.iter().map(|m| if m.is_some() { 1.0 } else { 0.0 }).collect())?;
    let moved = tape.gather_pixels(a, &map)?;
    let diff = tape.sub(moved, b)?;
    let sq = tape.square(diff);
    let mask = tape.constant(valid);
    let masked = tape.mul_plane(sq, mask)?;
    let total = tape.sum(masked);
    if n_valid == 0 {
        log::warn!("self-supervised loss: empty valid region");
        return Ok((tape.scale(total, 0.0), true));
    }
    Ok((tape.scale(total, 1.0 / n_valid as f64), false))
}

/// Loss weights `(λ_ce, λ_ss, λ_sn)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub ce: f64,
    pub ss: f64,
    pub sn: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ce: 1.0, ss: 0.1, sn: 1.0 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self { ce: 0.0, ss: 0.0, sn: 0.0 }
    }
}

/// Loss values of one sample or batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub bce: f64,
    pub ss: f64,
    pub sn: f64,
    /// Empty-region warnings raised while computing the components.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}
