//! Guide filter network: the RGB-D extraction network producing surface
//! normals and the fusion network of guide filter layers.

use crate::error::{invalid, Error, Result};
use crate::frame::SurfaceNormalImage;
use crate::nn::{Bound, Conv, Deconv, ParamSet, ResBlock};
use diffcore::{ConvParams, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use crate::frame::RgbdFrame;

/// Normal substituted where the head output is exactly zero.
pub const FALLBACK_NORMAL: [f64; 3] = [0.0, 0.0, -1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GfnConfig {
    pub num_stages: usize,
    /// Encoder widths, fine to coarse.
    pub channels: Vec<usize>,
    /// Encoder strides; the first must be 1, the rest 1 or 2.
    pub strides: Vec<usize>,
    /// Guide filter kernel size (odd).
    pub kernel_size: usize,
    /// Initial logit of the centre tap of the spatial filter head; the
    /// other taps start at 0.
    pub spatial_center_logit: f64,
}

impl Default for GfnConfig {
    fn default() -> Self {
        Self {
            num_stages: 4,
            channels: vec![32, 64, 128, 256],
            strides: vec![1, 2, 2, 2],
            kernel_size: 3,
            spatial_center_logit: 4.0,
        }
    }
}

impl GfnConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.num_stages;
        if s == 0 || self.channels.len() != s || self.strides.len() != s {
            return Err(invalid(format!(
                "num_stages {s} needs {s} channels and {s} strides, got {} and {}",
                self.channels.len(),
                self.strides.len()
            )));
        }
        if self.channels.contains(&0) {
            return Err(invalid("channel widths must be positive"));
        }
        if self.strides[0] != 1 || self.strides.iter().any(|&st| st != 1 && st != 2) {
            return Err(invalid(format!("strides {:?} must start at 1 and be 1 or 2", self.strides)));
        }
        if self.kernel_size % 2 == 0 {
            return Err(invalid(format!("guide filter kernel size {} must be odd", self.kernel_size)));
        }
        if !self.spatial_center_logit.is_finite() {
            return Err(invalid("spatial_center_logit must be finite"));
        }
        Ok(())
    }

    /// Required divisor of the input height and width.
    pub fn spatial_divisor(&self) -> usize {
        self.strides.iter().product()
    }

    /// Width of the fused feature map.
    pub fn feature_channels(&self) -> usize {
        self.channels[0]
    }

    /// `(downsampling factor, width)` of decoder stage `j`, coarse to fine.
    fn decoder_stage(&self, j: usize) -> (usize, usize) {
        let e = self.num_stages - 1 - j;
        (self.strides[..=e].iter().product(), self.channels[e])
    }
}

/// Per-pixel decomposed dynamic filters.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicFilterPair {
    /// `h×w×k×k`, shared across channels.
    pub spatial: Tensor,
    /// `h×w×c′×c` channel-mixing matrices.
    pub pointwise: Tensor,
}

impl DynamicFilterPair {
    pub fn new(spatial: Tensor, pointwise: Tensor) -> Result<Self> {
        let (s, p) = (spatial.shape(), pointwise.shape());
        if s.len() != 4 || p.len() != 4 || s[..2] != p[..2] || s[2] != s[3] || s[2] % 2 == 0 {
            return Err(invalid(format!("invalid dynamic filter shapes {s:?} / {p:?}")));
        }
        Ok(Self { spatial, pointwise })
    }
}

/// Two-channel per-pixel softmax weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    /// `2×h×w`.
    pub weights: Tensor,
}

impl ConfidenceMap {
    pub fn new(weights: Tensor) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 3 || s[0] != 2 {
            return Err(invalid(format!("confidence map must be 2×h×w, got {s:?}")));
        }
        let plane = s[1] * s[2];
        let d = weights.data();
        for p in 0..plane {
            let (a, b) = (d[p], d[plane + p]);
            if (a + b - 1.0).abs() > 1e-6 || !(a > 0.0 && a < 1.0 && b > 0.0 && b < 1.0) {
                return Err(invalid(format!("confidence weights ({a}, {b}) at pixel {p} are not a distribution")));
            }
        }
        Ok(Self { weights })
    }
}

/// Tape handles for the parameters of one guide filter layer.
#[derive(Clone, Copy, Debug)]
pub struct GuideFilterVars {
    pub gate_weight: Var,
    pub gate_bias: Var,
    pub spatial_weight: Var,
    pub spatial_bias: Var,
    pub pointwise_weight: Var,
    pub pointwise_bias: Var,
}

/// Parameters of one guide filter layer as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct GuideFilterParams {
    /// `2 × 2c × kg × kg` gate convolution.
    pub gate: ConvParams,
    /// `k² × 2c × ks × ks` spatial filter head.
    pub spatial: ConvParams,
    /// `c′c × 2c × 1 × 1` pointwise filter head.
    pub pointwise: ConvParams,
}

impl GuideFilterParams {
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> GuideFilterVars {
        let mut put = |t: &Tensor| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        GuideFilterVars {
            gate_weight: put(&self.gate.kernel),
            gate_bias: put(&self.gate.bias),
            spatial_weight: put(&self.spatial.kernel),
            spatial_bias: put(&self.spatial.bias),
            pointwise_weight: put(&self.pointwise.kernel),
            pointwise_bias: put(&self.pointwise.bias),
        }
    }

    /// Filter size `k` implied by the spatial head.
    pub fn filter_size(&self) -> Result<usize> {
        filter_size_of(self.spatial.kernel.shape()[0])
    }

    /// Heads that produce a delta spatial filter (up to `exp(-center_logit)`
    /// leakage) and an identity pointwise filter, with a zero gate.
    pub fn identity(c: usize, k: usize, center_logit: f64) -> Result<Self> {
        let mut sb = Tensor::zeros(&[k * k]);
        sb.data_mut()[(k * k - 1) / 2] = center_logit;
        let mut pb = Tensor::zeros(&[c * c]);
        for a in 0..c {
            pb.data_mut()[a * c + a] = 1.0;
        }
        Ok(Self {
            gate: ConvParams::new(Tensor::zeros(&[2, 2 * c, 3, 3]), Tensor::zeros(&[2]), 1, 1)?,
            spatial: ConvParams::new(Tensor::zeros(&[k * k, 2 * c, 3, 3]), sb, 1, 1)?,
            pointwise: ConvParams::new(Tensor::zeros(&[c * c, 2 * c, 1, 1]), pb, 1, 0)?,
        })
    }
}

fn filter_size_of(taps: usize) -> Result<usize> {
    let k = (taps as f64).sqrt().round() as usize;
    if k * k != taps || k % 2 == 0 {
        return Err(invalid(format!("spatial head emits {taps} taps, not an odd square")));
    }
    Ok(k)
}

fn dims3(tape: &Tape, x: Var) -> Result<(usize, usize, usize)> {
    match tape.shape(x) {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(invalid(format!("expected a c×h×w feature map, got {s:?}"))),
    }
}

/// Confidence gate on a tape. Returns `(x′_g, x′_c, conf)`.
pub fn confidence_gate_on(tape: &mut Tape, x_g: Var, x_c: Var, weight: Var, bias: Var) -> Result<(Var, Var, Var)> {
    if tape.shape(x_g) != tape.shape(x_c) {
        return Err(invalid(format!(
            "confidence gate inputs differ in shape: {:?} vs {:?}",
            tape.shape(x_g),
            tape.shape(x_c)
        )));
    }
    let k = tape.shape(weight).get(2).copied().unwrap_or(1);
    let both = tape.concat(&[x_g, x_c])?;
    let logits = tape.conv2d(both, weight, bias, 1, k / 2)?;
    let conf = tape.softmax(logits, 0)?;
    let c0 = tape.narrow(conf, 0, 1)?;
    let c1 = tape.narrow(conf, 1, 1)?;
    let g = tape.mul_plane(x_g, c0)?;
    let c = tape.mul_plane(x_c, c1)?;
    Ok((g, c, conf))
}

/// Filter-generating heads on a tape. Returns `(K′, K″)` shaped `h×w×k×k`
/// and `h×w×c′×c`, where `c` is the channel count of `x′_c`.
pub fn generate_filters_on(tape: &mut Tape, x_g: Var, x_c: Var, v: &GuideFilterVars) -> Result<(Var, Var)> {
    let (c, h, w) = dims3(tape, x_c)?;
    let both = tape.concat(&[x_g, x_c])?;
    let ks = tape.shape(v.spatial_weight)[2];
    let logits = tape.conv2d(both, v.spatial_weight, v.spatial_bias, 1, ks / 2)?;
    let k = filter_size_of(tape.shape(logits)[0])?;
    let taps = tape.softmax(logits, 0)?;
    let taps = tape.permute(taps, &[1, 2, 0])?;
    let spatial = tape.reshape(taps, &[h, w, k, k])?;
    let kp = tape.shape(v.pointwise_weight)[2];
    let mix = tape.conv2d(both, v.pointwise_weight, v.pointwise_bias, 1, kp / 2)?;
    let cc = tape.shape(mix)[0];
    if cc % c != 0 {
        return Err(invalid(format!("pointwise head emits {cc} values, not a multiple of {c}")));
    }
    let mix = tape.permute(mix, &[1, 2, 0])?;
    let pointwise = tape.reshape(mix, &[h, w, cc / c, c])?;
    Ok((spatial, pointwise))
}

/// Guide filter layer on a tape: gate, generate filters, then convolve the
/// original `x_c` with K′ followed by K″.
pub fn guide_filter_on(tape: &mut Tape, x_g: Var, x_c: Var, v: &GuideFilterVars) -> Result<Var> {
    let (g, c, _) = confidence_gate_on(tape, x_g, x_c, v.gate_weight, v.gate_bias)?;
    let (spatial, pointwise) = generate_filters_on(tape, g, c, v)?;
    let y = tape.spatially_variant_conv(x_c, spatial)?;
    Ok(tape.pointwise_dynamic_conv(y, pointwise)?)
}

/// Eager confidence gate.
pub fn confidence_gate(x_g: &Tensor, x_c: &Tensor, params: &ConvParams) -> Result<(Tensor, Tensor, ConfidenceMap)> {
    let mut t = Tape::new();
    let (g, c) = (t.constant(x_g.clone()), t.constant(x_c.clone()));
    let (w, b) = (t.constant(params.kernel.clone()), t.constant(params.bias.clone()));
    let (g2, c2, conf) = confidence_gate_on(&mut t, g, c, w, b)?;
    Ok((t.value(g2).clone(), t.value(c2).clone(), ConfidenceMap::new(t.value(conf).clone())?))
}

/// Eager filter generation.
pub fn generate_filters(x_g: &Tensor, x_c: &Tensor, params: &GuideFilterParams) -> Result<DynamicFilterPair> {
    let mut t = Tape::new();
    let (g, c) = (t.constant(x_g.clone()), t.constant(x_c.clone()));
    let v = params.bind(&mut t, false);
    let (s, p) = generate_filters_on(&mut t, g, c, &v)?;
    DynamicFilterPair::new(t.value(s).clone(), t.value(p).clone())
}

/// Eager guide filter layer.
pub fn guide_filter_layer(x_g: &Tensor, x_c: &Tensor, params: &GuideFilterParams) -> Result<Tensor> {
    let mut t = Tape::new();
    let (g, c) = (t.constant(x_g.clone()), t.constant(x_c.clone()));
    let v = params.bind(&mut t, false);
    let y = guide_filter_on(&mut t, g, c, &v)?;
    Ok(t.value(y).clone())
}

/// A guide filter layer whose parameters live in a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct GuideFilterLayer {
    gate: Conv,
    spatial: Conv,
    pointwise: Conv,
    channels: usize,
    k: usize,
}

impl GuideFilterLayer {
    pub fn new(name: &str, channels: usize, k: usize) -> Self {
        Self {
            gate: Conv::new(format!("{name}.gate"), 2 * channels, 2, 3, 1),
            spatial: Conv::new(format!("{name}.spatial"), 2 * channels, k * k, 3, 1),
            pointwise: Conv::new(format!("{name}.pointwise"), 2 * channels, channels * channels, 1, 1),
            channels,
            k,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParamSet, rng: &mut R, center_logit: f64) -> Result<()> {
        self.gate.init(ps, rng);
        let id = GuideFilterParams::identity(self.channels, self.k, center_logit)?;
        ps.insert(self.spatial.weight(), id.spatial.kernel);
        ps.insert(self.spatial.bias(), id.spatial.bias);
        ps.insert(self.pointwise.weight(), id.pointwise.kernel);
        ps.insert(self.pointwise.bias(), id.pointwise.bias);
        Ok(())
    }

    pub fn vars(&self, p: &Bound) -> Result<GuideFilterVars> {
        Ok(GuideFilterVars {
            gate_weight: p.get(&self.gate.weight())?,
            gate_bias: p.get(&self.gate.bias())?,
            spatial_weight: p.get(&self.spatial.weight())?,
            spatial_bias: p.get(&self.spatial.bias())?,
            pointwise_weight: p.get(&self.pointwise.weight())?,
            pointwise_bias: p.get(&self.pointwise.bias())?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x_g: Var, x_c: Var) -> Result<Var> {
        let v = self.vars(p)?;
        guide_filter_on(tape, x_g, x_c, &v)
    }
}

/// Output of the extraction network on a tape.
#[derive(Clone, Debug)]
pub struct Extraction {
    /// `3×h×w` unit normals.
    pub p_sn: Var,
    /// Decoder outputs, coarse to fine.
    pub visual_feats: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderBlock {
    up: Deconv,
    conv: Option<Conv>,
}

#[derive(Clone, Debug, PartialEq)]
struct FusionStage {
    block: ResBlock,
    project: Conv,
    guide: GuideFilterLayer,
    /// Downsampling factor relative to the input.
    factor: usize,
}

/// Extraction plus fusion networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Gfn {
    config: GfnConfig,
    encoder: Vec<ResBlock>,
    decoder: Vec<DecoderBlock>,
    head: Conv,
    fusion: Vec<FusionStage>,
}

impl Gfn {
    pub fn new(config: GfnConfig) -> Result<Self> {
        config.validate()?;
        let s = config.num_stages;
        let ch = &config.channels;
        let mut encoder = Vec::with_capacity(s);
        let mut cin = 4;
        for (e, (&c, &st)) in ch.iter().zip(&config.strides).enumerate() {
            encoder.push(ResBlock::new(&format!("gfn.enc{e}"), cin, c, st));
            cin = c;
        }
        let mut decoder = Vec::with_capacity(s);
        decoder.push(DecoderBlock {
            up: Deconv::new("gfn.dec0.up", ch[s - 1], ch[s - 1], 1),
            conv: None,
        });
        for j in 1..s {
            let (src, dst) = (s - j, s - 1 - j);
            decoder.push(DecoderBlock {
                up: Deconv::new(format!("gfn.dec{j}.up"), 2 * ch[src], ch[dst], config.strides[src]),
                conv: Some(Conv::new(format!("gfn.dec{j}.conv"), ch[dst], ch[dst], 3, 1)),
            });
        }
        let head = Conv::new("gfn.head", 2 * ch[0], 3, 3, 1);
        let mut fusion = Vec::with_capacity(s);
        for j in 0..s {
            let (factor, width) = config.decoder_stage(j);
            let cin = if j == 0 { 3 } else { config.decoder_stage(j - 1).1 + 3 };
            fusion.push(FusionStage {
                block: ResBlock::new(&format!("gfn.fuse{j}.res"), cin, width, 1),
                project: Conv::new(format!("gfn.fuse{j}.proj"), width, width, 1, 1),
                guide: GuideFilterLayer::new(&format!("gfn.fuse{j}.gfl"), width, config.kernel_size),
                factor,
            });
        }
        Ok(Self {
            config,
            encoder,
            decoder,
            head,
            fusion,
        })
    }

    pub fn config(&self) -> &GfnConfig {
        &self.config
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParamSet, rng: &mut R) -> Result<()> {
        for b in &self.encoder {
            b.init(ps, rng);
        }
        for d in &self.decoder {
            d.up.init(ps, rng);
            if let Some(c) = &d.conv {
                c.init(ps, rng);
            }
        }
        self.head.init(ps, rng);
        for f in &self.fusion {
            f.block.init(ps, rng);
            f.project.init(ps, rng);
            f.guide.init(ps, rng, self.config.spatial_center_logit)?;
        }
        Ok(())
    }

    /// Checks that an input of `h×w` pixels fits the stage strides.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let d = self.config.spatial_divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(invalid(format!("input {h}×{w} is not divisible by {d}")));
        }
        Ok(())
    }

    /// Extraction network over a `4×h×w` input (rgb + normalized depth).
    pub fn extraction_forward(&self, tape: &mut Tape, p: &Bound, input: Var) -> Result<Extraction> {
        let (c, h, w) = dims3(tape, input)?;
        if c != 4 {
            return Err(invalid(format!("extraction input must have 4 channels, got {c}")));
        }
        self.check_input(h, w)?;
        let mut enc = Vec::with_capacity(self.encoder.len());
        let mut x = input;
        for b in &self.encoder {
            x = b.forward(tape, p, x)?;
            enc.push(x);
        }
        let s = enc.len();
        let mut feats = Vec::with_capacity(s);
        let mut d = enc[s - 1];
        for (j, blk) in self.decoder.iter().enumerate() {
            let inp = if j == 0 { d } else { tape.concat(&[d, enc[s - j]])? };
            let y = blk.up.forward(tape, p, inp)?;
            d = tape.relu(y);
            if let Some(conv) = &blk.conv {
                let y = conv.forward(tape, p, d)?;
                d = tape.relu(y);
            }
            feats.push(d);
        }
        let top = tape.concat(&[d, enc[0]])?;
        let raw = self.head.forward(tape, p, top)?;
        let p_sn = tape.normalize_channels(raw, 0.0, Some(&FALLBACK_NORMAL))?;
        Ok(Extraction { p_sn, visual_feats: feats })
    }

    /// Fusion network: guidance from `p_sn` through residual blocks, visual
    /// features convolved by guide filter layers. Returns F(x) at the input
    /// resolution.
    pub fn fusion_forward(&self, tape: &mut Tape, p: &Bound, p_sn: Var, visual_feats: &[Var]) -> Result<Var> {
        let (_, h, w) = dims3(tape, p_sn)?;
        if visual_feats.len() != self.fusion.len() {
            return Err(invalid(format!("expected {} visual features, got {}", self.fusion.len(), visual_feats.len())));
        }
        let mut prev: Option<(Var, usize)> = None;
        let mut out = p_sn;
        for (j, (stage, &vf)) in self.fusion.iter().zip(visual_feats).enumerate() {
            let f = stage.factor;
            if h % f != 0 || w % f != 0 {
                return Err(Error::Stage {
                    stage: j,
                    msg: format!("input {h}×{w} not divisible by {f}"),
                });
            }
            let want = [stage.project.cin, h / f, w / f];
            if tape.shape(vf) != want {
                return Err(Error::Stage {
                    stage: j,
                    msg: format!("visual feature {:?} does not match expected {want:?}", tape.shape(vf)),
                });
            }
            let pooled = if f == 1 { p_sn } else { tape.avg_pool(p_sn, f)? };
            let input = match prev {
                None => pooled,
                Some((y, pf)) => {
                    let up = if pf == f { y } else { tape.upsample_nearest(y, pf / f)? };
                    tape.concat(&[up, pooled])?
                }
            };
            let guidance = stage.block.forward(tape, p, input)?;
            let convolve = stage.project.forward(tape, p, vf)?;
            out = stage.guide.forward(tape, p, guidance, convolve)?;
            prev = Some((out, f));
        }
        Ok(out)
    }
}

/// Mean over pixels valid in `gt` of the squared distance between normals,
/// on a tape. The flag is set when no pixel is valid (the loss is then 0).
pub fn surface_normal_loss_on(tape: &mut Tape, p_sn: Var, gt: &SurfaceNormalImage) -> Result<(Var, bool)> {
    if tape.shape(p_sn) != gt.normals.shape() {
        return Err(invalid(format!(
            "surface normal shapes differ: {:?} vs {:?}",
            tape.shape(p_sn),
            gt.normals.shape()
        )));
    }
    let n_valid = gt.validity.data().iter().filter(|&&v| v > 0.5).count();
    let target = tape.constant(gt.normals.clone());
    let mask = tape.constant(gt.validity.clone());
    let diff = tape.sub(p_sn, target)?;
    let sq = tape.square(diff);
    let masked = tape.mul_plane(sq, mask)?;
    let total = tape.sum(masked);
    if n_valid == 0 {
        log::warn!("surface normal loss: no valid pixels");
        return Ok((tape.scale(total, 0.0), true));
    }
    Ok((tape.scale(total, 1.0 / n_valid as f64), false))
}

/// Eager surface normal loss with its empty-mask flag.
pub fn surface_normal_loss(p_sn: &SurfaceNormalImage, gt: &SurfaceNormalImage) -> Result<(f64, bool)> {
    let mut t = Tape::new();
    let p = t.constant(p_sn.normals.clone());
    let (l, flag) = surface_normal_loss_on(&mut t, p, gt)?;
    Ok((t.value(l).item(), flag))
}
