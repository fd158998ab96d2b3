//! The full traversability network: extraction, fusion and footprint
//! supervision modules sharing one parameter set.

use crate::error::{invalid, Error, Result};
use crate::fsm::{self, consistency_on, weighted_bce_on, Fsm, FsmConfig, LossComponents, LossWeights, TransformSpec, TraversabilityMap, WalkFeatures, ALPHA};
use crate::frame::{RgbdFrame, SurfaceNormalImage};
use crate::geometry::FootprintMask;
use crate::gfn::{surface_normal_loss_on, Gfn, GfnConfig};
use crate::nn::{Bound, ParamSet};
use diffcore::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub gfn: GfnConfig,
    pub fsm: FsmConfig,
}

impl ModelConfig {
    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Values produced by one forward pass on a tape.
#[derive(Clone, Debug)]
pub struct Forward {
    pub p_sn: Var,
    pub visual_feats: Vec<Var>,
    /// F(x), `c×h×w`.
    pub features: Var,
    pub walk: WalkFeatures,
    /// `1×h×w`.
    pub p_trav: Var,
}

/// Inference outputs for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub normals: SurfaceNormalImage,
    pub traversability: TraversabilityMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    gfn: Gfn,
    fsm: Fsm,
    pub params: ParamSet,
}

impl Model {
    /// Freshly initialized model; parameters are rounded to `f32`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let gfn = Gfn::new(config.gfn.clone())?;
        let fsm = Fsm::new(config.fsm.clone(), config.gfn.feature_channels())?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        gfn.init(&mut params, &mut rng)?;
        fsm.init(&mut params, &mut rng);
        params.quantize_f32();
        Ok(Self { config, gfn, fsm, params })
    }

    /// Model with the given parameters, which must match the architecture.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        for (name, t) in m.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint {
                    name: name.clone(),
                    msg: format!("shape {:?} does not match model shape {:?}", got.shape(), t.shape()),
                });
            }
        }
        if let Some(extra) = params.names().find(|n| !m.params.contains(n)) {
            return Err(Error::Checkpoint {
                name: extra.clone(),
                msg: "not a parameter of this model".into(),
            });
        }
        m.params = params;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn gfn(&self) -> &Gfn {
        &self.gfn
    }

    pub fn fsm(&self) -> &Fsm {
        &self.fsm
    }

    /// Parameter shapes by name.
    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.params.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect()
    }

    /// Parameters excluded from optimization.
    pub fn is_frozen(&self, name: &str) -> bool {
        name == ALPHA && !self.config.fsm.learn_alpha
    }

    pub fn alpha(&self) -> f64 {
        self.params.get(ALPHA).map(|t| t.item()).unwrap_or(0.0)
    }

    /// Full forward pass over a `4×h×w` network input.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, input: Var, walk: bool) -> Result<Forward> {
        let ex = self.gfn.extraction_forward(tape, p, input)?;
        let features = self.gfn.fusion_forward(tape, p, ex.p_sn, &ex.visual_feats)?;
        let (wf, p_trav) = self.fsm.forward(tape, p, features, walk)?;
        Ok(Forward {
            p_sn: ex.p_sn,
            visual_feats: ex.visual_feats,
            features,
            walk: wf,
            p_trav,
        })
    }

    /// Feature map the consistency loss compares, `c×h_d×w_d`.
    fn consistency_features(&self, tape: &mut Tape, p: &Bound, input: Var) -> Result<Var> {
        let ex = self.gfn.extraction_forward(tape, p, input)?;
        let features = self.gfn.fusion_forward(tape, p, ex.p_sn, &ex.visual_feats)?;
        let wf = self.fsm.walk(tape, p, features, true)?;
        Ok(self.pick(wf))
    }

    fn pick(&self, wf: WalkFeatures) -> Var {
        if self.config.fsm.ss_after_rw {
            wf.after
        } else {
            wf.before
        }
    }

    pub fn predict(&self, frame: &RgbdFrame) -> Result<Prediction> {
        let mut t = Tape::new();
        let p = self.params.bind(&mut t, false);
        let x = t.constant(frame.network_input());
        let f = self.forward(&mut t, &p, x, self.config.fsm.rw_at_inference)?;
        Ok(Prediction {
            normals: SurfaceNormalImage::all_valid(t.value(f.p_sn).clone())?,
            traversability: TraversabilityMap::new(t.value(f.p_trav).clone())?,
        })
    }

    /// Extraction network alone: normals and decoder features.
    pub fn extraction_forward(&self, frame: &RgbdFrame) -> Result<(SurfaceNormalImage, Vec<Tensor>)> {
        let mut t = Tape::new();
        let p = self.params.bind(&mut t, false);
        let x = t.constant(frame.network_input());
        let ex = self.gfn.extraction_forward(&mut t, &p, x)?;
        let feats = ex.visual_feats.iter().map(|&v| t.value(v).clone()).collect();
        Ok((SurfaceNormalImage::all_valid(t.value(ex.p_sn).clone())?, feats))
    }

    /// Fusion network alone.
    pub fn fusion_forward(&self, p_sn: &SurfaceNormalImage, visual_feats: &[Tensor]) -> Result<Tensor> {
        let mut t = Tape::new();
        let p = self.params.bind(&mut t, false);
        let sn = t.constant(p_sn.normals.clone());
        let vf: Vec<Var> = visual_feats.iter().map(|f| t.constant(f.clone())).collect();
        let y = self.gfn.fusion_forward(&mut t, &p, sn, &vf)?;
        Ok(t.value(y).clone())
    }

    /// Footprint supervision module alone, with the random walk applied.
    pub fn fsm_forward(&self, fx: &Tensor) -> Result<TraversabilityMap> {
        let mut t = Tape::new();
        let p = self.params.bind(&mut t, false);
        let x = t.constant(fx.clone());
        let (_, prob) = self.fsm.forward(&mut t, &p, x, true)?;
        TraversabilityMap::new(t.value(prob).clone())
    }

    /// Consistency-loss features of an input, `c×h_d×w_d`.
    pub fn walked_features(&self, input: &Tensor) -> Result<Tensor> {
        let mut t = Tape::new();
        let p = self.params.bind(&mut t, false);
        let x = t.constant(input.clone());
        let f = self.consistency_features(&mut t, &p, x)?;
        Ok(t.value(f).clone())
    }

    /// `‖Tr(F(x)) − F(Tr(x))‖²` averaged over jointly valid grid positions,
    /// with the empty-region flag.
    pub fn self_supervised_loss(&self, frame: &RgbdFrame, tr: &TransformSpec) -> Result<(f64, bool)> {
        let mut t = Tape::new();
        let p = self.params.bind(&mut t, false);
        let x = t.constant(frame.network_input());
        let f = self.consistency_features(&mut t, &p, x)?;
        let (l, flag) = self.consistency_term(&mut t, &p, frame, f, tr)?;
        Ok((t.value(l).item(), flag))
    }

    fn consistency_term(&self, tape: &mut Tape, p: &Bound, frame: &RgbdFrame, f: Var, tr: &TransformSpec) -> Result<(Var, bool)> {
        let (h, w) = (frame.height(), frame.width());
        tr.validate(h, w)?;
        let (moved, _) = fsm::transform_apply(&frame.network_input(), tr)?;
        let xt = tape.constant(moved);
        let ft = self.consistency_features(tape, p, xt)?;
        let [_, hd, wd] = *tape.shape(f) else {
            return Err(invalid("consistency features must be c×h×w"));
        };
        consistency_on(tape, f, ft, &tr.rescaled(h, w, hd, wd))
    }

    /// Weighted sum of the three losses on a tape. Terms with zero weight
    /// are not evaluated and reported as 0.
    #[allow(clippy::too_many_arguments)]
    pub fn losses_on(
        &self,
        tape: &mut Tape,
        p: &Bound,
        frame: &RgbdFrame,
        footprint: &FootprintMask,
        gt_normals: &SurfaceNormalImage,
        tr: &TransformSpec,
        weights: &LossWeights,
    ) -> Result<(Var, LossComponents)> {
        let x = tape.constant(frame.network_input());
        let fw = self.forward(tape, p, x, true)?;
        let mut comps = LossComponents::default();
        let zero = tape.constant(Tensor::scalar(0.0));
        let mut total = zero;
        if weights.ce != 0.0 {
            let l = weighted_bce_on(tape, fw.p_trav, footprint)?;
            comps.bce = tape.value(l).item();
            let s = tape.scale(l, weights.ce);
            total = tape.add(total, s)?;
        }
        if weights.ss != 0.0 {
            let f = self.pick(fw.walk);
            let (l, flag) = self.consistency_term(tape, p, frame, f, tr)?;
            if flag {
                comps.warnings.push("self-supervised loss: empty valid region".into());
            }
            comps.ss = tape.value(l).item();
            let s = tape.scale(l, weights.ss);
            total = tape.add(total, s)?;
        }
        if weights.sn != 0.0 {
            let (l, flag) = surface_normal_loss_on(tape, fw.p_sn, gt_normals)?;
            if flag {
                comps.warnings.push("surface normal loss: no valid pixels".into());
            }
            comps.sn = tape.value(l).item();
            let s = tape.scale(l, weights.sn);
            total = tape.add(total, s)?;
        }
        comps.total = tape.value(total).item();
        for (name, v) in [("cross-entropy", comps.bce), ("self-supervised", comps.ss), ("surface normal", comps.sn), ("total", comps.total)] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { component: name });
            }
        }
        Ok((total, comps))
    }

    /// Eager total loss with its components.
    pub fn total_loss(
        &self,
        frame: &RgbdFrame,
        footprint: &FootprintMask,
        gt_normals: &SurfaceNormalImage,
        tr: &TransformSpec,
        weights: &LossWeights,
    ) -> Result<LossComponents> {
        let mut t = Tape::new();
        let p = self.params.bind(&mut t, false);
        Ok(self.losses_on(&mut t, &p, frame, footprint, gt_normals, tr, weights)?.1)
    }
}
