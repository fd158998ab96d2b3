//! Finite-difference checks of every differentiable building block, shared
//! by the `gradcheck` command and the test suite.

use crate::error::Result;
use crate::frame::{Intrinsics, Pose, RgbdFrame, SurfaceNormalImage};
use crate::fsm::{self, Fsm, FsmConfig, LossWeights, TransformSpec};
use crate::geometry::FootprintMask;
use crate::gfn::{self, GfnConfig, GuideFilterVars};
use crate::model::{Model, ModelConfig};
use crate::nn::{Bound, ParamSet};
use diffcore::{grad_check, GradCheckOptions, GradCheckReport, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::rand_uniform(shape, -1.0, 1.0, rng)
}

fn binary(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    rand_t(shape, rng).map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

fn gfl_vars(v: &[Var]) -> GuideFilterVars {
    GuideFilterVars {
        gate_weight: v[2],
        gate_bias: v[3],
        spatial_weight: v[4],
        spatial_bias: v[5],
        pointwise_weight: v[6],
        pointwise_bias: v[7],
    }
}

fn gfl_inputs(c: usize, h: usize, w: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![
        rand_t(&[c, h, w], rng),
        rand_t(&[c, h, w], rng),
        rand_t(&[2, 2 * c, 3, 3], rng),
        rand_t(&[2], rng),
        rand_t(&[k * k, 2 * c, 3, 3], rng),
        rand_t(&[k * k], rng),
        rand_t(&[c * c, 2 * c, 1, 1], rng),
        rand_t(&[c * c], rng),
    ]
}

/// Tiny model used for the end-to-end check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        gfn: GfnConfig {
            num_stages: 2,
            channels: vec![2, 3],
            strides: vec![1, 2],
            kernel_size: 3,
            spatial_center_logit: 1.0,
        },
        fsm: FsmConfig {
            grid: 4,
            normalize_features: false,
            ..Default::default()
        },
    }
}

/// Synthetic 8×8 frame with a footprint and normals target.
pub fn tiny_frame(seed: u64) -> (RgbdFrame, FootprintMask, SurfaceNormalImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (8, 8);
    let rgb = rand_t(&[3, h, w], &mut rng).map(|v| 0.5 + 0.4 * v);
    let depth = rand_t(&[1, h, w], &mut rng).map(|v| 3.0 + v);
    let k = Intrinsics::new(8.0, 8.0, 3.5, 3.5).expect("valid intrinsics");
    let frame = RgbdFrame::new(rgb, depth, k, Pose::identity(), seed, 0.0).expect("valid frame");
    let m = binary(&[1, h, w], &mut rng);
    let fp = FootprintMask::new(m, Tensor::ones(&[1, h, w])).expect("valid footprint");
    let mut n = rand_t(&[3, h, w], &mut rng);
    let plane = h * w;
    for p in 0..plane {
        let l = (0..3).map(|c| n.data()[c * plane + p].powi(2)).sum::<f64>().sqrt().max(1e-3);
        for c in 0..3 {
            n.data_mut()[c * plane + p] /= l;
        }
    }
    let normals = SurfaceNormalImage::new(n, binary(&[1, h, w], &mut rng)).expect("valid normals");
    (frame, fp, normals)
}

fn bind_named(names: &[String], vars: &[Var]) -> Bound {
    Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()))
}

/// Runs every check. `quick` samples a few coordinates per input for the
/// end-to-end model check.
pub fn run(seed: u64, quick: bool) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions {
        seed,
        ..Default::default()
    };
    let mut out = Vec::new();

    let inputs = [rand_t(&[2, 6, 6], &mut rng), rand_t(&[3, 2, 3, 3], &mut rng), rand_t(&[3], &mut rng)];
    out.push(grad_check("conv2d", |t, v| Ok(t.conv2d(v[0], v[1], v[2], 2, 1)?), &inputs, &opts)?);
    let inputs = [rand_t(&[3, 4, 4], &mut rng), rand_t(&[3, 2, 2, 2], &mut rng), rand_t(&[2], &mut rng)];
    out.push(grad_check("deconv2d", |t, v| Ok(t.deconv2d(v[0], v[1], v[2], 2, 0)?), &inputs, &opts)?);
    out.push(grad_check("softmax", |t, v| Ok(t.softmax(v[0], 0)?), &[rand_t(&[4, 3, 3], &mut rng)], &opts)?);
    let inputs = [rand_t(&[2, 5, 4], &mut rng), rand_t(&[5, 4, 3, 3], &mut rng)];
    out.push(grad_check("spatially_variant_conv", |t, v| Ok(t.spatially_variant_conv(v[0], v[1])?), &inputs, &opts)?);
    let inputs = [rand_t(&[3, 4, 4], &mut rng), rand_t(&[4, 4, 2, 3], &mut rng)];
    out.push(grad_check("pointwise_dynamic_conv", |t, v| Ok(t.pointwise_dynamic_conv(v[0], v[1])?), &inputs, &opts)?);

    let g = gfl_inputs(2, 5, 5, 3, &mut rng);
    out.push(grad_check(
        "confidence_gate",
        |t, v| {
            let (a, b, conf) = gfn::confidence_gate_on(t, v[0], v[1], v[2], v[3]).map_err(to_diff)?;
            let ab = t.concat(&[a, b])?;
            Ok(t.concat(&[ab, conf])?)
        },
        &g[..4],
        &opts,
    )?);
    out.push(grad_check(
        "generate_filters",
        |t, v| {
            let (s, p) = gfn::generate_filters_on(t, v[0], v[1], &gfl_vars(v)).map_err(to_diff)?;
            let s = t.reshape(s, &[9 * 25])?;
            let p = t.reshape(p, &[4 * 25])?;
            Ok(t.concat(&[s, p])?)
        },
        &g,
        &opts,
    )?);
    out.push(grad_check(
        "guide_filter_layer",
        |t, v| gfn::guide_filter_on(t, v[0], v[1], &gfl_vars(v)).map_err(to_diff),
        &g,
        &opts,
    )?);

    out.push(grad_check(
        "affinity_random_walk",
        |t, v| {
            let a = fsm::affinity_on(t, v[0], 1.0, 4096).map_err(to_diff)?;
            let f = t.transpose(v[0])?;
            fsm::random_walk_on(t, f, a, v[1]).map_err(to_diff)
        },
        &[rand_t(&[3, 6], &mut rng), Tensor::scalar(0.7)],
        &opts,
    )?);

    let head = Fsm::new(
        FsmConfig {
            grid: 2,
            ..Default::default()
        },
        3,
    )?;
    let mut ps = ParamSet::new();
    head.init(&mut ps, &mut rng);
    let names: Vec<String> = ps.names().cloned().collect();
    let mut inputs = vec![rand_t(&[3, 4, 4], &mut rng)];
    inputs.extend(ps.iter().map(|(_, t)| t.clone()));
    out.push(grad_check(
        "fsm_forward",
        |t, v| {
            let b = bind_named(&names, &v[1..]);
            Ok(head.forward(t, &b, v[0], true).map_err(to_diff)?.1)
        },
        &inputs,
        &opts,
    )?);

    let y = binary(&[1, 4, 4], &mut rng);
    let mut valid = binary(&[1, 4, 4], &mut rng);
    valid.add_assign(&y);
    let fp = FootprintMask::new(y, valid.map(|v| v.min(1.0)))?;
    let p = rand_t(&[1, 4, 4], &mut rng).map(|v| 0.5 + 0.4 * v);
    out.push(grad_check("weighted_bce", |t, v| fsm::weighted_bce_on(t, v[0], &fp).map_err(to_diff), &[p], &opts)?);
    let tr = TransformSpec::Translate { dx: 1, dy: 0 };
    let inputs = [rand_t(&[2, 4, 5], &mut rng), rand_t(&[2, 4, 5], &mut rng)];
    out.push(grad_check(
        "self_supervised_loss",
        |t, v| Ok(fsm::consistency_on(t, v[0], v[1], &tr).map_err(to_diff)?.0),
        &inputs,
        &opts,
    )?);
    out.push(grad_check(
        "self_supervised_loss_flip",
        |t, v| Ok(fsm::consistency_on(t, v[0], v[1], &TransformSpec::HorizontalFlip).map_err(to_diff)?.0),
        &inputs,
        &opts,
    )?);
    let (_, _, gt) = tiny_frame(seed);
    let p = rand_t(&[3, 8, 8], &mut rng);
    out.push(grad_check(
        "surface_normal_loss",
        |t, v| Ok(gfn::surface_normal_loss_on(t, v[0], &gt).map_err(to_diff)?.0),
        &[p],
        &opts,
    )?);

    let mut model = Model::new(tiny_model_config(), seed)?;
    // zero biases put dead ReLU units exactly on the kink
    for (name, t) in model.params.iter_mut() {
        if name.ends_with(".bias") {
            let jitter = Tensor::rand_uniform(t.shape(), -0.05, 0.05, &mut rng);
            t.add_assign(&jitter);
        }
    }
    let (frame, fp, gt) = tiny_frame(seed ^ 1);
    let names: Vec<String> = model.params.names().cloned().collect();
    let inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let weights = LossWeights { ce: 1.0, ss: 0.5, sn: 1.0 };
    let tr = TransformSpec::HorizontalFlip;
    let e2e = GradCheckOptions {
        max_coords: if quick { Some(4) } else { Some(24) },
        ..opts.clone()
    };
    out.push(grad_check(
        "total_loss",
        |t, v| {
            let b = bind_named(&names, v);
            Ok(model.losses_on(t, &b, &frame, &fp, &gt, &tr, &weights).map_err(to_diff)?.0)
        },
        &inputs,
        &e2e,
    )?);
    Ok(out)
}

fn to_diff(e: crate::Error) -> diffcore::DiffError {
    match e {
        crate::Error::Tensor(d) => d,
        other => diffcore::DiffError::InvalidArgument {
            op: "model",
            msg: other.to_string(),
        },
    }
}
