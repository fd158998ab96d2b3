mod common;

use common::*;
use diffcore::{Tape, Tensor};
use ftfoot::fsm::*;
use ftfoot::geometry::FootprintMask;
use ftfoot::gfn::surface_normal_loss;
use ftfoot::nn::ParamSet;
use ftfoot::Model;
use proptest::prelude::*;

/// Row softmax of `FᵀF` written out directly.
fn affinity_oracle(f: &[f64], c: usize, n: usize) -> Vec<f64> {
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        let g: Vec<f64> = (0..n).map(|j| (0..c).map(|k| f[k * n + i] * f[k * n + j]).sum()).collect();
        let m = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = g.iter().map(|v| (v - m).exp()).sum();
        for j in 0..n {
            a[i * n + j] = (g[j] - m).exp() / z;
        }
    }
    a
}

#[test]
fn two_node_affinity_example() {
    let f = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
    let a = affinity_matrix(&f).unwrap();
    let e = std::f64::consts::E;
    let want = [1.0 / (1.0 + e), e / (1.0 + e), 1.0 / (1.0 + e * e), e * e / (1.0 + e * e)];
    for (x, y) in a.entries.data().iter().zip(want) {
        assert!((x - y).abs() < 1e-15);
    }
    for (x, y) in a.entries.data().iter().zip([0.2689, 0.7311, 0.1192, 0.8808]) {
        assert!((x - y).abs() < 5e-5);
    }
    let fp = random_walk(&Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap(), &a, 0.5).unwrap();
    let oracle = [1.0 + 0.5 * (want[0] + 2.0 * want[1]), 2.0 + 0.5 * (want[2] + 2.0 * want[3])];
    assert!((fp.data()[0] - oracle[0]).abs() < 1e-14 && (fp.data()[1] - oracle[1]).abs() < 1e-14);
    assert!((fp.data()[0] - 1.8655).abs() < 5e-5 && (fp.data()[1] - 2.9404).abs() < 5e-5);
}

#[test]
fn constant_features_give_uniform_affinity() {
    let f = Tensor::full(&[3, 5], 0.7);
    let a = affinity_matrix(&f).unwrap();
    assert!(a.entries.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    let fnc = Tensor::full(&[5, 3], 0.7);
    let out = random_walk(&fnc, &a, 0.3).unwrap();
    assert!(out.data().iter().all(|&v| (v - 1.3 * 0.7).abs() < 1e-12));
}

#[test]
fn affinity_cap_is_enforced() {
    let mut t = Tape::new();
    let f = t.constant(Tensor::zeros(&[1, 10]));
    assert!(affinity_on(&mut t, f, 1.0, 9).is_err());
}

proptest! {
    #[test]
    fn affinity_rows_are_distributions(data in prop::collection::vec(-2.0f64..2.0, 12), alpha in -2.0f64..2.0) {
        let f = Tensor::new(&[3, 4], data.clone()).unwrap();
        let a = affinity_matrix(&f).unwrap();
        let oracle = affinity_oracle(&data, 3, 4);
        for r in 0..4 {
            let row = &a.entries.data()[r * 4..r * 4 + 4];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
        for (x, y) in a.entries.data().iter().zip(&oracle) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        let fnc = Tensor::new(&[4, 3], (0..12).map(|q| data[(q % 3) * 4 + q / 3]).collect()).unwrap();
        let same = random_walk(&fnc, &a, 0.0).unwrap();
        prop_assert_eq!(same.data(), fnc.data());
        let walked = random_walk(&fnc, &a, alpha).unwrap();
        for i in 0..4 {
            for k in 0..3 {
                let af: f64 = (0..4).map(|j| oracle[i * 4 + j] * data[k * 4 + j]).sum();
                prop_assert!((walked.data()[i * 3 + k] - (data[k * 4 + i] + alpha * af)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn transform_examples() {
    let x = rand_t(&[2, 4, 5], 1);
    let (f1, v1) = transform_apply(&x, &TransformSpec::HorizontalFlip).unwrap();
    let (f2, _) = transform_apply(&f1, &TransformSpec::HorizontalFlip).unwrap();
    assert_eq!(f2, x);
    assert!(v1.data().iter().all(|&v| v == 1.0));
    let (t0, v0) = transform_apply(&x, &TransformSpec::Translate { dx: 0, dy: 0 }).unwrap();
    assert_eq!(t0, x);
    assert!(v0.data().iter().all(|&v| v == 1.0));
    let ramp = Tensor::new(&[1, 3, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).unwrap();
    let (r, v) = transform_apply(&ramp, &TransformSpec::Translate { dx: 1, dy: 0 }).unwrap();
    assert_eq!(r.data(), &[0.0, 1.0, 2.0, 0.0, 4.0, 5.0, 0.0, 7.0, 8.0]);
    assert_eq!(v.data(), &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    assert!(TransformSpec::Translate { dx: 2, dy: 0 }.validate(10, 10).is_err());
    assert!(TransformSpec::Translate { dx: 1, dy: -1 }.validate(10, 10).is_ok());
}

#[test]
fn transform_serializes_with_kind_tag() {
    let t = TransformSpec::Translate { dx: -3, dy: 0 };
    let s = serde_json::to_string(&t).unwrap();
    assert_eq!(s, r#"{"kind":"translate","dx":-3,"dy":0}"#);
    assert_eq!(serde_json::from_str::<TransformSpec>(&s).unwrap(), t);
}

fn one_pixel(p: f64, y: f64) -> f64 {
    let fp = FootprintMask::new(Tensor::full(&[1, 1, 1], y), Tensor::ones(&[1, 1, 1])).unwrap();
    weighted_bce(&TraversabilityMap::new(Tensor::full(&[1, 1, 1], p)).unwrap(), &fp).unwrap()
}

#[test]
fn weighted_bce_closed_forms() {
    assert!((one_pixel(0.9, 1.0) - 0.9f64.ln().abs()).abs() < 1e-12);
    assert!((one_pixel(0.9, 1.0) - 0.10536).abs() < 1e-5);
    assert!((one_pixel(0.9, 0.0) - 0.1 * 0.1f64.ln().abs()).abs() < 1e-12);
    assert!((one_pixel(0.9, 0.0) - 0.23026).abs() < 1e-5);
    let y = rand_t(&[1, 4, 4], 3).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let fp = FootprintMask::new(y.clone(), Tensor::ones(&[1, 4, 4])).unwrap();
    let perfect = weighted_bce(&TraversabilityMap::new(y).unwrap(), &fp).unwrap();
    assert!(perfect < 1e-5, "{perfect}");
}

#[test]
fn weighted_bce_ignores_invalid_pixels() {
    let mask = Tensor::new(&[1, 1, 2], vec![1.0, 0.0]).unwrap();
    let valid = Tensor::new(&[1, 1, 2], vec![1.0, 0.0]).unwrap();
    let fp = FootprintMask::new(mask, valid).unwrap();
    let p = TraversabilityMap::new(Tensor::new(&[1, 1, 2], vec![0.9, 0.999]).unwrap()).unwrap();
    assert!((weighted_bce(&p, &fp).unwrap() - one_pixel(0.9, 1.0)).abs() < 1e-15);
}

proptest! {
    #[test]
    fn weighted_bce_is_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi - lo > 1e-9);
        prop_assert!(one_pixel(lo, 1.0) >= one_pixel(hi, 1.0));
        prop_assert!(one_pixel(lo, 0.0) <= one_pixel(hi, 0.0));
    }
}

fn small_model(seed: u64) -> Model {
    Model::new(small_config(), seed).unwrap()
}

#[test]
fn fsm_output_is_a_probability_map() {
    let m = small_model(1);
    for seed in 0..4 {
        let fx = rand_t(&[4, 16, 16], seed).map(|v| 5.0 * v);
        let p = m.fsm_forward(&fx).unwrap();
        assert_eq!(p.prob.shape(), &[1, 16, 16]);
        assert!(p.prob.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn zero_alpha_matches_pipeline_without_walk() {
    let mut m = small_model(2);
    *m.params.get_mut(ALPHA).unwrap() = Tensor::scalar(0.0);
    let fx = rand_t(&[4, 16, 16], 9);
    let mut t = Tape::new();
    let p = m.params.bind(&mut t, false);
    let x = t.constant(fx.clone());
    let (_, with) = m.fsm().forward(&mut t, &p, x, true).unwrap();
    let (_, without) = m.fsm().forward(&mut t, &p, x, false).unwrap();
    assert_eq!(t.value(with), t.value(without));
}

#[test]
fn fsm_forward_is_per_sample_pure() {
    let m = small_model(3);
    let a = rand_t(&[4, 16, 16], 11);
    let b = rand_t(&[4, 16, 16], 12);
    let ab = [m.fsm_forward(&a).unwrap(), m.fsm_forward(&b).unwrap()];
    let ba = [m.fsm_forward(&b).unwrap(), m.fsm_forward(&a).unwrap()];
    assert_eq!(ab[0], ba[1]);
    assert_eq!(ab[1], ba[0]);
}

#[test]
fn self_supervised_loss_vanishes_under_identity() {
    for seed in 0..3 {
        let m = small_model(seed);
        let frame = random_frame(16, 16, seed + 20);
        let (l, flag) = m.self_supervised_loss(&frame, &TransformSpec::Identity).unwrap();
        assert_eq!(l, 0.0);
        assert!(!flag);
    }
}

/// All weights zero and biases constant; the spatial filter is a hard delta.
fn constant_model() -> Model {
    let m = small_model(0);
    let mut ps = ParamSet::new();
    for (name, t) in m.params.iter() {
        let v = if name.ends_with(".weight") {
            Tensor::zeros(t.shape())
        } else if name.ends_with("gfl.spatial.bias") {
            let mut b = Tensor::zeros(t.shape());
            b.data_mut()[4] = 60.0;
            b
        } else {
            Tensor::full(t.shape(), 0.3)
        };
        ps.insert(name.clone(), v);
    }
    Model::from_params(m.config().clone(), ps).unwrap()
}

#[test]
fn self_supervised_loss_vanishes_for_constant_models() {
    let m = constant_model();
    let frame = random_frame(16, 16, 5);
    for tr in [TransformSpec::HorizontalFlip, TransformSpec::Translate { dx: 1, dy: 0 }, TransformSpec::Translate { dx: -1, dy: 1 }] {
        let (l, _) = m.self_supervised_loss(&frame, &tr).unwrap();
        assert!(l < 1e-20, "{tr:?}: {l}");
    }
}

#[test]
fn self_supervised_loss_matches_recomputation() {
    for seed in 0..3 {
        let m = small_model(seed + 40);
        let frame = random_frame(16, 16, seed + 50);
        let tr = TransformSpec::HorizontalFlip;
        let (l, _) = m.self_supervised_loss(&frame, &tr).unwrap();
        let x = frame.network_input();
        let fx = m.walked_features(&x).unwrap();
        let (xt, _) = transform_apply(&x, &tr).unwrap();
        let ftx = m.walked_features(&xt).unwrap();
        let [c, h, w] = *fx.shape() else { unreachable!() };
        let mut sum = 0.0;
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    let a = fx.data()[k * h * w + i * w + (w - 1 - j)];
                    let b = ftx.data()[k * h * w + i * w + j];
                    sum += (a - b).powi(2);
                }
            }
        }
        let oracle = sum / (h * w) as f64;
        assert!(oracle > 0.0);
        assert!((l - oracle).abs() <= 1e-10, "{l} vs {oracle}");
    }
}

#[test]
fn self_supervised_loss_translation_uses_scaled_shift() {
    // A 32-pixel input pools onto an 8-cell grid, so a shift of 3 px rounds to 1 cell.
    let m = small_model(60);
    let frame = random_frame(32, 32, 61);
    let tr = TransformSpec::Translate { dx: 3, dy: 0 };
    let (l, _) = m.self_supervised_loss(&frame, &tr).unwrap();
    let x = frame.network_input();
    let fx = m.walked_features(&x).unwrap();
    let ftx = m.walked_features(&transform_apply(&x, &tr).unwrap().0).unwrap();
    let [c, h, w] = *fx.shape() else { unreachable!() };
    let mut sum = 0.0;
    for i in 0..h {
        for j in 1..w {
            for k in 0..c {
                sum += (fx.data()[k * h * w + i * w + j - 1] - ftx.data()[k * h * w + i * w + j]).powi(2);
            }
        }
    }
    assert!((l - sum / (h * (w - 1)) as f64).abs() <= 1e-10);
}

#[test]
fn total_loss_cases() {
    let m = small_model(70);
    let frame = random_frame(16, 16, 71);
    let fp = random_footprint(16, 16, 72);
    let gt = random_normals(16, 16, 73);
    let tr = TransformSpec::HorizontalFlip;
    let zero = m.total_loss(&frame, &fp, &gt, &tr, &LossWeights::zero()).unwrap();
    assert_eq!(zero.total, 0.0);
    let pred = m.predict(&frame).unwrap();
    let bce = weighted_bce(&pred.traversability, &fp).unwrap();
    let ce_only = m.total_loss(&frame, &fp, &gt, &tr, &LossWeights { ce: 1.0, ss: 0.0, sn: 0.0 }).unwrap();
    assert_eq!(ce_only.total, bce);
    let (ss, _) = m.self_supervised_loss(&frame, &tr).unwrap();
    let (sn, _) = surface_normal_loss(&pred.normals, &gt).unwrap();
    let w = LossWeights { ce: 0.7, ss: 0.3, sn: 1.9 };
    let all = m.total_loss(&frame, &fp, &gt, &tr, &w).unwrap();
    assert!((all.total - (0.7 * bce + 0.3 * ss + 1.9 * sn)).abs() <= 1e-12);
    assert!((all.total - (w.ce * all.bce + w.ss * all.ss + w.sn * all.sn)).abs() <= 1e-12);
    assert!(all.bce > 0.0 && all.ss > 0.0 && all.sn > 0.0);
}

#[test]
fn empty_valid_region_flags_and_returns_zero() {
    let mut t = Tape::new();
    let a = t.constant(rand_t(&[2, 3, 1], 1));
    let b = t.constant(rand_t(&[2, 3, 1], 2));
    let (l, flag) = consistency_on(&mut t, a, b, &TransformSpec::Translate { dx: 1, dy: 0 }).unwrap();
    assert!(flag);
    assert_eq!(t.value(l).item(), 0.0);
}
