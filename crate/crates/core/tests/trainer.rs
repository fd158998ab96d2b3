mod common;

use common::*;
use ftfoot::checkpoint::Checkpoint;
use ftfoot::dataset::Sample;
use ftfoot::fsm::{LossWeights, TransformSpec};
use ftfoot::nn::ParamSet;
use ftfoot::synth::{generate_default, CameraRig, SceneSampler};
use ftfoot::trainer::*;
use ftfoot::{Error, Model};

fn rig32() -> CameraRig {
    CameraRig {
        width: 32,
        height: 32,
        fx: 20.0,
        fy: 20.0,
        ..Default::default()
    }
}

fn samples(n: u64) -> Vec<Sample> {
    (0..n).map(|s| generate_default(&SceneSampler::default().sample(s), &rig32()).unwrap().to_sample().unwrap()).collect()
}

fn quick(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        eval_every: 0,
        seed: 4,
        ..Default::default()
    }
}

fn bits(ps: &ParamSet) -> Vec<(String, Vec<u64>)> {
    ps.iter().map(|(k, t)| (k.clone(), t.data().iter().map(|v| v.to_bits()).collect())).collect()
}

#[test]
fn zero_loss_weights_leave_parameters_unchanged() {
    let data = samples(2);
    let mut model = Model::new(small_config(), 1).unwrap();
    let before = model.params.clone();
    let mut st = OptimState::new(&model);
    let cfg = TrainConfig {
        loss_weights: LossWeights { ce: 0.0, ss: 0.0, sn: 0.0 },
        ..quick(1)
    };
    for opt in [OptimizerKind::AdaptiveMoments, OptimizerKind::SgdMomentum] {
        let c = TrainConfig { optimizer: opt, ..cfg.clone() };
        let l = train_step(&mut model, &mut st, &[&data[0], &data[1]], &TransformSpec::HorizontalFlip, &c).unwrap();
        assert_eq!(l.total, 0.0);
    }
    assert_eq!(bits(&model.params), bits(&before));
}

#[test]
fn reported_total_is_the_weighted_sum() {
    let data = samples(1);
    let mut model = Model::new(small_config(), 2).unwrap();
    let mut st = OptimState::new(&model);
    let cfg = TrainConfig {
        loss_weights: LossWeights { ce: 1.3, ss: 0.4, sn: 0.7 },
        ..quick(1)
    };
    let tr = TransformSpec::Translate { dx: 3, dy: 0 };
    let l = train_step(&mut model, &mut st, &[&data[0]], &tr, &cfg).unwrap();
    assert!(l.bce > 0.0 && l.ss > 0.0 && l.sn > 0.0);
    assert!((l.total - (1.3 * l.bce + 0.4 * l.ss + 0.7 * l.sn)).abs() <= 1e-12);
}

#[test]
fn sgd_step_matches_hand_update() {
    let data = samples(1);
    let model0 = Model::new(small_config(), 3).unwrap();
    let w = LossWeights { ce: 1.0, ss: 0.0, sn: 1.0 };
    // reference gradient from a fresh tape
    let mut tape = diffcore::Tape::new();
    let p = model0.params.bind(&mut tape, true);
    let normals = data[0].normals_target().unwrap();
    let (l, _) = model0.losses_on(&mut tape, &p, &data[0].frame, &data[0].footprint, &normals, &TransformSpec::Identity, &w).unwrap();
    let g = tape.backward(l).unwrap();
    let mut model = model0.clone();
    let mut st = OptimState::new(&model);
    let cfg = TrainConfig {
        optimizer: OptimizerKind::SgdMomentum,
        learning_rate: 0.01,
        loss_weights: w,
        ..quick(1)
    };
    train_step(&mut model, &mut st, &[&data[0]], &TransformSpec::Identity, &cfg).unwrap();
    for (name, var) in p.iter() {
        let Some(gv) = g.get(*var) else { continue };
        let before = model0.params.get(name).unwrap();
        let after = model.params.get(name).unwrap();
        for ((a, b), d) in after.data().iter().zip(before.data()).zip(gv.data()) {
            let want = (b - 0.01 * (*d as f32 as f64)) as f32 as f64;
            assert!((a - want).abs() <= 1e-6 * want.abs().max(1e-3), "{name}");
        }
    }
}

#[test]
fn adam_first_step_moves_each_weight_by_about_lr() {
    let data = samples(1);
    let model0 = Model::new(small_config(), 5).unwrap();
    let mut model = model0.clone();
    let mut st = OptimState::new(&model);
    let cfg = TrainConfig { learning_rate: 1e-3, ..quick(1) };
    train_step(&mut model, &mut st, &[&data[0]], &TransformSpec::HorizontalFlip, &cfg).unwrap();
    let mut moved = 0;
    for (name, t) in model.params.iter() {
        for (a, b) in t.data().iter().zip(model0.params.get(name).unwrap().data()) {
            let d = (a - b).abs();
            // m̂ / √v̂ = ±1 on the first step up to ε and f32 rounding
            assert!(d <= 1e-3 * 1.001 + 1e-6, "{name}: {d}");
            moved += (d > 0.0) as usize;
        }
    }
    assert!(moved > 0);
    assert_eq!(st.step, 1);
}

#[test]
fn single_sample_overfit() {
    let data = samples(1);
    let model = Model::new(small_config(), 6).unwrap();
    let cfg = TrainConfig {
        steps: 200,
        batch_size: 1,
        learning_rate: 3e-3,
        eval_every: 0,
        ..Default::default()
    };
    let out = fit(model, OptimState::new(&Model::new(small_config(), 6).unwrap()), &data, &[], &cfg, &FitOutputs::default()).unwrap();
    let m = evaluate(&out.model, &data).unwrap();
    assert!(m.footprint_bce < 0.05, "weighted bce {}", m.footprint_bce);
}

#[test]
fn training_is_deterministic() {
    let data = samples(3);
    let run = || {
        let m = Model::new(small_config(), 7).unwrap();
        let st = OptimState::new(&m);
        fit(m, st, &data, &[], &quick(4), &FitOutputs::default()).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(bits(&a.model.params), bits(&b.model.params));
    assert_eq!(a.log, b.log);
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let data = samples(3);
    let dir = tempfile::tempdir().unwrap();
    let fresh = || Model::new(small_config(), 8).unwrap();
    let straight = fit(fresh(), OptimState::new(&fresh()), &data, &[], &quick(6), &FitOutputs::default()).unwrap();
    let cfg = TrainConfig { checkpoint_every: 3, ..quick(3) };
    let out = FitOutputs {
        dir: Some(dir.path().to_path_buf()),
        verbose: false,
    };
    fit(fresh(), OptimState::new(&fresh()), &data, &[], &cfg, &out).unwrap();
    let ck = Checkpoint::load(&dir.path().join("step_000003.ckpt")).unwrap();
    assert_eq!(ck.step, 3);
    let (model, report) = ck.into_model(Some(&small_config()), false).unwrap();
    assert_eq!(report, Default::default());
    let st = OptimState::from_checkpoint(&model, &ck);
    let resumed = fit(model, st, &data, &[], &quick(6), &FitOutputs::default()).unwrap();
    assert_eq!(bits(&resumed.model.params), bits(&straight.model.params));
    let log = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    let kinds: Vec<String> = log.lines().map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"].as_str().unwrap().to_string()).collect();
    assert_eq!(kinds, ["train", "train", "train", "checkpoint", "checkpoint"]);
    assert!(dir.path().join("final.ckpt").exists());
}

#[test]
fn checkpoint_round_trip() {
    let model = Model::new(small_config(), 9).unwrap();
    let st = OptimState::new(&model);
    let ck = Checkpoint::new(&model, Some((&st.m, &st.v)), 17);
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    let (m2, _) = back.into_model(None, false).unwrap();
    for (name, t) in model.params.iter() {
        let u = m2.params.get(name).unwrap();
        assert_eq!(u.shape(), t.shape());
        for (a, b) in t.data().iter().zip(u.data()) {
            assert!((a - b).abs() <= 1e-6, "{name}");
        }
    }
    assert_eq!(back.step, 17);
    assert_eq!(back.moments().unwrap().0.len(), st.m.len());
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(small_config(), 10).unwrap();
    let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    Checkpoint::new(&model, None, 0).save(&p1).unwrap();
    Checkpoint::load(&p1).unwrap().save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn truncated_blob_names_the_tensor() {
    let model = Model::new(small_config(), 11).unwrap();
    let ck = Checkpoint::new(&model, None, 0);
    let mut bytes = ck.to_bytes();
    bytes.truncate(bytes.len() - 4);
    let last = ck.tensors.keys().last().unwrap().clone();
    match Checkpoint::from_bytes(&bytes) {
        Err(Error::Checkpoint { name, msg }) => {
            assert_eq!(name, last);
            assert!(msg.contains("truncated"), "{msg}");
        }
        other => panic!("expected a checkpoint error, got {other:?}"),
    }
}

#[test]
fn config_mismatch_requires_force() {
    let model = Model::new(small_config(), 12).unwrap();
    let ck = Checkpoint::new(&model, None, 0);
    let mut other = small_config();
    other.gfn.channels = vec![4, 8];
    assert!(matches!(ck.into_model(Some(&other), false), Err(Error::ConfigHash { .. })));
    let (m, report) = ck.into_model(Some(&other), true).unwrap();
    assert!(!report.skipped.is_empty() && !report.missing.is_empty());
    assert_eq!(m.config(), &other);
    for (name, t) in m.params.iter() {
        if !report.missing.contains(name) {
            assert_eq!(t, model.params.get(name).unwrap(), "{name}");
        }
    }
    for name in &report.skipped {
        assert!(m.params.get(name).map_or(true, |t| t.shape() != model.params.get(name).unwrap().shape()));
    }
}

#[test]
fn edited_manifest_fails_the_hash_check() {
    let model = Model::new(small_config(), 13).unwrap();
    let bytes = Checkpoint::new(&model, None, 0).to_bytes();
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let edited = text.replacen("\"grid\":8", "\"grid\":4", 1);
    assert_ne!(text, edited);
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    let mut out = edited.as_bytes()[..edited.find('\n').unwrap()].to_vec();
    out.extend_from_slice(&bytes[nl..]);
    assert!(matches!(Checkpoint::from_bytes(&out), Err(Error::ConfigHash { .. })));
}

#[test]
fn batches_walk_seeded_permutations() {
    let n = 7;
    for epoch in 0..3u64 {
        let mut seen: Vec<usize> = (0..n as u64).flat_map(|k| batch_indices(5, epoch * n as u64 + k, 1, n)).collect();
        seen.sort();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }
    assert_eq!(batch_indices(5, 3, 2, n), batch_indices(5, 3, 2, n));
    let flat: Vec<usize> = (0..7).flat_map(|s| batch_indices(5, s, 2, n)).collect();
    let single: Vec<usize> = (0..14).flat_map(|s| batch_indices(5, s, 1, n)).collect();
    assert_eq!(flat, single);
}

#[test]
fn transforms_cover_all_kinds() {
    let mut kinds = std::collections::BTreeSet::new();
    for step in 0..60 {
        let t = sample_transform(1, step, 64);
        t.validate(64, 64).unwrap();
        kinds.insert(format!("{t:?}"));
    }
    assert_eq!(kinds.len(), 3, "{kinds:?}");
}

#[test]
fn moving_average_examples() {
    assert_eq!(moving_average(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    assert_eq!(moving_average(&[], 5), Vec::<f64>::new());
}

#[test]
fn config_validation() {
    assert!(TrainConfig { steps: 0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"steps": 5, "lr": 1}"#).is_err());
    let c: TrainConfig = serde_json::from_str(r#"{"steps": 5, "optimizer": "sgd_momentum"}"#).unwrap();
    assert_eq!(c.optimizer, OptimizerKind::SgdMomentum);
    let m = Model::new(small_config(), 0).unwrap();
    assert!(matches!(fit(m.clone(), OptimState::new(&m), &[], &[], &quick(1), &FitOutputs::default()), Err(Error::EmptyDataset)));
}
