//! Optimization loop: batching, transform sampling, parameter updates,
//! evaluation, checkpoints and the JSON-lines metric log.

use crate::checkpoint::Checkpoint;
use crate::dataset::Sample;
use crate::error::{invalid, io_err, Error, Result};
use crate::fsm::{weighted_bce, LossComponents, LossWeights, TransformSpec};
use crate::model::Model;
use crate::nn::ParamSet;
use crate::planner::{confusion, FreespaceMetrics};
use crate::costmap::freespace_mask;
use diffcore::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    AdaptiveMoments,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Momentum of `sgd_momentum`.
    pub momentum: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// 0 disables periodic evaluation.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 2,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::AdaptiveMoments,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            momentum: 0.9,
            loss_weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 0,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(invalid("steps and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// First and second moment estimates (the second is unused by SGD).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl OptimState {
    pub fn new(model: &Model) -> Self {
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        for (k, t) in model.params.iter() {
            if !model.is_frozen(k) {
                m.insert(k.clone(), Tensor::zeros(t.shape()));
                v.insert(k.clone(), Tensor::zeros(t.shape()));
            }
        }
        Self { step: 0, m, v }
    }

    pub fn from_checkpoint(model: &Model, ck: &Checkpoint) -> Self {
        match ck.moments() {
            Some((m, v)) => Self { step: ck.step, m, v },
            None => Self {
                step: ck.step,
                ..Self::new(model)
            },
        }
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    x ^= x >> 31;
    x.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Transform for the consistency loss at a step: flip or a horizontal
/// translation by ±⌊0.1·w⌋, each with probability 1/3.
pub fn sample_transform(seed: u64, step: u64, w: usize) -> TransformSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 1, step));
    let d = (w / 10) as i64;
    match rng.gen_range(0..3) {
        0 => TransformSpec::HorizontalFlip,
        1 => TransformSpec::Translate { dx: d, dy: 0 },
        _ => TransformSpec::Translate { dx: -d, dy: 0 },
    }
}

/// Sample indices of the batch at `step`: consecutive slices of a per-epoch
/// seeded permutation.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for b in 0..batch_size as u64 {
        let k = step * batch_size as u64 + b;
        let epoch = k / n as u64;
        if cached.as_ref().map_or(true, |c| c.0 != epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, 2, epoch)));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[(k % n as u64) as usize]);
    }
    out
}

/// One optimization step on `batch` with transform `tr`. Gradients are
/// averaged over the batch; parameters and moments are rounded to `f32`.
pub fn train_step(model: &mut Model, state: &mut OptimState, batch: &[&Sample], tr: &TransformSpec, config: &TrainConfig) -> Result<LossComponents> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut grads = ParamSet::new();
    let mut comps = LossComponents::default();
    let scale = 1.0 / batch.len() as f64;
    for s in batch {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, true);
        let normals = s.normals_target()?;
        let (loss, c) = model.losses_on(&mut tape, &bound, &s.frame, &s.footprint, &normals, tr, &config.loss_weights)?;
        let g = tape.backward(loss)?;
        for (name, &var) in bound.iter() {
            if let Some(gv) = g.get(var) {
                match grads.get_mut(name) {
                    Ok(acc) => acc.add_assign(gv),
                    Err(_) => grads.insert(name.clone(), gv.clone()),
                }
            }
        }
        comps.total += scale * c.total;
        comps.bce += scale * c.bce;
        comps.ss += scale * c.ss;
        comps.sn += scale * c.sn;
        comps.warnings.extend(c.warnings);
    }
    state.step += 1;
    let t = state.step as i32;
    let lr = config.learning_rate;
    let frozen: Vec<String> = model.params.names().filter(|n| model.is_frozen(n)).cloned().collect();
    for (name, p) in model.params.iter_mut() {
        if frozen.contains(name) {
            continue;
        }
        let Ok(g) = grads.get(name) else { continue };
        let m = state.m.get_mut(name)?;
        match config.optimizer {
            OptimizerKind::AdaptiveMoments => {
                let v = state.v.get_mut(name)?;
                let (b1, b2) = (config.beta1, config.beta2);
                let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                    let gv = gv * scale;
                    *mv = (b1 * *mv + (1.0 - b1) * gv) as f32 as f64;
                    *vv = (b2 * *vv + (1.0 - b2) * gv * gv) as f32 as f64;
                    *pv = (*pv - lr * (*mv / c1) / ((*vv / c2).sqrt() + config.epsilon)) as f32 as f64;
                }
            }
            OptimizerKind::SgdMomentum => {
                for ((pv, &gv), mv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()) {
                    *mv = (config.momentum * *mv + gv * scale) as f32 as f64;
                    *pv = (*pv - lr * *mv) as f32 as f64;
                }
            }
        }
    }
    Ok(comps)
}

/// Held-out metrics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean angular error of predicted normals over gt-valid pixels, degrees.
    pub normal_error_deg: f64,
    pub footprint_bce: f64,
    /// Freespace (`p > 0.5`) against the ground-truth traversable mask,
    /// pooled over samples that have one.
    pub traversability: Option<FreespaceMetrics>,
    pub samples: usize,
}

/// Evaluates the model on samples.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<EvalMetrics> {
    let mut out = EvalMetrics::default();
    let mut counts = [0usize; 4];
    let mut have_gt = false;
    let (mut ang, mut n_ang) = (0.0, 0usize);
    for s in samples {
        let pred = model.predict(&s.frame)?;
        if let Some(e) = pred.normals.mean_angular_error_deg(&s.normals_target()?) {
            ang += e;
            n_ang += 1;
        }
        out.footprint_bce += weighted_bce(&pred.traversability, &s.footprint)?;
        if let Some(gt) = &s.gt_traversable {
            let free = freespace_mask(&pred.traversability.prob.map(|p| 1.0 - p));
            let c = confusion(&free, gt)?;
            for k in 0..4 {
                counts[k] += c[k];
            }
            have_gt = true;
        }
    }
    out.samples = samples.len();
    if !samples.is_empty() {
        out.footprint_bce /= samples.len() as f64;
    }
    out.normal_error_deg = if n_ang > 0 { ang / n_ang as f64 } else { 0.0 };
    out.traversability = have_gt.then(|| FreespaceMetrics::from_counts(counts));
    Ok(out)
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Train {
        step: u64,
        loss: LossComponents,
        transform: TransformSpec,
    },
    Eval {
        step: u64,
        /// Mean training loss since the previous evaluation.
        train_loss: f64,
        metrics: EvalMetrics,
    },
    Checkpoint {
        step: u64,
        path: PathBuf,
    },
}

/// Appends log lines to a file, each with a wall-clock timestamp.
pub struct MetricLog {
    file: std::fs::File,
}

impl MetricLog {
    pub fn open(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
        Ok(Self { file })
    }

    pub fn append(&mut self, entry: &LogEntry) -> Result<()> {
        let mut v = serde_json::to_value(entry).expect("log entry serializes");
        let ts = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        v["time"] = serde_json::json!(ts);
        writeln!(self.file, "{v}").map_err(|e| Error::Io {
            path: PathBuf::from("<log>"),
            source: e,
        })
    }
}

/// Output of [`fit`].
#[derive(Debug)]
pub struct FitOutcome {
    pub model: Model,
    pub state: OptimState,
    pub log: Vec<LogEntry>,
}

/// Where and how `fit` writes artifacts.
#[derive(Clone, Debug, Default)]
pub struct FitOutputs {
    /// Directory for `step_NNNNNN.ckpt`, `final.ckpt` and `log.jsonl`.
    pub dir: Option<PathBuf>,
    /// Print progress to standard error.
    pub verbose: bool,
}

/// Trains from `state.step` up to `config.steps`.
pub fn fit(mut model: Model, mut state: OptimState, train: &[Sample], eval: &[Sample], config: &TrainConfig, outputs: &FitOutputs) -> Result<FitOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut log = Vec::new();
    let mut file = match &outputs.dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(io_err(d))?;
            Some(MetricLog::open(&d.join("log.jsonl"))?)
        }
        None => None,
    };
    let mut record = |e: LogEntry, log: &mut Vec<LogEntry>| -> Result<()> {
        if let Some(f) = file.as_mut() {
            f.append(&e)?;
        }
        log.push(e);
        Ok(())
    };
    let (mut acc, mut n_acc) = (0.0, 0usize);
    let started = std::time::Instant::now();
    while state.step < config.steps {
        let step = state.step;
        let idx = batch_indices(config.seed, step, config.batch_size, train.len());
        let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
        let tr = sample_transform(config.seed, step, batch[0].frame.width());
        let loss = train_step(&mut model, &mut state, &batch, &tr, config)?;
        acc += loss.total;
        n_acc += 1;
        let done = state.step;
        record(LogEntry::Train { step: done, loss, transform: tr }, &mut log)?;
        if config.eval_every > 0 && done % config.eval_every == 0 {
            let metrics = evaluate(&model, eval)?;
            if outputs.verbose {
                eprintln!(
                    "step {done}: train loss {:.4}, normal error {:.2}°, iou {} ({:.0?})",
                    acc / n_acc as f64,
                    metrics.normal_error_deg,
                    metrics.traversability.as_ref().map_or("n/a".into(), |m| format!("{:.3}", m.iou)),
                    started.elapsed()
                );
            }
            record(
                LogEntry::Eval {
                    step: done,
                    train_loss: acc / n_acc as f64,
                    metrics,
                },
                &mut log,
            )?;
            (acc, n_acc) = (0.0, 0);
        }
        if let Some(d) = &outputs.dir {
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
                let path = d.join(format!("step_{done:06}.ckpt"));
                Checkpoint::new(&model, Some((&state.m, &state.v)), done).save(&path)?;
                record(LogEntry::Checkpoint { step: done, path }, &mut log)?;
            }
        }
    }
    if let Some(d) = &outputs.dir {
        let path = d.join("final.ckpt");
        Checkpoint::new(&model, Some((&state.m, &state.v)), state.step).save(&path)?;
        record(LogEntry::Checkpoint { step: state.step, path }, &mut log)?;
    }
    Ok(FitOutcome { model, state, log })
}

/// Trailing moving average with window `k` (shorter at the start).
pub fn moving_average(xs: &[f64], k: usize) -> Vec<f64> {
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(k);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}
