mod config;
mod svg;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use diffcore::Tensor;
use ftfoot::checkpoint::Checkpoint;
use ftfoot::costmap::{freespace_mask, integrate_frame, GlobalCostMap};
use ftfoot::dataset::{Dataset, DatasetWriter, Sample};
use ftfoot::planner::{self, confusion, FreespaceMetrics, Path as PlanPath};
use ftfoot::synth::{generate_scene, SceneSpec};
use ftfoot::trainer::{evaluate, fit, FitOutputs, OptimState};
use ftfoot::{gradsuite, Model};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "ftfoot", version, about = "Self-supervised traversability estimation pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (train/val scenes plus a driving sequence).
    SynthGen(SynthGenArgs),
    /// Train a model on a dataset's train split.
    Train(TrainArgs),
    /// Score traversability and normals on a dataset split.
    Eval(EvalArgs),
    /// Accumulate a global cost map from a split's predictions.
    Map(MapArgs),
    /// Plan on a cost map and score the path by simulated rollouts.
    Plan(PlanArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthGenArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory to create.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of independent scenes.
    #[arg(long)]
    count: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root; overrides `data` in the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoints and the log; overrides `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Load a checkpoint whose model config differs, keeping matching tensors.
    #[arg(long)]
    force: bool,
    /// Suppress progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Model checkpoint; required unless --predictions is given.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    /// Split to score.
    #[arg(long, default_value = "val")]
    split: String,
    /// Directory of `<sample id>.png` traversability maps (8-bit, p·255) to
    /// score instead of running a model.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Report path [default: eval.json next to the checkpoint or predictions].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MapArgs {
    /// Run configuration (JSON) for cost-map settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    /// Split whose frames are integrated, in order.
    #[arg(long, default_value = "sequence")]
    split: String,
    /// Cost map file to write; an SVG is written alongside.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PlanArgs {
    /// Run configuration (JSON) for planner and rollout settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cost map file.
    #[arg(long)]
    map: PathBuf,
    /// Start position `x,y` in meters.
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    start: [f64; 2],
    /// Goal position `x,y` in meters.
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    goal: [f64; 2],
    /// Reference path (JSON array of `[x, y]`) for the Hausdorff distance.
    #[arg(long)]
    gt_path: Option<PathBuf>,
    /// Rollout trials for the success rate.
    #[arg(long, default_value_t = 30)]
    trials: usize,
    /// Output directory [default: the map's directory].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Check fewer coordinates of the end-to-end loss.
    #[arg(long)]
    quick: bool,
    /// Seed of the random check inputs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Bad invocation detected after argument parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse_point(s: &str) -> std::result::Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [x, y] = parts.as_slice() else {
        return Err(format!("expected `x,y`, got `{s}`"));
    };
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    let pt = [p(x)?, p(y)?];
    if pt.iter().all(|v| v.is_finite()) {
        Ok(pt)
    } else {
        Err(format!("non-finite coordinate in `{s}`"))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<UsageError>() { 1 } else { 2 })
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthGen(a) => synth_gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Map(a) => map(a),
        Command::Plan(a) => plan(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    RunConfig::load(path).map_err(|e| usage(format!("{e:#}")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth_gen(a: SynthGenArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let out = a.out.or(cfg.out.clone()).ok_or_else(|| usage("synth-gen needs --out or `out` in the config"))?;
    if a.count == 0 {
        return Err(usage("--count must be positive"));
    }
    let s = &cfg.synth;
    if !(0.0..1.0).contains(&s.val_fraction) {
        bail!("val_fraction must lie in [0, 1)");
    }
    let n_val = (a.count as f64 * s.val_fraction).round() as usize;
    let mut w = DatasetWriter::create(&out)?;
    for k in 0..a.count {
        let spec = s.sampler.sample(s.seed.wrapping_add(k as u64));
        let sample = ftfoot::synth::generate_default(&spec, &s.camera)?.to_sample()?;
        w.add(if k < a.count - n_val { "train" } else { "val" }, &sample)?;
    }
    if s.sequence_frames > 0 {
        let spec = s.sampler.sample(s.seed.wrapping_add(1 << 32));
        for k in 0..s.sequence_frames {
            let mut sample = sequence_frame(&spec, &cfg, k as f64 * s.sequence_spacing)?;
            sample.frame.frame_id = k as u64;
            w.add("sequence", &sample)?;
        }
    }
    let m = w.finish()?;
    let counts: Vec<String> = m.splits.iter().map(|(k, v)| format!("{k} {}", v.len())).collect();
    println!("wrote {} ({})", out.display(), counts.join(", "));
    Ok(())
}

fn sequence_frame(spec: &SceneSpec, cfg: &RunConfig, x: f64) -> Result<Sample> {
    let cam = cfg.synth.camera.camera(&spec.robot_pose(x));
    Ok(generate_scene(spec, &cam)?.to_sample()?)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let data = a.data.or(cfg.data.clone()).ok_or_else(|| usage("train needs --data or `data` in the config"))?;
    let out = a.out.or(cfg.out.clone()).ok_or_else(|| usage("train needs --out or `out` in the config"))?;
    let ds = Dataset::open(&data)?;
    let train_set = ds.load_split("train");
    let val_set = ds.load_split("val");
    if train_set.is_empty() {
        bail!("no readable training samples in {}", data.display());
    }
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("config.json"), &cfg)?;
    let (model, state) = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let (model, report) = ck.into_model(Some(&cfg.model), a.force)?;
            for n in &report.skipped {
                log::warn!("checkpoint tensor `{n}` not loaded");
            }
            for n in &report.missing {
                log::warn!("parameter `{n}` keeps its fresh initialization");
            }
            let state = OptimState::from_checkpoint(&model, &ck);
            (model, state)
        }
        None => {
            let log = out.join("log.jsonl");
            if log.exists() {
                std::fs::remove_file(&log).with_context(|| format!("removing {}", log.display()))?;
            }
            let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
            let state = OptimState::new(&model);
            (model, state)
        }
    };
    let outputs = FitOutputs {
        dir: Some(out.clone()),
        verbose: !a.quiet,
    };
    let res = fit(model, state, &train_set, &val_set, &cfg.train, &outputs)?;
    println!("trained to step {}; checkpoint {}", res.state.step, out.join("final.ckpt").display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    split: String,
    samples: usize,
    accuracy: f64,
    precision: f64,
    recall: f64,
    f_score: f64,
    iou: f64,
    degenerate: Vec<String>,
    normal_error_deg: Option<f64>,
    footprint_bce: Option<f64>,
}

fn read_prediction(path: &Path, h: usize, w: usize) -> Result<Tensor> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.to_luma8();
    if img.dimensions() != (w as u32, h as u32) {
        bail!("{}: prediction is {:?}, frame is {w}×{h}", path.display(), img.dimensions());
    }
    Ok(Tensor::new(&[1, h, w], img.pixels().map(|p| p[0] as f64 / 255.0).collect())?)
}

fn eval(a: EvalArgs) -> Result<()> {
    let ds = Dataset::open(&a.data)?;
    let (metrics, normal, bce, samples, default_dir) = match (&a.predictions, &a.checkpoint) {
        (Some(dir), _) => {
            let mut counts = [0usize; 4];
            let mut n = 0;
            for id in ds.ids(&a.split) {
                let s = ds.load(id)?;
                let Some(gt) = &s.gt_traversable else { continue };
                let p = read_prediction(&dir.join(format!("{id}.png")), s.frame.height(), s.frame.width())?;
                let c = confusion(&freespace_mask(&p.map(|v| 1.0 - v)), gt)?;
                for k in 0..4 {
                    counts[k] += c[k];
                }
                n += 1;
            }
            if n == 0 {
                bail!("split `{}` has no samples with ground-truth traversability", a.split);
            }
            (FreespaceMetrics::from_counts(counts), None, None, n, dir.clone())
        }
        (None, Some(ck)) => {
            let (model, _) = Checkpoint::load(ck)?.into_model(None, false)?;
            let samples = ds.load_split(&a.split);
            if samples.is_empty() {
                bail!("split `{}` of {} has no readable samples", a.split, a.data.display());
            }
            let m = evaluate(&model, &samples)?;
            let t = m
                .traversability
                .ok_or_else(|| anyhow!("split `{}` has no ground-truth traversability", a.split))?;
            let dir = ck.parent().map(Path::to_path_buf).unwrap_or_default();
            (t, Some(m.normal_error_deg), Some(m.footprint_bce), m.samples, dir)
        }
        (None, None) => return Err(usage("eval needs --checkpoint or --predictions")),
    };
    let report = EvalReport {
        split: a.split,
        samples,
        accuracy: metrics.accuracy,
        precision: metrics.precision,
        recall: metrics.recall,
        f_score: metrics.f_score,
        iou: metrics.iou,
        degenerate: metrics.degenerate,
        normal_error_deg: normal,
        footprint_bce: bce,
    };
    println!("{:<18} {}", "split", report.split);
    println!("{:<18} {}", "samples", report.samples);
    for (k, v) in [
        ("accuracy", report.accuracy),
        ("precision", report.precision),
        ("recall", report.recall),
        ("f_score", report.f_score),
        ("iou", report.iou),
    ] {
        println!("{k:<18} {v:.4}");
    }
    if let Some(e) = report.normal_error_deg {
        println!("{:<18} {e:.2}°", "normal_error");
    }
    let out = a.out.unwrap_or_else(|| default_dir.join("eval.json"));
    write_json(&out, &report)?;
    println!("report written to {}", out.display());
    Ok(())
}

fn map(a: MapArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let (model, _) = Checkpoint::load(&a.checkpoint)?.into_model(None, false)?;
    let ds = Dataset::open(&a.data)?;
    let frames = ds.load_split(&a.split);
    let Some(first) = frames.first() else {
        bail!("split `{}` of {} has no readable samples", a.split, a.data.display());
    };
    let c = &cfg.costmap;
    let t = first.frame.pose.translation();
    let half = c.initial_cells as f64 * c.resolution / 2.0;
    let origin = [((t.x - half) / c.resolution).floor() * c.resolution, ((t.y - half) / c.resolution).floor() * c.resolution];
    let mut gmap = GlobalCostMap::new(c.resolution, origin, c.initial_cells, c.initial_cells, c.accumulation)?;
    for s in &frames {
        let pred = model.predict(&s.frame)?;
        integrate_frame(&mut gmap, &pred.traversability, &s.frame, c.max_range)?;
    }
    gmap.save(&a.out)?;
    let observed = gmap.hit_counts().iter().filter(|&&h| h > 0).count();
    let free = gmap.freespace().sum() as usize;
    let svg = svg::render(&gmap, &[], &[]);
    let svg_path = a.out.with_extension("svg");
    std::fs::write(&svg_path, svg).with_context(|| format!("writing {}", svg_path.display()))?;
    println!(
        "integrated {} frames into {}×{} cells ({observed} observed, {free} free); wrote {} and {}",
        frames.len(),
        gmap.width(),
        gmap.height(),
        a.out.display(),
        svg_path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct PlanReport {
    start: [f64; 2],
    goal: [f64; 2],
    length: f64,
    cost: f64,
    max_cell_cost: Option<f64>,
    cross_track_error: f64,
    rollout_success: bool,
    success_rate: f64,
    trials: usize,
    hausdorff: Option<f64>,
}

fn plan(a: PlanArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let gmap = GlobalCostMap::load(&a.map)?;
    let gt = match &a.gt_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(serde_json::from_str::<PlanPath>(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => None,
    };
    if a.trials == 0 {
        return Err(usage("--trials must be positive"));
    }
    let out = a.out.unwrap_or_else(|| a.map.parent().map(Path::to_path_buf).unwrap_or_default());
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let p = planner::rrt_star_plan(&gmap, a.start, a.goal, &cfg.planner)?;
    let ro = planner::rollout(&p.path, &gmap, &cfg.rollout);
    let report = PlanReport {
        start: a.start,
        goal: a.goal,
        length: p.path.length(),
        cost: p.cost,
        max_cell_cost: p.path.max_cost(&gmap),
        cross_track_error: planner::cross_track_error(&ro.trace, &p.path),
        rollout_success: ro.success,
        success_rate: planner::success_rate(&p.path, &gmap, &cfg.rollout, a.trials)?,
        trials: a.trials,
        hausdorff: gt.as_ref().map(|g| planner::hausdorff(&p.path, g, gmap.resolution() / 2.0)),
    };
    write_json(&out.join("path.json"), &p.path)?;
    write_json(&out.join("plan_metrics.json"), &report)?;
    let mut lines = Vec::new();
    if let Some(g) = &gt {
        lines.push(svg::Polyline {
            points: g.waypoints().to_vec(),
            color: "#2a9d3a",
            width: 2.0,
            label: "reference path",
        });
    }
    lines.push(svg::Polyline {
        points: p.path.waypoints().to_vec(),
        color: "#d62828",
        width: 2.0,
        label: "planned path",
    });
    lines.push(svg::Polyline {
        points: ro.trace.iter().map(|t| [t[0], t[1]]).collect(),
        color: "#1d4ed8",
        width: 1.0,
        label: "rollout",
    });
    let svg_path = out.join("plan.svg");
    std::fs::write(&svg_path, svg::render(&gmap, &lines, &[(a.start, "#f4a261"), (a.goal, "#7b2cbf")]))
        .with_context(|| format!("writing {}", svg_path.display()))?;
    println!("path: {} waypoints, length {:.2} m, cost {:.3}", p.path.waypoints().len(), report.length, report.cost);
    println!("cross-track error {:.4} m, success rate {:.3} over {} trials", report.cross_track_error, report.success_rate, a.trials);
    if let Some(h) = report.hausdorff {
        println!("hausdorff distance to reference {h:.3} m");
    }
    println!("wrote path.json, plan_metrics.json and plan.svg to {}", out.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let started = std::time::Instant::now();
    let reports = gradsuite::run(a.seed, a.quick)?;
    let mut failed = Vec::new();
    for r in &reports {
        let worst = r.max_rel_error.iter().cloned().fold(0.0, f64::max);
        println!("{:<28} {:>10.3e}  {}", r.name, worst, if r.passed { "ok" } else { "FAILED" });
        if !r.passed {
            failed.push(r.name.clone());
        }
    }
    println!("{} checks in {:.1?}", reports.len(), started.elapsed());
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}
