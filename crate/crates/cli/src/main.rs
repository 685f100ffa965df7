//! `tilestream` command-line tool.

mod data;
mod plot;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tilestream_core::config::RunConfig;
use tilestream_core::geometry::{FieldOfView, TileGrid};
use tilestream_core::identifier::QoEIdentifier;
use tilestream_core::orchestrator::{run_evaluation_logged, write_eval_csv, TrainingRun};
use tilestream_core::qoe::{preference_pool, PoolSplit, PreferencePool};
use tilestream_core::registry::{GenArgs, Generated, PolicyArgs, Registry};
use tilestream_core::report;
use tilestream_core::simenv::{write_episode_log, BitrateLadder};
use tilestream_core::traces::write_viewport_csv;
use tilestream_core::vp::{evaluate_accuracy, train, MtioTransformer, PredictorConfig, TrainOptions, WindowedDataset};

use data::{absolute, load_viewports, AbrInputs};

#[derive(Parser)]
#[command(name = "tilestream", version, about = "Tile-based panoramic video streaming experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic viewport, bandwidth or manifest CSVs.
    GenTraces(GenTraces),
    /// Train the viewport predictor on viewport CSVs.
    TrainVp(TrainVp),
    /// IoU per horizon step of a trained predictor.
    EvalVp(EvalVp),
    /// Train the preference-conditioned bitrate agent.
    TrainAbr(TrainAbr),
    /// Evaluate a bitrate policy on one half of the preference pool.
    EvalAbr(EvalAbr),
    /// Train the agent with QoE-only rewards and a frozen identifier.
    AblateNoRepl(TrainAbr),
    /// Summarize an episode log or an evaluation report.
    Summarize(Summarize),
    /// Render a CSV produced by another command to PNG.
    Plot(Plot),
}

#[derive(Args, Clone)]
struct GridOpts {
    #[arg(long, default_value_t = 8)]
    grid_rows: usize,
    #[arg(long, default_value_t = 8)]
    grid_cols: usize,
    #[arg(long, default_value_t = 3840.0)]
    video_width: f64,
    #[arg(long, default_value_t = 1920.0)]
    video_height: f64,
}

impl GridOpts {
    fn grid(&self) -> Result<TileGrid> {
        Ok(TileGrid::new(self.grid_rows, self.grid_cols, self.video_width, self.video_height)?)
    }
}

#[derive(Args)]
struct GenTraces {
    /// viewport, bandwidth or manifest
    kind: String,
    /// Generator name; defaults to focus, stable or synthetic by kind.
    #[arg(long)]
    generator: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    #[arg(long, default_value_t = 10)]
    users: usize,
    #[arg(long, default_value_t = 5.0)]
    rate_hz: f64,
    /// Bandwidth sample interval, seconds.
    #[arg(long, default_value_t = 1.0)]
    interval: f64,
    #[arg(long, default_value_t = 1.0)]
    chunk_duration: f64,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 5.0, 8.0, 16.0, 35.0])]
    ladder: Vec<f64>,
    /// Generator parameter override, e.g. `--set mean=1.5`.
    #[arg(long = "set", value_parser = parse_kv)]
    options: Vec<(String, f64)>,
    /// Number of files; above 1, `--out` is a directory and file `i` uses seed + i.
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    grid: GridOpts,
}

fn parse_kv(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s:?}"))?;
    let v: f64 = v.trim().parse().map_err(|_| format!("{v:?} is not a number"))?;
    Ok((k.trim().to_string(), v))
}

#[derive(Args)]
struct TrainVp {
    /// Viewport CSV file or directory; each file stem names a family.
    #[arg(long)]
    traces: PathBuf,
    /// Train on this family only.
    #[arg(long)]
    family: Option<String>,
    /// `small` or `full` layer widths.
    #[arg(long, default_value = "small")]
    network: String,
    #[arg(long, default_value_t = 3)]
    heads: usize,
    #[arg(long, default_value_t = 5)]
    history: usize,
    #[arg(long, default_value_t = 5)]
    horizon: usize,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    #[arg(long, default_value_t = 0)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    grid: GridOpts,
}

#[derive(Args)]
struct EvalVp {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    family: Option<String>,
    #[arg(long, default_value_t = 0.33)]
    fov: f64,
    /// Window stride; defaults to the horizon.
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Accuracy-vs-horizon CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainAbr {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifests: PathBuf,
    #[arg(long)]
    bandwidth: PathBuf,
    #[arg(long)]
    viewports: PathBuf,
    /// Viewport predictor checkpoint (for the transformer predictor).
    #[arg(long)]
    vp_ckpt: Option<PathBuf>,
    /// Overrides the configured predictor name.
    #[arg(long)]
    predictor: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    entropy_coef: Option<f64>,
    #[arg(long)]
    discount: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Continue a run saved in `--out`.
    #[arg(long)]
    resume: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalAbr {
    /// Training output directory.
    #[arg(long)]
    ckpt: PathBuf,
    /// trained or unseen
    #[arg(long, default_value = "trained")]
    split: String,
    #[arg(long)]
    report: PathBuf,
    /// Registered policy name.
    #[arg(long, default_value = "agent")]
    policy: String,
    /// Preference pool CSV (`lambda1,lambda2,lambda3,split`).
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Evaluation inputs; default to the ones the run was trained on.
    #[arg(long)]
    manifests: Option<PathBuf>,
    #[arg(long)]
    bandwidth: Option<PathBuf>,
    #[arg(long)]
    viewports: Option<PathBuf>,
    /// Per-chunk log of every evaluated episode.
    #[arg(long)]
    episodes: Option<PathBuf>,
    /// Per-preference summary CSV.
    #[arg(long)]
    summary: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Summarize {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Accepted for uniformity; summaries are deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Plot {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Accepted for uniformity; plots are deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn gen_traces(a: GenTraces) -> Result<()> {
    let registry = Registry::builtin();
    let name = a.generator.clone().unwrap_or_else(|| {
        match a.kind.as_str() {
            "viewport" => "focus",
            "bandwidth" => "stable",
            _ => "synthetic",
        }
        .to_string()
    });
    let gen = registry.generator(&name)?;
    if gen.kind() != a.kind {
        bail!("generator {name:?} makes {} traces, not {}", gen.kind(), a.kind);
    }
    if a.count == 0 {
        bail!("--count must be at least 1");
    }
    let grid = a.grid.grid()?;
    for i in 0..a.count {
        let args = GenArgs {
            seed: a.seed + i as u64,
            duration: a.duration,
            grid,
            ladder: BitrateLadder::new(a.ladder.clone())?,
            users: a.users,
            rate_hz: a.rate_hz,
            interval: a.interval,
            chunk_duration: a.chunk_duration,
            options: a.options.iter().cloned().collect::<BTreeMap<_, _>>(),
        };
        let path = if a.count == 1 {
            a.out.clone()
        } else {
            a.out.join(format!("{name}_{i:03}.csv"))
        };
        let w = create(&path)?;
        match gen.generate(&args)? {
            Generated::Viewport(traces) => write_viewport_csv(&traces, &grid, w)?,
            Generated::Bandwidth(trace) => trace.write_csv(w)?,
            Generated::Manifest(m) => m.write_csv(w)?,
        }
    }
    eprintln!("wrote {} {} file(s) to {}", a.count, a.kind, a.out.display());
    Ok(())
}

fn windows(
    path: &Path,
    family: Option<&str>,
    grid: &TileGrid,
    history: usize,
    horizon: usize,
    stride: usize,
) -> Result<(WindowedDataset, f64)> {
    let mut ds = WindowedDataset::default();
    let mut interval = None;
    for (fam, traces) in load_viewports(path, grid)? {
        if family.is_some_and(|f| f != fam) {
            continue;
        }
        interval = interval.or(traces.first().map(|t| t.interval));
        ds.extend(WindowedDataset::from_trajectories(
            &fam,
            traces.iter().map(|t| t.points.as_slice()),
            history,
            horizon,
            stride,
        ));
    }
    if ds.is_empty() {
        bail!("no complete windows in {}", path.display());
    }
    Ok((ds, interval.unwrap_or(1.0)))
}

fn train_vp(a: TrainVp) -> Result<()> {
    let base = match a.network.as_str() {
        "small" => PredictorConfig::small(),
        "full" => PredictorConfig::default(),
        other => bail!("--network must be small or full, got {other:?}"),
    };
    let cfg = PredictorConfig {
        heads: a.heads,
        history: a.history,
        horizon: a.horizon,
        video_width: a.grid.video_width,
        video_height: a.grid.video_height,
        ..base
    };
    let grid = a.grid.grid()?;
    let (ds, _) = windows(&a.traces, a.family.as_deref(), &grid, a.history, a.horizon, a.stride)?;
    let opts = TrainOptions {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        patience: a.patience,
        steps_per_epoch: a.steps_per_epoch,
        ..TrainOptions::default()
    };
    eprintln!("training on {} windows ({})", ds.len(), ds.families().join(", "));
    let out = train(&ds, &cfg, &opts, a.seed)?;
    std::fs::create_dir_all(&a.out)?;
    out.model.save(&a.out.join("model.json"))?;
    let mut w = csv::Writer::from_writer(create(&a.out.join("train_log.csv"))?);
    w.write_record(["epoch", "train_loss", "validation_loss"])?;
    for e in &out.log {
        let v = e.validation_loss.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([e.epoch.to_string(), e.train_loss.to_string(), v])?;
    }
    w.flush()?;
    eprintln!("best epoch {}; model in {}", out.best_epoch, a.out.join("model.json").display());
    Ok(())
}

fn model_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("model.json")
    } else {
        p.to_path_buf()
    }
}

fn eval_vp(a: EvalVp) -> Result<()> {
    let model = MtioTransformer::load(&model_path(&a.ckpt))?;
    let cfg = &model.config;
    let grid = cfg.grid();
    let stride = a.stride.unwrap_or(cfg.horizon);
    let (ds, interval) = windows(&a.traces, a.family.as_deref(), &grid, cfg.history, cfg.horizon, stride)?;
    let acc = evaluate_accuracy(&model, &ds, &FieldOfView::new(a.fov, a.fov)?, &grid)?;
    report::write_accuracy_csv(&acc, interval, create(&a.out)?)?;
    let heads: Vec<String> = (0..acc.heads.len()).map(|i| format!("{:.4}", acc.mean_head(i))).collect();
    println!(
        "windows {}  ensemble IoU {:.4}  heads [{}]",
        acc.windows,
        acc.mean_ensemble(),
        heads.join(", ")
    );
    Ok(())
}

fn train_abr(a: TrainAbr, ablate: bool) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.entropy_coef {
        cfg.entropy_coef = v;
    }
    if let Some(v) = a.discount {
        cfg.discount = v;
    }
    if let Some(v) = a.iterations {
        cfg.iterations = v;
    }
    if let Some(p) = &a.predictor {
        cfg.predictor = p.clone();
    }
    cfg.validate()?;
    let inputs = AbrInputs {
        config: cfg.clone(),
        manifests: absolute(&a.manifests)?,
        bandwidth: absolute(&a.bandwidth)?,
        viewports: absolute(&a.viewports)?,
        vp_ckpt: a.vp_ckpt.as_deref().map(|p| absolute(&model_path(p))).transpose()?,
    };
    let registry = Registry::builtin();
    let mut envs = inputs.environments(&registry)?;
    let pool = preference_pool();
    let mut tc = cfg.train_config()?;
    if ablate {
        tc = tc.ablated();
    }
    let mut run = if a.resume {
        TrainingRun::load(&a.out)?
    } else {
        TrainingRun::new(tc, envs[0].layout(), a.seed)?
    };
    std::fs::create_dir_all(&a.out)?;
    inputs.save(&a.out)?;
    eprintln!("{} environments, {} iterations", envs.len(), cfg.iterations);
    let step = 50;
    while run.iterations_done() < cfg.iterations {
        let next = (run.iterations_done() + step).min(cfg.iterations);
        run.train_until(next, &pool.train, &mut envs)?;
        let l = run.log.last().unwrap();
        eprintln!(
            "iter {:>5}  reward {:>8.4}  qoe {:>8.3}  identifier mse {:.4}  entropy {:.3}",
            l.iter, l.mean_reward, l.mean_qoe, l.identifier_mse, l.ppo.entropy
        );
    }
    run.save(&a.out)?;
    eprintln!("saved to {}", a.out.display());
    Ok(())
}

fn eval_abr(a: EvalAbr) -> Result<()> {
    let mut inputs = AbrInputs::load(&a.ckpt)?;
    if let Some(p) = &a.manifests {
        inputs.manifests = p.clone();
    }
    if let Some(p) = &a.bandwidth {
        inputs.bandwidth = p.clone();
    }
    if let Some(p) = &a.viewports {
        inputs.viewports = p.clone();
    }
    let registry = Registry::builtin();
    let mut envs = inputs.environments(&registry)?;
    let pool = match &a.pool {
        Some(p) => PreferencePool::from_csv_reader(File::open(p).with_context(|| format!("opening {}", p.display()))?)?,
        None => preference_pool(),
    };
    let split: PoolSplit = a.split.parse()?;
    let prefs = pool.split(split);
    let policy = registry.policy(
        &a.policy,
        &PolicyArgs {
            checkpoint: Some(a.ckpt.clone()),
            scale: inputs.config.scale,
        },
    )?;
    let id_path = a.ckpt.join("identifier.json");
    let identifier = if a.policy == "agent" && id_path.exists() {
        Some(QoEIdentifier::load(&id_path)?)
    } else {
        None
    };
    let mut log = Vec::new();
    let rows = run_evaluation_logged(policy.as_ref(), prefs, &mut envs, identifier.as_ref(), a.seed, &mut log)?;
    write_eval_csv(&rows, create(&a.report)?)?;
    if let Some(p) = &a.episodes {
        write_episode_log(&log, create(p)?)?;
    }
    let summary = report::summarize_eval(&rows);
    if let Some(p) = &a.summary {
        report::write_preference_summary(&summary, create(p)?)?;
    }
    println!("{:<4} {:<20} {:>9} {:>9} {:>9} {:>9}", "pref", "lambda", "qoe", "r_in", "q1", "stall/ep");
    for s in &summary {
        println!(
            "{:<4} ({:.2},{:.2},{:.2})     {:>9.3} {:>9.2} {:>9.2} {:>9.2}",
            s.pref_index, s.lambda1, s.lambda2, s.lambda3, s.qoe_mean, s.r_in_mean, s.q1_mean, s.rebuffer_mean
        );
    }
    Ok(())
}

fn first_line(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().next().unwrap_or_default().to_string())
}

fn summarize(a: Summarize) -> Result<()> {
    let header = first_line(&a.input)?;
    let open = || File::open(&a.input).with_context(|| format!("opening {}", a.input.display()));
    let (kind, rows) = if header.starts_with("chunk,") {
        let s = report::summarize_episodes(&report::read_episode_log(open()?)?);
        report::write_episode_summary(&s, create(&a.out)?)?;
        ("episodes", s.len())
    } else if header.starts_with("policy,pref_index,") {
        let s = report::summarize_eval(&report::read_eval_csv(open()?)?);
        report::write_preference_summary(&s, create(&a.out)?)?;
        ("preferences", s.len())
    } else {
        return Err(anyhow!("{}: not an episode log or evaluation report", a.input.display()));
    };
    eprintln!("{rows} {kind} summarized into {}", a.out.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenTraces(a) => gen_traces(a),
        Command::TrainVp(a) => train_vp(a),
        Command::EvalVp(a) => eval_vp(a),
        Command::TrainAbr(a) => train_abr(a, false),
        Command::AblateNoRepl(a) => train_abr(a, true),
        Command::EvalAbr(a) => eval_abr(a),
        Command::Summarize(a) => summarize(a),
        Command::Plot(a) => {
            if plot::plot(&a.input, &a.out)? {
                eprintln!("wrote {}", a.out.display());
            } else {
                eprintln!("{} has no data rows; no plot written", a.input.display());
            }
            Ok(())
        }
    }
}
