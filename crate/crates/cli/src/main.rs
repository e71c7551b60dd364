//! Command-line front end for the insertion-policy pipeline: demonstration
//! collection, diffusion-model training, closed-loop evaluation, sweeps,
//! the filter ablation, denoising traces, and inference timing.
//!
//! All outputs are CSV or JSON. Relative output paths are resolved against
//! `PEGDIFF_OUT_DIR` when that variable is set.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pegdiff_core::bundle::ModelBundle;
use pegdiff_core::dataset::{
    build_training_pairs, compute_norm_stats, read_dataset, split, write_dataset,
};
use pegdiff_core::ddpm::{ScheduleConfig, VarianceSchedule};
use pegdiff_core::env::{make_task, EnvConfig, TaskName};
use pegdiff_core::eval::{
    ablate_filter, measure_inference_frequency, sweep, trace_denoise, EvalConfig, EvalReport,
    SweepReport,
};
use pegdiff_core::expert::{collect_demonstrations, CollectConfig, ExpertParams};
use pegdiff_core::filter::FilterConfig;
use pegdiff_core::net::{AdamConfig, NetConfig, NetParams};
use pegdiff_core::rollout::{DiffusionPolicy, LatencyModel, RolloutConfig};
use pegdiff_core::train::{train, TrainConfig};

mod tables;

#[derive(Parser)]
#[command(name = "pegdiff", about = "Force-domain diffusion policy for peg-in-hole insertion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scripted expert and record a demonstration dataset.
    Collect(CollectArgs),
    /// Train a diffusion model on a recorded dataset.
    Train(TrainArgs),
    /// Evaluate a model bundle closed-loop on one task.
    Eval(EvalArgs),
    /// Cross-product evaluation: models x tasks, plus the expert baseline.
    Sweep(SweepArgs),
    /// Paired filter on/off evaluation over shared seeds.
    AblateFilter(AblateArgs),
    /// Export per-step denoising trajectories against ground truth.
    TraceDenoise(TraceArgs),
    /// Time full-horizon sampling across model widths.
    BenchInference(BenchArgs),
}

#[derive(Args, Clone)]
struct EnvArgs {
    /// Episode timeout in seconds.
    #[arg(long, default_value_t = 10.0)]
    timeout: f64,
    /// Gaussian sensor noise std (0 disables).
    #[arg(long, default_value_t = 0.0)]
    sensor_noise_std: f64,
    /// Initial lateral offset range (+- m).
    #[arg(long, default_value_t = 2e-3)]
    lateral_range: f64,
    /// Initial tilt range (+- rad).
    #[arg(long, default_value_t = 0.03)]
    tilt_range: f64,
    /// Start height of the peg tip above the surface (m).
    #[arg(long, default_value_t = 5e-4)]
    start_height: f64,
    /// Setpoint lateral error range (+- m), the simulated localization
    /// uncertainty of the hole.
    #[arg(long, default_value_t = 1.5e-3)]
    goal_offset_range: f64,
    /// Contact penalty stiffness (N/m).
    #[arg(long)]
    contact_stiffness: Option<f64>,
    /// Contact penalty damping (N s/m).
    #[arg(long)]
    contact_damping: Option<f64>,
    /// Coulomb friction coefficient.
    #[arg(long)]
    friction: Option<f64>,
    /// Feed-forward force clamp (N).
    #[arg(long, default_value_t = 40.0)]
    max_force: f64,
    /// Feed-forward torque clamp (N m).
    #[arg(long, default_value_t = 5.0)]
    max_torque: f64,
}

impl EnvArgs {
    fn env_config(&self) -> EnvConfig {
        let mut cfg = EnvConfig::default();
        cfg.timeout = self.timeout;
        cfg.sensor_noise_std = self.sensor_noise_std;
        cfg.init_pose.lateral_range = self.lateral_range;
        cfg.init_pose.tilt_range = self.tilt_range;
        cfg.init_pose.start_height = self.start_height;
        cfg.init_pose.goal_offset_range = self.goal_offset_range;
        cfg.limits.max_force = self.max_force;
        cfg.limits.max_torque = self.max_torque;
        cfg
    }

    fn apply_geometry(&self, task: TaskName) -> pegdiff_core::env::TaskGeometry {
        let mut geom = make_task(task);
        if let Some(k) = self.contact_stiffness {
            geom.contact_stiffness = k;
        }
        if let Some(c) = self.contact_damping {
            geom.contact_damping = c;
        }
        if let Some(mu) = self.friction {
            geom.friction_coeff = mu;
        }
        geom
    }
}

#[derive(Args, Clone)]
struct ExpertArgs {
    #[arg(long, default_value_t = 4.0)]
    wiggle_force: f64,
    #[arg(long, default_value_t = 0.4)]
    wiggle_torque: f64,
    #[arg(long, default_value_t = 4.0)]
    wiggle_freq: f64,
    #[arg(long, default_value_t = 10.0)]
    downward_bias: f64,
    #[arg(long, default_value_t = 15.0)]
    push_force: f64,
    #[arg(long, default_value_t = 2.0)]
    recovery_gain: f64,
    #[arg(long, default_value_t = 750)]
    recovery_ticks: u64,
    #[arg(long, default_value_t = 500)]
    stuck_window: usize,
    #[arg(long, default_value_t = 1e-4)]
    stuck_epsilon: f64,
    #[arg(long, default_value_t = 8e-3)]
    align_tilt_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    align_force_threshold: f64,
}

impl ExpertArgs {
    fn params(&self) -> ExpertParams {
        ExpertParams {
            wiggle_force: self.wiggle_force,
            wiggle_torque: self.wiggle_torque,
            wiggle_freq: self.wiggle_freq,
            downward_bias: self.downward_bias,
            push_force: self.push_force,
            recovery_gain: self.recovery_gain,
            recovery_ticks: self.recovery_ticks,
            stuck_window: self.stuck_window,
            stuck_epsilon: self.stuck_epsilon,
            align_tilt_threshold: self.align_tilt_threshold,
            align_force_threshold: self.align_force_threshold,
        }
    }
}

#[derive(Args, Clone)]
struct ScheduleArgs {
    /// Diffusion horizon T.
    #[arg(long, default_value_t = 50)]
    horizon: usize,
    #[arg(long, default_value_t = 1e-4)]
    beta_start: f64,
    #[arg(long, default_value_t = 1e-2)]
    beta_end: f64,
}

impl ScheduleArgs {
    fn config(&self) -> ScheduleConfig {
        ScheduleConfig {
            horizon: self.horizon,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }
}

#[derive(Args, Clone)]
struct EvalProtocolArgs {
    #[arg(long, default_value_t = 50)]
    poses: usize,
    #[arg(long, default_value_t = 2)]
    trials_per_pose: usize,
    /// Simulated inference period in control ticks.
    #[arg(long, default_value_t = 7)]
    latency_ticks: usize,
    /// Disable the dynamic-system filter (zero-order hold pass-through).
    #[arg(long)]
    no_filter: bool,
    /// Filter coefficient alpha.
    #[arg(long, default_value_t = 0.9)]
    filter_alpha: f64,
    /// Filter coefficient beta.
    #[arg(long, default_value_t = 0.3)]
    filter_beta: f64,
    /// Filter integration step per tick.
    #[arg(long, default_value_t = 1.0)]
    filter_delta: f64,
    /// Apply the noise term at the final denoising step too.
    #[arg(long)]
    final_step_noise: bool,
    /// Conditioning-observation gap override in ticks (default: one
    /// inference period).
    #[arg(long)]
    prev_obs_gap: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl EvalProtocolArgs {
    fn config(&self) -> EvalConfig {
        EvalConfig {
            n_poses: self.poses,
            trials_per_pose: self.trials_per_pose,
            latency_ticks: self.latency_ticks,
            filter: if self.no_filter {
                FilterConfig::pass_through()
            } else {
                FilterConfig {
                    alpha: self.filter_alpha,
                    beta: self.filter_beta,
                    delta: self.filter_delta,
                    pass_through: false,
                }
            },
            final_step_noise: self.final_step_noise,
            prev_obs_gap: self.prev_obs_gap,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct CollectArgs {
    #[arg(long, default_value = "cuboid")]
    task: TaskName,
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    #[arg(long, default_value_t = 3)]
    retry_factor: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    env: EnvArgs,
    #[command(flatten)]
    expert: ExpertArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `collect`.
    #[arg(long)]
    dataset: PathBuf,
    /// Hidden width N of the noise estimator.
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value_t = 16)]
    tau_embed: usize,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    adam_beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    adam_beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    adam_eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Validation cadence in epochs.
    #[arg(long, default_value_t = 5)]
    val_every: usize,
    /// Cap on minibatches per epoch.
    #[arg(long)]
    max_batches: Option<usize>,
    /// Training fraction of the episode-level split.
    #[arg(long, default_value_t = 0.8)]
    split: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Output model bundle path.
    #[arg(long)]
    out: PathBuf,
    /// Optional loss-history CSV.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "cuboid")]
    task: TaskName,
    #[command(flatten)]
    protocol: EvalProtocolArgs,
    #[command(flatten)]
    env: EnvArgs,
    /// Report JSON path.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-episode CSV.
    #[arg(long)]
    episodes_csv: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated model bundle paths.
    #[arg(long, value_delimiter = ',')]
    models: Vec<PathBuf>,
    /// Labels for the models (defaults to file stems).
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
    /// Comma-separated task names.
    #[arg(long, value_delimiter = ',', default_values_t = vec![
        TaskName::Cuboid, TaskName::Key, TaskName::CylS, TaskName::CylL, TaskName::Prism
    ])]
    tasks: Vec<TaskName>,
    /// Include the scripted-expert baseline row.
    #[arg(long, default_value_t = true)]
    baseline: bool,
    #[arg(long, default_value_t = 100)]
    bench_trials: usize,
    #[command(flatten)]
    protocol: EvalProtocolArgs,
    #[command(flatten)]
    env: EnvArgs,
    #[command(flatten)]
    expert: ExpertArgs,
    /// Output directory for the report CSVs.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "cuboid")]
    task: TaskName,
    #[command(flatten)]
    protocol: EvalProtocolArgs,
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 5)]
    samples: usize,
    #[arg(long, default_value_t = 0.8)]
    split: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![128usize, 256, 512, 1024])]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Optional output CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Resolve a path against `PEGDIFF_OUT_DIR` when it is relative.
fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os("PEGDIFF_OUT_DIR") {
        Some(base) if p.is_relative() => PathBuf::from(base).join(p),
        _ => p.to_path_buf(),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn print_report(report: &EvalReport) {
    println!(
        "task {}: {}/{} trials succeeded ({:.1}%), median time {}, efficiency {:.4}",
        report.task,
        report.successes,
        report.trials,
        report.success_rate_pct,
        report
            .exec_time_median_s
            .map_or("n/a".to_string(), |t| format!("{t:.3}s")),
        report.efficiency,
    );
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Collect(args) => cmd_collect(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::AblateFilter(args) => cmd_ablate(args),
        Command::TraceDenoise(args) => cmd_trace(args),
        Command::BenchInference(args) => cmd_bench(args),
    }
}

fn cmd_collect(args: CollectArgs) -> Result<()> {
    let geom = args.env.apply_geometry(args.task);
    let records = collect_demonstrations(
        args.task,
        geom,
        args.env.env_config(),
        args.expert.params(),
        &CollectConfig {
            episodes: args.episodes,
            retry_factor: args.retry_factor,
            seed: args.seed,
        },
    )?;
    let dir = out_path(&args.out);
    let manifest = write_dataset(&records, &dir)?;
    let rows: usize = manifest.episodes.iter().map(|e| e.ticks).sum();
    let durations: Vec<f64> = records.iter().map(|r| r.outcome.duration).collect();
    let mean = durations.iter().sum::<f64>() / durations.len() as f64;
    println!(
        "collected {} successful episodes on {} ({} rows at 1 kHz, mean {:.2}s) -> {}",
        records.len(),
        args.task,
        rows,
        mean,
        dir.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (records, manifest) = read_dataset(&args.dataset)?;
    println!(
        "dataset: {} episodes, {} rows (task {})",
        records.len(),
        manifest.episodes.iter().map(|e| e.ticks).sum::<usize>(),
        manifest.task
    );
    let (train_eps, val_eps) = split(&records, args.split, args.split_seed)?;
    let stats = compute_norm_stats(&train_eps)?;
    let pairs = build_training_pairs(&train_eps, &stats);
    let val_pairs = build_training_pairs(&val_eps, &stats);
    println!("split: {} train pairs, {} validation pairs", pairs.len(), val_pairs.len());

    let sched_cfg = args.schedule.config();
    let sched = VarianceSchedule::from_config(&sched_cfg)?;
    let net_cfg = NetConfig {
        width: args.width,
        num_blocks: args.blocks,
        tau_embed_dim: args.tau_embed,
        ..NetConfig::default()
    };
    let train_cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        adam: AdamConfig {
            learning_rate: args.lr,
            beta1: args.adam_beta1,
            beta2: args.adam_beta2,
            epsilon: args.adam_eps,
        },
        seed: args.seed,
        validation_every: args.val_every,
        max_batches_per_epoch: args.max_batches,
        ..TrainConfig::default()
    };
    let started = std::time::Instant::now();
    let (params, history) = train(&pairs, Some(&val_pairs), net_cfg, &train_cfg, &sched)?;
    println!(
        "trained N={} for {} epochs in {:.0}s; final training loss {:.4}",
        args.width,
        args.epochs,
        started.elapsed().as_secs_f64(),
        history.train.last().copied().unwrap_or(f64::NAN)
    );
    if let Some((epoch, loss)) = history.validation.last() {
        println!("final validation loss {loss:.4} (epoch {epoch})");
    }

    let bundle = ModelBundle { net: params, schedule: sched_cfg, norm: stats };
    let model_path = out_path(&args.out);
    if let Some(parent) = model_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    bundle.save(&model_path)?;
    println!("model bundle -> {}", model_path.display());

    if let Some(csv) = &args.loss_csv {
        let path = out_path(csv);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, tables::loss_history_csv(&history))?;
        println!("loss history -> {}", path.display());
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let bundle = Arc::new(ModelBundle::load(&args.model)?);
    let cfg = args.protocol.config();
    let geom = args.env.apply_geometry(args.task);
    let policy = DiffusionPolicy::new(bundle, cfg.final_step_noise)?;
    let rollout = RolloutConfig {
        latency: LatencyModel { period_ticks: cfg.latency_ticks },
        filter: cfg.filter,
        prev_obs_gap: cfg.prev_obs_gap,
    };
    let report = pegdiff_core::eval::evaluate(
        &policy,
        args.task,
        geom,
        args.env.env_config(),
        &cfg,
        &rollout,
    )?;
    print_report(&report);
    let path = out_path(&args.out);
    write_json(&path, &report)?;
    println!("report -> {}", path.display());
    if let Some(csv) = &args.episodes_csv {
        let path = out_path(csv);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, tables::episodes_csv(&report))?;
        println!("episodes -> {}", path.display());
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    if args.models.is_empty() {
        bail!("sweep needs at least one --models path");
    }
    let mut models = Vec::new();
    for (i, path) in args.models.iter().enumerate() {
        let label = args
            .labels
            .get(i)
            .cloned()
            .or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .unwrap_or_else(|| format!("model{i}"));
        let bundle =
            Arc::new(ModelBundle::load(path).with_context(|| format!("loading {path:?}"))?);
        models.push((label, bundle));
    }
    let cfg = args.protocol.config();
    let report: SweepReport = sweep(
        &models,
        &args.tasks,
        args.env.env_config(),
        &cfg,
        args.baseline.then(|| args.expert.params()),
        args.bench_trials,
    )?;

    let dir = out_path(&args.out_dir);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("success_rates.csv"), tables::success_table_csv(&report, &args.tasks))?;
    std::fs::write(dir.join("exec_times.csv"), tables::exec_time_csv(&report, &args.tasks))?;
    std::fs::write(dir.join("efficiency.csv"), tables::efficiency_csv(&report, &args.tasks))?;
    std::fs::write(dir.join("inference.csv"), tables::inference_csv(&report))?;
    write_json(&dir.join("summary.json"), &report)?;
    print!("{}", tables::success_table_csv(&report, &args.tasks));
    println!("sweep reports -> {}", dir.display());
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let bundle = Arc::new(ModelBundle::load(&args.model)?);
    let mut cfg = args.protocol.config();
    cfg.filter.pass_through = false;
    let report = ablate_filter(bundle, args.task, args.env.env_config(), &cfg)?;
    println!("filter on:");
    print_report(&report.with_filter);
    println!("filter off:");
    print_report(&report.without_filter);
    println!(
        "paired success difference (on - off): {} over {} trials; per-batch {:?}",
        report.success_diff, report.with_filter.trials, report.batch_diffs
    );
    let dir = out_path(&args.out_dir);
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("ablation.json"), &report)?;
    std::fs::write(dir.join("ablation.csv"), tables::ablation_csv(&report))?;
    println!("ablation reports -> {}", dir.display());
    Ok(())
}

fn cmd_trace(args: TraceArgs) -> Result<()> {
    let bundle = ModelBundle::load(&args.model)?;
    let (records, _) = read_dataset(&args.dataset)?;
    let (_, val_eps) = split(&records, args.split, args.split_seed)?;
    let (traces, improved) = trace_denoise(&bundle, &val_eps, args.samples, args.seed)?;
    let dir = out_path(&args.out_dir);
    std::fs::create_dir_all(&dir)?;
    for (i, trace) in traces.iter().enumerate() {
        std::fs::write(dir.join(format!("trace_{i:03}.csv")), tables::denoise_trace_csv(trace))?;
    }
    println!(
        "{} traces -> {}; fraction with final action closer to ground truth than the initial noise: {:.2}",
        traces.len(),
        dir.display(),
        improved
    );
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let sched = VarianceSchedule::from_config(&args.schedule.config())?;
    let mut rows = Vec::new();
    for &width in &args.widths {
        let params = NetParams::init(
            NetConfig { width, ..NetConfig::default() },
            args.seed ^ width as u64,
        )?;
        let bench = measure_inference_frequency(&params, &sched, args.trials, args.seed)?;
        println!(
            "N={width}: {:.1} Hz (median sample {:.3} ms over {} trials)",
            bench.hz,
            bench.median_s * 1e3,
            bench.trials
        );
        rows.push(bench);
    }
    if let Some(out) = &args.out {
        let path = out_path(out);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, tables::bench_csv(&rows))?;
        println!("bench table -> {}", path.display());
    }
    Ok(())
}
