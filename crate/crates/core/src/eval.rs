//! Evaluation harness: closed-loop success-rate measurement, model x task
//! sweeps, the filter ablation, denoising traces, and inference timing.
//!
//! Episodes are independent and run in parallel; every stochastic input is
//! derived from the evaluation seed and the episode index, so reports are
//! bitwise identical regardless of thread count.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::ModelBundle;
use crate::dataset::EpisodeRecord;
use crate::ddpm::{sample, SampleOptions, VarianceSchedule};
use crate::env::{make_task, EnvConfig, Environment, InitialPose, TaskGeometry, TaskName};
use crate::error::{Error, Result};
use crate::expert::ExpertParams;
use crate::filter::FilterConfig;
use crate::net::NetParams;
use crate::rollout::{
    run_episode, DiffusionPolicy, ExpertPolicy, LatencyModel, RolloutConfig, RolloutPolicy,
};
use crate::seeds::{self, Stream};
use crate::types::{EpisodeOutcome, Termination, ACTION_DIM, COND_DIM, OBS_DIM};

/// Evaluation protocol: `n_poses` random initial poses, `trials_per_pose`
/// runs each (same pose, fresh policy noise).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_poses: usize,
    pub trials_per_pose: usize,
    pub latency_ticks: usize,
    pub filter: FilterConfig,
    pub final_step_noise: bool,
    /// Conditioning-observation spacing override (ticks); `None` uses one
    /// inference period.
    pub prev_obs_gap: Option<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_poses: 50,
            trials_per_pose: 2,
            latency_ticks: 7,
            filter: FilterConfig::default(),
            final_step_noise: false,
            prev_obs_gap: None,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn trials(&self) -> usize {
        self.n_poses * self.trials_per_pose
    }
}

/// One evaluated trial.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub pose_idx: usize,
    pub trial_idx: usize,
    pub pose: InitialPose,
    pub success: bool,
    pub duration_s: f64,
    pub termination: Termination,
}

/// Aggregated evaluation result.
///
/// Execution-time percentiles cover successful trials; `mean_time_s` covers
/// every trial (failures cost their full timeout), and efficiency is the
/// success fraction divided by that mean, per the usability-report measure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub trials: usize,
    pub successes: usize,
    pub success_rate_pct: f64,
    pub exec_time_median_s: Option<f64>,
    pub exec_time_p25_s: Option<f64>,
    pub exec_time_p75_s: Option<f64>,
    pub mean_time_s: f64,
    pub efficiency: f64,
    pub config_fingerprint: String,
    pub episodes: Vec<EpisodeRow>,
}

fn percentile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

fn fingerprint<T: Serialize>(value: &T) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(value).unwrap_or_default();
    let digest = Sha256::digest(&json);
    let mut s = String::with_capacity(16);
    for b in digest.iter().take(8) {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

fn aggregate(
    task: &str,
    rows: Vec<EpisodeRow>,
    fingerprint_src: String,
) -> EvalReport {
    let trials = rows.len();
    let successes = rows.iter().filter(|r| r.success).count();
    let mut success_times: Vec<f64> =
        rows.iter().filter(|r| r.success).map(|r| r.duration_s).collect();
    success_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean_time_s = if trials == 0 {
        f64::NAN
    } else {
        rows.iter().map(|r| r.duration_s).sum::<f64>() / trials as f64
    };
    let success_rate_pct = 100.0 * successes as f64 / trials.max(1) as f64;
    let efficiency = if mean_time_s > 0.0 {
        (successes as f64 / trials.max(1) as f64) / mean_time_s
    } else {
        0.0
    };
    EvalReport {
        task: task.to_string(),
        trials,
        successes,
        success_rate_pct,
        exec_time_median_s: percentile(&success_times, 0.5),
        exec_time_p25_s: percentile(&success_times, 0.25),
        exec_time_p75_s: percentile(&success_times, 0.75),
        mean_time_s,
        efficiency,
        config_fingerprint: fingerprint_src,
        episodes: rows,
    }
}

/// Evaluate a policy prototype over the full pose x trial grid. The
/// prototype is cloned per episode; trials of one pose share the pose draw
/// but use independent policy streams.
pub fn evaluate<P: RolloutPolicy + Clone + Sync>(
    policy_proto: &P,
    task: TaskName,
    geom: TaskGeometry,
    env_config: EnvConfig,
    cfg: &EvalConfig,
    rollout: &RolloutConfig,
) -> Result<EvalReport> {
    if cfg.n_poses == 0 || cfg.trials_per_pose == 0 {
        return Err(Error::InvalidArgument("need at least one pose and one trial".into()));
    }
    let n = cfg.trials();
    let rows: Vec<Result<EpisodeRow>> = (0..n)
        .into_par_iter()
        .map(|ep| {
            let pose_idx = ep / cfg.trials_per_pose;
            let trial_idx = ep % cfg.trials_per_pose;
            let mut env = Environment::new(geom, env_config)?;
            let mut pose_rng = seeds::rng(cfg.seed, Stream::InitPose, pose_idx as u64);
            let pose = env.reset(&mut pose_rng);
            let mut policy = policy_proto.clone();
            policy.begin_episode(seeds::derive(cfg.seed, Stream::Policy, ep as u64), &pose);
            let outcome = match run_episode(&mut env, &mut policy, rollout, None) {
                Ok(o) => o,
                // a non-finite rollout is recorded as a failed trial
                Err(Error::NonFinite(_)) => EpisodeOutcome {
                    success: false,
                    duration: env.elapsed(),
                    termination: Termination::SafetyAbort,
                },
                Err(e) => return Err(e),
            };
            Ok(EpisodeRow {
                pose_idx,
                trial_idx,
                pose,
                success: outcome.success,
                duration_s: outcome.duration,
                termination: outcome.termination,
            })
        })
        .collect();
    let rows: Result<Vec<EpisodeRow>> = rows.into_iter().collect();
    let fp = fingerprint(&(task.as_str(), &geom, &env_config, cfg));
    Ok(aggregate(task.as_str(), rows?, fp))
}

/// Evaluate a diffusion model bundle on a named task.
pub fn evaluate_model(
    bundle: Arc<ModelBundle>,
    task: TaskName,
    env_config: EnvConfig,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let policy = DiffusionPolicy::new(bundle, cfg.final_step_noise)?;
    let rollout = RolloutConfig {
        latency: LatencyModel { period_ticks: cfg.latency_ticks },
        filter: cfg.filter,
        prev_obs_gap: cfg.prev_obs_gap,
    };
    evaluate(&policy, task, make_task(task), env_config, cfg, &rollout)
}

/// Evaluate the scripted expert (the comparison baseline) on a named task
/// under its native per-tick, unfiltered conditions.
pub fn evaluate_expert(
    params: ExpertParams,
    task: TaskName,
    env_config: EnvConfig,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let policy = ExpertPolicy::new(params);
    evaluate(
        &policy,
        task,
        make_task(task),
        env_config,
        cfg,
        &RolloutConfig::per_tick_passthrough(),
    )
}

/// Paired filter ablation: identical seeds with the filter active and in
/// pass-through. `batch_direction` holds the per-batch success differences
/// (on minus off) over three contiguous pose batches.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub with_filter: EvalReport,
    pub without_filter: EvalReport,
    pub success_diff: i64,
    pub batch_diffs: [i64; 3],
}

pub fn ablate_filter(
    bundle: Arc<ModelBundle>,
    task: TaskName,
    env_config: EnvConfig,
    cfg: &EvalConfig,
) -> Result<AblationReport> {
    let mut on_cfg = *cfg;
    on_cfg.filter.pass_through = false;
    let mut off_cfg = *cfg;
    off_cfg.filter = FilterConfig::pass_through();
    let with_filter = evaluate_model(bundle.clone(), task, env_config, &on_cfg)?;
    let without_filter = evaluate_model(bundle, task, env_config, &off_cfg)?;

    let mut batch_diffs = [0i64; 3];
    for (a, b) in with_filter.episodes.iter().zip(&without_filter.episodes) {
        let batch = (a.pose_idx * 3 / cfg.n_poses).min(2);
        batch_diffs[batch] += a.success as i64 - b.success as i64;
    }
    let success_diff = with_filter.successes as i64 - without_filter.successes as i64;
    Ok(AblationReport { with_filter, without_filter, success_diff, batch_diffs })
}

/// One sweep cell: a model (or the baseline) evaluated on one task.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepCell {
    pub model: String,
    pub task: String,
    pub report: EvalReport,
}

/// Cross-product evaluation of models over tasks plus the expert baseline
/// row, with per-model measured inference frequency.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    /// (model label, measured Hz, width)
    pub inference: Vec<(String, f64, usize)>,
}

pub fn sweep(
    models: &[(String, Arc<ModelBundle>)],
    tasks: &[TaskName],
    env_config: EnvConfig,
    cfg: &EvalConfig,
    baseline: Option<ExpertParams>,
    bench_trials: usize,
) -> Result<SweepReport> {
    let mut cells = Vec::new();
    for (label, bundle) in models {
        for &task in tasks {
            let report = evaluate_model(bundle.clone(), task, env_config, cfg)?;
            cells.push(SweepCell { model: label.clone(), task: task.as_str().into(), report });
        }
    }
    if let Some(params) = baseline {
        for &task in tasks {
            let report = evaluate_expert(params, task, env_config, cfg)?;
            cells.push(SweepCell {
                model: "baseline".into(),
                task: task.as_str().into(),
                report,
            });
        }
    }
    let mut inference = Vec::new();
    for (label, bundle) in models {
        let sched = VarianceSchedule::from_config(&bundle.schedule)?;
        let bench = measure_inference_frequency(&bundle.net, &sched, bench_trials, cfg.seed)?;
        inference.push((label.clone(), bench.hz, bundle.net.config.width));
    }
    Ok(SweepReport { cells, inference })
}

/// Result of timing full reverse-process sampling.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct InferenceBench {
    pub width: usize,
    pub trials: usize,
    /// `1 / median sample duration`.
    pub hz: f64,
    pub median_s: f64,
}

/// Achievable sampling frequency: median wall-clock time of one full
/// reverse pass, after warmup, inverted.
pub fn measure_inference_frequency(
    net: &NetParams,
    sched: &VarianceSchedule,
    trials: usize,
    seed: u64,
) -> Result<InferenceBench> {
    let trials = trials.max(10);
    let mut rng = seeds::rng(seed, Stream::Bench, net.config.width as u64);
    let obs: Vec<f64> = (0..net.config.obs_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let opts = SampleOptions::default();
    for _ in 0..10 {
        sample(&obs, net, sched, &mut rng, &opts)?;
    }
    let mut durations = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t0 = Instant::now();
        sample(&obs, net, sched, &mut rng, &opts)?;
        durations.push(t0.elapsed().as_secs_f64());
    }
    durations.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_s = durations[durations.len() / 2];
    Ok(InferenceBench { width: net.config.width, trials, hz: 1.0 / median_s, median_s })
}

/// Denoising trajectory for one validation row, in physical units.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenoiseTrace {
    /// `(tau, action)` from `tau = T` down to `0`.
    pub steps: Vec<(usize, [f64; ACTION_DIM])>,
    pub ground_truth: [f64; ACTION_DIM],
}

/// Trace the reverse process on rows drawn from validation episodes.
/// Returns the traces and the fraction of rows whose final action is closer
/// (L2) to the ground truth than their initial noise was.
pub fn trace_denoise(
    bundle: &ModelBundle,
    validation: &[&EpisodeRecord],
    n_samples: usize,
    seed: u64,
) -> Result<(Vec<DenoiseTrace>, f64)> {
    if validation.is_empty() {
        return Err(Error::InvalidArgument("no validation episodes to trace".into()));
    }
    let sched = VarianceSchedule::from_config(&bundle.schedule)?;
    let mut rng = seeds::rng(seed, Stream::Validation, 1);
    let mut traces = Vec::with_capacity(n_samples);
    let mut improved = 0usize;
    for _ in 0..n_samples {
        let rec = &validation[rng.gen_range(0..validation.len())];
        let t = rng.gen_range(1..rec.rows.len());
        let mut cond = [0.0; COND_DIM];
        cond[..OBS_DIM].copy_from_slice(&bundle.norm.normalize_obs(&rec.rows[t].obs));
        cond[OBS_DIM..].copy_from_slice(&bundle.norm.normalize_obs(&rec.rows[t - 1].obs));
        let out = sample(
            &cond,
            &bundle.net,
            &sched,
            &mut rng,
            &SampleOptions { trace: true, final_step_noise: false },
        )?;
        let gt = rec.rows[t].action;
        let steps: Vec<(usize, [f64; ACTION_DIM])> = out
            .trace
            .unwrap()
            .iter()
            .map(|d| (d.tau, bundle.norm.denormalize_action(&d.value)))
            .collect();
        let dist = |a: &[f64; ACTION_DIM]| -> f64 {
            a.iter().zip(&gt).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        };
        let first = &steps.first().unwrap().1;
        let last = &steps.last().unwrap().1;
        if dist(last) < dist(first) {
            improved += 1;
        }
        traces.push(DenoiseTrace { steps, ground_truth: gt });
    }
    Ok((traces, improved as f64 / n_samples.max(1) as f64))
}
