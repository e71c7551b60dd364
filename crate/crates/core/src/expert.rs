//! Scripted primitive-switching insertion expert.
//!
//! A three-phase controller that mirrors the phenomenology of a
//! demonstration-grade insertion skill: wiggle laterally and in tilt to find
//! and align with the hole mouth, push straight down once aligned, and fall
//! back to a larger-amplitude wiggle when insertion depth stops progressing.
//!
//! The wiggle is a relay on the sensed lateral and tilt velocities (force in
//! the direction of motion, saturated), which self-excites a limit-cycle
//! sweep at the plant's natural frequency. Driving it from the sensed state
//! rather than from a clock keeps every emitted wrench a function of the
//! observation, so the behavior is imitable from (observation, action)
//! pairs alone.
//!
//! The expert only reads the 18-dim observation. Tilt is tracked by
//! integrating the tilt rate from the known initial tilt (the demonstrator
//! knows its own starting pose); depth progress by integrating the vertical
//! twist.

use std::collections::VecDeque;

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{EpisodeRecord, TickRow};
use crate::env::{EnvConfig, Environment, TaskGeometry, TaskName};
use crate::error::{Error, Result};
use crate::plant::TICK_DT;
use crate::seeds::{self, Stream};
use crate::types::{Observation, Wrench};

/// Behavioral phase of the expert.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    AlignWiggle,
    Push,
    StuckRecovery,
}

/// Waveform and threshold constants of the scripted expert.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertParams {
    /// Lateral relay force amplitude (N).
    pub wiggle_force: f64,
    /// Tilt relay torque amplitude (N m).
    pub wiggle_torque: f64,
    /// Lateral velocity scale of the relay (m/s); also the latch
    /// threshold for the recovery bias.
    pub wiggle_v_ref: f64,
    /// Tilt rate scale saturating the tilt relay (rad/s).
    pub wiggle_w_ref: f64,
    /// Constant downward bias during wiggle (N).
    pub downward_bias: f64,
    /// Downward force in the push phase (N).
    pub push_force: f64,
    /// Amplitude multiplier in stuck recovery.
    pub recovery_gain: f64,
    /// Ticks a recovery burst lasts.
    pub recovery_ticks: u64,
    /// Window for depth-progress monitoring (ticks).
    pub stuck_window: usize,
    /// Minimum depth progress over the window (m).
    pub stuck_epsilon: f64,
    /// Tilt magnitude below which the peg counts as aligned (rad).
    pub align_tilt_threshold: f64,
    /// Smoothed lateral contact force below which the mouth counts as
    /// found (N).
    pub align_force_threshold: f64,
}

impl Default for ExpertParams {
    fn default() -> Self {
        Self {
            wiggle_force: 4.0,
            wiggle_torque: 0.4,
            wiggle_v_ref: 0.01,
            wiggle_w_ref: 0.1,
            downward_bias: 10.0,
            push_force: 15.0,
            recovery_gain: 2.0,
            recovery_ticks: 400,
            stuck_window: 500,
            stuck_epsilon: 1e-4,
            align_tilt_threshold: 8e-3,
            align_force_threshold: 0.5,
        }
    }
}

/// Mutable expert state: the active phase plus the integrated estimates the
/// transition rules read.
#[derive(Clone, Debug)]
pub struct ExpertState {
    pub phase: Phase,
    pub phase_entry_tick: u64,
    depth_window: VecDeque<f64>,
    depth_est: f64,
    tilt_est: f64,
    lateral_force_ema: f64,
    wiggle_dir: f64,
    last_lateral_force: f64,
}

impl ExpertState {
    /// Start an episode. `initial_tilt` seeds the tilt integrator.
    pub fn new(initial_tilt: f64) -> Self {
        Self {
            phase: Phase::AlignWiggle,
            phase_entry_tick: 0,
            depth_window: VecDeque::new(),
            depth_est: 0.0,
            tilt_est: initial_tilt,
            lateral_force_ema: 0.0,
            wiggle_dir: 1.0,
            last_lateral_force: 0.0,
        }
    }

    fn enter(&mut self, phase: Phase, tick: u64) {
        self.phase = phase;
        self.phase_entry_tick = tick;
        self.depth_window.clear();
    }
}

/// One control tick of the expert: integrate estimates, fire at most one
/// phase transition, and emit the phase's wrench.
pub fn expert_action(
    obs: &Observation,
    state: &mut ExpertState,
    tick: u64,
    params: &ExpertParams,
    rng: &mut ChaCha8Rng,
) -> Wrench {
    // estimate updates
    state.tilt_est += obs.ee_twist[4] * TICK_DT;
    state.depth_est -= obs.ee_twist[2] * TICK_DT;
    state.lateral_force_ema += 0.01 * (obs.f_ext.force[0] - state.lateral_force_ema);
    state.depth_window.push_back(state.depth_est);
    while state.depth_window.len() > params.stuck_window {
        state.depth_window.pop_front();
    }

    // transitions
    let window_full = state.depth_window.len() == params.stuck_window;
    let progress = if window_full {
        state.depth_window.back().unwrap() - state.depth_window.front().unwrap()
    } else {
        f64::INFINITY
    };
    match state.phase {
        Phase::AlignWiggle => {
            if window_full && progress < params.stuck_epsilon {
                state.wiggle_dir = stall_escape_direction(obs, state, rng);
                state.enter(Phase::StuckRecovery, tick);
            } else if state.tilt_est.abs() < params.align_tilt_threshold
                && state.lateral_force_ema.abs() < params.align_force_threshold
                && state.depth_est > 1e-3
            {
                state.enter(Phase::Push, tick);
            }
        }
        Phase::Push => {
            if window_full && progress < params.stuck_epsilon {
                state.wiggle_dir = stall_escape_direction(obs, state, rng);
                state.enter(Phase::StuckRecovery, tick);
            }
        }
        Phase::StuckRecovery => {
            if tick - state.phase_entry_tick >= params.recovery_ticks {
                state.enter(Phase::AlignWiggle, tick);
            }
        }
    }

    // wrench for the (possibly new) phase; the lateral relay pumps the
    // sensed motion and a smaller velocity-latched bias keeps pushing
    // through stiction so the sweep never dies at zero speed
    let v_lat = obs.ee_twist[0];
    let w_tilt = obs.ee_twist[4];
    if v_lat > params.wiggle_v_ref {
        state.wiggle_dir = 1.0;
    } else if v_lat < -params.wiggle_v_ref {
        state.wiggle_dir = -1.0;
    }
    let dir = state.wiggle_dir;
    let lateral = |amp: f64| amp * ((v_lat / params.wiggle_v_ref).tanh() + 0.5 * dir);
    let wrench = match state.phase {
        Phase::AlignWiggle => Wrench::new(
            Vector3::new(lateral(params.wiggle_force), 0.0, -params.downward_bias),
            Vector3::new(
                0.0,
                params.wiggle_torque * (w_tilt / params.wiggle_w_ref).tanh(),
                0.0,
            ),
        ),
        Phase::Push => Wrench::new(Vector3::new(0.0, 0.0, -params.push_force), Vector3::zeros()),
        Phase::StuckRecovery => {
            // larger-amplitude wiggle; the latch points toward the sensed
            // restoring force on entry, so dead stops restart inward
            let g = params.recovery_gain;
            Wrench::new(
                Vector3::new(lateral(g * params.wiggle_force), 0.0, -params.downward_bias),
                Vector3::new(
                    0.0,
                    g * params.wiggle_torque * (w_tilt / params.wiggle_w_ref).tanh(),
                    0.0,
                ),
            )
        }
    };
    state.last_lateral_force = wrench.force[0];
    wrench
}

/// Direction out of a stall: the lateral restoring force the controller is
/// applying, read from the internal wrench minus the expert's own last
/// command. Falls back to a coin flip when the readout is ambiguous.
fn stall_escape_direction(obs: &Observation, state: &ExpertState, rng: &mut ChaCha8Rng) -> f64 {
    let spring = obs.f_in.force[0] - state.last_lateral_force;
    if spring.abs() > 0.05 {
        spring.signum()
    } else if rng.gen::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// Demonstration-collection settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectConfig {
    pub episodes: usize,
    /// Attempt budget as a multiple of `episodes`; only successful episodes
    /// are retained.
    pub retry_factor: usize,
    pub seed: u64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self { episodes: 200, retry_factor: 3, seed: 0 }
    }
}

/// Run the expert in the environment and keep the first `episodes`
/// successful rollouts (by attempt order). Each retained row pairs the
/// observation after a tick with the clamped wrench executed during it.
pub fn collect_demonstrations(
    task: TaskName,
    geom: TaskGeometry,
    env_config: EnvConfig,
    expert_params: ExpertParams,
    config: &CollectConfig,
) -> Result<Vec<EpisodeRecord>> {
    use crate::rollout::{run_episode, ExpertPolicy, RolloutConfig, RolloutPolicy};

    if config.episodes == 0 {
        return Err(Error::InvalidArgument("must collect at least one episode".into()));
    }
    let max_attempts = config.episodes * config.retry_factor.max(1);
    let mut records = Vec::with_capacity(config.episodes);
    let mut attempt_base = 0usize;
    while records.len() < config.episodes && attempt_base < max_attempts {
        let wave = (config.episodes - records.len()).min(max_attempts - attempt_base);
        let wave_results: Vec<Result<Option<EpisodeRecord>>> = (0..wave)
            .into_par_iter()
            .map(|i| {
                let attempt = (attempt_base + i) as u64;
                let mut env = Environment::new(geom, env_config)?;
                let mut pose_rng = seeds::rng(config.seed, Stream::InitPose, attempt);
                let pose = env.reset(&mut pose_rng);
                let episode_seed = seeds::derive(config.seed, Stream::Expert, attempt);
                let mut policy = ExpertPolicy::new(expert_params);
                policy.begin_episode(episode_seed, &pose);
                let mut rows = Vec::new();
                let outcome = run_episode(
                    &mut env,
                    &mut policy,
                    &RolloutConfig::per_tick_passthrough(),
                    Some(&mut rows),
                )?;
                if !outcome.success {
                    return Ok(None);
                }
                let rows = rows
                    .iter()
                    .map(|r| TickRow {
                        obs: r.obs.to_array(),
                        action: {
                            let mut a = [0.0; 6];
                            a.copy_from_slice(r.executed.as_vector().as_slice());
                            a
                        },
                    })
                    .collect();
                Ok(Some(EpisodeRecord {
                    task: task.as_str().to_string(),
                    seed: episode_seed,
                    pose,
                    outcome,
                    rows,
                }))
            })
            .collect();
        for r in wave_results {
            if let Some(rec) = r? {
                if records.len() < config.episodes {
                    records.push(rec);
                }
            }
        }
        attempt_base += wave;
    }
    if records.len() < config.episodes {
        return Err(Error::InsufficientDemos { wanted: config.episodes, got: records.len() });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn quiet_obs() -> Observation {
        Observation::default()
    }

    #[test]
    fn push_phase_emits_pure_downward_force() {
        let params = ExpertParams::default();
        let mut state = ExpertState::new(0.0);
        state.enter(Phase::Push, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = expert_action(&quiet_obs(), &mut state, 0, &params, &mut rng);
        assert_eq!(w.force, Vector3::new(0.0, 0.0, -params.push_force));
        assert_eq!(w.torque, Vector3::zeros());
    }

    #[test]
    fn zero_progress_triggers_stuck_recovery() {
        let params = ExpertParams::default();
        let mut state = ExpertState::new(0.02);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // quiet observations: no depth progress at all
        for tick in 0..(params.stuck_window as u64 + 2) {
            expert_action(&quiet_obs(), &mut state, tick, &params, &mut rng);
        }
        assert_eq!(state.phase, Phase::StuckRecovery);
    }

    #[test]
    fn recovery_returns_to_align_after_burst() {
        let params = ExpertParams::default();
        let mut state = ExpertState::new(0.02);
        state.enter(Phase::StuckRecovery, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for tick in 0..=params.recovery_ticks {
            expert_action(&quiet_obs(), &mut state, tick, &params, &mut rng);
        }
        assert_eq!(state.phase, Phase::AlignWiggle);
    }

    #[test]
    fn aligned_and_engaged_switches_to_push() {
        let params = ExpertParams::default();
        let mut state = ExpertState::new(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // observation stream showing steady downward motion, no tilt rate,
        // no lateral force: aligned descent into the mouth
        let mut obs = quiet_obs();
        obs.ee_twist[2] = -0.02; // 20 mm/s down
        for tick in 0..100u64 {
            expert_action(&obs, &mut state, tick, &params, &mut rng);
        }
        assert_eq!(state.phase, Phase::Push);
    }

    #[test]
    fn wiggle_wrench_stays_within_safety_clamp() {
        let params = ExpertParams::default();
        let mut state = ExpertState::new(0.03);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut obs = quiet_obs();
        for tick in 0..3000u64 {
            obs.ee_twist[2] = -1e-4;
            let w = expert_action(&obs, &mut state, tick, &params, &mut rng);
            assert!(w.force.norm() <= 40.0);
            assert!(w.torque.norm() <= 5.0);
        }
    }

    #[test]
    fn collected_demonstrations_are_deterministic_and_valid() {
        use crate::env::make_task;
        let run = || {
            collect_demonstrations(
                TaskName::Cuboid,
                make_task(TaskName::Cuboid),
                EnvConfig::default(),
                ExpertParams::default(),
                &CollectConfig { episodes: 4, retry_factor: 3, seed: 11 },
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        for rec in &a {
            assert!(rec.outcome.success);
            assert_eq!(rec.outcome.termination, crate::types::Termination::Inserted);
            for row in &rec.rows {
                assert_eq!(row.obs.len() + row.action.len(), 24);
                assert!(row.obs.iter().chain(row.action.iter()).all(|v| v.is_finite()));
                let f = Vector3::new(row.action[0], row.action[1], row.action[2]);
                let t = Vector3::new(row.action[3], row.action[4], row.action[5]);
                assert!(f.norm() <= 40.0 + 1e-9);
                assert!(t.norm() <= 5.0 + 1e-9);
            }
        }
    }

    #[test]
    fn every_phase_has_exactly_one_successor_rule() {
        // phase machine totality: from any phase, feeding pathological
        // observations still leaves the state in a declared phase
        let params = ExpertParams::default();
        for start in [Phase::AlignWiggle, Phase::Push, Phase::StuckRecovery] {
            let mut state = ExpertState::new(0.0);
            state.enter(start, 0);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut obs = quiet_obs();
            obs.f_ext.force[0] = 100.0;
            obs.ee_twist[4] = 5.0;
            for tick in 0..2000u64 {
                expert_action(&obs, &mut state, tick, &params, &mut rng);
            }
            assert!(matches!(
                state.phase,
                Phase::AlignWiggle | Phase::Push | Phase::StuckRecovery
            ));
        }
    }
}
