// scratch tuning harness; deleted before delivery
use pegdiff_core::env::{make_task, EnvConfig, Environment, TaskName};
use pegdiff_core::expert::{expert_action, ExpertParams, ExpertState};
use pegdiff_core::seeds::{self, Stream};
use pegdiff_core::types::{Observation, Termination};

#[test]
fn tune_expert_success_rate() {
    let params = ExpertParams::default();
    let n = 200;
    let mut successes = 0;
    let mut durations = Vec::new();
    let mut fail_info = Vec::new();
    for ep in 0..n {
        let mut env = Environment::new(make_task(TaskName::Cuboid), EnvConfig::default()).unwrap();
        let mut rng = seeds::rng(1, Stream::InitPose, ep);
        env.reset(&mut rng);
        let initial_tilt = env.state().x[4];
        let initial_x = env.state().x[0];
        let mut expert = ExpertState::new(initial_tilt);
        let mut erng = seeds::rng(1, Stream::Expert, ep);
        let mut obs = Observation::default();
        let outcome = loop {
            let w = expert_action(&obs, &mut expert, env.tick(), &params, &mut erng);
            match env.step(&w) {
                Ok(out) => obs = out.obs,
                Err(e) => { eprintln!("ep {ep}: abort {e}"); break None; }
            }
            if let Some(out) = env.check_outcome() { break Some(out); }
        };
        match outcome {
            Some(out) if out.success => { successes += 1; durations.push(out.duration); }
            Some(out) => fail_info.push((ep, initial_x, initial_tilt, out.termination, env.insertion_depth(), env.state().x[0], env.state().x[4], format!("{:?}", expert.phase))),
            None => fail_info.push((ep, initial_x, initial_tilt, Termination::SafetyAbort, env.insertion_depth(), env.state().x[0], env.state().x[4], format!("{:?}", expert.phase))),
        }
    }
    durations.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eprintln!("success: {successes}/{n}");
    if !durations.is_empty() {
        eprintln!("durations: min {:.2} med {:.2} max {:.2}", durations[0], durations[durations.len()/2], durations[durations.len()-1]);
    }
    for f in &fail_info {
        eprintln!("FAIL ep {} x0={:+.4} tilt0={:+.4} {:?} depth={:.5} x={:+.6} tilt={:+.4} phase={}", f.0, f.1, f.2, f.3, f.4, f.5, f.6, f.7);
    }
}
