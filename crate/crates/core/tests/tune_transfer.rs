// scratch: expert across geometry presets
use pegdiff_core::env::{make_task, EnvConfig, Environment, TaskName};
use pegdiff_core::expert::{expert_action, ExpertParams, ExpertState};
use pegdiff_core::seeds::{self, Stream};
use pegdiff_core::types::Observation;

#[test]
fn expert_across_tasks() {
    for task in TaskName::ALL {
        let params = ExpertParams::default();
        let n = 40;
        let mut successes = 0;
        let mut med = Vec::new();
        for ep in 0..n {
            let mut env = Environment::new(make_task(task), EnvConfig::default()).unwrap();
            let mut rng = seeds::rng(1, Stream::InitPose, ep);
            env.reset(&mut rng);
            let tilt0 = env.state().x[4];
            let mut expert = ExpertState::new(tilt0);
            let mut erng = seeds::rng(1, Stream::Expert, ep);
            let mut obs = Observation::default();
            let out = loop {
                let w = expert_action(&obs, &mut expert, env.tick(), &params, &mut erng);
                match env.step(&w) { Ok(out) => obs = out.obs, Err(_) => break None }
                if let Some(out) = env.check_outcome() { break Some(out); }
            };
            if let Some(o) = out { if o.success { successes += 1; med.push(o.duration); } }
        }
        med.sort_by(|a,b| a.partial_cmp(b).unwrap());
        let m = if med.is_empty() { f64::NAN } else { med[med.len()/2] };
        eprintln!("{task}: {successes}/{n} med {m:.2}s");
    }
}
