//! CSV renderings of the evaluation reports.
//!
//! Schemas:
//! - `success_rates.csv`: `model,<task...>,novel_average` (percent)
//! - `exec_times.csv`: `model,task,median_s,p25_s,p75_s,mean_s`
//! - `efficiency.csv`: `model,<task...>` (success fraction per second)
//! - `inference.csv`: `model,width,hz`
//! - loss history: `epoch,train_loss,validation_loss` (validation blank
//!   between cadence points)
//! - episодes: `pose_idx,trial_idx,lateral,tilt,goal_offset,success,duration_s,termination`
//! - denoise traces: `tau,a0..a5,gt0..gt5`
//! - ablation: `condition,task,successes,trials,success_rate_pct,median_s`

use std::fmt::Write;

use pegdiff_core::env::TaskName;
use pegdiff_core::eval::{AblationReport, DenoiseTrace, EvalReport, InferenceBench, SweepReport};
use pegdiff_core::train::LossHistory;

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

pub fn loss_history_csv(history: &LossHistory) -> String {
    let mut out = String::from("epoch,train_loss,validation_loss\n");
    let mut val_iter = history.validation.iter().peekable();
    for (i, loss) in history.train.iter().enumerate() {
        let epoch = i + 1;
        let val = match val_iter.peek() {
            Some((e, v)) if *e == epoch => {
                let v = *v;
                val_iter.next();
                format!("{v}")
            }
            _ => String::new(),
        };
        writeln!(out, "{epoch},{loss},{val}").unwrap();
    }
    out
}

pub fn episodes_csv(report: &EvalReport) -> String {
    let mut out =
        String::from("pose_idx,trial_idx,lateral,tilt,goal_offset,success,duration_s,termination\n");
    for e in &report.episodes {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{:?}",
            e.pose_idx,
            e.trial_idx,
            e.pose.lateral,
            e.pose.tilt,
            e.pose.goal_offset,
            e.success,
            e.duration_s,
            e.termination
        )
        .unwrap();
    }
    out
}

fn cell<'a>(report: &'a SweepReport, model: &str, task: &str) -> Option<&'a EvalReport> {
    report
        .cells
        .iter()
        .find(|c| c.model == model && c.task == task)
        .map(|c| &c.report)
}

fn model_labels(report: &SweepReport) -> Vec<String> {
    let mut labels = Vec::new();
    for c in &report.cells {
        if !labels.contains(&c.model) {
            labels.push(c.model.clone());
        }
    }
    labels
}

/// Success-rate table: one row per model (and the baseline), one column per
/// task, plus the average over the non-training (novel) tasks.
pub fn success_table_csv(report: &SweepReport, tasks: &[TaskName]) -> String {
    let mut out = String::from("model");
    for t in tasks {
        write!(out, ",{t}").unwrap();
    }
    out.push_str(",novel_average\n");
    for model in model_labels(report) {
        write!(out, "{model}").unwrap();
        let mut novel = Vec::new();
        for t in tasks {
            match cell(report, &model, t.as_str()) {
                Some(r) => {
                    write!(out, ",{:.1}", r.success_rate_pct).unwrap();
                    if *t != TaskName::Cuboid {
                        novel.push(r.success_rate_pct);
                    }
                }
                None => out.push(','),
            }
        }
        if novel.is_empty() {
            out.push_str(",\n");
        } else {
            writeln!(out, ",{:.1}", novel.iter().sum::<f64>() / novel.len() as f64).unwrap();
        }
    }
    out
}

pub fn exec_time_csv(report: &SweepReport, tasks: &[TaskName]) -> String {
    let mut out = String::from("model,task,median_s,p25_s,p75_s,mean_s\n");
    for model in model_labels(report) {
        for t in tasks {
            if let Some(r) = cell(report, &model, t.as_str()) {
                writeln!(
                    out,
                    "{model},{t},{},{},{},{}",
                    fmt_opt(r.exec_time_median_s),
                    fmt_opt(r.exec_time_p25_s),
                    fmt_opt(r.exec_time_p75_s),
                    r.mean_time_s
                )
                .unwrap();
            }
        }
    }
    out
}

pub fn efficiency_csv(report: &SweepReport, tasks: &[TaskName]) -> String {
    let mut out = String::from("model");
    for t in tasks {
        write!(out, ",{t}").unwrap();
    }
    out.push('\n');
    for model in model_labels(report) {
        write!(out, "{model}").unwrap();
        for t in tasks {
            match cell(report, &model, t.as_str()) {
                Some(r) => write!(out, ",{:.4}", r.efficiency).unwrap(),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

pub fn inference_csv(report: &SweepReport) -> String {
    let mut out = String::from("model,width,hz\n");
    for (label, hz, width) in &report.inference {
        writeln!(out, "{label},{width},{hz:.2}").unwrap();
    }
    out
}

pub fn bench_csv(rows: &[InferenceBench]) -> String {
    let mut out = String::from("width,trials,hz,median_s\n");
    for b in rows {
        writeln!(out, "{},{},{},{}", b.width, b.trials, b.hz, b.median_s).unwrap();
    }
    out
}

pub fn ablation_csv(report: &AblationReport) -> String {
    let mut out =
        String::from("condition,task,successes,trials,success_rate_pct,median_s\n");
    for (name, r) in
        [("filter_on", &report.with_filter), ("filter_off", &report.without_filter)]
    {
        writeln!(
            out,
            "{name},{},{},{},{:.1},{}",
            r.task,
            r.successes,
            r.trials,
            r.success_rate_pct,
            fmt_opt(r.exec_time_median_s)
        )
        .unwrap();
    }
    out
}

pub fn denoise_trace_csv(trace: &DenoiseTrace) -> String {
    let mut out = String::from("tau,a0,a1,a2,a3,a4,a5,gt0,gt1,gt2,gt3,gt4,gt5\n");
    for (tau, action) in &trace.steps {
        write!(out, "{tau}").unwrap();
        for v in action {
            write!(out, ",{v}").unwrap();
        }
        for v in &trace.ground_truth {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}
