use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::thread;

use crate::model::Model;
use crate::codec::HistoryPolicy;
use crate::num::Float;
use crate::sim::{eval_seed, EpisodeTrace, Sim, TaskKind};

use super::agent::ModelAgent;
use super::metrics::{episode_metrics, EpisodeMetrics, Turn};
use super::{EvalError, Result};

/// Task kinds compared between SA-MoE and the dense baselines.
pub const COMPARISON_TASKS: [TaskKind; 4] = [TaskKind::Manip, TaskKind::Qa, TaskKind::ContextVqa, TaskKind::Defective];

const EVAL_BASE: u64 = 0x0e7a_15ee_d000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Suite {
    pub tasks: Vec<TaskKind>,
    pub seeds: Vec<u64>,
}

impl Suite {
    pub fn new(tasks: Vec<TaskKind>, seeds: Vec<u64>) -> Self {
        Self { tasks, seeds }
    }

    /// `all` or a comma list of task names.
    pub fn parse_tasks(s: &str) -> Result<Vec<TaskKind>> {
        if s.trim().eq_ignore_ascii_case("all") {
            return Ok(TaskKind::ALL.to_vec());
        }
        s.split(',').map(|t| t.parse().map_err(EvalError::from)).collect()
    }

    /// `a..b` (inclusive) or a comma list.
    pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
        let bad = || EvalError::Config(format!("bad seed list {s:?}"));
        if let Some((a, b)) = s.split_once("..") {
            let a: u64 = a.trim().parse().map_err(|_| bad())?;
            let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
            if b < a {
                return Err(bad());
            }
            return Ok((a..=b).collect());
        }
        s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
    }

    pub fn seeds_label(&self) -> String {
        let contiguous = self.seeds.windows(2).all(|w| w[1] == w[0] + 1);
        match (self.seeds.first(), self.seeds.last()) {
            (Some(a), Some(b)) if contiguous && self.seeds.len() > 1 => format!("{a}..{b}"),
            _ => self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
        }
    }

    /// Simulator seed of the `i`-th listed seed for `task`.
    pub fn episode_seed(task: TaskKind, seed: u64) -> u64 {
        eval_seed(EVAL_BASE, task, seed as usize)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub jobs: usize,
    pub temperature: Float,
    pub seed: u64,
    pub policy: HistoryPolicy,
    /// Keep the text stream silent; isolates the action expert.
    pub silent_text: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { jobs: 1, temperature: 0.0, seed: 0, policy: HistoryPolicy::default(), silent_text: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Ratio {
    pub num: usize,
    pub den: usize,
}

impl Ratio {
    pub fn value(self) -> Option<f64> {
        (self.den > 0).then(|| self.num as f64 / self.den as f64)
    }

    fn add(&mut self, ok: bool) {
        self.num += ok as usize;
        self.den += 1;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSummary {
    pub task: TaskKind,
    pub n: usize,
    pub successes: usize,
    pub turn_latency_mean: Option<f64>,
    /// `None` when the 95th percentile is a missing response.
    pub turn_latency_p95: Option<f64>,
    pub barge_stop_latency_mean: Option<f64>,
    pub silence_violations: usize,
}

impl TaskSummary {
    pub fn success_rate(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.successes as f64 / self.n as f64
        }
    }
}

fn mean(xs: &[usize]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<usize>() as f64 / xs.len() as f64)
}

fn p95(turns: &[Turn]) -> Option<f64> {
    if turns.is_empty() {
        return None;
    }
    let mut l: Vec<Option<usize>> = turns.iter().map(|t| t.latency).collect();
    l.sort_by_key(|x| x.unwrap_or(usize::MAX));
    let idx = ((0.95 * l.len() as f64).ceil() as usize).max(1) - 1;
    l[idx].map(|x| x as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub label: String,
    pub seeds: String,
    pub tasks: Vec<TaskSummary>,
    pub metrics: BTreeMap<String, Ratio>,
    pub episodes: Vec<EpisodeMetrics>,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("inf".into(), |v| format!("{v:.4}"))
}

impl MetricReport {
    pub fn from_episodes(label: &str, seeds: &str, episodes: Vec<EpisodeMetrics>) -> Self {
        let mut metrics: BTreeMap<String, Ratio> = BTreeMap::new();
        fn put(metrics: &mut BTreeMap<String, Ratio>, name: &str, ok: bool) {
            metrics.entry(name.to_string()).or_default().add(ok);
        }
        for e in &episodes {
            put(&mut metrics, &format!("success.{}", e.task), e.success);
            if let Some(t) = e.dialogue_turn {
                put(&mut metrics, "dialogue_turn_taking", t.success);
            }
            if let Some(t) = e.action_turn {
                put(&mut metrics, "action_turn_taking", t.success);
            }
            if let Some(t) = e.barge_in {
                put(&mut metrics, "barge_in", t.success);
            }
            if let Some(v) = e.silence_violations {
                put(&mut metrics, "silence_control", v == 0);
            }
            if let Some(r) = e.rejected {
                put(&mut metrics, "defective_rejection", r);
            }
            if let Some(r) = e.reject_dimension {
                put(&mut metrics, "defective_dimension", r);
            }
            match e.task {
                TaskKind::Qa => put(&mut metrics, "qa_accuracy", e.answer_correct == Some(true)),
                TaskKind::SpeakWhileAct => {
                    put(&mut metrics, "swa_qa_accuracy", e.answer_correct == Some(true));
                    put(&mut metrics, "swa_manip_success", e.manip_done == Some(true));
                }
                TaskKind::Manip => put(&mut metrics, "manip_success", e.manip_done == Some(true)),
                TaskKind::ContextVqa => put(&mut metrics, "vqa_accuracy", e.answer_correct == Some(true)),
                _ => {}
            }
            if let (TaskKind::Echo, Some((ok, n))) = (e.task, e.answer_tokens) {
                let r = metrics.entry("echo_token_accuracy".into()).or_default();
                r.num += ok;
                r.den += n;
            }
        }
        let mut tasks = Vec::new();
        for task in TaskKind::ALL {
            let eps: Vec<&EpisodeMetrics> = episodes.iter().filter(|e| e.task == task).collect();
            if eps.is_empty() {
                continue;
            }
            let turns: Vec<Turn> = eps.iter().filter_map(|e| e.dialogue_turn.or(e.action_turn)).collect();
            let lat: Vec<usize> = turns.iter().filter_map(|t| t.latency).collect();
            let stops: Vec<usize> = eps.iter().filter_map(|e| e.barge_in.and_then(|t| t.latency)).collect();
            tasks.push(TaskSummary {
                task,
                n: eps.len(),
                successes: eps.iter().filter(|e| e.success).count(),
                turn_latency_mean: mean(&lat),
                turn_latency_p95: p95(&turns),
                barge_stop_latency_mean: mean(&stops),
                silence_violations: eps.iter().filter_map(|e| e.silence_violations).sum(),
            });
        }
        Self { label: label.to_string(), seeds: seeds.to_string(), tasks, metrics, episodes }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).and_then(|r| r.value())
    }

    pub fn task(&self, t: TaskKind) -> Option<&TaskSummary> {
        self.tasks.iter().find(|s| s.task == t)
    }

    pub const CSV_HEADER: &'static str = "model,task,n,success_rate,turn_latency_mean,turn_latency_p95,barge_stop_latency_mean,silence_violations";

    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for t in &self.tasks {
            let _ = writeln!(
                out,
                "{},{},{},{:.4},{},{},{},{}",
                self.label,
                t.task,
                t.n,
                t.success_rate(),
                t.turn_latency_mean.map_or("-".into(), |v| format!("{v:.4}")),
                if t.turn_latency_mean.is_none() && t.turn_latency_p95.is_none() { "-".into() } else { fmt_opt(t.turn_latency_p95) },
                t.barge_stop_latency_mean.map_or("-".into(), |v| format!("{v:.4}")),
                t.silence_violations
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}", Self::CSV_HEADER, self.csv_rows())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("report model={} seeds={}\n", self.label, self.seeds);
        for (k, r) in &self.metrics {
            let _ = writeln!(out, "metric.{k}={}/{} {}", r.num, r.den, r.value().map_or("-".into(), |v| format!("{v:.4}")));
        }
        for t in &self.tasks {
            let _ = writeln!(
                out,
                "task.{}: n={} success={:.4} turn_latency_mean={} turn_latency_p95={} barge_stop_latency_mean={} silence_violations={}",
                t.task,
                t.n,
                t.success_rate(),
                t.turn_latency_mean.map_or("-".into(), |v| format!("{v:.4}")),
                fmt_opt(t.turn_latency_p95),
                t.barge_stop_latency_mean.map_or("-".into(), |v| format!("{v:.4}")),
                t.silence_violations
            );
        }
        out
    }

    /// Acceptance thresholds on duplex behaviour: `(name, value, bound, pass)`.
    pub fn thresholds(&self) -> Vec<(String, f64, f64, bool)> {
        let mut out = Vec::new();
        let v = |n: &str| self.metric(n).unwrap_or(0.0);
        let mut at_least = |name: &str, value: f64, bound: f64| out.push((name.to_string(), value, bound, value >= bound));
        for (name, bound) in [
            ("dialogue_turn_taking", 0.95),
            ("action_turn_taking", 0.95),
            ("barge_in", 0.90),
            ("silence_control", 0.95),
            ("defective_rejection", 0.90),
            ("defective_dimension", 0.80),
            ("swa_manip_success", 0.80),
        ] {
            if self.metrics.contains_key(name) {
                at_least(name, v(name), bound);
            }
        }
        if self.metrics.contains_key("swa_manip_success") && self.metrics.contains_key("manip_success") {
            at_least("swa_manip_vs_solo", v("swa_manip_success") - v("manip_success"), -0.15);
        }
        if self.metrics.contains_key("swa_qa_accuracy") && self.metrics.contains_key("qa_accuracy") {
            let d = v("swa_qa_accuracy") - v("qa_accuracy");
            out.push(("swa_qa_vs_solo".into(), d, 0.15, d.abs() <= 0.15));
        }
        out
    }
}

/// Run every `(task, seed)` of the suite through `model`. Traces come back in suite order.
pub fn evaluate(sim: &Sim, model: &Model, label: &str, suite: &Suite, opts: &EvalOptions) -> Result<(MetricReport, Vec<EpisodeTrace>)> {
    let jobs: Vec<(TaskKind, u64)> = suite.tasks.iter().flat_map(|&t| suite.seeds.iter().map(move |&s| (t, Suite::episode_seed(t, s)))).collect();
    let run_one = |&(task, seed): &(TaskKind, u64)| -> Result<(EpisodeTrace, EpisodeMetrics)> {
        let (world, script) = sim.reset(task, seed)?;
        let mut agent = ModelAgent::new(model);
        agent.temperature = opts.temperature;
        agent.seed = opts.seed;
        agent.policy = opts.policy;
        agent.silent = opts.silent_text;
        let ep = sim.run(&world, &script, &mut agent)?;
        let m = episode_metrics(sim, &ep.trace)?;
        Ok((ep.trace, m))
    };
    let n = opts.jobs.max(1).min(jobs.len().max(1));
    let results: Vec<Result<(EpisodeTrace, EpisodeMetrics)>> = if n == 1 {
        jobs.iter().map(run_one).collect()
    } else {
        let chunk = jobs.len().div_ceil(n);
        thread::scope(|s| {
            let handles: Vec<_> = jobs.chunks(chunk).map(|c| s.spawn(move || c.iter().map(run_one).collect::<Vec<_>>())).collect();
            handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
        })
    };
    let mut traces = Vec::with_capacity(jobs.len());
    let mut metrics = Vec::with_capacity(jobs.len());
    for r in results {
        let (t, m) = r?;
        traces.push(t);
        metrics.push(m);
    }
    Ok((MetricReport::from_episodes(label, &suite.seeds_label(), metrics), traces))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub seeds: String,
    pub reports: Vec<MetricReport>,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", MetricReport::CSV_HEADER);
        for r in &self.reports {
            out.push_str(&r.csv_rows());
        }
        out
    }

    /// Success table over `tasks`, one column per model, with a mean row.
    pub fn table(&self, tasks: &[TaskKind]) -> String {
        let mut out = format!("comparison seeds={}\n{:<16}", self.seeds, "task");
        for r in &self.reports {
            let _ = write!(out, " {:>14}", r.label);
        }
        out.push('\n');
        let mut sums = vec![0.0; self.reports.len()];
        for &t in tasks {
            let _ = write!(out, "{:<16}", t.name());
            for (i, r) in self.reports.iter().enumerate() {
                let v = r.task(t).map_or(0.0, TaskSummary::success_rate);
                sums[i] += v;
                let _ = write!(out, " {v:>14.4}");
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<16}", "mean");
        for s in sums {
            let _ = write!(out, " {:>14.4}", s / tasks.len().max(1) as f64);
        }
        out.push('\n');
        out
    }

    /// Kinds on which `reports[a]` scores at least `reports[b]`.
    pub fn wins(&self, a: usize, b: usize, tasks: &[TaskKind]) -> usize {
        tasks
            .iter()
            .filter(|&&t| {
                let va = self.reports[a].task(t).map_or(0.0, TaskSummary::success_rate);
                let vb = self.reports[b].task(t).map_or(0.0, TaskSummary::success_rate);
                va >= vb
            })
            .count()
    }
}

/// Evaluate several models on identical episodes.
pub fn compare_models(sim: &Sim, models: &[(String, &Model)], suite: &Suite, opts: &EvalOptions) -> Result<Comparison> {
    let mut reports = Vec::new();
    for (label, m) in models {
        reports.push(evaluate(sim, m, label, suite, opts)?.0);
    }
    Ok(Comparison { seeds: suite.seeds_label(), reports })
}
