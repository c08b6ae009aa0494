//! Command-line front end.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::check::{self, Fault, Level};
use crate::codec::token_name;
use crate::eval::{compare_models, evaluate, EvalOptions, MetricReport, Suite, COMPARISON_TASKS};
use crate::model::{route, ModalityTag, Model, ModelConfig};
use crate::sim::{gen_dataset, EpisodeTrace, Sim, TaskKind, TaskMix};
use crate::train::checkpoint::{load_model_any, read_file, write_file};
use crate::train::{Checkpoint, Stage, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVARIANT: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_THRESHOLD: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Invariant(String),
    #[error("{0}")]
    Threshold(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Invariant(_) => EXIT_INVARIANT,
            CliError::Threshold(_) => EXIT_THRESHOLD,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "samoe", version, about = "Train, evaluate and inspect modality-routed duplex models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a scripted dataset and its manifest.
    GenData(GenDataArgs),
    /// Run one training stage from a config file or checkpoint.
    Train(TrainArgs),
    /// Evaluate a model on held-out episodes.
    Eval(EvalArgs),
    /// Evaluate several models on identical episodes.
    Compare(CompareArgs),
    /// Run the numerical and codec invariant suites.
    Check(CheckArgs),
    /// Pretty-print one tick of a saved trace.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Comma-separated TASK=weight pairs; all tasks equally weighted if omitted.
    #[arg(long)]
    pub task_mix: Option<String>,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset file; the manifest goes next to it with a `.manifest` suffix.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, required_unless_present = "resume")]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Output directory for checkpoints, the final model and the CSV log.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `init.speech` from the config.
    #[arg(long)]
    pub init_speech: Option<PathBuf>,
    /// Overrides `init.action` from the config.
    #[arg(long)]
    pub init_action: Option<PathBuf>,
    /// Write an intermediate checkpoint every N steps.
    #[arg(long)]
    pub save_every: Option<u64>,
    /// Stop (and checkpoint) once this step is reached.
    #[arg(long)]
    pub stop_after: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug)]
pub struct SuiteArgs {
    /// Comma-separated task kinds, or `all`.
    #[arg(long, default_value = "all")]
    pub suite: String,
    /// Inclusive range `a..b` or a comma list.
    #[arg(long, default_value = "1..100")]
    pub seeds: String,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Sampling temperature; 0 is greedy.
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Force the text stream to `<silence>`.
    #[arg(long)]
    pub silent_text: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub suite: SuiteArgs,
    /// Structured text report; a CSV with the same stem is written alongside.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Directory for one trace file per episode.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    /// Label used in the report; defaults to the file stem.
    #[arg(long)]
    pub label: Option<String>,
    /// Exit 3 when the duplex thresholds are not met.
    #[arg(long)]
    pub assert_thresholds: bool,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// `label=path` entries, comma-separated or repeated.
    #[arg(long, required = true, value_delimiter = ',')]
    pub models: Vec<String>,
    /// Comma-separated task kinds; defaults to MANIP,QA,CONTEXT_VQA,DEFECTIVE.
    #[arg(long)]
    pub suite: Option<String>,
    #[arg(long, default_value = "1..100")]
    pub seeds: String,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    #[arg(long, default_value = "fast")]
    pub level: Level,
    #[arg(long, default_value = "none", hide = true)]
    pub inject_fault: Fault,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub tick: usize,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes()).map_err(usage)
}

fn load_model(path: &Path) -> Result<Model> {
    let bytes = read_file(path).map_err(usage)?;
    load_model_any(&bytes).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Run a parsed command, writing human output to `out`.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Compare(a) => compare(a, out),
        Command::Check(a) => check_cmd(a, out),
        Command::Inspect(a) => inspect(a, out),
    }
}

fn emit(out: &mut dyn std::io::Write, s: &str) -> Result<()> {
    out.write_all(s.as_bytes()).map_err(usage)
}

pub fn parse_mix(s: &str) -> Result<TaskMix> {
    let mut weights = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| usage(format!("task mix entry {part:?} is not TASK=weight")))?;
        let task: TaskKind = k.trim().parse().map_err(usage)?;
        let w: f64 = v.trim().parse().map_err(|_| usage(format!("task mix weight {v:?} is not a number")))?;
        weights.push((task, w));
    }
    TaskMix::new(weights).map_err(usage)
}

fn gen_data(a: GenDataArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let mix = match &a.task_mix {
        Some(s) => parse_mix(s)?,
        None => TaskMix::uniform(&TaskKind::ALL),
    };
    let sim = Sim::for_model(&ModelConfig::default()).map_err(usage)?;
    let ds = gen_dataset(&sim, &mix, a.n, a.seed).map_err(usage)?;
    write_text(&a.out, &ds.to_text())?;
    let mut manifest = a.out.clone().into_os_string();
    manifest.push(".manifest");
    write_text(Path::new(&manifest), &ds.manifest())?;
    let mut s = String::new();
    for (t, n) in ds.counts() {
        let _ = writeln!(s, "{t} {n}");
    }
    let _ = writeln!(s, "total {}", a.n);
    emit(out, &s)
}

fn stage_inputs(c: &TrainConfig, a: &TrainArgs) -> Result<(Option<Model>, Option<Model>)> {
    let pick = |flag: &Option<PathBuf>, key: &Option<String>| flag.clone().or_else(|| key.as_ref().map(PathBuf::from));
    let speech = pick(&a.init_speech, &c.init_speech);
    let action = pick(&a.init_action, &c.init_action);
    let need = |p: Option<PathBuf>, what: &str| -> Result<Model> {
        let p = p.ok_or_else(|| usage(format!("stage {} needs a {what} checkpoint (init.{what})", c.stage.name())))?;
        if !p.exists() {
            return Err(usage(format!("stage {} needs the {what} checkpoint {}", c.stage.name(), p.display())));
        }
        load_model(&p)
    };
    let opt = |p: Option<PathBuf>| -> Result<Option<Model>> { p.map(|p| load_model(&p)).transpose() };
    Ok(match c.stage {
        Stage::ExpertSpeech => (None, None),
        Stage::ExpertAction => (opt(speech)?, None),
        Stage::JointSamoe => (Some(need(speech, "speech")?), Some(need(action, "action")?)),
        Stage::DenseBaseline => match c.dense_init {
            crate::train::DenseInit::FromSpeech => (Some(need(speech, "speech")?), None),
            crate::train::DenseInit::FromAction => (None, Some(need(action, "action")?)),
            crate::train::DenseInit::Scratch => (None, None),
        },
    })
}

pub const LOG_HEADER: &str = "step,loss,lr,grad_norm,targets";

fn train(a: TrainArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(p) => Trainer::from_checkpoint(Checkpoint::load(p).map_err(usage)?).map_err(usage)?,
        None => {
            let path = a.config.as_ref().ok_or_else(|| usage("--config or --resume is required"))?;
            let c = TrainConfig::from_text(&read_text(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            let (speech, action) = stage_inputs(&c, &a)?;
            Trainer::new(c, speech.as_ref(), action.as_ref()).map_err(usage)?
        }
    };
    trainer.jobs = a.jobs.max(1);
    fs::create_dir_all(&a.out).map_err(|e| usage(format!("{}: {e}", a.out.display())))?;
    let stop = a.stop_after.unwrap_or(u64::MAX).min(trainer.config.steps);
    let mut log = format!("{LOG_HEADER}\n");
    let mut failure = None;
    while trainer.step < stop {
        match trainer.train_step() {
            Ok(s) => {
                let _ = writeln!(log, "{},{:?},{:?},{:?},{}", s.step, s.loss, s.lr, s.grad_norm, s.targets);
                if s.step % 100 == 0 || s.step == stop {
                    log::info!("step {} loss {:.5} lr {:.2e}", s.step, s.loss, s.lr);
                }
                if a.save_every.is_some_and(|k| k > 0 && s.step % k == 0) {
                    trainer.checkpoint().save(&a.out.join(format!("step-{}.ckpt", s.step))).map_err(usage)?;
                }
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    write_text(&a.out.join("log.csv"), &log)?;
    if let Some(e) = failure {
        return Err(CliError::Invariant(format!("training stopped: {e}")));
    }
    trainer.checkpoint().save(&a.out.join("checkpoint.ckpt")).map_err(usage)?;
    write_file(&a.out.join("model.samo"), &crate::model::container::save_model(&trainer.model)).map_err(usage)?;
    emit(
        out,
        &format!(
            "stage={} step={} of {} out={}\n",
            trainer.config.stage.name(),
            trainer.step,
            trainer.config.steps,
            a.out.display()
        ),
    )
}

fn suite_of(tasks: &str, seeds: &str) -> Result<Suite> {
    let tasks = if tasks.eq_ignore_ascii_case("all") { TaskKind::ALL.to_vec() } else { Suite::parse_tasks(tasks).map_err(usage)? };
    Ok(Suite::new(tasks, Suite::parse_seeds(seeds).map_err(usage)?))
}

fn label_of(path: &Path) -> String {
    path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned())
}

/// Lines in `- want` / `+ got` form for every failed threshold.
pub fn threshold_diff(r: &MetricReport) -> Option<String> {
    let mut s = String::new();
    for (name, value, bound, pass) in r.thresholds() {
        if !pass {
            let rel = if name == "swa_qa_vs_solo" { "|d| <=" } else { ">=" };
            let _ = writeln!(s, "- {name} {rel} {bound:.4}\n+ {name} = {value:.4}");
        }
    }
    (!s.is_empty()).then_some(s)
}

fn eval(a: EvalArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let model = load_model(&a.model)?;
    let sim = Sim::for_model(&model.config).map_err(usage)?;
    let suite = suite_of(&a.suite.suite, &a.suite.seeds)?;
    let opts = EvalOptions {
        jobs: a.suite.jobs,
        temperature: a.suite.temperature as _,
        seed: a.suite.seed,
        silent_text: a.suite.silent_text,
        ..EvalOptions::default()
    };
    let label = a.label.clone().unwrap_or_else(|| label_of(&a.model));
    let (report, traces) = evaluate(&sim, &model, &label, &suite, &opts).map_err(usage)?;
    let text = report.to_text();
    if let Some(p) = &a.report {
        write_text(p, &text)?;
        write_text(&p.with_extension("csv"), &report.to_csv())?;
    }
    if let Some(dir) = &a.traces {
        fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
        for t in &traces {
            write_text(&dir.join(format!("{}-{}.trace", t.task, t.seed)), &t.to_text())?;
        }
    }
    emit(out, &text)?;
    if a.assert_thresholds {
        if let Some(d) = threshold_diff(&report) {
            emit(out, &d)?;
            return Err(CliError::Threshold("acceptance thresholds not met".into()));
        }
        emit(out, "thresholds: all met\n")?;
    }
    Ok(())
}

fn compare(a: CompareArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let mut loaded = Vec::new();
    for m in &a.models {
        let (label, path) = match m.split_once('=') {
            Some((l, p)) => (l.to_string(), PathBuf::from(p)),
            None => (label_of(Path::new(m)), PathBuf::from(m)),
        };
        loaded.push((label, load_model(&path)?));
    }
    let first = &loaded[0].1;
    let sim = Sim::for_model(&first.config).map_err(usage)?;
    let tasks = match &a.suite {
        Some(s) => Suite::parse_tasks(s).map_err(usage)?,
        None => COMPARISON_TASKS.to_vec(),
    };
    let suite = Suite::new(tasks.clone(), Suite::parse_seeds(&a.seeds).map_err(usage)?);
    let refs: Vec<(String, &Model)> = loaded.iter().map(|(l, m)| (l.clone(), m)).collect();
    let opts = EvalOptions { jobs: a.jobs, ..EvalOptions::default() };
    let cmp = compare_models(&sim, &refs, &suite, &opts).map_err(usage)?;
    let table = cmp.table(&tasks);
    if let Some(p) = &a.report {
        let mut full = table.clone();
        for r in &cmp.reports {
            full.push('\n');
            full.push_str(&r.to_text());
        }
        write_text(p, &full)?;
        write_text(&p.with_extension("csv"), &cmp.to_csv())?;
    }
    emit(out, &table)
}

fn check_cmd(a: CheckArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let mut failed = Vec::new();
    let suites: [fn(Level, Fault) -> check::Outcome; 6] = [
        |l, _| check::tied_equivalence(l),
        check::streaming_equivalence,
        |l, _| check::gradient_check(l),
        |_, _| check::lora_contracts(),
        |l, _| check::codec_round_trip(l),
        |_, _| check::truncation_census(),
    ];
    for f in suites {
        let o = f(a.level, a.inject_fault);
        emit(out, &format!("{o}\n"))?;
        let _ = out.flush();
        if !o.pass {
            failed.push(o.name);
        }
    }
    if failed.is_empty() {
        emit(out, "all invariants hold\n")
    } else {
        Err(CliError::Invariant(format!("failed: {}", failed.join(", "))))
    }
}

fn segment_line(s: &mut String, label: &str, tag: ModalityTag, ids: &[usize], names: &dyn Fn(usize) -> String) {
    let routed = route(tag).name();
    let toks = if ids.is_empty() { "-".to_string() } else { ids.iter().map(|&i| names(i)).collect::<Vec<_>>().join(" ") };
    let _ = writeln!(s, "  {label:<7} {:<11} -> {routed:<13} {toks}", tag.to_string());
}

/// Human-readable rendering of one tick of a trace.
pub fn inspect_text(trace: &EpisodeTrace, tick: usize) -> std::result::Result<String, String> {
    let n = trace.records.len();
    let r = trace
        .records
        .iter()
        .find(|r| r.tick == tick)
        .ok_or_else(|| format!("tick {tick} is out of range: trace has {n} ticks (0..{})", n.saturating_sub(1)))?;
    let sim = Sim::for_model(&ModelConfig::default()).map_err(|e| e.to_string())?;
    let w = &sim.words;
    let layout = w.layout().clone();
    let names = move |id: usize| if id < layout.total() { w.name(id) } else { token_name(&layout, id) };
    let mut s = format!(
        "episode task={} seed={} mode={} tick={tick}/{n}\nstate {}\nsegments:\n",
        trace.task,
        trace.seed,
        trace.mode.name(),
        r.hash
    );
    segment_line(&mut s, "speech", ModalityTag::SpeechIn, &r.speech, &names);
    if r.images.is_empty() {
        segment_line(&mut s, "image", ModalityTag::ImageIn, &[], &names);
    }
    for img in &r.images {
        segment_line(&mut s, "image", ModalityTag::ImageIn, img, &names);
    }
    segment_line(&mut s, "text", ModalityTag::TextOut, &r.text, &names);
    segment_line(&mut s, "action", ModalityTag::ActionOut, &r.action, &names);
    let events: Vec<&str> = r.events.iter().map(|e| e.name()).collect();
    let _ = writeln!(s, "events: {}", if events.is_empty() { "-".into() } else { events.join(" ") });
    let _ = writeln!(s, "flags: {}", if r.flags.is_empty() { "-".into() } else { r.flags.join(" ") });
    Ok(s)
}

fn inspect(a: InspectArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let trace = EpisodeTrace::parse(&read_text(&a.trace)?).map_err(usage)?;
    let s = inspect_text(&trace, a.tick).map_err(usage)?;
    emit(out, &s)
}

/// Parse process arguments and run; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(cli, &mut lock) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = lock.flush();
            eprintln!("error: {e}");
            e.code()
        }
    }
}
