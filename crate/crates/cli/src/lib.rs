//! Batch scoring, advantage computation and simulation commands behind the
//! `emagrpo` binary. Each command is a plain function so tests can drive it
//! without spawning a process.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use emagrpo_core::normalize::{AdvantageEngine, EmaConfig, FilterReason, RolloutGroup, Scheme, StatsRegistry};
use emagrpo_core::protocol::{parse_response, TaskKind};
use emagrpo_core::rewards::{GroundTruth, RewardConfig, RewardError, Rewarder};
use emagrpo_core::scorer::{HttpScorer, HttpScorerConfig, MockScorer, Scorer};
use emagrpo_core::sim::{self, ExperimentConfig, RunReport};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_SCORER: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Input(String),
    #[error("invalid config {path}: {message}")]
    Config { path: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        EXIT_INPUT
    }
}

#[derive(Debug, Parser)]
#[command(name = "emagrpo", version, about = "Reward scoring and advantage normalisation for multi-task RL")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score JSONL responses against ground truth
    Score(ScoreArgs),
    /// Compute per-group advantages from scored rollouts
    Advantage(AdvantageArgs),
    /// Run the synthetic multi-task bandit experiment
    Simulate(SimulateArgs),
    /// Summarise a simulation CSV
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Output JSONL; stdout when omitted
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Reward-model base URL for open-ended QA and captions
    #[arg(long, env = "SCORER_URL")]
    pub scorer_url: Option<String>,
    #[arg(long, env = "SCORER_TIMEOUT_MS", default_value_t = 30_000)]
    pub scorer_timeout_ms: u64,
    /// Use the offline token-overlap scorer instead of a backend
    #[arg(long, conflicts_with = "scorer_url")]
    pub mock_scorer: bool,
}

#[derive(Debug, Clone, Args)]
pub struct AdvantageArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = Scheme::Ema)]
    pub scheme: Scheme,
    #[arg(long, default_value_t = 8)]
    pub group_size: usize,
    #[arg(long, default_value_t = 0.99)]
    pub beta: f64,
    /// Where to write the final per-task statistics
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Resume from a statistics checkpoint
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Keep constant groups instead of discarding them
    #[arg(long)]
    pub no_filter: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Experiment config (JSON); built-in default when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Per-step CSV; stdout when omitted
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Per-scheme summary JSON
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Run only this scheme
    #[arg(long)]
    pub scheme: Option<Scheme>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub group_size: Option<usize>,
    /// EMA decay [default: 0.99]
    #[arg(long)]
    pub beta: Option<f64>,
    /// KL penalty weight [default: 0.01]
    #[arg(long)]
    pub beta_kl: Option<f64>,
    /// Ratio clip range [default: 0.2]
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Parses and runs a command line, returning the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Score(a) => cmd_score(&a).map(|s| {
            eprintln!("{}", s.line());
            if s.unavailable > 0 {
                EXIT_SCORER
            } else {
                EXIT_OK
            }
        }),
        Command::Advantage(a) => cmd_advantage(&a).map(|s| {
            eprintln!(
                "{} groups: {} normalised, {} filtered, {} errors",
                s.groups, s.normalised, s.filtered, s.errors
            );
            EXIT_OK
        }),
        Command::Simulate(a) => cmd_simulate(&a).map(|reports| {
            for r in &reports {
                for t in &r.summary {
                    eprintln!(
                        "{:<7} {:<12} final_acc={:.4} mean|A|={:.4} filter_rate={:.4} sigma={:.4}",
                        r.scheme.as_str(),
                        t.name,
                        t.final_accuracy,
                        t.long_run_mean_abs_advantage,
                        t.filter_rate,
                        t.final_sigma
                    );
                }
            }
            EXIT_OK
        }),
        Command::Report(a) => cmd_report(&a).map(|_| EXIT_OK),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        e.exit_code()
    })
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|source| CliError::Write {
            path: p.to_path_buf(),
            source,
        })?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn write_err(path: Option<&Path>) -> impl Fn(io::Error) -> CliError + '_ {
    move |source| CliError::Write {
        path: path.map_or_else(|| PathBuf::from("<stdout>"), Path::to_path_buf),
        source,
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let read_err = |source| CliError::Read {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(read_err)?;
    BufReader::new(file).lines().collect::<Result<_, _>>().map_err(read_err)
}

// ---------------------------------------------------------------- score

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreInput {
    id: Value,
    task: TaskKind,
    response: String,
    ground_truth: Value,
    #[serde(default)]
    query: Option<String>,
    #[serde(default)]
    group: Option<Value>,
}

#[derive(Debug, Serialize)]
struct ScoreOutput {
    id: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    group: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    task: Option<TaskKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    r_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    r_format: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    r_total: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSummary {
    pub records: usize,
    pub errors: usize,
    /// Records that failed because the reward model could not be reached.
    pub unavailable: usize,
    pub mean_reward: BTreeMap<TaskKind, f64>,
}

impl ScoreSummary {
    pub fn line(&self) -> String {
        let means: Vec<String> = self.mean_reward.iter().map(|(t, m)| format!("{t}={m:.6}")).collect();
        format!(
            "scored {} records ({} errors, {} scorer unavailable); mean r_total: {}",
            self.records,
            self.errors,
            self.unavailable,
            if means.is_empty() { "-".to_string() } else { means.join(" ") }
        )
    }
}

enum Scored {
    Ok(ScoreOutput),
    Failed(ScoreOutput, bool),
}

fn score_line(line: &str, line_no: usize, rewarder: &Rewarder) -> Scored {
    let fail = |id: Value, msg: String, unavailable| {
        Scored::Failed(
            ScoreOutput {
                id,
                group: None,
                task: None,
                r_acc: None,
                r_format: None,
                r_total: None,
                error: Some(msg),
            },
            unavailable,
        )
    };
    let rec: ScoreInput = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => {
            let id = serde_json::from_str::<Value>(line)
                .ok()
                .and_then(|v| v.get("id").cloned())
                .unwrap_or_else(|| Value::from(format!("line {line_no}")));
            return fail(id, format!("line {line_no}: {e}"), false);
        }
    };
    let gt = match GroundTruth::from_json(rec.task, &rec.ground_truth, rec.query.as_deref()) {
        Ok(gt) => gt,
        Err(e) => return fail(rec.id, e.to_string(), false),
    };
    let parsed = parse_response(&rec.response, rec.task);
    match rewarder.total_reward(&parsed, &gt, rec.task) {
        Ok(r) => Scored::Ok(ScoreOutput {
            id: rec.id,
            group: rec.group,
            task: Some(rec.task),
            r_acc: Some(r.r_acc),
            r_format: Some(r.r_format),
            r_total: Some(r.r_total),
            error: None,
        }),
        Err(e) => {
            let unavailable = matches!(e, RewardError::ScoringUnavailable(_));
            fail(rec.id, e.to_string(), unavailable)
        }
    }
}

/// Scores every non-blank line of the input. Bad records become error
/// entries; output order follows input order.
pub fn cmd_score(args: &ScoreArgs) -> Result<ScoreSummary, CliError> {
    let lines = read_lines(&args.input)?;
    let http;
    let scorer: Option<&dyn Scorer> = if args.mock_scorer {
        Some(&MockScorer)
    } else if let Some(url) = &args.scorer_url {
        http = HttpScorer::new(HttpScorerConfig {
            timeout: std::time::Duration::from_millis(args.scorer_timeout_ms),
            ..HttpScorerConfig::new(url.clone())
        });
        Some(&http)
    } else {
        None
    };
    let rewarder = Rewarder::new(RewardConfig::default(), scorer);

    let scored: Vec<Scored> = lines
        .par_iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| score_line(l, i + 1, &rewarder))
        .collect();

    let mut summary = ScoreSummary::default();
    let mut sums: BTreeMap<TaskKind, (f64, usize)> = BTreeMap::new();
    let out_path = args.output.as_deref();
    let mut out = open_output(out_path)?;
    for s in &scored {
        summary.records += 1;
        let rec = match s {
            Scored::Ok(r) => {
                let e = sums.entry(r.task.expect("scored records carry a task")).or_default();
                e.0 += r.r_total.unwrap_or(0.0);
                e.1 += 1;
                r
            }
            Scored::Failed(r, unavailable) => {
                summary.errors += 1;
                summary.unavailable += usize::from(*unavailable);
                r
            }
        };
        let line = serde_json::to_string(rec).expect("output records serialise");
        writeln!(out, "{line}").map_err(write_err(out_path))?;
    }
    out.flush().map_err(write_err(out_path))?;
    summary.mean_reward = sums.into_iter().map(|(t, (s, n))| (t, s / n as f64)).collect();
    Ok(summary)
}

// ------------------------------------------------------------ advantage

#[derive(Debug, Deserialize)]
struct AdvantageInput {
    group: Value,
    task: TaskKind,
    r_total: f64,
    #[serde(default)]
    step: u64,
}

#[derive(Debug, Serialize)]
struct AdvantageOutput<'a> {
    step: u64,
    group: &'a Value,
    task: TaskKind,
    rewards: &'a [f64],
    advantages: Option<&'a [f64]>,
    filtered: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    filter_reason: Option<FilterReason>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AdvantageSummary {
    pub groups: usize,
    pub normalised: usize,
    pub filtered: usize,
    pub errors: usize,
}

struct PendingGroup {
    id: Value,
    task: TaskKind,
    rewards: Vec<f64>,
}

/// Groups scored rollouts by `(step, group)`, processes each step as one
/// batch, and writes one line per group plus the final statistics.
pub fn cmd_advantage(args: &AdvantageArgs) -> Result<AdvantageSummary, CliError> {
    let ema = EmaConfig {
        beta: args.beta,
        ..EmaConfig::default()
    };
    ema.validate().map_err(|e| CliError::Input(format!("--beta: {e}")))?;
    if args.group_size < 2 {
        return Err(CliError::Input("--group-size must be at least 2".into()));
    }

    let mut steps: BTreeMap<u64, Vec<PendingGroup>> = BTreeMap::new();
    for (i, line) in read_lines(&args.input)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: AdvantageInput = serde_json::from_str(line)
            .map_err(|e| CliError::Input(format!("{}:{}: {e}", args.input.display(), i + 1)))?;
        if !rec.r_total.is_finite() {
            return Err(CliError::Input(format!("{}:{}: non-finite r_total", args.input.display(), i + 1)));
        }
        let groups = steps.entry(rec.step).or_default();
        match groups.iter_mut().find(|g| g.id == rec.group) {
            Some(g) if g.task != rec.task => {
                return Err(CliError::Input(format!(
                    "group {} mixes tasks {} and {}",
                    rec.group, g.task, rec.task
                )))
            }
            Some(g) => g.rewards.push(rec.r_total),
            None => groups.push(PendingGroup {
                id: rec.group,
                task: rec.task,
                rewards: vec![rec.r_total],
            }),
        }
    }
    for g in steps.values().flatten() {
        if g.rewards.len() != args.group_size {
            return Err(CliError::Input(format!(
                "group {} has {} rollouts, expected {}",
                g.id,
                g.rewards.len(),
                args.group_size
            )));
        }
    }

    let mut engine = AdvantageEngine::new(args.scheme, ema);
    if args.no_filter {
        engine.degenerate_eps = 0.0;
    }
    if let Some(p) = &args.resume {
        let text = std::fs::read_to_string(p).map_err(|source| CliError::Read {
            path: p.clone(),
            source,
        })?;
        engine.registry =
            StatsRegistry::from_json(&text).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
    }

    let out_path = args.output.as_deref();
    let mut out = open_output(out_path)?;
    let mut summary = AdvantageSummary::default();
    for (step, groups) in steps {
        let ids: Vec<Value> = groups.iter().map(|g| g.id.clone()).collect();
        let batch = groups.into_iter().map(|g| RolloutGroup::new(g.task, g.rewards)).collect();
        for (id, o) in ids.iter().zip(engine.process_batch(batch)) {
            summary.groups += 1;
            if o.group.filtered {
                summary.filtered += 1;
            } else if o.error.is_some() {
                summary.errors += 1;
            } else {
                summary.normalised += 1;
            }
            let line = AdvantageOutput {
                step,
                group: id,
                task: o.group.task,
                rewards: &o.group.rewards,
                advantages: o.group.advantages.as_deref(),
                filtered: o.group.filtered,
                filter_reason: o.filter_reason,
                error: o.error.map(|e| e.to_string()),
            };
            writeln!(out, "{}", serde_json::to_string(&line).expect("serialisable"))
                .map_err(write_err(out_path))?;
        }
    }
    out.flush().map_err(write_err(out_path))?;

    if let Some(p) = &args.stats {
        std::fs::write(p, engine.registry.to_json()).map_err(|source| CliError::Write {
            path: p.clone(),
            source,
        })?;
    }
    Ok(summary)
}

// ------------------------------------------------------------- simulate

/// Reads an experiment config, reporting the failing field path on error.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|source| CliError::Read {
            path: path.to_path_buf(),
            source,
        })?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| CliError::Config {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

#[derive(Debug, Serialize)]
struct SchemeSummary<'a> {
    scheme: Scheme,
    steps: usize,
    tasks: &'a [sim::TaskSummary],
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<Vec<RunReport>, CliError> {
    let mut cfg = match &args.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = args.scheme {
        cfg.schemes = vec![s];
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(g) = args.group_size {
        cfg.group_size = g;
    }
    if let Some(b) = args.beta {
        cfg.ema.beta = b;
    }
    if let Some(b) = args.beta_kl {
        cfg.objective.beta_kl = b;
    }
    if let Some(e) = args.epsilon {
        cfg.objective.epsilon = e;
    }
    cfg.validate().map_err(|e| CliError::Config {
        path: e.path,
        message: e.message,
    })?;
    let reports = sim::run_all(&cfg).map_err(|e| CliError::Config {
        path: e.path,
        message: e.message,
    })?;

    let out_path = args.output.as_deref();
    let mut out = open_output(out_path)?;
    sim::write_csv(&reports, &mut out).map_err(write_err(out_path))?;
    out.flush().map_err(write_err(out_path))?;

    if let Some(p) = &args.summary {
        let s: Vec<SchemeSummary> = reports
            .iter()
            .map(|r| SchemeSummary {
                scheme: r.scheme,
                steps: r.steps,
                tasks: &r.summary,
            })
            .collect();
        let text = serde_json::to_string_pretty(&s).expect("summaries are finite");
        std::fs::write(p, text + "\n").map_err(|source| CliError::Write { path: p.clone(), source })?;
    }
    Ok(reports)
}

// --------------------------------------------------------------- report

#[derive(Debug, Deserialize)]
struct CsvRow {
    scheme: String,
    step: usize,
    task: String,
    kind: String,
    mean_reward: f64,
    ema_sigma: f64,
    mean_abs_advantage: f64,
    entropy: f64,
    filtered_groups: u32,
}

/// One line of `cmd_report` output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub scheme: String,
    pub task: String,
    pub kind: String,
    pub steps: usize,
    /// Mean reward over the last tenth of the run.
    pub final_reward: f64,
    /// Mean |A| over the second half of the run.
    pub mean_abs_advantage: f64,
    pub final_sigma: f64,
    pub final_entropy: f64,
    pub filtered_groups: u64,
}

/// Summarises a simulation CSV per scheme and task, in first-seen order.
pub fn cmd_report(args: &ReportArgs) -> Result<Vec<ReportRow>, CliError> {
    let file = File::open(&args.input).map_err(|source| CliError::Read {
        path: args.input.clone(),
        source,
    })?;
    let mut series: Vec<((String, String), Vec<CsvRow>)> = Vec::new();
    for (i, row) in csv::Reader::from_reader(file).deserialize::<CsvRow>().enumerate() {
        let row = row.map_err(|e| CliError::Input(format!("{} row {}: {e}", args.input.display(), i + 1)))?;
        let key = (row.scheme.clone(), row.task.clone());
        match series.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(row),
            None => series.push((key, vec![row])),
        }
    }
    let mean = |rows: &[CsvRow], f: fn(&CsvRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let report: Vec<ReportRow> = series
        .into_iter()
        .map(|((scheme, task), mut rows)| {
            rows.sort_by_key(|r| r.step);
            let n = rows.len();
            let last = &rows[n - 1];
            ReportRow {
                scheme,
                task,
                kind: last.kind.clone(),
                steps: n,
                final_reward: mean(&rows[n - (n / 10).max(1)..], |r| r.mean_reward),
                mean_abs_advantage: mean(&rows[n / 2..], |r| r.mean_abs_advantage),
                final_sigma: last.ema_sigma,
                final_entropy: last.entropy,
                filtered_groups: rows.iter().map(|r| u64::from(r.filtered_groups)).sum(),
            }
        })
        .collect();

    let out_path = args.output.as_deref();
    let mut w = csv::Writer::from_writer(open_output(out_path)?);
    for r in &report {
        w.serialize(r).map_err(|e| CliError::Input(e.to_string()))?;
    }
    w.flush().map_err(write_err(out_path))?;
    Ok(report)
}
