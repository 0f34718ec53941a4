//! The `tforge` command line.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::Value;

use crate::config::{env_overrides, resolve, AppConfig, ConfigError, Override, Resolved, Source};
use crate::eval::{self, ComparisonRow, EvalError, ImageRef, ReportMeta, SplitMetrics};
use crate::geometry::{BoundingBox, GeometricAnswer};
use crate::grpo::{self, FinalEval, AdvantageAudit, StepStats, GrpoError};
use crate::parser::{parse, SectionOrder};
use crate::reward::{RewardBreakdown, RewardEngine, RewardError};

pub const EXIT_OK: u8 = 0;
pub const EXIT_EMPTY: u8 = 1;
pub const EXIT_FATAL: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "tforge", version, about = "Concise-rationale reward scoring, toy GRPO training and segmentation evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML or JSON config file.
    #[arg(long, global = true, env = "TFORGE_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Section order for training, e.g. cAd, Acd, dcA, cdA.
    #[arg(long, global = true)]
    pub order: Option<String>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Treat the IoU gate as always open.
    #[arg(long, global = true)]
    pub no_gate: bool,
    /// Fix the similarity score at 1.
    #[arg(long, global = true)]
    pub no_sim: bool,
    /// Fix the conciseness score at 1.
    #[arg(long, global = true)]
    pub no_concise: bool,
    /// Drop the distillation term entirely.
    #[arg(long, global = true)]
    pub no_distill: bool,
    /// Brevity suffix text or preset (one-sentence, shorter-better).
    #[arg(long, global = true)]
    pub brevity: Option<String>,
    /// hashed-bow or external.
    #[arg(long, global = true)]
    pub embedder: Option<String>,
    #[arg(long, global = true)]
    pub embed_url: Option<String>,
    /// Use the built-in embedder when the external one fails.
    #[arg(long, global = true)]
    pub embed_fallback: bool,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Any config key, e.g. `--set train.kl=0.02`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score generations against ground truth; one reward breakdown per line.
    Score(ScoreArgs),
    /// Train the toy policy and write its run log and report.
    TrainToy,
    /// Compute benchmark metrics for a prediction file.
    Eval(EvalArgs),
    /// Compare two metrics reports split by split.
    Compare(CompareArgs),
    /// Print the effective config with the source of every key.
    PrintConfig,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// JSONL of {id, generation, gt?, gt_box?, image?}.
    pub input: PathBuf,
    /// JSONL of {id, gt | gt_box, image?} for records without ground truth.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Sections the format reward requires.
    #[arg(long, default_value = "cAd")]
    pub required_order: String,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSONL prediction records.
    pub predictions: PathBuf,
    /// A previous `metrics.json` to compare against.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub baseline: PathBuf,
    pub candidate: PathBuf,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Train(#[from] GrpoError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Input(String),
    /// Nothing to report; exits 1.
    #[error("{0}")]
    Empty(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Empty(_) | CliError::Eval(EvalError::EmptySplit(_)) => EXIT_EMPTY,
            _ => EXIT_FATAL,
        }
    }
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl GlobalArgs {
    /// Flag overrides in a fixed order; `--set` entries come last.
    pub fn overrides(&self) -> Result<Vec<Override>, ConfigError> {
        let flag = |k: &str, v: Value, name: &str| Override::new(k, v, Source::Flag(name.into()));
        let mut out = Vec::new();
        if let Some(s) = self.seed {
            let v = i64::try_from(s).map_err(|_| ConfigError::Invalid(format!("--seed {s} is too large")))?;
            out.push(flag("train.seed", Value::Integer(v), "--seed"));
        }
        if let Some(o) = &self.order {
            out.push(flag("train.order", Value::String(o.clone()), "--order"));
        }
        if let Some(n) = self.steps {
            out.push(flag("train.steps", Value::Integer(n as i64), "--steps"));
        }
        for (on, key, name) in [
            (self.no_gate, "reward.components.gate", "--no-gate"),
            (self.no_sim, "reward.components.sim", "--no-sim"),
            (self.no_concise, "reward.components.concise", "--no-concise"),
            (self.no_distill, "reward.components.distill", "--no-distill"),
        ] {
            if on {
                out.push(flag(key, Value::Boolean(false), name));
            }
        }
        if let Some(b) = &self.brevity {
            out.push(flag("prompt.brevity", Value::String(b.clone()), "--brevity"));
        }
        if let Some(e) = &self.embedder {
            out.push(flag("reward.embedding.kind", Value::String(e.clone()), "--embedder"));
        }
        if let Some(u) = &self.embed_url {
            out.push(flag("reward.embedding.url", Value::String(u.clone()), "--embed-url"));
        }
        if self.embed_fallback {
            out.push(flag("reward.embedding.fallback", Value::Boolean(true), "--embed-fallback"));
        }
        if let Some(t) = self.threads {
            out.push(flag("runtime.threads", Value::Integer(t as i64), "--threads"));
        }
        for s in &self.set {
            out.push(Override::parse_flag(s)?);
        }
        Ok(out)
    }

    pub fn resolve(&self, env: impl IntoIterator<Item = (String, String)>) -> Result<Resolved, ConfigError> {
        resolve(self.config.as_deref(), &env_overrides(env), &self.overrides()?)
    }
}

/// Runs a parsed command line against the given environment, writing
/// normal output to `out`.
pub fn run(
    cli: &Cli,
    env: impl IntoIterator<Item = (String, String)>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let resolved = cli.global.resolve(env)?;
    let cfg = &resolved.config;
    if cfg.runtime.threads > 0 {
        // Fails only when the pool already exists, e.g. on a second call in
        // the same process; results do not depend on the thread count.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.runtime.threads)
            .build_global();
    }
    let wr = |e: std::io::Error| CliError::Io { path: "<stdout>".into(), source: e };
    match &cli.command {
        Command::PrintConfig => out.write_all(resolved.render()?.as_bytes()).map_err(wr),
        Command::Score(a) => cmd_score(a, cfg, out),
        Command::TrainToy => cmd_train_toy(cli.global.out_dir.as_deref(), cfg, out),
        Command::Eval(a) => cmd_eval(a, cli.global.out_dir.as_deref(), cfg, out),
        Command::Compare(a) => cmd_compare(a, cli.global.out_dir.as_deref(), out),
    }
}

const DEFAULT_OUT: &str = "tforge-out";

#[derive(Debug, Clone, Deserialize)]
struct ScoreRecord {
    id: String,
    generation: String,
    #[serde(default)]
    gt: Option<GeometricAnswer>,
    #[serde(default)]
    gt_box: Option<BoundingBox>,
    #[serde(default)]
    image: Option<ImageRef>,
}

#[derive(Debug, Clone, Deserialize)]
struct GtRecord {
    id: String,
    #[serde(default)]
    gt: Option<GeometricAnswer>,
    #[serde(default)]
    gt_box: Option<BoundingBox>,
    #[serde(default)]
    image: Option<ImageRef>,
}

#[derive(Debug, Serialize)]
struct ScoreLine<'a> {
    id: &'a str,
    #[serde(flatten)]
    breakdown: &'a RewardBreakdown,
}

fn jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(Vec<T>, usize), CliError> {
    let file = fs::File::open(path).map_err(io_at(path))?;
    let mut items = Vec::new();
    let mut skipped = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_at(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(v) => items.push(v),
            Err(e) => {
                log::warn!("{}:{}: skipped: {e}", path.display(), i + 1);
                skipped += 1;
            }
        }
    }
    Ok((items, skipped))
}

fn cmd_score(a: &ScoreArgs, cfg: &AppConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let required: SectionOrder = a
        .required_order
        .parse()
        .map_err(|e| CliError::Input(format!("--required-order: {e}")))?;
    let engine = RewardEngine::from_config(cfg.reward.clone())?;
    let (records, mut skipped) = jsonl::<ScoreRecord>(&a.input)?;
    let mut gts: HashMap<String, GtRecord> = HashMap::new();
    if let Some(p) = &a.gt {
        let (list, s) = jsonl::<GtRecord>(p)?;
        skipped += s;
        gts.extend(list.into_iter().map(|g| (g.id.clone(), g)));
    }

    let mut ready = Vec::with_capacity(records.len());
    for r in records {
        let side = gts.get(&r.id);
        let gt = r
            .gt
            .clone()
            .or_else(|| r.gt_box.map(GeometricAnswer::from_box))
            .or_else(|| side.and_then(|g| g.gt.clone().or_else(|| g.gt_box.map(GeometricAnswer::from_box))));
        let image = r.image.or_else(|| side.and_then(|g| g.image));
        match gt {
            Some(gt) => ready.push((r, gt, image)),
            None => {
                log::warn!("{}: skipped: no ground truth", r.id);
                skipped += 1;
            }
        }
    }
    let mut scored: Vec<(String, RewardBreakdown)> = ready
        .par_iter()
        .map(|(r, gt, image)| {
            let img = image.map(|i| crate::geometry::ImageSize { width: i.width, height: i.height });
            (r.id.clone(), engine.total_reward(&parse(&r.generation), gt, img, &required))
        })
        .collect();
    scored.sort_by(|x, y| x.0.cmp(&y.0));

    let mut buf = Vec::new();
    for (id, b) in &scored {
        serde_json::to_writer(&mut buf, &ScoreLine { id, breakdown: b }).expect("serializable");
        buf.push(b'\n');
    }
    match &a.out {
        Some(p) => fs::write(p, &buf).map_err(io_at(p))?,
        None => out.write_all(&buf).map_err(io_at(Path::new("<stdout>")))?,
    }
    let diags: usize = scored.iter().map(|(_, b)| b.diagnostics.len()).sum();
    let n = scored.len().max(1) as f64;
    let mean = |f: fn(&RewardBreakdown) -> f64| scored.iter().map(|(_, b)| f(b)).sum::<f64>() / n;
    log::info!("scored {} records", scored.len());
    eprintln!(
        "scored {} records, skipped {skipped} lines, {diags} diagnostics, mean r_task {:.4}, mean r_train {:.4}",
        scored.len(),
        mean(|b| b.r_task),
        mean(|b| b.r_train),
    );
    if scored.is_empty() {
        return Err(CliError::Empty("no records scored".into()));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainReport<'a> {
    train: &'a grpo::TrainConfig,
    reward: &'a crate::reward::RewardConfig,
    last_step: Option<&'a StepStats>,
    final_eval: &'a FinalEval,
    advantages: &'a AdvantageAudit,
}

fn cmd_train_toy(out_dir: Option<&Path>, cfg: &AppConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let dir = out_dir.unwrap_or(Path::new(DEFAULT_OUT));
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    let report = grpo::run_experiment(&cfg.train, &cfg.reward)?;
    let log_path = dir.join("run_log.jsonl");
    report.write_run_log(&log_path).map_err(io_at(&log_path))?;
    let summary = TrainReport {
        train: &cfg.train,
        reward: &cfg.reward,
        last_step: report.steps.last(),
        final_eval: &report.final_eval,
        advantages: &report.advantages,
    };
    let path = dir.join("report.json");
    let mut text = serde_json::to_string_pretty(&summary).expect("serializable");
    text.push('\n');
    fs::write(&path, text).map_err(io_at(&path))?;
    let inf = &report.final_eval.inference;
    let tr = &report.final_eval.training;
    writeln!(
        out,
        "order {} steps {}: inference tau_c {:.2} tokens, success {:.3}; training tau_c {:.2}, tau_d {:.2}, success {:.3}",
        cfg.train.order,
        report.steps.len(),
        inf.mean_len_c,
        inf.success_rate,
        tr.mean_len_c,
        tr.mean_len_d,
        tr.success_rate,
    )
    .map_err(io_at(Path::new("<stdout>")))
}

#[derive(Debug, Deserialize)]
struct MetricsFile {
    splits: Vec<SplitMetrics>,
}

fn read_metrics(path: &Path) -> Result<Vec<SplitMetrics>, CliError> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    let m: MetricsFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(m.splits)
}

fn comparisons(base: &[SplitMetrics], cand: &[SplitMetrics]) -> Result<Vec<ComparisonRow>, CliError> {
    let mut rows = Vec::new();
    for c in cand {
        if let Some(b) = base.iter().find(|b| b.split == c.split) {
            rows.push(eval::compare(b, c)?);
        }
    }
    Ok(rows)
}

fn print_rows(rows: &[ComparisonRow], out: &mut dyn Write) -> Result<(), CliError> {
    for r in rows {
        writeln!(
            out,
            "{}: {} (tokens {} -> {}, cIoU {:.1} -> {:.1}, gIoU {})",
            r.split,
            r.summary(),
            r.baseline_tokens,
            r.candidate_tokens,
            r.baseline_ciou * 100.0,
            r.candidate_ciou * 100.0,
            ComparisonRow::delta_text(r.delta_giou),
        )
        .map_err(io_at(Path::new("<stdout>")))?;
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs, out_dir: Option<&Path>, cfg: &AppConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let engine = RewardEngine::from_config(cfg.reward.clone())?;
    let ing = eval::ingest(&a.predictions)?;
    if ing.records.is_empty() {
        return Err(CliError::Empty(format!(
            "{}: no valid records ({} skipped)",
            a.predictions.display(),
            ing.skipped.len()
        )));
    }
    let scores = eval::score_all(&ing.records, &engine)?;
    let metrics = eval::splits(&scores)
        .iter()
        .map(|s| eval::aggregate(&scores, s))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = match &a.baseline {
        Some(p) => comparisons(&read_metrics(p)?, &metrics)?,
        None => Vec::new(),
    };
    let meta = ReportMeta {
        brevity: Some(cfg.prompt.brevity_text()),
        tokenizer: serde_json::to_value(cfg.reward.tokenizer)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default(),
        records: ing.records.len(),
        skipped_lines: ing.skipped.len(),
    };
    let dir = out_dir.unwrap_or(Path::new(DEFAULT_OUT));
    eval::emit_report(dir, &metrics, &rows, &scores, &meta)?;

    let w = io_at(Path::new("<stdout>"));
    for m in &metrics {
        writeln!(
            out,
            "{}: n {} cIoU {} gIoU {} mean_tokens {} median_tokens {}",
            m.split, m.n, m.ciou, m.giou, m.mean_tokens, m.median_tokens
        )
        .map_err(&w)?;
    }
    print_rows(&rows, out)?;
    if !ing.skipped.is_empty() {
        eprintln!("skipped {} invalid lines", ing.skipped.len());
    }
    if let Some(m) = metrics.iter().find(|m| !m.diagnostics.is_empty()) {
        return Err(CliError::Empty(format!("split {}: {}", m.split, m.diagnostics.join("; "))));
    }
    Ok(())
}

fn cmd_compare(a: &CompareArgs, out_dir: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let rows = comparisons(&read_metrics(&a.baseline)?, &read_metrics(&a.candidate)?)?;
    if rows.is_empty() {
        return Err(CliError::Empty("no split appears in both reports".into()));
    }
    print_rows(&rows, out)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
        eval::write_comparison(&dir.join("comparison.csv"), &rows)?;
    }
    Ok(())
}
