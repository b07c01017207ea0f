//! `si-agent`: optimize, evaluate, compare, and report on human-readable
//! system instructions.
//!
//! Exit statuses: 0 success, 1 usage/input error, 2 aborted run.

use std::io::{BufRead, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};

use si_agent_cli::compare::{build_comparison, classify_input, EvaluateReport, PerTaskScore};
use si_agent_cli::report::write_reports;
use si_agent_cli::{
    fmt_float, load_config, load_config_dataset, parse_label_choice, parse_weights, AppConfig,
    LabelChoice,
};
use si_agent_core::eval::readability::readability_stats;
use si_agent_core::eval::{judge, EvalOptions, EvalProviders};
use si_agent_core::{
    evaluate_si, run_optimization, ChatProvider, HttpProvider, LoopError, Origin, ProviderSet,
    RunOptions, SiCandidate, Split, Strategy,
};

#[derive(Parser)]
#[command(
    name = "si-agent",
    version,
    about = "Generate and tune human-readable system instructions via a feedback loop"
)]
struct Cli {
    /// JSON config file (dataset path + run settings)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the run seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (run dir for optimize, report dir for report/compare)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the iteration cap
    #[arg(long = "max-iters", global = true)]
    max_iters: Option<u32>,

    /// Override the refinement strategy
    #[arg(long, global = true, value_parser = ["llm", "evolutionary", "heuristic"])]
    strategy: Option<String>,

    /// Override the fitness weights, e.g. perf=0.7,read=0.3
    #[arg(long, global = true)]
    weights: Option<String>,

    /// Evaluate with an empty system instruction (zero-shot baseline)
    #[arg(long = "zero-shot", global = true)]
    zero_shot: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the optimization loop and write a run directory
    Optimize {
        /// Continue from the out dir's checkpoint, appending to its log
        #[arg(long)]
        resume: bool,
    },
    /// Score a fixed SI on a whole dataset split
    Evaluate {
        /// File containing the SI text (omit with --zero-shot)
        #[arg(long)]
        si: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
        /// Also write a JSON report consumable by `compare`
        #[arg(long)]
        json: Option<PathBuf>,
        /// Method label used in reports (defaults to the SI file stem)
        #[arg(long)]
        label: Option<String>,
    },
    /// Compare run dirs, evaluate reports, and external baseline tables
    Compare {
        /// Two or more inputs: run directories or JSON files
        inputs: Vec<PathBuf>,
        /// Bootstrap resamples for significance tests
        #[arg(long, default_value_t = 1000)]
        bootstrap: usize,
    },
    /// Emit learning_curve.csv, tradeoff.csv, and report.md for a run dir
    Report { run_dir: PathBuf },
    /// Record a human preference between two SI texts
    Label {
        /// File with the first SI
        #[arg(long)]
        a: PathBuf,
        /// File with the second SI
        #[arg(long)]
        b: PathBuf,
        /// Candidate id recorded for the first SI (defaults to the file stem)
        #[arg(long)]
        id_a: Option<String>,
        /// Candidate id recorded for the second SI (defaults to the file stem)
        #[arg(long)]
        id_b: Option<String>,
        /// Labels file to append to
        #[arg(long, default_value = "labels.jsonl")]
        labels_file: PathBuf,
    },
    /// One-off SI readability scoring (formulaic, plus judge when configured)
    Judge {
        /// File containing the SI text
        #[arg(long)]
        si: PathBuf,
    },
}

/// `println!` that survives a closed stdout (e.g. piping into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 1,
        error: error.into(),
    }
}

fn aborted(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        error: error.into(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1u8,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.code)
        }
    }
}

fn load_and_override(cli: &Cli) -> Result<(PathBuf, AppConfig)> {
    let config_path = cli
        .config
        .clone()
        .ok_or_else(|| anyhow!("--config PATH is required for this command"))?;
    let mut app = load_config(&config_path)?;
    if let Some(seed) = cli.seed {
        app.run.seed = seed;
    }
    if let Some(max_iters) = cli.max_iters {
        app.run.max_iterations = max_iters;
    }
    if let Some(strategy) = &cli.strategy {
        app.run.strategy = match strategy.as_str() {
            "llm" => Strategy::Llm,
            "evolutionary" => Strategy::Evolutionary,
            _ => Strategy::Heuristic,
        };
    }
    if let Some(weights) = &cli.weights {
        app.run.weights = parse_weights(weights)?;
    }
    // role provider specs may carry the model ids
    if app.run.follower.model.is_none() {
        app.run.follower.model = app.run.providers.follower.as_ref().map(|s| s.model.clone());
    }
    if app.run.judge.model.is_none() {
        app.run.judge.model = app.run.providers.judge.as_ref().map(|s| s.model.clone());
    }
    Ok((config_path, app))
}

struct BuiltProviders {
    instructor: Option<HttpProvider>,
    follower: Option<HttpProvider>,
    judge: Option<HttpProvider>,
}

impl BuiltProviders {
    fn build(app: &AppConfig) -> Result<Self> {
        let make = |spec: &Option<si_agent_core::ProviderSpec>| -> Result<Option<HttpProvider>> {
            match spec {
                Some(spec) => Ok(Some(HttpProvider::from_spec(spec)?)),
                None => Ok(None),
            }
        };
        Ok(Self {
            instructor: make(&app.run.providers.instructor)?,
            follower: make(&app.run.providers.follower)?,
            judge: make(&app.run.providers.judge)?,
        })
    }

    fn set(&self) -> ProviderSet<'_> {
        ProviderSet {
            instructor: self.instructor.as_ref().map(|p| p as &dyn ChatProvider),
            follower: self.follower.as_ref().map(|p| p as &dyn ChatProvider),
            judge: self.judge.as_ref().map(|p| p as &dyn ChatProvider),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Optimize { resume } => cmd_optimize(&cli, *resume),
        Command::Evaluate {
            si,
            split,
            json,
            label,
        } => cmd_evaluate(
            &cli,
            si.as_deref(),
            split,
            json.as_deref(),
            label.as_deref(),
        ),
        Command::Compare { inputs, bootstrap } => cmd_compare(&cli, inputs, *bootstrap),
        Command::Report { run_dir } => cmd_report(&cli, run_dir),
        Command::Label {
            a,
            b,
            id_a,
            id_b,
            labels_file,
        } => cmd_label(a, b, id_a.as_deref(), id_b.as_deref(), labels_file),
        Command::Judge { si } => cmd_judge(&cli, si),
    }
}

fn cmd_optimize(cli: &Cli, resume: bool) -> Result<(), Failure> {
    let (config_path, app) = load_and_override(cli).map_err(usage)?;
    let dataset = load_config_dataset(&config_path, &app).map_err(usage)?;
    let providers = BuiltProviders::build(&app).map_err(usage)?;
    let out_dir = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/seed-{}", app.run.seed)));

    let mut best_so_far = f64::MIN;
    let mut tokens_so_far = 0u64;
    let mut progress = |record: &si_agent_core::RunRecord| {
        for feedback in &record.feedback {
            best_so_far = best_so_far.max(feedback.scalar);
        }
        tokens_so_far += record.usage.prompt_tokens + record.usage.completion_tokens;
        let val = record
            .val
            .map(|v| format!(" val {}", fmt_float(v.scalar)))
            .unwrap_or_default();
        say!(
            "iter {} best {}{} tokens {}",
            record.iteration,
            fmt_float(best_so_far),
            val,
            tokens_so_far
        );
    };

    let result = run_optimization(
        &app.run,
        &dataset,
        &providers.set(),
        RunOptions {
            out_dir: out_dir.clone(),
            resume,
            progress: Some(&mut progress),
        },
    )
    .map_err(|e| match e {
        LoopError::Aborted { .. } => aborted(e),
        other => usage(other),
    })?;

    say!(
        "stopped: {} after {} iterations",
        result.stop.reason,
        result.state.iteration
    );
    if let Some(scalar) = result.best_scalar {
        say!("best scalar: {}", fmt_float(scalar));
    }
    say!("run dir: {}", result.run_dir.display());
    say!("best SI: {}", result.run_dir.join("best_si.txt").display());
    Ok(())
}

fn parse_split(split: &str) -> Split {
    match split {
        "train" => Split::Train,
        "val" => Split::Val,
        _ => Split::Test,
    }
}

fn cmd_evaluate(
    cli: &Cli,
    si_file: Option<&Path>,
    split: &str,
    json_out: Option<&Path>,
    label: Option<&str>,
) -> Result<(), Failure> {
    let (config_path, app) = load_and_override(cli).map_err(usage)?;
    let dataset = load_config_dataset(&config_path, &app).map_err(usage)?;

    let (si_text, default_label) = if cli.zero_shot {
        (String::new(), "zero-shot".to_string())
    } else {
        let path =
            si_file.ok_or_else(|| usage(anyhow!("--si FILE is required (or pass --zero-shot)")))?;
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read SI file {}", path.display()))
            .map_err(usage)?;
        if text.trim().is_empty() {
            return Err(usage(anyhow!(
                "SI file {} is empty; use --zero-shot for the empty baseline",
                path.display()
            )));
        }
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "manual".to_string());
        (text.trim_end().to_string(), stem)
    };
    let label = label.map(str::to_string).unwrap_or(default_label);

    let split = parse_split(split);
    let tasks = dataset.split(split);
    if tasks.is_empty() {
        return Err(usage(anyhow!("split {split} is empty")));
    }

    let providers = BuiltProviders::build(&app).map_err(usage)?;
    let set = providers.set();
    let eval_providers = EvalProviders {
        follower: set.follower,
        judge: set.judge,
    };
    let candidate = SiCandidate {
        id: label.clone(),
        text: si_text,
        parent_id: None,
        origin: Origin::Manual,
        created_iteration: 0,
    };
    let opts = EvalOptions {
        channels: app.run.channels,
        judge: app.run.judge.clone(),
        harness: si_agent_core::eval::metrics::HarnessConfig {
            work_dir: std::env::temp_dir().join("si-agent-evaluate"),
            timeout_ms: app.run.harness_timeout_ms,
        },
    };
    let record = evaluate_si(
        &candidate,
        tasks,
        split,
        &app.run.follower,
        &eval_providers,
        &opts,
    )
    .map_err(usage)?;

    say!("split: {} ({} tasks)", split, tasks.len());
    if let Some(p) = record.aggregate.performance {
        say!("performance: {}", fmt_float(p));
    }
    if let Some(j) = record.aggregate.judge_task {
        say!("judge_task: {}", fmt_float(j));
    }
    if let Some(r) = record.aggregate.readability {
        let fre = record.si_fre.map(fmt_float).unwrap_or_default();
        say!("readability: {} (raw FRE {})", fmt_float(r), fre);
    }
    if let Some(j) = record.aggregate.judge_readability {
        say!("judge_readability: {}", fmt_float(j));
    }
    if let Ok(scalar) = si_agent_core::scalarize(&record.aggregate, &app.run.weights) {
        say!(
            "scalar ({} perf / {} read): {}",
            fmt_float(app.run.weights.performance),
            fmt_float(app.run.weights.readability),
            fmt_float(scalar)
        );
    }
    say!(
        "usage: {} prompt + {} completion tokens, {} calls, {} ms",
        record.usage.prompt_tokens,
        record.usage.completion_tokens,
        record.usage.call_count,
        record.usage.wall_ms
    );

    if let Some(json_path) = json_out {
        let report = EvaluateReport {
            label,
            split: split.to_string(),
            aggregate: record.aggregate,
            raw_fre: record.si_fre,
            per_task: record
                .per_task
                .iter()
                .map(|(task_id, scores)| PerTaskScore {
                    task_id: task_id.clone(),
                    performance: scores.performance.or(scores.judge_task),
                })
                .collect(),
            usage: record.usage,
        };
        let body = serde_json::to_string_pretty(&report).expect("report serialization");
        std::fs::write(json_path, body)
            .with_context(|| format!("cannot write {}", json_path.display()))
            .map_err(usage)?;
        say!("report: {}", json_path.display());
    }
    Ok(())
}

fn cmd_compare(cli: &Cli, inputs: &[PathBuf], bootstrap: usize) -> Result<(), Failure> {
    if inputs.len() < 2 {
        return Err(usage(anyhow!(
            "compare needs at least 2 inputs, got {}",
            inputs.len()
        )));
    }
    let mut classified = Vec::new();
    for path in inputs {
        let input = classify_input(path).map_err(usage)?;
        classified.push((path.clone(), input));
    }
    let seed = cli.seed.unwrap_or(42);
    let output = build_comparison(&classified, bootstrap, seed).map_err(usage)?;
    print!("{}", output.markdown);
    if let Some(out_dir) = &cli.out {
        std::fs::create_dir_all(out_dir)
            .with_context(|| format!("cannot create {}", out_dir.display()))
            .map_err(usage)?;
        std::fs::write(out_dir.join("compare.md"), &output.markdown).map_err(usage)?;
        std::fs::write(out_dir.join("compare.csv"), &output.csv).map_err(usage)?;
        say!("\nwrote {}", out_dir.join("compare.md").display());
        say!("wrote {}", out_dir.join("compare.csv").display());
    }
    Ok(())
}

fn cmd_report(cli: &Cli, run_dir: &Path) -> Result<(), Failure> {
    let out_dir = cli.out.clone().unwrap_or_else(|| run_dir.to_path_buf());
    write_reports(run_dir, &out_dir).map_err(usage)?;
    say!("wrote {}", out_dir.join("learning_curve.csv").display());
    say!("wrote {}", out_dir.join("tradeoff.csv").display());
    say!("wrote {}", out_dir.join("report.md").display());
    Ok(())
}

fn cmd_label(
    a: &Path,
    b: &Path,
    id_a: Option<&str>,
    id_b: Option<&str>,
    labels_file: &Path,
) -> Result<(), Failure> {
    if !std::io::stdin().is_terminal() {
        return Err(usage(anyhow!("label needs an interactive terminal")));
    }
    let read_si = |path: &Path| -> Result<String> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        Ok(text.trim_end().to_string())
    };
    let text_a = read_si(a).map_err(usage)?;
    let text_b = read_si(b).map_err(usage)?;
    let stem = |path: &Path| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string())
    };
    let id_a = id_a.map(str::to_string).unwrap_or_else(|| stem(a));
    let id_b = id_b.map(str::to_string).unwrap_or_else(|| stem(b));

    say!("--- SI 1 ({id_a}) ---\n{text_a}\n");
    say!("--- SI 2 ({id_b}) ---\n{text_b}\n");

    let stdin = std::io::stdin();
    loop {
        print!("Prefer which? [1/2/skip]: ");
        std::io::stdout().flush().ok();
        let mut line = String::new();
        let n = stdin.lock().read_line(&mut line).map_err(usage)?;
        if n == 0 {
            return Err(usage(anyhow!("input closed before a choice was made")));
        }
        let (chosen, rejected) = match parse_label_choice(&line, &id_a, &id_b) {
            LabelChoice::Record { chosen, rejected } => (chosen, rejected),
            LabelChoice::Skip => {
                say!("skipped; nothing recorded");
                return Ok(());
            }
            LabelChoice::Invalid => {
                say!("unrecognized input \"{}\"", line.trim());
                continue;
            }
        };
        let record = serde_json::json!({
            "chosen": chosen,
            "rejected": rejected,
            "timestamp": chrono::Utc::now().to_rfc3339(),
        });
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(labels_file)
            .with_context(|| format!("cannot open {}", labels_file.display()))
            .map_err(usage)?;
        writeln!(file, "{record}").map_err(usage)?;
        say!(
            "recorded {chosen} over {rejected} in {}",
            labels_file.display()
        );
        return Ok(());
    }
}

fn cmd_judge(cli: &Cli, si_file: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(si_file)
        .with_context(|| format!("cannot read {}", si_file.display()))
        .map_err(usage)?;
    let stats = readability_stats(&text).map_err(usage)?;
    say!(
        "words {} sentences {} syllables {}",
        stats.words,
        stats.sentences,
        stats.syllables
    );
    say!("FRE {}", fmt_float(stats.fre));
    say!("FKGL {}", fmt_float(stats.fk_grade));

    // a configured judge provider adds the rubric-based score
    if let Some(config_path) = &cli.config {
        let app = load_config(config_path).map_err(usage)?;
        if let Some(spec) = &app.run.providers.judge {
            let provider = HttpProvider::from_spec(spec).map_err(usage)?;
            let mut judge_cfg = app.run.judge.clone();
            if judge_cfg.model.is_none() {
                judge_cfg.model = Some(spec.model.clone());
            }
            let (score, _usage) = judge::judge_score_averaged(
                &text,
                judge::JudgeRubric::SiReadability,
                None,
                &provider,
                &judge_cfg,
            )
            .map_err(usage)?;
            say!("judge_readability {}", fmt_float(score));
        }
    }
    Ok(())
}
