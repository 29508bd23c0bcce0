use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use edabench_core::ingestion::{validate_manifest, LoadOptions};
use edabench_core::report::{write_reports, Format};
use edabench_core::runner::{self, audit, find_run, load_bundle, run_dir, score_run, REPORTS_DIR};
use edabench_core::{Config, ConfigError, IngestError, RunError, RunOptions, RunSummary, ViewLabel};
use edabench_core::bundle::ScoreBundle;
use edabench_core::analytics::fmt_fixed;

#[derive(Parser)]
#[command(name = "edabench", version, about = "Offline-reproducible GUI agent benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a dataset manifest and every referenced image.
    Validate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Manifest to check; defaults to the config's dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Plan, execute, score and report a run.
    Run(RunArgs),
    /// Continue an interrupted run.
    Resume {
        run_id: String,
        #[command(flatten)]
        args: RunArgs,
    },
    /// Recompute scores from a run's records.
    Score(RunRef),
    /// Render reports from a scored run.
    Report {
        #[command(flatten)]
        run: RunRef,
        #[arg(long, value_delimiter = ',', default_value = "md,csv,svg")]
        formats: Vec<Format>,
    },
    /// Cross-check a run's ledger against its records.
    Audit(RunRef),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output root; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    views: Option<Vec<ViewLabel>>,
    #[arg(long, value_delimiter = ',')]
    agents: Option<Vec<String>>,
    /// Use every backend's script instead of its endpoint.
    #[arg(long)]
    dry_run: bool,
    #[arg(long, value_delimiter = ',', default_value = "md,csv,svg")]
    formats: Vec<Format>,
    /// Continue the given run instead of starting one.
    #[arg(long, value_name = "RUN_ID")]
    resume: Option<String>,
    /// Stop after this many items.
    #[arg(long, hide = true)]
    limit: Option<usize>,
}

#[derive(Args)]
struct RunRef {
    run_id: String,
    /// Output root holding the run.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config whose output root holds the run.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn domain(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }

    fn io(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::io(e.to_string())
    }
}

impl From<IngestError> for Failure {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Io { .. } => Failure::io(e.to_string()),
            _ => Failure::domain(e.to_string()),
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(e) => e.into(),
            RunError::Ingest(e) => e.into(),
            RunError::Io { .. } | RunError::Corrupt { .. } => Failure::io(e.to_string()),
            _ => Failure::domain(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::io(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { config, dataset } => cmd_validate(config.as_deref(), dataset.as_deref()),
        Command::Run(args) => cmd_run(args),
        Command::Resume { run_id, mut args } => {
            args.resume = Some(run_id);
            cmd_run(args)
        }
        Command::Score(r) => cmd_score(&r),
        Command::Report { run, formats } => cmd_report(&run, &formats),
        Command::Audit(r) => cmd_audit(&r),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_validate(config: Option<&Path>, dataset: Option<&Path>) -> Outcome {
    let path = match (dataset, config) {
        (Some(d), _) => d.to_path_buf(),
        (None, Some(c)) => Config::load(c)?.dataset_path(),
        (None, None) => return Err(Failure::io("pass --dataset or --config")),
    };
    let report = validate_manifest(&path, LoadOptions::default())?;
    println!(
        "{} records, {} valid, {} violations",
        report.records,
        report.valid,
        report.violations.len()
    );
    for v in &report.violations {
        println!("  {v}");
    }
    if report.is_clean() {
        Ok(())
    } else {
        Err(Failure::domain(format!("{} violations in {}", report.violations.len(), path.display())))
    }
}

fn load_config(args: &RunArgs) -> Result<Config, Failure> {
    let mut cfg = Config::load(&args.config)?;
    if let Some(out) = &args.out {
        let abs = std::path::absolute(out)?;
        cfg.out = abs.to_string_lossy().into_owned();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(views) = &args.views {
        cfg.views = views.clone();
    }
    if let Some(agents) = &args.agents {
        cfg.select_agents(agents)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_run(args: RunArgs) -> Outcome {
    let cfg = load_config(&args)?;
    let opts = RunOptions {
        dry_run: args.dry_run,
        resume: args.resume.is_some(),
        limit: args.limit,
    };
    if let Some(id) = &args.resume {
        let expected = runner::expected_run_id(&cfg, opts.dry_run)?;
        if *id != expected {
            let root = cfg.resolve(&cfg.out);
            return Err(match find_run(&root, id) {
                Ok(_) => RunError::ConfigDrift { run_id: id.clone() }.into(),
                Err(e) => e.into(),
            });
        }
    }
    let rt = tokio::runtime::Runtime::new()?;
    let summary = rt.block_on(runner::run(&cfg, &opts))?;
    print_progress(&summary);
    let done = summary.previously_done + summary.executed;
    if done == 0 {
        return Err(Failure::domain("no item completed"));
    }
    let dir = run_dir(&cfg, &summary.run_id);
    let bundle = score_run(&dir)?;
    write_reports(&dir.join(REPORTS_DIR), &bundle, &args.formats)?;
    print_scores(&bundle);
    Ok(())
}

fn print_progress(s: &RunSummary) {
    println!("run {}", s.run_id);
    println!("  directory        {}", s.dir.display());
    println!("  planned          {}", s.planned);
    println!("  skipped          {}", s.skipped);
    println!("  previously done  {}", s.previously_done);
    println!("  executed         {}", s.executed);
    println!("  with errors      {}", s.items_with_errors);
    println!("{} items remaining", s.remaining);
}

fn print_scores(b: &ScoreBundle) {
    println!();
    println!("{:<16} {:>6} {:>8} {:>8}", "agent", "items", "answer", "action");
    for row in &b.aggregates.by_agent {
        let agent = row.key.first().map(ToString::to_string).unwrap_or_default();
        let answer = row.mean_answer.map_or_else(|| "n/a".to_string(), |v| fmt_fixed(v, 4));
        println!("{agent:<16} {:>6} {answer:>8} {:>8}", row.n, fmt_fixed(row.mean_action, 4));
    }
}

fn locate(r: &RunRef) -> Result<PathBuf, Failure> {
    let root = match (&r.out, &r.config) {
        (Some(out), _) => out.clone(),
        (None, Some(c)) => {
            let cfg = Config::load(c)?;
            cfg.resolve(&cfg.out)
        }
        (None, None) => PathBuf::from("runs"),
    };
    Ok(find_run(&root, &r.run_id)?)
}

fn cmd_score(r: &RunRef) -> Outcome {
    let dir = locate(r)?;
    let bundle = score_run(&dir)?;
    println!("scored {} records of run {}", bundle.records, bundle.run_id);
    print_scores(&bundle);
    Ok(())
}

fn cmd_report(r: &RunRef, formats: &[Format]) -> Outcome {
    let dir = locate(r)?;
    let bundle = load_bundle(&dir)?;
    let files = write_reports(&dir.join(REPORTS_DIR), &bundle, formats)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn cmd_audit(r: &RunRef) -> Outcome {
    let dir = locate(r)?;
    let a = audit(&dir)?;
    println!("ledger entries     {}", a.ledger_entries);
    println!("records            {}", a.records);
    println!("planned            {}", a.plan_size);
    let lists = [
        ("missing record", &a.missing_records),
        ("unledgered record", &a.unledgered_records),
        ("duplicate record", &a.duplicate_records),
        ("duplicate ledger entry", &a.duplicate_ledger),
    ];
    for (what, keys) in lists {
        for k in keys {
            println!("  {what}: {}/{}/{}", k.sample_id, k.view, k.agent);
        }
    }
    for m in &a.malformed {
        println!("  malformed line: {m}");
    }
    if !a.is_consistent() {
        return Err(Failure::domain("ledger and records disagree"));
    }
    println!("{}", if a.is_complete() { "complete" } else { "consistent, incomplete" });
    Ok(())
}
