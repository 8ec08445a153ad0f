//! Command-line entry points.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use slide_agent_core::config::AppConfig;
use slide_agent_core::metrics::{load_dataset, run_eval, AnswerRunner};
use slide_agent_core::navigator::{build_index, load_or_build_index};
use slide_agent_core::orchestrator::{
    Intervention, JsonlSink, PatchRef, Session, SessionOptions, SessionStatus, StateEntry, Trajectory,
};
use slide_agent_core::runtime::{AgentRunner, Runtime, VoteRunner};
use slide_agent_core::slide_store::{SlideBundle, SlideLibrary};

use crate::api;
use crate::manager::SessionManager;

#[derive(Debug, Parser)]
#[command(name = "slide-agent", version, about = "Question answering over whole-slide images")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build (or rebuild) the embedding index for one level of a bundle.
    Embed {
        #[arg(long)]
        slide: PathBuf,
        #[arg(long)]
        mag: u32,
    },
    /// Answer one question about one slide.
    Ask(AskArgs),
    /// Run a dataset and report metrics.
    Eval(EvalArgs),
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Directory of slide bundles; falls back to `slides_dir` in the config.
        #[arg(long)]
        slides: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct AskArgs {
    #[arg(long)]
    pub slide: PathBuf,
    #[arg(long)]
    pub question: String,
    /// Comma-separated answer choices.
    #[arg(long, value_delimiter = ',')]
    pub options: Vec<String>,
    /// Pause at every checkpoint and read commands from stdin.
    #[arg(long)]
    pub interactive: bool,
    /// Where to write the event log; defaults to the session directory.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Strategy {
    Agent,
    PatchVote,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub slides: Option<PathBuf>,
    /// Results file (line-delimited JSON); an existing file is resumed.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Strategy::Agent)]
    pub strategy: Strategy,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    /// Patches voting per question with `--strategy patch-vote`.
    #[arg(long, default_value_t = 30)]
    pub patches: usize,
    /// Aggregate report; defaults to `<out>.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

/// Failures that are the caller's fault rather than the run's.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Parses `args` (including the program name) and runs the command.
pub fn run(args: Vec<String>, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{rendered}")
            } else {
                write!(out, "{rendered}")
            };
            return code;
        }
    };
    match execute(cli, input, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn execute(cli: Cli, input: &mut dyn BufRead, out: &mut dyn Write) -> anyhow::Result<()> {
    let config = AppConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Embed { slide, mag } => embed(&config, &slide, mag, out),
        Command::Ask(args) => ask(&config, args, input, out),
        Command::Eval(args) => eval(config, args, out),
        Command::Serve { port, host, slides } => serve(config, &host, port, slides),
    }
}

fn embed(config: &AppConfig, slide: &Path, mag: u32, out: &mut dyn Write) -> anyhow::Result<()> {
    let bundle = SlideBundle::load(slide)?;
    if !bundle.has_level(mag) {
        return Err(UsageError(format!("bundle has no {mag}x level (levels: {:?})", bundle.magnifications())).into());
    }
    let embedder = config.embedder()?;
    let index = build_index(&bundle, mag, &*embedder, config.embed_workers)?;
    let (bin, _) = slide_agent_core::navigator::PatchEmbeddingIndex::paths(&bundle, mag);
    writeln!(
        out,
        "indexed {} patches of {} at {mag}x (dim {}) -> {}",
        index.count(),
        bundle.slide_id(),
        index.dim(),
        bin.display()
    )?;
    Ok(())
}

fn ask(config: &AppConfig, args: AskArgs, input: &mut dyn BufRead, out: &mut dyn Write) -> anyhow::Result<()> {
    if args.question.trim().is_empty() {
        return Err(UsageError("--question must not be empty".into()).into());
    }
    if args.options.len() == 1 {
        return Err(UsageError("--options needs at least two choices".into()).into());
    }
    let bundle = Arc::new(SlideBundle::load(&args.slide)?);
    let backends = config.backends()?;
    let mut session_config = config.session.clone();
    session_config.interactive = args.interactive;
    let index = Arc::new(load_or_build_index(
        &bundle,
        session_config.initial_magnification,
        &*backends.embedder,
        config.embed_workers,
    )?);
    let id = uuid::Uuid::new_v4().to_string();
    let path = args
        .trajectory
        .clone()
        .unwrap_or_else(|| config.session_dir.join(format!("{id}.jsonl")));
    let sink = JsonlSink::create(&path).with_context(|| format!("creating {}", path.display()))?;
    let opts = SessionOptions {
        session_id: Some(id),
        sinks: vec![Box::new(sink)],
        decoding: config.decoding.clone(),
        ..SessionOptions::default()
    };
    let mut session = Session::new(bundle, index, backends, &args.question, args.options, session_config, opts)?;
    if args.interactive {
        repl(&mut session, input, out)?;
    } else if let Err(e) = session.run_to_end() {
        writeln!(out, "Trajectory: {}", path.display())?;
        return Err(anyhow!(e).context("session failed"));
    }
    let t = session.trajectory();
    print_outcome(&t, out)?;
    writeln!(out, "Trajectory: {}", path.display())?;
    match session.status() {
        SessionStatus::Done => Ok(()),
        SessionStatus::Failed => Err(anyhow!(t
            .error
            .map(|e| e.message)
            .unwrap_or_else(|| "session failed".into()))),
        other => Err(anyhow!("session left {}", other.as_str())),
    }
}

fn print_outcome(t: &Trajectory, out: &mut dyn Write) -> std::io::Result<()> {
    if let Some(f) = &t.final_answer {
        writeln!(out, "Answer: {}", f.answer.answer)?;
        writeln!(out, "Reasoning: {}", f.answer.reasoning_chain)?;
        writeln!(out, "Iterations: {}", f.answer.iterations_used)?;
    }
    Ok(())
}

const REPL_HELP: &str = "commands: resume | show | note <text> | edit <mag> <col> <row> <text> | \
select <col>,<row> [...] | mag <m> | finalize | quit";

fn show(session: &Session, out: &mut dyn Write) -> std::io::Result<()> {
    let status = session.status();
    let at = session.checkpoint().map_or(String::new(), |c| format!(" at {c:?}"));
    writeln!(out, "[{} iteration {}{at}]", status.as_str(), session.iteration())?;
    for f in session.current_findings() {
        writeln!(out, "  finding ({},{}) score {:.3}", f.patch.loc.col, f.patch.loc.row, f.score)?;
    }
    if let Some(state) = session.states().last() {
        for e in &state.entries {
            match e {
                StateEntry::Patch { patch, description, .. } => writeln!(
                    out,
                    "  {}x ({},{}): {description}",
                    patch.magnification, patch.loc.col, patch.loc.row
                )?,
                StateEntry::Note { text, .. } => writeln!(out, "  note: {text}")?,
            }
        }
    }
    if let Some(a) = session.trajectory().iterations.last().and_then(|it| it.action.clone()) {
        writeln!(out, "  predicted: {} -> action {:?}", a.predicted.answer, a.action)?;
    }
    Ok(())
}

fn parse_command(line: &str) -> Result<Option<Intervention>, String> {
    let (cmd, rest) = line.split_once(' ').unwrap_or((line, ""));
    let rest = rest.trim();
    let num = |s: &str, what: &str| s.parse::<u32>().map_err(|_| format!("{what} must be a number, got {s:?}"));
    Ok(Some(match cmd {
        "note" if !rest.is_empty() => Intervention::InjectNote { text: rest.to_string() },
        "edit" => {
            let mut parts = rest.splitn(4, ' ');
            let mut next = |what: &str| parts.next().ok_or(format!("edit needs {what}"));
            let magnification = num(next("a magnification")?, "magnification")?;
            let col = num(next("a column")?, "column")?;
            let row = num(next("a row")?, "row")?;
            let text = next("the new text")?.to_string();
            Intervention::EditDescription {
                magnification,
                col,
                row,
                text,
            }
        }
        "select" => {
            let patches = rest
                .split_whitespace()
                .map(|p| {
                    let (c, r) = p.split_once(',').ok_or(format!("expected col,row, got {p:?}"))?;
                    Ok(PatchRef {
                        col: num(c, "column")?,
                        row: num(r, "row")?,
                    })
                })
                .collect::<Result<Vec<_>, String>>()?;
            Intervention::SelectRois { patches }
        }
        "mag" => Intervention::SetMagnification {
            magnification: num(rest, "magnification")?,
        },
        "finalize" => Intervention::Finalize,
        _ => return Ok(None),
    }))
}

/// Drives an interactive session from line commands until it ends or the
/// input runs out.
pub fn repl(session: &mut Session, input: &mut dyn BufRead, out: &mut dyn Write) -> anyhow::Result<()> {
    writeln!(out, "{REPL_HELP}")?;
    show(session, out)?;
    let mut line = String::new();
    while !session.status().is_terminal() {
        write!(out, "> ")?;
        out.flush()?;
        line.clear();
        if input.read_line(&mut line)? == 0 {
            writeln!(out)?;
            break;
        }
        let line = line.trim();
        match line {
            "" => continue,
            "quit" | "exit" => break,
            "help" => writeln!(out, "{REPL_HELP}")?,
            "show" => show(session, out)?,
            "resume" | "r" => {
                if let Err(e) = session.resume() {
                    writeln!(out, "session failed: {e}")?;
                }
                show(session, out)?;
            }
            other => match parse_command(other) {
                Ok(Some(i)) => match session.apply_intervention(i, "cli") {
                    Ok(rec) => writeln!(out, "applied {} at iteration {}", rec.intervention.kind(), rec.at_iteration)?,
                    Err(e) => writeln!(out, "rejected: {e}")?,
                },
                Ok(None) => writeln!(out, "unknown command; {REPL_HELP}")?,
                Err(e) => writeln!(out, "{e}")?,
            },
        }
    }
    Ok(())
}

fn slides_dir(flag: Option<PathBuf>, config: &AppConfig) -> anyhow::Result<PathBuf> {
    flag.or_else(|| config.slides_dir.clone())
        .ok_or_else(|| UsageError("--slides is required (or set slides_dir in the config)".into()).into())
}

fn load_library(dir: &Path) -> anyhow::Result<SlideLibrary> {
    let lib = SlideLibrary::scan(dir)?;
    for (path, why) in &lib.skipped {
        tracing::warn!(path = %path.display(), "skipped bundle: {why}");
    }
    if lib.is_empty() {
        return Err(anyhow!("no slide bundles found under {}", dir.display()));
    }
    Ok(lib)
}

fn eval(config: AppConfig, args: EvalArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    if args.workers == 0 || args.patches == 0 {
        return Err(UsageError("--workers and --patches must be positive".into()).into());
    }
    let records = load_dataset(&args.dataset).with_context(|| format!("loading {}", args.dataset.display()))?;
    let library = load_library(&slides_dir(args.slides, &config)?)?;
    let backends = config.backends()?;
    let trajectory_dir = config.session_dir.clone();
    let rt = Runtime::new(config, library, backends);
    let runner: Box<dyn AnswerRunner> = match args.strategy {
        Strategy::Agent => Box::new(AgentRunner {
            runtime: &rt,
            trajectory_dir,
        }),
        Strategy::PatchVote => Box::new(VoteRunner {
            runtime: &rt,
            n_patches: args.patches,
        }),
    };
    let report = run_eval(&records, &*runner, &args.out, args.workers)?;
    let report_path = args.report.unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".report.json");
        PathBuf::from(p)
    });
    report.write_json(&report_path)?;
    writeln!(out, "{}", report.table())?;
    for note in &report.notes {
        writeln!(out, "note: {note}")?;
    }
    writeln!(out, "results: {}\nreport: {}", args.out.display(), report_path.display())?;
    Ok(())
}

fn serve(config: AppConfig, host: &str, port: u16, slides: Option<PathBuf>) -> anyhow::Result<()> {
    let library = load_library(&slides_dir(slides, &config)?)?;
    let backends = config.backends()?;
    let dir = config.session_dir.clone();
    let max = config.max_sessions;
    let rt = Arc::new(Runtime::new(config, library, backends));
    let manager = Arc::new(SessionManager::open(rt, dir, max)?);
    let tokio = tokio::runtime::Runtime::new()?;
    tokio.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .with_context(|| format!("binding {host}:{port}"))?;
        tracing::info!(addr = %listener.local_addr()?, "serving");
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, api::router(manager))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
