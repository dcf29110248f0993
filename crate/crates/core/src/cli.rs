//! Command-line front end: `exec`, `flags list`, `state`, `harness`.

use std::ffi::OsString;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{load_config, load_policy, AgentConfig, ConfigPaths, API_BASE_ENV, HOME_ENV};
use crate::context::ContextLimits;
use crate::features::{build_overrides, env_overrides, FlagInputs, FlagSet, CATALOG};
use crate::harness::eval::{run_eval, tasks, EvalOptions};
use crate::harness::micro::{run_micro, MicroOptions};
use crate::harness::{MockModel, MockServer, ModelScript, ScriptStep, ScriptTurn};
use crate::protocol::EventPayload;
use crate::runner::{Outcome, RunnerBuilder, SessionConfig};
use crate::sandbox::SandboxMode;
use crate::state::open_store;
use crate::transport::{HttpModelClient, NoSleep, ThreadSleeper};

pub const EXIT_COMPLETED: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_MAX_TURNS: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(
    name = "agent-kernel",
    version,
    about = "Headless coding-agent runtime"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: FlagArgs,
    /// Output format for events and listings.
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Text)]
    pub output: OutputFormat,
}

#[derive(Debug, Clone, Default, Args)]
pub struct FlagArgs {
    /// Enable an enhancement flag (repeatable).
    #[arg(long = "enable", value_name = "NAME", global = true)]
    pub enable: Vec<String>,
    /// Disable an enhancement flag (repeatable).
    #[arg(long = "disable", value_name = "NAME", global = true)]
    pub disable: Vec<String>,
    /// Force every enhancement flag off.
    #[arg(long, global = true)]
    pub parity: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Text,
    Jsonl,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one task non-interactively.
    Exec(ExecArgs),
    #[command(subcommand)]
    Flags(FlagsCommand),
    #[command(subcommand)]
    State(StateCommand),
    #[command(subcommand)]
    Harness(HarnessCommand),
}

#[derive(Debug, Args)]
pub struct ExecArgs {
    /// read-only, workspace-write or danger-full-access.
    #[arg(long)]
    pub sandbox: Option<String>,
    /// Model id. `mock:<script>` serves a script file locally; `mock` echoes
    /// the prompt minus a leading "say ".
    #[arg(short = 'm', long)]
    pub model: Option<String>,
    #[arg(long)]
    pub max_turns: Option<u32>,
    /// Task text; read from stdin when omitted or `-`.
    pub prompt: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum FlagsCommand {
    /// Print the flag catalog with resolved values.
    List,
}

#[derive(Debug, Subcommand)]
pub enum StateCommand {
    /// List stored session ids.
    List,
    /// Print a session with its messages and events as JSON lines.
    Export { session_id: String },
}

#[derive(Debug, Subcommand)]
pub enum HarnessCommand {
    /// Run the end-to-end task suite.
    Eval {
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run the component micro-benchmarks.
    Micro {
        #[arg(long, default_value_t = 200)]
        iterations: usize,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Serve a model script until interrupted.
    Serve {
        #[arg(long)]
        script: PathBuf,
    },
}

#[derive(Debug)]
struct Usage(String);

impl<E: std::fmt::Display> From<E> for Usage {
    fn from(e: E) -> Self {
        Usage(e.to_string())
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_USAGE
            } else {
                EXIT_COMPLETED
            };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(Usage(message)) => {
            eprintln!("error: {message}");
            EXIT_USAGE
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32, Usage> {
    let cwd = std::env::current_dir()?;
    let paths = ConfigPaths::from_env(&cwd);
    let config = load_config(&paths)?;
    let flags = resolve_flags(&cli.flags, &config)?;
    match cli.command {
        Command::Exec(args) => exec(args, cli.output, &paths, &config, flags, &cwd),
        Command::Flags(FlagsCommand::List) => {
            list_flags(&flags, cli.output);
            Ok(EXIT_COMPLETED)
        }
        Command::State(cmd) => state(cmd, &config),
        Command::Harness(cmd) => harness(cmd, flags),
    }
}

/// Config-file lists apply first; a name given on the command line replaces
/// whatever the config said about it.
fn resolve_flags(cli: &FlagArgs, config: &AgentConfig) -> Result<FlagSet, Usage> {
    let on_cli = |name: &String| {
        cli.enable
            .iter()
            .chain(&cli.disable)
            .any(|c| c.eq_ignore_ascii_case(name))
    };
    let mut enables: Vec<String> = config
        .features
        .enable
        .iter()
        .filter(|n| !on_cli(n))
        .cloned()
        .collect();
    let mut disables: Vec<String> = config
        .features
        .disable
        .iter()
        .filter(|n| !on_cli(n))
        .cloned()
        .collect();
    enables.extend(cli.enable.iter().cloned());
    disables.extend(cli.disable.iter().cloned());
    let inputs = FlagInputs {
        build: build_overrides()?,
        env: env_overrides(std::env::vars()),
        enables,
        disables,
        parity: cli.parity || config.features.parity,
    };
    Ok(inputs.resolve()?)
}

fn list_flags(flags: &FlagSet, output: OutputFormat) {
    let mut out = std::io::stdout().lock();
    for def in CATALOG {
        let (enabled, source) = flags
            .get(def.flag)
            .unwrap_or((def.default, crate::features::FlagSource::Default));
        match output {
            OutputFormat::Jsonl => {
                let mut row = serde_json::to_value(def).unwrap_or_default();
                row["enabled"] = enabled.into();
                row["source"] = serde_json::to_value(source).unwrap_or_default();
                let _ = writeln!(out, "{row}");
            }
            OutputFormat::Text => {
                let source = serde_json::to_value(source).unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{:<28} {:<4} {:<8} {:<14} {}",
                    def.name,
                    if enabled { "on" } else { "off" },
                    source.as_str().unwrap_or(""),
                    def.category,
                    def.description
                );
            }
        }
    }
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes());
    let _ = out.flush();
}

fn data_dir(config: &AgentConfig) -> Option<PathBuf> {
    config
        .data_dir
        .clone()
        .or_else(|| std::env::var_os(HOME_ENV).map(PathBuf::from))
}

fn state(cmd: StateCommand, config: &AgentConfig) -> Result<i32, Usage> {
    let dir = data_dir(config)
        .ok_or_else(|| Usage(format!("no data directory: set data_dir or {HOME_ENV}")))?;
    let store = open_store(&dir.join("state.db"))?;
    match cmd {
        StateCommand::List => {
            for id in store.session_ids()? {
                emit(&format!("{id}\n"));
            }
        }
        StateCommand::Export { session_id } => emit(&store.export_session(&session_id)?),
    }
    Ok(EXIT_COMPLETED)
}

fn read_prompt(arg: Option<String>) -> Result<String, Usage> {
    match arg.as_deref() {
        Some(p) if p != "-" => Ok(p.to_string()),
        _ => {
            let mut text = String::new();
            std::io::stdin().read_to_string(&mut text)?;
            let text = text.trim().to_string();
            if text.is_empty() {
                return Err(Usage("empty prompt".into()));
            }
            Ok(text)
        }
    }
}

fn echo_model(prompt: &str) -> MockModel {
    let text = prompt.strip_prefix("say ").unwrap_or(prompt).to_string();
    MockModel::with_responder(Box::new(move |_, _| {
        Some(ScriptStep::Turn(ScriptTurn::Final { text: text.clone() }))
    }))
}

fn exec(
    args: ExecArgs,
    output: OutputFormat,
    paths: &ConfigPaths,
    config: &AgentConfig,
    flags: FlagSet,
    cwd: &Path,
) -> Result<i32, Usage> {
    let mode: SandboxMode = match args.sandbox.as_deref().or(config.sandbox.mode.as_deref()) {
        Some(name) => name.parse().map_err(|e| Usage(format!("--sandbox: {e}")))?,
        None => SandboxMode::ReadOnly,
    };
    let model = args
        .model
        .or_else(|| config.model.clone())
        .ok_or_else(|| Usage("no model: pass -m or set `model` in config".into()))?;
    let prompt = read_prompt(args.prompt)?;

    let mut session = SessionConfig::new(model.clone());
    session.sandbox_mode = mode;
    session.flags = flags;
    if let Some(n) = args.max_turns.or(config.max_turns) {
        session.max_turns = n;
    }
    if config.model_context_tokens.is_some() || config.compact_trigger_fraction.is_some() {
        let d = ContextLimits::default();
        session.limits = ContextLimits::new(
            config
                .model_context_tokens
                .unwrap_or(d.model_context_tokens),
            config
                .compact_trigger_fraction
                .unwrap_or(d.compact_trigger_fraction),
        )?;
    }

    let mut _server = None;
    let (client, keys, mock) = if model == "mock" || model.starts_with("mock:") {
        let server = match model.strip_prefix("mock:") {
            Some(path) => MockServer::start(ModelScript::load(Path::new(path))?)?,
            None => MockServer::start_with(Arc::new(echo_model(&prompt)))?,
        };
        let client = HttpModelClient::new(&server.base_url(), Some(server.channel_url()));
        _server = Some(server);
        (client, vec!["mock-key".to_string()], true)
    } else {
        let base = std::env::var(API_BASE_ENV)
            .ok()
            .or_else(|| config.api_base.clone())
            .ok_or_else(|| {
                Usage(format!(
                    "no API base: set {API_BASE_ENV} or `api_base` in config"
                ))
            })?;
        let keys = config.api_keys()?;
        if keys.is_empty() {
            return Err(Usage("no API keys: set `key_file` in config".into()));
        }
        (
            HttpModelClient::new(&base, config.channel_url.clone()),
            keys,
            false,
        )
    };

    let session_id = session.session_id.clone();
    let mut builder = RunnerBuilder::new(session, cwd)
        .policy(load_policy(paths)?)
        .backend(config.backend()?)
        .keys(keys)
        .sleeper(if mock {
            Box::new(NoSleep)
        } else {
            Box::new(ThreadSleeper)
        });
    if let Some(dir) = data_dir(config) {
        std::fs::create_dir_all(&dir)?;
        builder = builder.store(open_store(&dir.join("state.db"))?);
    }
    let mut runner = builder.build(Arc::new(client));
    if output == OutputFormat::Jsonl {
        runner = runner.with_observer(|event| {
            if let Ok(line) = serde_json::to_string(event) {
                let mut out = std::io::stdout().lock();
                let _ = writeln!(out, "{line}");
                let _ = out.flush();
            }
        });
    }

    let summary = runner.run(&prompt);
    if output == OutputFormat::Text {
        if let Some(text) = &summary.final_text {
            emit(&format!("{text}\n"));
        }
    }
    let code = match summary.outcome {
        Outcome::Completed => EXIT_COMPLETED,
        Outcome::MaxTurnsReached => {
            eprintln!(
                "stopped after {} turns (session {session_id})",
                summary.turns_used
            );
            EXIT_MAX_TURNS
        }
        Outcome::Failed => {
            let reason = summary.events.iter().rev().find_map(|e| match &e.payload {
                EventPayload::Error { message, .. } => Some(message.clone()),
                _ => None,
            });
            eprintln!(
                "failed: {} (session {session_id})",
                reason.unwrap_or_else(|| "unknown error".into())
            );
            EXIT_FAILED
        }
    };
    Ok(code)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Usage> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn harness(cmd: HarnessCommand, flags: FlagSet) -> Result<i32, Usage> {
    match cmd {
        HarnessCommand::Eval { repetitions, json } => {
            let report = run_eval(&tasks(), &EvalOptions { repetitions, flags });
            emit(&report.to_markdown());
            if let Some(path) = json {
                write_json(&path, &report)?;
            }
            Ok(if report.all_passed() {
                EXIT_COMPLETED
            } else {
                EXIT_FAILED
            })
        }
        HarnessCommand::Micro { iterations, json } => {
            let report = run_micro(MicroOptions {
                iterations,
                ..Default::default()
            })?;
            emit(&report.to_markdown());
            if let Some(path) = json {
                write_json(&path, &report)?;
            }
            Ok(if report.scenarios.iter().all(|s| s.error.is_none()) {
                EXIT_COMPLETED
            } else {
                EXIT_FAILED
            })
        }
        HarnessCommand::Serve { script } => {
            let server = MockServer::start(ModelScript::load(&script)?)?;
            emit(&format!(
                "http {}\nchannel {}\n",
                server.base_url(),
                server.channel_url()
            ));
            loop {
                std::thread::park();
            }
        }
    }
}
