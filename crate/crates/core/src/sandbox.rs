//! Sandbox modes and command execution through a pluggable backend.
//!
//! Two backends ship: `none` spawns the command directly, `checking` screens
//! the command for write targets outside the writable roots before running
//! it and diffs the working directory afterwards. Neither provides kernel
//! enforcement; platform isolation would plug in behind [`SandboxBackend`].

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Component, Path, PathBuf};
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::sync::mpsc;
use std::time::{Duration, Instant, SystemTime};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum SandboxMode {
    #[default]
    ReadOnly,
    WorkspaceWrite,
    FullAccess,
}

impl SandboxMode {
    /// The CLI spelling.
    pub fn cli_name(self) -> &'static str {
        match self {
            SandboxMode::ReadOnly => "read-only",
            SandboxMode::WorkspaceWrite => "workspace-write",
            SandboxMode::FullAccess => "danger-full-access",
        }
    }
}

impl fmt::Display for SandboxMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for SandboxMode {
    type Err = SandboxError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "read-only" | "read_only" => Ok(SandboxMode::ReadOnly),
            "workspace-write" | "workspace_write" => Ok(SandboxMode::WorkspaceWrite),
            "danger-full-access" | "full_access" => Ok(SandboxMode::FullAccess),
            other => Err(SandboxError::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error(
        "unknown sandbox mode `{0}` (expected read-only, workspace-write or danger-full-access)"
    )]
    UnknownMode(String),
    #[error("unknown sandbox backend `{0}` (expected checking or none)")]
    UnknownBackend(String),
    #[error("full access requires explicit opt-in")]
    OptInRequired,
    #[error("workspace root must be absolute: {0}")]
    RelativeRoot(PathBuf),
    #[error("empty command")]
    EmptyCommand,
    #[error("failed to spawn `{program}`: {reason}")]
    SpawnFailure { program: String, reason: String },
    #[error("command timed out after {timeout_ms} ms")]
    Timeout {
        timeout_ms: u64,
        stdout: String,
        stderr: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SandboxSpec {
    pub mode: SandboxMode,
    pub writable_roots: Vec<PathBuf>,
    pub network_allowed: bool,
}

pub fn default_scratch_dir() -> PathBuf {
    std::env::temp_dir().join("agent-kernel-scratch")
}

pub fn resolve_spec(
    mode: SandboxMode,
    workspace_root: &Path,
    opt_in: bool,
) -> Result<SandboxSpec, SandboxError> {
    resolve_spec_with_scratch(mode, workspace_root, &default_scratch_dir(), opt_in)
}

pub fn resolve_spec_with_scratch(
    mode: SandboxMode,
    workspace_root: &Path,
    scratch: &Path,
    opt_in: bool,
) -> Result<SandboxSpec, SandboxError> {
    if !workspace_root.is_absolute() {
        return Err(SandboxError::RelativeRoot(workspace_root.to_path_buf()));
    }
    Ok(match mode {
        SandboxMode::ReadOnly => SandboxSpec {
            mode,
            writable_roots: Vec::new(),
            network_allowed: false,
        },
        SandboxMode::WorkspaceWrite => SandboxSpec {
            mode,
            writable_roots: vec![workspace_root.to_path_buf(), scratch.to_path_buf()],
            network_allowed: false,
        },
        SandboxMode::FullAccess => {
            if !opt_in {
                return Err(SandboxError::OptInRequired);
            }
            SandboxSpec {
                mode,
                writable_roots: Vec::new(),
                network_allowed: true,
            }
        }
    })
}

/// Lexically normalizes `path` against `base` (no filesystem access beyond
/// canonicalizing the longest existing ancestor).
pub fn normalize_path(base: &Path, path: &Path) -> PathBuf {
    let joined = if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    };
    let mut out = PathBuf::new();
    for comp in joined.components() {
        match comp {
            Component::ParentDir => {
                out.pop();
            }
            Component::CurDir => {}
            other => out.push(other),
        }
    }
    // Resolve symlinked ancestors so roots and targets compare equal.
    let mut existing = out.clone();
    let mut rest = Vec::new();
    while !existing.exists() {
        match existing.file_name() {
            Some(name) => {
                rest.push(name.to_os_string());
                existing.pop();
            }
            None => return out,
        }
    }
    match existing.canonicalize() {
        Ok(mut canon) => {
            for name in rest.into_iter().rev() {
                canon.push(name);
            }
            canon
        }
        Err(_) => out,
    }
}

impl SandboxSpec {
    pub fn is_writable(&self, path: &Path) -> bool {
        if self.mode == SandboxMode::FullAccess {
            return true;
        }
        let target = normalize_path(Path::new("/"), path);
        self.writable_roots
            .iter()
            .any(|root| target.starts_with(normalize_path(Path::new("/"), root)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecOutcome {
    /// `None` when the command was blocked before running.
    pub exit_code: Option<i32>,
    pub stdout: String,
    pub stderr: String,
    pub duration_ms: u64,
    /// Paths written (or about to be written) outside the writable roots.
    pub violations: Vec<PathBuf>,
}

impl ExecOutcome {
    pub fn succeeded(&self) -> bool {
        self.exit_code == Some(0) && self.violations.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ExecRequest<'a> {
    pub argv: &'a [String],
    pub workdir: &'a Path,
    pub timeout_ms: u64,
}

pub trait SandboxBackend: Send + Sync {
    fn name(&self) -> &'static str;
    fn execute(
        &self,
        spec: &SandboxSpec,
        req: &ExecRequest<'_>,
    ) -> Result<ExecOutcome, SandboxError>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum BackendKind {
    #[default]
    Checking,
    None,
}

impl FromStr for BackendKind {
    type Err = SandboxError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "checking" => Ok(BackendKind::Checking),
            "none" => Ok(BackendKind::None),
            other => Err(SandboxError::UnknownBackend(other.to_string())),
        }
    }
}

impl BackendKind {
    pub fn build(self) -> Box<dyn SandboxBackend> {
        match self {
            BackendKind::Checking => Box::new(CheckingBackend::default()),
            BackendKind::None => Box::new(DirectBackend),
        }
    }
}

pub fn execute(
    spec: &SandboxSpec,
    argv: &[String],
    workdir: &Path,
    timeout_ms: u64,
    backend: &dyn SandboxBackend,
) -> Result<ExecOutcome, SandboxError> {
    backend.execute(
        spec,
        &ExecRequest {
            argv,
            workdir,
            timeout_ms,
        },
    )
}

/// Spawns the command directly.
#[derive(Debug, Default)]
pub struct DirectBackend;

impl SandboxBackend for DirectBackend {
    fn name(&self) -> &'static str {
        "none"
    }

    fn execute(
        &self,
        _spec: &SandboxSpec,
        req: &ExecRequest<'_>,
    ) -> Result<ExecOutcome, SandboxError> {
        spawn_and_wait(req)
    }
}

const SCRUBBED_ENV_KEYS: [&str; 3] = ["PATH", "HOME", "LANG"];

fn spawn_and_wait(req: &ExecRequest<'_>) -> Result<ExecOutcome, SandboxError> {
    let (program, args) = req.argv.split_first().ok_or(SandboxError::EmptyCommand)?;
    let started = Instant::now();
    let mut cmd = Command::new(program);
    cmd.args(args)
        .current_dir(req.workdir)
        .env_clear()
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    for key in SCRUBBED_ENV_KEYS {
        if let Some(value) = std::env::var_os(key) {
            cmd.env(key, value);
        }
    }
    let mut child = cmd.spawn().map_err(|e| SandboxError::SpawnFailure {
        program: program.clone(),
        reason: e.to_string(),
    })?;
    let pid = child.id() as libc::pid_t;
    let stdout = child.stdout.take().map(reader_thread);
    let stderr = child.stderr.take().map(reader_thread);

    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let _ = tx.send(child.wait());
    });
    let status = match rx.recv_timeout(Duration::from_millis(req.timeout_ms)) {
        Ok(status) => Some(status),
        Err(_) => {
            // SAFETY: signalling our own child's process group.
            unsafe {
                libc::kill(-pid, libc::SIGKILL);
            }
            let _ = rx.recv();
            None
        }
    };
    let collect = |h: Option<std::thread::JoinHandle<Vec<u8>>>| {
        h.and_then(|h| h.join().ok())
            .map(|bytes| String::from_utf8_lossy(&bytes).into_owned())
            .unwrap_or_default()
    };
    let stdout = collect(stdout);
    let stderr = collect(stderr);
    let duration_ms = started.elapsed().as_millis() as u64;
    match status {
        None => Err(SandboxError::Timeout {
            timeout_ms: req.timeout_ms,
            stdout,
            stderr,
        }),
        Some(Err(e)) => Err(SandboxError::SpawnFailure {
            program: program.clone(),
            reason: e.to_string(),
        }),
        Some(Ok(status)) => Ok(ExecOutcome {
            exit_code: Some(status.code().unwrap_or(-1)),
            stdout,
            stderr,
            duration_ms,
            violations: Vec::new(),
        }),
    }
}

fn reader_thread<R: Read + Send + 'static>(mut pipe: R) -> std::thread::JoinHandle<Vec<u8>> {
    std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = pipe.read_to_end(&mut buf);
        buf
    })
}

/// Advisory backend: static write-target screening plus a post-run diff of
/// the working directory.
#[derive(Debug, Clone)]
pub struct CheckingBackend {
    /// Upper bound on entries visited when snapshotting the workdir.
    pub max_snapshot_entries: usize,
}

impl Default for CheckingBackend {
    fn default() -> Self {
        Self {
            max_snapshot_entries: 20_000,
        }
    }
}

impl SandboxBackend for CheckingBackend {
    fn name(&self) -> &'static str {
        "checking"
    }

    fn execute(
        &self,
        spec: &SandboxSpec,
        req: &ExecRequest<'_>,
    ) -> Result<ExecOutcome, SandboxError> {
        if spec.mode == SandboxMode::FullAccess {
            return spawn_and_wait(req);
        }
        let screened = screen_command(spec, req.argv, req.workdir);
        if !screened.is_empty() {
            return Ok(ExecOutcome {
                exit_code: None,
                stdout: String::new(),
                stderr: format!(
                    "sandbox: blocked write outside writable roots: {}",
                    screened
                        .iter()
                        .map(|p| p.display().to_string())
                        .collect::<Vec<_>>()
                        .join(", ")
                ),
                duration_ms: 0,
                violations: screened,
            });
        }
        let watch_workdir = !spec.is_writable(req.workdir);
        let before = watch_workdir.then(|| snapshot(req.workdir, self.max_snapshot_entries));
        let mut outcome = spawn_and_wait(req)?;
        if let Some(before) = before {
            let after = snapshot(req.workdir, self.max_snapshot_entries);
            let mut changed: Vec<PathBuf> = after
                .iter()
                .filter(|(path, meta)| before.get(*path) != Some(meta))
                .map(|(path, _)| path.clone())
                .chain(before.keys().filter(|p| !after.contains_key(*p)).cloned())
                .filter(|p| !spec.is_writable(p))
                .collect();
            changed.sort();
            changed.dedup();
            outcome.violations = changed;
        }
        Ok(outcome)
    }
}

type Snapshot = BTreeMap<PathBuf, (u64, Option<SystemTime>, bool)>;

fn snapshot(root: &Path, limit: usize) -> Snapshot {
    let mut out = Snapshot::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = std::fs::read_dir(&dir) else {
            continue;
        };
        for entry in entries.flatten() {
            if out.len() >= limit {
                return out;
            }
            let path = entry.path();
            // git rewrites its index on read-only commands such as `git status`.
            if entry.file_name() == ".git" {
                continue;
            }
            let Ok(meta) = entry.metadata() else { continue };
            if meta.is_dir() {
                stack.push(path.clone());
                out.insert(path, (0, None, true));
            } else {
                out.insert(path, (meta.len(), meta.modified().ok(), false));
            }
        }
    }
    out
}

const WRITE_COMMANDS: &[&str] = &[
    "touch", "mkdir", "rm", "rmdir", "cp", "mv", "tee", "ln", "truncate", "install", "chmod",
    "chown",
];

/// Paths a command would write that fall outside the writable roots.
///
/// Recognises common writing utilities and `>`/`>>` redirections, in plain
/// argv form and inside `sh -c` scripts.
pub fn screen_command(spec: &SandboxSpec, argv: &[String], workdir: &Path) -> Vec<PathBuf> {
    if spec.mode == SandboxMode::FullAccess {
        return Vec::new();
    }
    let mut targets = Vec::new();
    let script = crate::guardian::render_command(argv);
    for segment in script.split(['\n', ';', '|', '&']) {
        let Ok(words) = shell_words::split(segment) else {
            continue;
        };
        collect_targets(&words, &mut targets);
    }
    let mut out: Vec<PathBuf> = targets
        .into_iter()
        .filter(|t| t != "/dev/null" && !t.is_empty())
        .map(|t| normalize_path(workdir, Path::new(&t)))
        .filter(|p| !spec.is_writable(p))
        .collect();
    out.sort();
    out.dedup();
    out
}

fn collect_targets(words: &[String], targets: &mut Vec<String>) {
    let mut iter = words.iter().peekable();
    let mut command: Vec<&String> = Vec::new();
    while let Some(word) = iter.next() {
        if let Some(rest) = word.strip_prefix(">>").or_else(|| word.strip_prefix('>')) {
            if rest.is_empty() {
                if let Some(next) = iter.next() {
                    targets.push(next.clone());
                }
            } else {
                targets.push(rest.to_string());
            }
            continue;
        }
        if let Some((_, rest)) = word.split_once("2>") {
            if !rest.is_empty() && !rest.starts_with('&') {
                targets.push(rest.trim_start_matches('>').to_string());
            }
            continue;
        }
        command.push(word);
    }
    let Some((program, args)) = command.split_first() else {
        return;
    };
    let program = program.rsplit('/').next().unwrap_or(program);
    let operands: Vec<&String> = args
        .iter()
        .copied()
        .filter(|a| !a.starts_with('-'))
        .collect();
    match program {
        "cp" | "ln" | "install" => targets.extend(operands.last().map(|s| s.to_string())),
        "chmod" | "chown" => targets.extend(operands.iter().skip(1).map(|s| s.to_string())),
        "dd" => targets.extend(
            args.iter()
                .filter_map(|a| a.strip_prefix("of="))
                .map(String::from),
        ),
        p if WRITE_COMMANDS.contains(&p) => targets.extend(operands.iter().map(|s| s.to_string())),
        _ => {}
    }
}
