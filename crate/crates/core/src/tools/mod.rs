//! Tool registry, the policy → approval → execution orchestrator and bounded
//! concurrent dispatch.

pub mod handlers;
pub mod patch;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde_json::{json, Value};
use thiserror::Error;

use crate::context::{budget_or_truncate, BudgetConfig, BudgetedOutput};
use crate::permissions::{ApprovalDecision, PermissionContext, PermissionQuery};
use crate::protocol::{ToolCallSpec, ToolStatus};
use crate::sandbox::{resolve_spec, SandboxBackend, SandboxError, SandboxMode, SandboxSpec};

pub use handlers::{builtin_registry, list_dir};

pub const DEFAULT_SHELL_TIMEOUT_MS: u64 = 60_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ToolError {
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error("tool `{0}` is already registered")]
    DuplicateTool(String),
    #[error("invalid arguments for `{tool}`: {reason}")]
    InvalidArguments { tool: String, reason: String },
    #[error("max_in_flight must be at least 1")]
    InvalidLimits,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsedInvocation {
    Shell {
        argv: Vec<String>,
        workdir: Option<PathBuf>,
        timeout_ms: u64,
    },
    Patch {
        text: String,
    },
    ListDir {
        path: PathBuf,
        depth: usize,
    },
    RequestPermissions {
        mode: SandboxMode,
    },
    /// Tools whose arguments are opaque to the kernel (delegates, custom
    /// handlers).
    Opaque,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolInvocation {
    pub call_id: String,
    pub tool_name: String,
    pub arguments: Value,
    pub parsed: ParsedInvocation,
}

fn invalid(tool: &str, reason: impl Into<String>) -> ToolError {
    ToolError::InvalidArguments {
        tool: tool.to_string(),
        reason: reason.into(),
    }
}

impl ToolInvocation {
    pub fn new(
        call_id: impl Into<String>,
        tool_name: impl Into<String>,
        arguments: Value,
    ) -> Result<Self, ToolError> {
        let tool_name = tool_name.into();
        let parsed = parse_arguments(&tool_name, &arguments)?;
        Ok(Self {
            call_id: call_id.into(),
            tool_name,
            arguments,
            parsed,
        })
    }

    pub fn from_call(call: &ToolCallSpec) -> Result<Self, ToolError> {
        Self::new(
            call.call_id.clone(),
            call.name.clone(),
            call.arguments.clone(),
        )
    }
}

fn parse_arguments(tool: &str, args: &Value) -> Result<ParsedInvocation, ToolError> {
    let obj = args
        .as_object()
        .ok_or_else(|| invalid(tool, "arguments must be an object"))?;
    let str_field = |key: &str| obj.get(key).and_then(Value::as_str);
    Ok(match tool {
        "shell" => {
            let argv = match obj.get("command") {
                Some(Value::String(script)) => {
                    vec!["bash".to_string(), "-lc".to_string(), script.clone()]
                }
                Some(Value::Array(words)) => words
                    .iter()
                    .map(|w| w.as_str().map(String::from))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| invalid(tool, "command array must hold strings"))?,
                _ => return Err(invalid(tool, "missing `command`")),
            };
            if argv.is_empty() {
                return Err(invalid(tool, "empty command"));
            }
            let timeout_ms = match obj.get("timeout_ms") {
                None | Some(Value::Null) => DEFAULT_SHELL_TIMEOUT_MS,
                Some(v) => v
                    .as_u64()
                    .ok_or_else(|| invalid(tool, "timeout_ms must be a non-negative integer"))?,
            };
            ParsedInvocation::Shell {
                argv,
                workdir: str_field("workdir").map(PathBuf::from),
                timeout_ms,
            }
        }
        "apply_patch" => ParsedInvocation::Patch {
            text: str_field("patch")
                .or_else(|| str_field("input"))
                .ok_or_else(|| invalid(tool, "missing `patch`"))?
                .to_string(),
        },
        "list_dir" => ParsedInvocation::ListDir {
            path: PathBuf::from(str_field("path").unwrap_or(".")),
            depth: match obj.get("depth") {
                None | Some(Value::Null) => 1,
                Some(v) => v
                    .as_u64()
                    .ok_or_else(|| invalid(tool, "depth must be a non-negative integer"))?
                    as usize,
            },
        },
        "request_permissions" => ParsedInvocation::RequestPermissions {
            mode: str_field("mode")
                .ok_or_else(|| invalid(tool, "missing `mode`"))?
                .parse()
                .map_err(|e: SandboxError| invalid(tool, e.to_string()))?,
        },
        _ => ParsedInvocation::Opaque,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolResult {
    pub call_id: String,
    pub status: ToolStatus,
    pub output: BudgetedOutput,
    pub exit_code: Option<i32>,
    pub duration_ms: u64,
}

impl ToolResult {
    pub fn text(&self) -> String {
        self.output.render()
    }

    pub fn error(call_id: &str, message: impl Into<String>) -> Self {
        Self {
            call_id: call_id.to_string(),
            status: ToolStatus::Error,
            output: BudgetedOutput::Inline(message.into()),
            exit_code: None,
            duration_ms: 0,
        }
    }
}

/// What a handler produced, before budgeting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandlerOutput {
    pub status: ToolStatus,
    pub text: String,
    pub exit_code: Option<i32>,
}

impl HandlerOutput {
    pub fn ok(text: impl Into<String>) -> Self {
        Self {
            status: ToolStatus::Ok,
            text: text.into(),
            exit_code: None,
        }
    }

    pub fn error(text: impl Into<String>) -> Self {
        Self {
            status: ToolStatus::Error,
            text: text.into(),
            exit_code: None,
        }
    }
}

/// Name, description and JSON-schema parameters advertised to the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub parameters: Value,
}

pub trait ToolHandler: Send + Sync {
    fn spec(&self) -> ToolSpec;

    /// How this invocation is presented to the approval pipeline.
    fn permission_query(&self, inv: &ToolInvocation, ctx: &ToolContext) -> PermissionQuery {
        PermissionQuery {
            tool_name: inv.tool_name.clone(),
            policy: crate::execpolicy::PolicyQuery::command(std::slice::from_ref(&inv.tool_name)),
            sandbox_mode: ctx.sandbox_mode(),
            shell_argv: None,
            summary: format!("{} {}", inv.tool_name, inv.arguments),
        }
    }

    fn execute(&self, inv: &ToolInvocation, ctx: &ToolContext) -> HandlerOutput;
}

#[derive(Default, Clone)]
pub struct ToolRegistry {
    handlers: BTreeMap<String, Arc<dyn ToolHandler>>,
}

impl std::fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.handlers.keys()).finish()
    }
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        handler: Arc<dyn ToolHandler>,
    ) -> Result<(), ToolError> {
        let name = name.into();
        if self.handlers.contains_key(&name) {
            return Err(ToolError::DuplicateTool(name));
        }
        self.handlers.insert(name, handler);
        Ok(())
    }

    pub fn lookup(&self, name: &str) -> Result<&Arc<dyn ToolHandler>, ToolError> {
        self.handlers
            .get(name)
            .ok_or_else(|| ToolError::UnknownTool(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.handlers.keys().map(String::as_str).collect()
    }

    pub fn len(&self) -> usize {
        self.handlers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.handlers.is_empty()
    }

    pub fn specs(&self) -> Vec<ToolSpec> {
        self.handlers.values().map(|h| h.spec()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Policy,
    Approval,
    Execution,
}

/// Per-session state shared by every handler invocation.
pub struct ToolContext {
    pub workspace_root: PathBuf,
    sandbox_mode: Mutex<SandboxMode>,
    pub full_access_opt_in: bool,
    pub backend: Box<dyn SandboxBackend>,
    pub permissions: PermissionContext,
    pub budgets: BudgetConfig,
    trace: Mutex<Vec<(String, Stage)>>,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

impl std::fmt::Debug for ToolContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToolContext")
            .field("workspace_root", &self.workspace_root)
            .field("sandbox_mode", &self.sandbox_mode())
            .field("backend", &self.backend.name())
            .field("permissions", &self.permissions)
            .finish()
    }
}

impl ToolContext {
    pub fn new(
        workspace_root: PathBuf,
        sandbox_mode: SandboxMode,
        backend: Box<dyn SandboxBackend>,
        permissions: PermissionContext,
        budgets: BudgetConfig,
    ) -> Self {
        Self {
            workspace_root,
            sandbox_mode: Mutex::new(sandbox_mode),
            full_access_opt_in: false,
            backend,
            permissions,
            budgets,
            trace: Mutex::new(Vec::new()),
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
        }
    }

    pub fn with_full_access_opt_in(mut self, opt_in: bool) -> Self {
        self.full_access_opt_in = opt_in;
        self
    }

    pub fn sandbox_mode(&self) -> SandboxMode {
        *self.sandbox_mode.lock().unwrap()
    }

    pub fn set_sandbox_mode(&self, mode: SandboxMode) {
        *self.sandbox_mode.lock().unwrap() = mode;
    }

    pub fn sandbox_spec(&self) -> Result<SandboxSpec, SandboxError> {
        // Reaching full access at all (explicit flag or granted escalation)
        // is the opt-in.
        resolve_spec(self.sandbox_mode(), &self.workspace_root, true)
    }

    /// `(call_id, stage)` in the order stages were entered.
    pub fn trace(&self) -> Vec<(String, Stage)> {
        self.trace.lock().unwrap().clone()
    }

    pub fn clear_trace(&self) {
        self.trace.lock().unwrap().clear();
    }

    /// Highest number of handlers observed executing at once.
    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    pub fn reset_probe(&self) {
        self.peak_in_flight.store(0, Ordering::SeqCst);
    }

    fn record(&self, call_id: &str, stage: Stage) {
        self.trace
            .lock()
            .unwrap()
            .push((call_id.to_string(), stage));
    }
}

fn denied(inv: &ToolInvocation, decision: &ApprovalDecision, started: Instant) -> ToolResult {
    let layer = serde_json::to_value(decision.layer).unwrap_or(Value::Null);
    ToolResult {
        call_id: inv.call_id.clone(),
        status: ToolStatus::Denied,
        output: BudgetedOutput::Inline(format!(
            "denied by {} layer: {}",
            layer.as_str().unwrap_or("unknown"),
            decision.reason
        )),
        exit_code: None,
        duration_ms: started.elapsed().as_millis() as u64,
    }
}

/// Runs one invocation through policy, approval and execution.
pub fn orchestrate(
    inv: &ToolInvocation,
    registry: &ToolRegistry,
    ctx: &ToolContext,
) -> Result<ToolResult, ToolError> {
    let started = Instant::now();
    let handler = registry.lookup(&inv.tool_name)?;
    let query = handler.permission_query(inv, ctx);
    ctx.record(&inv.call_id, Stage::Policy);
    let decision = ctx.permissions.can_use_tool(&query);
    ctx.record(&inv.call_id, Stage::Approval);
    if !decision.is_allowed() {
        return Ok(denied(inv, &decision, started));
    }

    ctx.record(&inv.call_id, Stage::Execution);
    let now = ctx.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    ctx.peak_in_flight.fetch_max(now, Ordering::SeqCst);
    let out = handler.execute(inv, ctx);
    ctx.in_flight.fetch_sub(1, Ordering::SeqCst);

    let output = if out.status == ToolStatus::Ok {
        budget_or_truncate(&out.text, &ctx.budgets)
    } else {
        BudgetedOutput::Inline(out.text)
    };
    Ok(ToolResult {
        call_id: inv.call_id.clone(),
        status: out.status,
        output,
        exit_code: out.exit_code,
        duration_ms: started.elapsed().as_millis() as u64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DispatchLimits {
    max_in_flight: usize,
}

impl DispatchLimits {
    pub fn new(max_in_flight: usize) -> Result<Self, ToolError> {
        if max_in_flight == 0 {
            return Err(ToolError::InvalidLimits);
        }
        Ok(Self { max_in_flight })
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }
}

impl Default for DispatchLimits {
    fn default() -> Self {
        Self { max_in_flight: 4 }
    }
}

/// Orchestrates a batch with at most `max_in_flight` concurrent handlers.
/// Results come back in input order; failures are isolated per invocation.
pub fn dispatch_batch(
    invocations: &[ToolInvocation],
    registry: &ToolRegistry,
    ctx: &ToolContext,
    limits: DispatchLimits,
) -> Vec<ToolResult> {
    let run = |inv: &ToolInvocation| {
        orchestrate(inv, registry, ctx)
            .unwrap_or_else(|e| ToolResult::error(&inv.call_id, e.to_string()))
    };
    if invocations.len() <= 1 || limits.max_in_flight == 1 {
        return invocations.iter().map(run).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<ToolResult>>> =
        invocations.iter().map(|_| Mutex::new(None)).collect();
    let workers = limits.max_in_flight.min(invocations.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(inv) = invocations.get(i) else { break };
                let result =
                    std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(inv))).ok();
                *slots[i].lock().unwrap() = result;
            });
        }
    });
    slots
        .into_iter()
        .zip(invocations)
        .map(|(slot, inv)| {
            slot.into_inner()
                .unwrap()
                .unwrap_or_else(|| ToolResult::error(&inv.call_id, "handler panicked"))
        })
        .collect()
}

/// JSON-schema helper for handler specs.
pub(crate) fn object_schema(properties: Value, required: &[&str]) -> Value {
    json!({ "type": "object", "properties": properties, "required": required })
}
