//! The agent loop: send context, run returned tool calls, append results,
//! repeat until the model answers without tools or the turn cap is hit.

pub mod agents;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde_json::{json, Value};

use crate::compaction::{
    full_compact, microcompact, snip_compact, CompactionConfig, GhostSnapshot, RestoreCandidate,
    Summarizer,
};
use crate::context::{should_compact, BudgetConfig, BudgetedOutput, ContextLimits};
use crate::execpolicy::PolicyQuery;
use crate::features::{EnhancementHooks, Flag, FlagSet};
use crate::guardian::{Guardian, GuardianPatterns, ReviewModel};
use crate::permissions::{PermissionContext, PermissionQuery, Prompter};
use crate::protocol::{AgentEvent, EventPayload, InputItem, ToolCallSpec, ToolStatus};
use crate::sandbox::{SandboxBackend, SandboxMode};
use crate::state::{AgentRecord, SessionRecord, Store};
use crate::tools::{
    dispatch_batch, object_schema, DispatchLimits, ToolContext, ToolInvocation, ToolRegistry,
    ToolResult,
};
use crate::transport::{
    send_with_recovery, KeyRing, ModelRequest, ModelTransport, RecoveryPolicy,
    SessionTransportState, Sleeper, ThreadSleeper, ToolDeclaration,
};

pub use agents::{AgentNode, AgentStatus, AgentTree, SpawnBounds, SpawnError, ROOT_AGENT};

pub const SPAWN_TOOL: &str = "spawn_agent";

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub session_id: String,
    pub model_id: String,
    pub max_turns: u32,
    pub sandbox_mode: SandboxMode,
    pub flags: FlagSet,
    pub limits: ContextLimits,
    pub budgets: BudgetConfig,
    pub compaction: CompactionConfig,
    pub dispatch: DispatchLimits,
    pub interactive: bool,
    pub recovery: RecoveryPolicy,
    pub spawn_bounds: SpawnBounds,
    pub system_prompt: Option<String>,
}

impl SessionConfig {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            session_id: format!("session-{}", crate::state::now_ms()),
            model_id: model_id.into(),
            max_turns: 50,
            sandbox_mode: SandboxMode::ReadOnly,
            flags: FlagSet::defaults(),
            limits: ContextLimits::default(),
            budgets: BudgetConfig::default(),
            compaction: CompactionConfig::default(),
            dispatch: DispatchLimits::default(),
            interactive: false,
            recovery: RecoveryPolicy::default(),
            spawn_bounds: SpawnBounds::default(),
            system_prompt: None,
        }
    }

    /// JSON snapshot stored with the session record.
    pub fn snapshot(&self) -> Value {
        let flags: BTreeMap<&str, bool> =
            self.flags.iter().map(|(f, on, _)| (f.name(), on)).collect();
        json!({
            "model_id": self.model_id,
            "max_turns": self.max_turns,
            "sandbox_mode": self.sandbox_mode.cli_name(),
            "interactive": self.interactive,
            "model_context_tokens": self.limits.model_context_tokens,
            "compact_trigger_fraction": self.limits.compact_trigger_fraction,
            "tool_result_char_threshold": self.budgets.tool_result_char_threshold,
            "max_in_flight": self.dispatch.max_in_flight(),
            "flags": flags,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    MaxTurnsReached,
    Failed,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub agent_id: String,
    pub outcome: Outcome,
    pub turns_used: u32,
    pub events: Vec<AgentEvent>,
    pub final_text: Option<String>,
    pub history: Vec<InputItem>,
    pub ghosts: Vec<GhostSnapshot>,
    pub usage: (u64, u64),
}

impl RunSummary {
    pub fn tool_call_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e.payload, EventPayload::ToolCall { .. }))
            .count()
    }
}

/// Builds the shared tool context. The guardian is wired only when its flag
/// is on; the prompter only for interactive sessions.
pub fn build_tool_context(
    config: &SessionConfig,
    workspace_root: PathBuf,
    policy: crate::execpolicy::MergedPolicy,
    backend: Box<dyn SandboxBackend>,
    review_model: Option<Box<dyn ReviewModel>>,
    prompter: Option<Box<dyn Prompter>>,
    hooks: &EnhancementHooks,
) -> ToolContext {
    let guardian = hooks
        .fire(&config.flags, Flag::Guardian)
        .then(|| Guardian::new(GuardianPatterns::default(), review_model));
    let prompter = if config.interactive { prompter } else { None };
    let permissions = PermissionContext::new(policy, guardian, prompter);
    ToolContext::new(
        workspace_root,
        config.sandbox_mode,
        backend,
        permissions,
        config.budgets.clone(),
    )
    .with_full_access_opt_in(config.sandbox_mode == SandboxMode::FullAccess)
}

fn spawn_tool_declaration() -> ToolDeclaration {
    ToolDeclaration {
        kind: Default::default(),
        name: SPAWN_TOOL.into(),
        description:
            "Start a child agent on a sub-task; its final answer is returned as the tool result."
                .into(),
        parameters: object_schema(json!({"task": {"type": "string"}}), &["task"]),
    }
}

type Observer = Box<dyn Fn(&AgentEvent)>;

pub struct Runner {
    pub config: SessionConfig,
    transport: Arc<dyn ModelTransport>,
    keys: Mutex<KeyRing>,
    transport_state: Mutex<SessionTransportState>,
    registry: ToolRegistry,
    tools: ToolContext,
    hooks: Arc<EnhancementHooks>,
    sleeper: Box<dyn Sleeper>,
    summarizer: Option<Box<dyn Summarizer>>,
    store: Option<Mutex<Store>>,
    observer: Option<Observer>,
    tree: AgentTree,
    clock: Instant,
    created_at_ms: u64,
}

impl std::fmt::Debug for Runner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runner")
            .field("session_id", &self.config.session_id)
            .field("model_id", &self.config.model_id)
            .field("tools", &self.registry)
            .finish()
    }
}

impl Runner {
    pub fn new(
        config: SessionConfig,
        transport: Arc<dyn ModelTransport>,
        keys: KeyRing,
        registry: ToolRegistry,
        tools: ToolContext,
        hooks: Arc<EnhancementHooks>,
    ) -> Self {
        let tree = AgentTree::new(config.spawn_bounds, Vec::new());
        Self {
            config,
            transport,
            keys: Mutex::new(keys),
            transport_state: Mutex::new(SessionTransportState::default()),
            registry,
            tools,
            hooks,
            sleeper: Box::new(ThreadSleeper),
            summarizer: None,
            store: None,
            observer: None,
            tree,
            clock: Instant::now(),
            created_at_ms: crate::state::now_ms(),
        }
    }

    pub fn with_sleeper(mut self, sleeper: Box<dyn Sleeper>) -> Self {
        self.sleeper = sleeper;
        self
    }

    /// Replaces the default summarizer, which asks the session model.
    pub fn with_summarizer(mut self, summarizer: Box<dyn Summarizer>) -> Self {
        self.summarizer = Some(summarizer);
        self
    }

    pub fn with_store(mut self, store: Store) -> Self {
        self.store = Some(Mutex::new(store));
        self
    }

    /// Called with every root-agent event as it is emitted.
    pub fn with_observer(mut self, observer: impl Fn(&AgentEvent) + 'static) -> Self {
        self.observer = Some(Box::new(observer));
        self
    }

    pub fn tools(&self) -> &ToolContext {
        &self.tools
    }

    pub fn hooks(&self) -> &EnhancementHooks {
        &self.hooks
    }

    pub fn tree(&self) -> &AgentTree {
        &self.tree
    }

    pub fn into_store(self) -> Option<Store> {
        self.store.map(|s| s.into_inner().unwrap())
    }

    fn declarations(&self) -> Vec<ToolDeclaration> {
        let mut decls: Vec<ToolDeclaration> = self
            .registry
            .specs()
            .iter()
            .map(ToolDeclaration::from)
            .collect();
        if self.config.flags.is_enabled(Flag::MultiAgent) {
            decls.push(spawn_tool_declaration());
        }
        decls
    }

    fn store_key(&self, agent_id: &str) -> String {
        if agent_id == ROOT_AGENT {
            self.config.session_id.clone()
        } else {
            format!("{}/{agent_id}", self.config.session_id)
        }
    }

    /// Runs the root agent on `task`.
    pub fn run(&self, task: &str) -> RunSummary {
        self.hooks.fire(&self.config.flags, Flag::StartupPrefetch);
        let mut history = Vec::new();
        if let Some(prompt) = &self.config.system_prompt {
            history.push(InputItem::system("system-0", prompt.clone()));
        }
        history.push(InputItem::user("user-0", task));
        self.tree.set_history(ROOT_AGENT, history.clone());
        let summary = self.run_agent(ROOT_AGENT, None, 0, history);
        if summary.outcome == Outcome::Completed {
            self.hooks.fire(&self.config.flags, Flag::MemorySystem);
            self.hooks.fire(&self.config.flags, Flag::AutoMemory);
        }
        summary
    }

    fn persist(&self, agent_id: &str, status: &str, history: &[InputItem]) -> Result<(), String> {
        let Some(store) = &self.store else {
            return Ok(());
        };
        let mut store = store.lock().unwrap();
        let key = self.store_key(agent_id);
        let mut record = SessionRecord::new(key.clone(), self.config.snapshot());
        record.created_at_ms = self.created_at_ms;
        record.status = status.to_string();
        store
            .persist_session(&record, history)
            .map_err(|e| e.to_string())?;
        Ok(())
    }

    fn record_agent(&self, node: &AgentNode, status: AgentStatus) {
        let Some(store) = &self.store else { return };
        let record = AgentRecord {
            agent_id: self.store_key(&node.agent_id),
            session_id: self.config.session_id.clone(),
            parent_id: node.parent_id.as_deref().map(|p| self.store_key(p)),
            depth: node.depth,
            status: status.as_str().to_string(),
        };
        let _ = store.lock().unwrap().upsert_agent(&record);
    }

    fn run_agent(
        &self,
        agent_id: &str,
        parent: Option<&str>,
        depth: u32,
        history: Vec<InputItem>,
    ) -> RunSummary {
        let mut run = AgentRun {
            runner: self,
            agent_id: agent_id.to_string(),
            is_root: parent.is_none(),
            events: Vec::new(),
            history,
            ghosts: Vec::new(),
            touched: Vec::new(),
            usage: (0, 0),
        };
        let node = AgentNode {
            agent_id: agent_id.to_string(),
            parent_id: parent.map(str::to_string),
            depth,
            children: Vec::new(),
            history: Vec::new(),
            status: AgentStatus::Running,
        };
        if self.store.is_some() {
            if let Err(e) = self.persist(agent_id, "running", &run.history) {
                run.emit(
                    0,
                    EventPayload::Error {
                        kind: "state".into(),
                        message: e,
                        terminal: false,
                    },
                );
            }
            self.record_agent(&node, AgentStatus::Running);
        }
        let (outcome, turns_used, final_text) = run.drive();
        let status = match outcome {
            Outcome::Completed => AgentStatus::Done,
            _ => AgentStatus::Failed,
        };
        self.tree.set_history(agent_id, run.history.clone());
        self.tree.set_status(agent_id, status);
        if self.store.is_some() {
            let label = match outcome {
                Outcome::Completed => "completed",
                Outcome::MaxTurnsReached => "max_turns_reached",
                Outcome::Failed => "failed",
            };
            let _ = self.persist(agent_id, label, &run.history);
            self.record_agent(&node, status);
        }
        RunSummary {
            agent_id: agent_id.to_string(),
            outcome,
            turns_used,
            events: run.events,
            final_text,
            history: run.history,
            ghosts: run.ghosts,
            usage: run.usage,
        }
    }

    fn summarize_with_model(&self, prompt: &str) -> Result<String, String> {
        let request = ModelRequest::new(
            self.config.model_id.clone(),
            vec![InputItem::user("summary-request", prompt)],
            Vec::new(),
        );
        let mut keys = self.keys.lock().unwrap();
        let mut state = self.transport_state.lock().unwrap();
        let out = send_with_recovery(
            self.transport.as_ref(),
            request,
            &mut keys,
            &self.config.recovery,
            &mut state,
            self.sleeper.as_ref(),
        )
        .map_err(|e| e.to_string())?;
        out.response
            .text()
            .ok_or_else(|| "summarizer returned no text".to_string())
    }

    /// Handles one `spawn_agent` call: permission check, bound check, then
    /// the child's own loop. The child's answer comes back as the result.
    fn spawn(&self, parent_id: &str, call: &ToolCallSpec) -> ToolResult {
        let Some(task) = call.arguments.get("task").and_then(Value::as_str) else {
            return ToolResult::error(&call.call_id, "spawn_agent requires a string `task`");
        };
        let query = PermissionQuery {
            tool_name: SPAWN_TOOL.into(),
            policy: PolicyQuery::command(&[SPAWN_TOOL]),
            sandbox_mode: self.tools.sandbox_mode(),
            shell_argv: None,
            summary: format!("{SPAWN_TOOL} {task}"),
        };
        let decision = self.tools.permissions.can_use_tool(&query);
        if !decision.is_allowed() {
            return ToolResult {
                call_id: call.call_id.clone(),
                status: ToolStatus::Denied,
                output: BudgetedOutput::Inline(format!("spawn denied: {}", decision.reason)),
                exit_code: None,
                duration_ms: 0,
            };
        }
        let child = match self.tree.spawn_child(parent_id, task) {
            Ok(child) => child,
            Err(e) => return ToolResult::error(&call.call_id, format!("spawn rejected: {e}")),
        };
        self.hooks.fire(&self.config.flags, Flag::MultiAgent);
        let summary = self.run_agent(
            &child.agent_id,
            Some(parent_id),
            child.depth,
            child.history.clone(),
        );
        let (status, text) = match summary.outcome {
            Outcome::Completed => (
                ToolStatus::Ok,
                format!(
                    "{} completed: {}",
                    child.agent_id,
                    summary.final_text.unwrap_or_default()
                ),
            ),
            Outcome::MaxTurnsReached => (
                ToolStatus::Error,
                format!("{} reached its turn limit", child.agent_id),
            ),
            Outcome::Failed => (ToolStatus::Error, format!("{} failed", child.agent_id)),
        };
        ToolResult {
            call_id: call.call_id.clone(),
            status,
            output: BudgetedOutput::Inline(text),
            exit_code: None,
            duration_ms: 0,
        }
    }
}

struct AgentRun<'r> {
    runner: &'r Runner,
    agent_id: String,
    is_root: bool,
    events: Vec<AgentEvent>,
    history: Vec<InputItem>,
    ghosts: Vec<GhostSnapshot>,
    /// Paths written by apply_patch, most recent first.
    touched: Vec<String>,
    usage: (u64, u64),
}

impl AgentRun<'_> {
    fn emit(&mut self, turn_index: u32, payload: EventPayload) {
        let event = AgentEvent {
            turn_index,
            timestamp_ms: self.runner.clock.elapsed().as_millis() as u64,
            payload,
        };
        if let Some(store) = &self.runner.store {
            let _ = store
                .lock()
                .unwrap()
                .append_event(&self.runner.store_key(&self.agent_id), &event);
        }
        if self.is_root {
            if let Some(observer) = &self.runner.observer {
                observer(&event);
            }
        }
        self.events.push(event);
    }

    fn restore_candidates(&self) -> Vec<RestoreCandidate> {
        let root = &self.runner.tools.workspace_root;
        self.touched
            .iter()
            .filter_map(|path| {
                let content = std::fs::read_to_string(root.join(path)).ok()?;
                Some(RestoreCandidate {
                    path: path.clone(),
                    content,
                })
            })
            .collect()
    }

    fn compact(&mut self, turn: u32) {
        let cfg = &self.runner.config;
        let mut history = self.history.clone();
        if self
            .runner
            .hooks
            .fire(&cfg.flags, Flag::MultiStrategyCompaction)
        {
            history = microcompact(&history, &cfg.compaction).0;
            if !should_compact(&history, &cfg.limits) {
                self.history = history;
                return;
            }
            history = snip_compact(&history, &cfg.compaction).0;
            if !should_compact(&history, &cfg.limits) {
                self.history = history;
                return;
            }
        }
        let candidates = self.restore_candidates();
        let runner = self.runner;
        let model = move |prompt: &str| runner.summarize_with_model(prompt);
        let summarizer: &dyn Summarizer = match &self.runner.summarizer {
            Some(s) => s.as_ref(),
            None => &model,
        };
        match full_compact(
            &history,
            &cfg.compaction,
            cfg.limits.model_context_tokens,
            &candidates,
            summarizer,
            turn,
        ) {
            Ok((compacted, _, ghost)) => {
                self.history = compacted;
                self.ghosts.push(ghost);
            }
            Err(e) => {
                self.history = history;
                self.emit(
                    turn,
                    EventPayload::Error {
                        kind: "compaction".into(),
                        message: e.to_string(),
                        terminal: false,
                    },
                );
            }
        }
    }

    fn drive(&mut self) -> (Outcome, u32, Option<String>) {
        let runner = self.runner;
        let cfg = &runner.config;
        let declarations = runner.declarations();
        let mut previous_response_id: Option<String> = None;
        for turn in 0..cfg.max_turns.max(1) {
            self.emit(turn, EventPayload::TurnStarted);
            runner.tools.permissions.reset_turn_cache();
            if turn > 0 {
                runner.hooks.fire(&cfg.flags, Flag::SystemReminders);
            }
            if should_compact(&self.history, &cfg.limits) {
                self.compact(turn);
            }

            let mut request = ModelRequest::new(
                cfg.model_id.clone(),
                self.history.clone(),
                declarations.clone(),
            );
            request.previous_response_id = previous_response_id.clone();
            let sent = {
                let mut keys = runner.keys.lock().unwrap();
                let mut state = runner.transport_state.lock().unwrap();
                send_with_recovery(
                    runner.transport.as_ref(),
                    request,
                    &mut keys,
                    &cfg.recovery,
                    &mut state,
                    runner.sleeper.as_ref(),
                )
            };
            let outcome = match sent {
                Ok(outcome) => outcome,
                Err(e) => {
                    self.emit(
                        turn,
                        EventPayload::Error {
                            kind: "transport".into(),
                            message: e.to_string(),
                            terminal: true,
                        },
                    );
                    return (Outcome::Failed, turn + 1, None);
                }
            };
            // Rewrites made during recovery (dropped or trimmed items) stick.
            self.history = outcome.request.input;
            let response = outcome.response;
            previous_response_id = (!response.id.is_empty()).then(|| response.id.clone());
            self.usage.0 += response.usage.input_tokens;
            self.usage.1 += response.usage.output_tokens;
            self.emit(
                turn,
                EventPayload::TokenUsage {
                    input_tokens: response.usage.input_tokens,
                    output_tokens: response.usage.output_tokens,
                },
            );
            runner.hooks.fire(&cfg.flags, Flag::CostTracking);
            self.history.extend(response.output.iter().cloned());

            let calls = response.tool_calls();
            if calls.is_empty() {
                let final_text = response.text();
                self.checkpoint(turn);
                self.emit(
                    turn,
                    EventPayload::TurnCompleted {
                        final_text: final_text.clone(),
                    },
                );
                return (Outcome::Completed, turn + 1, final_text);
            }

            for call in &calls {
                self.emit(
                    turn,
                    EventPayload::ToolCall {
                        call_id: call.call_id.clone(),
                        name: call.name.clone(),
                        arguments: call.arguments.clone(),
                    },
                );
            }
            let results = self.execute_calls(&calls);
            for (call, result) in calls.iter().zip(results) {
                if call.name == "apply_patch" && result.status == ToolStatus::Ok {
                    self.note_touched(call);
                }
                let text = result.text();
                self.emit(
                    turn,
                    EventPayload::ToolResult {
                        call_id: result.call_id.clone(),
                        status: result.status,
                        output: text.clone(),
                        exit_code: result.exit_code,
                    },
                );
                self.history.push(InputItem::tool_result(
                    format!("{}-result", call.call_id),
                    call.call_id.clone(),
                    text,
                ));
            }
            self.checkpoint(turn);
            self.emit(turn, EventPayload::TurnCompleted { final_text: None });
        }
        (Outcome::MaxTurnsReached, cfg.max_turns.max(1), None)
    }

    fn checkpoint(&mut self, turn: u32) {
        let runner = self.runner;
        if !runner.hooks.fire(&runner.config.flags, Flag::AppState) && runner.store.is_none() {
            return;
        }
        if let Err(e) = runner.persist(&self.agent_id, "running", &self.history) {
            self.emit(
                turn,
                EventPayload::Error {
                    kind: "state".into(),
                    message: e,
                    terminal: false,
                },
            );
        }
    }

    fn note_touched(&mut self, call: &ToolCallSpec) {
        let Ok(inv) = ToolInvocation::from_call(call) else {
            return;
        };
        let crate::tools::ParsedInvocation::Patch { text } = &inv.parsed else {
            return;
        };
        let Ok(doc) = crate::tools::patch::parse_patch(text) else {
            return;
        };
        for path in doc.paths() {
            let path = path.to_string_lossy().into_owned();
            self.touched.retain(|p| *p != path);
            self.touched.insert(0, path);
        }
    }

    /// Results in call order. Spawns run one at a time after the batch.
    fn execute_calls(&mut self, calls: &[ToolCallSpec]) -> Vec<ToolResult> {
        let runner = self.runner;
        let mut results: Vec<Option<ToolResult>> = vec![None; calls.len()];
        let mut batch = Vec::new();
        let mut batch_slots = Vec::new();
        for (i, call) in calls.iter().enumerate() {
            if call.name == SPAWN_TOOL && runner.config.flags.is_enabled(Flag::MultiAgent) {
                continue;
            }
            match ToolInvocation::from_call(call) {
                Ok(inv) => {
                    batch.push(inv);
                    batch_slots.push(i);
                }
                Err(e) => results[i] = Some(ToolResult::error(&call.call_id, e.to_string())),
            }
        }
        let dispatched = dispatch_batch(
            &batch,
            &runner.registry,
            &runner.tools,
            runner.config.dispatch,
        );
        for (slot, result) in batch_slots.into_iter().zip(dispatched) {
            results[slot] = Some(result);
        }
        for (i, call) in calls.iter().enumerate() {
            if results[i].is_none() {
                results[i] = Some(runner.spawn(&self.agent_id, call));
            }
        }
        results
            .into_iter()
            .map(|r| r.expect("every slot filled"))
            .collect()
    }
}

/// Wires a [`Runner`] from a config, a workspace and a transport.
pub struct RunnerBuilder {
    config: SessionConfig,
    workspace: PathBuf,
    policy: crate::execpolicy::MergedPolicy,
    backend: crate::sandbox::BackendKind,
    keys: Vec<String>,
    registry: ToolRegistry,
    review_model: Option<Box<dyn ReviewModel>>,
    prompter: Option<Box<dyn Prompter>>,
    sleeper: Option<Box<dyn Sleeper>>,
    summarizer: Option<Box<dyn Summarizer>>,
    store: Option<Store>,
    hooks: Arc<EnhancementHooks>,
}

impl RunnerBuilder {
    pub fn new(config: SessionConfig, workspace: impl Into<PathBuf>) -> Self {
        Self {
            config,
            workspace: workspace.into(),
            policy: crate::config::policy_from_documents("", "", "")
                .expect("built-in policy parses"),
            backend: Default::default(),
            keys: vec!["test-key".into()],
            registry: crate::tools::builtin_registry(),
            review_model: None,
            prompter: None,
            sleeper: None,
            summarizer: None,
            store: None,
            hooks: Arc::new(EnhancementHooks::new()),
        }
    }

    pub fn policy(mut self, policy: crate::execpolicy::MergedPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn backend(mut self, backend: crate::sandbox::BackendKind) -> Self {
        self.backend = backend;
        self
    }

    /// Ignored when empty.
    pub fn keys(mut self, keys: Vec<String>) -> Self {
        if !keys.is_empty() {
            self.keys = keys;
        }
        self
    }

    pub fn registry(mut self, registry: ToolRegistry) -> Self {
        self.registry = registry;
        self
    }

    pub fn review_model(mut self, model: Box<dyn ReviewModel>) -> Self {
        self.review_model = Some(model);
        self
    }

    pub fn prompter(mut self, prompter: Box<dyn Prompter>) -> Self {
        self.prompter = Some(prompter);
        self
    }

    pub fn sleeper(mut self, sleeper: Box<dyn Sleeper>) -> Self {
        self.sleeper = Some(sleeper);
        self
    }

    pub fn summarizer(mut self, summarizer: Box<dyn Summarizer>) -> Self {
        self.summarizer = Some(summarizer);
        self
    }

    pub fn store(mut self, store: Store) -> Self {
        self.store = Some(store);
        self
    }

    /// Shares a hook counter across several runners.
    pub fn hooks(mut self, hooks: Arc<EnhancementHooks>) -> Self {
        self.hooks = hooks;
        self
    }

    pub fn build(self, transport: Arc<dyn ModelTransport>) -> Runner {
        let tools = build_tool_context(
            &self.config,
            self.workspace,
            self.policy,
            self.backend.build(),
            self.review_model,
            self.prompter,
            &self.hooks,
        );
        let keys = KeyRing::new(self.keys).expect("builder keeps at least one key");
        let mut runner = Runner::new(
            self.config,
            transport,
            keys,
            self.registry,
            tools,
            self.hooks,
        );
        if let Some(s) = self.sleeper {
            runner = runner.with_sleeper(s);
        }
        if let Some(s) = self.summarizer {
            runner = runner.with_summarizer(s);
        }
        if let Some(s) = self.store {
            runner = runner.with_store(s);
        }
        runner
    }
}
