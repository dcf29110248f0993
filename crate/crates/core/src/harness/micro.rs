//! Component micro-benchmarks. Each scenario times one operation in
//! isolation over many iterations after a short warm-up.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use super::eval::{corpus_text, mean_and_p50};
use crate::config::{merge_documents, policy_from_documents, AgentConfig};
use crate::context::{estimate_tokens, should_compact, BudgetConfig, ContextLimits};
use crate::execpolicy::{evaluate, merge_layers, parse_policy, Origin, PolicyQuery};
use crate::features::{Flag, FlagSet};
use crate::permissions::{PermissionContext, PromptReply};
use crate::protocol::InputItem;
use crate::sandbox::{BackendKind, SandboxMode};
use crate::state::{open_store, SessionRecord};
use crate::tools::handlers::{builtin_registry, ShellHandler};
use crate::tools::patch::parse_patch;
use crate::tools::{
    orchestrate, HandlerOutput, ToolContext, ToolHandler, ToolInvocation, ToolRegistry, ToolSpec,
};

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub iterations: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    /// Published reference mean for the same scenario.
    pub reference_ms: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MicroReport {
    pub scenarios: Vec<ScenarioReport>,
}

impl MicroReport {
    pub fn get(&self, name: &str) -> Option<&ScenarioReport> {
        self.scenarios.iter().find(|s| s.name == name)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Scenario | Iterations | Mean (ms) | P50 (ms) | Reference (ms) |\n|---|---:|---:|---:|---:|\n");
        for s in &self.scenarios {
            match &s.error {
                None => out.push_str(&format!(
                    "| {} | {} | {:.4} | {:.4} | {:.3} |\n",
                    s.name.replace('|', "\\|"),
                    s.iterations,
                    s.mean_ms,
                    s.p50_ms,
                    s.reference_ms
                )),
                Some(e) => out.push_str(&format!(
                    "| {} | error: {} | | | {:.3} |\n",
                    s.name.replace('|', "\\|"),
                    e,
                    s.reference_ms
                )),
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MicroOptions {
    /// Iterations for in-memory scenarios; process-spawning ones use a tenth.
    pub iterations: usize,
    pub warmup: usize,
}

impl Default for MicroOptions {
    fn default() -> Self {
        Self {
            iterations: 200,
            warmup: 5,
        }
    }
}

pub const ORCHESTRATOR_SKIP: &str = "Orchestrator (skip approval)";
pub const ORCHESTRATOR_APPROVAL: &str = "Orchestrator (with approval)";
pub const REGISTRY: &str = "Tool Registry (10 tools)";
pub const SHELL_ECHO: &str = "Shell Handler (echo)";
pub const SHELL_PIPE: &str = "Shell Handler (ls | head)";
pub const FULL_PIPELINE: &str = "Full Pipeline (orch->shell)";
pub const PATCH_ADD: &str = "Patch Parsing (add file)";
pub const PATCH_UPDATE: &str = "Patch Parsing (update hunks)";
pub const POLICY: &str = "ExecPolicy Matching (5 rules)";
pub const TOKENS: &str = "Token Estimation (2K words)";
pub const SHOULD_COMPACT: &str = "Should Compact Decision";
pub const STATE: &str = "SQLite State (session + 20 msgs)";
pub const CONFIG_MERGE: &str = "Config TOML Merge";
pub const FLAGS: &str = "Feature Flags Lookup";

struct Noop(&'static str);

impl ToolHandler for Noop {
    fn spec(&self) -> ToolSpec {
        ToolSpec {
            name: self.0.into(),
            description: "does nothing".into(),
            parameters: json!({"type": "object", "properties": {}}),
        }
    }

    fn execute(&self, _: &ToolInvocation, _: &ToolContext) -> HandlerOutput {
        HandlerOutput::ok("")
    }
}

const NOOP_NAMES: [&str; 10] = ["t0", "t1", "t2", "t3", "t4", "t5", "t6", "t7", "t8", "t9"];

fn noop_registry() -> ToolRegistry {
    let mut registry = ToolRegistry::new();
    for name in NOOP_NAMES {
        registry
            .register(name, Arc::new(Noop(name)))
            .expect("distinct names");
    }
    registry
}

fn context(root: &Path, policy_doc: &str, approve: bool) -> Result<ToolContext, String> {
    let policy = policy_from_documents("", "", policy_doc).map_err(|e| e.to_string())?;
    let prompter: Option<Box<dyn crate::permissions::Prompter>> = if approve {
        Some(Box::new(|_: &_, _: Option<&_>| Ok(PromptReply::Allow)))
    } else {
        None
    };
    Ok(ToolContext::new(
        root.to_path_buf(),
        SandboxMode::WorkspaceWrite,
        BackendKind::Checking.build(),
        PermissionContext::new(policy, None, prompter),
        BudgetConfig::with_spill_dir(root.join(".spill")),
    ))
}

fn measure(
    name: &str,
    reference_ms: f64,
    iterations: usize,
    warmup: usize,
    mut op: impl FnMut() -> Result<(), String>,
) -> ScenarioReport {
    let mut report = ScenarioReport {
        name: name.into(),
        iterations,
        mean_ms: 0.0,
        p50_ms: 0.0,
        reference_ms,
        error: None,
    };
    for _ in 0..warmup {
        if let Err(e) = op() {
            report.error = Some(e);
            return report;
        }
    }
    let mut samples = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let started = Instant::now();
        let result = op();
        samples.push(started.elapsed().as_secs_f64() * 1000.0);
        if let Err(e) = result {
            report.error = Some(e);
            return report;
        }
    }
    (report.mean_ms, report.p50_ms) = mean_and_p50(&samples);
    report
}

fn expect_ok(result: crate::tools::ToolResult) -> Result<(), String> {
    if result.status == crate::protocol::ToolStatus::Ok {
        Ok(())
    } else {
        Err(result.output.render())
    }
}

const ADD_PATCH: &str = "*** Begin Patch\n*** Add File: src/new.py\n+import sys\n+\n+def main():\n+    return 0\n*** End Patch\n";
const UPDATE_PATCH: &str = "*** Begin Patch\n*** Update File: src/app.py\n@@ def main():\n-    return 0\n+    return 1\n@@ def other():\n     x = 1\n-    y = 2\n+    y = 3\n*** End Patch\n";
const FIVE_RULES: &str = "\
allow prefix \"ls\"
allow prefix \"git status\"
deny prefix \"rm -rf\"
prompt prefix \"git push\"
allow prefix \"cargo test\"
";

pub fn run_micro(opts: MicroOptions) -> Result<MicroReport, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path().join("workspace");
    std::fs::create_dir(&root).map_err(|e| e.to_string())?;
    for i in 0..20 {
        std::fs::write(root.join(format!("file{i:02}.txt")), "x\n").map_err(|e| e.to_string())?;
    }
    let n = opts.iterations.max(1);
    let slow = (n / 10).max(1);
    let w = opts.warmup;
    let mut scenarios = Vec::new();

    let noops = noop_registry();
    let skip_ctx = context(&root, "allow prefix \"t0\"\n", false)?;
    let invocation = ToolInvocation::new("c", "t0", json!({})).map_err(|e| e.to_string())?;
    scenarios.push(measure(ORCHESTRATOR_SKIP, 0.030, n, w, || {
        skip_ctx.permissions.reset_turn_cache();
        expect_ok(orchestrate(&invocation, &noops, &skip_ctx).map_err(|e| e.to_string())?)
    }));
    let approve_ctx = context(&root, "", true)?;
    scenarios.push(measure(ORCHESTRATOR_APPROVAL, 0.029, n, w, || {
        approve_ctx.permissions.reset_turn_cache();
        expect_ok(orchestrate(&invocation, &noops, &approve_ctx).map_err(|e| e.to_string())?)
    }));
    scenarios.push(measure(REGISTRY, 0.033, n, w, || {
        let registry = noop_registry();
        for name in NOOP_NAMES {
            registry.lookup(name).map_err(|e| e.to_string())?;
        }
        Ok(())
    }));

    let shell_ctx = context(&root, "allow prefix \"echo\"\n", false)?;
    let echo = ToolInvocation::new("c", "shell", json!({"command": ["echo", "hello"]}))
        .map_err(|e| e.to_string())?;
    let pipe = ToolInvocation::new("c", "shell", json!({"command": "ls | head"}))
        .map_err(|e| e.to_string())?;
    scenarios.push(measure(SHELL_ECHO, 3.319, slow, w, || {
        let out = ShellHandler.execute(&echo, &shell_ctx);
        (out.text == "hello\n").then_some(()).ok_or(out.text)
    }));
    scenarios.push(measure(SHELL_PIPE, 6.672, slow, w, || {
        let out = ShellHandler.execute(&pipe, &shell_ctx);
        (out.text.lines().count() == 10)
            .then_some(())
            .ok_or(out.text)
    }));
    let builtins = builtin_registry();
    scenarios.push(measure(FULL_PIPELINE, 3.512, slow, w, || {
        shell_ctx.permissions.reset_turn_cache();
        expect_ok(orchestrate(&echo, &builtins, &shell_ctx).map_err(|e| e.to_string())?)
    }));

    scenarios.push(measure(PATCH_ADD, 0.002, n, w, || {
        parse_patch(ADD_PATCH).map(drop).map_err(|e| e.to_string())
    }));
    scenarios.push(measure(PATCH_UPDATE, 0.003, n, w, || {
        parse_patch(UPDATE_PATCH)
            .map(drop)
            .map_err(|e| e.to_string())
    }));

    let policy = merge_layers(vec![
        parse_policy(Origin::User, FIVE_RULES).map_err(|e| e.to_string())?
    ])
    .map_err(|e| e.to_string())?;
    let query = PolicyQuery::command(&["cargo", "test", "--workspace"]);
    scenarios.push(measure(POLICY, 0.001, n, w, || {
        let d = evaluate(&policy, &query);
        d.matched_rule
            .is_some()
            .then_some(())
            .ok_or_else(|| "no rule matched".into())
    }));

    let corpus = corpus_text();
    scenarios.push(measure(TOKENS, 0.001, n, w, || {
        (estimate_tokens(std::hint::black_box(&corpus)) > 0)
            .then_some(())
            .ok_or_else(|| "zero tokens".into())
    }));

    let limits = ContextLimits::default();
    let history: Vec<InputItem> = (0..200)
        .map(|i| InputItem::user(format!("m{i}"), corpus[..2000].to_string()))
        .collect();
    scenarios.push(measure(SHOULD_COMPACT, 0.500, n, w, || {
        std::hint::black_box(should_compact(&history, &limits));
        Ok(())
    }));

    let mut store = open_store(&dir.path().join("state.db")).map_err(|e| e.to_string())?;
    let messages: Vec<InputItem> = (0..20)
        .map(|i| {
            if i % 2 == 0 {
                InputItem::user(format!("m{i}"), format!("question {i}"))
            } else {
                InputItem::assistant(format!("m{i}"), format!("answer {i}"))
            }
        })
        .collect();
    let mut counter = 0u64;
    scenarios.push(measure(STATE, 0.074, n, w, || {
        counter += 1;
        let record = SessionRecord::new(format!("bench-{counter}"), json!({"model": "mock"}));
        store
            .persist_session(&record, &messages)
            .map_err(|e| e.to_string())?;
        let (_, loaded) = store
            .load_session(&record.session_id)
            .map_err(|e| e.to_string())?;
        (loaded.len() == messages.len())
            .then_some(())
            .ok_or_else(|| "roundtrip lost messages".into())
    }));

    let docs = [
        "model = \"base\"\nmax_turns = 50\n[sandbox]\nmode = \"read-only\"\n[features]\nenable = [\"GUARDIAN\"]\n",
        "model = \"user\"\n[sandbox]\nbackend = \"checking\"\n",
        "[sandbox]\nmode = \"workspace-write\"\n",
    ];
    scenarios.push(measure(CONFIG_MERGE, 0.001, n, w, || {
        let cfg = AgentConfig::from_value(merge_documents(&docs).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        (cfg.model.as_deref() == Some("user"))
            .then_some(())
            .ok_or_else(|| "merge lost a key".into())
    }));

    let flags = FlagSet::defaults();
    scenarios.push(measure(FLAGS, 0.001, n, w, || {
        std::hint::black_box(flags.is_enabled(std::hint::black_box(Flag::Guardian)));
        Ok(())
    }));

    Ok(MicroReport { scenarios })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_scenario_runs() {
        let report = run_micro(MicroOptions {
            iterations: 10,
            warmup: 1,
        })
        .unwrap();
        assert_eq!(report.scenarios.len(), 14);
        for s in &report.scenarios {
            assert!(s.error.is_none(), "{}: {:?}", s.name, s.error);
        }
        assert!(report.to_markdown().contains(FULL_PIPELINE));
    }
}
