//! The eight-task end-to-end suite: each task runs against a scripted model
//! over the wire transports in a fresh workspace, five times by default.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use super::{MockServer, ModelScript, ScriptStep, ScriptTurn, ScriptedCall};
use crate::config::policy_from_documents;
use crate::context::estimate_tokens;
use crate::features::{EnhancementHooks, FlagSet};
use crate::protocol::{check_event_pairing, EventPayload, ToolStatus};
use crate::runner::{Outcome, RunSummary, RunnerBuilder, SessionConfig};
use crate::sandbox::{BackendKind, SandboxMode};
use crate::state::open_store;
use crate::transport::{HttpModelClient, NoSleep};

/// Commands the eval sessions may run without prompting.
pub const EVAL_USER_POLICY: &str = "\
allow prefix \"apply_patch\"
allow prefix \"echo\"
allow prefix \"cat\"
allow prefix \"sort\"
allow prefix \"wc\"
allow prefix \"git status\"
";

type Setup = fn(&Path) -> std::io::Result<()>;
type Check = fn(&Path, &RunSummary) -> Result<(), String>;

pub struct EvalTask {
    pub name: &'static str,
    pub prompt: &'static str,
    pub expected_tools: usize,
    pub script: ModelScript,
    pub setup: Setup,
    pub check: Check,
}

impl std::fmt::Debug for EvalTask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EvalTask")
            .field("name", &self.name)
            .field("expected_tools", &self.expected_tools)
            .finish()
    }
}

fn calls(calls: Vec<ScriptedCall>) -> ScriptStep {
    ScriptStep::Turn(ScriptTurn::ToolCalls { calls })
}

fn fin(text: &str) -> ScriptStep {
    ScriptStep::Turn(ScriptTurn::Final { text: text.into() })
}

fn shell(argv: &[&str]) -> ScriptedCall {
    ScriptedCall::new("shell", json!({ "command": argv }))
}

fn patch(text: &str) -> ScriptedCall {
    ScriptedCall::new("apply_patch", json!({ "patch": text }))
}

fn script(steps: Vec<ScriptStep>) -> ModelScript {
    ModelScript::new(steps).expect("task scripts end with a final turn")
}

fn no_setup(_: &Path) -> std::io::Result<()> {
    Ok(())
}

fn read(root: &Path, rel: &str) -> Result<String, String> {
    std::fs::read_to_string(root.join(rel)).map_err(|e| format!("{rel}: {e}"))
}

/// Outputs of every `ToolResult` event, in order; errors if any failed.
fn ok_outputs(summary: &RunSummary) -> Result<Vec<String>, String> {
    summary
        .events
        .iter()
        .filter_map(|e| match &e.payload {
            EventPayload::ToolResult { status, output, .. } => Some(if *status == ToolStatus::Ok {
                Ok(output.clone())
            } else {
                Err(format!("tool result {status:?}: {output}"))
            }),
            _ => None,
        })
        .collect()
}

const HELLO_PY: &str =
    "def main():\n    print(\"hello\")\n\n\nif __name__ == \"__main__\":\n    main()\n";

pub fn corpus_text() -> String {
    const WORDS: [&str; 10] = [
        "agent", "kernel", "turn", "loop", "policy", "sandbox", "patch", "token", "context",
        "stream",
    ];
    let words: Vec<&str> = (0..2000)
        .map(|i| WORDS[(i * 7 + i / 10) % WORDS.len()])
        .collect();
    let mut text = String::new();
    for line in words.chunks(16) {
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    text
}

fn git_setup(root: &Path) -> std::io::Result<()> {
    let status = std::process::Command::new("git")
        .args(["init", "-q"])
        .current_dir(root)
        .env("GIT_CONFIG_NOSYSTEM", "1")
        .status()?;
    if !status.success() {
        return Err(std::io::Error::other("git init failed"));
    }
    std::fs::write(root.join("notes.txt"), "draft\n")
}

pub fn tasks() -> Vec<EvalTask> {
    vec![
        EvalTask {
            name: "Create Python File",
            prompt: "Create hello.py that prints hello.",
            expected_tools: 1,
            script: script(vec![
                calls(vec![patch(&format!(
                    "*** Begin Patch\n*** Add File: hello.py\n{}*** End Patch\n",
                    HELLO_PY.lines().map(|l| format!("+{l}\n")).collect::<String>()
                ))]),
                fin("Created hello.py."),
            ]),
            setup: no_setup,
            check: |root, _| {
                let got = read(root, "hello.py")?;
                (got == HELLO_PY).then_some(()).ok_or_else(|| format!("hello.py content: {got:?}"))
            },
        },
        EvalTask {
            name: "Shell Echo",
            prompt: "Run echo hello.",
            expected_tools: 1,
            script: script(vec![calls(vec![shell(&["echo", "hello"])]), fin("It printed hello.")]),
            setup: no_setup,
            check: |_, s| {
                let out = ok_outputs(s)?;
                (out == ["hello\n"]).then_some(()).ok_or_else(|| format!("outputs {out:?}"))
            },
        },
        EvalTask {
            name: "Multi-step File Creation",
            prompt: "Create src/lib.txt, then docs/README.txt pointing at it.",
            expected_tools: 2,
            script: script(vec![
                calls(vec![patch("*** Begin Patch\n*** Add File: src/lib.txt\n+library\n*** End Patch\n")]),
                calls(vec![patch(
                    "*** Begin Patch\n*** Add File: docs/README.txt\n+see src/lib.txt\n*** End Patch\n",
                )]),
                fin("Both files exist."),
            ]),
            setup: no_setup,
            check: |root, _| {
                let lib = read(root, "src/lib.txt")?;
                let readme = read(root, "docs/README.txt")?;
                (lib == "library\n" && readme == "see src/lib.txt\n")
                    .then_some(())
                    .ok_or_else(|| format!("contents {lib:?} / {readme:?}"))
            },
        },
        EvalTask {
            name: "Directory Listing",
            prompt: "List the project two levels deep.",
            expected_tools: 1,
            script: script(vec![
                calls(vec![ScriptedCall::new("list_dir", json!({"path": ".", "depth": 2}))]),
                fin("Listed."),
            ]),
            setup: |root| {
                std::fs::create_dir_all(root.join("src/bin"))?;
                std::fs::write(root.join("Cargo.toml"), "[package]\n")?;
                std::fs::write(root.join("src/lib.rs"), "")?;
                std::fs::write(root.join("src/bin/tool.rs"), "")
            },
            check: |_, s| {
                let out = ok_outputs(s)?;
                let want = "Cargo.toml\nsrc/\nsrc/bin/\nsrc/lib.rs\n";
                (out.len() == 1 && out[0].trim_end() == want.trim_end())
                    .then_some(())
                    .ok_or_else(|| format!("listing {out:?}"))
            },
        },
        EvalTask {
            name: "Git Status",
            prompt: "Show git status.",
            expected_tools: 1,
            script: script(vec![
                calls(vec![shell(&["git", "status", "--porcelain"])]),
                fin("One untracked file."),
            ]),
            setup: git_setup,
            check: |_, s| {
                let out = ok_outputs(s)?;
                (out == ["?? notes.txt\n"]).then_some(()).ok_or_else(|| format!("outputs {out:?}"))
            },
        },
        EvalTask {
            name: "Complex Pipeline",
            prompt: "Write numbers.txt, sort it, and count the lines.",
            expected_tools: 3,
            script: script(vec![
                calls(vec![patch("*** Begin Patch\n*** Add File: numbers.txt\n+3\n+10\n+1\n+7\n*** End Patch\n")]),
                calls(vec![shell(&["sort", "-n", "numbers.txt"])]),
                calls(vec![shell(&["wc", "-l", "numbers.txt"])]),
                fin("Sorted 4 numbers."),
            ]),
            setup: no_setup,
            check: |_, s| {
                let out = ok_outputs(s)?;
                let ok = out.len() == 3 && out[1] == "1\n3\n7\n10\n" && out[2].trim() == "4 numbers.txt";
                ok.then_some(()).ok_or_else(|| format!("outputs {out:?}"))
            },
        },
        EvalTask {
            name: "File Update with Patch",
            prompt: "Raise the retry limit in config.txt to 5.",
            expected_tools: 2,
            script: script(vec![
                calls(vec![shell(&["cat", "config.txt"])]),
                calls(vec![patch(
                    "*** Begin Patch\n*** Update File: config.txt\n@@\n name = demo\n-retries = 3\n+retries = 5\n timeout = 30\n*** End Patch\n",
                )]),
                fin("Updated retries."),
            ]),
            setup: |root| std::fs::write(root.join("config.txt"), "name = demo\nretries = 3\ntimeout = 30\n"),
            check: |root, s| {
                ok_outputs(s)?;
                let got = read(root, "config.txt")?;
                (got == "name = demo\nretries = 5\ntimeout = 30\n")
                    .then_some(())
                    .ok_or_else(|| format!("config.txt {got:?}"))
            },
        },
        EvalTask {
            name: "Token Estimation Accuracy",
            prompt: "Read corpus.txt and estimate its tokens.",
            expected_tools: 1,
            script: script(vec![calls(vec![shell(&["cat", "corpus.txt"])]), fin("About 3.4K tokens.")]),
            setup: |root| std::fs::write(root.join("corpus.txt"), corpus_text()),
            check: |_, s| {
                let out = ok_outputs(s)?;
                let text = corpus_text();
                if out != [text.clone()] {
                    return Err("tool output differs from corpus".into());
                }
                let chars = text.chars().count() as u64;
                let one = estimate_tokens(&text);
                let two = estimate_tokens(&text.repeat(2));
                let linear = one == chars.div_ceil(4) && two.abs_diff(2 * one) <= 1;
                linear.then_some(()).ok_or_else(|| format!("estimate {one} / {two} for {chars} chars"))
            },
        },
    ]
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub repetitions: usize,
    pub flags: FlagSet,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            repetitions: 5,
            flags: FlagSet::defaults(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskReport {
    pub name: String,
    pub expected_tools: usize,
    pub tool_counts: Vec<usize>,
    pub runs: usize,
    pub passes: usize,
    pub failures: Vec<String>,
    pub mean_ms: f64,
    pub p50_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskReport>,
    pub total_runs: usize,
    pub total_passes: usize,
    pub wall_ms: f64,
    /// Every tool `type` seen in any request the mock received.
    pub tool_kinds: BTreeSet<String>,
    pub requests: usize,
    pub hook_total: u64,
}

impl EvalReport {
    pub fn all_passed(&self) -> bool {
        self.total_runs > 0 && self.total_passes == self.total_runs
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| Task | Tools | Success | Mean (ms) | P50 (ms) |\n|---|---:|---:|---:|---:|\n",
        );
        for t in &self.tasks {
            out.push_str(&format!(
                "| {} | {} | {}/{} | {:.2} | {:.2} |\n",
                t.name, t.expected_tools, t.passes, t.runs, t.mean_ms, t.p50_ms
            ));
        }
        out.push_str(&format!(
            "\n{}/{} runs passed in {:.0} ms; {} requests; tool kinds: {}\n",
            self.total_passes,
            self.total_runs,
            self.wall_ms,
            self.requests,
            self.tool_kinds
                .iter()
                .cloned()
                .collect::<Vec<_>>()
                .join(", ")
        ));
        out
    }
}

pub fn mean_and_p50(samples: &[f64]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    let mid = sorted.len() / 2;
    let p50 = if sorted.len().is_multiple_of(2) {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    };
    (mean, p50)
}

struct RunResult {
    passed: Result<(), String>,
    tool_count: usize,
    elapsed_ms: f64,
}

fn run_once(
    task: &EvalTask,
    opts: &EvalOptions,
    hooks: &Arc<EnhancementHooks>,
    kinds: &mut BTreeSet<String>,
    requests: &mut usize,
) -> Result<RunResult, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path().join("workspace");
    std::fs::create_dir(&root).map_err(|e| e.to_string())?;
    (task.setup)(&root).map_err(|e| format!("setup: {e}"))?;
    let server = MockServer::start(task.script.clone()).map_err(|e| e.to_string())?;
    let store = open_store(&dir.path().join("state.db")).map_err(|e| e.to_string())?;

    let mut config = SessionConfig::new("mock");
    config.session_id = "eval".into();
    config.sandbox_mode = SandboxMode::WorkspaceWrite;
    config.flags = opts.flags.clone();
    config.budgets = crate::context::BudgetConfig::with_spill_dir(dir.path().join("spill"));
    let policy = policy_from_documents("", "", EVAL_USER_POLICY).map_err(|e| e.to_string())?;
    let client = HttpModelClient::new(&server.base_url(), Some(server.channel_url()));
    let runner = RunnerBuilder::new(config, &root)
        .policy(policy)
        .backend(BackendKind::Checking)
        .sleeper(Box::new(NoSleep))
        .store(store)
        .hooks(hooks.clone())
        .build(Arc::new(client));

    let started = Instant::now();
    let summary = runner.run(task.prompt);
    let elapsed_ms = started.elapsed().as_secs_f64() * 1000.0;

    for request in server.requests() {
        kinds.extend(request.tool_types());
        *requests += 1;
    }
    let tool_count = summary.tool_call_count();
    let passed = (|| {
        if summary.outcome != Outcome::Completed {
            return Err(format!("outcome {:?}", summary.outcome));
        }
        check_event_pairing(&summary.events)?;
        if tool_count != task.expected_tools {
            return Err(format!(
                "{tool_count} tool calls, expected {}",
                task.expected_tools
            ));
        }
        (task.check)(&root, &summary)
    })();
    Ok(RunResult {
        passed,
        tool_count,
        elapsed_ms,
    })
}

pub fn run_eval(tasks: &[EvalTask], opts: &EvalOptions) -> EvalReport {
    let started = Instant::now();
    let hooks = Arc::new(EnhancementHooks::new());
    let mut tool_kinds = BTreeSet::new();
    let mut requests = 0;
    let mut reports = Vec::new();
    for task in tasks {
        let mut samples = Vec::new();
        let mut report = TaskReport {
            name: task.name.to_string(),
            expected_tools: task.expected_tools,
            tool_counts: Vec::new(),
            runs: opts.repetitions,
            passes: 0,
            failures: Vec::new(),
            mean_ms: 0.0,
            p50_ms: 0.0,
        };
        for rep in 0..opts.repetitions {
            match run_once(task, opts, &hooks, &mut tool_kinds, &mut requests) {
                Ok(r) => {
                    report.tool_counts.push(r.tool_count);
                    samples.push(r.elapsed_ms);
                    match r.passed {
                        Ok(()) => report.passes += 1,
                        Err(e) => report.failures.push(format!("run {rep}: {e}")),
                    }
                }
                Err(e) => report.failures.push(format!("run {rep}: {e}")),
            }
        }
        (report.mean_ms, report.p50_ms) = mean_and_p50(&samples);
        reports.push(report);
    }
    EvalReport {
        total_runs: reports.iter().map(|r| r.runs).sum(),
        total_passes: reports.iter().map(|r| r.passes).sum(),
        tasks: reports,
        wall_ms: started.elapsed().as_secs_f64() * 1000.0,
        tool_kinds,
        requests,
        hook_total: hooks.total(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_two_thousand_words() {
        assert_eq!(corpus_text().split_whitespace().count(), 2000);
    }

    #[test]
    fn table_tool_counts() {
        let counts: Vec<usize> = tasks().iter().map(|t| t.expected_tools).collect();
        assert_eq!(counts, vec![1, 1, 2, 1, 1, 3, 2, 1]);
    }

    #[test]
    fn percentile_helper() {
        assert_eq!(mean_and_p50(&[3.0, 1.0, 2.0]), (2.0, 2.0));
        assert_eq!(mean_and_p50(&[1.0, 2.0, 3.0, 4.0]), (2.5, 2.5));
    }

    #[test]
    fn single_repetition_passes() {
        let report = run_eval(
            &tasks(),
            &EvalOptions {
                repetitions: 1,
                ..Default::default()
            },
        );
        for t in &report.tasks {
            assert!(t.failures.is_empty(), "{}: {:?}", t.name, t.failures);
        }
        assert!(report.all_passed());
    }
}
