mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use agent_kernel::config::policy_from_documents;
use agent_kernel::context::BudgetConfig;
use agent_kernel::permissions::{PermissionContext, PromptReply};
use agent_kernel::protocol::ToolStatus;
use agent_kernel::sandbox::{
    execute, resolve_spec, screen_command, BackendKind, CheckingBackend, DirectBackend,
    SandboxError, SandboxMode,
};
use agent_kernel::tools::patch::{apply_patch, parse_patch};
use agent_kernel::tools::{
    builtin_registry, dispatch_batch, DispatchLimits, HandlerOutput, Stage, ToolContext,
    ToolHandler, ToolInvocation, ToolRegistry, ToolSpec,
};
use common::*;
use proptest::prelude::*;
use serde_json::json;

fn context(root: &Path, user_policy: &str, interactive: bool) -> ToolContext {
    let policy = policy_from_documents("", "", user_policy).unwrap();
    let prompter: Option<Box<dyn agent_kernel::permissions::Prompter>> = if interactive {
        Some(Box::new(|_: &_, _: Option<&_>| Ok(PromptReply::Allow)))
    } else {
        None
    };
    ToolContext::new(
        root.to_path_buf(),
        SandboxMode::WorkspaceWrite,
        BackendKind::Checking.build(),
        PermissionContext::new(policy, None, prompter),
        BudgetConfig::with_spill_dir(root.join(".spill")),
    )
}

/// Every regular file under `root`, with its bytes.
fn contents(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap().flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

fn seed(root: &Path) {
    std::fs::write(root.join("keep.txt"), "one\ntwo\n").unwrap();
    std::fs::create_dir_all(root.join("src")).unwrap();
    std::fs::write(root.join("src/lib.rs"), "fn main() {}\n").unwrap();
}

/// Invocations that would each modify the workspace if they ran.
fn mutating_call(i: usize, kind: u8) -> ToolInvocation {
    let id = format!("call-{i}");
    match kind % 4 {
        0 => ToolInvocation::new(id, "shell", json!({"command": ["touch", format!("new{i}.txt")]})),
        1 => ToolInvocation::new(id, "shell", json!({"command": "echo hi > keep.txt"})),
        2 => ToolInvocation::new(
            id,
            "apply_patch",
            json!({"patch": format!("*** Begin Patch\n*** Add File: added{i}.txt\n+x\n*** End Patch\n")}),
        ),
        _ => ToolInvocation::new(
            id,
            "apply_patch",
            json!({"patch": "*** Begin Patch\n*** Delete File: keep.txt\n*** End Patch\n"}),
        ),
    }
    .unwrap()
}

struct Sleepy;

impl ToolHandler for Sleepy {
    fn spec(&self) -> ToolSpec {
        ToolSpec {
            name: "sleepy".into(),
            description: "sleeps briefly".into(),
            parameters: json!({"type": "object"}),
        }
    }

    fn execute(&self, _: &ToolInvocation, _: &ToolContext) -> HandlerOutput {
        std::thread::sleep(Duration::from_millis(3));
        HandlerOutput::ok("slept")
    }
}

fn path_strategy() -> impl Strategy<Value = PathBuf> {
    proptest::collection::vec(
        prop_oneof!["[a-z]{1,4}", Just("..".to_string()), Just(".".to_string())],
        0..5,
    )
    .prop_flat_map(|parts| {
        prop_oneof![Just("/ws"), Just("/tmp"), Just("/etc"), Just("/ws/sub")]
            .prop_map(move |base| parts.iter().fold(PathBuf::from(base), |p, s| p.join(s)))
    })
}

const MODES: [SandboxMode; 3] = [
    SandboxMode::ReadOnly,
    SandboxMode::WorkspaceWrite,
    SandboxMode::FullAccess,
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stages_run_in_order(spec in proptest::collection::vec((any::<bool>(), 0u8..4), 1..10), limit in 1usize..5) {
        let dir = tempfile::tempdir().unwrap();
        seed(dir.path());
        let ctx = context(dir.path(), "allow prefix list_dir\ndeny prefix touch\n", false);
        let invocations: Vec<ToolInvocation> = spec
            .iter()
            .enumerate()
            .map(|(i, (list, kind))| if *list {
                ToolInvocation::new(format!("call-{i}"), "list_dir", json!({"path": "."})).unwrap()
            } else {
                mutating_call(i, *kind)
            })
            .collect();
        let results = dispatch_batch(&invocations, &builtin_registry(), &ctx, DispatchLimits::new(limit).unwrap());
        let trace = ctx.trace();
        for (inv, result) in invocations.iter().zip(&results) {
            prop_assert_eq!(&result.call_id, &inv.call_id);
            let stages: Vec<Stage> = trace.iter().filter(|(id, _)| id == &inv.call_id).map(|(_, s)| *s).collect();
            if result.status == ToolStatus::Denied {
                prop_assert_eq!(stages, vec![Stage::Policy, Stage::Approval]);
            } else {
                prop_assert_eq!(stages, vec![Stage::Policy, Stage::Approval, Stage::Execution]);
            }
        }
    }

    #[test]
    fn denied_calls_leave_the_workspace_untouched(kinds in proptest::collection::vec(0u8..4, 1..8), by_policy in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        seed(dir.path());
        let before = contents(dir.path());
        let policy = if by_policy { "deny prefix touch\ndeny prefix bash\ndeny prefix apply_patch\n" } else { "" };
        let ctx = context(dir.path(), policy, false);
        let invocations: Vec<ToolInvocation> = kinds.iter().enumerate().map(|(i, k)| mutating_call(i, *k)).collect();
        let results = dispatch_batch(&invocations, &builtin_registry(), &ctx, DispatchLimits::default());
        for r in &results {
            prop_assert_eq!(r.status, ToolStatus::Denied, "{}", r.text());
        }
        prop_assert_eq!(contents(dir.path()), before);
        prop_assert!(ctx.trace().iter().all(|(_, s)| *s != Stage::Execution));
    }

    #[test]
    fn dispatch_never_exceeds_max_in_flight(n in 1usize..24, limit in 1usize..6) {
        let dir = tempfile::tempdir().unwrap();
        let mut registry = ToolRegistry::new();
        registry.register("sleepy", Arc::new(Sleepy)).unwrap();
        let ctx = context(dir.path(), "allow prefix sleepy\n", false);
        let invocations: Vec<ToolInvocation> =
            (0..n).map(|i| ToolInvocation::new(format!("c{i}"), "sleepy", json!({})).unwrap()).collect();
        let results = dispatch_batch(&invocations, &registry, &ctx, DispatchLimits::new(limit).unwrap());
        prop_assert_eq!(results.len(), n);
        prop_assert!(results.iter().all(|r| r.status == ToolStatus::Ok));
        prop_assert!(ctx.peak_in_flight() <= limit, "peak {} > {}", ctx.peak_in_flight(), limit);
        prop_assert!(ctx.peak_in_flight() >= 1);
    }

    #[test]
    fn add_update_delete_roundtrip((a, b) in file_pair_strategy(), extra in file_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("f.txt"), &a).unwrap();
        std::fs::write(dir.path().join("gone.txt"), "bye\n").unwrap();
        let update = make_update_patch("f.txt", &a, &b);
        let added: String = extra.lines().map(|l| format!("+{l}\n")).collect();
        let text = update.replacen(
            "*** End Patch\n",
            &format!("*** Add File: dir/new.txt\n{added}*** Delete File: gone.txt\n*** End Patch\n"),
            1,
        );
        apply_patch(&parse_patch(&text).unwrap(), dir.path()).unwrap();
        prop_assert_eq!(std::fs::read_to_string(dir.path().join("f.txt")).unwrap(), b);
        prop_assert_eq!(std::fs::read_to_string(dir.path().join("dir/new.txt")).unwrap(), extra);
        prop_assert!(!dir.path().join("gone.txt").exists());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn writable_set_grows_with_mode(path in path_strategy()) {
        let root = Path::new("/ws");
        let specs: Vec<_> = MODES.iter().map(|m| resolve_spec(*m, root, true).unwrap()).collect();
        let writable: Vec<bool> = specs.iter().map(|s| s.is_writable(&path)).collect();
        prop_assert!(!writable[0]);
        prop_assert!(!writable[1] || writable[2]);
        prop_assert!(writable[2]);
    }

    #[test]
    fn screened_targets_shrink_with_mode(target in path_strategy(), cmd in 0u8..4) {
        let root = Path::new("/ws");
        let t = target.display().to_string();
        let argv: Vec<String> = match cmd {
            0 => vec!["touch".into(), t],
            1 => vec!["rm".into(), "-f".into(), t],
            2 => vec!["sh".into(), "-c".into(), format!("echo x > {t}")],
            _ => vec!["cp".into(), "src".into(), t],
        };
        let blocked: Vec<usize> = MODES
            .iter()
            .map(|m| screen_command(&resolve_spec(*m, root, true).unwrap(), &argv, root).len())
            .collect();
        prop_assert!(blocked[0] >= blocked[1] && blocked[1] >= blocked[2]);
        prop_assert_eq!(blocked[2], 0);
        prop_assert!(blocked[0] >= 1, "read-only allowed {:?}", argv);
    }

    #[test]
    fn full_access_requires_opt_in(mode in 0usize..3, opt_in in any::<bool>()) {
        let r = resolve_spec(MODES[mode], Path::new("/ws"), opt_in);
        if MODES[mode] == SandboxMode::FullAccess && !opt_in {
            prop_assert!(matches!(r, Err(SandboxError::OptInRequired)));
        } else {
            prop_assert_eq!(r.unwrap().mode, MODES[mode]);
        }
    }
}

#[test]
fn relative_workspace_root_is_rejected() {
    assert!(matches!(
        resolve_spec(SandboxMode::WorkspaceWrite, Path::new("ws"), false),
        Err(SandboxError::RelativeRoot(_))
    ));
}

#[test]
fn timeouts_fire_within_twice_the_limit() {
    let dir = tempfile::tempdir().unwrap();
    let spec = resolve_spec(SandboxMode::WorkspaceWrite, dir.path(), false).unwrap();
    let argv: Vec<String> = ["sh", "-c", "sleep 5; echo late"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for timeout_ms in [100u64, 250, 400] {
        for backend in [
            &CheckingBackend::default() as &dyn agent_kernel::sandbox::SandboxBackend,
            &DirectBackend,
        ] {
            let started = Instant::now();
            let r = execute(&spec, &argv, dir.path(), timeout_ms, backend);
            let elapsed = started.elapsed().as_millis() as u64;
            assert!(matches!(r, Err(SandboxError::Timeout { .. })), "{r:?}");
            assert!(
                elapsed <= 2 * timeout_ms,
                "{elapsed} ms for a {timeout_ms} ms timeout"
            );
        }
    }
}

#[test]
fn checking_backend_blocks_writes_outside_the_workspace() {
    let dir = tempfile::tempdir().unwrap();
    let outside = tempfile::tempdir().unwrap();
    let target = outside.path().join("escape.txt");
    let spec = resolve_spec(SandboxMode::WorkspaceWrite, dir.path(), false).unwrap();
    let argv = vec!["touch".to_string(), target.display().to_string()];
    let out = execute(&spec, &argv, dir.path(), 5_000, &CheckingBackend::default()).unwrap();
    assert!(!out.succeeded());
    assert_eq!(out.violations.len(), 1);
    assert!(!target.exists());
}

#[test]
fn interactive_approval_lets_a_mutation_through() {
    let dir = tempfile::tempdir().unwrap();
    seed(dir.path());
    let ctx = context(dir.path(), "", true);
    let results = dispatch_batch(
        &[mutating_call(0, 2)],
        &builtin_registry(),
        &ctx,
        DispatchLimits::default(),
    );
    assert_eq!(results[0].status, ToolStatus::Ok, "{}", results[0].text());
    assert!(dir.path().join("added0.txt").exists());
}
