mod common;

use std::sync::Arc;

use agent_kernel::harness::{Fault, MockModel, ScriptStep, ScriptedCall};
use agent_kernel::protocol::{check_event_pairing, EventPayload, InputItem};
use agent_kernel::runner::agents::{AgentTree, SpawnBounds, SpawnError, ROOT_AGENT};
use agent_kernel::runner::{Outcome, SessionConfig};
use common::*;
use proptest::prelude::*;
use serde_json::json;

fn call() -> impl Strategy<Value = ScriptedCall> {
    prop_oneof![
        Just(list_dir_call()),
        Just(ScriptedCall::new(
            "shell",
            json!({"command": ["echo", "hi"]})
        )),
        Just(ScriptedCall::new("frobnicate", json!({}))),
        Just(ScriptedCall::new("list_dir", json!({"depth": "deep"}))),
        Just(ScriptedCall::new(
            "apply_patch",
            json!({"patch": "not a patch"})
        )),
    ]
}

fn step() -> impl Strategy<Value = ScriptStep> {
    prop_oneof![
        4 => proptest::collection::vec(call(), 1..4).prop_map(calls),
        1 => Just(ScriptStep::Fault(Fault::Http500)),
        1 => Just(ScriptStep::Fault(Fault::Http429 { retry_after: Some(0.5) })),
    ]
}

fn script() -> impl Strategy<Value = Vec<ScriptStep>> {
    proptest::collection::vec(step(), 0..12).prop_map(|mut steps| {
        steps.push(fin("all done"));
        steps
    })
}

fn ids(items: &[InputItem]) -> Vec<String> {
    items.iter().map(|i| i.id.clone()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn runs_respect_max_turns_and_pair_events(steps in script(), max_turns in 1u32..10) {
        let dir = tempfile::tempdir().unwrap();
        let model = mock(steps.clone());
        let mut config = SessionConfig::new("mock");
        config.max_turns = max_turns;
        let summary = runner_for(model.clone(), dir.path(), config).run("go");
        prop_assert!(summary.turns_used <= max_turns);
        check_event_pairing(&summary.events).map_err(TestCaseError::fail)?;

        let tool_turns = steps.iter().filter(|s| matches!(s, ScriptStep::Turn(_))).count() - 1;
        let expected = if tool_turns < max_turns as usize { Outcome::Completed } else { Outcome::MaxTurnsReached };
        prop_assert_eq!(summary.outcome, expected);

        // Every call is answered within its own turn.
        for e in &summary.events {
            if let EventPayload::ToolCall { call_id, .. } = &e.payload {
                let answered = summary.events.iter().any(|r| {
                    r.turn_index == e.turn_index
                        && matches!(&r.payload, EventPayload::ToolResult { call_id: c, .. } if c == call_id)
                });
                prop_assert!(answered, "call {} unanswered", call_id);
            }
        }

        // Each request's input is a prefix of the next, and of the final history.
        let requests: Vec<Vec<String>> = model.requests().iter().map(|r| r.input_ids()).collect();
        for pair in requests.windows(2) {
            prop_assert!(pair[1].starts_with(&pair[0]), "{:?} -> {:?}", pair[0], pair[1]);
        }
        let history = ids(&summary.history);
        for r in &requests {
            prop_assert!(history.starts_with(r));
        }
        for r in model.requests() {
            prop_assert!(r.tool_types().iter().all(|t| t == "function"));
        }
    }

    #[test]
    fn spawned_children_never_exceed_bounds(
        depth in 1u32..6,
        children in 1usize..8,
        total in 2usize..30,
        ops in proptest::collection::vec(any::<prop::sample::Index>(), 1..80),
    ) {
        let bounds = SpawnBounds { max_depth: depth, max_children_per_parent: children, max_total_agents: total };
        let tree = AgentTree::new(bounds, vec![InputItem::user("u0", "root")]);
        let mut ids = vec![ROOT_AGENT.to_string()];
        for op in ops {
            let parent = ids[op.index(ids.len())].clone();
            match tree.spawn_child(&parent, "task") {
                Ok(child) => ids.push(child.agent_id),
                Err(SpawnError::DepthExceeded { .. } | SpawnError::ChildrenExceeded { .. } | SpawnError::AgentsExceeded { .. }) => {}
                Err(e) => prop_assert!(false, "unexpected {}", e),
            }
            prop_assert!(tree.len() <= total);
            prop_assert!(tree.max_depth_reached() <= depth);
            prop_assert!(tree.max_children() <= children);
        }
    }

    #[test]
    fn forked_histories_are_isolated(root_items in 1usize..6, edits in 1usize..5) {
        let root: Vec<InputItem> = (0..root_items).map(|i| InputItem::user(format!("u{i}"), "root")).collect();
        let tree = AgentTree::new(SpawnBounds::default(), root.clone());
        let child = tree.spawn_child(ROOT_AGENT, "sub task").unwrap();
        prop_assert!(child.history.starts_with(&root));
        prop_assert_eq!(child.history.len(), root.len() + 1);

        let mut child_history = child.history.clone();
        for i in 0..edits {
            child_history.push(InputItem::assistant(format!("c{i}"), "child work"));
        }
        child_history[0].content = "rewritten by child".into();
        tree.set_history(&child.agent_id, child_history.clone());
        prop_assert_eq!(tree.get(ROOT_AGENT).unwrap().history, root.clone());

        let mut root_history = root.clone();
        root_history.push(InputItem::assistant("late", "root work"));
        tree.set_history(ROOT_AGENT, root_history);
        prop_assert_eq!(tree.get(&child.agent_id).unwrap().history, child_history);
    }
}

#[test]
fn child_runs_do_not_leak_into_the_parent() {
    let model = Arc::new(MockModel::with_responder(Box::new(|body, _| {
        let items = body["input"].as_array().unwrap();
        let is_child = items
            .iter()
            .any(|i| i["id"].as_str().is_some_and(|id| id.ends_with("-task")));
        let answered = items.iter().any(|i| i["type"] == "tool_result");
        Some(match (is_child, answered) {
            (true, false) => calls(vec![list_dir_call()]),
            (true, true) => fin("child finished"),
            (false, false) => calls(vec![ScriptedCall::new(
                "spawn_agent",
                json!({"task": "look around"}),
            )]),
            (false, true) => fin("root finished"),
        })
    })));
    let dir = tempfile::tempdir().unwrap();
    let runner = runner_for(model, dir.path(), SessionConfig::new("mock"));
    let summary = runner.run("delegate");
    assert_eq!(summary.outcome, Outcome::Completed);
    assert_eq!(summary.final_text.as_deref(), Some("root finished"));
    assert_eq!(runner.tree().len(), 2);

    let child = runner.tree().get("agent-1").unwrap();
    assert!(child.history.starts_with(&summary.history[..1]));
    assert!(child.history.iter().any(|i| i.id == "agent-1-task"));
    assert!(!summary.history.iter().any(|i| i.id == "agent-1-task"));
    let root_results: Vec<&InputItem> = summary
        .history
        .iter()
        .filter(|i| i.call_id.is_some() && i.content.contains("child finished"))
        .collect();
    assert_eq!(
        root_results.len(),
        1,
        "the child's answer returns as one tool result"
    );
    check_event_pairing(&summary.events).unwrap();
}
