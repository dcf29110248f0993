//! Independent oracles shared by the integration tests. Nothing here calls
//! into the code under test except to build inputs.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use agent_kernel::execpolicy::{Origin, Verdict};
use agent_kernel::features::{Flag, FlagSource};
use agent_kernel::harness::{
    InProcessTransport, MockModel, ModelScript, ScriptStep, ScriptTurn, ScriptedCall,
};
use agent_kernel::runner::{Runner, RunnerBuilder, SessionConfig};
use agent_kernel::transport::NoSleep;
use proptest::prelude::*;

/// Tool counts per end-to-end task, in suite order.
pub const EXPECTED_TASKS: [(&str, usize); 8] = [
    ("Create Python File", 1),
    ("Shell Echo", 1),
    ("Multi-step File Creation", 2),
    ("Directory Listing", 1),
    ("Git Status", 1),
    ("Complex Pipeline", 3),
    ("File Update with Patch", 2),
    ("Token Estimation Accuracy", 1),
];

// ---- line diff -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffOp<'a> {
    Keep(&'a str),
    Remove(&'a str),
    Add(&'a str),
}

fn lines(text: &str) -> Vec<&str> {
    if text.is_empty() {
        return Vec::new();
    }
    text.strip_suffix('\n')
        .unwrap_or(text)
        .split('\n')
        .collect()
}

/// Longest-common-subsequence line diff.
pub fn diff_lines<'a>(a: &'a str, b: &'a str) -> Vec<DiffOp<'a>> {
    let (x, y) = (lines(a), lines(b));
    let (n, m) = (x.len(), y.len());
    let mut lcs = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            lcs[i][j] = if x[i] == y[j] {
                lcs[i + 1][j + 1] + 1
            } else {
                lcs[i + 1][j].max(lcs[i][j + 1])
            };
        }
    }
    let (mut i, mut j) = (0, 0);
    let mut ops = Vec::new();
    while i < n || j < m {
        if i < n && j < m && x[i] == y[j] {
            ops.push(DiffOp::Keep(x[i]));
            i += 1;
            j += 1;
        } else if j < m && (i == n || lcs[i][j + 1] >= lcs[i + 1][j]) {
            ops.push(DiffOp::Add(y[j]));
            j += 1;
        } else {
            ops.push(DiffOp::Remove(x[i]));
            i += 1;
        }
    }
    ops
}

/// An update patch turning `a` into `b` with every unchanged line as context.
pub fn make_update_patch(path: &str, a: &str, b: &str) -> String {
    let mut out = format!("*** Begin Patch\n*** Update File: {path}\n@@\n");
    for op in diff_lines(a, b) {
        let (tag, line) = match op {
            DiffOp::Keep(l) => (' ', l),
            DiffOp::Remove(l) => ('-', l),
            DiffOp::Add(l) => ('+', l),
        };
        out.push(tag);
        out.push_str(line);
        out.push('\n');
    }
    out.push_str("*** End Patch\n");
    out
}

pub fn line_strategy() -> impl Strategy<Value = String> {
    proptest::collection::vec(
        prop_oneof![
            Just('a'),
            Just('b'),
            Just('c'),
            Just(' '),
            Just('-'),
            Just('+'),
            Just('@'),
            Just('*'),
            Just('\t'),
            Just('é'),
        ],
        0..8,
    )
    .prop_map(|chars| chars.into_iter().collect())
}

/// Newline-terminated file text, or empty.
pub fn file_strategy() -> impl Strategy<Value = String> {
    proptest::collection::vec(line_strategy(), 0..30)
        .prop_map(|ls| ls.iter().map(|l| format!("{l}\n")).collect())
}

/// Two different files where the second is derived from the first by edits.
pub fn file_pair_strategy() -> impl Strategy<Value = (String, String)> {
    (
        file_strategy(),
        proptest::collection::vec((any::<u8>(), 0u8..3, line_strategy()), 1..6),
    )
        .prop_map(|(a, edits)| {
            let mut ls: Vec<String> = lines(&a).into_iter().map(String::from).collect();
            for (pos, kind, text) in edits {
                let at = if ls.is_empty() {
                    0
                } else {
                    pos as usize % (ls.len() + 1)
                };
                match kind {
                    0 => ls.insert(at, text),
                    1 if at < ls.len() => {
                        ls.remove(at);
                    }
                    _ if at < ls.len() => ls[at] = format!("{}~", ls[at]),
                    _ => ls.push(text),
                }
            }
            let b: String = ls.iter().map(|l| format!("{l}\n")).collect();
            let b = if b == a { format!("{a}changed\n") } else { b };
            (a, b)
        })
}

// ---- execution policy --------------------------------------------------------

#[derive(Debug, Clone)]
pub struct OracleRule {
    pub verdict: Verdict,
    pub prefix: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct OraclePolicy {
    pub system: Vec<OracleRule>,
    pub organization: Vec<OracleRule>,
    pub user: Vec<OracleRule>,
}

fn verdict_word(v: Verdict) -> &'static str {
    match v {
        Verdict::Allow => "allow",
        Verdict::Deny => "deny",
        Verdict::Prompt => "prompt",
    }
}

pub fn render_rules(rules: &[OracleRule]) -> String {
    rules
        .iter()
        .map(|r| {
            format!(
                "{} prefix \"{}\"\n",
                verdict_word(r.verdict),
                r.prefix.join(" ")
            )
        })
        .collect()
}

impl OraclePolicy {
    /// Brute-force scan: user layer, then organization, then system; first
    /// matching line wins, otherwise prompt.
    pub fn decide(&self, argv: &[String]) -> (Verdict, Option<String>) {
        let layers = [
            (Origin::User, "user", &self.user),
            (Origin::Organization, "organization", &self.organization),
            (Origin::System, "system", &self.system),
        ];
        for (_, name, rules) in layers {
            for (i, rule) in rules.iter().enumerate() {
                let is_prefix = rule.prefix.len() <= argv.len()
                    && (0..rule.prefix.len()).all(|k| rule.prefix[k] == argv[k]);
                if is_prefix {
                    return (rule.verdict, Some(format!("{name}:{}", i + 1)));
                }
            }
        }
        (Verdict::Prompt, None)
    }
}

const WORDS: [&str; 6] = ["git", "ls", "rm", "status", "-rf", "push"];

fn word() -> impl Strategy<Value = String> {
    (0..WORDS.len()).prop_map(|i| WORDS[i].to_string())
}

fn rule() -> impl Strategy<Value = OracleRule> {
    (
        prop_oneof![
            Just(Verdict::Allow),
            Just(Verdict::Deny),
            Just(Verdict::Prompt)
        ],
        proptest::collection::vec(word(), 1..3),
    )
        .prop_map(|(verdict, prefix)| OracleRule { verdict, prefix })
}

pub fn policy_strategy() -> impl Strategy<Value = OraclePolicy> {
    (
        proptest::collection::vec(rule(), 0..7),
        proptest::collection::vec(rule(), 0..7),
        proptest::collection::vec(rule(), 0..7),
    )
        .prop_map(|(system, organization, user)| OraclePolicy {
            system,
            organization,
            user,
        })
}

pub fn argv_strategy() -> impl Strategy<Value = Vec<String>> {
    proptest::collection::vec(word(), 1..4)
}

// ---- flag precedence ---------------------------------------------------------

/// Which of the four sources set a value, and the value each one set.
#[derive(Debug, Clone, Copy)]
pub struct SourceCombo {
    pub runtime: Option<bool>,
    pub env: Option<bool>,
    pub build: Option<bool>,
    pub default: bool,
}

/// All 16 presence combinations for one flag. Each present source flips the
/// value of the source beneath it, so the winner is always observable.
pub fn source_combos() -> Vec<SourceCombo> {
    let mut out = Vec::new();
    for mask in 0u8..16 {
        let default = mask & 8 != 0;
        let mut below = default;
        let mut pick = |bit: u8| {
            (mask & bit != 0).then(|| {
                below = !below;
                below
            })
        };
        let build = pick(1);
        let env = pick(2);
        let runtime = pick(4);
        out.push(SourceCombo {
            runtime,
            env,
            build,
            default,
        });
    }
    out
}

pub fn expected_flag(c: &SourceCombo) -> (bool, FlagSource) {
    if let Some(v) = c.runtime {
        (v, FlagSource::Runtime)
    } else if let Some(v) = c.env {
        (v, FlagSource::Env)
    } else if let Some(v) = c.build {
        (v, FlagSource::Build)
    } else {
        (c.default, FlagSource::Default)
    }
}

pub fn single(flag: Flag, v: Option<bool>) -> BTreeMap<Flag, bool> {
    v.map(|v| BTreeMap::from([(flag, v)])).unwrap_or_default()
}

// ---- scripted runs -------------------------------------------------------------

pub fn fin(text: &str) -> ScriptStep {
    ScriptStep::Turn(ScriptTurn::Final { text: text.into() })
}

pub fn calls(calls: Vec<ScriptedCall>) -> ScriptStep {
    ScriptStep::Turn(ScriptTurn::ToolCalls { calls })
}

pub fn list_dir_call() -> ScriptedCall {
    ScriptedCall::new("list_dir", serde_json::json!({"path": ".", "depth": 1}))
}

pub fn mock(steps: Vec<ScriptStep>) -> Arc<MockModel> {
    Arc::new(MockModel::new(
        ModelScript::new(steps).expect("valid script"),
    ))
}

pub fn runner_for(
    model: Arc<MockModel>,
    workspace: &std::path::Path,
    config: SessionConfig,
) -> Runner {
    RunnerBuilder::new(config, workspace)
        .sleeper(Box::new(NoSleep))
        .build(Arc::new(InProcessTransport::new(model)))
}

/// Ceil(chars / 4), computed without the library.
pub fn token_oracle(text: &str) -> u64 {
    let chars = text.chars().count() as u64;
    chars / 4 + u64::from(!chars.is_multiple_of(4))
}
