//! Three escalating compaction phases.
//!
//! * micro: replace the content of stale tool results with an elision marker
//! * snip: drop small tool results and assistant messages
//! * full: summarize everything into one boundary item, then restore the
//!   most recently touched files under a token budget
//!
//! Every phase preserves the relative order of the items it keeps.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::context::{estimate_tokens, history_tokens, item_tokens};
use crate::protocol::{InputItem, ItemKind};

pub const ELIDED_TOOL_OUTPUT: &str = "[stale tool output elided]";
pub const BOUNDARY_MARKER: &str = "=== COMPACTION BOUNDARY ===";
pub const RESTORED_FILE_HEADER: &str = "[restored file] ";

/// Instruction prefixed to the rendered history sent to the summarizer.
pub const SUMMARIZER_INSTRUCTION: &str = "You are compacting an agent conversation. Summarize the \
history below: the user's goal, decisions made, files touched, commands run and their outcomes, \
and any work still outstanding. Be concise and factual.\n\n";

#[derive(Debug, Clone, PartialEq)]
pub struct CompactionConfig {
    pub snip_token_threshold: u64,
    pub restore_max_files: usize,
    pub restore_token_budget: u64,
    pub target_fraction: f64,
    /// Tool results newer than this many are never elided by micro.
    pub keep_recent_tool_results: usize,
}

impl Default for CompactionConfig {
    fn default() -> Self {
        Self {
            snip_token_threshold: 50,
            restore_max_files: 5,
            restore_token_budget: 50_000,
            target_fraction: 0.5,
            keep_recent_tool_results: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Micro,
    Snip,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompactionReport {
    pub phase: Phase,
    pub removed_ids: Vec<String>,
    pub summary_item_id: Option<String>,
    pub restored_files: Vec<(String, u64)>,
    pub tokens_before: u64,
    pub tokens_after: u64,
}

impl CompactionReport {
    fn new(
        phase: Phase,
        before: &[InputItem],
        after: &[InputItem],
        removed_ids: Vec<String>,
    ) -> Self {
        Self {
            phase,
            removed_ids,
            summary_item_id: None,
            restored_files: Vec::new(),
            tokens_before: history_tokens(before),
            tokens_after: history_tokens(after),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GhostSnapshot {
    pub snapshot_id: String,
    pub items: Vec<InputItem>,
    pub created_at_turn: u32,
}

/// A file the session read or wrote, eligible for post-compaction restore.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RestoreCandidate {
    pub path: String,
    pub content: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CompactionError {
    #[error("summarizer failed: {0}")]
    SummarizerFailed(String),
}

/// Produces summary text for a rendered history.
pub trait Summarizer {
    fn summarize(&self, prompt: &str) -> Result<String, String>;
}

impl<F> Summarizer for F
where
    F: Fn(&str) -> Result<String, String>,
{
    fn summarize(&self, prompt: &str) -> Result<String, String> {
        self(prompt)
    }
}

pub fn microcompact(
    history: &[InputItem],
    cfg: &CompactionConfig,
) -> (Vec<InputItem>, CompactionReport) {
    let result_positions: Vec<usize> = history
        .iter()
        .enumerate()
        .filter(|(_, item)| item.kind == ItemKind::ToolResult)
        .map(|(i, _)| i)
        .collect();
    let stale = result_positions
        .len()
        .saturating_sub(cfg.keep_recent_tool_results);
    let mut out = history.to_vec();
    let mut elided = Vec::new();
    for &pos in &result_positions[..stale] {
        let item = &mut out[pos];
        if item_tokens(item) > estimate_tokens(ELIDED_TOOL_OUTPUT) {
            item.content = ELIDED_TOOL_OUTPUT.to_string();
            item.token_estimate_cache = None;
            elided.push(item.id.clone());
        }
    }
    let report = CompactionReport::new(Phase::Micro, history, &out, elided);
    (out, report)
}

fn protected_positions(history: &[InputItem]) -> (Option<usize>, Option<usize>) {
    let first_system = history.iter().position(|i| i.kind == ItemKind::System);
    let last_user = history.iter().rposition(|i| i.kind == ItemKind::UserText);
    (first_system, last_user)
}

/// True for items that no trimming step may remove: the first system item,
/// the last user item, and any summary boundary.
pub fn is_protected(history: &[InputItem], index: usize) -> bool {
    let (first_system, last_user) = protected_positions(history);
    history[index].kind == ItemKind::SummaryBoundary
        || Some(index) == first_system
        || Some(index) == last_user
}

pub fn snip_compact(
    history: &[InputItem],
    cfg: &CompactionConfig,
) -> (Vec<InputItem>, CompactionReport) {
    let mut removed = Vec::new();
    let out: Vec<InputItem> = history
        .iter()
        .enumerate()
        .filter(|(i, item)| {
            let low_value = matches!(item.kind, ItemKind::ToolResult | ItemKind::AssistantText)
                && item_tokens(item) < cfg.snip_token_threshold
                && !is_protected(history, *i);
            if low_value {
                removed.push(item.id.clone());
            }
            !low_value
        })
        .map(|(_, item)| item.clone())
        .collect();
    let report = CompactionReport::new(Phase::Snip, history, &out, removed);
    (out, report)
}

pub fn render_for_summary(history: &[InputItem]) -> String {
    let mut out = String::from(SUMMARIZER_INSTRUCTION);
    for item in history {
        out.push('[');
        out.push_str(item.kind.as_str());
        if let Some(name) = &item.tool_name {
            out.push(':');
            out.push_str(name);
        }
        out.push_str("] ");
        out.push_str(&item.content);
        out.push('\n');
    }
    out
}

fn is_restored_file(item: &InputItem) -> bool {
    item.kind == ItemKind::System && item.content.starts_with(RESTORED_FILE_HEADER)
}

fn restored_item(id: String, candidate: &RestoreCandidate) -> InputItem {
    InputItem::system(
        id,
        format!(
            "{RESTORED_FILE_HEADER}{}\n{}",
            candidate.path, candidate.content
        ),
    )
}

static GHOST_SEQ: AtomicU64 = AtomicU64::new(0);

/// Replaces the history with `[system items] + boundary + restored files +
/// last user item`, keeping a verbatim ghost copy of the original.
///
/// `candidates` must be ordered most recently touched first. The result fits
/// within `target_fraction * model_context_tokens` (and never grows the
/// history) provided the retained system and user items fit on their own.
pub fn full_compact(
    history: &[InputItem],
    cfg: &CompactionConfig,
    model_context_tokens: u64,
    candidates: &[RestoreCandidate],
    summarizer: &dyn Summarizer,
    turn: u32,
) -> Result<(Vec<InputItem>, CompactionReport, GhostSnapshot), CompactionError> {
    let summary = summarizer
        .summarize(&render_for_summary(history))
        .map_err(CompactionError::SummarizerFailed)?;

    let tokens_before = history_tokens(history);
    let target = (cfg.target_fraction * model_context_tokens as f64).floor() as u64;
    let limit = target.min(tokens_before);

    let systems: Vec<InputItem> = history
        .iter()
        .filter(|i| i.kind == ItemKind::System && !is_restored_file(i))
        .cloned()
        .collect();
    let last_user = history
        .iter()
        .rev()
        .find(|i| i.kind == ItemKind::UserText)
        .cloned();

    let seq = GHOST_SEQ.fetch_add(1, Ordering::Relaxed);
    let boundary_id = format!("boundary-{turn}-{seq}");
    let fixed_tokens = history_tokens(&systems) + last_user.as_ref().map_or(0, item_tokens);

    // Fit the boundary first, truncating the summary if needed.
    let header = format!("{BOUNDARY_MARKER}\n");
    let mut boundary_text = format!("{header}{summary}");
    let room_for_boundary = limit.saturating_sub(fixed_tokens);
    if estimate_tokens(&boundary_text) > room_for_boundary {
        let max_chars = (room_for_boundary as usize * 4).max(header.chars().count());
        boundary_text = boundary_text.chars().take(max_chars).collect();
    }
    let boundary = InputItem::summary_boundary(boundary_id.clone(), boundary_text);
    let mut used = fixed_tokens + item_tokens(&boundary);

    let mut restored = Vec::new();
    let mut restored_files = Vec::new();
    let mut restore_spent = 0u64;
    for candidate in candidates {
        if restored.len() >= cfg.restore_max_files {
            break;
        }
        let file_tokens = estimate_tokens(&candidate.content);
        if restore_spent + file_tokens > cfg.restore_token_budget {
            continue;
        }
        let item = restored_item(
            format!("restored-{turn}-{seq}-{}", restored.len()),
            candidate,
        );
        let cost = item_tokens(&item);
        if used + cost > limit {
            continue;
        }
        used += cost;
        restore_spent += file_tokens;
        restored_files.push((candidate.path.clone(), file_tokens));
        restored.push(item);
    }

    let mut out = systems;
    out.push(boundary);
    out.extend(restored);
    out.extend(last_user);

    let kept: std::collections::HashSet<&str> = out.iter().map(|i| i.id.as_str()).collect();
    let removed_ids = history
        .iter()
        .filter(|i| !kept.contains(i.id.as_str()))
        .map(|i| i.id.clone())
        .collect();
    let report = CompactionReport {
        phase: Phase::Full,
        removed_ids,
        summary_item_id: Some(boundary_id),
        restored_files,
        tokens_before,
        tokens_after: history_tokens(&out),
    };
    let ghost = GhostSnapshot {
        snapshot_id: format!("ghost-{turn}-{seq}"),
        items: history.to_vec(),
        created_at_turn: turn,
    };
    Ok((out, report, ghost))
}
