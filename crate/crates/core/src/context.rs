//! Token estimation, the compaction trigger, and oversized tool-result
//! budgeting.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::protocol::InputItem;

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("invalid budget config: {0}")]
    InvalidBudget(String),
    #[error("invalid context limits: {0}")]
    InvalidLimits(String),
    #[error("failed to spill tool output to {path}: {source}")]
    SpillWriteFailed {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse token estimate: one token per four characters, rounded up.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

pub fn item_tokens(item: &InputItem) -> u64 {
    item.token_estimate_cache
        .unwrap_or_else(|| estimate_tokens(&item.content))
}

pub fn history_tokens(items: &[InputItem]) -> u64 {
    items.iter().map(item_tokens).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContextLimits {
    pub model_context_tokens: u64,
    pub compact_trigger_fraction: f64,
}

impl ContextLimits {
    pub fn new(
        model_context_tokens: u64,
        compact_trigger_fraction: f64,
    ) -> Result<Self, ContextError> {
        if model_context_tokens == 0 {
            return Err(ContextError::InvalidLimits(
                "model_context_tokens must be > 0".into(),
            ));
        }
        if !(compact_trigger_fraction > 0.0 && compact_trigger_fraction <= 1.0) {
            return Err(ContextError::InvalidLimits(format!(
                "compact_trigger_fraction {compact_trigger_fraction} not in (0, 1]"
            )));
        }
        Ok(Self {
            model_context_tokens,
            compact_trigger_fraction,
        })
    }

    pub fn trigger_tokens(&self) -> f64 {
        self.compact_trigger_fraction * self.model_context_tokens as f64
    }
}

impl Default for ContextLimits {
    fn default() -> Self {
        Self {
            model_context_tokens: 128_000,
            compact_trigger_fraction: 0.8,
        }
    }
}

/// True once the history reaches the trigger fraction of the model context
/// (inclusive).
pub fn should_compact(history: &[InputItem], limits: &ContextLimits) -> bool {
    if history.is_empty() {
        return false;
    }
    history_tokens(history) as f64 >= limits.trigger_tokens()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetConfig {
    pub tool_result_char_threshold: usize,
    pub head_preview: usize,
    pub tail_preview: usize,
    pub spill_dir: PathBuf,
}

impl BudgetConfig {
    pub fn new(
        tool_result_char_threshold: usize,
        head_preview: usize,
        tail_preview: usize,
        spill_dir: impl Into<PathBuf>,
    ) -> Result<Self, ContextError> {
        if tool_result_char_threshold <= head_preview + tail_preview {
            return Err(ContextError::InvalidBudget(format!(
                "threshold {tool_result_char_threshold} must exceed head+tail previews ({})",
                head_preview + tail_preview
            )));
        }
        Ok(Self {
            tool_result_char_threshold,
            head_preview,
            tail_preview,
            spill_dir: spill_dir.into(),
        })
    }

    pub fn with_spill_dir(spill_dir: impl Into<PathBuf>) -> Self {
        Self {
            spill_dir: spill_dir.into(),
            ..Self::default()
        }
    }
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            tool_result_char_threshold: 100_000,
            head_preview: 2_000,
            tail_preview: 2_000,
            spill_dir: std::env::temp_dir().join("agent-kernel-spill"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolResultPointer {
    pub spill_path: PathBuf,
    pub original_length: usize,
    pub head: String,
    pub tail: String,
}

impl ToolResultPointer {
    /// The text placed in the conversation in place of the full output.
    pub fn render(&self) -> String {
        format!(
            "[tool output too large: {} chars; full output saved to {}]\n--- head ---\n{}\n--- tail ---\n{}",
            self.original_length,
            self.spill_path.display(),
            self.head,
            self.tail
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BudgetedOutput {
    Inline(String),
    Pointer(ToolResultPointer),
    /// Spilling failed; only previews survive.
    Truncated {
        original_length: usize,
        head: String,
        tail: String,
        warning: String,
    },
}

impl BudgetedOutput {
    pub fn render(&self) -> String {
        match self {
            BudgetedOutput::Inline(text) => text.clone(),
            BudgetedOutput::Pointer(pointer) => pointer.render(),
            BudgetedOutput::Truncated {
                original_length,
                head,
                tail,
                warning,
            } => format!(
                "[WARNING: {warning}; output of {original_length} chars truncated]\n--- head ---\n{head}\n--- tail ---\n{tail}"
            ),
        }
    }
}

fn head_chars(text: &str, n: usize) -> String {
    text.chars().take(n).collect()
}

fn tail_chars(text: &str, n: usize) -> String {
    let count = text.chars().count();
    text.chars().skip(count.saturating_sub(n)).collect()
}

static SPILL_SEQ: AtomicU64 = AtomicU64::new(0);

fn spill_file_name(output: &str) -> String {
    let digest = Sha256::digest(output.as_bytes());
    let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
    format!("{hex}-{}.out", output.len())
}

fn write_spill(dir: &Path, output: &str) -> Result<PathBuf, ContextError> {
    let path = dir.join(spill_file_name(output));
    let fail = |source| ContextError::SpillWriteFailed {
        path: path.clone(),
        source,
    };
    fs::create_dir_all(dir).map_err(fail)?;
    if fs::read(&path).is_ok_and(|existing| existing == output.as_bytes()) {
        return Ok(path);
    }
    // Write to a private temp name, then rename into place: concurrent
    // spills of the same content converge on identical bytes.
    let tmp = dir.join(format!(
        ".{}.{}.{}.tmp",
        spill_file_name(output),
        std::process::id(),
        SPILL_SEQ.fetch_add(1, Ordering::Relaxed)
    ));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(output.as_bytes())?;
        f.sync_data()?;
        fs::rename(&tmp, &path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        fail(e)
    })?;
    Ok(path)
}

/// Leaves outputs at or below the threshold untouched; larger outputs are
/// written to `spill_dir` and replaced by a pointer with head/tail previews.
pub fn budget_tool_result(
    output: &str,
    cfg: &BudgetConfig,
) -> Result<BudgetedOutput, ContextError> {
    let length = output.chars().count();
    if length <= cfg.tool_result_char_threshold {
        return Ok(BudgetedOutput::Inline(output.to_string()));
    }
    let spill_path = write_spill(&cfg.spill_dir, output)?;
    Ok(BudgetedOutput::Pointer(ToolResultPointer {
        spill_path,
        original_length: length,
        head: head_chars(output, cfg.head_preview),
        tail: tail_chars(output, cfg.tail_preview),
    }))
}

/// Like [`budget_tool_result`], but a failed spill degrades to truncated
/// previews carrying a warning instead of an error.
pub fn budget_or_truncate(output: &str, cfg: &BudgetConfig) -> BudgetedOutput {
    match budget_tool_result(output, cfg) {
        Ok(out) => out,
        Err(err) => BudgetedOutput::Truncated {
            original_length: output.chars().count(),
            head: head_chars(output, cfg.head_preview),
            tail: tail_chars(output, cfg.tail_preview),
            warning: err.to_string(),
        },
    }
}
