//! Patch documents: parsing and all-or-nothing application.
//!
//! ```text
//! *** Begin Patch
//! *** Add File: src/new.rs
//! +fn main() {}
//! *** Update File: src/lib.rs
//! @@
//!  context
//! -old line
//! +new line
//!  context
//! *** Delete File: old.txt
//! *** End Patch
//! ```
//!
//! The grammar is documented in `docs/patch-format.md`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

pub const BEGIN: &str = "*** Begin Patch";
pub const END: &str = "*** End Patch";
const ADD: &str = "*** Add File: ";
const DELETE: &str = "*** Delete File: ";
const UPDATE: &str = "*** Update File: ";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Hunk {
    pub context_before: Vec<String>,
    pub removed: Vec<String>,
    pub added: Vec<String>,
    pub context_after: Vec<String>,
}

impl Hunk {
    fn pattern(&self) -> Vec<&str> {
        self.context_before
            .iter()
            .chain(&self.removed)
            .chain(&self.context_after)
            .map(String::as_str)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PatchOp {
    AddFile { path: PathBuf, content: String },
    DeleteFile { path: PathBuf },
    UpdateFile { path: PathBuf, hunks: Vec<Hunk> },
}

impl PatchOp {
    pub fn path(&self) -> &Path {
        match self {
            PatchOp::AddFile { path, .. }
            | PatchOp::DeleteFile { path }
            | PatchOp::UpdateFile { path, .. } => path,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PatchDocument {
    pub ops: Vec<PatchOp>,
}

impl PatchDocument {
    pub fn paths(&self) -> Vec<&Path> {
        self.ops.iter().map(PatchOp::path).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FileAction {
    Added,
    Updated,
    Deleted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileOutcome {
    pub path: PathBuf,
    pub action: FileAction,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ApplyReport {
    pub files: Vec<FileOutcome>,
}

impl ApplyReport {
    pub fn summary(&self) -> String {
        self.files
            .iter()
            .map(|f| {
                let tag = match f.action {
                    FileAction::Added => 'A',
                    FileAction::Updated => 'M',
                    FileAction::Deleted => 'D',
                };
                format!("{tag} {}", f.path.display())
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PatchError {
    #[error("patch line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("conflict in {path}{}: {detail}", hunk_index.map(|i| format!(" hunk {i}")).unwrap_or_default())]
    Conflict {
        path: PathBuf,
        hunk_index: Option<usize>,
        expected: Vec<String>,
        found: Vec<String>,
        detail: String,
    },
    #[error("io error on {path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

fn parse_path(raw: &str, line: usize) -> Result<PathBuf, PatchError> {
    let err = |reason: &str| PatchError::Parse {
        line,
        reason: format!("{reason}: `{raw}`"),
    };
    let raw = raw.trim();
    if raw.is_empty() {
        return Err(err("empty path"));
    }
    let path = PathBuf::from(raw);
    for c in path.components() {
        match c {
            Component::Normal(_) | Component::CurDir => {}
            Component::ParentDir => return Err(err("path escapes the workspace")),
            Component::RootDir | Component::Prefix(_) => return Err(err("path must be relative")),
        }
    }
    Ok(path)
}

/// Splits the body lines of one update section into hunks. A context line
/// after a change closes the change block; a later change opens a new hunk
/// whose leading context is the shared run of context lines.
fn body_to_hunks(body: &[(usize, &str)]) -> Result<Vec<Hunk>, PatchError> {
    let mut hunks = Vec::new();
    let mut cur = Hunk::default();
    let mut in_change = false;
    let mut seen_change = false;
    for &(line, text) in body {
        let (tag, rest) = match text.chars().next() {
            None => (' ', ""),
            Some(c) => (c, &text[c.len_utf8()..]),
        };
        match tag {
            ' ' => {
                if in_change || seen_change {
                    cur.context_after.push(rest.to_string());
                    in_change = false;
                } else {
                    cur.context_before.push(rest.to_string());
                }
            }
            '-' | '+' => {
                if seen_change && !in_change {
                    let shared = cur.context_after.clone();
                    hunks.push(std::mem::take(&mut cur));
                    cur.context_before = shared;
                }
                if tag == '-' {
                    cur.removed.push(rest.to_string());
                } else {
                    cur.added.push(rest.to_string());
                }
                in_change = true;
                seen_change = true;
            }
            _ => {
                return Err(PatchError::Parse {
                    line,
                    reason: format!("unrecognized hunk line `{text}`"),
                })
            }
        }
    }
    if seen_change {
        hunks.push(cur);
    }
    Ok(hunks)
}

pub fn parse_patch(text: &str) -> Result<PatchDocument, PatchError> {
    if text.trim().is_empty() {
        return Ok(PatchDocument::default());
    }
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .collect();
    let first = lines
        .iter()
        .position(|(_, l)| !l.trim().is_empty())
        .unwrap_or(0);
    let last = lines
        .iter()
        .rposition(|(_, l)| !l.trim().is_empty())
        .unwrap_or(0);
    if lines[first].1.trim() != BEGIN {
        return Err(PatchError::Parse {
            line: lines[first].0,
            reason: format!("expected `{BEGIN}`"),
        });
    }
    if last == first || lines[last].1.trim() != END {
        return Err(PatchError::Parse {
            line: lines[last].0,
            reason: format!("expected `{END}`"),
        });
    }
    let body = &lines[first + 1..last];

    let mut ops = Vec::new();
    let mut i = 0;
    while i < body.len() {
        let (line, text) = body[i];
        i += 1;
        if let Some(raw) = text.strip_prefix(ADD) {
            let path = parse_path(raw, line)?;
            let mut content = String::new();
            while i < body.len() && !body[i].1.starts_with("*** ") {
                let (l, t) = body[i];
                let Some(rest) = t.strip_prefix('+') else {
                    return Err(PatchError::Parse {
                        line: l,
                        reason: "added file lines must start with `+`".into(),
                    });
                };
                content.push_str(rest);
                content.push('\n');
                i += 1;
            }
            ops.push(PatchOp::AddFile { path, content });
        } else if let Some(raw) = text.strip_prefix(DELETE) {
            ops.push(PatchOp::DeleteFile {
                path: parse_path(raw, line)?,
            });
        } else if let Some(raw) = text.strip_prefix(UPDATE) {
            let path = parse_path(raw, line)?;
            let mut hunks = Vec::new();
            while i < body.len() && !body[i].1.starts_with("*** ") {
                let (l, t) = body[i];
                if !t.starts_with("@@") {
                    return Err(PatchError::Parse {
                        line: l,
                        reason: "expected `@@` hunk header".into(),
                    });
                }
                i += 1;
                let start = i;
                while i < body.len()
                    && !body[i].1.starts_with("@@")
                    && !body[i].1.starts_with("*** ")
                {
                    i += 1;
                }
                hunks.extend(body_to_hunks(&body[start..i])?);
            }
            if hunks.is_empty() {
                return Err(PatchError::Parse {
                    line,
                    reason: "update without any changes".into(),
                });
            }
            ops.push(PatchOp::UpdateFile { path, hunks });
        } else if text.trim().is_empty() {
            continue;
        } else {
            return Err(PatchError::Parse {
                line,
                reason: format!("unrecognized directive `{text}`"),
            });
        }
    }
    Ok(PatchDocument { ops })
}

fn split_lines(text: &str) -> (Vec<&str>, bool) {
    if text.is_empty() {
        return (Vec::new(), true);
    }
    let trailing = text.ends_with('\n');
    let body = if trailing {
        &text[..text.len() - 1]
    } else {
        text
    };
    (body.split('\n').collect(), trailing)
}

/// Applies `hunks` to `original`, returning the new content.
pub fn apply_hunks(path: &Path, original: &str, hunks: &[Hunk]) -> Result<String, PatchError> {
    let (orig, trailing) = split_lines(original);
    let mut out: Vec<&str> = Vec::with_capacity(orig.len());
    let mut cursor = 0;
    for (idx, hunk) in hunks.iter().enumerate() {
        let pattern = hunk.pattern();
        let found_at = (cursor..=orig.len().saturating_sub(pattern.len())).find(|&q| {
            q + pattern.len() <= orig.len() && orig[q..q + pattern.len()] == pattern[..]
        });
        let Some(q) = found_at else {
            let end = (cursor + pattern.len()).min(orig.len());
            return Err(PatchError::Conflict {
                path: path.to_path_buf(),
                hunk_index: Some(idx),
                expected: pattern.iter().map(|s| s.to_string()).collect(),
                found: orig[cursor.min(orig.len())..end]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
                detail: "context does not match file content".into(),
            });
        };
        let keep_until = q + hunk.context_before.len();
        out.extend_from_slice(&orig[cursor..keep_until]);
        out.extend(hunk.added.iter().map(String::as_str));
        cursor = keep_until + hunk.removed.len();
    }
    out.extend_from_slice(&orig[cursor..]);
    let mut text = out.join("\n");
    if trailing && !out.is_empty() {
        text.push('\n');
    }
    Ok(text)
}

fn file_conflict(path: &Path, detail: &str) -> PatchError {
    PatchError::Conflict {
        path: path.to_path_buf(),
        hunk_index: None,
        expected: Vec::new(),
        found: Vec::new(),
        detail: detail.into(),
    }
}

/// Validates every op against the current tree before writing anything.
pub fn apply_patch(doc: &PatchDocument, root: &Path) -> Result<ApplyReport, PatchError> {
    // Virtual view of touched files: Some(content) or None for deleted.
    let mut staged: BTreeMap<PathBuf, Option<String>> = BTreeMap::new();
    let mut report = ApplyReport::default();
    for op in &doc.ops {
        let rel = op.path();
        let abs = root.join(rel);
        let current = match staged.get(rel) {
            Some(state) => state.clone(),
            None if abs.is_file() => {
                Some(fs::read_to_string(&abs).map_err(|e| PatchError::Io {
                    path: rel.to_path_buf(),
                    reason: e.to_string(),
                })?)
            }
            None if abs.exists() => {
                return Err(file_conflict(rel, "path exists and is not a regular file"))
            }
            None => None,
        };
        let (next, action) = match (op, current) {
            (PatchOp::AddFile { content, .. }, None) => (Some(content.clone()), FileAction::Added),
            (PatchOp::AddFile { .. }, Some(_)) => {
                return Err(file_conflict(rel, "file already exists"))
            }
            (PatchOp::DeleteFile { .. }, Some(_)) => (None, FileAction::Deleted),
            (PatchOp::DeleteFile { .. }, None) => {
                return Err(file_conflict(rel, "file does not exist"))
            }
            (PatchOp::UpdateFile { hunks, .. }, Some(text)) => {
                (Some(apply_hunks(rel, &text, hunks)?), FileAction::Updated)
            }
            (PatchOp::UpdateFile { .. }, None) => {
                return Err(file_conflict(rel, "file does not exist"))
            }
        };
        staged.insert(rel.to_path_buf(), next);
        report.files.push(FileOutcome {
            path: rel.to_path_buf(),
            action,
        });
    }

    for (rel, content) in &staged {
        let abs = root.join(rel);
        let io = |e: std::io::Error| PatchError::Io {
            path: rel.clone(),
            reason: e.to_string(),
        };
        match content {
            Some(text) => {
                if let Some(parent) = abs.parent() {
                    fs::create_dir_all(parent).map_err(io)?;
                }
                fs::write(&abs, text).map_err(io)?;
            }
            None => {
                if abs.exists() {
                    fs::remove_file(&abs).map_err(io)?;
                }
            }
        }
    }
    Ok(report)
}
