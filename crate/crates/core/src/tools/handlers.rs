//! Built-in tool handlers: shell, apply_patch, list_dir, request_permissions
//! and the MCP delegate slot.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Value};
use thiserror::Error;

use super::patch::{apply_patch, parse_patch};
use super::{
    object_schema, HandlerOutput, ParsedInvocation, ToolContext, ToolHandler, ToolInvocation,
    ToolRegistry, ToolSpec,
};
use crate::execpolicy::PolicyQuery;
use crate::permissions::{normalize_argv, PermissionQuery};
use crate::protocol::ToolStatus;
use crate::sandbox::{execute, normalize_path, SandboxError, SandboxMode};

fn query(ctx: &ToolContext, tool: &str, argv: Vec<String>, summary: String) -> PermissionQuery {
    PermissionQuery {
        tool_name: tool.to_string(),
        policy: PolicyQuery::command(&argv),
        sandbox_mode: ctx.sandbox_mode(),
        shell_argv: None,
        summary,
    }
}

fn wrong_args(inv: &ToolInvocation) -> HandlerOutput {
    HandlerOutput::error(format!(
        "handler `{}` received mismatched arguments",
        inv.tool_name
    ))
}

/// Merges captured streams: stdout, then stderr under a `[stderr]` tag.
pub fn merge_streams(stdout: &str, stderr: &str) -> String {
    if stderr.is_empty() {
        stdout.to_string()
    } else {
        format!("{stdout}[stderr]\n{stderr}")
    }
}

#[derive(Debug, Default)]
pub struct ShellHandler;

impl ToolHandler for ShellHandler {
    fn spec(&self) -> ToolSpec {
        ToolSpec {
            name: "shell".into(),
            description: "Run a shell command inside the sandbox and return its output.".into(),
            parameters: object_schema(
                json!({
                    "command": {"description": "argv array, or a script run with bash -lc",
                                "anyOf": [{"type": "array", "items": {"type": "string"}}, {"type": "string"}]},
                    "workdir": {"type": "string"},
                    "timeout_ms": {"type": "integer", "minimum": 0}
                }),
                &["command"],
            ),
        }
    }

    fn permission_query(&self, inv: &ToolInvocation, ctx: &ToolContext) -> PermissionQuery {
        let ParsedInvocation::Shell { argv, .. } = &inv.parsed else {
            return query(ctx, "shell", vec!["shell".into()], String::new());
        };
        let mut q = query(
            ctx,
            "shell",
            normalize_argv(argv),
            crate::guardian::render_command(argv),
        );
        q.shell_argv = Some(argv.clone());
        q
    }

    fn execute(&self, inv: &ToolInvocation, ctx: &ToolContext) -> HandlerOutput {
        let ParsedInvocation::Shell {
            argv,
            workdir,
            timeout_ms,
        } = &inv.parsed
        else {
            return wrong_args(inv);
        };
        let spec = match ctx.sandbox_spec() {
            Ok(spec) => spec,
            Err(e) => return HandlerOutput::error(e.to_string()),
        };
        let dir = match workdir {
            Some(w) => normalize_path(&ctx.workspace_root, w),
            None => ctx.workspace_root.clone(),
        };
        match execute(&spec, argv, &dir, *timeout_ms, ctx.backend.as_ref()) {
            Ok(out) if !out.violations.is_empty() => {
                let paths: Vec<String> = out
                    .violations
                    .iter()
                    .map(|p| p.display().to_string())
                    .collect();
                HandlerOutput {
                    status: ToolStatus::Error,
                    text: format!(
                        "{}sandbox violation ({} mode): write outside writable roots: {}",
                        merge_streams(&out.stdout, &out.stderr),
                        spec.mode,
                        paths.join(", ")
                    ),
                    exit_code: out.exit_code,
                }
            }
            Ok(out) => HandlerOutput {
                status: if out.exit_code == Some(0) {
                    ToolStatus::Ok
                } else {
                    ToolStatus::Error
                },
                text: merge_streams(&out.stdout, &out.stderr),
                exit_code: out.exit_code,
            },
            Err(SandboxError::Timeout {
                timeout_ms,
                stdout,
                stderr,
            }) => HandlerOutput::error(format!(
                "{}command timed out after {timeout_ms} ms",
                merge_streams(&stdout, &stderr)
            )),
            Err(e) => HandlerOutput::error(e.to_string()),
        }
    }
}

#[derive(Debug, Default)]
pub struct ApplyPatchHandler;

impl ToolHandler for ApplyPatchHandler {
    fn spec(&self) -> ToolSpec {
        ToolSpec {
            name: "apply_patch".into(),
            description:
                "Apply a patch (*** Begin Patch ... *** End Patch) to files in the workspace."
                    .into(),
            parameters: object_schema(json!({"patch": {"type": "string"}}), &["patch"]),
        }
    }

    fn permission_query(&self, inv: &ToolInvocation, ctx: &ToolContext) -> PermissionQuery {
        let mut argv = vec!["apply_patch".to_string()];
        if let ParsedInvocation::Patch { text } = &inv.parsed {
            if let Ok(doc) = parse_patch(text) {
                argv.extend(doc.paths().iter().map(|p| p.display().to_string()));
            }
        }
        let summary = argv.join(" ");
        query(ctx, "apply_patch", argv, summary)
    }

    fn execute(&self, inv: &ToolInvocation, ctx: &ToolContext) -> HandlerOutput {
        let ParsedInvocation::Patch { text } = &inv.parsed else {
            return wrong_args(inv);
        };
        let doc = match parse_patch(text) {
            Ok(doc) => doc,
            Err(e) => return HandlerOutput::error(e.to_string()),
        };
        let spec = match ctx.sandbox_spec() {
            Ok(spec) => spec,
            Err(e) => return HandlerOutput::error(e.to_string()),
        };
        let blocked: Vec<String> = doc
            .paths()
            .iter()
            .filter(|p| !spec.is_writable(&ctx.workspace_root.join(p)))
            .map(|p| p.display().to_string())
            .collect();
        if !blocked.is_empty() {
            return HandlerOutput::error(format!(
                "sandbox violation ({} mode): not writable: {}",
                spec.mode,
                blocked.join(", ")
            ));
        }
        match apply_patch(&doc, &ctx.workspace_root) {
            Ok(report) => HandlerOutput::ok(format!(
                "Success. Updated the following files:\n{}\n",
                report.summary()
            )),
            Err(e) => HandlerOutput::error(e.to_string()),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ListDirError {
    #[error("path not found: {0}")]
    PathNotFound(PathBuf),
    #[error("failed to read {path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

/// Lists entries under `root` up to `depth` levels, in lexicographic
/// pre-order. Directories carry a trailing `/`. Depth 0 yields only the root
/// entry `./`.
pub fn list_dir(root: &Path, depth: usize) -> Result<Vec<String>, ListDirError> {
    if !root.exists() {
        return Err(ListDirError::PathNotFound(root.to_path_buf()));
    }
    if depth == 0 {
        return Ok(vec!["./".into()]);
    }
    let mut out = Vec::new();
    walk(root, "", depth, &mut out)?;
    Ok(out)
}

fn walk(
    dir: &Path,
    prefix: &str,
    remaining: usize,
    out: &mut Vec<String>,
) -> Result<(), ListDirError> {
    let io = |e: std::io::Error| ListDirError::Io {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    };
    let mut entries: Vec<(String, bool)> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(Result::ok)
        .map(|e| {
            let is_dir = e.file_type().map(|t| t.is_dir()).unwrap_or(false);
            (e.file_name().to_string_lossy().into_owned(), is_dir)
        })
        .collect();
    entries.sort();
    for (name, is_dir) in entries {
        let rel = format!("{prefix}{name}");
        if is_dir {
            out.push(format!("{rel}/"));
            if remaining > 1 {
                walk(&dir.join(&name), &format!("{rel}/"), remaining - 1, out)?;
            }
        } else {
            out.push(rel);
        }
    }
    Ok(())
}

#[derive(Debug, Default)]
pub struct ListDirHandler;

impl ToolHandler for ListDirHandler {
    fn spec(&self) -> ToolSpec {
        ToolSpec {
            name: "list_dir".into(),
            description: "List a directory up to a given depth.".into(),
            parameters: object_schema(
                json!({"path": {"type": "string"}, "depth": {"type": "integer", "minimum": 0}}),
                &[],
            ),
        }
    }

    fn permission_query(&self, inv: &ToolInvocation, ctx: &ToolContext) -> PermissionQuery {
        let path = match &inv.parsed {
            ParsedInvocation::ListDir { path, .. } => path.display().to_string(),
            _ => ".".into(),
        };
        query(
            ctx,
            "list_dir",
            vec!["list_dir".into(), path.clone()],
            format!("list_dir {path}"),
        )
    }

    fn execute(&self, inv: &ToolInvocation, ctx: &ToolContext) -> HandlerOutput {
        let ParsedInvocation::ListDir { path, depth } = &inv.parsed else {
            return wrong_args(inv);
        };
        match list_dir(&normalize_path(&ctx.workspace_root, path), *depth) {
            Ok(entries) => {
                HandlerOutput::ok(entries.iter().map(|e| format!("{e}\n")).collect::<String>())
            }
            Err(e) => HandlerOutput::error(e.to_string()),
        }
    }
}

#[derive(Debug, Default)]
pub struct RequestPermissionsHandler;

impl ToolHandler for RequestPermissionsHandler {
    fn spec(&self) -> ToolSpec {
        ToolSpec {
            name: "request_permissions".into(),
            description: "Ask to change the sandbox mode for the rest of the session.".into(),
            parameters: object_schema(
                json!({"mode": {"type": "string", "enum": ["read-only", "workspace-write", "danger-full-access"]}}),
                &["mode"],
            ),
        }
    }

    fn permission_query(&self, inv: &ToolInvocation, ctx: &ToolContext) -> PermissionQuery {
        let mode = match &inv.parsed {
            ParsedInvocation::RequestPermissions { mode } => mode.cli_name().to_string(),
            _ => String::new(),
        };
        let summary = format!("switch sandbox from {} to {mode}", ctx.sandbox_mode());
        query(
            ctx,
            "request_permissions",
            vec!["request_permissions".into(), mode],
            summary,
        )
    }

    fn execute(&self, inv: &ToolInvocation, ctx: &ToolContext) -> HandlerOutput {
        let ParsedInvocation::RequestPermissions { mode } = &inv.parsed else {
            return wrong_args(inv);
        };
        if *mode == SandboxMode::FullAccess
            && !ctx.permissions.is_interactive()
            && !ctx.full_access_opt_in
        {
            return HandlerOutput {
                status: ToolStatus::Denied,
                text: "full access requires interactive approval or explicit opt-in".into(),
                exit_code: None,
            };
        }
        let previous = ctx.sandbox_mode();
        ctx.set_sandbox_mode(*mode);
        HandlerOutput::ok(format!("sandbox mode changed from {previous} to {mode}"))
    }
}

/// Calls an external MCP server tool.
pub type McpDelegate = dyn Fn(&Value) -> Result<String, String> + Send + Sync;

/// Reserved slot for MCP tools. Without a delegate every call fails with
/// an unknown-tool error.
#[derive(Default)]
pub struct McpHandler {
    delegate: Option<Box<McpDelegate>>,
}

impl McpHandler {
    pub fn with_delegate(delegate: Box<McpDelegate>) -> Self {
        Self {
            delegate: Some(delegate),
        }
    }
}

impl ToolHandler for McpHandler {
    fn spec(&self) -> ToolSpec {
        ToolSpec {
            name: "mcp".into(),
            description: "Call a tool on a connected MCP server.".into(),
            parameters: object_schema(
                json!({"server": {"type": "string"}, "tool": {"type": "string"}, "arguments": {"type": "object"}}),
                &["server", "tool"],
            ),
        }
    }

    fn execute(&self, inv: &ToolInvocation, _ctx: &ToolContext) -> HandlerOutput {
        match &self.delegate {
            None => HandlerOutput::error(format!(
                "unknown tool `{}`: no MCP delegate configured",
                inv.tool_name
            )),
            Some(delegate) => match delegate(&inv.arguments) {
                Ok(text) => HandlerOutput::ok(text),
                Err(e) => HandlerOutput::error(e),
            },
        }
    }
}

/// shell, apply_patch, list_dir, request_permissions and mcp.
pub fn builtin_registry() -> ToolRegistry {
    let mut registry = ToolRegistry::new();
    let handlers: [(&str, Arc<dyn ToolHandler>); 5] = [
        ("shell", Arc::new(ShellHandler)),
        ("apply_patch", Arc::new(ApplyPatchHandler)),
        ("list_dir", Arc::new(ListDirHandler)),
        ("request_permissions", Arc::new(RequestPermissionsHandler)),
        ("mcp", Arc::new(McpHandler::default())),
    ];
    for (name, handler) in handlers {
        registry
            .register(name, handler)
            .expect("builtin names are unique");
    }
    registry
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn list_dir_depths() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a"), "").unwrap();
        fs::create_dir(dir.path().join("b")).unwrap();
        fs::write(dir.path().join("b/c"), "").unwrap();
        assert_eq!(list_dir(dir.path(), 1).unwrap(), vec!["a", "b/"]);
        assert_eq!(list_dir(dir.path(), 2).unwrap(), vec!["a", "b/", "b/c"]);
        assert_eq!(list_dir(dir.path(), 0).unwrap(), vec!["./"]);
        assert!(matches!(
            list_dir(&dir.path().join("missing"), 1),
            Err(ListDirError::PathNotFound(_))
        ));
    }

    #[test]
    fn builtin_names() {
        assert_eq!(
            builtin_registry().names(),
            vec![
                "apply_patch",
                "list_dir",
                "mcp",
                "request_permissions",
                "shell"
            ]
        );
    }

    #[test]
    fn stream_merge() {
        assert_eq!(merge_streams("out\n", ""), "out\n");
        assert_eq!(merge_streams("out\n", "err\n"), "out\n[stderr]\nerr\n");
    }
}
