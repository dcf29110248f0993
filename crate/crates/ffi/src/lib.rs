//! C ABI for agent-kernel.
//!
//! Every fallible function returns an [`AkStatus`]; on failure the message is
//! available from [`ak_last_error`] on the same thread. Handles are opaque and
//! must be released with their matching `_free` function. Strings returned
//! through out-pointers are owned by the caller and released with
//! [`ak_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use agent_kernel::config::policy_from_documents;
use agent_kernel::context::estimate_tokens;
use agent_kernel::execpolicy::{evaluate, MergedPolicy, PolicyQuery, Verdict};
use agent_kernel::harness::{MockServer, ModelScript};
use agent_kernel::runner::{Outcome, RunSummary, Runner, RunnerBuilder, SessionConfig};
use agent_kernel::sandbox::SandboxMode;
use agent_kernel::state::{open_store, Store};
use agent_kernel::transport::{HttpModelClient, NoSleep, ThreadSleeper};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AkStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    NotFound = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AkVerdict {
    Allow = 0,
    Deny = 1,
    Prompt = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AkOutcome {
    Completed = 0,
    MaxTurnsReached = 1,
    Failed = 2,
}

/// A merged execution policy.
pub struct AkPolicy {
    policy: MergedPolicy,
}

/// One agent session bound to a workspace and a model endpoint.
pub struct AkSession {
    runner: Runner,
    last: Option<RunSummary>,
    _server: Option<MockServer>,
}

/// An open state store.
pub struct AkStore {
    store: Store,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(AkStatus, String);

impl Failure {
    fn invalid(message: impl Into<String>) -> Self {
        Failure(AkStatus::InvalidArgument, message.into())
    }
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            AkStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(&message);
            status
        }
        Err(_) => {
            set_error("panic inside agent-kernel");
            AkStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or a valid NUL-terminated string.
unsafe fn required_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(Failure(AkStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure(AkStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

/// # Safety
/// `ptr` must be null or a valid NUL-terminated string.
unsafe fn optional_str<'a>(ptr: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if ptr.is_null() {
        Ok(None)
    } else {
        required_str(ptr, name).map(Some)
    }
}

fn out_string(text: &str) -> *mut c_char {
    CString::new(text.replace('\0', " "))
        .unwrap_or_default()
        .into_raw()
}

fn check_out<T>(out: *mut T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        Err(Failure(AkStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// Library version as a static string. Do not free.
#[no_mangle]
pub extern "C" fn ak_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Returns a copy of this thread's last error message, or null if the last
/// call succeeded. Free with [`ak_string_free`].
#[no_mangle]
pub extern "C" fn ak_last_error() -> *mut c_char {
    LAST_ERROR.with(|slot| match slot.borrow().as_ref() {
        Some(c) => c.clone().into_raw(),
        None => std::ptr::null_mut(),
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ak_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Token estimate for `text`; 0 for a null or non-UTF-8 pointer.
///
/// # Safety
/// `text` must be null or a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ak_estimate_tokens(text: *const c_char) -> u64 {
    required_str(text, "text").map(estimate_tokens).unwrap_or(0)
}

/// Builds a policy from up to three rule documents; any may be null.
///
/// # Safety
/// String arguments must be null or valid NUL-terminated strings; `out` must
/// be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ak_policy_new(
    system: *const c_char,
    organization: *const c_char,
    user: *const c_char,
    out: *mut *mut AkPolicy,
) -> AkStatus {
    guard(|| {
        check_out(out, "out")?;
        let system = optional_str(system, "system")?.unwrap_or("");
        let organization = optional_str(organization, "organization")?.unwrap_or("");
        let user = optional_str(user, "user")?.unwrap_or("");
        let policy = policy_from_documents(system, organization, user)
            .map_err(|e| Failure::invalid(e.to_string()))?;
        *out = Box::into_raw(Box::new(AkPolicy { policy }));
        Ok(())
    })
}

/// Evaluates a command given as `argc` argument strings.
///
/// # Safety
/// `policy` must come from [`ak_policy_new`]; `argv` must point to `argc`
/// valid strings; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ak_policy_evaluate(
    policy: *const AkPolicy,
    argv: *const *const c_char,
    argc: usize,
    out: *mut AkVerdict,
) -> AkStatus {
    guard(|| {
        check_out(out, "out")?;
        let policy = policy
            .as_ref()
            .ok_or(Failure(AkStatus::NullArgument, "policy is null".into()))?;
        if argv.is_null() || argc == 0 {
            return Err(Failure::invalid("argv must hold at least one argument"));
        }
        let args = std::slice::from_raw_parts(argv, argc)
            .iter()
            .map(|&p| required_str(p, "argv element"))
            .collect::<Result<Vec<_>, _>>()?;
        *out = match evaluate(&policy.policy, &PolicyQuery::command(&args)).verdict {
            Verdict::Allow => AkVerdict::Allow,
            Verdict::Deny => AkVerdict::Deny,
            Verdict::Prompt => AkVerdict::Prompt,
        };
        Ok(())
    })
}

/// # Safety
/// `policy` must be null or a handle from [`ak_policy_new`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ak_policy_free(policy: *mut AkPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Opens a session. `model` is either `mock:<script path>`, which serves the
/// script on localhost, or a model id used with `api_base` and `api_key`.
/// `sandbox` is a mode name; null means read-only. `user_policy` may be null.
///
/// # Safety
/// String arguments must be null or valid NUL-terminated strings; `out` must
/// be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ak_session_new(
    model: *const c_char,
    workspace: *const c_char,
    sandbox: *const c_char,
    user_policy: *const c_char,
    api_base: *const c_char,
    api_key: *const c_char,
    out: *mut *mut AkSession,
) -> AkStatus {
    guard(|| {
        check_out(out, "out")?;
        let model = required_str(model, "model")?;
        let workspace = required_str(workspace, "workspace")?;
        let mode: SandboxMode = match optional_str(sandbox, "sandbox")? {
            Some(name) => name
                .parse()
                .map_err(|e: agent_kernel::sandbox::SandboxError| {
                    Failure::invalid(e.to_string())
                })?,
            None => SandboxMode::ReadOnly,
        };
        let policy = policy_from_documents(
            "",
            "",
            optional_str(user_policy, "user_policy")?.unwrap_or(""),
        )
        .map_err(|e| Failure::invalid(e.to_string()))?;
        let mut config = SessionConfig::new(model);
        config.sandbox_mode = mode;
        let builder = RunnerBuilder::new(config, workspace).policy(policy);

        let (runner, server) = if let Some(path) = model.strip_prefix("mock:") {
            let script = ModelScript::load(Path::new(path))
                .map_err(|e| Failure(AkStatus::Io, e.to_string()))?;
            let server =
                MockServer::start(script).map_err(|e| Failure(AkStatus::Io, e.to_string()))?;
            let client = HttpModelClient::new(&server.base_url(), Some(server.channel_url()));
            (
                builder.sleeper(Box::new(NoSleep)).build(Arc::new(client)),
                Some(server),
            )
        } else {
            let base = required_str(api_base, "api_base")?;
            let key = required_str(api_key, "api_key")?;
            let client = HttpModelClient::new(base, None);
            let runner = builder
                .keys(vec![key.to_string()])
                .sleeper(Box::new(ThreadSleeper))
                .build(Arc::new(client));
            (runner, None)
        };
        *out = Box::into_raw(Box::new(AkSession {
            runner,
            last: None,
            _server: server,
        }));
        Ok(())
    })
}

/// Runs one task to completion. `final_text` may be null; otherwise it
/// receives the final answer (or null when there is none).
///
/// # Safety
/// `session` must come from [`ak_session_new`]; `prompt` must be a valid
/// string; `outcome` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ak_session_run(
    session: *mut AkSession,
    prompt: *const c_char,
    outcome: *mut AkOutcome,
    final_text: *mut *mut c_char,
) -> AkStatus {
    guard(|| {
        check_out(outcome, "outcome")?;
        let session = session
            .as_mut()
            .ok_or(Failure(AkStatus::NullArgument, "session is null".into()))?;
        let prompt = required_str(prompt, "prompt")?;
        let summary = session.runner.run(prompt);
        *outcome = match summary.outcome {
            Outcome::Completed => AkOutcome::Completed,
            Outcome::MaxTurnsReached => AkOutcome::MaxTurnsReached,
            Outcome::Failed => AkOutcome::Failed,
        };
        if !final_text.is_null() {
            *final_text = summary
                .final_text
                .as_deref()
                .map_or(std::ptr::null_mut(), out_string);
        }
        session.last = Some(summary);
        Ok(())
    })
}

/// The last run's events, one JSON object per line.
///
/// # Safety
/// `session` must come from [`ak_session_new`]; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ak_session_events(
    session: *const AkSession,
    out: *mut *mut c_char,
) -> AkStatus {
    guard(|| {
        check_out(out, "out")?;
        let session = session
            .as_ref()
            .ok_or(Failure(AkStatus::NullArgument, "session is null".into()))?;
        let summary = session.last.as_ref().ok_or(Failure(
            AkStatus::NotFound,
            "session has not run yet".into(),
        ))?;
        let mut text = String::new();
        for event in &summary.events {
            text.push_str(
                &serde_json::to_string(event).map_err(|e| Failure::invalid(e.to_string()))?,
            );
            text.push('\n');
        }
        *out = out_string(&text);
        Ok(())
    })
}

/// # Safety
/// `session` must be null or a handle from [`ak_session_new`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ak_session_free(session: *mut AkSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Opens (creating if needed) the state store at `path`.
///
/// # Safety
/// `path` must be a valid string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ak_store_open(path: *const c_char, out: *mut *mut AkStore) -> AkStatus {
    guard(|| {
        check_out(out, "out")?;
        let path = required_str(path, "path")?;
        let store =
            open_store(Path::new(path)).map_err(|e| Failure(AkStatus::Io, e.to_string()))?;
        *out = Box::into_raw(Box::new(AkStore { store }));
        Ok(())
    })
}

/// Exports one session as a JSON document.
///
/// # Safety
/// `store` must come from [`ak_store_open`]; `session_id` must be a valid
/// string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ak_store_export(
    store: *const AkStore,
    session_id: *const c_char,
    out: *mut *mut c_char,
) -> AkStatus {
    guard(|| {
        check_out(out, "out")?;
        let store = store
            .as_ref()
            .ok_or(Failure(AkStatus::NullArgument, "store is null".into()))?;
        let id = required_str(session_id, "session_id")?;
        let json = store
            .store
            .export_session(id)
            .map_err(|e| Failure(AkStatus::NotFound, e.to_string()))?;
        *out = out_string(&json);
        Ok(())
    })
}

/// # Safety
/// `store` must be null or a handle from [`ak_store_open`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ak_store_free(store: *mut AkStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}
