use std::ffi::{c_char, CStr, CString};
use std::ptr;

use agent_kernel::harness::{ModelScript, ScriptStep, ScriptTurn, ScriptedCall};
use agent_kernel_ffi::*;

fn take(s: *mut c_char) -> Option<String> {
    if s.is_null() {
        return None;
    }
    let text = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_string();
    unsafe { ak_string_free(s) };
    Some(text)
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

#[test]
fn version_and_tokens() {
    let v = unsafe { CStr::from_ptr(ak_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    assert_eq!(unsafe { ak_estimate_tokens(c("abcdefgh").as_ptr()) }, 2);
    assert_eq!(unsafe { ak_estimate_tokens(ptr::null()) }, 0);
}

#[test]
fn policy_roundtrip_and_errors() {
    let mut policy = ptr::null_mut();
    let user = c("deny prefix \"rm\"\nallow prefix \"git status\"\n");
    assert_eq!(
        unsafe { ak_policy_new(ptr::null(), ptr::null(), user.as_ptr(), &mut policy) },
        AkStatus::Ok
    );
    assert!(take(ak_last_error()).is_none());

    let eval = |args: &[&str]| {
        let owned: Vec<CString> = args.iter().map(|a| c(a)).collect();
        let argv: Vec<*const c_char> = owned.iter().map(|a| a.as_ptr()).collect();
        let mut verdict = AkVerdict::Prompt;
        let status = unsafe { ak_policy_evaluate(policy, argv.as_ptr(), argv.len(), &mut verdict) };
        (status, verdict)
    };
    assert_eq!(eval(&["rm", "-rf", "/"]), (AkStatus::Ok, AkVerdict::Deny));
    assert_eq!(eval(&["git", "status"]), (AkStatus::Ok, AkVerdict::Allow));
    assert_eq!(eval(&["curl", "x"]), (AkStatus::Ok, AkVerdict::Prompt));

    let mut verdict = AkVerdict::Allow;
    assert_eq!(
        unsafe { ak_policy_evaluate(policy, ptr::null(), 0, &mut verdict) },
        AkStatus::InvalidArgument
    );
    assert!(take(ak_last_error()).unwrap().contains("argv"));
    unsafe { ak_policy_free(policy) };

    let mut bad = ptr::null_mut();
    let doc = c("maybe prefix \"x\"\n");
    assert_eq!(
        unsafe { ak_policy_new(doc.as_ptr(), ptr::null(), ptr::null(), &mut bad) },
        AkStatus::InvalidArgument
    );
    assert!(bad.is_null());
    assert!(take(ak_last_error()).unwrap().contains("verdict"));
}

#[test]
fn null_out_pointer_is_rejected() {
    assert_eq!(
        unsafe { ak_policy_new(ptr::null(), ptr::null(), ptr::null(), ptr::null_mut()) },
        AkStatus::NullArgument
    );
}

#[test]
fn session_runs_a_script() {
    let dir = tempfile::tempdir().unwrap();
    let script = ModelScript::new(vec![
        ScriptStep::Turn(ScriptTurn::ToolCalls {
            calls: vec![ScriptedCall::new(
                "shell",
                serde_json::json!({"command": ["echo", "from-c"]}),
            )],
        }),
        ScriptStep::Turn(ScriptTurn::Final {
            text: "done".into(),
        }),
    ])
    .unwrap();
    let script_path = dir.path().join("script.jsonl");
    std::fs::write(&script_path, script.to_jsonl()).unwrap();

    let model = c(&format!("mock:{}", script_path.display()));
    let workspace = c(dir.path().to_str().unwrap());
    let policy = c("allow prefix \"echo\"\n");
    let mut session = ptr::null_mut();
    let status = unsafe {
        ak_session_new(
            model.as_ptr(),
            workspace.as_ptr(),
            ptr::null(),
            policy.as_ptr(),
            ptr::null(),
            ptr::null(),
            &mut session,
        )
    };
    assert_eq!(status, AkStatus::Ok, "{:?}", take(ak_last_error()));

    let mut events = ptr::null_mut();
    assert_eq!(
        unsafe { ak_session_events(session, &mut events) },
        AkStatus::NotFound
    );

    let mut outcome = AkOutcome::Failed;
    let mut text = ptr::null_mut();
    let prompt = c("echo something");
    assert_eq!(
        unsafe { ak_session_run(session, prompt.as_ptr(), &mut outcome, &mut text) },
        AkStatus::Ok
    );
    assert_eq!(outcome, AkOutcome::Completed);
    assert_eq!(take(text).as_deref(), Some("done"));

    assert_eq!(
        unsafe { ak_session_events(session, &mut events) },
        AkStatus::Ok
    );
    let events = take(events).unwrap();
    let lines: Vec<serde_json::Value> = events
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let result = lines.iter().find(|e| e["type"] == "ToolResult").unwrap();
    assert_eq!(result["output"], "from-c\n");
    unsafe { ak_session_free(session) };
}

#[test]
fn unknown_sandbox_name_fails() {
    let model = c("mock:/nonexistent");
    let workspace = c("/tmp");
    let sandbox = c("yolo");
    let mut session = ptr::null_mut();
    let status = unsafe {
        ak_session_new(
            model.as_ptr(),
            workspace.as_ptr(),
            sandbox.as_ptr(),
            ptr::null(),
            ptr::null(),
            ptr::null(),
            &mut session,
        )
    };
    assert_eq!(status, AkStatus::InvalidArgument);
    assert!(take(ak_last_error()).unwrap().contains("yolo"));
}

#[test]
fn store_export_of_missing_session() {
    let dir = tempfile::tempdir().unwrap();
    let path = c(dir.path().join("s.db").to_str().unwrap());
    let mut store = ptr::null_mut();
    assert_eq!(
        unsafe { ak_store_open(path.as_ptr(), &mut store) },
        AkStatus::Ok
    );
    let mut out = ptr::null_mut();
    let id = c("nope");
    assert_eq!(
        unsafe { ak_store_export(store, id.as_ptr(), &mut out) },
        AkStatus::NotFound
    );
    assert!(out.is_null());
    unsafe { ak_store_free(store) };
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/agent_kernel.h");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{header}\"\nint main(void) {{ AkStatus s = AK_STATUS_OK; AkPolicy *p = 0; (void)p; return (int)s; }}\n"
        ),
    )
    .unwrap();
    let Ok(out) = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"])
        .arg(&src)
        .output()
    else {
        eprintln!("no C compiler on PATH; skipping");
        return;
    };
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
