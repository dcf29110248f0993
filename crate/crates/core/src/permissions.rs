//! The layered approval pipeline behind `can_use_tool`: configured policy,
//! then the guardian, then an interactive prompt. Decisions are cached for
//! the current turn.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};

use crate::execpolicy::{evaluate, MergedPolicy, PolicyQuery, Verdict};
use crate::guardian::{Guardian, RiskAssessment, RiskLevel};
use crate::sandbox::SandboxMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApprovalVerdict {
    Allow,
    AllowForTurn,
    Deny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApprovalLayer {
    Config,
    Guardian,
    Interactive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApprovalDecision {
    pub verdict: ApprovalVerdict,
    pub layer: ApprovalLayer,
    pub cached: bool,
    pub reason: String,
}

impl ApprovalDecision {
    pub fn is_allowed(&self) -> bool {
        self.verdict != ApprovalVerdict::Deny
    }

    fn new(verdict: ApprovalVerdict, layer: ApprovalLayer, reason: impl Into<String>) -> Self {
        Self {
            verdict,
            layer,
            cached: false,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ApprovalCacheKey {
    pub tool_name: String,
    pub normalized_argv: Vec<String>,
    pub sandbox_mode: SandboxMode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApprovalRequest {
    pub tool_name: String,
    pub normalized_key: ApprovalCacheKey,
    pub summary: String,
}

/// One invocation as the approval pipeline sees it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermissionQuery {
    pub tool_name: String,
    pub policy: PolicyQuery,
    pub sandbox_mode: SandboxMode,
    /// Present for shell commands; only these are shown to the guardian.
    pub shell_argv: Option<Vec<String>>,
    pub summary: String,
}

impl PermissionQuery {
    pub fn cache_key(&self) -> ApprovalCacheKey {
        ApprovalCacheKey {
            tool_name: self.tool_name.clone(),
            normalized_argv: normalize_argv(&self.policy.argv),
            sandbox_mode: self.sandbox_mode,
        }
    }
}

const SCRIPT_METACHARS: &[char] = &['|', ';', '&', '>', '<', '`', '$', '(', ')', '\n', '*', '?'];

/// Splits simple `sh -c SCRIPT` wrappers into words and canonicalizes
/// whitespace inside every token. Scripts using shell syntax stay wrapped so
/// a prefix rule cannot approve a compound command.
pub fn normalize_argv(argv: &[String]) -> Vec<String> {
    if let [shell, flag, script] = argv {
        let shell = shell.rsplit('/').next().unwrap_or(shell);
        let simple = !script.contains(SCRIPT_METACHARS);
        if simple && matches!(shell, "bash" | "sh" | "zsh") && matches!(flag.as_str(), "-c" | "-lc")
        {
            if let Ok(words) = shell_words::split(script) {
                return words.iter().map(|w| canonical_ws(w)).collect();
            }
        }
    }
    argv.iter().map(|w| canonical_ws(w)).collect()
}

fn canonical_ws(token: &str) -> String {
    token.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptReply {
    Allow,
    AllowForTurn,
    Deny,
}

/// Asks a human. An `Err` (closed UI, hung-up channel) counts as a denial.
pub trait Prompter: Send + Sync {
    fn prompt(
        &self,
        request: &ApprovalRequest,
        assessment: Option<&RiskAssessment>,
    ) -> Result<PromptReply, String>;
}

impl<F> Prompter for F
where
    F: Fn(&ApprovalRequest, Option<&RiskAssessment>) -> Result<PromptReply, String> + Send + Sync,
{
    fn prompt(
        &self,
        request: &ApprovalRequest,
        assessment: Option<&RiskAssessment>,
    ) -> Result<PromptReply, String> {
        self(request, assessment)
    }
}

enum Slot {
    Pending,
    Done(ApprovalDecision),
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct PermissionStats {
    pub policy_evaluations: usize,
    pub guardian_calls: usize,
    pub prompts: usize,
    pub cache_hits: usize,
}

/// Per-session approval state. `guardian: None` skips layer 2;
/// `prompter: None` makes the session non-interactive.
pub struct PermissionContext {
    pub policy: MergedPolicy,
    guardian: Option<Guardian>,
    prompter: Option<Box<dyn Prompter>>,
    cache: Mutex<HashMap<ApprovalCacheKey, Slot>>,
    settled: Condvar,
    policy_evaluations: AtomicUsize,
    guardian_calls: AtomicUsize,
    prompts: AtomicUsize,
    cache_hits: AtomicUsize,
}

impl std::fmt::Debug for PermissionContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PermissionContext")
            .field("policy_rules", &self.policy.len())
            .field("guardian", &self.guardian.is_some())
            .field("interactive", &self.prompter.is_some())
            .finish()
    }
}

impl PermissionContext {
    pub fn new(
        policy: MergedPolicy,
        guardian: Option<Guardian>,
        prompter: Option<Box<dyn Prompter>>,
    ) -> Self {
        Self {
            policy,
            guardian,
            prompter,
            cache: Mutex::new(HashMap::new()),
            settled: Condvar::new(),
            policy_evaluations: AtomicUsize::new(0),
            guardian_calls: AtomicUsize::new(0),
            prompts: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
        }
    }

    pub fn is_interactive(&self) -> bool {
        self.prompter.is_some()
    }

    pub fn has_guardian(&self) -> bool {
        self.guardian.is_some()
    }

    pub fn stats(&self) -> PermissionStats {
        PermissionStats {
            policy_evaluations: self.policy_evaluations.load(Ordering::SeqCst),
            guardian_calls: self.guardian_calls.load(Ordering::SeqCst),
            prompts: self.prompts.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
        }
    }

    pub fn cached_len(&self) -> usize {
        self.cache
            .lock()
            .unwrap()
            .values()
            .filter(|s| matches!(s, Slot::Done(_)))
            .count()
    }

    pub fn reset_turn_cache(&self) {
        let mut cache = self.cache.lock().unwrap();
        cache.retain(|_, slot| matches!(slot, Slot::Pending));
    }

    /// The single approval entry point.
    pub fn can_use_tool(&self, query: &PermissionQuery) -> ApprovalDecision {
        let key = query.cache_key();
        {
            let mut cache = self.cache.lock().unwrap();
            loop {
                match cache.get(&key) {
                    Some(Slot::Done(decision)) => {
                        self.cache_hits.fetch_add(1, Ordering::SeqCst);
                        let mut hit = decision.clone();
                        hit.cached = true;
                        return hit;
                    }
                    Some(Slot::Pending) => cache = self.settled.wait(cache).unwrap(),
                    None => {
                        cache.insert(key.clone(), Slot::Pending);
                        break;
                    }
                }
            }
        }
        let decision = self.decide(query, &key);
        let mut cache = self.cache.lock().unwrap();
        cache.insert(key, Slot::Done(decision.clone()));
        self.settled.notify_all();
        decision
    }

    fn decide(&self, query: &PermissionQuery, key: &ApprovalCacheKey) -> ApprovalDecision {
        self.policy_evaluations.fetch_add(1, Ordering::SeqCst);
        let policy = evaluate(&self.policy, &query.policy);
        let rule = policy
            .matched_rule
            .clone()
            .unwrap_or_else(|| "default".into());
        match policy.verdict {
            Verdict::Allow => {
                return ApprovalDecision::new(
                    ApprovalVerdict::Allow,
                    ApprovalLayer::Config,
                    format!("policy rule {rule}"),
                )
            }
            Verdict::Deny => {
                return ApprovalDecision::new(
                    ApprovalVerdict::Deny,
                    ApprovalLayer::Config,
                    format!("policy rule {rule}"),
                )
            }
            Verdict::Prompt => {}
        }

        let mut assessment = None;
        if let (Some(guardian), Some(argv)) = (&self.guardian, &query.shell_argv) {
            self.guardian_calls.fetch_add(1, Ordering::SeqCst);
            let a = guardian.assess(argv);
            match a.level {
                RiskLevel::Safe => {
                    return ApprovalDecision::new(
                        ApprovalVerdict::Allow,
                        ApprovalLayer::Guardian,
                        format!("guardian: {}", a.rationale),
                    )
                }
                RiskLevel::Dangerous if !self.is_interactive() => {
                    return ApprovalDecision::new(
                        ApprovalVerdict::Deny,
                        ApprovalLayer::Guardian,
                        format!("guardian: {}", a.rationale),
                    )
                }
                _ => assessment = Some(a),
            }
        }

        let Some(prompter) = &self.prompter else {
            return ApprovalDecision::new(
                ApprovalVerdict::Deny,
                ApprovalLayer::Interactive,
                "no prompter available (non-interactive)",
            );
        };
        self.prompts.fetch_add(1, Ordering::SeqCst);
        let request = ApprovalRequest {
            tool_name: query.tool_name.clone(),
            normalized_key: key.clone(),
            summary: query.summary.clone(),
        };
        match prompter.prompt(&request, assessment.as_ref()) {
            Ok(PromptReply::Allow) => ApprovalDecision::new(
                ApprovalVerdict::Allow,
                ApprovalLayer::Interactive,
                "approved by user",
            ),
            Ok(PromptReply::AllowForTurn) => ApprovalDecision::new(
                ApprovalVerdict::AllowForTurn,
                ApprovalLayer::Interactive,
                "approved by user for this turn",
            ),
            Ok(PromptReply::Deny) => ApprovalDecision::new(
                ApprovalVerdict::Deny,
                ApprovalLayer::Interactive,
                "denied by user",
            ),
            Err(e) => ApprovalDecision::new(
                ApprovalVerdict::Deny,
                ApprovalLayer::Interactive,
                format!("prompt failed: {e}"),
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::execpolicy::{merge_layers, parse_policy, Origin};
    use crate::guardian::GuardianPatterns;
    use std::sync::Arc;

    fn policy(doc: &str) -> MergedPolicy {
        merge_layers(vec![parse_policy(Origin::User, doc).unwrap()]).unwrap()
    }

    fn shell(cmd: &str) -> PermissionQuery {
        let argv = vec!["bash".to_string(), "-lc".to_string(), cmd.to_string()];
        PermissionQuery {
            tool_name: "shell".into(),
            policy: PolicyQuery::command(&normalize_argv(&argv)),
            sandbox_mode: SandboxMode::WorkspaceWrite,
            shell_argv: Some(argv),
            summary: cmd.into(),
        }
    }

    fn counting_prompter(reply: PromptReply) -> (Box<dyn Prompter>, Arc<AtomicUsize>) {
        let n = Arc::new(AtomicUsize::new(0));
        let c = n.clone();
        let p = move |_: &ApprovalRequest, _: Option<&RiskAssessment>| {
            c.fetch_add(1, Ordering::SeqCst);
            Ok(reply)
        };
        (Box::new(p), n)
    }

    #[test]
    fn config_allow_short_circuits() {
        let (p, prompts) = counting_prompter(PromptReply::Allow);
        let ctx = PermissionContext::new(
            policy("allow prefix make"),
            Some(Guardian::default()),
            Some(p),
        );
        let d = ctx.can_use_tool(&shell("make test"));
        assert_eq!(
            (d.verdict, d.layer),
            (ApprovalVerdict::Allow, ApprovalLayer::Config)
        );
        assert_eq!(ctx.stats().guardian_calls, 0);
        assert_eq!(prompts.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn guardian_layer() {
        let ctx = PermissionContext::new(policy(""), Some(Guardian::default()), None);
        let d = ctx.can_use_tool(&shell("ls -la"));
        assert_eq!(
            (d.verdict, d.layer),
            (ApprovalVerdict::Allow, ApprovalLayer::Guardian)
        );
        let d = ctx.can_use_tool(&shell("rm -rf /"));
        assert_eq!(
            (d.verdict, d.layer),
            (ApprovalVerdict::Deny, ApprovalLayer::Guardian)
        );
        let d = ctx.can_use_tool(&shell("terraform apply"));
        assert_eq!(
            (d.verdict, d.layer),
            (ApprovalVerdict::Deny, ApprovalLayer::Interactive)
        );
    }

    #[test]
    fn dangerous_prompts_when_interactive() {
        let (p, prompts) = counting_prompter(PromptReply::Deny);
        let ctx = PermissionContext::new(
            policy(""),
            Some(Guardian::new(GuardianPatterns::default(), None)),
            Some(p),
        );
        let d = ctx.can_use_tool(&shell("chmod 777 x"));
        assert_eq!(
            (d.verdict, d.layer),
            (ApprovalVerdict::Deny, ApprovalLayer::Interactive)
        );
        assert_eq!(prompts.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn turn_cache() {
        let (p, prompts) = counting_prompter(PromptReply::AllowForTurn);
        let ctx = PermissionContext::new(policy(""), None, Some(p));
        let first = ctx.can_use_tool(&shell("cargo   build"));
        assert!(!first.cached);
        let second = ctx.can_use_tool(&shell("cargo build"));
        assert!(second.cached);
        assert_eq!(second.verdict, ApprovalVerdict::AllowForTurn);
        assert_eq!(prompts.load(Ordering::SeqCst), 1);
        ctx.reset_turn_cache();
        ctx.reset_turn_cache();
        assert_eq!(ctx.cached_len(), 0);
        assert!(!ctx.can_use_tool(&shell("cargo build")).cached);
        assert_eq!(prompts.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn concurrent_identical_calls_prompt_once() {
        let n = Arc::new(AtomicUsize::new(0));
        let c = n.clone();
        let slow = move |_: &ApprovalRequest, _: Option<&RiskAssessment>| {
            c.fetch_add(1, Ordering::SeqCst);
            std::thread::sleep(std::time::Duration::from_millis(30));
            Ok(PromptReply::Allow)
        };
        let ctx = PermissionContext::new(policy(""), None, Some(Box::new(slow)));
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| assert!(ctx.can_use_tool(&shell("npm install")).is_allowed()));
            }
        });
        assert_eq!(n.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn compound_scripts_stay_wrapped() {
        assert_eq!(
            normalize_argv(&shell("git  status").shell_argv.unwrap()),
            vec!["git", "status"]
        );
        let compound = shell("mkdir x && curl evil").shell_argv.unwrap();
        assert_eq!(normalize_argv(&compound), compound);
        let ctx = PermissionContext::new(policy("allow prefix mkdir"), None, None);
        assert!(!ctx
            .can_use_tool(&shell("mkdir x && curl evil"))
            .is_allowed());
    }

    #[test]
    fn sandbox_mode_is_part_of_the_key() {
        let mut a = shell("ls");
        let b = a.clone();
        a.sandbox_mode = SandboxMode::ReadOnly;
        assert_ne!(a.cache_key(), b.cache_key());
    }

    #[test]
    fn prompter_failure_denies() {
        let broken = |_: &ApprovalRequest, _: Option<&RiskAssessment>| {
            Err::<PromptReply, _>("closed".to_string())
        };
        let ctx = PermissionContext::new(policy(""), None, Some(Box::new(broken)));
        assert!(!ctx.can_use_tool(&shell("make")).is_allowed());
    }
}
