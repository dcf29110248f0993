//! Declarative execution policy: a line-oriented rule format, layering across
//! system / organization / user origins, and first-match evaluation.
//!
//! ```text
//! # comment
//! allow prefix "git status"
//! deny  prefix "rm -rf"
//! allow net "api.example.com" 443
//! prompt exec "/usr/bin/curl"
//! ```
//!
//! Command prefixes match token-wise against argv, so `"git status"` matches
//! `git status -s` but not `git stash` or `git statusx`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Allow,
    Deny,
    Prompt,
}

impl FromStr for Verdict {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "allow" => Ok(Verdict::Allow),
            "deny" => Ok(Verdict::Deny),
            "prompt" => Ok(Verdict::Prompt),
            other => Err(format!("unknown verdict `{other}`")),
        }
    }
}

/// Layer origin. Declaration order is precedence order, weakest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    System,
    Organization,
    User,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::System => "system",
            Origin::Organization => "organization",
            Origin::User => "user",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Matcher {
    CommandPrefix(Vec<String>),
    Network { host: String, port: Option<u16> },
    Executable(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyRule {
    pub matcher: Matcher,
    pub verdict: Verdict,
    pub rule_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyLayer {
    pub origin: Origin,
    pub rules: Vec<PolicyRule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub verdict: Verdict,
    pub matched_rule: Option<String>,
    pub origin: Option<Origin>,
}

impl PolicyDecision {
    fn default_prompt() -> Self {
        Self {
            verdict: Verdict::Prompt,
            matched_rule: None,
            origin: None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("policy line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("more than one policy layer for origin {0}")]
    DuplicateOrigin(Origin),
    #[error("failed to read policy file {path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

/// What a tool invocation asks to do, as seen by the policy.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PolicyQuery {
    pub argv: Vec<String>,
    pub network: Option<(String, Option<u16>)>,
    pub executable: Option<PathBuf>,
}

impl PolicyQuery {
    pub fn command<S: AsRef<str>>(argv: &[S]) -> Self {
        Self {
            argv: argv.iter().map(|s| s.as_ref().to_string()).collect(),
            ..Self::default()
        }
    }
}

impl Matcher {
    pub fn matches(&self, query: &PolicyQuery) -> bool {
        match self {
            Matcher::CommandPrefix(prefix) => {
                query.argv.len() >= prefix.len()
                    && prefix.iter().zip(&query.argv).all(|(a, b)| a == b)
            }
            Matcher::Network { host, port } => match &query.network {
                Some((qhost, qport)) => {
                    host_matches(host, qhost) && (port.is_none() || *port == *qport)
                }
                None => false,
            },
            Matcher::Executable(path) => {
                query.executable.as_deref() == Some(path.as_path())
                    || query.argv.first().map(Path::new) == Some(path.as_path())
            }
        }
    }
}

fn host_matches(pattern: &str, host: &str) -> bool {
    let host = host.to_ascii_lowercase();
    let pattern = pattern.to_ascii_lowercase();
    match pattern.strip_prefix("*.") {
        Some(suffix) => host.len() > suffix.len() && host.ends_with(&format!(".{suffix}")),
        None => pattern == host,
    }
}

/// Parses one policy document into a layer for `origin`.
pub fn parse_policy(origin: Origin, document: &str) -> Result<PolicyLayer, PolicyError> {
    let mut rules = Vec::new();
    for (idx, raw) in document.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |reason: String| PolicyError::Parse { line, reason };
        let mut words = shell_words::split(trimmed).map_err(|e| err(e.to_string()))?;
        if let Some(pos) = words.iter().position(|w| w.starts_with('#')) {
            words.truncate(pos);
        }
        let [verdict, kind, rest @ ..] = words.as_slice() else {
            return Err(err("expected `<verdict> <prefix|net|exec> ...`".into()));
        };
        let verdict: Verdict = verdict.parse().map_err(err)?;
        let matcher = match (kind.as_str(), rest) {
            ("prefix", [command]) => {
                let tokens = shell_words::split(command).map_err(|e| err(e.to_string()))?;
                if tokens.is_empty() {
                    return Err(err("command prefix must not be empty".into()));
                }
                Matcher::CommandPrefix(tokens)
            }
            ("net", [host]) => Matcher::Network {
                host: parse_host(host).map_err(err)?,
                port: None,
            },
            ("net", [host, port]) => Matcher::Network {
                host: parse_host(host).map_err(err)?,
                port: Some(parse_port(port).map_err(err)?),
            },
            ("exec", [path]) if !path.is_empty() => Matcher::Executable(PathBuf::from(path)),
            ("prefix" | "net" | "exec", _) => {
                return Err(err(format!("wrong number of arguments for `{kind}`")))
            }
            (other, _) => return Err(err(format!("unknown matcher `{other}`"))),
        };
        rules.push(PolicyRule {
            matcher,
            verdict,
            rule_id: format!("{origin}:{line}"),
        });
    }
    Ok(PolicyLayer { origin, rules })
}

fn parse_host(host: &str) -> Result<String, String> {
    if host.is_empty() || host.contains(char::is_whitespace) {
        return Err(format!("invalid host `{host}`"));
    }
    Ok(host.to_string())
}

fn parse_port(port: &str) -> Result<u16, String> {
    match port.parse::<u16>() {
        Ok(p) if p >= 1 => Ok(p),
        _ => Err(format!("port `{port}` not in 1..65535")),
    }
}

pub fn load_policy_file(origin: Origin, path: &Path) -> Result<PolicyLayer, PolicyError> {
    let text = std::fs::read_to_string(path).map_err(|e| PolicyError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    parse_policy(origin, &text)
}

/// Layers flattened into evaluation order: user, organization, system.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergedPolicy {
    rules: Vec<(Origin, PolicyRule)>,
}

impl MergedPolicy {
    pub fn rules(&self) -> impl Iterator<Item = (Origin, &PolicyRule)> {
        self.rules.iter().map(|(o, r)| (*o, r))
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

pub fn merge_layers(layers: Vec<PolicyLayer>) -> Result<MergedPolicy, PolicyError> {
    let mut layers = layers;
    layers.sort_by_key(|l| std::cmp::Reverse(l.origin));
    for pair in layers.windows(2) {
        if pair[0].origin == pair[1].origin {
            return Err(PolicyError::DuplicateOrigin(pair[0].origin));
        }
    }
    let rules = layers
        .into_iter()
        .flat_map(|layer| {
            let origin = layer.origin;
            layer.rules.into_iter().map(move |r| (origin, r))
        })
        .collect();
    Ok(MergedPolicy { rules })
}

/// First matching rule wins; no match means prompt.
pub fn evaluate(policy: &MergedPolicy, query: &PolicyQuery) -> PolicyDecision {
    policy
        .rules
        .iter()
        .find(|(_, rule)| rule.matcher.matches(query))
        .map(|(origin, rule)| PolicyDecision {
            verdict: rule.verdict,
            matched_rule: Some(rule.rule_id.clone()),
            origin: Some(*origin),
        })
        .unwrap_or_else(PolicyDecision::default_prompt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document() {
        let layer = parse_policy(Origin::User, "").unwrap();
        assert!(layer.rules.is_empty());
        let layer = parse_policy(Origin::User, "# only a comment\n\n").unwrap();
        assert!(layer.rules.is_empty());
    }

    #[test]
    fn prefix_rule() {
        let layer = parse_policy(Origin::User, r#"allow prefix "git status""#).unwrap();
        assert_eq!(
            layer.rules,
            vec![PolicyRule {
                matcher: Matcher::CommandPrefix(vec!["git".into(), "status".into()]),
                verdict: Verdict::Allow,
                rule_id: "user:1".into(),
            }]
        );
    }

    #[test]
    fn network_and_exec_rules() {
        let doc = "allow net \"api.example.com\" 443\ndeny net \"*.evil.test\"\nprompt exec \"/usr/bin/curl\" # trailing";
        let layer = parse_policy(Origin::System, doc).unwrap();
        assert_eq!(
            layer.rules[0].matcher,
            Matcher::Network {
                host: "api.example.com".into(),
                port: Some(443)
            }
        );
        assert_eq!(
            layer.rules[1].matcher,
            Matcher::Network {
                host: "*.evil.test".into(),
                port: None
            }
        );
        assert_eq!(
            layer.rules[2].matcher,
            Matcher::Executable("/usr/bin/curl".into())
        );
        assert_eq!(layer.rules[2].rule_id, "system:3");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let cases = [
            ("\nallow prefix \"\"", 2),
            ("maybe prefix \"ls\"", 1),
            ("allow glob \"*\"", 1),
            ("allow net \"h\" 0", 1),
            ("allow net \"h\" 70000", 1),
            ("allow prefix \"ls\" extra", 1),
            ("allow prefix \"unterminated", 1),
            ("allow", 1),
        ];
        for (doc, expected) in cases {
            match parse_policy(Origin::User, doc) {
                Err(PolicyError::Parse { line, .. }) => assert_eq!(line, expected, "{doc}"),
                other => panic!("{doc}: unexpected {other:?}"),
            }
        }
    }

    fn layer(origin: Origin, doc: &str) -> PolicyLayer {
        parse_policy(origin, doc).unwrap()
    }

    #[test]
    fn token_wise_prefix_matching() {
        let policy =
            merge_layers(vec![layer(Origin::User, r#"allow prefix "git status""#)]).unwrap();
        let d = evaluate(&policy, &PolicyQuery::command(&["git", "status", "-s"]));
        assert_eq!(d.verdict, Verdict::Allow);
        assert_eq!(d.matched_rule.as_deref(), Some("user:1"));
        for argv in [&["git", "stash"][..], &["git", "statusx"], &["git"]] {
            let d = evaluate(&policy, &PolicyQuery::command(argv));
            assert_eq!(d, PolicyDecision::default_prompt(), "{argv:?}");
        }
    }

    #[test]
    fn user_layer_beats_system() {
        let policy = merge_layers(vec![
            layer(Origin::System, r#"allow prefix "rm""#),
            layer(Origin::User, r#"deny prefix "rm""#),
        ])
        .unwrap();
        let d = evaluate(&policy, &PolicyQuery::command(&["rm", "-rf", "x"]));
        assert_eq!(d.verdict, Verdict::Deny);
        assert_eq!(d.origin, Some(Origin::User));
    }

    #[test]
    fn no_layers_prompts() {
        let policy = merge_layers(vec![]).unwrap();
        assert_eq!(
            evaluate(&policy, &PolicyQuery::command(&["ls"])).verdict,
            Verdict::Prompt
        );
    }

    #[test]
    fn duplicate_origin_rejected() {
        let err = merge_layers(vec![layer(Origin::User, ""), layer(Origin::User, "")]).unwrap_err();
        assert_eq!(err, PolicyError::DuplicateOrigin(Origin::User));
    }

    #[test]
    fn network_matching() {
        let policy = merge_layers(vec![layer(
            Origin::Organization,
            "allow net \"api.example.com\" 443\ndeny net \"*.evil.test\"",
        )])
        .unwrap();
        let q = |h: &str, p| PolicyQuery {
            network: Some((h.into(), p)),
            ..PolicyQuery::default()
        };
        assert_eq!(
            evaluate(&policy, &q("api.example.com", Some(443))).verdict,
            Verdict::Allow
        );
        assert_eq!(
            evaluate(&policy, &q("api.example.com", Some(80))).verdict,
            Verdict::Prompt
        );
        assert_eq!(
            evaluate(&policy, &q("a.evil.test", None)).verdict,
            Verdict::Deny
        );
        assert_eq!(
            evaluate(&policy, &q("evil.test", None)).verdict,
            Verdict::Prompt
        );
    }

    #[test]
    fn executable_matching() {
        let policy =
            merge_layers(vec![layer(Origin::User, r#"deny exec "/usr/bin/curl""#)]).unwrap();
        let mut q = PolicyQuery::command(&["curl", "x"]);
        assert_eq!(evaluate(&policy, &q).verdict, Verdict::Prompt);
        q.executable = Some("/usr/bin/curl".into());
        assert_eq!(evaluate(&policy, &q).verdict, Verdict::Deny);
    }
}
