//! Layered configuration: system, user and project TOML documents merged
//! key by key with the project layer strongest, plus policy-file discovery.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::Value;

use crate::execpolicy::{
    load_policy_file, merge_layers, parse_policy, MergedPolicy, Origin, PolicyError, PolicyLayer,
};
use crate::sandbox::{BackendKind, SandboxMode};

pub const SYSTEM_CONFIG: &str = "/etc/agent-kernel/config.toml";
pub const SYSTEM_POLICY: &str = "/etc/agent-kernel/policy.rules";
pub const PROJECT_CONFIG: &str = ".agent-kernel/config.toml";
pub const HOME_ENV: &str = "CODEX_HOME";
pub const API_BASE_ENV: &str = "CODEX_API_BASE";

/// Rules every session starts with below the configured system layer.
pub const BUILTIN_SYSTEM_POLICY: &str = "\
allow prefix \"list_dir\"
allow prefix \"spawn_agent\"
";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("invalid TOML in {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Recursively merges `overlay` into `base`. Tables merge per key; any other
/// value in the overlay replaces the base value.
pub fn merge_toml(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Table(base), Value::Table(overlay)) => {
            for (key, value) in overlay {
                match base.get_mut(&key) {
                    Some(existing) => merge_toml(existing, value),
                    None => {
                        base.insert(key, value);
                    }
                }
            }
        }
        (base, overlay) => *base = overlay,
    }
}

/// Merges documents in order, later documents winning.
pub fn merge_documents(docs: &[&str]) -> Result<Value, ConfigError> {
    let mut merged = Value::Table(Default::default());
    for (i, doc) in docs.iter().enumerate() {
        let value: Value = doc
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse {
                path: PathBuf::from(format!("<document {i}>")),
                reason: e.to_string(),
            })?;
        merge_toml(&mut merged, value);
    }
    Ok(merged)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigPaths {
    pub system: PathBuf,
    pub user: Option<PathBuf>,
    pub project: PathBuf,
    pub system_policy: PathBuf,
    pub organization_policy: Option<PathBuf>,
    pub user_policy: Option<PathBuf>,
}

impl ConfigPaths {
    pub fn new(home: Option<&Path>, project_root: &Path) -> Self {
        Self {
            system: PathBuf::from(SYSTEM_CONFIG),
            user: home.map(|h| h.join("config.toml")),
            project: project_root.join(PROJECT_CONFIG),
            system_policy: PathBuf::from(SYSTEM_POLICY),
            organization_policy: home.map(|h| h.join("organization.rules")),
            user_policy: home.map(|h| h.join("policy.rules")),
        }
    }

    /// Paths from `CODEX_HOME` and the current directory.
    pub fn from_env(project_root: &Path) -> Self {
        let home = std::env::var_os(HOME_ENV).map(PathBuf::from);
        Self::new(home.as_deref(), project_root)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandboxSection {
    pub mode: Option<String>,
    pub backend: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesSection {
    pub enable: Vec<String>,
    pub disable: Vec<String>,
    pub parity: bool,
}

/// Typed view over the merged document. Unknown top-level tables are kept
/// in `extra` so tools can read their own sections.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub model: Option<String>,
    pub api_base: Option<String>,
    pub channel_url: Option<String>,
    /// Path to a file with one API key per line.
    pub key_file: Option<PathBuf>,
    pub max_turns: Option<u32>,
    pub model_context_tokens: Option<u64>,
    pub compact_trigger_fraction: Option<f64>,
    pub data_dir: Option<PathBuf>,
    pub sandbox: SandboxSection,
    pub features: FeaturesSection,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl AgentConfig {
    pub fn from_value(value: Value) -> Result<Self, ConfigError> {
        value
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))
    }

    pub fn sandbox_mode(&self) -> Result<Option<SandboxMode>, ConfigError> {
        self.sandbox
            .mode
            .as_deref()
            .map(|m| {
                m.parse()
                    .map_err(|e| ConfigError::Invalid(format!("sandbox.mode: {e}")))
            })
            .transpose()
    }

    pub fn backend(&self) -> Result<BackendKind, ConfigError> {
        match self.sandbox.backend.as_deref() {
            None => Ok(BackendKind::default()),
            Some(b) => b
                .parse()
                .map_err(|e| ConfigError::Invalid(format!("sandbox.backend: {e}"))),
        }
    }

    pub fn api_keys(&self) -> Result<Vec<String>, ConfigError> {
        let Some(path) = &self.key_file else {
            return Ok(Vec::new());
        };
        let text = read(path)?;
        Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect())
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn read_optional(path: &Path) -> Result<Option<String>, ConfigError> {
    match std::fs::read_to_string(path) {
        Ok(text) => Ok(Some(text)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(ConfigError::Io {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }),
    }
}

/// Loads and merges whichever of the three config files exist.
pub fn load_config(paths: &ConfigPaths) -> Result<AgentConfig, ConfigError> {
    let mut merged = Value::Table(Default::default());
    let layers = [
        Some(&paths.system),
        paths.user.as_ref(),
        Some(&paths.project),
    ];
    for path in layers.into_iter().flatten() {
        if let Some(text) = read_optional(path)? {
            let value: Value = text
                .parse()
                .map_err(|e: toml::de::Error| ConfigError::Parse {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
            merge_toml(&mut merged, value);
        }
    }
    AgentConfig::from_value(merged)
}

fn builtin_rules() -> Result<Vec<crate::execpolicy::PolicyRule>, ConfigError> {
    let mut layer = parse_policy(Origin::System, BUILTIN_SYSTEM_POLICY)?;
    for rule in &mut layer.rules {
        rule.rule_id = rule.rule_id.replacen("system:", "builtin:", 1);
    }
    Ok(layer.rules)
}

/// Builds the merged policy. The built-in rules are appended to whatever the
/// system file holds; missing files contribute nothing.
pub fn load_policy(paths: &ConfigPaths) -> Result<MergedPolicy, ConfigError> {
    let mut system = if paths.system_policy.exists() {
        load_policy_file(Origin::System, &paths.system_policy)?
    } else {
        PolicyLayer {
            origin: Origin::System,
            rules: Vec::new(),
        }
    };
    system.rules.extend(builtin_rules()?);
    let mut layers = vec![system];
    for (origin, path) in [
        (Origin::Organization, &paths.organization_policy),
        (Origin::User, &paths.user_policy),
    ] {
        if let Some(path) = path.as_ref().filter(|p| p.exists()) {
            layers.push(load_policy_file(origin, path)?);
        }
    }
    Ok(merge_layers(layers)?)
}

/// Policy from in-memory documents; `user` may be empty.
pub fn policy_from_documents(
    system: &str,
    organization: &str,
    user: &str,
) -> Result<MergedPolicy, ConfigError> {
    let mut sys = parse_policy(Origin::System, system)?;
    sys.rules.extend(builtin_rules()?);
    let layers: Vec<PolicyLayer> = vec![
        sys,
        parse_policy(Origin::Organization, organization)?,
        parse_policy(Origin::User, user)?,
    ];
    Ok(merge_layers(layers)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::execpolicy::{evaluate, PolicyQuery, Verdict};

    #[test]
    fn project_wins_per_key() {
        let merged = merge_documents(&[
            "model = \"a\"\nmax_turns = 10\n[sandbox]\nmode = \"read-only\"\nbackend = \"checking\"\n",
            "model = \"b\"\n",
            "[sandbox]\nmode = \"workspace-write\"\n",
        ])
        .unwrap();
        let cfg = AgentConfig::from_value(merged).unwrap();
        assert_eq!(cfg.model.as_deref(), Some("b"));
        assert_eq!(cfg.max_turns, Some(10));
        assert_eq!(
            cfg.sandbox_mode().unwrap(),
            Some(SandboxMode::WorkspaceWrite)
        );
        assert_eq!(cfg.backend().unwrap(), BackendKind::Checking);
    }

    #[test]
    fn arrays_replace_rather_than_append() {
        let merged = merge_documents(&[
            "[features]\nenable = [\"GUARDIAN\"]\n",
            "[features]\nenable = []\n",
        ])
        .unwrap();
        assert!(AgentConfig::from_value(merged)
            .unwrap()
            .features
            .enable
            .is_empty());
    }

    #[test]
    fn unknown_sandbox_mode_is_invalid() {
        let cfg =
            AgentConfig::from_value(merge_documents(&["[sandbox]\nmode = \"yolo\"\n"]).unwrap())
                .unwrap();
        assert!(cfg.sandbox_mode().is_err());
    }

    #[test]
    fn files_load_from_home_and_project() {
        let home = tempfile::tempdir().unwrap();
        let project = tempfile::tempdir().unwrap();
        std::fs::write(
            home.path().join("config.toml"),
            "model = \"home\"\nmax_turns = 7\n",
        )
        .unwrap();
        std::fs::create_dir(project.path().join(".agent-kernel")).unwrap();
        std::fs::write(project.path().join(PROJECT_CONFIG), "model = \"proj\"\n").unwrap();
        std::fs::write(home.path().join("policy.rules"), "deny prefix \"rm\"\n").unwrap();
        let mut paths = ConfigPaths::new(Some(home.path()), project.path());
        paths.system = project.path().join("absent.toml");
        paths.system_policy = project.path().join("absent.rules");
        let cfg = load_config(&paths).unwrap();
        assert_eq!(
            (cfg.model.as_deref(), cfg.max_turns),
            (Some("proj"), Some(7))
        );
        let policy = load_policy(&paths).unwrap();
        assert_eq!(
            evaluate(&policy, &PolicyQuery::command(&["rm", "-rf", "x"])).verdict,
            Verdict::Deny
        );
        assert_eq!(
            evaluate(&policy, &PolicyQuery::command(&["list_dir", "."])).verdict,
            Verdict::Allow
        );
    }

    #[test]
    fn bad_toml_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join(".agent-kernel")).unwrap();
        std::fs::write(dir.path().join(PROJECT_CONFIG), "model = ").unwrap();
        let mut paths = ConfigPaths::new(None, dir.path());
        paths.system = dir.path().join("absent.toml");
        let err = load_config(&paths).unwrap_err();
        assert!(err.to_string().contains("config.toml"));
    }
}
