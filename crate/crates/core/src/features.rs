//! Enhancement flags: the catalog, four-tier resolution and strict parity
//! mode.
//!
//! Precedence, strongest first: runtime `--enable/--disable`, environment
//! (`CODEX_ENABLE_<NAME>=1|0` and the comma-separated `CODEX_ENABLE_FLAG`),
//! build-time overrides, catalog defaults. Parity mode forces every flag off
//! and wins over everything.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

macro_rules! flags {
    ($( $variant:ident => $name:literal, $default:literal, $category:literal, $desc:literal; )*) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum Flag {
            $( $variant, )*
        }

        impl Flag {
            pub const ALL: &'static [Flag] = &[ $( Flag::$variant, )* ];

            pub fn name(self) -> &'static str {
                match self {
                    $( Flag::$variant => $name, )*
                }
            }
        }

        /// The full enhancement flag catalog.
        pub const CATALOG: &[FlagDefinition] = &[
            $( FlagDefinition {
                flag: Flag::$variant,
                name: $name,
                default: $default,
                category: $category,
                description: $desc,
            }, )*
        ];
    };
}

flags! {
    MultiAgent => "MULTI_AGENT", true, "agents", "Hierarchical child-agent spawning with inherited context";
    MultiAgentV2 => "MULTI_AGENT_V2", true, "agents", "Improved coordination protocol with result aggregation";
    MultiAgentOrchestration => "MULTI_AGENT_ORCHESTRATION", true, "agents", "Parallel agent dispatch with safety bounds (max depth 5, max 100 agents)";
    Guardian => "GUARDIAN", true, "guardian", "Automated LLM-based risk assessment before tool execution";
    IdeBridge => "IDE_BRIDGE", false, "bridge", "WebSocket bridge for IDE integration (VS Code, JetBrains)";
    LspIntegration => "LSP_INTEGRATION", false, "bridge", "Language Server Protocol support for code intelligence";
    MultiStrategyCompaction => "MULTI_STRATEGY_COMPACTION", true, "compaction", "Three-phase context compaction (micro, snip, full)";
    ForkedCompaction => "FORKED_COMPACTION", false, "compaction", "Branch-and-merge compaction for multi-agent sessions";
    MemorySystem => "MEMORY_SYSTEM", true, "memory", "Post-turn memory extraction and retrieval";
    TypedMemory => "TYPED_MEMORY", true, "memory", "Structured memory with typed schemas (user, project, feedback)";
    SemanticMemory => "SEMANTIC_MEMORY", false, "memory", "Embedding-based similarity search over memory store";
    AutoMemory => "AUTO_MEMORY", true, "memory", "Automatic memory extraction without explicit user request";
    PersistentPlans => "PERSISTENT_PLANS", true, "state", "Goal and plan persistence across turns";
    SystemReminders => "SYSTEM_REMINDERS", true, "state", "Periodic system-message injection for long sessions";
    DenialReplay => "DENIAL_REPLAY", true, "state", "Re-attempt denied actions with adjusted parameters";
    FileTools => "FILE_TOOLS", true, "tools", "Enhanced file read/write/edit beyond base shell";
    FileEdit => "FILE_EDIT", true, "tools", "Structured file editing with conflict detection";
    WebFetch => "WEB_FETCH", false, "tools", "HTTP fetching and web content extraction";
    NotebookEdit => "NOTEBOOK_EDIT", false, "tools", "Jupyter notebook cell manipulation";
    WorktreeTools => "WORKTREE_TOOLS", false, "tools", "Git worktree management for parallel development";
    Skills => "SKILLS", true, "productivity", "Loadable skill definitions for domain-specific workflows";
    CronTool => "CRON_TOOL", false, "productivity", "Scheduled task creation and management";
    VoiceMode => "VOICE_MODE", false, "productivity", "Voice input/output for conversational interaction";
    CostTracking => "COST_TRACKING", true, "resilience", "Per-session and per-turn API cost accounting";
    AppState => "APP_STATE", true, "resilience", "Application-level state management and checkpointing";
    StartupPrefetch => "STARTUP_PREFETCH", true, "resilience", "Parallel prefetch of config, auth tokens, and model metadata";
}

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Flag {
    type Err = FlagError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let wanted = s.trim().to_ascii_uppercase();
        Flag::ALL
            .iter()
            .copied()
            .find(|f| f.name() == wanted)
            .ok_or_else(|| FlagError::UnknownFlag(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlagDefinition {
    #[serde(skip)]
    pub flag: Flag,
    pub name: &'static str,
    pub default: bool,
    pub category: &'static str,
    pub description: &'static str,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagSource {
    Runtime,
    Env,
    Build,
    Default,
    Parity,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FlagError {
    #[error("unknown flag `{0}`")]
    UnknownFlag(String),
    #[error("flag {0} is both enabled and disabled at runtime")]
    ConflictingRuntime(Flag),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlagSet {
    resolved: BTreeMap<Flag, (bool, FlagSource)>,
}

impl FlagSet {
    pub fn is_enabled(&self, flag: Flag) -> bool {
        self.resolved.get(&flag).is_some_and(|(on, _)| *on)
    }

    pub fn get(&self, flag: Flag) -> Option<(bool, FlagSource)> {
        self.resolved.get(&flag).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Flag, bool, FlagSource)> + '_ {
        self.resolved.iter().map(|(f, (on, src))| (*f, *on, *src))
    }

    pub fn len(&self) -> usize {
        self.resolved.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resolved.is_empty()
    }

    pub fn enabled_count(&self) -> usize {
        self.resolved.values().filter(|(on, _)| *on).count()
    }

    pub fn defaults() -> Self {
        resolve(&BTreeMap::new(), &BTreeMap::new(), &[], &[], CATALOG)
            .expect("empty inputs always resolve")
    }
}

/// Raw inputs to flag resolution, before validation.
#[derive(Debug, Clone, Default)]
pub struct FlagInputs {
    pub build: BTreeMap<Flag, bool>,
    pub env: BTreeMap<Flag, bool>,
    pub enables: Vec<String>,
    pub disables: Vec<String>,
    pub parity: bool,
}

impl FlagInputs {
    pub fn resolve(&self) -> Result<FlagSet, FlagError> {
        let enables = parse_names(&self.enables)?;
        let disables = parse_names(&self.disables)?;
        let set = resolve(&self.build, &self.env, &enables, &disables, CATALOG)?;
        Ok(if self.parity {
            parity_mode(CATALOG)
        } else {
            set
        })
    }
}

fn parse_names(names: &[String]) -> Result<Vec<Flag>, FlagError> {
    names.iter().map(|n| n.parse()).collect()
}

pub fn resolve(
    build: &BTreeMap<Flag, bool>,
    env: &BTreeMap<Flag, bool>,
    runtime_enables: &[Flag],
    runtime_disables: &[Flag],
    catalog: &[FlagDefinition],
) -> Result<FlagSet, FlagError> {
    if let Some(f) = runtime_enables
        .iter()
        .find(|f| runtime_disables.contains(f))
    {
        return Err(FlagError::ConflictingRuntime(*f));
    }
    for f in runtime_enables.iter().chain(runtime_disables) {
        if !catalog.iter().any(|d| d.flag == *f) {
            return Err(FlagError::UnknownFlag(f.name().to_string()));
        }
    }
    let resolved = catalog
        .iter()
        .map(|def| {
            let flag = def.flag;
            let value = if runtime_enables.contains(&flag) {
                (true, FlagSource::Runtime)
            } else if runtime_disables.contains(&flag) {
                (false, FlagSource::Runtime)
            } else if let Some(v) = env.get(&flag) {
                (*v, FlagSource::Env)
            } else if let Some(v) = build.get(&flag) {
                (*v, FlagSource::Build)
            } else {
                (def.default, FlagSource::Default)
            };
            (flag, value)
        })
        .collect();
    Ok(FlagSet { resolved })
}

pub fn parity_mode(catalog: &[FlagDefinition]) -> FlagSet {
    FlagSet {
        resolved: catalog
            .iter()
            .map(|d| (d.flag, (false, FlagSource::Parity)))
            .collect(),
    }
}

fn parse_bool(value: &str) -> Option<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "on" | "yes" => Some(true),
        "0" | "false" | "off" | "no" => Some(false),
        _ => None,
    }
}

pub const ENV_PREFIX: &str = "CODEX_ENABLE_";
pub const ENV_AGGREGATE: &str = "CODEX_ENABLE_FLAG";

/// Extracts flag values from environment variables. Per-flag variables win
/// over the aggregate list; unknown names are ignored.
pub fn env_overrides<I, K, V>(vars: I) -> BTreeMap<Flag, bool>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let mut aggregate = BTreeMap::new();
    let mut specific = BTreeMap::new();
    for (key, value) in vars {
        let (key, value) = (key.as_ref(), value.as_ref());
        if key == ENV_AGGREGATE {
            for name in value.split(',').filter(|n| !n.trim().is_empty()) {
                if let Ok(flag) = name.parse::<Flag>() {
                    aggregate.insert(flag, true);
                }
            }
        } else if let Some(name) = key.strip_prefix(ENV_PREFIX) {
            if let (Ok(flag), Some(on)) = (name.parse::<Flag>(), parse_bool(value)) {
                specific.insert(flag, on);
            }
        }
    }
    aggregate.extend(specific);
    aggregate
}

/// Build-time overrides, compiled in from `AGENT_KERNEL_BUILD_FLAGS`
/// (`NAME=on,NAME=off`).
pub fn build_overrides() -> Result<BTreeMap<Flag, bool>, FlagError> {
    parse_build_overrides(option_env!("AGENT_KERNEL_BUILD_FLAGS").unwrap_or(""))
}

pub fn parse_build_overrides(text: &str) -> Result<BTreeMap<Flag, bool>, FlagError> {
    let mut out = BTreeMap::new();
    for entry in text.split(',').map(str::trim).filter(|e| !e.is_empty()) {
        let (name, value) = entry.split_once('=').unwrap_or((entry, "on"));
        let flag: Flag = name.parse()?;
        let on = parse_bool(value).ok_or_else(|| FlagError::UnknownFlag(entry.to_string()))?;
        out.insert(flag, on);
    }
    Ok(out)
}

/// Counts executions of flag-gated enhancement call sites. With every flag
/// off the counter stays at zero.
#[derive(Debug, Default)]
pub struct EnhancementHooks {
    total: AtomicU64,
    per_flag: Mutex<BTreeMap<Flag, u64>>,
}

impl EnhancementHooks {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns whether the gated path should run, recording it if so.
    pub fn fire(&self, flags: &FlagSet, flag: Flag) -> bool {
        if !flags.is_enabled(flag) {
            return false;
        }
        self.total.fetch_add(1, Ordering::Relaxed);
        *self.per_flag.lock().unwrap().entry(flag).or_default() += 1;
        true
    }

    pub fn total(&self) -> u64 {
        self.total.load(Ordering::Relaxed)
    }

    pub fn count(&self, flag: Flag) -> u64 {
        self.per_flag
            .lock()
            .unwrap()
            .get(&flag)
            .copied()
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_has_twenty_six_unique_flags() {
        assert_eq!(CATALOG.len(), 26);
        let mut names: Vec<_> = CATALOG.iter().map(|d| d.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 26);
        for def in CATALOG {
            assert_eq!(def.flag.name(), def.name);
            assert!(def
                .name
                .chars()
                .all(|c| c.is_ascii_uppercase() || c == '_' || c.is_ascii_digit()));
        }
    }

    #[test]
    fn defaults() {
        let set = FlagSet::defaults();
        assert_eq!(set.len(), 26);
        assert_eq!(set.get(Flag::Guardian), Some((true, FlagSource::Default)));
        assert_eq!(set.get(Flag::VoiceMode), Some((false, FlagSource::Default)));
        assert!(!set.is_enabled(Flag::SemanticMemory));
    }

    #[test]
    fn runtime_beats_env() {
        let env = env_overrides([("CODEX_ENABLE_VOICE_MODE", "1")]);
        let set = resolve(&BTreeMap::new(), &env, &[], &[Flag::VoiceMode], CATALOG).unwrap();
        assert_eq!(set.get(Flag::VoiceMode), Some((false, FlagSource::Runtime)));
    }

    #[test]
    fn unknown_and_conflicting_runtime_flags() {
        let inputs = FlagInputs {
            enables: vec!["FOO".into()],
            ..FlagInputs::default()
        };
        assert_eq!(inputs.resolve(), Err(FlagError::UnknownFlag("FOO".into())));
        let err = resolve(
            &BTreeMap::new(),
            &BTreeMap::new(),
            &[Flag::Skills],
            &[Flag::Skills],
            CATALOG,
        );
        assert_eq!(err, Err(FlagError::ConflictingRuntime(Flag::Skills)));
    }

    #[test]
    fn env_encoding() {
        let env = env_overrides([
            ("CODEX_ENABLE_FLAG", "web_fetch, CRON_TOOL,NOPE"),
            ("CODEX_ENABLE_CRON_TOOL", "0"),
            ("CODEX_ENABLE_GUARDIAN", "off"),
            ("CODEX_ENABLE_BOGUS", "1"),
            ("UNRELATED", "1"),
        ]);
        assert_eq!(env.get(&Flag::WebFetch), Some(&true));
        assert_eq!(env.get(&Flag::CronTool), Some(&false));
        assert_eq!(env.get(&Flag::Guardian), Some(&false));
        assert_eq!(env.len(), 3);
    }

    #[test]
    fn build_override_parsing() {
        let b = parse_build_overrides("VOICE_MODE=on, GUARDIAN=off,SKILLS").unwrap();
        assert_eq!(b.get(&Flag::VoiceMode), Some(&true));
        assert_eq!(b.get(&Flag::Guardian), Some(&false));
        assert_eq!(b.get(&Flag::Skills), Some(&true));
        assert!(parse_build_overrides("NOT_A_FLAG=on").is_err());
        assert!(parse_build_overrides("").unwrap().is_empty());
    }

    #[test]
    fn parity_is_all_off_and_wins_over_runtime() {
        let set = parity_mode(CATALOG);
        assert_eq!(set.enabled_count(), 0);
        assert_eq!(set.len(), 26);
        let inputs = FlagInputs {
            enables: vec!["GUARDIAN".into()],
            parity: true,
            ..FlagInputs::default()
        };
        assert!(!inputs.resolve().unwrap().is_enabled(Flag::Guardian));
        assert_eq!(parity_mode(CATALOG), set);
    }

    #[test]
    fn hooks_only_count_enabled_flags() {
        let hooks = EnhancementHooks::new();
        assert!(!hooks.fire(&parity_mode(CATALOG), Flag::CostTracking));
        assert_eq!(hooks.total(), 0);
        assert!(hooks.fire(&FlagSet::defaults(), Flag::CostTracking));
        assert_eq!(hooks.count(Flag::CostTracking), 1);
    }
}
