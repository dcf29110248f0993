//! Session agent tree with spawn bounds and forked histories.

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::InputItem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpawnBounds {
    pub max_depth: u32,
    pub max_children_per_parent: usize,
    pub max_total_agents: usize,
}

impl Default for SpawnBounds {
    fn default() -> Self {
        Self {
            max_depth: 5,
            max_children_per_parent: 10,
            max_total_agents: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentStatus {
    Running,
    Done,
    Failed,
}

impl AgentStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentStatus::Running => "running",
            AgentStatus::Done => "done",
            AgentStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentNode {
    pub agent_id: String,
    pub parent_id: Option<String>,
    pub depth: u32,
    pub children: Vec<String>,
    pub history: Vec<InputItem>,
    pub status: AgentStatus,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SpawnError {
    #[error("spawn would reach depth {depth}, limit is {limit}")]
    DepthExceeded { depth: u32, limit: u32 },
    #[error("agent {parent} already has {limit} children")]
    ChildrenExceeded { parent: String, limit: usize },
    #[error("session already has {limit} agents")]
    AgentsExceeded { limit: usize },
    #[error("unknown agent `{0}`")]
    UnknownAgent(String),
    #[error("agent `{0}` is not running")]
    ParentNotRunning(String),
}

/// All agents of one session. Bound checks and registration happen under a
/// single lock, so concurrent spawns cannot overshoot a limit.
#[derive(Debug)]
pub struct AgentTree {
    bounds: SpawnBounds,
    nodes: Mutex<BTreeMap<String, AgentNode>>,
    next_id: Mutex<u64>,
}

pub const ROOT_AGENT: &str = "agent-0";

impl AgentTree {
    pub fn new(bounds: SpawnBounds, root_history: Vec<InputItem>) -> Self {
        let root = AgentNode {
            agent_id: ROOT_AGENT.into(),
            parent_id: None,
            depth: 0,
            children: Vec::new(),
            history: root_history,
            status: AgentStatus::Running,
        };
        Self {
            bounds,
            nodes: Mutex::new(BTreeMap::from([(ROOT_AGENT.to_string(), root)])),
            next_id: Mutex::new(1),
        }
    }

    pub fn bounds(&self) -> SpawnBounds {
        self.bounds
    }

    /// Registers a child whose history is a deep copy of the parent's plus
    /// the task as a user item.
    pub fn spawn_child(&self, parent_id: &str, task: &str) -> Result<AgentNode, SpawnError> {
        let mut nodes = self.nodes.lock().unwrap();
        let parent = nodes
            .get(parent_id)
            .ok_or_else(|| SpawnError::UnknownAgent(parent_id.to_string()))?;
        if parent.status != AgentStatus::Running {
            return Err(SpawnError::ParentNotRunning(parent_id.to_string()));
        }
        let depth = parent.depth + 1;
        if depth > self.bounds.max_depth {
            return Err(SpawnError::DepthExceeded {
                depth,
                limit: self.bounds.max_depth,
            });
        }
        if parent.children.len() >= self.bounds.max_children_per_parent {
            return Err(SpawnError::ChildrenExceeded {
                parent: parent_id.to_string(),
                limit: self.bounds.max_children_per_parent,
            });
        }
        if nodes.len() >= self.bounds.max_total_agents {
            return Err(SpawnError::AgentsExceeded {
                limit: self.bounds.max_total_agents,
            });
        }
        let agent_id = {
            let mut next = self.next_id.lock().unwrap();
            let id = format!("agent-{next}");
            *next += 1;
            id
        };
        let mut history = parent.history.clone();
        history.push(InputItem::user(format!("{agent_id}-task"), task));
        let child = AgentNode {
            agent_id: agent_id.clone(),
            parent_id: Some(parent_id.to_string()),
            depth,
            children: Vec::new(),
            history,
            status: AgentStatus::Running,
        };
        nodes
            .get_mut(parent_id)
            .expect("parent checked above")
            .children
            .push(agent_id.clone());
        nodes.insert(agent_id, child.clone());
        Ok(child)
    }

    pub fn get(&self, agent_id: &str) -> Option<AgentNode> {
        self.nodes.lock().unwrap().get(agent_id).cloned()
    }

    pub fn set_history(&self, agent_id: &str, history: Vec<InputItem>) {
        if let Some(node) = self.nodes.lock().unwrap().get_mut(agent_id) {
            node.history = history;
        }
    }

    pub fn set_status(&self, agent_id: &str, status: AgentStatus) {
        if let Some(node) = self.nodes.lock().unwrap().get_mut(agent_id) {
            node.status = status;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_depth_reached(&self) -> u32 {
        self.nodes
            .lock()
            .unwrap()
            .values()
            .map(|n| n.depth)
            .max()
            .unwrap_or(0)
    }

    pub fn max_children(&self) -> usize {
        self.nodes
            .lock()
            .unwrap()
            .values()
            .map(|n| n.children.len())
            .max()
            .unwrap_or(0)
    }

    pub fn snapshot(&self) -> Vec<AgentNode> {
        self.nodes.lock().unwrap().values().cloned().collect()
    }
}
