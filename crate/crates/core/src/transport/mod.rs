//! Model endpoint client: request/response types, error classification, the
//! two wire transports and the recovery loop.
//!
//! The wire grammar shared with the harness mock server is described in
//! `docs/wire-protocol.md`.

pub mod client;
pub mod recovery;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::protocol::{InputItem, ItemKind, StreamEvent, ToolCallSpec};
use crate::tools::ToolSpec;

pub use client::{HttpModelClient, ModelTransport};
pub use recovery::{
    send_with_recovery, AttemptRecord, NoSleep, RecordingSleeper, RecoveryAction, RecoveryError,
    RecoveryOutcome, RecoveryPolicy, SessionTransportState, Sleeper, ThreadSleeper,
};

/// The only tool wire kind the endpoint accepts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolWireKind {
    #[default]
    Function,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolDeclaration {
    #[serde(rename = "type")]
    pub kind: ToolWireKind,
    pub name: String,
    pub description: String,
    pub parameters: Value,
}

impl From<&ToolSpec> for ToolDeclaration {
    fn from(spec: &ToolSpec) -> Self {
        Self {
            kind: ToolWireKind::Function,
            name: spec.name.clone(),
            description: spec.description.clone(),
            parameters: spec.parameters.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRequest {
    #[serde(rename = "model")]
    pub model_id: String,
    pub input: Vec<InputItem>,
    pub tools: Vec<ToolDeclaration>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub previous_response_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_output_tokens: Option<u64>,
}

impl ModelRequest {
    pub fn new(
        model_id: impl Into<String>,
        input: Vec<InputItem>,
        tools: Vec<ToolDeclaration>,
    ) -> Self {
        Self {
            model_id: model_id.into(),
            input,
            tools,
            previous_response_id: None,
            max_output_tokens: None,
        }
    }

    /// JSON body for the event-stream endpoint.
    pub fn to_wire(&self) -> Value {
        let mut body = serde_json::to_value(self).expect("request serialization is infallible");
        body["stream"] = Value::Bool(true);
        body
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    /// Persistent bidirectional channel (websocket).
    Channel,
    /// HTTP request answered with a server-sent event stream.
    Sse,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelResponse {
    pub id: String,
    pub output: Vec<InputItem>,
    pub usage: Usage,
    pub transport: TransportKind,
    /// Stream events as received, in order.
    pub events: Vec<StreamEvent>,
}

impl ModelResponse {
    pub fn text(&self) -> Option<String> {
        let parts: Vec<&str> = self
            .output
            .iter()
            .filter(|i| i.kind == ItemKind::AssistantText)
            .map(|i| i.content.as_str())
            .collect();
        (!parts.is_empty()).then(|| parts.join("\n"))
    }

    pub fn tool_calls(&self) -> Vec<ToolCallSpec> {
        self.output
            .iter()
            .filter_map(InputItem::as_tool_call)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BadRequestKind {
    UnsupportedPreviousResponseId,
    InvalidInputItem(usize),
    UnsupportedToolType(Option<usize>),
    ContextOverflow,
    /// A 4xx the recovery layer cannot rewrite around.
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    BadRequest(BadRequestKind),
    RateLimited {
        retry_after_seconds: Option<f64>,
    },
    QuotaExhausted,
    Network,
    Server,
    /// A response that completed with zero output items.
    EmptyResponse,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{class:?} (status {raw_status}): {raw_body}")]
pub struct TransportError {
    pub class: ErrorClass,
    /// 0 when no HTTP status was received.
    pub raw_status: u16,
    pub raw_body: String,
}

impl TransportError {
    pub fn network(body: impl Into<String>) -> Self {
        Self {
            class: ErrorClass::Network,
            raw_status: 0,
            raw_body: body.into(),
        }
    }

    pub fn empty(status: u16) -> Self {
        Self {
            class: ErrorClass::EmptyResponse,
            raw_status: status,
            raw_body: String::new(),
        }
    }
}

/// Extracts `N` from `input[N]` or `input[N].field`.
fn indexed_param(param: &str, field: &str) -> Option<usize> {
    let rest = param.strip_prefix(field)?.strip_prefix('[')?;
    let (digits, _) = rest.split_once(']')?;
    digits.parse().ok()
}

fn parse_retry_after(value: &str) -> Option<f64> {
    value
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|s| s.is_finite() && *s >= 0.0)
}

/// Maps an error status and JSON envelope to an [`ErrorClass`].
pub fn classify_error(status: u16, body: &str, retry_after: Option<&str>) -> TransportError {
    let envelope: Value = serde_json::from_str(body).unwrap_or(Value::Null);
    let error = &envelope["error"];
    let code = error["code"].as_str().unwrap_or("");
    let param = error["param"].as_str().unwrap_or("");
    let class = match status {
        400 => {
            let kind = if param == "previous_response_id" {
                BadRequestKind::UnsupportedPreviousResponseId
            } else if code == "context_length_exceeded" {
                BadRequestKind::ContextOverflow
            } else if code == "unsupported_tool_type"
                || (param.starts_with("tools[") && param.ends_with(".type"))
            {
                BadRequestKind::UnsupportedToolType(indexed_param(param, "tools"))
            } else if let (true, Some(index)) =
                (code == "invalid_value", indexed_param(param, "input"))
            {
                BadRequestKind::InvalidInputItem(index)
            } else {
                BadRequestKind::Other
            };
            ErrorClass::BadRequest(kind)
        }
        429 if code == "insufficient_quota" => ErrorClass::QuotaExhausted,
        429 => ErrorClass::RateLimited {
            retry_after_seconds: retry_after.and_then(parse_retry_after),
        },
        500..=599 => ErrorClass::Server,
        _ => ErrorClass::BadRequest(BadRequestKind::Other),
    };
    TransportError {
        class,
        raw_status: status,
        raw_body: body.to_string(),
    }
}

/// Builds the JSON error envelope used by the endpoint.
pub fn error_envelope(kind: &str, code: &str, param: Option<&str>, message: &str) -> Value {
    serde_json::json!({
        "error": {"type": kind, "code": code, "param": param, "message": message}
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyRing {
    keys: Vec<String>,
    active: usize,
}

impl KeyRing {
    /// Returns `None` for an empty key list.
    pub fn new(keys: Vec<String>) -> Option<Self> {
        (!keys.is_empty()).then_some(Self { keys, active: 0 })
    }

    pub fn active(&self) -> &str {
        &self.keys[self.active]
    }

    pub fn active_index(&self) -> usize {
        self.active
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Circular rotation; returns the new active index.
    pub fn rotate(&mut self) -> usize {
        self.active = (self.active + 1) % self.keys.len();
        self.active
    }
}
