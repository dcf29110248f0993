//! Offline evaluation: a scripted mock model reachable in-process or over
//! both wire transports, the end-to-end task suite and micro scenarios.
//!
//! Script files are line-delimited JSON; see `docs/wire-protocol.md`.

pub mod eval;
pub mod micro;
pub mod server;

use std::collections::VecDeque;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::context::estimate_tokens;
use crate::protocol::{parse_items, InputItem, StreamEvent, ToolCallSpec};
use crate::transport::client::assemble;
use crate::transport::{
    classify_error, error_envelope, ModelRequest, ModelResponse, ModelTransport, TransportError,
    TransportKind,
};

pub use server::MockServer;

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("script must end with a final turn")]
    MissingFinal,
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedCall {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub call_id: Option<String>,
    pub name: String,
    #[serde(default = "empty_object")]
    pub arguments: Value,
}

fn empty_object() -> Value {
    json!({})
}

impl ScriptedCall {
    pub fn new(name: &str, arguments: Value) -> Self {
        Self {
            call_id: None,
            name: name.into(),
            arguments,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "turn", rename_all = "snake_case")]
pub enum ScriptTurn {
    ToolCalls { calls: Vec<ScriptedCall> },
    Final { text: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BadRequestSubtype {
    PreviousResponseId,
    InvalidInputItem,
    UnsupportedToolType,
    ContextOverflow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fault", rename_all = "snake_case")]
pub enum Fault {
    #[serde(rename = "http_400")]
    Http400 {
        subtype: BadRequestSubtype,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        index: Option<usize>,
    },
    #[serde(rename = "http_429")]
    Http429 {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        retry_after: Option<f64>,
    },
    EmptyChannelResponse,
    QuotaExhausted,
    #[serde(rename = "http_500")]
    Http500,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptStep {
    Turn(ScriptTurn),
    Fault(Fault),
}

/// Ordered steps; each request consumes one. Faults sit before the turn
/// they delay.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelScript {
    pub steps: Vec<ScriptStep>,
}

impl ModelScript {
    pub fn new(steps: Vec<ScriptStep>) -> Result<Self, ScriptError> {
        match steps
            .iter()
            .rev()
            .find(|s| matches!(s, ScriptStep::Turn(_)))
        {
            Some(ScriptStep::Turn(ScriptTurn::Final { .. })) => Ok(Self { steps }),
            _ => Err(ScriptError::MissingFinal),
        }
    }

    pub fn final_text(text: &str) -> Self {
        Self {
            steps: vec![ScriptStep::Turn(ScriptTurn::Final { text: text.into() })],
        }
    }

    pub fn parse(text: &str) -> Result<Self, ScriptError> {
        let mut steps = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let value: Value = serde_json::from_str(line).map_err(|e| ScriptError::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            let step = if value.get("turn").is_some() {
                serde_json::from_value(value).map(ScriptStep::Turn)
            } else if value.get("fault").is_some() {
                serde_json::from_value(value).map(ScriptStep::Fault)
            } else {
                return Err(ScriptError::Parse {
                    line: i + 1,
                    reason: "expected a `turn` or `fault` key".into(),
                });
            }
            .map_err(|e| ScriptError::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            steps.push(step);
        }
        Self::new(steps)
    }

    pub fn load(path: &Path) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScriptError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn to_jsonl(&self) -> String {
        self.steps
            .iter()
            .map(|s| serde_json::to_string(s).expect("script serialization is infallible") + "\n")
            .collect()
    }

    pub fn turn_count(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| matches!(s, ScriptStep::Turn(_)))
            .count()
    }
}

/// One request as the mock received it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoggedRequest {
    pub transport: TransportKind,
    pub api_key: String,
    pub body: Value,
}

impl LoggedRequest {
    pub fn tool_types(&self) -> Vec<String> {
        self.body["tools"]
            .as_array()
            .map(|tools| {
                tools
                    .iter()
                    .map(|t| t["type"].as_str().unwrap_or("<missing>").to_string())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn input_ids(&self) -> Vec<String> {
        self.body["input"]
            .as_array()
            .map(|items| {
                items
                    .iter()
                    .filter_map(|i| i["id"].as_str().map(str::to_string))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn tool_names(&self) -> Vec<String> {
        self.body["tools"]
            .as_array()
            .map(|tools| {
                tools
                    .iter()
                    .filter_map(|t| t["name"].as_str().map(str::to_string))
                    .collect()
            })
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MockReply {
    Events(Vec<StreamEvent>),
    Error {
        status: u16,
        body: String,
        retry_after: Option<String>,
    },
    /// Close the channel without sending anything.
    CloseChannel,
}

/// Chooses the next step from the request when no scripted step remains.
pub type Responder = Box<dyn Fn(&Value, u64) -> Option<ScriptStep> + Send + Sync>;

/// The scripted model shared by every front end.
pub struct MockModel {
    steps: Mutex<VecDeque<ScriptStep>>,
    responder: Option<Responder>,
    log: Mutex<Vec<LoggedRequest>>,
    served: AtomicU64,
    items: AtomicU64,
}

impl std::fmt::Debug for MockModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockModel")
            .field("remaining", &self.steps.lock().unwrap().len())
            .field("served", &self.served.load(Ordering::SeqCst))
            .finish()
    }
}

fn bad_request(code: &str, param: Option<&str>, message: &str) -> MockReply {
    MockReply::Error {
        status: 400,
        body: error_envelope("invalid_request_error", code, param, message).to_string(),
        retry_after: None,
    }
}

impl MockModel {
    pub fn new(script: ModelScript) -> Self {
        Self {
            steps: Mutex::new(script.steps.into()),
            responder: None,
            log: Mutex::new(Vec::new()),
            served: AtomicU64::new(0),
            items: AtomicU64::new(0),
        }
    }

    /// A model driven entirely by `responder`.
    pub fn with_responder(responder: Responder) -> Self {
        Self {
            responder: Some(responder),
            ..Self::new(ModelScript::default())
        }
    }

    pub fn requests(&self) -> Vec<LoggedRequest> {
        self.log.lock().unwrap().clone()
    }

    pub fn remaining_steps(&self) -> usize {
        self.steps.lock().unwrap().len()
    }

    fn next_item_id(&self) -> String {
        format!("item-{}", self.items.fetch_add(1, Ordering::SeqCst))
    }

    /// Rejects what a strict endpoint would: non-function tool kinds and
    /// input items outside the closed kind set.
    fn validate(body: &Value) -> Option<MockReply> {
        if let Some(tools) = body["tools"].as_array() {
            for (i, tool) in tools.iter().enumerate() {
                if tool["type"] != "function" {
                    return Some(bad_request(
                        "unsupported_tool_type",
                        Some(&format!("tools[{i}].type")),
                        "only function tools are supported",
                    ));
                }
            }
        }
        if let Some(items) = body["input"].as_array() {
            for (i, item) in items.iter().enumerate() {
                if parse_items(&Value::Array(vec![item.clone()]).to_string()).is_err() {
                    return Some(bad_request(
                        "invalid_value",
                        Some(&format!("input[{i}]")),
                        "invalid input item",
                    ));
                }
            }
        }
        None
    }

    fn fault_reply(fault: &Fault, body: &Value, via: TransportKind) -> MockReply {
        match fault {
            Fault::Http400 { subtype, index } => match subtype {
                BadRequestSubtype::PreviousResponseId => bad_request(
                    "unsupported_parameter",
                    Some("previous_response_id"),
                    "previous_response_id is not supported",
                ),
                BadRequestSubtype::InvalidInputItem => bad_request(
                    "invalid_value",
                    Some(&format!("input[{}]", index.unwrap_or(0))),
                    "invalid input item",
                ),
                BadRequestSubtype::UnsupportedToolType => {
                    let param = index.map(|i| format!("tools[{i}].type"));
                    bad_request(
                        "unsupported_tool_type",
                        param.as_deref(),
                        "unsupported tool type",
                    )
                }
                BadRequestSubtype::ContextOverflow => {
                    let tokens = body["input"].as_array().map_or(0, |v| v.len());
                    bad_request(
                        "context_length_exceeded",
                        Some("input"),
                        &format!("context length exceeded ({tokens} items)"),
                    )
                }
            },
            Fault::Http429 { retry_after } => MockReply::Error {
                status: 429,
                body: error_envelope("rate_limit_error", "rate_limit_exceeded", None, "slow down")
                    .to_string(),
                retry_after: retry_after.map(|s| s.to_string()),
            },
            Fault::QuotaExhausted => MockReply::Error {
                status: 429,
                body: error_envelope(
                    "insufficient_quota",
                    "insufficient_quota",
                    None,
                    "quota exhausted",
                )
                .to_string(),
                retry_after: None,
            },
            Fault::Http500 => MockReply::Error {
                status: 500,
                body: error_envelope("server_error", "internal", None, "scripted server error")
                    .to_string(),
                retry_after: None,
            },
            Fault::EmptyChannelResponse => match via {
                TransportKind::Channel => MockReply::CloseChannel,
                TransportKind::Sse => MockReply::Events(vec![StreamEvent {
                    event_name: "response.completed".into(),
                    data: json!({"id": "resp-empty", "usage": {}}).to_string(),
                }]),
            },
        }
    }

    fn turn_events(&self, turn: &ScriptTurn, body: &Value, seq: u64) -> Vec<StreamEvent> {
        let id = format!("resp-{seq}");
        let mut output = Vec::new();
        match turn {
            ScriptTurn::Final { text } => {
                output.push(InputItem::assistant(self.next_item_id(), text.clone()))
            }
            ScriptTurn::ToolCalls { calls } => {
                for (i, call) in calls.iter().enumerate() {
                    let call_id = call
                        .call_id
                        .clone()
                        .unwrap_or_else(|| format!("call-{seq}-{i}"));
                    let spec =
                        ToolCallSpec::new(call_id, call.name.clone(), call.arguments.clone())
                            .expect("scripted calls carry object arguments");
                    output.push(InputItem::tool_call(self.next_item_id(), &spec));
                }
            }
        }
        let input_tokens = estimate_tokens(&body["input"].to_string());
        let output_tokens: u64 = output.iter().map(|i| estimate_tokens(&i.content)).sum();
        let mut events = vec![StreamEvent {
            event_name: "response.created".into(),
            data: json!({ "id": id }).to_string(),
        }];
        events.extend(output.iter().map(|item| StreamEvent {
            event_name: "response.output_item.done".into(),
            data: json!({ "item": item }).to_string(),
        }));
        events.push(StreamEvent {
            event_name: "response.completed".into(),
            data: json!({
                "id": id,
                "usage": {"input_tokens": input_tokens, "output_tokens": output_tokens}
            })
            .to_string(),
        });
        events
    }

    /// Serves one request body.
    pub fn handle(&self, body: &Value, api_key: &str, via: TransportKind) -> MockReply {
        self.log.lock().unwrap().push(LoggedRequest {
            transport: via,
            api_key: api_key.to_string(),
            body: body.clone(),
        });
        if let Some(reply) = Self::validate(body) {
            return reply;
        }
        let seq = self.served.fetch_add(1, Ordering::SeqCst);
        let step = self.steps.lock().unwrap().pop_front();
        let step = step.or_else(|| self.responder.as_ref().and_then(|r| r(body, seq)));
        match step {
            None => MockReply::Error {
                status: 500,
                body: error_envelope("server_error", "script_exhausted", None, "script exhausted")
                    .to_string(),
                retry_after: None,
            },
            Some(ScriptStep::Fault(fault)) => Self::fault_reply(&fault, body, via),
            Some(ScriptStep::Turn(turn)) => MockReply::Events(self.turn_events(&turn, body, seq)),
        }
    }
}

/// Calls a [`MockModel`] directly, skipping the network.
#[derive(Debug, Clone)]
pub struct InProcessTransport {
    pub model: Arc<MockModel>,
}

impl InProcessTransport {
    pub fn new(model: Arc<MockModel>) -> Self {
        Self { model }
    }
}

impl ModelTransport for InProcessTransport {
    fn send(
        &self,
        request: &ModelRequest,
        api_key: &str,
        via: TransportKind,
    ) -> Result<ModelResponse, TransportError> {
        match self.model.handle(&request.to_wire(), api_key, via) {
            MockReply::Events(events) => assemble(events, via),
            MockReply::Error {
                status,
                body,
                retry_after,
            } => Err(classify_error(status, &body, retry_after.as_deref())),
            MockReply::CloseChannel => assemble(Vec::new(), TransportKind::Channel),
        }
    }
}
