//! Conversation items, agent events, and wire framing shared by every other
//! module.
//!
//! Items serialize with a fixed, alphabetical field order so that golden files
//! and request logs are byte-stable. The item kind set is closed: anything the
//! parser does not recognise is rejected rather than passed through.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    UserText,
    AssistantText,
    ToolCall,
    ToolResult,
    System,
    SummaryBoundary,
}

impl ItemKind {
    pub const ALL: [ItemKind; 6] = [
        ItemKind::UserText,
        ItemKind::AssistantText,
        ItemKind::ToolCall,
        ItemKind::ToolResult,
        ItemKind::System,
        ItemKind::SummaryBoundary,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ItemKind::UserText => "user_text",
            ItemKind::AssistantText => "assistant_text",
            ItemKind::ToolCall => "tool_call",
            ItemKind::ToolResult => "tool_result",
            ItemKind::System => "system",
            ItemKind::SummaryBoundary => "summary_boundary",
        }
    }
}

/// One entry of the conversation history.
///
/// Field declaration order is the canonical wire order; keep it alphabetical
/// by serialized name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputItem {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub call_id: Option<String>,
    pub content: String,
    pub id: String,
    #[serde(rename = "name", default, skip_serializing_if = "Option::is_none")]
    pub tool_name: Option<String>,
    #[serde(
        rename = "token_estimate",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub token_estimate_cache: Option<u64>,
    #[serde(rename = "type")]
    pub kind: ItemKind,
}

impl InputItem {
    fn new(kind: ItemKind, id: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            call_id: None,
            content: content.into(),
            id: id.into(),
            tool_name: None,
            token_estimate_cache: None,
            kind,
        }
    }

    pub fn user(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self::new(ItemKind::UserText, id, text)
    }

    pub fn assistant(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self::new(ItemKind::AssistantText, id, text)
    }

    pub fn system(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self::new(ItemKind::System, id, text)
    }

    pub fn summary_boundary(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self::new(ItemKind::SummaryBoundary, id, text)
    }

    /// A tool call item; `content` holds the JSON-encoded arguments object.
    pub fn tool_call(id: impl Into<String>, spec: &ToolCallSpec) -> Self {
        let mut item = Self::new(ItemKind::ToolCall, id, spec.arguments.to_string());
        item.call_id = Some(spec.call_id.clone());
        item.tool_name = Some(spec.name.clone());
        item
    }

    pub fn tool_result(
        id: impl Into<String>,
        call_id: impl Into<String>,
        output: impl Into<String>,
    ) -> Self {
        let mut item = Self::new(ItemKind::ToolResult, id, output);
        item.call_id = Some(call_id.into());
        item
    }

    /// Recovers the call spec from a `tool_call` item.
    pub fn as_tool_call(&self) -> Option<ToolCallSpec> {
        if self.kind != ItemKind::ToolCall {
            return None;
        }
        let arguments = serde_json::from_str(&self.content).ok()?;
        ToolCallSpec::new(self.call_id.clone()?, self.tool_name.clone()?, arguments).ok()
    }
}

/// A tool call requested by the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCallSpec {
    pub call_id: String,
    pub name: String,
    pub arguments: serde_json::Value,
}

impl ToolCallSpec {
    pub fn new(
        call_id: impl Into<String>,
        name: impl Into<String>,
        arguments: serde_json::Value,
    ) -> Result<Self, ProtocolError> {
        let name = name.into();
        if name.is_empty() {
            return Err(ProtocolError::InvalidToolCall("empty tool name".into()));
        }
        if !arguments.is_object() {
            return Err(ProtocolError::InvalidToolCall(format!(
                "arguments for `{name}` must be a JSON object"
            )));
        }
        Ok(Self {
            call_id: call_id.into(),
            name,
            arguments,
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("malformed item at index {index}: {reason}")]
    MalformedItem { index: usize, reason: String },
    #[error("invalid JSON: {0}")]
    InvalidJson(String),
    #[error("invalid tool call: {0}")]
    InvalidToolCall(String),
    #[error("history invariant violated at index {index}: {reason}")]
    InvalidHistory { index: usize, reason: String },
    #[error("stream ended inside an unterminated record")]
    TruncatedStream,
}

/// Serializes a history as a canonical JSON array.
pub fn serialize_items(items: &[InputItem]) -> String {
    // Struct serialization cannot fail: every field is a string or integer.
    serde_json::to_string(items).expect("InputItem serialization is infallible")
}

/// Parses a JSON array of items, rejecting unknown kinds and missing fields.
pub fn parse_items(text: &str) -> Result<Vec<InputItem>, ProtocolError> {
    let raw: Vec<serde_json::Value> =
        serde_json::from_str(text).map_err(|e| ProtocolError::InvalidJson(e.to_string()))?;
    raw.into_iter()
        .enumerate()
        .map(|(index, value)| parse_item(index, value))
        .collect()
}

fn parse_item(index: usize, value: serde_json::Value) -> Result<InputItem, ProtocolError> {
    let item: InputItem =
        serde_json::from_value(value).map_err(|e| ProtocolError::MalformedItem {
            index,
            reason: e.to_string(),
        })?;
    let missing = |field: &str| ProtocolError::MalformedItem {
        index,
        reason: format!("{} item requires `{field}`", item.kind.as_str()),
    };
    match item.kind {
        ItemKind::ToolCall => {
            if item.call_id.is_none() {
                return Err(missing("call_id"));
            }
            if item.tool_name.as_deref().is_none_or(str::is_empty) {
                return Err(missing("name"));
            }
        }
        ItemKind::ToolResult if item.call_id.is_none() => return Err(missing("call_id")),
        _ => {}
    }
    Ok(item)
}

/// Checks the cross-item history invariants: every tool result answers an
/// earlier tool call, and there is at most one summary boundary.
pub fn validate_history(items: &[InputItem]) -> Result<(), ProtocolError> {
    let mut calls = std::collections::HashSet::new();
    let mut boundary_seen = false;
    for (index, item) in items.iter().enumerate() {
        match item.kind {
            ItemKind::ToolCall => {
                if let Some(id) = &item.call_id {
                    calls.insert(id.as_str());
                }
            }
            ItemKind::ToolResult => {
                let known = item.call_id.as_deref().is_some_and(|id| calls.contains(id));
                if !known {
                    return Err(ProtocolError::InvalidHistory {
                        index,
                        reason: "tool_result without a matching earlier tool_call".into(),
                    });
                }
            }
            ItemKind::SummaryBoundary => {
                if boundary_seen {
                    return Err(ProtocolError::InvalidHistory {
                        index,
                        reason: "more than one summary_boundary".into(),
                    });
                }
                boundary_seen = true;
            }
            _ => {}
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolStatus {
    Ok,
    Error,
    Denied,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    TurnStarted,
    ToolCall,
    ToolResult,
    TurnCompleted,
    Error,
    TokenUsage,
}

/// Variant-specific event data. Serialized with a `type` tag naming the
/// variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum EventPayload {
    TurnStarted,
    ToolCall {
        call_id: String,
        name: String,
        arguments: serde_json::Value,
    },
    ToolResult {
        call_id: String,
        status: ToolStatus,
        output: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        exit_code: Option<i32>,
    },
    TurnCompleted {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        final_text: Option<String>,
    },
    /// `terminal` errors end the turn; non-terminal errors (for example a
    /// failed summarization) are reported and the turn continues.
    Error {
        kind: String,
        message: String,
        terminal: bool,
    },
    TokenUsage {
        input_tokens: u64,
        output_tokens: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentEvent {
    pub turn_index: u32,
    /// Milliseconds since the session started (monotonic clock).
    pub timestamp_ms: u64,
    #[serde(flatten)]
    pub payload: EventPayload,
}

impl AgentEvent {
    pub fn kind(&self) -> EventKind {
        match self.payload {
            EventPayload::TurnStarted => EventKind::TurnStarted,
            EventPayload::ToolCall { .. } => EventKind::ToolCall,
            EventPayload::ToolResult { .. } => EventKind::ToolResult,
            EventPayload::TurnCompleted { .. } => EventKind::TurnCompleted,
            EventPayload::Error { .. } => EventKind::Error,
            EventPayload::TokenUsage { .. } => EventKind::TokenUsage,
        }
    }

    fn closes_turn(&self) -> bool {
        match &self.payload {
            EventPayload::TurnCompleted { .. } => true,
            EventPayload::Error { terminal, .. } => *terminal,
            _ => false,
        }
    }
}

/// Verifies that every `TurnStarted(i)` is closed by exactly one later
/// `TurnCompleted(i)` or terminal `Error(i)`, and that tool events only occur
/// inside an open turn.
pub fn check_event_pairing(events: &[AgentEvent]) -> Result<(), String> {
    let mut open: Option<u32> = None;
    let mut seen = std::collections::HashSet::new();
    for (pos, event) in events.iter().enumerate() {
        match event.kind() {
            EventKind::TurnStarted => {
                if let Some(i) = open {
                    return Err(format!("event {pos}: turn {i} still open"));
                }
                if !seen.insert(event.turn_index) {
                    return Err(format!(
                        "event {pos}: turn {} started twice",
                        event.turn_index
                    ));
                }
                open = Some(event.turn_index);
            }
            EventKind::ToolCall | EventKind::ToolResult => {
                if open != Some(event.turn_index) {
                    return Err(format!("event {pos}: tool event outside its turn"));
                }
            }
            _ if event.closes_turn() => {
                if open != Some(event.turn_index) {
                    return Err(format!(
                        "event {pos}: close for turn {} which is not open",
                        event.turn_index
                    ));
                }
                open = None;
            }
            _ => {}
        }
    }
    match open {
        Some(i) => Err(format!("turn {i} never closed")),
        None => Ok(()),
    }
}

/// One dispatched server-sent-events record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamEvent {
    pub event_name: String,
    pub data: String,
}

/// Incremental parser for the SSE subset the model endpoint emits: `event:`
/// and `data:` fields, records terminated by a blank line. `id:`, `retry:`
/// and `:` comment lines are ignored.
#[derive(Debug, Default)]
pub struct SseParser {
    pending: Vec<u8>,
    event_name: Option<String>,
    data_lines: Vec<String>,
    saw_field: bool,
}

impl SseParser {
    pub fn new() -> Self {
        Self::default()
    }

    /// Feeds one chunk and returns every record completed by it.
    pub fn feed(&mut self, chunk: &[u8]) -> Vec<StreamEvent> {
        self.pending.extend_from_slice(chunk);
        let mut out = Vec::new();
        let mut start = 0;
        while let Some(offset) = self.pending[start..].iter().position(|b| *b == b'\n') {
            let end = start + offset;
            let mut line = &self.pending[start..end];
            if line.last() == Some(&b'\r') {
                line = &line[..line.len() - 1];
            }
            let line = String::from_utf8_lossy(line).into_owned();
            start = end + 1;
            if let Some(event) = self.process_line(&line) {
                out.push(event);
            }
        }
        self.pending.drain(..start);
        out
    }

    /// Signals end of input. Fails if a record was started but never
    /// terminated.
    pub fn finish(self) -> Result<(), ProtocolError> {
        if self.pending.iter().any(|b| !b.is_ascii_whitespace()) || self.saw_field {
            return Err(ProtocolError::TruncatedStream);
        }
        Ok(())
    }

    fn process_line(&mut self, line: &str) -> Option<StreamEvent> {
        if line.is_empty() {
            let had_data = !self.data_lines.is_empty();
            let name = self.event_name.take();
            let data = std::mem::take(&mut self.data_lines).join("\n");
            self.saw_field = false;
            return had_data.then(|| StreamEvent {
                event_name: name.unwrap_or_else(|| "message".to_string()),
                data,
            });
        }
        if line.starts_with(':') {
            return None;
        }
        let (field, value) = match line.split_once(':') {
            Some((f, v)) => (f, v.strip_prefix(' ').unwrap_or(v)),
            None => (line, ""),
        };
        match field {
            "event" => {
                self.event_name = Some(value.to_string());
                self.saw_field = true;
            }
            "data" => {
                self.data_lines.push(value.to_string());
                self.saw_field = true;
            }
            _ => {}
        }
        None
    }
}

/// Parses a complete byte stream delivered as a sequence of chunks.
pub fn parse_sse<'a, I>(chunks: I) -> Result<Vec<StreamEvent>, ProtocolError>
where
    I: IntoIterator<Item = &'a [u8]>,
{
    let mut parser = SseParser::new();
    let mut events = Vec::new();
    for chunk in chunks {
        events.extend(parser.feed(chunk));
    }
    parser.finish()?;
    Ok(events)
}

/// Renders one SSE record.
pub fn encode_sse(event_name: &str, data: &str) -> String {
    let mut out = format!("event: {event_name}\n");
    for line in data.split('\n') {
        out.push_str("data: ");
        out.push_str(line);
        out.push('\n');
    }
    out.push('\n');
    out
}
