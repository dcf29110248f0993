//! Wire clients for the event-stream and persistent-channel transports.

use std::io::Read;
use std::net::TcpStream;
use std::sync::Mutex;
use std::time::Duration;

use serde_json::{json, Value};
use tungstenite::client::IntoClientRequest;
use tungstenite::{Message, WebSocket};

use super::{classify_error, ModelRequest, ModelResponse, TransportError, TransportKind, Usage};
use crate::protocol::{InputItem, ItemKind, SseParser, StreamEvent};

pub trait ModelTransport: Send + Sync {
    /// Sends one request. `via` is a preference; a client without a channel
    /// endpoint answers over the event stream.
    fn send(
        &self,
        request: &ModelRequest,
        api_key: &str,
        via: TransportKind,
    ) -> Result<ModelResponse, TransportError>;
}

/// Assembles streamed events into a response. A stream that completes
/// without output items is an `EmptyResponse` error, never a success.
pub fn assemble(
    events: Vec<StreamEvent>,
    transport: TransportKind,
) -> Result<ModelResponse, TransportError> {
    let mut id = String::new();
    let mut output = Vec::new();
    let mut usage = Usage::default();
    let mut completed = false;
    let had_events = !events.is_empty();
    for event in &events {
        let data: Value = serde_json::from_str(&event.data).map_err(|e| {
            TransportError::network(format!("malformed frame ({e}): {}", event.data))
        })?;
        match event.event_name.as_str() {
            "response.created" => id = data["id"].as_str().unwrap_or_default().to_string(),
            "response.output_item.done" => {
                let item: InputItem =
                    serde_json::from_value(data["item"].clone()).map_err(|e| {
                        TransportError::network(format!(
                            "malformed output item ({e}): {}",
                            event.data
                        ))
                    })?;
                let valid = match item.kind {
                    ItemKind::AssistantText => true,
                    ItemKind::ToolCall => item.as_tool_call().is_some(),
                    _ => false,
                };
                if !valid {
                    return Err(TransportError::network(format!(
                        "unexpected output item: {}",
                        event.data
                    )));
                }
                output.push(item);
            }
            "response.completed" => {
                completed = true;
                if let Some(rid) = data["id"].as_str() {
                    id = rid.to_string();
                }
                usage = serde_json::from_value(data["usage"].clone()).unwrap_or_default();
            }
            "error" => {
                let status = data["status"].as_u64().unwrap_or(500) as u16;
                let body = json!({ "error": data["error"] }).to_string();
                return Err(classify_error(status, &body, data["retry_after"].as_str()));
            }
            _ => {}
        }
    }
    if !completed {
        return Err(if had_events {
            TransportError::network("stream ended before response.completed")
        } else {
            TransportError::empty(200)
        });
    }
    if output.is_empty() {
        return Err(TransportError::empty(200));
    }
    Ok(ModelResponse {
        id,
        output,
        usage,
        transport,
        events,
    })
}

/// Client for an endpoint serving `POST {base}/v1/responses` and optionally a
/// websocket channel.
pub struct HttpModelClient {
    sse_url: String,
    channel_url: Option<String>,
    timeout: Duration,
    channel: Mutex<Option<WebSocket<TcpStream>>>,
}

impl std::fmt::Debug for HttpModelClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpModelClient")
            .field("sse_url", &self.sse_url)
            .field("channel_url", &self.channel_url)
            .finish()
    }
}

impl HttpModelClient {
    /// `base` is the HTTP origin, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: &str, channel_url: Option<String>) -> Self {
        Self {
            sse_url: format!("{}/v1/responses", base.trim_end_matches('/')),
            channel_url,
            timeout: Duration::from_secs(120),
            channel: Mutex::new(None),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn send_sse(
        &self,
        request: &ModelRequest,
        api_key: &str,
    ) -> Result<ModelResponse, TransportError> {
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(Duration::from_secs(10))
            .timeout_read(self.timeout)
            .build();
        let result = agent
            .post(&self.sse_url)
            .set("Authorization", &format!("Bearer {api_key}"))
            .set("Accept", "text/event-stream")
            .set("Content-Type", "application/json")
            .send_string(&request.to_wire().to_string());
        let response = match result {
            Ok(r) => r,
            Err(ureq::Error::Status(status, r)) => {
                let retry_after = r.header("Retry-After").map(str::to_string);
                let body = r.into_string().unwrap_or_default();
                return Err(classify_error(status, &body, retry_after.as_deref()));
            }
            Err(e) => return Err(TransportError::network(e.to_string())),
        };
        let mut reader = response.into_reader();
        let mut parser = SseParser::new();
        let mut events = Vec::new();
        let mut buf = [0u8; 8192];
        loop {
            match reader.read(&mut buf) {
                Ok(0) => break,
                Ok(n) => events.extend(parser.feed(&buf[..n])),
                Err(e) => return Err(TransportError::network(e.to_string())),
            }
        }
        parser
            .finish()
            .map_err(|e| TransportError::network(e.to_string()))?;
        assemble(events, TransportKind::Sse)
    }

    fn connect_channel(&self, url: &str) -> Result<WebSocket<TcpStream>, TransportError> {
        let net =
            |e: &dyn std::fmt::Display| TransportError::network(format!("channel connect: {e}"));
        let req = url.into_client_request().map_err(|e| net(&e))?;
        let host = req.uri().host().unwrap_or("127.0.0.1").to_string();
        let port = req.uri().port_u16().unwrap_or(80);
        let stream = TcpStream::connect((host.as_str(), port)).map_err(|e| net(&e))?;
        stream
            .set_read_timeout(Some(self.timeout))
            .map_err(|e| net(&e))?;
        let (ws, _) = tungstenite::client(req, stream).map_err(|e| net(&e))?;
        Ok(ws)
    }

    fn send_channel(
        &self,
        url: &str,
        request: &ModelRequest,
        api_key: &str,
    ) -> Result<ModelResponse, TransportError> {
        let mut guard = self.channel.lock().unwrap();
        if guard.is_none() {
            *guard = Some(self.connect_channel(url)?);
        }
        let frame = json!({"type": "response.create", "api_key": api_key, "request": request});
        let ws = guard.as_mut().expect("connected above");
        if ws.send(Message::text(frame.to_string())).is_err() {
            // Stale connection: reconnect once.
            *guard = Some(self.connect_channel(url)?);
            let ws = guard.as_mut().expect("connected above");
            ws.send(Message::text(frame.to_string()))
                .map_err(|e| TransportError::network(format!("channel send: {e}")))?;
        }

        let mut events = Vec::new();
        let mut keep = true;
        loop {
            let ws = guard.as_mut().expect("connected above");
            let msg = match ws.read() {
                Ok(msg) => msg,
                Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => {
                    keep = false;
                    break;
                }
                Err(tungstenite::Error::Protocol(_)) if events.is_empty() => {
                    // Peer dropped the socket without a close handshake.
                    keep = false;
                    break;
                }
                Err(e) => {
                    *guard = None;
                    return Err(TransportError::network(format!("channel read: {e}")));
                }
            };
            let text = match msg {
                Message::Text(t) => t.to_string(),
                Message::Close(_) => {
                    keep = false;
                    break;
                }
                Message::Ping(_) | Message::Pong(_) | Message::Frame(_) => continue,
                Message::Binary(b) => String::from_utf8_lossy(&b).into_owned(),
            };
            let frame: Value = match serde_json::from_str(&text) {
                Ok(v) => v,
                Err(e) => {
                    *guard = None;
                    return Err(TransportError::network(format!(
                        "malformed frame ({e}): {text}"
                    )));
                }
            };
            let name = frame["event"].as_str().unwrap_or("message").to_string();
            let done = name == "response.completed" || name == "error";
            events.push(StreamEvent {
                event_name: name,
                data: frame["data"].to_string(),
            });
            if done {
                break;
            }
        }
        if !keep {
            *guard = None;
        }
        drop(guard);
        assemble(events, TransportKind::Channel)
    }
}

impl ModelTransport for HttpModelClient {
    fn send(
        &self,
        request: &ModelRequest,
        api_key: &str,
        via: TransportKind,
    ) -> Result<ModelResponse, TransportError> {
        match (via, &self.channel_url) {
            (TransportKind::Channel, Some(url)) => self.send_channel(url, request, api_key),
            _ => self.send_sse(request, api_key),
        }
    }
}
