//! The mock model over the wire: `POST /v1/responses` answered with an
//! event stream, and a websocket channel speaking the same grammar.

use std::io::Write;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde_json::{json, Value};
use tungstenite::Message;

use super::{LoggedRequest, MockModel, MockReply, ModelScript};
use crate::protocol::encode_sse;
use crate::transport::TransportKind;

pub struct MockServer {
    model: Arc<MockModel>,
    http: Arc<tiny_http::Server>,
    http_addr: SocketAddr,
    ws_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for MockServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockServer")
            .field("http", &self.http_addr)
            .field("channel", &self.ws_addr)
            .finish()
    }
}

impl MockServer {
    pub fn start(script: ModelScript) -> std::io::Result<Self> {
        Self::start_with(Arc::new(MockModel::new(script)))
    }

    /// Serves `model` on two ephemeral localhost ports.
    pub fn start_with(model: Arc<MockModel>) -> std::io::Result<Self> {
        let http = tiny_http::Server::http("127.0.0.1:0").map_err(std::io::Error::other)?;
        let http_addr = http
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("mock server bound to a non-IP address"))?;
        let http = Arc::new(http);
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let ws_addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));

        let http_thread = {
            let http = http.clone();
            let model = model.clone();
            std::thread::spawn(move || {
                for request in http.incoming_requests() {
                    serve_http(&model, request);
                }
            })
        };
        let ws_thread = {
            let model = model.clone();
            let stop = stop.clone();
            std::thread::spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let model = model.clone();
                    std::thread::spawn(move || serve_channel(&model, stream));
                }
            })
        };
        Ok(Self {
            model,
            http,
            http_addr,
            ws_addr,
            stop,
            threads: vec![http_thread, ws_thread],
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.http_addr)
    }

    pub fn channel_url(&self) -> String {
        format!("ws://{}/v1/responses", self.ws_addr)
    }

    pub fn model(&self) -> &Arc<MockModel> {
        &self.model
    }

    pub fn requests(&self) -> Vec<LoggedRequest> {
        self.model.requests()
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.http.unblock();
        // Wake the accept loop so it can observe the flag.
        let _ = TcpStream::connect(self.ws_addr);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

fn serve_http(model: &MockModel, mut request: tiny_http::Request) {
    if request.method() != &tiny_http::Method::Post || request.url() != "/v1/responses" {
        let _ =
            request.respond(tiny_http::Response::from_string("not found").with_status_code(404));
        return;
    }
    let api_key = request
        .headers()
        .iter()
        .find(|h| h.field.equiv("Authorization"))
        .map(|h| h.value.as_str().trim_start_matches("Bearer ").to_string())
        .unwrap_or_default();
    let mut raw = String::new();
    if request.as_reader().read_to_string(&mut raw).is_err() {
        let _ = request
            .respond(tiny_http::Response::from_string("unreadable body").with_status_code(400));
        return;
    }
    let body: Value = match serde_json::from_str(&raw) {
        Ok(v) => v,
        Err(e) => {
            let _ = request
                .respond(tiny_http::Response::from_string(e.to_string()).with_status_code(400));
            return;
        }
    };
    let header = |k: &str, v: &str| {
        tiny_http::Header::from_bytes(k.as_bytes(), v.as_bytes()).expect("valid header")
    };
    let response = match model.handle(&body, &api_key, TransportKind::Sse) {
        MockReply::Events(events) => {
            let stream: String = events
                .iter()
                .map(|e| encode_sse(&e.event_name, &e.data))
                .collect();
            tiny_http::Response::from_string(stream)
                .with_header(header("Content-Type", "text/event-stream"))
        }
        MockReply::Error {
            status,
            body,
            retry_after,
        } => {
            let mut r = tiny_http::Response::from_string(body)
                .with_status_code(status)
                .with_header(header("Content-Type", "application/json"));
            if let Some(secs) = retry_after {
                r = r.with_header(header("Retry-After", &secs));
            }
            r
        }
        MockReply::CloseChannel => tiny_http::Response::from_string(""),
    };
    let _ = request.respond(response);
}

fn serve_channel(model: &MockModel, stream: TcpStream) {
    let Ok(mut ws) = tungstenite::accept(stream) else {
        return;
    };
    loop {
        let text = match ws.read() {
            Ok(Message::Text(t)) => t.to_string(),
            Ok(Message::Close(_)) | Err(_) => return,
            Ok(_) => continue,
        };
        let frame: Value = serde_json::from_str(&text).unwrap_or(Value::Null);
        let api_key = frame["api_key"].as_str().unwrap_or_default().to_string();
        let send = |ws: &mut tungstenite::WebSocket<TcpStream>, event: &str, data: Value| {
            ws.send(Message::text(
                json!({"event": event, "data": data}).to_string(),
            ))
            .map_err(drop)
        };
        let result = match model.handle(&frame["request"], &api_key, TransportKind::Channel) {
            MockReply::Events(events) => events.iter().try_for_each(|e| {
                let data = serde_json::from_str(&e.data).unwrap_or(Value::String(e.data.clone()));
                send(&mut ws, &e.event_name, data)
            }),
            MockReply::Error {
                status,
                body,
                retry_after,
            } => {
                let envelope: Value = serde_json::from_str(&body).unwrap_or(Value::Null);
                send(
                    &mut ws,
                    "error",
                    json!({"status": status, "error": envelope["error"], "retry_after": retry_after}),
                )
            }
            MockReply::CloseChannel => {
                let _ = ws.close(None);
                let _ = ws.flush();
                // Drain until the peer acknowledges or goes away.
                while ws.read().is_ok() {}
                return;
            }
        };
        if result.is_err() {
            return;
        }
        let _ = ws.get_mut().flush();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{Fault, ScriptStep, ScriptTurn};
    use crate::protocol::InputItem;
    use crate::transport::{ErrorClass, HttpModelClient, ModelRequest, ModelTransport};

    fn req() -> ModelRequest {
        ModelRequest::new("m", vec![InputItem::user("u", "say hi")], vec![])
    }

    #[test]
    fn serves_over_both_transports() {
        let script = ModelScript::new(vec![
            ScriptStep::Turn(ScriptTurn::Final { text: "one".into() }),
            ScriptStep::Turn(ScriptTurn::Final { text: "two".into() }),
        ])
        .unwrap();
        let server = MockServer::start(script).unwrap();
        let client = HttpModelClient::new(&server.base_url(), Some(server.channel_url()));
        let a = client.send(&req(), "k1", TransportKind::Channel).unwrap();
        let b = client.send(&req(), "k2", TransportKind::Sse).unwrap();
        assert_eq!(
            (a.text().as_deref(), a.transport),
            (Some("one"), TransportKind::Channel)
        );
        assert_eq!(
            (b.text().as_deref(), b.transport),
            (Some("two"), TransportKind::Sse)
        );
        let log = server.requests();
        assert_eq!(log.len(), 2);
        assert_eq!(
            (log[0].api_key.as_str(), log[1].api_key.as_str()),
            ("k1", "k2")
        );
        let err = client.send(&req(), "k", TransportKind::Sse).unwrap_err();
        assert_eq!((err.class, err.raw_status), (ErrorClass::Server, 500));
    }

    #[test]
    fn retry_after_header_reaches_the_client() {
        let script = ModelScript::new(vec![
            ScriptStep::Fault(Fault::Http429 {
                retry_after: Some(3.0),
            }),
            ScriptStep::Turn(ScriptTurn::Final { text: "ok".into() }),
        ])
        .unwrap();
        let server = MockServer::start(script).unwrap();
        let client = HttpModelClient::new(&server.base_url(), None);
        let err = client.send(&req(), "k", TransportKind::Sse).unwrap_err();
        assert_eq!(
            err.class,
            ErrorClass::RateLimited {
                retry_after_seconds: Some(3.0)
            }
        );
    }

    #[test]
    fn empty_channel_closes_then_channel_reconnects() {
        let script = ModelScript::new(vec![
            ScriptStep::Fault(Fault::EmptyChannelResponse),
            ScriptStep::Turn(ScriptTurn::Final {
                text: "after".into(),
            }),
        ])
        .unwrap();
        let server = MockServer::start(script).unwrap();
        let client = HttpModelClient::new(&server.base_url(), Some(server.channel_url()));
        let err = client
            .send(&req(), "k", TransportKind::Channel)
            .unwrap_err();
        assert_eq!(err.class, ErrorClass::EmptyResponse);
        let ok = client.send(&req(), "k", TransportKind::Channel).unwrap();
        assert_eq!(ok.text().as_deref(), Some("after"));
    }
}
