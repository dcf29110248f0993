use std::sync::Mutex;
use std::time::Duration;

use agent_kernel::protocol::InputItem;
use agent_kernel::transport::{
    classify_error, send_with_recovery, BadRequestKind, ErrorClass, KeyRing, ModelRequest,
    ModelResponse, ModelTransport, RecordingSleeper, RecoveryPolicy, SessionTransportState,
    ToolDeclaration, TransportError, TransportKind, Usage,
};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Reply {
    Ok,
    Empty,
    Fail(ErrorClass),
}

/// Replays a fixed list of replies (then succeeds) and records every request.
struct Scripted {
    replies: Mutex<Vec<Reply>>,
    seen: Mutex<Vec<(ModelRequest, String, TransportKind)>>,
}

impl Scripted {
    fn new(mut replies: Vec<Reply>) -> Self {
        replies.reverse();
        Self {
            replies: Mutex::new(replies),
            seen: Mutex::new(Vec::new()),
        }
    }

    fn seen(&self) -> Vec<(ModelRequest, String, TransportKind)> {
        self.seen.lock().unwrap().clone()
    }
}

impl ModelTransport for Scripted {
    fn send(
        &self,
        request: &ModelRequest,
        api_key: &str,
        via: TransportKind,
    ) -> Result<ModelResponse, TransportError> {
        self.seen
            .lock()
            .unwrap()
            .push((request.clone(), api_key.to_string(), via));
        let reply = self.replies.lock().unwrap().pop().unwrap_or(Reply::Ok);
        let output = match reply {
            Reply::Ok => vec![InputItem::assistant("out", "done")],
            Reply::Empty => Vec::new(),
            Reply::Fail(class) => {
                return Err(TransportError {
                    class,
                    raw_status: 400,
                    raw_body: String::new(),
                })
            }
        };
        Ok(ModelResponse {
            id: "resp".into(),
            output,
            usage: Usage::default(),
            transport: via,
            events: Vec::new(),
        })
    }
}

fn reply() -> impl Strategy<Value = Reply> {
    prop_oneof![
        Just(Reply::Ok),
        Just(Reply::Empty),
        Just(Reply::Fail(ErrorClass::BadRequest(
            BadRequestKind::UnsupportedPreviousResponseId
        ))),
        (0usize..10)
            .prop_map(|i| Reply::Fail(ErrorClass::BadRequest(BadRequestKind::InvalidInputItem(i)))),
        proptest::option::of(0usize..5).prop_map(|i| Reply::Fail(ErrorClass::BadRequest(
            BadRequestKind::UnsupportedToolType(i)
        ))),
        Just(Reply::Fail(ErrorClass::BadRequest(
            BadRequestKind::ContextOverflow
        ))),
        Just(Reply::Fail(ErrorClass::BadRequest(BadRequestKind::Other))),
        proptest::option::of(0.0f64..20.0).prop_map(|s| Reply::Fail(ErrorClass::RateLimited {
            retry_after_seconds: s
        })),
        Just(Reply::Fail(ErrorClass::QuotaExhausted)),
        Just(Reply::Fail(ErrorClass::Network)),
        Just(Reply::Fail(ErrorClass::Server)),
        Just(Reply::Fail(ErrorClass::EmptyResponse)),
    ]
}

fn request() -> impl Strategy<Value = ModelRequest> {
    (0usize..8, 0usize..5, any::<bool>()).prop_map(|(users, tools, prev)| {
        let mut input = vec![InputItem::system("sys", "rules")];
        input.extend((0..users).map(|i| InputItem::user(format!("u{i}"), format!("message {i}"))));
        let tools = (0..tools)
            .map(|i| ToolDeclaration {
                kind: Default::default(),
                name: format!("tool{i}"),
                description: String::new(),
                parameters: serde_json::json!({"type": "object"}),
            })
            .collect();
        let mut req = ModelRequest::new("m", input, tools);
        req.previous_response_id = prev.then(|| "prev".to_string());
        req
    })
}

fn size(req: &ModelRequest) -> (usize, usize, bool) {
    (
        req.input.len(),
        req.tools.len(),
        req.previous_response_id.is_some(),
    )
}

fn run(
    replies: Vec<Reply>,
    req: ModelRequest,
    keys: usize,
    policy: &RecoveryPolicy,
) -> (
    Scripted,
    RecordingSleeper,
    Result<agent_kernel::transport::RecoveryOutcome, agent_kernel::transport::RecoveryError>,
) {
    let transport = Scripted::new(replies);
    let sleeper = RecordingSleeper::default();
    let mut ring = KeyRing::new((0..keys).map(|k| format!("key{k}")).collect()).unwrap();
    let mut state = SessionTransportState::default();
    let out = send_with_recovery(&transport, req, &mut ring, policy, &mut state, &sleeper);
    (transport, sleeper, out)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn recovery_terminates_and_never_grows_the_request(
        replies in proptest::collection::vec(reply(), 0..12),
        req in request(),
        keys in 1usize..4,
        max_retries in 0u32..8,
    ) {
        let policy = RecoveryPolicy { max_retries, ..RecoveryPolicy::default() };
        let (transport, sleeper, out) = run(replies, req.clone(), keys, &policy);
        let seen = transport.seen();
        prop_assert!(!seen.is_empty());
        prop_assert!(seen.len() as u32 <= max_retries + 1);
        let trace_len = match &out {
            Ok(o) => o.trace.len(),
            Err(e) => e.trace.len(),
        };
        prop_assert_eq!(trace_len, seen.len());

        let mut prev = size(&req);
        let mut prev_bytes = serde_json::to_string(&req.to_wire()).unwrap().len();
        for (r, _, _) in &seen {
            let s = size(r);
            prop_assert!(s.0 <= prev.0 && s.1 <= prev.1 && (!s.2 || prev.2), "{:?} grew to {:?}", prev, s);
            let bytes = serde_json::to_string(&r.to_wire()).unwrap().len();
            prop_assert!(bytes <= prev_bytes);
            for tool in r.to_wire()["tools"].as_array().unwrap() {
                prop_assert_eq!(&tool["type"], "function");
            }
            prev = s;
            prev_bytes = bytes;
        }

        if let Ok(o) = &out {
            prop_assert!(!o.response.output.is_empty());
        }

        let waits = sleeper.waits();
        prop_assert!(waits.windows(2).all(|w| w[0] <= w[1]), "waits decreased: {:?}", waits);
    }

    #[test]
    fn empty_responses_are_never_success(n in 1usize..10, max_retries in 0u32..6) {
        let policy = RecoveryPolicy { max_retries, ..RecoveryPolicy::default() };
        let replies = vec![Reply::Empty; max_retries as usize + 1 + n];
        let (_, _, out) = run(replies, ModelRequest::new("m", vec![InputItem::user("u", "hi")], vec![]), 1, &policy);
        let err = out.unwrap_err();
        prop_assert_eq!(err.last.class, ErrorClass::EmptyResponse);
    }

    #[test]
    fn waits_honor_retry_after(secs in proptest::collection::vec(proptest::option::of(0.0f64..60.0), 1..5)) {
        let replies: Vec<Reply> = secs
            .iter()
            .map(|s| Reply::Fail(ErrorClass::RateLimited { retry_after_seconds: *s }))
            .collect();
        let policy = RecoveryPolicy { max_retries: 10, ..RecoveryPolicy::default() };
        let (_, sleeper, out) = run(replies, ModelRequest::new("m", vec![InputItem::user("u", "hi")], vec![]), 1, &policy);
        prop_assert!(out.is_ok());
        let waits = sleeper.waits();
        prop_assert_eq!(waits.len(), secs.len());
        for (wait, s) in waits.iter().zip(&secs) {
            if let Some(s) = s {
                prop_assert!(*wait >= Duration::from_secs_f64(*s), "{:?} < {}", wait, s);
            }
        }
        prop_assert!(waits.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn quota_exhaustion_visits_every_key(keys in 1usize..5) {
        let replies = vec![Reply::Fail(ErrorClass::QuotaExhausted); 2 * keys];
        let policy = RecoveryPolicy { max_retries: 20, ..RecoveryPolicy::default() };
        let (transport, _, out) = run(replies, ModelRequest::new("m", vec![InputItem::user("u", "hi")], vec![]), keys, &policy);
        prop_assert!(out.is_err(), "gave up after every key failed twice");
        let used: std::collections::BTreeSet<String> = transport.seen().into_iter().map(|(_, k, _)| k).collect();
        prop_assert_eq!(used.len(), keys);
    }

    #[test]
    fn classification_is_total(status in 0u16..600, body in ".*", retry in proptest::option::of(".*")) {
        let _ = classify_error(status, &body, retry.as_deref());
    }
}

#[test]
fn empty_channel_reply_falls_back_once() {
    let policy = RecoveryPolicy::default();
    let (transport, _, out) = run(
        vec![Reply::Empty, Reply::Ok],
        ModelRequest::new("m", vec![InputItem::user("u", "hi")], vec![]),
        1,
        &policy,
    );
    let out = out.unwrap();
    assert!(out.fell_back());
    let vias: Vec<TransportKind> = transport.seen().into_iter().map(|(_, _, v)| v).collect();
    assert_eq!(vias, [TransportKind::Channel, TransportKind::Sse]);
}

#[test]
fn backoff_after_a_long_retry_after_does_not_shrink() {
    let policy = RecoveryPolicy::default();
    let (_, sleeper, out) = run(
        vec![
            Reply::Fail(ErrorClass::RateLimited {
                retry_after_seconds: Some(20.0),
            }),
            Reply::Fail(ErrorClass::Network),
            Reply::Ok,
        ],
        ModelRequest::new("m", vec![InputItem::user("u", "hi")], vec![]),
        1,
        &policy,
    );
    assert!(out.is_ok());
    assert_eq!(
        sleeper.waits(),
        [Duration::from_secs(20), Duration::from_secs(20)]
    );
}
