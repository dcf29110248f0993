//! Recovery around a single model request: request rewrites for the four
//! 400 scenarios, backoff for rate limits and transient failures, key
//! rotation on quota exhaustion and the channel → event-stream fallback for
//! empty responses.

use std::collections::BTreeSet;
use std::sync::Mutex;
use std::time::Duration;

use serde::Serialize;

use super::{
    BadRequestKind, ErrorClass, KeyRing, ModelRequest, ModelResponse, ModelTransport,
    TransportError, TransportKind,
};
use crate::compaction::is_protected;
use crate::context::history_tokens;
use crate::protocol::ItemKind;

pub trait Sleeper: Send + Sync {
    fn sleep(&self, duration: Duration);
}

#[derive(Debug, Default)]
pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, duration: Duration) {
        std::thread::sleep(duration);
    }
}

#[derive(Debug, Default)]
pub struct NoSleep;

impl Sleeper for NoSleep {
    fn sleep(&self, _: Duration) {}
}

/// Records requested waits without sleeping.
#[derive(Debug, Default)]
pub struct RecordingSleeper {
    waits: Mutex<Vec<Duration>>,
}

impl RecordingSleeper {
    pub fn waits(&self) -> Vec<Duration> {
        self.waits.lock().unwrap().clone()
    }
}

impl Sleeper for RecordingSleeper {
    fn sleep(&self, duration: Duration) {
        self.waits.lock().unwrap().push(duration);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryPolicy {
    pub max_retries: u32,
    pub backoff_base: Duration,
    pub backoff_multiplier: f64,
    pub backoff_cap: Duration,
    /// Token budget the input must fit after a context overflow. `None`
    /// trims one item per overflow.
    pub context_limit_tokens: Option<u64>,
    pub preferred: TransportKind,
}

impl Default for RecoveryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 5,
            backoff_base: Duration::from_secs(1),
            backoff_multiplier: 2.0,
            backoff_cap: Duration::from_secs(30),
            context_limit_tokens: None,
            preferred: TransportKind::Channel,
        }
    }
}

impl RecoveryPolicy {
    /// Wait before the `n`th consecutive backoff (0-based).
    pub fn backoff(&self, n: u32) -> Duration {
        let secs = self.backoff_base.as_secs_f64() * self.backoff_multiplier.powi(n as i32);
        Duration::from_secs_f64(secs.min(self.backoff_cap.as_secs_f64()))
    }
}

/// What the session learned from earlier recoveries.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SessionTransportState {
    pub previous_response_id_unsupported: bool,
    pub removed_tools: BTreeSet<String>,
    pub fallbacks: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "action")]
pub enum RecoveryAction {
    Succeeded,
    StrippedPreviousResponseId,
    RemovedInputItem { index: usize, id: String },
    RemovedTool { index: usize, name: String },
    TrimmedItems { ids: Vec<String> },
    Backoff { wait_ms: u64 },
    RotatedKey { to: usize },
    FellBackToSse,
    GaveUp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttemptRecord {
    pub attempt: u32,
    pub transport: TransportKind,
    pub key_index: usize,
    pub error: Option<TransportError>,
    pub action: RecoveryAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryOutcome {
    pub response: ModelResponse,
    /// The request as finally sent, after any rewrites.
    pub request: ModelRequest,
    pub trace: Vec<AttemptRecord>,
}

impl RecoveryOutcome {
    pub fn fell_back(&self) -> bool {
        self.trace
            .iter()
            .any(|a| a.action == RecoveryAction::FellBackToSse)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("recovery exhausted after {} attempts: {last}", trace.len())]
pub struct RecoveryError {
    pub last: TransportError,
    pub trace: Vec<AttemptRecord>,
}

/// Removes the oldest unprotected item (plus results answering a removed
/// call). Returns the removed ids, empty when nothing is removable.
fn trim_oldest(request: &mut ModelRequest) -> Vec<String> {
    let input = &request.input;
    let Some(idx) = (0..input.len()).find(|&i| !is_protected(input, i)) else {
        return Vec::new();
    };
    let victim = request.input.remove(idx);
    let mut removed = vec![victim.id.clone()];
    if victim.kind == ItemKind::ToolCall {
        let call_id = victim.call_id.clone();
        request.input.retain(|item| {
            let answer = item.kind == ItemKind::ToolResult && item.call_id == call_id;
            if answer {
                removed.push(item.id.clone());
            }
            !answer
        });
    }
    removed
}

fn apply_session_state(request: &mut ModelRequest, state: &SessionTransportState) {
    if state.previous_response_id_unsupported {
        request.previous_response_id = None;
    }
    request
        .tools
        .retain(|t| !state.removed_tools.contains(&t.name));
}

pub fn send_with_recovery(
    transport: &dyn ModelTransport,
    request: ModelRequest,
    keys: &mut KeyRing,
    policy: &RecoveryPolicy,
    state: &mut SessionTransportState,
    sleeper: &dyn Sleeper,
) -> Result<RecoveryOutcome, RecoveryError> {
    let mut request = request;
    apply_session_state(&mut request, state);
    let mut trace = Vec::new();
    let mut via = policy.preferred;
    let mut fell_back = false;
    let mut backoffs = 0u32;
    let mut last_wait = Duration::ZERO;
    let mut consecutive_quota = 0usize;

    for attempt in 0..=policy.max_retries {
        let key_index = keys.active_index();
        let result = transport.send(&request, keys.active(), via);
        let err = match result {
            Ok(response) if !response.output.is_empty() => {
                trace.push(AttemptRecord {
                    attempt,
                    transport: response.transport,
                    key_index,
                    error: None,
                    action: RecoveryAction::Succeeded,
                });
                return Ok(RecoveryOutcome {
                    response,
                    request,
                    trace,
                });
            }
            Ok(_) => TransportError::empty(200),
            Err(e) => e,
        };
        if err.class != ErrorClass::QuotaExhausted {
            consecutive_quota = 0;
        }
        let attempted_via = via;
        let action = match &err.class {
            ErrorClass::BadRequest(BadRequestKind::UnsupportedPreviousResponseId) => {
                state.previous_response_id_unsupported = true;
                if request.previous_response_id.take().is_some() {
                    RecoveryAction::StrippedPreviousResponseId
                } else {
                    RecoveryAction::GaveUp
                }
            }
            ErrorClass::BadRequest(BadRequestKind::InvalidInputItem(index))
                if *index < request.input.len() =>
            {
                let removed = request.input.remove(*index);
                RecoveryAction::RemovedInputItem {
                    index: *index,
                    id: removed.id,
                }
            }
            ErrorClass::BadRequest(BadRequestKind::UnsupportedToolType(Some(index)))
                if *index < request.tools.len() =>
            {
                let removed = request.tools.remove(*index);
                state.removed_tools.insert(removed.name.clone());
                RecoveryAction::RemovedTool {
                    index: *index,
                    name: removed.name,
                }
            }
            ErrorClass::BadRequest(BadRequestKind::ContextOverflow) => {
                let mut ids = trim_oldest(&mut request);
                if let Some(limit) = policy.context_limit_tokens {
                    while !ids.is_empty() && history_tokens(&request.input) > limit {
                        let more = trim_oldest(&mut request);
                        if more.is_empty() {
                            break;
                        }
                        ids.extend(more);
                    }
                }
                if ids.is_empty() {
                    RecoveryAction::GaveUp
                } else {
                    RecoveryAction::TrimmedItems { ids }
                }
            }
            ErrorClass::BadRequest(_) => RecoveryAction::GaveUp,
            ErrorClass::QuotaExhausted => {
                consecutive_quota += 1;
                // Every key has failed twice in a row.
                if consecutive_quota >= 2 * keys.len() {
                    RecoveryAction::GaveUp
                } else {
                    RecoveryAction::RotatedKey { to: keys.rotate() }
                }
            }
            ErrorClass::EmptyResponse if via == TransportKind::Channel && !fell_back => {
                fell_back = true;
                via = TransportKind::Sse;
                state.fallbacks += 1;
                RecoveryAction::FellBackToSse
            }
            ErrorClass::RateLimited {
                retry_after_seconds,
            } => {
                let floor = Duration::from_secs_f64(retry_after_seconds.unwrap_or(0.0));
                let wait = policy.backoff(backoffs).max(floor).max(last_wait);
                backoffs += 1;
                last_wait = wait;
                RecoveryAction::Backoff {
                    wait_ms: wait.as_nanos().div_ceil(1_000_000) as u64,
                }
            }
            ErrorClass::Network | ErrorClass::Server | ErrorClass::EmptyResponse => {
                let wait = policy.backoff(backoffs).max(last_wait);
                backoffs += 1;
                last_wait = wait;
                RecoveryAction::Backoff {
                    wait_ms: wait.as_nanos().div_ceil(1_000_000) as u64,
                }
            }
        };
        if action == RecoveryAction::GaveUp || attempt == policy.max_retries {
            trace.push(AttemptRecord {
                attempt,
                transport: attempted_via,
                key_index,
                error: Some(err.clone()),
                action: RecoveryAction::GaveUp,
            });
            return Err(RecoveryError { last: err, trace });
        }
        if let RecoveryAction::Backoff { wait_ms } = action {
            sleeper.sleep(Duration::from_millis(wait_ms));
        }
        trace.push(AttemptRecord {
            attempt,
            transport: attempted_via,
            key_index,
            error: Some(err),
            action,
        });
    }
    unreachable!("the final attempt always returns")
}
