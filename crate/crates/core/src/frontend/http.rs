//! OpenAI-compatible HTTP surface over a [`Frontend`].

use std::convert::Infallible;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::body::{Body, Bytes};
use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::{mpsc::UnboundedReceiver, oneshot};

use super::{FinishReason, Frontend, FrontendError, StreamEvent, SubmitRequest};
use crate::tokenizer::{IncrementalDecoder, Tokenizer};

type Reply = oneshot::Sender<Result<u64, FrontendError>>;

/// Feeds a single submission thread that coalesces requests arriving within
/// a short window into one batch.
#[derive(Clone)]
pub struct Submitter {
    tx: mpsc::Sender<(SubmitRequest, Reply)>,
}

impl Submitter {
    /// The thread exits once `stop` is set or every `Submitter` clone is
    /// dropped.
    pub fn spawn(frontend: Arc<Frontend>, window: Duration, stop: Arc<AtomicBool>) -> (Self, JoinHandle<()>) {
        let (tx, rx) = mpsc::channel::<(SubmitRequest, Reply)>();
        let handle = std::thread::Builder::new()
            .name("submit".into())
            .spawn(move || {
                while !stop.load(Ordering::Acquire) {
                    let first = match rx.recv_timeout(Duration::from_millis(20)) {
                        Ok(item) => item,
                        Err(mpsc::RecvTimeoutError::Timeout) => continue,
                        Err(mpsc::RecvTimeoutError::Disconnected) => break,
                    };
                    let deadline = Instant::now() + window;
                    let mut batch = vec![first];
                    while let Some(left) = deadline.checked_duration_since(Instant::now()) {
                        match rx.recv_timeout(left) {
                            Ok(item) => batch.push(item),
                            Err(_) => break,
                        }
                    }
                    let (reqs, replies): (Vec<_>, Vec<_>) = batch.into_iter().unzip();
                    for (result, reply) in frontend.submit_batch(reqs).into_iter().zip(replies) {
                        let _ = reply.send(result);
                    }
                }
            })
            .expect("spawn submit thread");
        (Self { tx }, handle)
    }

    pub async fn submit(&self, req: SubmitRequest) -> Result<u64, FrontendError> {
        let (reply, rx) = oneshot::channel();
        self.tx
            .send((req, reply))
            .map_err(|_| FrontendError::Rejected("submission thread stopped".into()))?;
        rx.await
            .map_err(|_| FrontendError::Rejected("submission thread stopped".into()))?
    }
}

#[derive(Clone)]
pub struct AppState {
    pub frontend: Arc<Frontend>,
    pub tokenizer: Arc<Tokenizer>,
    pub submitter: Submitter,
    pub model: String,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/completions", post(completions))
        .route("/v1/chat/completions", post(chat_completions))
        .route("/v1/models", get(models))
        .route("/health", get(|| async { "ok" }))
        .with_state(state)
}

#[derive(Debug, Deserialize)]
pub struct CompletionBody {
    pub prompt: String,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    #[serde(default)]
    pub stream: bool,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Deserialize)]
pub struct ChatBody {
    pub messages: Vec<ChatMessage>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    #[serde(default)]
    pub stream: bool,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Flavor {
    Text,
    Chat,
}

fn error_response(status: StatusCode, kind: &str, message: impl Into<String>) -> Response {
    let body = json!({"error": {"message": message.into(), "type": kind}});
    (status, Json(body)).into_response()
}

fn frontend_error(e: FrontendError, retry_after_s: u64) -> Response {
    match e {
        FrontendError::NoSlot => {
            let mut r = error_response(StatusCode::TOO_MANY_REQUESTS, "rate_limit_error", e.to_string());
            r.headers_mut()
                .insert(header::RETRY_AFTER, HeaderValue::from(retry_after_s));
            r
        }
        e if e.is_client_error() => error_response(StatusCode::BAD_REQUEST, "invalid_request_error", e.to_string()),
        e => error_response(StatusCode::INTERNAL_SERVER_ERROR, "server_error", e.to_string()),
    }
}

/// Cancels the request if dropped before the stream finished, which is how a
/// client disconnect shows up.
struct CancelGuard {
    frontend: Arc<Frontend>,
    id: u64,
    armed: bool,
}

impl Drop for CancelGuard {
    fn drop(&mut self) {
        if self.armed {
            let _ = self.frontend.cancel(self.id);
        }
    }
}

async fn models(State(st): State<AppState>) -> Json<Value> {
    Json(json!({"object": "list", "data": [{"id": st.model, "object": "model"}]}))
}

async fn completions(State(st): State<AppState>, body: Result<Json<CompletionBody>, JsonRejection>) -> Response {
    let body = match body {
        Ok(Json(b)) => b,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, "invalid_request_error", e.body_text()),
    };
    let model = body.model.unwrap_or_else(|| st.model.clone());
    run(st, Flavor::Text, body.prompt, body.max_tokens, body.stream, body.seed, model).await
}

async fn chat_completions(State(st): State<AppState>, body: Result<Json<ChatBody>, JsonRejection>) -> Response {
    let body = match body {
        Ok(Json(b)) => b,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, "invalid_request_error", e.body_text()),
    };
    if body.messages.is_empty() {
        return error_response(StatusCode::BAD_REQUEST, "invalid_request_error", "messages is empty");
    }
    let mut prompt = String::new();
    for m in &body.messages {
        prompt.push_str(&m.role);
        prompt.push_str(": ");
        prompt.push_str(&m.content);
        prompt.push('\n');
    }
    prompt.push_str("assistant: ");
    let model = body.model.unwrap_or_else(|| st.model.clone());
    run(st, Flavor::Chat, prompt, body.max_tokens, body.stream, body.seed, model).await
}

async fn run(
    st: AppState,
    flavor: Flavor,
    prompt: String,
    max_tokens: Option<u32>,
    stream: bool,
    seed: Option<u64>,
    model: String,
) -> Response {
    let fe = &st.frontend;
    let retry = fe.config().retry_after_s;
    let tokens = st.tokenizer.encode(prompt.as_bytes());
    let max_output = max_tokens.unwrap_or(fe.config().default_max_tokens);
    if let Err(e) = fe.validate(tokens.len(), max_output) {
        return frontend_error(e, retry);
    }
    let prompt_len = tokens.len();
    let (tx, rx) = tokio::sync::mpsc::unbounded_channel();
    let mut req = SubmitRequest::new(tokens, max_output, seed.unwrap_or(0), fe.transport().clock().now());
    req.sink = Some(tx);
    let id = match st.submitter.submit(req).await {
        Ok(id) => id,
        Err(e) => return frontend_error(e, retry),
    };
    let guard = CancelGuard {
        frontend: Arc::clone(fe),
        id,
        armed: true,
    };
    let created = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let ctx = Ctx {
        flavor,
        id,
        created,
        model,
    };
    if stream {
        sse_response(ctx, rx, Arc::clone(&st.tokenizer), guard)
    } else {
        collect_response(ctx, rx, &st.tokenizer, guard, prompt_len).await
    }
}

struct Ctx {
    flavor: Flavor,
    id: u64,
    created: u64,
    model: String,
}

impl Ctx {
    fn chunk(&self, text: &str, finish: Option<FinishReason>) -> Value {
        let fr = finish.map(FinishReason::as_str);
        match self.flavor {
            Flavor::Text => json!({
                "id": format!("cmpl-{}", self.id),
                "object": "text_completion",
                "created": self.created,
                "model": self.model,
                "choices": [{"index": 0, "text": text, "logprobs": null, "finish_reason": fr}],
            }),
            Flavor::Chat => json!({
                "id": format!("chatcmpl-{}", self.id),
                "object": "chat.completion.chunk",
                "created": self.created,
                "model": self.model,
                "choices": [{"index": 0, "delta": {"content": text}, "finish_reason": fr}],
            }),
        }
    }

    fn full(&self, text: &str, finish: FinishReason, prompt_tokens: usize, completion_tokens: usize) -> Value {
        let usage = json!({
            "prompt_tokens": prompt_tokens,
            "completion_tokens": completion_tokens,
            "total_tokens": prompt_tokens + completion_tokens,
        });
        match self.flavor {
            Flavor::Text => json!({
                "id": format!("cmpl-{}", self.id),
                "object": "text_completion",
                "created": self.created,
                "model": self.model,
                "choices": [{"index": 0, "text": text, "logprobs": null, "finish_reason": finish.as_str()}],
                "usage": usage,
            }),
            Flavor::Chat => json!({
                "id": format!("chatcmpl-{}", self.id),
                "object": "chat.completion",
                "created": self.created,
                "model": self.model,
                "choices": [{
                    "index": 0,
                    "message": {"role": "assistant", "content": text},
                    "finish_reason": finish.as_str(),
                }],
                "usage": usage,
            }),
        }
    }
}

fn token_text(dec: &mut IncrementalDecoder, tok: &Tokenizer, id: u32) -> String {
    dec.push(tok, &[id]).unwrap_or_else(|_| char::REPLACEMENT_CHARACTER.to_string())
}

struct SseState {
    ctx: Ctx,
    rx: UnboundedReceiver<StreamEvent>,
    tok: Arc<Tokenizer>,
    dec: IncrementalDecoder,
    guard: CancelGuard,
    finished: bool,
}

fn sse_response(ctx: Ctx, rx: UnboundedReceiver<StreamEvent>, tok: Arc<Tokenizer>, guard: CancelGuard) -> Response {
    let state = SseState {
        ctx,
        rx,
        tok,
        dec: IncrementalDecoder::new(),
        guard,
        finished: false,
    };
    let stream = futures::stream::unfold(state, |mut s| async move {
        if s.finished {
            return None;
        }
        let mut out = String::new();
        match s.rx.recv().await {
            Some(StreamEvent::Tokens { ids, finish }) => {
                let n = ids.len();
                for (i, id) in ids.into_iter().enumerate() {
                    let mut text = token_text(&mut s.dec, &s.tok, id);
                    let last = i + 1 == n;
                    if last && finish.is_some() {
                        text.push_str(&s.dec.finish());
                    }
                    let chunk = s.ctx.chunk(&text, if last { finish } else { None });
                    out.push_str(&format!("data: {chunk}\n\n"));
                }
            }
            Some(StreamEvent::Done { .. }) => {
                s.guard.armed = false;
                s.finished = true;
                out.push_str("data: [DONE]\n\n");
            }
            Some(StreamEvent::Failed { message }) => {
                s.guard.armed = false;
                s.finished = true;
                let err = json!({"error": {"message": message, "type": "server_error"}});
                out.push_str(&format!("data: {err}\n\ndata: [DONE]\n\n"));
            }
            None => return None,
        }
        Some((Ok::<_, Infallible>(Bytes::from(out)), s))
    });
    Response::builder()
        .status(StatusCode::OK)
        .header(header::CONTENT_TYPE, "text/event-stream")
        .header(header::CACHE_CONTROL, "no-cache")
        .body(Body::from_stream(stream))
        .unwrap()
}

async fn collect_response(
    ctx: Ctx,
    mut rx: UnboundedReceiver<StreamEvent>,
    tok: &Tokenizer,
    mut guard: CancelGuard,
    prompt_len: usize,
) -> Response {
    let mut ids = Vec::new();
    loop {
        match rx.recv().await {
            Some(StreamEvent::Tokens { ids: more, .. }) => ids.extend(more),
            Some(StreamEvent::Done { reason }) => {
                guard.armed = false;
                let mut dec = IncrementalDecoder::new();
                let mut text = String::new();
                for &id in &ids {
                    text.push_str(&token_text(&mut dec, tok, id));
                }
                text.push_str(&dec.finish());
                return Json(ctx.full(&text, reason, prompt_len, ids.len())).into_response();
            }
            Some(StreamEvent::Failed { message }) => {
                guard.armed = false;
                return error_response(StatusCode::INTERNAL_SERVER_ERROR, "server_error", message);
            }
            None => {
                return error_response(StatusCode::INTERNAL_SERVER_ERROR, "server_error", "stream closed");
            }
        }
    }
}
