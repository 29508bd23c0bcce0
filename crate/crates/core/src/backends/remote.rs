use std::io::Cursor;
use std::time::Duration;

use async_trait::async_trait;
use base64::Engine;
use image::{ImageFormat, RgbImage};
use serde_json::{json, Value};

use super::{BackendError, BackendId, ChatRequest, ChatResponse, ModelBackend, TokenLogprob, TransportError};

const TOP_LOGPROBS: u32 = 5;

/// Environment variable holding the bearer token for backend `name`:
/// `EDABENCH_TOKEN_<NAME>` with non-alphanumerics mapped to `_`.
pub fn token_env_var(name: &str) -> String {
    let suffix: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
        .collect();
    format!("EDABENCH_TOKEN_{suffix}")
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    pub token: Option<String>,
    pub timeout: Duration,
}

/// Chat-completions client: JSON POST with interleaved text and base64 PNG
/// image parts, bearer auth, optional token log-probabilities.
pub struct RemoteBackend {
    id: BackendId,
    cfg: RemoteConfig,
    client: reqwest::Client,
}

impl RemoteBackend {
    pub fn new(id: BackendId, cfg: RemoteConfig) -> Result<Self, BackendError> {
        let client = reqwest::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| BackendError::Config(format!("http client: {e}")))?;
        Ok(RemoteBackend { id, cfg, client })
    }

    pub fn request_body(&self, req: &ChatRequest) -> Value {
        let mut content = vec![json!({"type": "text", "text": req.prompt})];
        if let Some(img) = &req.image {
            content.push(json!({
                "type": "image_url",
                "image_url": {"url": format!("data:image/png;base64,{}", encode_png(img))},
            }));
        }
        let mut body = json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": content}],
        });
        if let Some(t) = req.temperature {
            body["temperature"] = json!(t);
        }
        if req.logprobs {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(TOP_LOGPROBS);
        }
        body
    }
}

fn encode_png(img: &RgbImage) -> String {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).expect("in-memory PNG encoding");
    base64::engine::general_purpose::STANDARD.encode(buf.into_inner())
}

/// Pulls the reply text and first-position top log-probabilities out of a
/// chat-completions response body.
pub(crate) fn parse_response(body: &Value) -> Result<ChatResponse, TransportError> {
    let choice = body
        .pointer("/choices/0")
        .ok_or_else(|| TransportError::Permanent("response has no choices".into()))?;
    let text = match choice.pointer("/message/content") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Array(parts)) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        _ => String::new(),
    };
    let top_logprobs = choice.pointer("/logprobs/content/0").map(|first| {
        let mut out: Vec<TokenLogprob> = first
            .get("top_logprobs")
            .and_then(Value::as_array)
            .into_iter()
            .flatten()
            .filter_map(token_logprob)
            .collect();
        if out.is_empty() {
            out.extend(token_logprob(first));
        }
        out
    });
    Ok(ChatResponse {
        text,
        top_logprobs,
        yes_no_probabilities: None,
    })
}

fn token_logprob(v: &Value) -> Option<TokenLogprob> {
    Some(TokenLogprob {
        token: v.get("token")?.as_str()?.to_string(),
        logprob: v.get("logprob")?.as_f64()?,
    })
}

#[async_trait]
impl ModelBackend for RemoteBackend {
    fn id(&self) -> &BackendId {
        &self.id
    }

    async fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, TransportError> {
        let mut http = self.client.post(&self.cfg.endpoint).json(&self.request_body(req));
        if let Some(token) = &self.cfg.token {
            http = http.bearer_auth(token);
        }
        let resp = http
            .send()
            .await
            .map_err(|e| TransportError::Retryable(format!("request failed: {e}")))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(TransportError::Retryable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let detail = resp.text().await.unwrap_or_default();
            return Err(TransportError::Permanent(format!("HTTP {status}: {detail}")));
        }
        let body: Value = resp
            .json()
            .await
            .map_err(|e| TransportError::Retryable(format!("bad response body: {e}")))?;
        parse_response(&body)
    }
}
