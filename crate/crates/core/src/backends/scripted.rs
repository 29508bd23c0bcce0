use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Mutex;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{BackendError, BackendId, ChatRequest, ChatResponse, ModelBackend, Orientation, TokenLogprob, TransportError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedFailure {
    /// Fails without retry, as a backend that is down.
    #[default]
    Unavailable,
    /// Fails with a retryable error on every attempt.
    Transient,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedReply {
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail: Option<ScriptedFailure>,
}

impl ScriptedReply {
    pub fn text(t: impl Into<String>) -> Self {
        ScriptedReply {
            text: t.into(),
            ..ScriptedReply::default()
        }
    }

    pub fn failure(kind: ScriptedFailure) -> Self {
        ScriptedReply {
            fail: Some(kind),
            ..ScriptedReply::default()
        }
    }

    pub fn with_logprobs(mut self, entries: &[(&str, f64)]) -> Self {
        self.logprobs = Some(entries.iter().map(|(t, l)| (t.to_string(), *l)).collect());
        self
    }

    fn respond(&self) -> Result<ChatResponse, TransportError> {
        match self.fail {
            Some(ScriptedFailure::Unavailable) => {
                return Err(TransportError::Permanent("scripted outage".into()))
            }
            Some(ScriptedFailure::Transient) => {
                return Err(TransportError::Retryable("scripted transient failure".into()))
            }
            None => {}
        }
        Ok(ChatResponse {
            text: self.text.clone(),
            top_logprobs: self.logprobs.as_ref().map(|m| {
                m.iter()
                    .map(|(token, logprob)| TokenLogprob {
                        token: token.clone(),
                        logprob: *logprob,
                    })
                    .collect()
            }),
            yes_no_probabilities: self.probabilities,
        })
    }
}

/// What a scripted backend does for keys without an entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScriptFallback {
    Fail {
        #[serde(default)]
        failure: ScriptedFailure,
    },
    Reply {
        reply: ScriptedReply,
    },
    /// Grades judge requests by word overlap between candidate and reference.
    OverlapJudge,
}

impl Default for ScriptFallback {
    fn default() -> Self {
        ScriptFallback::Fail {
            failure: ScriptedFailure::Unavailable,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub fallback: ScriptFallback,
    #[serde(default)]
    pub entries: BTreeMap<String, ScriptedReply>,
}

impl Script {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("cannot read script {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| BackendError::Config(format!("bad script {}: {e}", path.display())))
    }
}

/// Deterministic backend: replies are a pure function of the request key
/// (and, for [`ScriptFallback::OverlapJudge`], the judged texts).
pub struct ScriptedBackend {
    id: BackendId,
    script: Script,
    log: Mutex<Vec<String>>,
}

impl ScriptedBackend {
    pub fn new(id: BackendId, script: Script) -> Self {
        ScriptedBackend {
            id,
            script,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Keys of every request received so far, in arrival order.
    pub fn calls(&self) -> Vec<String> {
        self.log.lock().unwrap().clone()
    }
}

fn words(s: &str) -> BTreeSet<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn overlap_verdict(reference: &str, candidate: &str, orientation: Orientation) -> &'static str {
    let r = words(reference);
    let c = words(candidate);
    let shared = r.intersection(&c).count() as f64;
    let denom = match orientation {
        Orientation::Precision => c.len(),
        Orientation::Recall => r.len(),
    };
    let ratio = if denom == 0 { 0.0 } else { shared / denom as f64 };
    if ratio >= 1.0 {
        "FULL"
    } else if ratio >= 0.5 {
        "PARTIAL"
    } else {
        "NONE"
    }
}

#[async_trait]
impl ModelBackend for ScriptedBackend {
    fn id(&self) -> &BackendId {
        &self.id
    }

    async fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, TransportError> {
        self.log.lock().unwrap().push(req.key.clone());
        if let Some(reply) = self.script.entries.get(&req.key) {
            return reply.respond();
        }
        match &self.script.fallback {
            ScriptFallback::Fail { failure } => ScriptedReply::failure(*failure).respond(),
            ScriptFallback::Reply { reply } => reply.respond(),
            ScriptFallback::OverlapJudge => match &req.judge {
                Some(ctx) => Ok(ChatResponse {
                    text: overlap_verdict(&ctx.reference, &ctx.candidate, ctx.orientation).into(),
                    ..ChatResponse::default()
                }),
                None => Err(TransportError::Permanent(format!(
                    "no scripted reply for `{}`",
                    req.key
                ))),
            },
        }
    }
}
