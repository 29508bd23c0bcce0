//! Model backends for the four roles: comprehender, grounder, validator and judge.
//!
//! Every backend speaks one primitive, [`ModelBackend::complete`]: a single
//! chat turn with an optional screenshot. The role operations in this module
//! build the prompt, send it through a [`Dispatcher`] and parse the reply.

mod dispatch;
pub mod parse;
mod prompts;
mod remote;
mod scripted;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::NormPoint;

pub use dispatch::Dispatcher;
pub use prompts::{comprehend_prompt, ground_prompt, judge_prompt, validator_prompt};
pub use remote::{token_env_var, RemoteBackend, RemoteConfig};
pub use scripted::{ScriptFallback, ScriptedBackend, ScriptedFailure, ScriptedReply, Script};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Comprehend,
    Ground,
    Validate,
    Judge,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Comprehend => "comprehend",
            Role::Ground => "ground",
            Role::Validate => "validate",
            Role::Judge => "judge",
        })
    }
}

/// How a grounder reports click positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CoordinateSpace {
    #[default]
    Normalized,
    AbsolutePixels,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackendId {
    pub name: String,
    pub roles: BTreeSet<Role>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coordinate_space: Option<CoordinateSpace>,
}

impl BackendId {
    pub fn new(
        name: impl Into<String>,
        roles: impl IntoIterator<Item = Role>,
        coordinate_space: Option<CoordinateSpace>,
    ) -> Result<Self, BackendError> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(BackendError::Config("backend name is empty".into()));
        }
        let roles: BTreeSet<Role> = roles.into_iter().collect();
        let coordinate_space = match (roles.contains(&Role::Ground), coordinate_space) {
            (true, None) => {
                return Err(BackendError::Config(format!(
                    "grounder `{name}` must declare a coordinate space"
                )))
            }
            (true, cs) => cs,
            (false, _) => None,
        };
        Ok(BackendId {
            name,
            roles,
            coordinate_space,
        })
    }

    pub fn has(&self, role: Role) -> bool {
        self.roles.contains(&role)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum YesNo {
    Yes,
    No,
}

/// Strongest validator readout the endpoint could provide.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum YesNoSignal {
    Logits { yes: f64, no: f64 },
    Probabilities { yes: f64, no: f64 },
    TextOnly { token: YesNo },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Precision,
    Recall,
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Orientation::Precision => "precision",
            Orientation::Recall => "recall",
        })
    }
}

/// Three-level compliance verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    None,
    Partial,
    Full,
}

impl Verdict {
    pub fn value(self) -> f64 {
        match self {
            Verdict::None => 0.0,
            Verdict::Partial => 0.5,
            Verdict::Full => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(with = "millis")]
    pub base_backoff: Duration,
    pub backoff_factor: f64,
    /// Requests per second allowed against one backend; `None` is uncapped.
    #[serde(default)]
    pub per_backend_rate: Option<f64>,
    pub max_in_flight: usize,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_backoff: Duration::from_millis(500),
            backoff_factor: 2.0,
            per_backend_rate: None,
            max_in_flight: 8,
        }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<(), BackendError> {
        let ok = self.max_attempts >= 1
            && self.max_in_flight >= 1
            && self.backoff_factor >= 1.0
            && self.per_backend_rate.is_none_or(|r| r > 0.0 && r.is_finite());
        if ok {
            Ok(())
        } else {
            Err(BackendError::Config(format!("invalid retry policy: {self:?}")))
        }
    }
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

/// Structured fields of a judge request, carried alongside the prompt so
/// scripted judges can score without parsing text.
#[derive(Debug, Clone, PartialEq)]
pub struct JudgeContext {
    pub reference: String,
    pub candidate: String,
    pub orientation: Orientation,
}

/// One chat turn.
#[derive(Debug, Clone)]
pub struct ChatRequest {
    /// Stable identifier of the request, e.g. `s03/Large/ground/question`.
    pub key: String,
    pub role: Role,
    pub prompt: String,
    pub image: Option<Arc<RgbImage>>,
    pub temperature: Option<f32>,
    pub logprobs: bool,
    pub judge: Option<JudgeContext>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    /// Top log-probabilities at the first generated position.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<Vec<TokenLogprob>>,
    /// Explicit (yes, no) probabilities, for endpoints that return them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yes_no_probabilities: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransportError {
    #[error("transient failure: {0}")]
    Retryable(String),
    #[error("permanent failure: {0}")]
    Permanent(String),
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum BackendError {
    #[error("backend `{backend}` unavailable after {attempts} attempt(s): {reason}")]
    BackendUnavailable {
        backend: String,
        attempts: u32,
        reason: String,
    },
    #[error("backend `{backend}` returned an empty answer")]
    EmptyAnswer { backend: String },
    #[error("cannot parse a click point from `{raw}`")]
    GroundingParseError { raw: String },
    #[error("validator reply contains neither Yes nor No: `{raw}`")]
    ValidatorParseError { raw: String },
    #[error("cannot parse judge verdict from `{raw}`")]
    JudgeParseError { raw: String },
    #[error("backend `{backend}` does not have the {role} role")]
    WrongRole { backend: String, role: Role },
    #[error("backend configuration: {0}")]
    Config(String),
}

#[async_trait]
pub trait ModelBackend: Send + Sync {
    fn id(&self) -> &BackendId;

    async fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, TransportError>;
}

pub type SharedBackend = Arc<dyn ModelBackend>;

fn require(backend: &dyn ModelBackend, role: Role) -> Result<(), BackendError> {
    if backend.id().has(role) {
        Ok(())
    } else {
        Err(BackendError::WrongRole {
            backend: backend.id().name.clone(),
            role,
        })
    }
}

/// Asks the comprehender for a short operational description of how to
/// solve `question` on the screenshot.
pub async fn comprehend(
    dispatcher: &Dispatcher,
    backend: &dyn ModelBackend,
    key: &str,
    question: &str,
    image: Arc<RgbImage>,
) -> Result<String, BackendError> {
    require(backend, Role::Comprehend)?;
    let req = ChatRequest {
        key: key.to_string(),
        role: Role::Comprehend,
        prompt: comprehend_prompt(question),
        image: Some(image),
        temperature: None,
        logprobs: false,
        judge: None,
    };
    let text = dispatcher.call(backend, &req).await?.text.trim().to_string();
    if text.is_empty() {
        return Err(BackendError::EmptyAnswer {
            backend: backend.id().name.clone(),
        });
    }
    Ok(text)
}

/// Asks the grounder where to click for `instruction`. Pixel answers are
/// divided by the raster size; the result is always inside `[0,1]²`.
pub async fn ground(
    dispatcher: &Dispatcher,
    backend: &dyn ModelBackend,
    key: &str,
    instruction: &str,
    image: Arc<RgbImage>,
) -> Result<NormPoint, BackendError> {
    require(backend, Role::Ground)?;
    let space = backend.id().coordinate_space.unwrap_or_default();
    let (w, h) = image.dimensions();
    let req = ChatRequest {
        key: key.to_string(),
        role: Role::Ground,
        prompt: ground_prompt(instruction, space, w, h),
        image: Some(image),
        temperature: None,
        logprobs: false,
        judge: None,
    };
    let resp = dispatcher.call(backend, &req).await?;
    parse::parse_grounding(&resp.text, space, w, h)
}

/// Shows the validator a screenshot with the candidate click marked and
/// reads back its Yes/No judgement.
pub async fn validate_click(
    dispatcher: &Dispatcher,
    backend: &dyn ModelBackend,
    key: &str,
    question: &str,
    marked_image: Arc<RgbImage>,
) -> Result<YesNoSignal, BackendError> {
    require(backend, Role::Validate)?;
    let req = ChatRequest {
        key: key.to_string(),
        role: Role::Validate,
        prompt: validator_prompt(question),
        image: Some(marked_image),
        temperature: Some(0.0),
        logprobs: true,
        judge: None,
    };
    let resp = dispatcher.call(backend, &req).await?;
    parse::parse_yes_no(&resp)
}

/// One judge verdict for `candidate` against the reference answer.
pub async fn judge(
    dispatcher: &Dispatcher,
    backend: &dyn ModelBackend,
    key: &str,
    question: &str,
    gt_answer: &str,
    candidate: &str,
    orientation: Orientation,
) -> Result<Verdict, BackendError> {
    require(backend, Role::Judge)?;
    let req = ChatRequest {
        key: key.to_string(),
        role: Role::Judge,
        prompt: judge_prompt(question, gt_answer, candidate, orientation),
        image: None,
        temperature: Some(0.0),
        logprobs: false,
        judge: Some(JudgeContext {
            reference: gt_answer.to_string(),
            candidate: candidate.to_string(),
            orientation,
        }),
    };
    let resp = dispatcher.call(backend, &req).await?;
    parse::parse_verdict(&resp.text)
}

impl FromStr for Role {
    type Err = BackendError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "comprehend" => Ok(Role::Comprehend),
            "ground" => Ok(Role::Ground),
            "validate" => Ok(Role::Validate),
            "judge" => Ok(Role::Judge),
            other => Err(BackendError::Config(format!("unknown role `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(w: u32, h: u32) -> Arc<RgbImage> {
        Arc::new(RgbImage::new(w, h))
    }

    fn scripted(name: &str, roles: &[Role], space: Option<CoordinateSpace>, entries: &[(&str, ScriptedReply)]) -> ScriptedBackend {
        let id = BackendId::new(name, roles.iter().copied(), space).unwrap();
        let mut script = Script::default();
        for (k, r) in entries {
            script.entries.insert(k.to_string(), r.clone());
        }
        ScriptedBackend::new(id, script)
    }

    fn dispatcher() -> Dispatcher {
        Dispatcher::new(RetryPolicy {
            base_backoff: Duration::from_millis(1),
            ..RetryPolicy::default()
        })
    }

    #[test]
    fn grounders_must_declare_coordinate_space() {
        assert!(BackendId::new("g", [Role::Ground], None).is_err());
        assert!(BackendId::new("", [Role::Judge], None).is_err());
        let id = BackendId::new("m", [Role::Comprehend], Some(CoordinateSpace::AbsolutePixels)).unwrap();
        assert_eq!(id.coordinate_space, None);
    }

    #[tokio::test]
    async fn comprehend_echoes_fixture() {
        let b = scripted(
            "qwen",
            &[Role::Comprehend],
            None,
            &[("sample-7/Large/comprehend", ScriptedReply::text("Open boundary condition settings dialog"))],
        );
        let ans = comprehend(&dispatcher(), &b, "sample-7/Large/comprehend", "q", img(4, 4)).await.unwrap();
        assert_eq!(ans, "Open boundary condition settings dialog");
    }

    #[tokio::test]
    async fn comprehend_rejects_empty_answer_and_wrong_role() {
        let b = scripted("qwen", &[Role::Comprehend], None, &[("k", ScriptedReply::text("   "))]);
        assert!(matches!(
            comprehend(&dispatcher(), &b, "k", "q", img(4, 4)).await,
            Err(BackendError::EmptyAnswer { .. })
        ));
        assert!(matches!(
            ground(&dispatcher(), &b, "k", "q", img(4, 4)).await,
            Err(BackendError::WrongRole { role: Role::Ground, .. })
        ));
    }

    #[tokio::test]
    async fn ground_divides_absolute_pixels() {
        let b = scripted(
            "agent",
            &[Role::Ground],
            Some(CoordinateSpace::AbsolutePixels),
            &[("k", ScriptedReply::text("click(960, 540)"))],
        );
        let p = ground(&dispatcher(), &b, "k", "q", img(3840, 2160)).await.unwrap();
        assert_eq!((p.x(), p.y()), (0.25, 0.25));
    }

    #[tokio::test]
    async fn validate_prefers_logits() {
        let b = scripted(
            "qwen",
            &[Role::Validate],
            None,
            &[("k", ScriptedReply::text("Yes").with_logprobs(&[("Yes", -0.1), ("No", -2.4)]))],
        );
        let sig = validate_click(&dispatcher(), &b, "k", "q", img(2, 2)).await.unwrap();
        assert_eq!(sig, YesNoSignal::Logits { yes: -0.1, no: -2.4 });
    }

    #[tokio::test]
    async fn judge_self_match_scores_full() {
        let id = BackendId::new("judge", [Role::Judge], None).unwrap();
        let b = ScriptedBackend::new(
            id,
            Script {
                fallback: ScriptFallback::OverlapJudge,
                ..Script::default()
            },
        );
        for o in [Orientation::Precision, Orientation::Recall] {
            let v = judge(&dispatcher(), &b, "k", "q", "Open the mesh menu", "Open the mesh menu", o)
                .await
                .unwrap();
            assert_eq!(v, Verdict::Full);
        }
    }

    #[tokio::test]
    async fn judge_parses_partial_and_rejects_noise() {
        let b = scripted(
            "judge",
            &[Role::Judge],
            None,
            &[("a", ScriptedReply::text("PARTIAL")), ("b", ScriptedReply::text("maybe"))],
        );
        let d = dispatcher();
        let v = judge(&d, &b, "a", "q", "r", "c", Orientation::Recall).await.unwrap();
        assert_eq!(v.value(), 0.5);
        assert!(matches!(
            judge(&d, &b, "b", "q", "r", "c", Orientation::Recall).await,
            Err(BackendError::JudgeParseError { .. })
        ));
    }
}
