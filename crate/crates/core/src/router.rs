//! The dual-strategy click router.
//!
//! One invocation handles one sample view:
//!
//! 1. the comprehender describes the operation (`Ans`);
//! 2. the grounder clicks twice, once driven by `Ans` (candidate 0, strategy
//!    M+G) and once by the raw question (candidate 1, strategy G);
//! 3. both normalized clicks are mapped onto the view's pixel lattice;
//! 4. the validator sees each click drawn on the screenshot and answers
//!    Yes/No, which becomes a confidence `s0`, `s1`;
//! 5. candidate 0 wins only if `s0 > s1` (comparative mode) or `s0 >= τ`
//!    (threshold mode). Ties go to strategy G.
//!
//! Failures degrade instead of aborting: without `Ans` only G runs, a failed
//! validation scores 0, and only losing both clicks is a [`RouterFailure`].

use std::fmt;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{self, BackendError, Dispatcher, ModelBackend, YesNo, YesNoSignal};
use crate::ingestion::SampleView;
use crate::model::{denormalize, NormPoint, PixelPoint};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    Comparative,
    Threshold {
        tau: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMode {
    #[default]
    LogitDiffSigmoid,
    ProbNormalize,
    TextHard,
}

/// Filled disc marking a candidate click. The inner core is solid; the
/// outer ring takes the complement of the background it covers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerStyle {
    pub min_radius: u32,
    /// Radius as a fraction of the shorter image side.
    pub radius_fraction: f64,
    pub inner: [u8; 3],
}

impl Default for MarkerStyle {
    fn default() -> Self {
        MarkerStyle {
            min_radius: 4,
            radius_fraction: 0.005,
            inner: [255, 0, 0],
        }
    }
}

impl MarkerStyle {
    pub fn radius(&self, width: u32, height: u32) -> u32 {
        let r = (self.radius_fraction * width.min(height) as f64).round() as u32;
        r.max(self.min_radius)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RouterConfig {
    #[serde(default)]
    pub selection: SelectionMode,
    #[serde(default)]
    pub marker: MarkerStyle,
    #[serde(default)]
    pub confidence: ConfidenceMode,
}

impl RouterConfig {
    pub fn validate(&self) -> Result<(), RouterError> {
        match self.selection {
            SelectionMode::Threshold { tau } if !(0.0..=1.0).contains(&tau) => {
                Err(RouterError::InvalidConfig(format!("threshold {tau} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "M+G")]
    MplusG,
    G,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::MplusG => "M+G",
            Strategy::G => "G",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degradation {
    /// No answer text; only strategy G ran.
    ComprehendFailed,
    /// Only one candidate click survived; it was taken without comparison.
    SingleCandidate,
}

/// Full trace of one router invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyOutcome {
    pub ans: Option<String>,
    pub p0_norm: Option<NormPoint>,
    pub p1_norm: Option<NormPoint>,
    pub p0_px: Option<PixelPoint>,
    pub p1_px: Option<PixelPoint>,
    pub s0: f64,
    pub s1: f64,
    pub signal0: Option<YesNoSignal>,
    pub signal1: Option<YesNoSignal>,
    pub chosen: Strategy,
    pub act: PixelPoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degraded: Option<Degradation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

/// Both groundings failed; there is nothing to click. Scored as a miss.
#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[error("router failure: {}", errors.join("; "))]
pub struct RouterFailure {
    pub ans: Option<String>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RouterError {
    #[error("confidence mode {mode:?} cannot read a {signal} signal")]
    ConfidenceModeError { mode: ConfidenceMode, signal: &'static str },
    #[error("invalid validator signal: {0}")]
    InvalidSignal(String),
    #[error("invalid router config: {0}")]
    InvalidConfig(String),
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Maps a validator signal to a confidence in `[0, 1]`.
pub fn confidence(sig: &YesNoSignal, mode: ConfidenceMode) -> Result<f64, RouterError> {
    if let YesNoSignal::Probabilities { yes, no } = *sig {
        let ok = (0.0..=1.0).contains(&yes) && (0.0..=1.0).contains(&no) && yes + no <= 1.0 + 1e-6;
        if !ok {
            return Err(RouterError::InvalidSignal(format!("probabilities ({yes}, {no})")));
        }
    }
    if let YesNoSignal::Logits { yes, no } = *sig {
        if !yes.is_finite() || !no.is_finite() {
            return Err(RouterError::InvalidSignal(format!("logits ({yes}, {no})")));
        }
    }
    let mismatch = |signal| RouterError::ConfidenceModeError { mode, signal };
    match (mode, *sig) {
        (ConfidenceMode::LogitDiffSigmoid, YesNoSignal::Logits { yes, no }) => Ok(sigmoid(yes - no)),
        (ConfidenceMode::LogitDiffSigmoid, YesNoSignal::Probabilities { .. }) => Err(mismatch("probabilities")),
        (ConfidenceMode::LogitDiffSigmoid, YesNoSignal::TextOnly { .. }) => Err(mismatch("text-only")),
        (ConfidenceMode::ProbNormalize, YesNoSignal::Probabilities { yes, no }) => {
            Ok(if yes + no == 0.0 { 0.5 } else { yes / (yes + no) })
        }
        (ConfidenceMode::ProbNormalize, YesNoSignal::Logits { .. }) => Err(mismatch("logits")),
        (ConfidenceMode::ProbNormalize, YesNoSignal::TextOnly { .. }) => Err(mismatch("text-only")),
        (ConfidenceMode::TextHard, YesNoSignal::TextOnly { token }) => Ok(match token {
            YesNo::Yes => 1.0,
            YesNo::No => 0.0,
        }),
        (ConfidenceMode::TextHard, YesNoSignal::Logits { yes, no } | YesNoSignal::Probabilities { yes, no }) => {
            Ok(if yes > no { 1.0 } else { 0.0 })
        }
    }
}

/// Strategy choice for a pair of confidences. Comparative mode takes M+G
/// only on a strict win; threshold mode ignores `s1`.
pub fn select(s0: f64, s1: f64, mode: SelectionMode) -> Strategy {
    let take_first = match mode {
        SelectionMode::Comparative => s0 > s1,
        SelectionMode::Threshold { tau } => s0 >= tau,
    };
    if take_first {
        Strategy::MplusG
    } else {
        Strategy::G
    }
}

/// Returns a copy of `image` with the marker drawn at `p`, clipped at the borders.
pub fn render_marker(image: &RgbImage, p: PixelPoint, style: &MarkerStyle) -> RgbImage {
    let (w, h) = image.dimensions();
    let r = style.radius(w, h) as i64;
    let inner_r = ((r as f64) * 0.6).ceil() as i64;
    let (cx, cy) = (p.x as i64, p.y as i64);
    let covered = || {
        (-r..=r).flat_map(move |dy| (-r..=r).map(move |dx| (dx, dy))).filter_map(move |(dx, dy)| {
            let (x, y) = (cx + dx, cy + dy);
            let inside = dx * dx + dy * dy <= r * r && x >= 0 && y >= 0 && x < w as i64 && y < h as i64;
            inside.then_some((x as u32, y as u32, dx * dx + dy * dy))
        })
    };

    let mut sum = [0u64; 3];
    let mut n = 0u64;
    for (x, y, _) in covered() {
        let px = image.get_pixel(x, y).0;
        for c in 0..3 {
            sum[c] += px[c] as u64;
        }
        n += 1;
    }
    let ring = Rgb(std::array::from_fn(|c| 255 - (sum[c] / n.max(1)) as u8));
    let core = Rgb(style.inner);

    let mut out = image.clone();
    for (x, y, d2) in covered() {
        out.put_pixel(x, y, if d2 <= inner_r * inner_r { core } else { ring });
    }
    out
}

/// Backends wired into one router.
pub struct EdAgent<'a> {
    pub comprehender: &'a dyn ModelBackend,
    pub grounder: &'a dyn ModelBackend,
    pub validator: &'a dyn ModelBackend,
    pub dispatcher: &'a Dispatcher,
    pub config: &'a RouterConfig,
}

impl EdAgent<'_> {
    async fn validate(&self, key: String, question: &str, raster: &RgbImage, p: PixelPoint) -> Result<YesNoSignal, BackendError> {
        let marked = Arc::new(render_marker(raster, p, &self.config.marker));
        backends::validate_click(self.dispatcher, self.validator, &key, question, marked).await
    }

    fn score(&self, sig: &Result<YesNoSignal, BackendError>, which: usize, errors: &mut Vec<String>) -> f64 {
        match sig {
            Ok(s) => confidence(s, self.config.confidence).unwrap_or_else(|e| {
                errors.push(format!("candidate {which}: {e}"));
                0.0
            }),
            Err(e) => {
                errors.push(format!("validate candidate {which}: {e}"));
                0.0
            }
        }
    }
}

/// Runs the router on one view. `raster` must be the view's pixels.
pub async fn run_edagent(
    agent: &EdAgent<'_>,
    view: &SampleView,
    question: &str,
    raster: Arc<RgbImage>,
) -> Result<StrategyOutcome, RouterFailure> {
    let prefix = format!("{}/{}", view.sample_id, view.label);
    let mut errors = Vec::new();

    let ans = match backends::comprehend(
        agent.dispatcher,
        agent.comprehender,
        &format!("{prefix}/comprehend"),
        question,
        raster.clone(),
    )
    .await
    {
        Ok(a) => Some(a),
        Err(e) => {
            errors.push(format!("comprehend: {e}"));
            None
        }
    };

    let ground_answer = async {
        match &ans {
            Some(a) => Some(
                backends::ground(agent.dispatcher, agent.grounder, &format!("{prefix}/ground/answer"), a, raster.clone())
                    .await,
            ),
            None => None,
        }
    };
    let question_key = format!("{prefix}/ground/question");
    let ground_question = backends::ground(agent.dispatcher, agent.grounder, &question_key, question, raster.clone());
    let (g0, g1) = tokio::join!(ground_answer, ground_question);

    let p0_norm = match g0 {
        Some(Ok(p)) => Some(p),
        Some(Err(e)) => {
            errors.push(format!("ground answer: {e}"));
            None
        }
        None => None,
    };
    let p1_norm = match g1 {
        Ok(p) => Some(p),
        Err(e) => {
            errors.push(format!("ground question: {e}"));
            None
        }
    };
    let p0_px = p0_norm.map(|p| denormalize(&p, &view.view_meta));
    let p1_px = p1_norm.map(|p| denormalize(&p, &view.view_meta));

    let v0 = async {
        match p0_px {
            Some(p) => Some(agent.validate(format!("{prefix}/validate/0"), question, &raster, p).await),
            None => None,
        }
    };
    let v1 = async {
        match p1_px {
            Some(p) => Some(agent.validate(format!("{prefix}/validate/1"), question, &raster, p).await),
            None => None,
        }
    };
    let (v0, v1) = tokio::join!(v0, v1);
    let s0 = v0.as_ref().map_or(0.0, |r| agent.score(r, 0, &mut errors));
    let s1 = v1.as_ref().map_or(0.0, |r| agent.score(r, 1, &mut errors));
    let signal0 = v0.and_then(Result::ok);
    let signal1 = v1.and_then(Result::ok);

    let (chosen, act, degraded) = match (p0_px, p1_px) {
        (Some(a), Some(b)) => {
            let chosen = select(s0, s1, agent.config.selection);
            let act = if chosen == Strategy::MplusG { a } else { b };
            (chosen, act, None)
        }
        (Some(a), None) => (Strategy::MplusG, a, Some(Degradation::SingleCandidate)),
        (None, Some(b)) => {
            let why = if ans.is_none() {
                Degradation::ComprehendFailed
            } else {
                Degradation::SingleCandidate
            };
            (Strategy::G, b, Some(why))
        }
        (None, None) => return Err(RouterFailure { ans, errors }),
    };

    Ok(StrategyOutcome {
        ans,
        p0_norm,
        p1_norm,
        p0_px,
        p1_px,
        s0,
        s1,
        signal0,
        signal1,
        chosen,
        act,
        degraded,
        errors,
    })
}

#[cfg(test)]
mod tests {
    use std::time::Duration;

    use proptest::prelude::{prop_assert, proptest};

    use super::*;
    use crate::backends::{BackendId, CoordinateSpace, RetryPolicy, Role, Script, ScriptedBackend, ScriptedReply};
    use crate::model::{BBox, ImageMeta, ViewLabel};

    #[test]
    fn confidence_examples() {
        let c = |s| confidence(&s, ConfidenceMode::LogitDiffSigmoid).unwrap();
        assert_eq!(c(YesNoSignal::Logits { yes: -1.3, no: -1.3 }), 0.5);
        assert!((c(YesNoSignal::Logits { yes: 2.0, no: 0.0 }) - 0.8808).abs() < 5e-5);
        let text_no = YesNoSignal::TextOnly { token: YesNo::No };
        assert_eq!(confidence(&text_no, ConfidenceMode::TextHard).unwrap(), 0.0);
        assert!(matches!(
            confidence(&text_no, ConfidenceMode::LogitDiffSigmoid),
            Err(RouterError::ConfidenceModeError { .. })
        ));
        let p = |yes, no| YesNoSignal::Probabilities { yes, no };
        assert!((confidence(&p(0.6, 0.2), ConfidenceMode::ProbNormalize).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(confidence(&p(0.0, 0.0), ConfidenceMode::ProbNormalize).unwrap(), 0.5);
        assert!(confidence(&p(0.9, 0.9), ConfidenceMode::ProbNormalize).is_err());
        assert_eq!(confidence(&p(0.6, 0.2), ConfidenceMode::TextHard).unwrap(), 1.0);
    }

    #[test]
    fn selection_rules() {
        assert_eq!(select(0.8, 0.6, SelectionMode::Comparative), Strategy::MplusG);
        assert_eq!(select(0.6, 0.6, SelectionMode::Comparative), Strategy::G);
        let th = SelectionMode::Threshold { tau: 0.7 };
        assert_eq!(select(0.65, 0.0, th), Strategy::G);
        assert_eq!(select(0.7, 0.99, th), Strategy::MplusG);
        assert!(RouterConfig {
            selection: SelectionMode::Threshold { tau: 1.5 },
            ..RouterConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn marker_rendering() {
        let img = RgbImage::from_pixel(40, 30, Rgb([10, 200, 30]));
        let style = MarkerStyle::default();
        let corner = render_marker(&img, PixelPoint::new(0, 0, ViewLabel::Large), &style);
        assert_eq!(corner.get_pixel(0, 0).0, style.inner);
        assert_eq!(img.get_pixel(0, 0).0, [10, 200, 30], "input untouched");

        let p = PixelPoint::new(20, 15, ViewLabel::Large);
        let a = render_marker(&img, p, &style);
        assert_eq!(a, render_marker(&img, p, &style));
        assert_eq!(a.get_pixel(20, 15).0, style.inner);
        assert_eq!(a.get_pixel(24, 15).0, [245, 55, 225], "ring is the background complement");
        assert_eq!(a.get_pixel(25, 15).0, [10, 200, 30], "outside radius 4");
        assert_eq!(style.radius(3840, 2160), 11);
        assert_eq!(style.radius(100, 100), 4);
    }

    fn backend(name: &str, roles: &[Role], entries: Vec<(String, ScriptedReply)>) -> ScriptedBackend {
        let space = roles.contains(&Role::Ground).then_some(CoordinateSpace::Normalized);
        let mut script = Script::default();
        script.entries.extend(entries);
        ScriptedBackend::new(BackendId::new(name, roles.iter().copied(), space).unwrap(), script)
    }

    fn view() -> SampleView {
        let meta = ImageMeta::new(100, 50, "x.png").unwrap();
        SampleView {
            sample_id: "s1".into(),
            label: ViewLabel::Large,
            view_meta: meta,
            view_bbox: BBox::new(10, 10, 20, 20).unwrap(),
            crop_rect: BBox::full(100, 50).unwrap(),
        }
    }

    fn logits(yes: f64) -> ScriptedReply {
        ScriptedReply::text("").with_logprobs(&[("Yes", yes), ("No", 0.0)])
    }

    type Entries = Vec<(String, ScriptedReply)>;

    fn entries(s0_logit: Option<f64>, s1_logit: f64) -> (Entries, Entries, Entries) {
        let comp = vec![("s1/Large/comprehend".to_string(), ScriptedReply::text("click the mesh button"))];
        let ground = vec![
            ("s1/Large/ground/answer".to_string(), ScriptedReply::text("(0.15, 0.3)")),
            ("s1/Large/ground/question".to_string(), ScriptedReply::text("(0.8, 0.8)")),
        ];
        let mut val = vec![("s1/Large/validate/1".to_string(), logits(s1_logit))];
        if let Some(l) = s0_logit {
            val.push(("s1/Large/validate/0".to_string(), logits(l)));
        }
        (comp, ground, val)
    }

    async fn run(
        comp: Vec<(String, ScriptedReply)>,
        ground: Vec<(String, ScriptedReply)>,
        val: Vec<(String, ScriptedReply)>,
        cfg: RouterConfig,
    ) -> Result<StrategyOutcome, RouterFailure> {
        let c = backend("mllm", &[Role::Comprehend], comp);
        let g = backend("gui", &[Role::Ground], ground);
        let v = backend("mllm", &[Role::Validate], val);
        let d = Dispatcher::new(RetryPolicy {
            base_backoff: Duration::from_millis(1),
            ..RetryPolicy::default()
        });
        let agent = EdAgent {
            comprehender: &c,
            grounder: &g,
            validator: &v,
            dispatcher: &d,
            config: &cfg,
        };
        run_edagent(&agent, &view(), "Create a mesh", Arc::new(RgbImage::new(100, 50))).await
    }

    fn logit_for(s: f64) -> f64 {
        (s / (1.0 - s)).ln()
    }

    #[tokio::test]
    async fn strict_win_picks_answer_driven_click() {
        let (c, g, v) = entries(Some(logit_for(0.8)), logit_for(0.6));
        let out = run(c, g, v, RouterConfig::default()).await.unwrap();
        assert_eq!(out.chosen, Strategy::MplusG);
        assert_eq!(out.act, out.p0_px.unwrap());
        assert_eq!(out.act, PixelPoint::new(15, 15, ViewLabel::Large));
        assert!((out.s0 - 0.8).abs() < 1e-12);
        assert_eq!(out.ans.as_deref(), Some("click the mesh button"));
    }

    #[tokio::test]
    async fn tie_picks_question_driven_click() {
        let (c, g, v) = entries(Some(logit_for(0.6)), logit_for(0.6));
        let out = run(c, g, v, RouterConfig::default()).await.unwrap();
        assert_eq!(out.chosen, Strategy::G);
        assert_eq!(out.act, out.p1_px.unwrap());
        assert_eq!(out.act, PixelPoint::new(80, 40, ViewLabel::Large));
    }

    #[tokio::test]
    async fn threshold_mode_ignores_s1() {
        let (c, g, v) = entries(Some(logit_for(0.65)), -10.0);
        let cfg = RouterConfig {
            selection: SelectionMode::Threshold { tau: 0.7 },
            ..RouterConfig::default()
        };
        let out = run(c, g, v, cfg).await.unwrap();
        assert_eq!(out.chosen, Strategy::G);
    }

    #[tokio::test]
    async fn comprehend_failure_degrades_to_g() {
        let (_, g, v) = entries(Some(5.0), -5.0);
        let out = run(vec![], g, v, RouterConfig::default()).await.unwrap();
        assert_eq!(out.chosen, Strategy::G);
        assert_eq!(out.s0, 0.0);
        assert_eq!(out.degraded, Some(Degradation::ComprehendFailed));
        assert!(out.p0_px.is_none());
        assert_eq!(out.act, out.p1_px.unwrap());
    }

    #[tokio::test]
    async fn validator_failure_zeroes_that_candidate() {
        let (c, g, v) = entries(None, logit_for(0.3));
        let out = run(c, g, v, RouterConfig::default()).await.unwrap();
        assert_eq!(out.s0, 0.0);
        assert_eq!(out.chosen, Strategy::G);
        assert!(out.errors.iter().any(|e| e.contains("validate candidate 0")));
    }

    #[tokio::test]
    async fn single_surviving_candidate_is_taken() {
        let (c, mut g, v) = entries(Some(-3.0), 3.0);
        g.retain(|(k, _)| k.ends_with("answer"));
        let out = run(c, g, v, RouterConfig::default()).await.unwrap();
        assert_eq!(out.chosen, Strategy::MplusG);
        assert_eq!(out.degraded, Some(Degradation::SingleCandidate));
    }

    #[tokio::test]
    async fn losing_both_clicks_is_router_failure() {
        let (c, _, v) = entries(Some(1.0), 1.0);
        let err = run(c, vec![], v, RouterConfig::default()).await.unwrap_err();
        assert_eq!(err.ans.as_deref(), Some("click the mesh button"));
        assert_eq!(err.errors.len(), 2);
    }

    proptest! {
        #[test]
        fn logit_confidence_monotone_in_yes(a in -50.0f64..50.0, b in -50.0f64..50.0, no in -50.0f64..50.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let f = |yes| confidence(&YesNoSignal::Logits { yes, no }, ConfidenceMode::LogitDiffSigmoid).unwrap();
            prop_assert!(f(lo) <= f(hi));
            prop_assert!((0.0..=1.0).contains(&f(lo)));
        }
    }
}
