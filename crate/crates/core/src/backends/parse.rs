//! Parsers for free-form model output.

use std::sync::LazyLock;

use regex::Regex;

use super::{BackendError, ChatResponse, CoordinateSpace, Verdict, YesNo, YesNoSignal};
use crate::model::NormPoint;

const NUM: &str = r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)";

// Ordered from most to least structured; the first that matches wins.
static GROUNDING_CASCADE: LazyLock<[Regex; 4]> = LazyLock::new(|| {
    [
        Regex::new(&format!(
            r#"(?i)["']?x["']?\s*[:=]\s*({NUM})\s*,\s*["']?y["']?\s*[:=]\s*({NUM})"#
        ))
        .unwrap(),
        Regex::new(&format!(r"\(\s*({NUM})\s*,\s*({NUM})\s*\)")).unwrap(),
        Regex::new(&format!(
            r"(?i)click\s*\(\s*(?:x\s*=\s*)?({NUM})\s*,\s*(?:y\s*=\s*)?({NUM})"
        ))
        .unwrap(),
        Regex::new(&format!(r"({NUM})[^\d.+-]+?({NUM})")).unwrap(),
    ]
});

static VERDICT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(full|partial|none)\b|(?:^|[^\d.])(1(?:\.0+)?|0?\.50*|0(?:\.0+)?)(?:[^\d.]|$)").unwrap()
});

static YES_NO: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(yes|no)\b").unwrap());

/// Extracts a click location, dividing by `(width, height)` for pixel-space
/// grounders and clamping into `[0,1]²`.
pub fn parse_grounding(
    raw: &str,
    space: CoordinateSpace,
    width: u32,
    height: u32,
) -> Result<NormPoint, BackendError> {
    let fail = || BackendError::GroundingParseError { raw: raw.to_string() };
    let (x, y) = GROUNDING_CASCADE
        .iter()
        .find_map(|re| {
            let c = re.captures(raw)?;
            Some((c[1].parse::<f64>().ok()?, c[2].parse::<f64>().ok()?))
        })
        .ok_or_else(fail)?;
    let (x, y) = match space {
        CoordinateSpace::Normalized => (x, y),
        CoordinateSpace::AbsolutePixels => (x / width as f64, y / height as f64),
    };
    NormPoint::new(x, y).map_err(|_| fail())
}

pub fn parse_verdict(raw: &str) -> Result<Verdict, BackendError> {
    let c = VERDICT
        .captures(raw)
        .ok_or_else(|| BackendError::JudgeParseError { raw: raw.to_string() })?;
    if let Some(word) = c.get(1) {
        return Ok(match word.as_str().to_ascii_lowercase().as_str() {
            "full" => Verdict::Full,
            "partial" => Verdict::Partial,
            _ => Verdict::None,
        });
    }
    let v: f64 = c[2].parse().expect("regex admits only numbers");
    Ok(if v == 1.0 {
        Verdict::Full
    } else if v == 0.5 {
        Verdict::Partial
    } else {
        Verdict::None
    })
}

fn classify(token: &str) -> Option<YesNo> {
    let t = token.trim().trim_matches(|c: char| !c.is_alphanumeric());
    if t.eq_ignore_ascii_case("yes") {
        Some(YesNo::Yes)
    } else if t.eq_ignore_ascii_case("no") {
        Some(YesNo::No)
    } else {
        None
    }
}

/// Picks the strongest signal available in a validator reply: token
/// log-probabilities, then explicit probabilities, then the reply text.
///
/// Log-probability differences equal logit differences because both tokens
/// share the softmax normalizer.
pub fn parse_yes_no(resp: &ChatResponse) -> Result<YesNoSignal, BackendError> {
    if let Some(top) = resp.top_logprobs.as_deref().filter(|t| !t.is_empty()) {
        let best = |want: YesNo| {
            top.iter()
                .filter(|t| classify(&t.token) == Some(want))
                .map(|t| t.logprob)
                .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
        };
        let (yes, no) = (best(YesNo::Yes), best(YesNo::No));
        if yes.is_some() || no.is_some() {
            // A token missing from the top-k can hold at most the leftover mass.
            let listed: f64 = top.iter().map(|t| t.logprob.exp()).sum();
            let leftover = (1.0 - listed).max(1e-12).ln();
            return Ok(YesNoSignal::Logits {
                yes: yes.unwrap_or(leftover),
                no: no.unwrap_or(leftover),
            });
        }
    }
    if let Some((yes, no)) = resp.yes_no_probabilities {
        return Ok(YesNoSignal::Probabilities { yes, no });
    }
    YES_NO
        .captures(&resp.text)
        .and_then(|c| classify(&c[1]))
        .map(|token| YesNoSignal::TextOnly { token })
        .ok_or_else(|| BackendError::ValidatorParseError {
            raw: resp.text.clone(),
        })
}
