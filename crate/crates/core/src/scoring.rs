//! Answer and Action scores, and their aggregation by tag.

use std::collections::BTreeMap;
use std::fmt;

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{self, BackendError, Dispatcher, ModelBackend, Orientation};
use crate::model::{BBox, ComboTag, DifficultyTag, FieldTag, ModelError, PixelPoint, SoftwareTag, ViewLabel};

pub const DEFAULT_JUDGE_RUNS: u32 = 5;

/// Click hit indicators. `action` is the product of the two axis hits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionScore {
    pub action: u8,
    pub action_h: u8,
    pub action_v: u8,
}

impl ActionScore {
    /// Score for a missing or unparsable click.
    pub const MISS: ActionScore = ActionScore {
        action: 0,
        action_h: 0,
        action_v: 0,
    };
}

pub fn score_action(act: &PixelPoint, gt: &BBox) -> Result<ActionScore, ModelError> {
    if act.frame != gt.frame {
        return Err(ModelError::FrameMismatch {
            bbox: gt.frame,
            point: act.frame,
        });
    }
    let h = u8::from(gt.x_min <= act.x && act.x <= gt.x_max);
    let v = u8::from(gt.y_min <= act.y && act.y <= gt.y_max);
    Ok(ActionScore {
        action: h * v,
        action_h: h,
        action_v: v,
    })
}

/// Judge-based answer score. Each run vector holds one entry per issued run;
/// `None` marks an abstention (verdict never parsed or judge unreachable).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerScore {
    pub precision: f64,
    pub recall: f64,
    pub answer: f64,
    pub precision_runs: Vec<Option<f64>>,
    pub recall_runs: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[error("answer score unavailable: every judge run abstained for {orientation}")]
pub struct AnswerScoreUnavailable {
    pub orientation: Orientation,
    pub precision_runs: Vec<Option<f64>>,
    pub recall_runs: Vec<Option<f64>>,
}

fn mean_of_valid(runs: &[Option<f64>]) -> Option<f64> {
    let valid: Vec<f64> = runs.iter().flatten().copied().collect();
    (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64)
}

/// Builds the score from raw run vectors, excluding abstentions.
pub fn answer_from_runs(
    precision_runs: Vec<Option<f64>>,
    recall_runs: Vec<Option<f64>>,
) -> Result<AnswerScore, AnswerScoreUnavailable> {
    let (p, r) = (mean_of_valid(&precision_runs), mean_of_valid(&recall_runs));
    match (p, r) {
        (Some(precision), Some(recall)) => Ok(AnswerScore {
            precision,
            recall,
            answer: (precision + recall) / 2.0,
            precision_runs,
            recall_runs,
        }),
        _ => Err(AnswerScoreUnavailable {
            orientation: if p.is_none() {
                Orientation::Precision
            } else {
                Orientation::Recall
            },
            precision_runs,
            recall_runs,
        }),
    }
}

async fn one_run(
    dispatcher: &Dispatcher,
    judge: &dyn ModelBackend,
    key: String,
    question: &str,
    gt_answer: &str,
    candidate: &str,
    orientation: Orientation,
) -> Option<f64> {
    // Unparsable verdicts are re-asked; transport failures were already
    // retried by the dispatcher.
    for _ in 0..dispatcher.policy().max_attempts.max(1) {
        match backends::judge(dispatcher, judge, &key, question, gt_answer, candidate, orientation).await {
            Ok(v) => return Some(v.value()),
            Err(BackendError::JudgeParseError { raw }) => {
                tracing::debug!(%key, "unparsable verdict `{raw}`");
            }
            Err(e) => {
                tracing::warn!(%key, "judge abstained: {e}");
                return None;
            }
        }
    }
    None
}

/// Issues `runs` precision-oriented and `runs` recall-oriented judge calls
/// and averages each orientation. Request keys are
/// `{key_prefix}/{orientation}/{run}`.
pub async fn score_answer(
    dispatcher: &Dispatcher,
    judge: &dyn ModelBackend,
    key_prefix: &str,
    question: &str,
    gt_answer: &str,
    candidate: &str,
    runs: u32,
) -> Result<AnswerScore, AnswerScoreUnavailable> {
    let orientation_runs = |o: Orientation| {
        join_all((0..runs).map(move |i| {
            one_run(dispatcher, judge, format!("{key_prefix}/{o}/{i}"), question, gt_answer, candidate, o)
        }))
    };
    let (p, r) = futures::join!(
        orientation_runs(Orientation::Precision),
        orientation_runs(Orientation::Recall)
    );
    answer_from_runs(p, r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerStatus {
    Scored,
    /// The agent produces no answer text.
    NotApplicable,
    /// No answer text this time (comprehension failed or item errored).
    Missing,
    /// Every judge run abstained.
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub view: ViewLabel,
    pub agent: String,
    pub combo: ComboTag,
    pub difficulty: DifficultyTag,
    pub answer_status: AnswerStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<AnswerScore>,
    #[serde(flatten)]
    pub action: ActionScore,
}

impl ScoreRecord {
    pub fn answer_value(&self) -> Option<f64> {
        self.answer.as_ref().map(|a| a.answer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    Combo,
    Software,
    Field,
    Difficulty,
    Resolution,
    Agent,
}

/// One coordinate of an aggregate row's key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "dim", content = "value", rename_all = "snake_case")]
pub enum KeyPart {
    Combo(ComboTag),
    Software(SoftwareTag),
    Field(FieldTag),
    Difficulty(DifficultyTag),
    Resolution(ViewLabel),
    Agent(String),
}

impl KeyPart {
    pub fn dim(&self) -> GroupKey {
        match self {
            KeyPart::Combo(_) => GroupKey::Combo,
            KeyPart::Software(_) => GroupKey::Software,
            KeyPart::Field(_) => GroupKey::Field,
            KeyPart::Difficulty(_) => GroupKey::Difficulty,
            KeyPart::Resolution(_) => GroupKey::Resolution,
            KeyPart::Agent(_) => GroupKey::Agent,
        }
    }

    fn of(r: &ScoreRecord, g: GroupKey) -> KeyPart {
        match g {
            GroupKey::Combo => KeyPart::Combo(r.combo),
            GroupKey::Software => KeyPart::Software(r.combo.software()),
            GroupKey::Field => KeyPart::Field(r.combo.field()),
            GroupKey::Difficulty => KeyPart::Difficulty(r.difficulty),
            GroupKey::Resolution => KeyPart::Resolution(r.view),
            GroupKey::Agent => KeyPart::Agent(r.agent.clone()),
        }
    }
}

impl fmt::Display for KeyPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeyPart::Combo(c) => c.fmt(f),
            KeyPart::Software(s) => s.fmt(f),
            KeyPart::Field(x) => x.fmt(f),
            KeyPart::Difficulty(d) => d.fmt(f),
            KeyPart::Resolution(v) => v.fmt(f),
            KeyPart::Agent(a) => a.fmt(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub key: Vec<KeyPart>,
    pub n: usize,
    /// Records with a scored answer; the answer mean is over these.
    pub n_answer: usize,
    pub mean_answer: Option<f64>,
    pub mean_action: f64,
    pub mean_action_h: f64,
    pub mean_action_v: f64,
}

impl AggregateRow {
    pub fn part(&self, g: GroupKey) -> Option<&KeyPart> {
        self.key.iter().find(|k| k.dim() == g)
    }
}

#[derive(Default)]
struct Acc {
    n: usize,
    n_answer: usize,
    answer: f64,
    action: f64,
    h: f64,
    v: f64,
}

impl Acc {
    fn row(self, key: Vec<KeyPart>) -> AggregateRow {
        let n = self.n as f64;
        AggregateRow {
            key,
            n: self.n,
            n_answer: self.n_answer,
            mean_answer: (self.n_answer > 0).then(|| self.answer / self.n_answer as f64),
            mean_action: self.action / n,
            mean_action_h: self.h / n,
            mean_action_v: self.v / n,
        }
    }
}

/// One row per distinct key, sorted by key; plain means over member records.
pub fn aggregate(records: &[ScoreRecord], group_by: &[GroupKey]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<Vec<KeyPart>, Acc> = BTreeMap::new();
    for r in records {
        let key = group_by.iter().map(|g| KeyPart::of(r, *g)).collect();
        let acc = groups.entry(key).or_default();
        acc.n += 1;
        if let Some(a) = r.answer_value() {
            acc.n_answer += 1;
            acc.answer += a;
        }
        acc.action += r.action.action as f64;
        acc.h += r.action.action_h as f64;
        acc.v += r.action.action_v as f64;
    }
    groups.into_iter().map(|(k, acc)| acc.row(k)).collect()
}

/// Coarsens finer rows onto `group_by` (a subset of their key dimensions),
/// weighting each row by its counts.
pub fn merge_rows(rows: &[AggregateRow], group_by: &[GroupKey]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<Vec<KeyPart>, Acc> = BTreeMap::new();
    for row in rows {
        let key = group_by
            .iter()
            .map(|g| row.part(*g).cloned().expect("merge keys must be present in the finer rows"))
            .collect();
        let acc = groups.entry(key).or_default();
        let n = row.n as f64;
        acc.n += row.n;
        acc.n_answer += row.n_answer;
        acc.answer += row.mean_answer.unwrap_or(0.0) * row.n_answer as f64;
        acc.action += row.mean_action * n;
        acc.h += row.mean_action_h * n;
        acc.v += row.mean_action_v * n;
    }
    groups.into_iter().map(|(k, acc)| acc.row(k)).collect()
}

#[cfg(test)]
mod tests {
    use std::time::Duration;

    use proptest::prelude::*;

    use super::*;
    use crate::backends::{BackendId, RetryPolicy, Role, Script, ScriptFallback, ScriptedBackend, ScriptedReply};

    fn at(x: u32, y: u32) -> PixelPoint {
        PixelPoint::new(x, y, ViewLabel::Large)
    }

    #[test]
    fn action_examples() {
        let gt = BBox::new(10, 10, 20, 20).unwrap();
        assert_eq!(score_action(&at(15, 15), &gt).unwrap(), ActionScore { action: 1, action_h: 1, action_v: 1 });
        assert_eq!(score_action(&at(15, 5), &gt).unwrap(), ActionScore { action: 0, action_h: 1, action_v: 0 });
        assert!(score_action(&PixelPoint::new(1, 1, ViewLabel::Small), &gt).is_err());
    }

    #[test]
    fn action_matches_brute_force_on_grid() {
        let gt = BBox::new(5, 7, 12, 9).unwrap();
        for x in 0..20 {
            for y in 0..20 {
                let inside_x = (5..=12).contains(&x);
                let inside_y = (7..=9).contains(&y);
                let s = score_action(&at(x, y), &gt).unwrap();
                assert_eq!(s.action_h == 1, inside_x);
                assert_eq!(s.action_v == 1, inside_y);
                assert_eq!(s.action == 1, inside_x && inside_y);
            }
        }
    }

    proptest! {
        #[test]
        fn action_translation_invariant(x in 0u32..500, y in 0u32..500, b in prop::array::uniform4(0u32..500), dx in 0u32..1000, dy in 0u32..1000) {
            let gt = BBox::new(b[0].min(b[2]), b[1].min(b[3]), b[0].max(b[2]), b[1].max(b[3])).unwrap();
            let moved = BBox::new(gt.x_min + dx, gt.y_min + dy, gt.x_max + dx, gt.y_max + dy).unwrap();
            let s = score_action(&at(x, y), &gt).unwrap();
            prop_assert_eq!(s, score_action(&at(x + dx, y + dy), &moved).unwrap());
            prop_assert!(s.action <= s.action_h && s.action <= s.action_v);
        }
    }

    fn judge_with(entries: Vec<(String, &str)>, fallback: ScriptFallback) -> ScriptedBackend {
        let mut script = Script {
            fallback,
            ..Script::default()
        };
        for (k, v) in entries {
            script.entries.insert(k, ScriptedReply::text(v));
        }
        ScriptedBackend::new(BackendId::new("judge", [Role::Judge], None).unwrap(), script)
    }

    fn dispatcher() -> Dispatcher {
        Dispatcher::new(RetryPolicy {
            base_backoff: Duration::from_millis(1),
            ..RetryPolicy::default()
        })
    }

    fn sequence(orientation: &str, verdicts: &[&'static str]) -> Vec<(String, &'static str)> {
        verdicts
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("k/{orientation}/{i}"), *v))
            .collect()
    }

    #[tokio::test]
    async fn answer_from_fixed_sequences() {
        let mut e = sequence("precision", &["FULL", "FULL", "PARTIAL", "FULL", "FULL"]);
        e.extend(sequence("recall", &["PARTIAL"; 5]));
        let j = judge_with(e, ScriptFallback::default());
        let s = score_answer(&dispatcher(), &j, "k", "q", "ref", "cand", 5).await.unwrap();
        assert!((s.precision - 0.9).abs() < 1e-12);
        assert_eq!(s.recall, 0.5);
        assert!((s.answer - 0.7).abs() < 1e-12);
        assert_eq!(j.calls().len(), 10);
    }

    #[tokio::test]
    async fn constant_judge_gives_constant_scores() {
        for (verdict, value) in [("FULL", 1.0), ("PARTIAL", 0.5), ("NONE", 0.0)] {
            let j = judge_with(
                vec![],
                ScriptFallback::Reply {
                    reply: ScriptedReply::text(verdict),
                },
            );
            let s = score_answer(&dispatcher(), &j, "k", "q", "r", "c", 3).await.unwrap();
            assert_eq!((s.precision, s.recall, s.answer), (value, value, value));
        }
    }

    #[tokio::test]
    async fn abstentions_are_excluded_not_zeroed() {
        let mut e = sequence("precision", &["FULL", "maybe", "PARTIAL"]);
        e.extend(sequence("recall", &["FULL", "FULL", "FULL"]));
        let j = judge_with(e, ScriptFallback::default());
        let s = score_answer(&dispatcher(), &j, "k", "q", "r", "c", 3).await.unwrap();
        assert_eq!(s.precision_runs, vec![Some(1.0), None, Some(0.5)]);
        assert_eq!(s.precision, 0.75);
        assert_eq!(s.answer, 0.875);
        // Unparsable run re-asked up to max_attempts (5) times.
        assert_eq!(j.calls().iter().filter(|k| k.as_str() == "k/precision/1").count(), 5);
    }

    #[tokio::test]
    async fn all_abstaining_is_unavailable() {
        let j = judge_with(vec![], ScriptFallback::default());
        let err = score_answer(&dispatcher(), &j, "k", "q", "r", "c", 5).await.unwrap_err();
        assert_eq!(err.precision_runs, vec![None; 5]);
    }

    #[test]
    fn p1_r_half_averages_to_three_quarters() {
        let s = answer_from_runs(vec![Some(1.0)], vec![Some(0.5)]).unwrap();
        assert_eq!(s.answer, 0.75);
    }

    fn rec(id: &str, combo: usize, view: ViewLabel, agent: &str, action: u8, answer: Option<f64>) -> ScoreRecord {
        ScoreRecord {
            sample_id: id.into(),
            view,
            agent: agent.into(),
            combo: ComboTag::ALL[combo],
            difficulty: DifficultyTag::ALL[combo % 3],
            answer_status: if answer.is_some() { AnswerStatus::Scored } else { AnswerStatus::NotApplicable },
            answer: answer.map(|a| AnswerScore {
                precision: a,
                recall: a,
                answer: a,
                precision_runs: vec![Some(a)],
                recall_runs: vec![Some(a)],
            }),
            action: ActionScore {
                action,
                action_h: action,
                action_v: 1,
            },
        }
    }

    #[test]
    fn aggregate_examples() {
        let rows = aggregate(
            &[rec("a", 0, ViewLabel::Large, "x", 1, Some(1.0)), rec("b", 0, ViewLabel::Large, "x", 0, None)],
            &[GroupKey::Combo],
        );
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].mean_action, 0.5);
        assert_eq!(rows[0].n_answer, 1);
        assert_eq!(rows[0].mean_answer, Some(1.0));

        let all: Vec<_> = (0..8).map(|c| rec("s", c, ViewLabel::Large, "x", 1, None)).collect();
        let rows = aggregate(&all, &[GroupKey::Combo]);
        assert_eq!(rows.len(), 8);
        let order: Vec<_> = rows.iter().map(|r| r.key[0].to_string()).collect();
        assert_eq!(order[0], "CO-Acoustic");
        assert_eq!(order[7], "HF-Magnetical");
    }

    fn arb_records() -> impl proptest::strategy::Strategy<Value = Vec<ScoreRecord>> {
        prop::collection::vec(
            (0usize..8, 0usize..3, 0usize..3, 0u8..2, prop::option::of(0usize..3)),
            1..60,
        )
        .prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (c, view, agent, act, ans))| {
                    rec(&format!("s{i}"), c, ViewLabel::ALL[view], ["a", "b", "c"][agent], act, ans.map(|a| a as f64 * 0.5))
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn aggregation_preserves_totals(records in arb_records()) {
            let rows = aggregate(&records, &[GroupKey::Combo, GroupKey::Resolution]);
            let total: f64 = rows.iter().map(|r| r.n as f64 * r.mean_action).sum();
            let direct: f64 = records.iter().map(|r| r.action.action as f64).sum();
            prop_assert!((total - direct).abs() <= 1e-12);
            let ans_total: f64 = rows.iter().map(|r| r.n_answer as f64 * r.mean_answer.unwrap_or(0.0)).sum();
            let ans_direct: f64 = records.iter().filter_map(ScoreRecord::answer_value).sum();
            prop_assert!((ans_total - ans_direct).abs() <= 1e-12);
        }

        #[test]
        fn merged_rows_equal_direct_aggregate(records in arb_records()) {
            let fine = aggregate(&records, &[GroupKey::Agent, GroupKey::Combo, GroupKey::Resolution]);
            let merged = merge_rows(&fine, &[GroupKey::Combo]);
            let direct = aggregate(&records, &[GroupKey::Combo]);
            prop_assert_eq!(merged.len(), direct.len());
            for (m, d) in merged.iter().zip(&direct) {
                prop_assert_eq!(&m.key, &d.key);
                prop_assert_eq!(m.n, d.n);
                prop_assert!((m.mean_action - d.mean_action).abs() < 1e-12);
                prop_assert!((m.mean_action_h - d.mean_action_h).abs() < 1e-12);
                match (m.mean_answer, d.mean_answer) {
                    (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                    (a, b) => prop_assert_eq!(a, b),
                }
            }
        }
    }

    #[test]
    fn key_part_serializes_readably() {
        let k = KeyPart::Combo(ComboTag::ALL[4]);
        assert_eq!(serde_json::to_string(&k).unwrap(), r#"{"dim":"combo","value":"Fl-Thermal"}"#);
    }
}
