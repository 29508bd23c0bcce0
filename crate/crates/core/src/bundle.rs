//! Everything derived from a run's records: aggregates, resolution and
//! difficulty tables, gains, phases, heatmaps and correlation matrices.
//! Pure function of the records; reports only format what is here.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::analytics::{
    build_heatmap, gain_table, js_divergence, phase_assign, plcc, srcc, subset_correlation_matrix, top_k,
    CorrelationMatrices, FeatureVector, GainRow, HeatGrid, Phase,
};
use crate::model::{ComboTag, DifficultyTag, NormPoint, ViewLabel};
use crate::runner::{ResultRecord, RunManifest};
use crate::scoring::{aggregate, merge_rows, AggregateRow, GroupKey, ScoreRecord};

/// Row label for the pooled row of per-combo tables.
pub const ALL: &str = "All";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub by_agent: Vec<AggregateRow>,
    pub by_agent_combo_view: Vec<AggregateRow>,
    pub by_agent_difficulty: Vec<AggregateRow>,
    pub by_combo_view: Vec<AggregateRow>,
    pub by_difficulty: Vec<AggregateRow>,
}

/// Original (Large) versus dynamic (mean of the available Middle and Small
/// view means) scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OriDynRow {
    pub agent: String,
    /// Combo name, or [`ALL`].
    pub subset: String,
    pub ori_answer: Option<f64>,
    pub ori_action: Option<f64>,
    pub dyn_answer: Option<f64>,
    pub dyn_action: Option<f64>,
    /// Views that contributed to the dynamic columns.
    pub dyn_views: Vec<ViewLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrCell {
    pub subset: String,
    pub level: String,
    pub n: usize,
    pub srcc: Option<f64>,
    pub plcc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainSeries {
    pub subset: String,
    pub rows: Vec<GainRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    pub action_by_view: Vec<GainSeries>,
    pub answer_by_view: Vec<GainSeries>,
    pub action_by_difficulty: Vec<GainSeries>,
    pub answer_by_difficulty: Vec<GainSeries>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub sample_id: String,
    pub combo: ComboTag,
    pub answer: f64,
    pub action: f64,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseCounts {
    pub subset: String,
    /// Counts for P1..P4.
    pub counts: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phases {
    /// Agents whose scores are averaged per sample.
    pub agents: Vec<String>,
    pub mean_answer: Option<f64>,
    pub mean_action: Option<f64>,
    pub points: Vec<PhasePoint>,
    pub by_combo: Vec<PhaseCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmaps {
    /// JSD values are base 2, in [0, 1].
    pub jsd_base: u32,
    /// Ground-truth click locations (box centers) on the original view.
    pub ground_truth: BTreeMap<ComboTag, HeatGrid>,
    /// Each agent's clicks on the original view.
    pub agents: BTreeMap<String, HeatGrid>,
    pub combo_labels: Vec<String>,
    /// Pairwise divergence between the ground-truth maps of combos.
    pub jsd_between_combos: Vec<Vec<Option<f64>>>,
    /// Divergence of each agent's map from the pooled ground-truth map.
    pub jsd_agent_vs_truth: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub answer: CorrelationMatrices,
    pub action: CorrelationMatrices,
    /// Models behind the answer matrix (agents that produce answers).
    pub answer_agents: Vec<String>,
    pub action_agents: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub combo: ComboTag,
    pub n: usize,
    pub mean: FeatureVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBundle {
    pub run_id: String,
    pub records: usize,
    pub agents: Vec<String>,
    pub aggregates: Aggregates,
    pub ori_dyn: Vec<OriDynRow>,
    pub answer_action_by_view: Vec<CorrCell>,
    pub answer_action_by_difficulty: Vec<CorrCell>,
    pub gains: Gains,
    /// Best agents by mean action score, highest first.
    pub top_agents: Vec<(String, f64)>,
    pub phases: Phases,
    pub heatmaps: Heatmaps,
    pub correlations: Correlations,
    pub features: Vec<FeatureRow>,
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn action(r: &ScoreRecord) -> f64 {
    r.action.action as f64
}

fn subsets() -> Vec<(String, Option<ComboTag>)> {
    ComboTag::ALL
        .iter()
        .map(|c| (c.to_string(), Some(*c)))
        .chain([(ALL.to_string(), None)])
        .collect()
}

fn in_subset(r: &ScoreRecord, combo: Option<ComboTag>) -> bool {
    combo.is_none_or(|c| r.combo == c)
}

fn ori_dyn(scores: &[&ScoreRecord], agents: &[String]) -> Vec<OriDynRow> {
    let mut rows = Vec::new();
    for agent in agents {
        for (subset, combo) in subsets() {
            let of_view = |v: ViewLabel| {
                scores
                    .iter()
                    .filter(|r| &r.agent == agent && r.view == v && in_subset(r, combo))
                    .copied()
                    .collect::<Vec<_>>()
            };
            let large = of_view(ViewLabel::Large);
            let dynamic: Vec<(ViewLabel, Vec<&ScoreRecord>)> = [ViewLabel::Middle, ViewLabel::Small]
                .into_iter()
                .map(|v| (v, of_view(v)))
                .filter(|(_, rs)| !rs.is_empty())
                .collect();
            if large.is_empty() && dynamic.is_empty() {
                continue;
            }
            let answer_mean = |rs: &[&ScoreRecord]| mean(rs.iter().filter_map(|r| r.answer_value()));
            let action_mean = |rs: &[&ScoreRecord]| mean(rs.iter().map(|r| action(r)));
            rows.push(OriDynRow {
                agent: agent.clone(),
                subset,
                ori_answer: answer_mean(&large),
                ori_action: action_mean(&large),
                dyn_answer: mean(dynamic.iter().filter_map(|(_, rs)| answer_mean(rs))),
                dyn_action: mean(dynamic.iter().filter_map(|(_, rs)| action_mean(rs))),
                dyn_views: dynamic.iter().map(|(v, _)| *v).collect(),
            });
        }
    }
    rows
}

fn answer_action<L: ToString + Copy + PartialEq>(
    scores: &[&ScoreRecord],
    levels: &[L],
    level_of: impl Fn(&ScoreRecord) -> L,
) -> Vec<CorrCell> {
    let mut cells = Vec::new();
    for (subset, combo) in subsets() {
        for &level in levels {
            let (a, c): (Vec<f64>, Vec<f64>) = scores
                .iter()
                .filter(|r| in_subset(r, combo) && level_of(r) == level)
                .filter_map(|r| Some((r.answer_value()?, action(r))))
                .unzip();
            cells.push(CorrCell {
                subset: subset.clone(),
                level: level.to_string(),
                n: a.len(),
                srcc: srcc(&a, &c).ok(),
                plcc: plcc(&a, &c).ok(),
            });
        }
    }
    cells
}

fn gain_series<L: ToString + Copy + PartialEq>(
    scores: &[&ScoreRecord],
    levels: &[L],
    level_of: impl Fn(&ScoreRecord) -> L,
    value: impl Fn(&ScoreRecord) -> Option<f64>,
) -> Vec<GainSeries> {
    subsets()
        .into_iter()
        .filter_map(|(subset, combo)| {
            let means: Vec<(String, f64)> = levels
                .iter()
                .filter_map(|&l| {
                    let m = mean(scores.iter().filter(|r| in_subset(r, combo) && level_of(r) == l).filter_map(|r| value(r)))?;
                    Some((l.to_string(), m))
                })
                .collect();
            (!means.is_empty()).then(|| GainSeries {
                subset,
                rows: gain_table(&means),
            })
        })
        .collect()
}

fn phases(scores: &[&ScoreRecord], agents: &[String]) -> Phases {
    let mut per_sample: BTreeMap<&str, (ComboTag, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in scores.iter().filter(|r| r.view == ViewLabel::Large && agents.contains(&r.agent)) {
        let e = per_sample.entry(r.sample_id.as_str()).or_insert((r.combo, Vec::new(), Vec::new()));
        if let Some(a) = r.answer_value() {
            e.1.push(a);
        }
        e.2.push(action(r));
    }
    let means: Vec<(&str, ComboTag, f64, f64)> = per_sample
        .into_iter()
        .filter_map(|(id, (combo, a, c))| Some((id, combo, mean(a)?, mean(c)?)))
        .collect();
    let mean_answer = mean(means.iter().map(|m| m.2));
    let mean_action = mean(means.iter().map(|m| m.3));
    let points: Vec<PhasePoint> = match (mean_answer, mean_action) {
        (Some(ma), Some(mc)) => means
            .iter()
            .map(|&(id, combo, a, c)| PhasePoint {
                sample_id: id.to_string(),
                combo,
                answer: a,
                action: c,
                phase: phase_assign(a, c, ma, mc),
            })
            .collect(),
        _ => Vec::new(),
    };
    let by_combo = subsets()
        .into_iter()
        .map(|(subset, combo)| {
            let mut counts = [0; 4];
            for p in points.iter().filter(|p| combo.is_none_or(|c| p.combo == c)) {
                counts[Phase::ALL.iter().position(|x| *x == p.phase).expect("closed set")] += 1;
            }
            PhaseCounts { subset, counts }
        })
        .collect();
    Phases {
        agents: agents.to_vec(),
        mean_answer,
        mean_action,
        points,
        by_combo,
    }
}

fn norm_point(x: f64, y: f64, w: u32, h: u32) -> NormPoint {
    NormPoint::new(x / w as f64, y / h as f64).expect("finite pixel coordinates")
}

fn heatmaps(records: &[ResultRecord], agents: &[String], grid: [usize; 2]) -> Heatmaps {
    let [gx, gy] = grid;
    let large: Vec<&ResultRecord> = records.iter().filter(|r| r.key.view == ViewLabel::Large).collect();

    let mut truth_points: BTreeMap<ComboTag, Vec<NormPoint>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for r in &large {
        if seen.insert(r.key.sample_id.as_str()) {
            let (cx, cy) = r.gt_bbox.center();
            truth_points
                .entry(r.score.combo)
                .or_default()
                .push(norm_point(cx, cy, r.view_size[0], r.view_size[1]));
        }
    }
    let ground_truth: BTreeMap<ComboTag, HeatGrid> =
        truth_points.iter().map(|(c, pts)| (*c, build_heatmap(pts, gx, gy))).collect();
    let pooled: Vec<NormPoint> = truth_points.values().flatten().copied().collect();
    let pooled = build_heatmap(&pooled, gx, gy);

    let mut agent_maps = BTreeMap::new();
    let mut jsd_agent_vs_truth = BTreeMap::new();
    for agent in agents {
        let pts: Vec<NormPoint> = large
            .iter()
            .filter(|r| &r.key.agent == agent)
            .filter_map(|r| r.trace.act().map(|p| norm_point(p.x as f64, p.y as f64, r.view_size[0], r.view_size[1])))
            .collect();
        let grid = build_heatmap(&pts, gx, gy);
        let jsd = (!pts.is_empty() && pooled.total() > 0.0).then(|| js_divergence(&grid, &pooled).expect("same shape"));
        jsd_agent_vs_truth.insert(agent.clone(), jsd);
        agent_maps.insert(agent.clone(), grid);
    }

    let jsd_between_combos = ComboTag::ALL
        .iter()
        .map(|a| {
            ComboTag::ALL
                .iter()
                .map(|b| match (ground_truth.get(a), ground_truth.get(b)) {
                    (Some(p), Some(q)) => Some(js_divergence(p, q).expect("same shape")),
                    _ => None,
                })
                .collect()
        })
        .collect();

    Heatmaps {
        jsd_base: 2,
        ground_truth,
        agents: agent_maps,
        combo_labels: ComboTag::ALL.iter().map(ToString::to_string).collect(),
        jsd_between_combos,
        jsd_agent_vs_truth,
    }
}

fn correlations(scores: &[&ScoreRecord], manifest: &RunManifest) -> Correlations {
    let labels: Vec<String> = ComboTag::ALL.iter().map(ToString::to_string).collect();
    let matrix = |agents: &[String], value: &dyn Fn(&ScoreRecord) -> Option<f64>| {
        let m: Vec<Vec<Option<f64>>> = ComboTag::ALL
            .iter()
            .map(|c| {
                agents
                    .iter()
                    .map(|a| mean(scores.iter().filter(|r| r.combo == *c && &r.agent == a).filter_map(|r| value(r))))
                    .collect()
            })
            .collect();
        subset_correlation_matrix(&labels, &m)
    };
    let action_agents = manifest.agent_names();
    let answer_agents: Vec<String> = manifest
        .agents
        .iter()
        .filter(|a| a.produces_answer)
        .map(|a| a.name.clone())
        .collect();
    Correlations {
        answer: matrix(&answer_agents, &|r| r.answer_value()),
        action: matrix(&action_agents, &|r| Some(action(r))),
        answer_agents,
        action_agents,
    }
}

fn features(records: &[ResultRecord]) -> Vec<FeatureRow> {
    let mut by_combo: BTreeMap<ComboTag, Vec<FeatureVector>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for r in records.iter().filter(|r| r.key.view == ViewLabel::Large) {
        if let Some(f) = r.features {
            if seen.insert(r.key.sample_id.as_str()) {
                by_combo.entry(r.score.combo).or_default().push(f);
            }
        }
    }
    by_combo
        .into_iter()
        .map(|(combo, fs)| {
            let m = |g: fn(&FeatureVector) -> f64| mean(fs.iter().map(g)).expect("non-empty");
            FeatureRow {
                combo,
                n: fs.len(),
                mean: FeatureVector {
                    luminance: m(|f| f.luminance),
                    contrast: m(|f| f.contrast),
                    chrominance: m(|f| f.chrominance),
                    blur: m(|f| f.blur),
                    spatial_information: m(|f| f.spatial_information),
                },
            }
        })
        .collect()
}

pub fn build_bundle(manifest: &RunManifest, records: &[ResultRecord]) -> ScoreBundle {
    let scores: Vec<ScoreRecord> = records.iter().map(|r| r.score.clone()).collect();
    let refs: Vec<&ScoreRecord> = scores.iter().collect();
    let agents = manifest.agent_names();

    let by_agent_combo_view = aggregate(&scores, &[GroupKey::Agent, GroupKey::Combo, GroupKey::Resolution]);
    let by_agent_difficulty = aggregate(&scores, &[GroupKey::Agent, GroupKey::Difficulty]);
    let aggregates = Aggregates {
        by_agent: merge_rows(&by_agent_combo_view, &[GroupKey::Agent]),
        by_combo_view: merge_rows(&by_agent_combo_view, &[GroupKey::Combo, GroupKey::Resolution]),
        by_difficulty: merge_rows(&by_agent_difficulty, &[GroupKey::Difficulty]),
        by_agent_combo_view,
        by_agent_difficulty,
    };

    let action_means: Vec<(String, f64)> = aggregates
        .by_agent
        .iter()
        .filter_map(|row| match row.key.first() {
            Some(crate::scoring::KeyPart::Agent(a)) => Some((a.clone(), row.mean_action)),
            _ => None,
        })
        .collect();
    let top_agents = top_k(&action_means, manifest.top_k);
    let answering: BTreeSet<&str> = manifest
        .agents
        .iter()
        .filter(|a| a.produces_answer)
        .map(|a| a.name.as_str())
        .collect();
    let mut phase_agents: Vec<String> = top_agents
        .iter()
        .map(|(a, _)| a.clone())
        .filter(|a| answering.contains(a.as_str()))
        .collect();
    if phase_agents.is_empty() {
        phase_agents = answering.iter().map(|a| a.to_string()).collect();
    }

    let views = ViewLabel::ALL;
    let diffs = DifficultyTag::ALL;
    ScoreBundle {
        run_id: manifest.run_id.clone(),
        records: records.len(),
        agents: agents.clone(),
        ori_dyn: ori_dyn(&refs, &agents),
        answer_action_by_view: answer_action(&refs, &views, |r| r.view),
        answer_action_by_difficulty: answer_action(&refs, &diffs, |r| r.difficulty),
        gains: Gains {
            action_by_view: gain_series(&refs, &views, |r| r.view, |r| Some(action(r))),
            answer_by_view: gain_series(&refs, &views, |r| r.view, |r| r.answer_value()),
            action_by_difficulty: gain_series(&refs, &diffs, |r| r.difficulty, |r| Some(action(r))),
            answer_by_difficulty: gain_series(&refs, &diffs, |r| r.difficulty, |r| r.answer_value()),
        },
        phases: phases(&refs, &phase_agents),
        heatmaps: heatmaps(records, &agents, manifest.heat_grid),
        correlations: correlations(&refs, manifest),
        features: features(records),
        aggregates,
        top_agents,
    }
}
