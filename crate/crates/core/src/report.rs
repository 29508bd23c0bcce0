//! Renders a [`ScoreBundle`] as markdown tables, CSV files and SVG figures.
//!
//! Rendering only formats: every number comes from the bundle, rounded half
//! away from zero to four decimals (gain cells: two decimals).

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analytics::{fmt_fixed, CorrelationMatrices, HeatGrid};
use crate::bundle::{CorrCell, GainSeries, ScoreBundle};
use crate::scoring::AggregateRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Md,
    Csv,
    Svg,
}

impl Format {
    pub const ALL: [Format; 3] = [Format::Md, Format::Csv, Format::Svg];
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "md" | "markdown" => Ok(Format::Md),
            "csv" => Ok(Format::Csv),
            "svg" => Ok(Format::Svg),
            other => Err(format!("unknown report format `{other}` (expected md, csv or svg)")),
        }
    }
}

pub const DYN_NOTE: &str = "Dyn. is the mean of the available Middle and Small view means; \
the per-view scores are listed in the aggregate tables.";

fn num(v: f64) -> String {
    fmt_fixed(v, 4)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), num)
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |p| fmt_fixed(p, 2))
}

/// A table rendered identically to markdown and CSV.
struct Table {
    name: &'static str,
    title: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &'static str, title: impl Into<String>, header: &[&str]) -> Self {
        Table {
            name,
            title: title.into(),
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn markdown(&self, out: &mut String) {
        let _ = writeln!(out, "## {}\n", self.title);
        let _ = writeln!(out, "| {} |", self.header.join(" | "));
        let _ = writeln!(out, "|{}|", vec!["---"; self.header.len()].join("|"));
        for r in &self.rows {
            let _ = writeln!(out, "| {} |", r.join(" | "));
        }
        out.push('\n');
    }

    fn csv(&self) -> io::Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| io::Error::other(e.to_string()))
    }
}

fn key_text(row: &AggregateRow) -> Vec<String> {
    row.key.iter().map(ToString::to_string).collect()
}

fn aggregate_table(name: &'static str, title: &str, dims: &[&str], rows: &[AggregateRow]) -> Table {
    let mut header: Vec<&str> = dims.to_vec();
    header.extend(["n", "n_answer", "answer", "action", "action_h", "action_v"]);
    let mut t = Table::new(name, title, &header);
    for r in rows {
        let mut cells = key_text(r);
        cells.extend([
            r.n.to_string(),
            r.n_answer.to_string(),
            opt(r.mean_answer),
            num(r.mean_action),
            num(r.mean_action_h),
            num(r.mean_action_v),
        ]);
        t.rows.push(cells);
    }
    t
}

fn corr_table(name: &'static str, title: &str, level: &str, cells: &[CorrCell]) -> Table {
    let mut t = Table::new(name, title, &["subset", level, "n", "srcc", "plcc"]);
    for c in cells {
        t.rows.push(vec![c.subset.clone(), c.level.clone(), c.n.to_string(), opt(c.srcc), opt(c.plcc)]);
    }
    t
}

fn gain_rows(t: &mut Table, metric: &str, series: &[GainSeries]) {
    for s in series {
        for row in &s.rows {
            t.rows.push(vec![
                metric.to_string(),
                s.subset.clone(),
                row.level.clone(),
                num(row.mean),
                opt(row.abs_gain),
                pct(row.pct_gain),
                row.cell(),
            ]);
        }
    }
}

fn matrix_table(name: &'static str, title: String, labels: &[String], m: &[Vec<Option<f64>>]) -> Table {
    let mut header = vec![""];
    header.extend(labels.iter().map(String::as_str));
    let mut t = Table::new(name, title, &header);
    for (label, row) in labels.iter().zip(m) {
        let mut cells = vec![label.clone()];
        cells.extend(row.iter().map(|v| opt(*v)));
        t.rows.push(cells);
    }
    t
}

fn tables(b: &ScoreBundle) -> Vec<Table> {
    let mut out = vec![
        aggregate_table("agents", "Scores by agent", &["agent"], &b.aggregates.by_agent),
        aggregate_table("combo_view", "Scores by combo and view", &["combo", "view"], &b.aggregates.by_combo_view),
        aggregate_table(
            "agent_combo_view",
            "Scores by agent, combo and view",
            &["agent", "combo", "view"],
            &b.aggregates.by_agent_combo_view,
        ),
        aggregate_table("difficulty", "Scores by difficulty", &["difficulty"], &b.aggregates.by_difficulty),
        aggregate_table(
            "agent_difficulty",
            "Scores by agent and difficulty",
            &["agent", "difficulty"],
            &b.aggregates.by_agent_difficulty,
        ),
    ];

    let mut od = Table::new(
        "ori_dyn",
        "Original vs dynamic resolution",
        &["agent", "subset", "ori_answer", "ori_action", "dyn_answer", "dyn_action", "dyn_views"],
    );
    for r in &b.ori_dyn {
        let views: Vec<String> = r.dyn_views.iter().map(ToString::to_string).collect();
        od.rows.push(vec![
            r.agent.clone(),
            r.subset.clone(),
            opt(r.ori_answer),
            opt(r.ori_action),
            opt(r.dyn_answer),
            opt(r.dyn_action),
            views.join("+"),
        ]);
    }
    out.push(od);

    out.push(corr_table(
        "answer_action_view",
        "Answer-Action correlation by resolution",
        "view",
        &b.answer_action_by_view,
    ));
    out.push(corr_table(
        "answer_action_difficulty",
        "Answer-Action correlation by difficulty",
        "difficulty",
        &b.answer_action_by_difficulty,
    ));

    let header = ["metric", "subset", "level", "mean", "abs_gain", "pct_gain", "cell"];
    let mut gv = Table::new("gains_view", "Gains from Large to Small views", &header);
    gain_rows(&mut gv, "action", &b.gains.action_by_view);
    gain_rows(&mut gv, "answer", &b.gains.answer_by_view);
    out.push(gv);
    let mut gd = Table::new("gains_difficulty", "Gains from Easy to Hard", &header);
    gain_rows(&mut gd, "action", &b.gains.action_by_difficulty);
    gain_rows(&mut gd, "answer", &b.gains.answer_by_difficulty);
    out.push(gd);

    let mut top = Table::new("top_agents", "Top agents by action score", &["rank", "agent", "action"]);
    for (i, (a, s)) in b.top_agents.iter().enumerate() {
        top.rows.push(vec![(i + 1).to_string(), a.clone(), num(*s)]);
    }
    out.push(top);

    let mut pc = Table::new(
        "phase_counts",
        format!(
            "Phases (agents: {}; mean answer {}, mean action {})",
            b.phases.agents.join(", "),
            opt(b.phases.mean_answer),
            opt(b.phases.mean_action)
        ),
        &["subset", "P1", "P2", "P3", "P4", "P2+P4", "n"],
    );
    for c in &b.phases.by_combo {
        let n: usize = c.counts.iter().sum();
        let mut cells = vec![c.subset.clone()];
        cells.extend(c.counts.iter().map(ToString::to_string));
        cells.push((c.counts[1] + c.counts[3]).to_string());
        cells.push(n.to_string());
        pc.rows.push(cells);
    }
    out.push(pc);
    let mut pp = Table::new("phase_points", "Phase of each sample", &["sample", "combo", "answer", "action", "phase"]);
    for p in &b.phases.points {
        pp.rows.push(vec![
            p.sample_id.clone(),
            p.combo.to_string(),
            num(p.answer),
            num(p.action),
            p.phase.to_string(),
        ]);
    }
    out.push(pp);

    out.push(matrix_table(
        "jsd_combos",
        format!("Jensen-Shannon divergence between ground-truth click maps (base {})", b.heatmaps.jsd_base),
        &b.heatmaps.combo_labels,
        &b.heatmaps.jsd_between_combos,
    ));
    let mut ja = Table::new(
        "jsd_agents",
        format!("Jensen-Shannon divergence of agent clicks from ground truth (base {})", b.heatmaps.jsd_base),
        &["agent", "jsd"],
    );
    for (a, v) in &b.heatmaps.jsd_agent_vs_truth {
        ja.rows.push(vec![a.clone(), opt(*v)]);
    }
    out.push(ja);

    for (name, title, m, models) in [
        ("corr_answer", "Answer", &b.correlations.answer, &b.correlations.answer_agents),
        ("corr_action", "Action", &b.correlations.action, &b.correlations.action_agents),
    ] {
        let title = format!("{title} correlation between combos, mean of SRCC and PLCC over {}", models.join(", "));
        out.push(matrix_table(name, title, &m.labels, &m.combined));
    }
    for (name, title, m) in [
        ("corr_answer_srcc", "Answer SRCC between combos", &b.correlations.answer),
        ("corr_action_srcc", "Action SRCC between combos", &b.correlations.action),
    ] {
        out.push(matrix_table(name, title.to_string(), &m.labels, &m.srcc));
    }
    for (name, title, m) in [
        ("corr_answer_plcc", "Answer PLCC between combos", &b.correlations.answer),
        ("corr_action_plcc", "Action PLCC between combos", &b.correlations.action),
    ] {
        out.push(matrix_table(name, title.to_string(), &m.labels, &m.plcc));
    }

    let mut f = Table::new(
        "features",
        "Low-level features of the original views",
        &["combo", "n", "luminance", "contrast", "chrominance", "blur", "spatial_information"],
    );
    for r in &b.features {
        f.rows.push(vec![
            r.combo.to_string(),
            r.n.to_string(),
            num(r.mean.luminance),
            num(r.mean.contrast),
            num(r.mean.chrominance),
            num(r.mean.blur),
            num(r.mean.spatial_information),
        ]);
    }
    out.push(f);
    out
}

const VIRIDIS: [[u8; 3]; 9] = [
    [0x44, 0x01, 0x54],
    [0x47, 0x2d, 0x7b],
    [0x3b, 0x52, 0x8b],
    [0x2c, 0x72, 0x8e],
    [0x21, 0x91, 0x8c],
    [0x28, 0xae, 0x80],
    [0x5e, 0xc9, 0x62],
    [0xad, 0xdc, 0x30],
    [0xfd, 0xe7, 0x25],
];

/// Viridis color for `t` in `[0, 1]`, as `#rrggbb`.
pub fn viridis(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let pos = t * (VIRIDIS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(VIRIDIS.len() - 2);
    let f = pos - i as f64;
    let c: Vec<u8> = (0..3)
        .map(|k| (VIRIDIS[i][k] as f64 + (VIRIDIS[i + 1][k] as f64 - VIRIDIS[i][k] as f64) * f).round() as u8)
        .collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Heat grid as an SVG image; colors scale with the largest bin.
pub fn heatmap_svg(title: &str, g: &HeatGrid) -> String {
    let cell = 8;
    let (w, h) = (g.gx * cell, g.gy * cell);
    let max = g.max();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        w,
        h + 24,
        w,
        h + 24
    );
    let _ = writeln!(s, r#"<text x="2" y="16" font-family="sans-serif" font-size="13">{}</text>"#, escape(title));
    let _ = writeln!(s, r#"<rect x="0" y="24" width="{w}" height="{h}" fill="{}"/>"#, viridis(0.0));
    for j in 0..g.gy {
        for i in 0..g.gx {
            let v = g.get(i, j);
            if v > 0.0 {
                let _ = writeln!(
                    s,
                    r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="{}"/>"#,
                    i * cell,
                    24 + j * cell,
                    viridis(v / max)
                );
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Correlation matrix as an SVG grid; colors map `[-1, 1]` onto the colormap.
pub fn matrix_svg(title: &str, m: &CorrelationMatrices) -> String {
    let cell = 56;
    let margin = 110;
    let k = m.labels.len();
    let size = margin + k * cell;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{}" viewBox="0 0 {size} {}" font-family="sans-serif">"#,
        size + 24,
        size + 24
    );
    let _ = writeln!(s, r#"<text x="2" y="16" font-size="13">{}</text>"#, escape(title));
    for (i, label) in m.labels.iter().enumerate() {
        let c = margin + i * cell + cell / 2;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{}</text>"#,
            margin - 6,
            24 + margin + i * cell + cell / 2 + 4,
            escape(label)
        );
        let _ = writeln!(
            s,
            r#"<text x="{c}" y="{}" font-size="11" text-anchor="start" transform="rotate(-45 {c} {})">{}</text>"#,
            24 + margin - 6,
            24 + margin - 6,
            escape(label)
        );
    }
    for (i, row) in m.combined.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let (x, y) = (margin + j * cell, 24 + margin + i * cell);
            let (fill, text) = match v {
                Some(v) => (viridis((v + 1.0) / 2.0), fmt_fixed(*v, 2)),
                None => ("#d0d0d0".to_string(), "n/a".to_string()),
            };
            let _ = writeln!(s, r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}" stroke="white"/>"#);
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" font-size="11" text-anchor="middle" fill="white">{text}</text>"#,
                x + cell / 2,
                y + cell / 2 + 4
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn file_stem(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn write(path: PathBuf, bytes: &[u8], written: &mut Vec<PathBuf>) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, bytes)?;
    written.push(path);
    Ok(())
}

/// Writes the requested formats into `out_dir` and returns the files written.
pub fn write_reports(out_dir: &Path, b: &ScoreBundle, formats: &[Format]) -> io::Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let tables = tables(b);
    if formats.contains(&Format::Md) {
        let mut md = format!("# Run {}\n\n{} records across {} agents.\n\n{DYN_NOTE}\n\n", b.run_id, b.records, b.agents.len());
        for t in &tables {
            t.markdown(&mut md);
        }
        write(out_dir.join("summary.md"), md.as_bytes(), &mut written)?;
    }
    if formats.contains(&Format::Csv) {
        for t in &tables {
            write(out_dir.join("csv").join(format!("{}.csv", t.name)), &t.csv()?, &mut written)?;
        }
    }
    if formats.contains(&Format::Svg) {
        let svg = out_dir.join("svg");
        for (combo, g) in &b.heatmaps.ground_truth {
            let title = format!("{combo}: ground-truth clicks");
            write(svg.join(format!("truth_{}.svg", file_stem(&combo.to_string()))), heatmap_svg(&title, g).as_bytes(), &mut written)?;
        }
        for (agent, g) in &b.heatmaps.agents {
            let title = format!("{agent}: clicks on original views");
            write(svg.join(format!("agent_{}.svg", file_stem(agent))), heatmap_svg(&title, g).as_bytes(), &mut written)?;
        }
        write(
            svg.join("corr_answer.svg"),
            matrix_svg("Answer correlation between combos", &b.correlations.answer).as_bytes(),
            &mut written,
        )?;
        write(
            svg.join("corr_action.svg"),
            matrix_svg("Action correlation between combos", &b.correlations.action).as_bytes(),
            &mut written,
        )?;
    }
    Ok(written)
}
