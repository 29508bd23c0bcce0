//! A small, fully offline benchmark: mock design-tool screenshots, a
//! manifest, reply scripts for every backend and a run config.
//!
//! The scripts cover the interesting paths: clicks that hit and miss,
//! validators that disagree, a sample whose comprehension fails and one on
//! which every grounding fails.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backends::{Script, ScriptFallback, ScriptedReply};
use crate::ingestion::{ManifestCrop, ManifestRecord};
use crate::model::{BBox, ComboTag, DifficultyTag, SoftwareTag, ViewLabel};

pub const WIDTH: u32 = 480;
pub const HEIGHT: u32 = 270;
pub const SAMPLES: usize = 10;
pub const DEFAULT_SEED: u64 = 2024;

/// Sample without a Small crop.
pub const NO_SMALL: usize = 3;
/// Sample without a Middle crop.
pub const NO_MIDDLE: usize = 6;
/// Sample on which the comprehender fails.
pub const COMPREHEND_FAILS: usize = 5;
/// Sample on which every grounder fails.
pub const GROUNDING_FAILS: usize = 8;

const TASKS: [(&str, &str); SAMPLES] = [
    ("Add a pressure acoustics interface to the model", "Open the Add Physics window from the Home ribbon"),
    ("Insert a ray optics study for the lens", "Click Add Study on the Study ribbon tab"),
    ("Apply a fixed constraint to the left face", "Right-click Solid Mechanics and choose Fixed Constraint"),
    ("Set the heat source power of the chip", "Select Heat Source under Heat Transfer in the model tree"),
    ("Create a new cuboid heat sink", "Press the Cuboid button in the Create toolbar"),
    ("Define the fan curve of the inlet", "Double-click the Fan object in the project tree"),
    ("Mesh the cabinet with a finer resolution", "Click Mesh in the Model ribbon and lower the maximum size"),
    ("Add a waveguide port to the antenna feed", "Use the Waveguide Port tool on the Simulation tab"),
    ("Start the frequency sweep", "Click Analyze All on the HFSS toolbar"),
    ("Show the far-field radiation pattern", "Open Results and choose Far Field Report"),
];

const COMBO_OF: [usize; SAMPLES] = [0, 1, 2, 3, 4, 5, 6, 7, 3, 7];

fn palette(s: SoftwareTag) -> ([u8; 3], [u8; 3], [u8; 3]) {
    // ribbon, side panel, canvas
    match s {
        SoftwareTag::COMSOL => ([214, 226, 240], [245, 245, 245], [250, 250, 252]),
        SoftwareTag::Flotherm => ([60, 70, 90], [205, 210, 220], [30, 32, 40]),
        SoftwareTag::ICEPAK => ([235, 235, 225], [225, 225, 215], [120, 140, 170]),
        SoftwareTag::CST => ([40, 80, 130], [235, 240, 245], [200, 205, 215]),
        SoftwareTag::HFSS => ([240, 240, 240], [250, 250, 250], [90, 90, 100]),
    }
}

fn fill(img: &mut RgbImage, r: BBox, c: [u8; 3]) {
    for y in r.y_min..=r.y_max {
        for x in r.x_min..=r.x_max {
            img.put_pixel(x, y, Rgb(c));
        }
    }
}

fn shade(c: [u8; 3], d: i32) -> [u8; 3] {
    c.map(|v| (v as i32 + d).clamp(0, 255) as u8)
}

fn rect(x0: u32, y0: u32, w: u32, h: u32) -> BBox {
    BBox::new(x0, y0, x0 + w - 1, y0 + h - 1).expect("positive size")
}

/// Draws a mock screenshot and returns it with the candidate click targets
/// (ribbon buttons, then tree rows).
fn draw(combo: ComboTag, rng: &mut ChaCha8Rng) -> (RgbImage, Vec<BBox>) {
    let (ribbon, panel, canvas) = palette(combo.software());
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb(canvas));
    fill(&mut img, rect(0, 0, WIDTH, 44), ribbon);
    fill(&mut img, rect(0, 0, WIDTH, 10), shade(ribbon, -30));
    fill(&mut img, rect(0, 44, 120, HEIGHT - 44), panel);
    fill(&mut img, rect(120, 44, 1, HEIGHT - 44), shade(panel, -60));

    let mut targets = Vec::new();
    let n_buttons = 8 + combo.index() % 4;
    for i in 0..n_buttons as u32 {
        let b = rect(6 + i * 34, 14, 28, 26);
        let tint = [rng.random_range(40..220), rng.random_range(40..220), rng.random_range(40..220)];
        fill(&mut img, b, shade(ribbon, -25));
        fill(&mut img, rect(b.x_min + 6, b.y_min + 4, 16, 14), tint);
        targets.push(b);
    }
    for i in 0..9u32 {
        let row = rect(8, 52 + i * 22, 100, 16);
        fill(&mut img, rect(row.x_min, row.y_min + 4, 8, 8), shade(panel, -90));
        let len = rng.random_range(40..90);
        fill(&mut img, rect(row.x_min + 14, row.y_min + 6, len, 4), shade(panel, -120));
        targets.push(row);
    }
    // Geometry in the canvas: a field-dependent blob with a gradient.
    let (cx, cy) = (300.0 + rng.random_range(-40.0..40.0), 160.0 + rng.random_range(-30.0..30.0));
    let radius = 50.0 + 10.0 * combo.field() as u32 as f64;
    for y in 50..HEIGHT {
        for x in 126..WIDTH {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            if d < radius {
                let t = d / radius;
                let c = [(255.0 * (1.0 - t)) as u8, (80.0 + 120.0 * t) as u8, (255.0 * t) as u8];
                img.put_pixel(x, y, Rgb(c));
            }
        }
    }
    (img, targets)
}

/// Crop of `scale` times the image that fully contains `target`.
fn crop_around(target: BBox, scale: f64) -> BBox {
    let (cw, ch) = ((WIDTH as f64 * scale) as u32, (HEIGHT as f64 * scale) as u32);
    let x0 = target.x_min.saturating_sub(cw / 4).min(WIDTH - cw);
    let y0 = target.y_min.saturating_sub(ch / 4).min(HEIGHT - ch);
    rect(x0, y0, cw, ch)
}

fn views_of(i: usize) -> Vec<ViewLabel> {
    match i {
        NO_SMALL => vec![ViewLabel::Large, ViewLabel::Middle],
        NO_MIDDLE => vec![ViewLabel::Large, ViewLabel::Small],
        _ => ViewLabel::ALL.to_vec(),
    }
}

struct ViewGeom {
    id: String,
    label: ViewLabel,
    w: u32,
    h: u32,
    /// Ground truth in the view frame.
    gt: BBox,
}

/// A pixel inside the box, or a deliberate miss well outside it.
fn click(g: &ViewGeom, hit: bool, rng: &mut ChaCha8Rng) -> (u32, u32) {
    if hit {
        let x = rng.random_range(g.gt.x_min..=g.gt.x_max);
        let y = rng.random_range(g.gt.y_min..=g.gt.y_max);
        return (x, y);
    }
    loop {
        let x = rng.random_range(0..g.w);
        let y = rng.random_range(0..g.h);
        let far_x = x + 8 < g.gt.x_min || x > g.gt.x_max + 8;
        let far_y = y + 8 < g.gt.y_min || y > g.gt.y_max + 8;
        if far_x || far_y {
            return (x, y);
        }
    }
}

fn norm_reply(g: &ViewGeom, p: (u32, u32)) -> ScriptedReply {
    ScriptedReply::text(format!("({:.4}, {:.4})", p.0 as f64 / g.w as f64, p.1 as f64 / g.h as f64))
}

fn hit_rate(base: f64, label: ViewLabel) -> f64 {
    let bonus = match label {
        ViewLabel::Large => 0.0,
        ViewLabel::Middle => 0.12,
        ViewLabel::Small => 0.22,
    };
    (base + bonus).min(0.95)
}

fn partial_answer(answer: &str, rng: &mut ChaCha8Rng) -> String {
    let words: Vec<&str> = answer.split_whitespace().collect();
    let keep = rng.random_range(words.len() / 2..words.len());
    words[..keep].join(" ")
}

fn comprehension(answer: &str, rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..10) {
        0..=4 => answer.to_string(),
        5..=7 => partial_answer(answer, rng),
        _ => "Look for the settings dialog in the Options menu".to_string(),
    }
}

fn script(entries: BTreeMap<String, ScriptedReply>) -> Script {
    Script {
        fallback: ScriptFallback::default(),
        entries,
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(v).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

pub const CONFIG: &str = r#"# Offline evaluation of the bundled synthetic set. Every backend replays a
# script, so runs are deterministic and need no network access.
dataset = "manifest.jsonl"
out = "runs"
seed = 2024
judge = "judge"
judge_runs = 5
top_k = 6

[retry]
max_attempts = 3
base_backoff = 5
max_in_flight = 8

[[backends]]
name = "qwen"
kind = "scripted"
roles = ["comprehend", "validate", "ground"]
coordinate_space = "normalized"
script = "scripts/qwen.json"

[[backends]]
name = "gpt"
kind = "scripted"
roles = ["comprehend", "ground"]
coordinate_space = "normalized"
script = "scripts/gpt.json"

[[backends]]
name = "aguvis"
kind = "scripted"
roles = ["ground"]
coordinate_space = "normalized"
script = "scripts/aguvis.json"

[[backends]]
name = "uitars"
kind = "scripted"
roles = ["ground"]
coordinate_space = "absolute_pixels"
script = "scripts/uitars.json"

[[backends]]
name = "judge"
kind = "scripted"
roles = ["judge"]
script = "scripts/judge.json"

[[agents]]
name = "edagent"
kind = "edagent"
comprehender = "qwen"
grounder = "aguvis"
validator = "qwen"

[[agents]]
name = "qwen"
kind = "mllm"
model = "qwen"

[[agents]]
name = "gpt"
kind = "mllm"
model = "gpt"

[[agents]]
name = "aguvis"
kind = "grounder"
grounder = "aguvis"

[[agents]]
name = "uitars"
kind = "grounder"
grounder = "uitars"
"#;

/// Writes the dataset, scripts and `config.toml` into `dir`.
pub fn generate(dir: &Path, seed: u64) -> io::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("scripts"))?;

    let mut records = Vec::new();
    let mut geoms = Vec::new();
    for (i, (question, answer)) in TASKS.iter().enumerate() {
        let id = format!("s{:02}", i + 1);
        let combo = ComboTag::ALL[COMBO_OF[i]];
        let (img, targets) = draw(combo, &mut rng);
        let gt = targets[rng.random_range(0..targets.len())];
        let image_path = format!("images/{id}.png");
        img.save(dir.join(&image_path)).map_err(io::Error::other)?;

        let mut crops = Vec::new();
        for label in views_of(i) {
            let r = match label {
                ViewLabel::Large => rect(0, 0, WIDTH, HEIGHT),
                ViewLabel::Middle => crop_around(gt, 0.7),
                ViewLabel::Small => crop_around(gt, 0.5),
            };
            crops.push(ManifestCrop {
                label: label.to_string(),
                rect: r.to_array(),
                image_path: None,
            });
            geoms.push(ViewGeom {
                id: id.clone(),
                label,
                w: r.width(),
                h: r.height(),
                gt: BBox::new(gt.x_min - r.x_min, gt.y_min - r.y_min, gt.x_max - r.x_min, gt.y_max - r.y_min)
                    .expect("crop contains target"),
            });
        }
        records.push(ManifestRecord {
            id,
            image_path,
            width: WIDTH,
            height: HEIGHT,
            question: question.to_string(),
            gt_answer: answer.to_string(),
            gt_bbox: gt.to_array(),
            field: combo.field().to_string(),
            software: combo.software().to_string(),
            difficulty: DifficultyTag::ALL[i % 3].to_string(),
            crops,
        });
    }

    let mut manifest = String::new();
    for r in &records {
        manifest.push_str(&serde_json::to_string(r).map_err(io::Error::other)?);
        manifest.push('\n');
    }
    fs::write(dir.join("manifest.jsonl"), manifest)?;

    let answer_of = |id: &str| TASKS[id[1..].parse::<usize>().expect("sNN") - 1].1;
    let index_of = |id: &str| id[1..].parse::<usize>().expect("sNN") - 1;

    let mut qwen = BTreeMap::new();
    let mut gpt = BTreeMap::new();
    let mut aguvis = BTreeMap::new();
    let mut uitars = BTreeMap::new();
    for g in &geoms {
        let prefix = format!("{}/{}", g.id, g.label);
        let i = index_of(&g.id);
        if i != COMPREHEND_FAILS {
            qwen.insert(format!("{prefix}/comprehend"), ScriptedReply::text(comprehension(answer_of(&g.id), &mut rng)));
        }
        gpt.insert(format!("{prefix}/comprehend"), ScriptedReply::text(comprehension(answer_of(&g.id), &mut rng)));

        let qwen_hit = rng.random_bool(hit_rate(0.25, g.label));
        qwen.insert(format!("{prefix}/ground/question"), norm_reply(g, click(g, qwen_hit, &mut rng)));
        let gpt_hit = rng.random_bool(hit_rate(0.15, g.label));
        gpt.insert(
            format!("{prefix}/ground/question"),
            ScriptedReply::text(format!("I would click at {}", norm_reply(g, click(g, gpt_hit, &mut rng)).text)),
        );
        let px = click(g, rng.random_bool(hit_rate(0.35, g.label)), &mut rng);
        uitars.insert(format!("{prefix}/ground/question"), ScriptedReply::text(format!("click({}, {})", px.0, px.1)));

        if i == GROUNDING_FAILS {
            continue;
        }
        let answer_hit = rng.random_bool(hit_rate(0.55, g.label));
        let question_hit = rng.random_bool(hit_rate(0.4, g.label));
        aguvis.insert(format!("{prefix}/ground/answer"), norm_reply(g, click(g, answer_hit, &mut rng)));
        aguvis.insert(format!("{prefix}/ground/question"), norm_reply(g, click(g, question_hit, &mut rng)));
        // The validator leans towards candidates that hit, with noise.
        for (which, hit) in [(0, answer_hit), (1, question_hit)] {
            let margin: f64 = if hit { 1.5 } else { -1.0 } + rng.random_range(-1.5..1.5);
            let yes = -0.2 - (-margin).max(0.0);
            let no = -0.2 - margin.max(0.0);
            qwen.insert(
                format!("{prefix}/validate/{which}"),
                ScriptedReply::text(if margin > 0.0 { "Yes" } else { "No" })
                    .with_logprobs(&[("Yes", yes), ("No", no)]),
            );
        }
    }

    write_json(&dir.join("scripts/qwen.json"), &script(qwen))?;
    write_json(&dir.join("scripts/gpt.json"), &script(gpt))?;
    write_json(&dir.join("scripts/aguvis.json"), &script(aguvis))?;
    write_json(&dir.join("scripts/uitars.json"), &script(uitars))?;
    write_json(
        &dir.join("scripts/judge.json"),
        &Script {
            fallback: ScriptFallback::OverlapJudge,
            entries: BTreeMap::new(),
        },
    )?;
    fs::write(dir.join("config.toml"), CONFIG)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingestion::{load_manifest, validate_manifest, LoadOptions};

    #[test]
    fn generated_set_is_valid_and_covers_every_combo() {
        let dir = tempfile::tempdir().unwrap();
        generate(dir.path(), DEFAULT_SEED).unwrap();
        let report = validate_manifest(&dir.path().join("manifest.jsonl"), LoadOptions::default()).unwrap();
        assert!(report.is_clean(), "{:?}", report.violations);
        let d = load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(d.len(), SAMPLES);
        for c in ComboTag::ALL {
            assert!(d.samples.iter().any(|s| s.combo == c), "{c} missing");
        }
        assert!(d.samples[NO_SMALL].crop(ViewLabel::Small).is_none());
        assert!(d.samples[NO_MIDDLE].crop(ViewLabel::Middle).is_none());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate(a.path(), 7).unwrap();
        generate(b.path(), 7).unwrap();
        for f in ["manifest.jsonl", "scripts/qwen.json", "scripts/uitars.json", "images/s04.png"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }
}
