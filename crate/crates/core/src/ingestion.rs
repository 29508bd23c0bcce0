//! Dataset manifests: loading, validation and resolution views.
//!
//! A manifest is UTF-8 with one JSON object per line. Image paths are
//! resolved relative to the directory holding the manifest.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{
    remap_bbox_to_crop, BBox, ComboTag, CropSpec, DifficultyTag, FieldTag, ImageMeta, ModelError,
    SoftwareTag, ViewLabel,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: duplicate sample id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: sample `{id}`: {detail}")]
    Bounds { line: usize, id: String, detail: String },
    #[error("line {line}: sample `{id}`: {field} / {software} is not a valid combination")]
    InvalidCombo {
        line: usize,
        id: String,
        field: String,
        software: String,
    },
    #[error("line {line}: sample `{id}`: {detail}")]
    Invalid { line: usize, id: String, detail: String },
    #[error("line {line}: sample `{id}`: image: {detail}")]
    Image { line: usize, id: String, detail: String },
    #[error("sample `{sample}` has no {label} view")]
    MissingView { sample: String, label: ViewLabel },
    #[error("sample `{sample}`: ground-truth box is not inside the {label} view (partial: {partial})")]
    NotInView {
        sample: String,
        label: ViewLabel,
        partial: bool,
    },
    #[error("sample `{sample}`: cannot decode raster {path}: {detail}")]
    Raster {
        sample: String,
        path: PathBuf,
        detail: String,
    },
}

impl IngestError {
    /// Manifest line the violation refers to, when there is one.
    pub fn line(&self) -> Option<usize> {
        match self {
            IngestError::Parse { line, .. }
            | IngestError::DuplicateId { line, .. }
            | IngestError::Bounds { line, .. }
            | IngestError::InvalidCombo { line, .. }
            | IngestError::Invalid { line, .. }
            | IngestError::Image { line, .. } => Some(*line),
            _ => None,
        }
    }
}

/// On-disk shape of one manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    pub question: String,
    pub gt_answer: String,
    pub gt_bbox: [u32; 4],
    pub field: String,
    pub software: String,
    pub difficulty: String,
    pub crops: Vec<ManifestCrop>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCrop {
    pub label: String,
    pub rect: [u32; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image: ImageMeta,
    pub question: String,
    pub gt_answer: String,
    pub gt_bbox: BBox,
    pub combo: ComboTag,
    pub difficulty: DifficultyTag,
    pub crops: Vec<CropSpec>,
}

impl Sample {
    pub fn crop(&self, label: ViewLabel) -> Option<&CropSpec> {
        self.crops.iter().find(|c| c.label == label)
    }

    pub fn to_record(&self) -> ManifestRecord {
        ManifestRecord {
            id: self.id.clone(),
            image_path: self.image.image_ref.clone(),
            width: self.image.width,
            height: self.image.height,
            question: self.question.clone(),
            gt_answer: self.gt_answer.clone(),
            gt_bbox: self.gt_bbox.to_array(),
            field: self.combo.field().to_string(),
            software: self.combo.software().to_string(),
            difficulty: self.difficulty.to_string(),
            crops: self
                .crops
                .iter()
                .map(|c| ManifestCrop {
                    label: c.label.to_string(),
                    rect: c.rect.to_array(),
                    image_path: c.image_path.clone(),
                })
                .collect(),
        }
    }
}

/// A resolution-specific view of a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleView {
    pub sample_id: String,
    pub label: ViewLabel,
    pub view_meta: ImageMeta,
    pub view_bbox: BBox,
    /// Crop rectangle in the original frame.
    pub crop_rect: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Hex SHA-256 of the manifest bytes.
    pub manifest_hash: String,
    /// Directory image paths are relative to.
    pub root: PathBuf,
}

impl Dataset {
    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Read each referenced image header and compare its dimensions.
    pub check_images: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { check_images: true }
    }
}

#[derive(Debug, Default)]
pub struct ValidationReport {
    pub records: usize,
    pub valid: usize,
    pub violations: Vec<IngestError>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn load_manifest(path: &Path) -> Result<Dataset, IngestError> {
    load_manifest_with(path, LoadOptions::default())
}

/// Loads and validates a manifest, failing on the first violation.
pub fn load_manifest_with(path: &Path, opts: LoadOptions) -> Result<Dataset, IngestError> {
    let (dataset, mut violations) = scan_manifest(path, opts)?;
    if violations.is_empty() {
        Ok(dataset)
    } else {
        Err(violations.swap_remove(0))
    }
}

/// Runs every check and reports all violations instead of stopping early.
pub fn validate_manifest(path: &Path, opts: LoadOptions) -> Result<ValidationReport, IngestError> {
    let (dataset, violations) = scan_manifest(path, opts)?;
    let records = dataset.samples.len() + violating_lines(&violations);
    Ok(ValidationReport {
        records,
        valid: dataset.samples.len(),
        violations,
    })
}

fn violating_lines(v: &[IngestError]) -> usize {
    v.iter().filter_map(IngestError::line).collect::<HashSet<_>>().len()
}

/// Hex SHA-256 of the raw manifest bytes.
pub fn manifest_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn scan_manifest(path: &Path, opts: LoadOptions) -> Result<(Dataset, Vec<IngestError>), IngestError> {
    let bytes = fs::read(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let manifest_hash = manifest_digest(&bytes);
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = String::from_utf8(bytes).map_err(|e| IngestError::Parse {
        line: 0,
        msg: format!("manifest is not UTF-8: {e}"),
    })?;

    let mut samples = Vec::new();
    let mut violations = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = match serde_json::from_str(raw) {
            Ok(r) => r,
            Err(e) => {
                violations.push(IngestError::Parse {
                    line,
                    msg: e.to_string(),
                });
                continue;
            }
        };
        if !seen.insert(record.id.clone()) {
            violations.push(IngestError::DuplicateId {
                line,
                id: record.id.clone(),
            });
            continue;
        }
        let mut errs = Vec::new();
        let sample = sample_from_record(&record, line, &mut errs);
        if opts.check_images && errs.is_empty() {
            if let Some(s) = &sample {
                check_images(s, &root, line, &mut errs);
            }
        }
        match sample {
            Some(s) if errs.is_empty() => samples.push(s),
            _ => violations.extend(errs),
        }
    }

    Ok((
        Dataset {
            samples,
            manifest_hash,
            root,
        },
        violations,
    ))
}

fn sample_from_record(r: &ManifestRecord, line: usize, errs: &mut Vec<IngestError>) -> Option<Sample> {
    let id = r.id.clone();
    let invalid = |detail: String| IngestError::Invalid {
        line,
        id: id.clone(),
        detail,
    };
    if r.id.trim().is_empty() {
        errs.push(invalid("id is empty".into()));
    }
    if r.question.trim().is_empty() {
        errs.push(invalid("question is empty".into()));
    }
    if r.gt_answer.trim().is_empty() {
        errs.push(invalid("gt_answer is empty".into()));
    }

    let image = match ImageMeta::new(r.width, r.height, r.image_path.clone()) {
        Ok(m) => Some(m),
        Err(e) => {
            errs.push(invalid(e.to_string()));
            None
        }
    };

    let gt_bbox = match BBox::from_array(r.gt_bbox) {
        Ok(b) if b.fits_within(r.width, r.height) => Some(b),
        Ok(b) => {
            errs.push(IngestError::Bounds {
                line,
                id: id.clone(),
                detail: format!(
                    "gt_bbox {:?} exceeds image {}x{}",
                    b.to_array(),
                    r.width,
                    r.height
                ),
            });
            None
        }
        Err(e) => {
            errs.push(invalid(format!("gt_bbox: {e}")));
            None
        }
    };

    let field = r.field.parse::<FieldTag>();
    let software = r.software.parse::<SoftwareTag>();
    let combo = match (&field, &software) {
        (Ok(f), Ok(s)) => match ComboTag::new(*f, *s) {
            Ok(c) => Some(c),
            Err(_) => {
                errs.push(IngestError::InvalidCombo {
                    line,
                    id: id.clone(),
                    field: r.field.clone(),
                    software: r.software.clone(),
                });
                None
            }
        },
        _ => {
            for e in [field.err(), software.err()].into_iter().flatten() {
                errs.push(invalid(e.to_string()));
            }
            None
        }
    };

    let difficulty = match r.difficulty.parse::<DifficultyTag>() {
        Ok(d) => Some(d),
        Err(e) => {
            errs.push(invalid(e.to_string()));
            None
        }
    };

    let mut crops: Vec<CropSpec> = Vec::new();
    for c in &r.crops {
        let label = match c.label.parse::<ViewLabel>() {
            Ok(l) => l,
            Err(e) => {
                errs.push(invalid(format!("crop: {e}")));
                continue;
            }
        };
        if crops.iter().any(|x| x.label == label) {
            errs.push(invalid(format!("more than one {label} crop")));
            continue;
        }
        let rect = match BBox::from_array(c.rect) {
            Ok(rect) => rect,
            Err(e) => {
                errs.push(invalid(format!("{label} crop: {e}")));
                continue;
            }
        };
        if !rect.fits_within(r.width, r.height) {
            errs.push(IngestError::Bounds {
                line,
                id: id.clone(),
                detail: format!("{label} crop {:?} exceeds image {}x{}", c.rect, r.width, r.height),
            });
            continue;
        }
        if label == ViewLabel::Large && BBox::full(r.width, r.height).ok() != Some(rect) {
            errs.push(invalid(format!("Large crop {:?} must cover the full image", c.rect)));
            continue;
        }
        crops.push(CropSpec {
            label,
            rect,
            image_path: c.image_path.clone(),
        });
    }
    let large_listed = r.crops.iter().any(|c| c.label.eq_ignore_ascii_case("Large"));
    if !large_listed {
        errs.push(invalid("crops must include a Large view".into()));
    }

    Some(Sample {
        id: r.id.clone(),
        image: image?,
        question: r.question.clone(),
        gt_answer: r.gt_answer.clone(),
        gt_bbox: gt_bbox?,
        combo: combo?,
        difficulty: difficulty?,
        crops,
    })
}

fn check_images(s: &Sample, root: &Path, line: usize, errs: &mut Vec<IngestError>) {
    let mut check = |rel: &str, w: u32, h: u32| match image::image_dimensions(root.join(rel)) {
        Ok((iw, ih)) if (iw, ih) == (w, h) => {}
        Ok((iw, ih)) => errs.push(IngestError::Image {
            line,
            id: s.id.clone(),
            detail: format!("{rel} is {iw}x{ih}, manifest says {w}x{h}"),
        }),
        Err(e) => errs.push(IngestError::Image {
            line,
            id: s.id.clone(),
            detail: format!("{rel}: {e}"),
        }),
    };
    check(&s.image.image_ref, s.image.width, s.image.height);
    for c in &s.crops {
        if let Some(p) = &c.image_path {
            check(p, c.rect.width(), c.rect.height());
        }
    }
}

/// Writes `d` back in manifest form.
pub fn save_manifest(d: &Dataset, path: &Path) -> Result<(), IngestError> {
    let io = |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    for s in &d.samples {
        let line = serde_json::to_string(&s.to_record()).expect("manifest records serialize");
        writeln!(f, "{line}").map_err(io)?;
    }
    Ok(())
}

pub fn derive_view(s: &Sample, label: ViewLabel) -> Result<SampleView, IngestError> {
    let crop = s.crop(label).ok_or_else(|| IngestError::MissingView {
        sample: s.id.clone(),
        label,
    })?;
    let view_bbox = remap_bbox_to_crop(&s.gt_bbox, crop).map_err(|e| match e {
        ModelError::NotInView { partial } => IngestError::NotInView {
            sample: s.id.clone(),
            label,
            partial,
        },
        other => unreachable!("remap only fails with NotInView: {other}"),
    })?;
    let view_meta = ImageMeta {
        width: crop.rect.width(),
        height: crop.rect.height(),
        image_ref: crop.image_path.clone().unwrap_or_else(|| s.image.image_ref.clone()),
        frame: label,
    };
    Ok(SampleView {
        sample_id: s.id.clone(),
        label,
        view_meta,
        view_bbox,
        crop_rect: crop.rect,
    })
}

/// Decodes the raster for `view`: either the pre-rendered crop file or the
/// matching sub-rectangle of the original screenshot.
pub fn load_view_raster(root: &Path, s: &Sample, view: &SampleView) -> Result<RgbImage, IngestError> {
    let crop = s.crop(view.label).ok_or_else(|| IngestError::MissingView {
        sample: s.id.clone(),
        label: view.label,
    })?;
    let path = root.join(&view.view_meta.image_ref);
    let raster_err = |detail: String| IngestError::Raster {
        sample: s.id.clone(),
        path: path.clone(),
        detail,
    };
    let img = image::open(&path).map_err(|e| raster_err(e.to_string()))?.to_rgb8();
    if crop.image_path.is_some() {
        if img.dimensions() != (view.view_meta.width, view.view_meta.height) {
            return Err(raster_err(format!(
                "crop raster is {:?}, expected {}x{}",
                img.dimensions(),
                view.view_meta.width,
                view.view_meta.height
            )));
        }
        return Ok(img);
    }
    if img.dimensions() != (s.image.width, s.image.height) {
        return Err(raster_err(format!(
            "raster is {:?}, manifest says {}x{}",
            img.dimensions(),
            s.image.width,
            s.image.height
        )));
    }
    if view.label == ViewLabel::Large {
        return Ok(img);
    }
    let r = view.crop_rect;
    Ok(image::imageops::crop_imm(&img, r.x_min, r.y_min, r.width(), r.height()).to_image())
}

/// Seeded permutation of sample ids; same seed, same order.
pub fn shuffled_order(d: &Dataset, seed: u64) -> Vec<String> {
    let mut ids: Vec<String> = d.samples.iter().map(|s| s.id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    ids
}
