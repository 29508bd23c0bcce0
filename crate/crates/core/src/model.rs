//! Domain types and the geometric primitives shared by every other module.
//!
//! Pixel coordinates use a top-left origin with x growing rightward and y
//! growing downward. Bounding boxes are inclusive on all four edges.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("coordinate frame mismatch: box in {bbox:?} frame, point in {point:?} frame")]
    FrameMismatch { bbox: ViewLabel, point: ViewLabel },
    #[error("invalid bounding box [{0}, {1}, {2}, {3}]: min must not exceed max")]
    InvalidBBox(u32, u32, u32, u32),
    #[error("bounding box is not inside the view (partially contained: {partial})")]
    NotInView { partial: bool },
    #[error("normalized coordinate is not finite: ({0}, {1})")]
    NonFinite(f64, f64),
    #[error("image dimensions must be at least 1x1, got {0}x{1}")]
    EmptyImage(u32, u32),
    #[error("{field} / {software} is not a valid software-field combination")]
    InvalidCombo {
        field: FieldTag,
        software: SoftwareTag,
    },
    #[error("unknown tag `{0}`")]
    UnknownTag(String),
}

/// Physical field of a design task. Electro- prefixes are folded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FieldTag {
    Acoustic,
    Optical,
    Mechanical,
    Thermal,
    Magnetical,
}

impl FieldTag {
    pub const ALL: [FieldTag; 5] = [
        FieldTag::Acoustic,
        FieldTag::Optical,
        FieldTag::Mechanical,
        FieldTag::Thermal,
        FieldTag::Magnetical,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[allow(clippy::upper_case_acronyms)]
pub enum SoftwareTag {
    COMSOL,
    Flotherm,
    ICEPAK,
    CST,
    HFSS,
}

impl SoftwareTag {
    pub const ALL: [SoftwareTag; 5] = [
        SoftwareTag::COMSOL,
        SoftwareTag::Flotherm,
        SoftwareTag::ICEPAK,
        SoftwareTag::CST,
        SoftwareTag::HFSS,
    ];

    /// Two-letter prefix used in combo names (`CO-Thermal`, `Fl-Thermal`, ...).
    pub fn short(self) -> &'static str {
        match self {
            SoftwareTag::COMSOL => "CO",
            SoftwareTag::Flotherm => "Fl",
            SoftwareTag::ICEPAK => "IC",
            SoftwareTag::CST => "CS",
            SoftwareTag::HFSS => "HF",
        }
    }
}

macro_rules! tag_display {
    ($ty:ty) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                fmt::Debug::fmt(self, f)
            }
        }

        impl FromStr for $ty {
            type Err = ModelError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|t| t.to_string().eq_ignore_ascii_case(s.trim()))
                    .ok_or_else(|| ModelError::UnknownTag(s.to_string()))
            }
        }
    };
}

tag_display!(FieldTag);
tag_display!(SoftwareTag);
tag_display!(DifficultyTag);
tag_display!(ViewLabel);

/// A validated software-field pair; only eight pairs exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ComboTag {
    software: SoftwareTag,
    field: FieldTag,
}

impl TryFrom<String> for ComboTag {
    type Error = ModelError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ComboTag> for String {
    fn from(c: ComboTag) -> Self {
        c.to_string()
    }
}

impl ComboTag {
    /// The eight valid combinations, in the canonical table order.
    pub const ALL: [ComboTag; 8] = [
        ComboTag::raw(SoftwareTag::COMSOL, FieldTag::Acoustic),
        ComboTag::raw(SoftwareTag::COMSOL, FieldTag::Optical),
        ComboTag::raw(SoftwareTag::COMSOL, FieldTag::Mechanical),
        ComboTag::raw(SoftwareTag::COMSOL, FieldTag::Thermal),
        ComboTag::raw(SoftwareTag::Flotherm, FieldTag::Thermal),
        ComboTag::raw(SoftwareTag::ICEPAK, FieldTag::Thermal),
        ComboTag::raw(SoftwareTag::CST, FieldTag::Magnetical),
        ComboTag::raw(SoftwareTag::HFSS, FieldTag::Magnetical),
    ];

    const fn raw(software: SoftwareTag, field: FieldTag) -> Self {
        ComboTag { software, field }
    }

    pub fn new(field: FieldTag, software: SoftwareTag) -> Result<Self, ModelError> {
        let c = ComboTag::raw(software, field);
        if ComboTag::ALL.contains(&c) {
            Ok(c)
        } else {
            Err(ModelError::InvalidCombo { field, software })
        }
    }

    pub fn field(self) -> FieldTag {
        self.field
    }

    pub fn software(self) -> SoftwareTag {
        self.software
    }

    /// Position in [`ComboTag::ALL`].
    pub fn index(self) -> usize {
        ComboTag::ALL.iter().position(|c| *c == self).expect("validated combo")
    }
}

impl fmt::Display for ComboTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.software.short(), self.field)
    }
}

impl FromStr for ComboTag {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ComboTag::ALL
            .iter()
            .copied()
            .find(|c| c.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| ModelError::UnknownTag(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DifficultyTag {
    Easy,
    Normal,
    Hard,
}

impl DifficultyTag {
    pub const ALL: [DifficultyTag; 3] = [DifficultyTag::Easy, DifficultyTag::Normal, DifficultyTag::Hard];
}

/// Resolution view of a sample. `Large` is the full screenshot, so it
/// doubles as the original coordinate frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
pub enum ViewLabel {
    #[default]
    Large,
    Middle,
    Small,
}

impl ViewLabel {
    pub const ALL: [ViewLabel; 3] = [ViewLabel::Large, ViewLabel::Middle, ViewLabel::Small];
}

/// Inclusive pixel rectangle in the frame of a stated view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
    #[serde(default)]
    pub frame: ViewLabel,
}

impl BBox {
    /// Box in the original (Large) frame.
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self, ModelError> {
        if x_min > x_max || y_min > y_max {
            return Err(ModelError::InvalidBBox(x_min, y_min, x_max, y_max));
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
            frame: ViewLabel::Large,
        })
    }

    pub fn from_array(a: [u32; 4]) -> Result<Self, ModelError> {
        BBox::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [u32; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn in_frame(mut self, frame: ViewLabel) -> Self {
        self.frame = frame;
        self
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min + 1
    }

    /// The whole `width x height` lattice.
    pub fn full(width: u32, height: u32) -> Result<Self, ModelError> {
        if width == 0 || height == 0 {
            return Err(ModelError::EmptyImage(width, height));
        }
        BBox::new(0, 0, width - 1, height - 1)
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.x_max < width && self.y_max < height
    }

    fn contains_box(&self, other: &BBox) -> bool {
        other.x_min >= self.x_min
            && other.x_max <= self.x_max
            && other.y_min >= self.y_min
            && other.y_max <= self.y_max
    }

    fn intersects(&self, other: &BBox) -> bool {
        other.x_min <= self.x_max
            && other.x_max >= self.x_min
            && other.y_min <= self.y_max
            && other.y_max >= self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min as f64 + self.x_max as f64) / 2.0,
            (self.y_min as f64 + self.y_max as f64) / 2.0,
        )
    }
}

/// Click location relative to image size; clamped into `[0,1]²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormPoint {
    x: f64,
    y: f64,
}

impl NormPoint {
    pub fn new(x: f64, y: f64) -> Result<Self, ModelError> {
        if !x.is_finite() || !y.is_finite() {
            return Err(ModelError::NonFinite(x, y));
        }
        Ok(NormPoint {
            x: x.clamp(0.0, 1.0),
            y: y.clamp(0.0, 1.0),
        })
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelPoint {
    pub x: u32,
    pub y: u32,
    #[serde(default)]
    pub frame: ViewLabel,
}

impl PixelPoint {
    pub fn new(x: u32, y: u32, frame: ViewLabel) -> Self {
        PixelPoint { x, y, frame }
    }
}

/// Raster dimensions plus the file the raster comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub width: u32,
    pub height: u32,
    /// Path relative to the dataset root.
    pub image_ref: String,
    #[serde(default)]
    pub frame: ViewLabel,
}

impl ImageMeta {
    pub fn new(width: u32, height: u32, image_ref: impl Into<String>) -> Result<Self, ModelError> {
        if width == 0 || height == 0 {
            return Err(ModelError::EmptyImage(width, height));
        }
        Ok(ImageMeta {
            width,
            height,
            image_ref: image_ref.into(),
            frame: ViewLabel::Large,
        })
    }
}

/// A crop rectangle (original frame, inclusive) for one resolution view.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub label: ViewLabel,
    pub rect: BBox,
    /// Pre-rendered crop raster, when the dataset ships one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
}

impl CropSpec {
    pub fn area_ratio(&self, original: &ImageMeta) -> f64 {
        (self.rect.width() as f64 * self.rect.height() as f64)
            / (original.width as f64 * original.height as f64)
    }
}

pub fn bbox_contains(b: &BBox, p: &PixelPoint) -> Result<bool, ModelError> {
    if b.frame != p.frame {
        return Err(ModelError::FrameMismatch {
            bbox: b.frame,
            point: p.frame,
        });
    }
    Ok(b.x_min <= p.x && p.x <= b.x_max && b.y_min <= p.y && p.y <= b.y_max)
}

/// Maps a normalized point onto the pixel lattice of `m` with
/// round-half-up, saturating at the last pixel (x = 1.0 would land one past it).
pub fn denormalize(p: &NormPoint, m: &ImageMeta) -> PixelPoint {
    PixelPoint {
        x: round_to_lattice(p.x, m.width),
        y: round_to_lattice(p.y, m.height),
        frame: m.frame,
    }
}

fn round_to_lattice(v: f64, dim: u32) -> u32 {
    let px = (v * dim as f64 + 0.5).floor();
    (px.max(0.0) as u64).min(dim as u64 - 1) as u32
}

/// Translates an original-frame box into the frame of crop `c`.
///
/// Boxes that are not fully inside the crop are rejected; clipping would
/// silently change what counts as a correct click.
pub fn remap_bbox_to_crop(b: &BBox, c: &CropSpec) -> Result<BBox, ModelError> {
    if !c.rect.contains_box(b) {
        return Err(ModelError::NotInView {
            partial: c.rect.intersects(b),
        });
    }
    Ok(BBox {
        x_min: b.x_min - c.rect.x_min,
        y_min: b.y_min - c.rect.y_min,
        x_max: b.x_max - c.rect.x_min,
        y_max: b.y_max - c.rect.y_min,
        frame: c.label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x0: u32, y0: u32, x1: u32, y1: u32) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn meta(w: u32, h: u32) -> ImageMeta {
        ImageMeta::new(w, h, "img.png").unwrap()
    }

    fn crop(label: ViewLabel, rect: BBox) -> CropSpec {
        CropSpec {
            label,
            rect,
            image_path: None,
        }
    }

    #[test]
    fn contains_examples() {
        let bx = b(10, 10, 20, 20);
        let at = |x, y| PixelPoint::new(x, y, ViewLabel::Large);
        assert!(bbox_contains(&bx, &at(15, 15)).unwrap());
        assert!(bbox_contains(&bx, &at(20, 10)).unwrap());
        assert!(!bbox_contains(&bx, &at(21, 15)).unwrap());
    }

    #[test]
    fn contains_rejects_frame_mismatch() {
        let bx = b(10, 10, 20, 20).in_frame(ViewLabel::Small);
        let err = bbox_contains(&bx, &PixelPoint::new(15, 15, ViewLabel::Large)).unwrap_err();
        assert!(matches!(err, ModelError::FrameMismatch { .. }));
    }

    #[test]
    fn contains_matches_four_comparisons_on_small_grid() {
        for x0 in 0..6 {
            for x1 in x0..6 {
                for y0 in 0..4 {
                    for y1 in y0..4 {
                        let bx = b(x0, y0, x1, y1);
                        for px in 0..7 {
                            for py in 0..5 {
                                let expected = px >= x0 && px <= x1 && py >= y0 && py <= y1;
                                let p = PixelPoint::new(px, py, ViewLabel::Large);
                                assert_eq!(bbox_contains(&bx, &p).unwrap(), expected);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn denormalize_examples() {
        let m = meta(3840, 2160);
        let p = |x, y| NormPoint::new(x, y).unwrap();
        assert_eq!(denormalize(&p(0.5, 0.5), &m), PixelPoint::new(1920, 1080, ViewLabel::Large));
        assert_eq!(denormalize(&p(0.0, 0.0), &m), PixelPoint::new(0, 0, ViewLabel::Large));
        assert_eq!(denormalize(&p(0.0, 0.0), &meta(1, 1)), PixelPoint::new(0, 0, ViewLabel::Large));
        assert_eq!(denormalize(&p(1.0, 1.0), &m), PixelPoint::new(3839, 2159, ViewLabel::Large));
    }

    #[test]
    fn norm_point_clamps_and_rejects_nan() {
        let p = NormPoint::new(-0.2, 1.7).unwrap();
        assert_eq!((p.x(), p.y()), (0.0, 1.0));
        assert!(NormPoint::new(f64::NAN, 0.1).is_err());
    }

    #[test]
    fn remap_examples() {
        let c = crop(ViewLabel::Middle, b(100, 50, 400, 300));
        let r = remap_bbox_to_crop(&b(100, 50, 120, 60), &c).unwrap();
        assert_eq!(r.to_array(), [0, 0, 20, 10]);
        assert_eq!(r.frame, ViewLabel::Middle);

        let c = crop(ViewLabel::Large, b(0, 0, 99, 99));
        assert_eq!(remap_bbox_to_crop(&b(0, 0, 10, 10), &c).unwrap().to_array(), [0, 0, 10, 10]);

        let c = crop(ViewLabel::Small, b(10, 10, 50, 50));
        assert_eq!(
            remap_bbox_to_crop(&b(5, 5, 8, 8), &c).unwrap_err(),
            ModelError::NotInView { partial: false }
        );
        assert_eq!(
            remap_bbox_to_crop(&b(5, 5, 12, 12), &c).unwrap_err(),
            ModelError::NotInView { partial: true }
        );
    }

    #[test]
    fn combos() {
        assert_eq!(ComboTag::ALL.len(), 8);
        assert!(ComboTag::new(FieldTag::Acoustic, SoftwareTag::Flotherm).is_err());
        let c = ComboTag::new(FieldTag::Thermal, SoftwareTag::ICEPAK).unwrap();
        assert_eq!(c.to_string(), "IC-Thermal");
        assert_eq!("hf-magnetical".parse::<ComboTag>().unwrap().index(), 7);
        let valid = FieldTag::ALL
            .iter()
            .flat_map(|f| SoftwareTag::ALL.iter().map(move |s| (*f, *s)))
            .filter(|(f, s)| ComboTag::new(*f, *s).is_ok())
            .count();
        assert_eq!(valid, 8);
    }

    #[test]
    fn combo_serde_rejects_invalid_pair() {
        assert!(serde_json::from_str::<ComboTag>(r#""CS-Thermal""#).is_err());
        let c: ComboTag = serde_json::from_str(r#""Fl-Thermal""#).unwrap();
        assert_eq!(serde_json::to_string(&c).unwrap(), r#""Fl-Thermal""#);
    }

    proptest! {
        #[test]
        fn denormalize_stays_on_lattice(x in 0.0f64..=1.0, y in 0.0f64..=1.0, w in 1u32..5000, h in 1u32..5000) {
            let p = denormalize(&NormPoint::new(x, y).unwrap(), &meta(w, h));
            prop_assert!(p.x < w && p.y < h);
        }

        #[test]
        fn denormalize_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0, w in 1u32..5000) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let m = meta(w, w);
            let plo = denormalize(&NormPoint::new(lo, lo).unwrap(), &m);
            let phi = denormalize(&NormPoint::new(hi, hi).unwrap(), &m);
            prop_assert!(plo.x <= phi.x && plo.y <= phi.y);
        }

        #[test]
        fn remap_then_translate_back_is_identity(
            cx in 0u32..200, cy in 0u32..200, cw in 1u32..200, ch in 1u32..200,
            fx in 0.0f64..1.0, fy in 0.0f64..1.0, fw in 0.0f64..1.0, fh in 0.0f64..1.0,
        ) {
            let rect = b(cx, cy, cx + cw - 1, cy + ch - 1);
            let x0 = cx + (fx * cw as f64) as u32;
            let y0 = cy + (fy * ch as f64) as u32;
            let x1 = x0 + ((rect.x_max - x0) as f64 * fw) as u32;
            let y1 = y0 + ((rect.y_max - y0) as f64 * fh) as u32;
            let gt = b(x0, y0, x1, y1);
            let r = remap_bbox_to_crop(&gt, &crop(ViewLabel::Middle, rect)).unwrap();
            let back = [r.x_min + cx, r.y_min + cy, r.x_max + cx, r.y_max + cy];
            prop_assert_eq!(back, gt.to_array());
        }
    }
}
