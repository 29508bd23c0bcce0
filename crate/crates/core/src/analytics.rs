//! Correlations, click heatmaps, phase quadrants, gain tables and
//! low-level image statistics.

use std::cmp::Ordering;
use std::fmt;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::NormPoint;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum CorrError {
    #[error("vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 observations, got {0}")]
    TooShort(usize),
    #[error("correlation undefined: a vector is constant or not finite")]
    Undefined,
}

fn check(x: &[f64], y: &[f64]) -> Result<(), CorrError> {
    if x.len() != y.len() {
        return Err(CorrError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(CorrError::TooShort(x.len()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(CorrError::Undefined);
    }
    Ok(())
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, CorrError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CorrError::Undefined);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && x[idx[end]] == x[idx[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64, CorrError> {
    check(x, y)?;
    pearson(x, y)
}

pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64, CorrError> {
    check(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Minimum number of paired model scores behind a matrix entry.
pub const MIN_MODELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrices {
    pub labels: Vec<String>,
    /// Mean of the SRCC and PLCC entries.
    pub combined: Vec<Vec<Option<f64>>>,
    pub srcc: Vec<Vec<Option<f64>>>,
    pub plcc: Vec<Vec<Option<f64>>>,
}

/// Correlates subsets through the scores the same models obtain on them.
///
/// `scores[i][m]` is model `m`'s mean score on subset `i`; missing scores
/// drop that model from every pair involving subset `i`. Entries with fewer
/// than [`MIN_MODELS`] paired models, or with an undefined correlation, are
/// `None`. The diagonal is 1.
pub fn subset_correlation_matrix(labels: &[String], scores: &[Vec<Option<f64>>]) -> CorrelationMatrices {
    let k = scores.len();
    let mut out = CorrelationMatrices {
        labels: labels.to_vec(),
        combined: vec![vec![None; k]; k],
        srcc: vec![vec![None; k]; k],
        plcc: vec![vec![None; k]; k],
    };
    for i in 0..k {
        for j in 0..k {
            if i == j {
                out.combined[i][j] = Some(1.0);
                out.srcc[i][j] = Some(1.0);
                out.plcc[i][j] = Some(1.0);
                continue;
            }
            let (a, b): (Vec<f64>, Vec<f64>) = scores[i]
                .iter()
                .zip(&scores[j])
                .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
                .unzip();
            if a.len() < MIN_MODELS {
                continue;
            }
            let s = srcc(&a, &b).ok();
            let p = plcc(&a, &b).ok();
            out.srcc[i][j] = s;
            out.plcc[i][j] = p;
            out.combined[i][j] = s.zip(p).map(|(s, p)| (s + p) / 2.0);
        }
    }
    out
}

pub const DEFAULT_GRID: (usize, usize) = (64, 36);

/// Click-location histogram over `[0,1]²`, stored row-major (`y` outer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatGrid {
    pub gx: usize,
    pub gy: usize,
    pub bins: Vec<f64>,
}

impl HeatGrid {
    pub fn zeros(gx: usize, gy: usize) -> Self {
        HeatGrid {
            gx,
            gy,
            bins: vec![0.0; gx * gy],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.bins[j * self.gx + i]
    }

    pub fn total(&self) -> f64 {
        self.bins.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.bins.iter().copied().fold(0.0, f64::max)
    }
}

fn bin_of(v: f64, g: usize) -> usize {
    ((v * g as f64).floor() as usize).min(g - 1)
}

/// Normalized histogram of `points`; empty input gives an all-zero grid.
pub fn build_heatmap(points: &[NormPoint], gx: usize, gy: usize) -> HeatGrid {
    assert!(gx > 0 && gy > 0, "heat grid needs at least one bin per axis");
    let mut grid = HeatGrid::zeros(gx, gy);
    if points.is_empty() {
        return grid;
    }
    let mut counts = vec![0usize; gx * gy];
    for p in points {
        counts[bin_of(p.y(), gy) * gx + bin_of(p.x(), gx)] += 1;
    }
    let n = points.len() as f64;
    grid.bins = counts.into_iter().map(|c| c as f64 / n).collect();
    grid
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("heat grids differ in shape: {0}x{1} vs {2}x{3}")]
pub struct DimensionMismatch(pub usize, pub usize, pub usize, pub usize);

/// Base-2 Jensen-Shannon divergence, in `[0, 1]`.
pub fn js_divergence(p: &HeatGrid, q: &HeatGrid) -> Result<f64, DimensionMismatch> {
    if (p.gx, p.gy) != (q.gx, q.gy) {
        return Err(DimensionMismatch(p.gx, p.gy, q.gx, q.gy));
    }
    let term = |a: f64, m: f64| if a > 0.0 { a * (a / m).log2() } else { 0.0 };
    let mut kl_p = 0.0;
    let mut kl_q = 0.0;
    for (&a, &b) in p.bins.iter().zip(&q.bins) {
        let m = (a + b) / 2.0;
        kl_p += term(a, m);
        kl_q += term(b, m);
    }
    Ok((0.5 * kl_p + 0.5 * kl_q).clamp(0.0, 1.0))
}

/// Quadrant of an (answer, action) pair relative to the population means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    P1,
    P2,
    P3,
    P4,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::P1, Phase::P2, Phase::P3, Phase::P4];
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Ties with a mean count as "not above" it.
pub fn phase_assign(answer: f64, action: f64, mean_answer: f64, mean_action: f64) -> Phase {
    match (answer > mean_answer, action > mean_action) {
        (true, true) => Phase::P1,
        (false, true) => Phase::P2,
        (false, false) => Phase::P3,
        (true, false) => Phase::P4,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub level: String,
    pub mean: f64,
    /// Change from the previous level; `None` on the first row.
    pub abs_gain: Option<f64>,
    /// Relative change in percent; `None` on the first row or after a zero mean.
    pub pct_gain: Option<f64>,
}

impl GainRow {
    /// `0.5433(+0.13, 32.51%)`-style cell text.
    pub fn cell(&self) -> String {
        let mean = fmt_fixed(self.mean, 4);
        match self.abs_gain {
            None => mean,
            Some(abs) => format!("{mean}({})", gain_cell(abs, self.pct_gain)),
        }
    }
}

pub fn gain_table(levels: &[(String, f64)]) -> Vec<GainRow> {
    let mut rows = Vec::with_capacity(levels.len());
    let mut prev: Option<f64> = None;
    for (level, mean) in levels {
        let abs_gain = prev.map(|p| mean - p);
        let pct_gain = prev.zip(abs_gain).and_then(|(p, g)| (p != 0.0).then(|| g / p * 100.0));
        rows.push(GainRow {
            level: level.clone(),
            mean: *mean,
            abs_gain,
            pct_gain,
        });
        prev = Some(*mean);
    }
    rows
}

/// Rounds half away from zero to `digits` decimals.
pub fn round_half_away(v: f64, digits: i32) -> f64 {
    let scale = 10f64.powi(digits);
    (v * scale).round() / scale
}

/// Fixed-point text after half-away-from-zero rounding; never prints `-0`.
pub fn fmt_fixed(v: f64, digits: usize) -> String {
    let r = round_half_away(v, digits as i32);
    let r = if r == 0.0 { 0.0 } else { r };
    format!("{r:.digits$}")
}

/// `+0.13, 32.51%`; an undefined percentage prints as `n/a`.
pub fn gain_cell(abs: f64, pct: Option<f64>) -> String {
    let a = fmt_fixed(abs, 2);
    let sign = if a.starts_with('-') { "" } else { "+" };
    let p = pct.map_or_else(|| "n/a".to_string(), |p| format!("{}%", fmt_fixed(p, 2)));
    format!("{sign}{a}, {p}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub luminance: f64,
    pub contrast: f64,
    pub chrominance: f64,
    pub blur: f64,
    pub spatial_information: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Luma statistics plus chroma magnitude, Laplacian variance and the
/// standard deviation of the Sobel magnitude. Filters are evaluated on
/// interior pixels only, so images narrower than 3 pixels have zero blur
/// and spatial information.
pub fn low_level_features(img: &RgbImage) -> FeatureVector {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut luma = Vec::with_capacity(w * h);
    let mut chroma = 0.0;
    for p in img.pixels() {
        let [r, g, b] = p.0.map(f64::from);
        luma.push(0.299 * r + 0.587 * g + 0.114 * b);
        let cb = -0.168736 * r - 0.331264 * g + 0.5 * b;
        let cr = 0.5 * r - 0.418688 * g - 0.081312 * b;
        chroma += (cb * cb + cr * cr).sqrt();
    }
    let (luminance, contrast) = mean_std(&luma);
    let y = |x: usize, yy: usize| luma[yy * w + x];
    let mut lap = Vec::new();
    let mut sobel = Vec::new();
    if w >= 3 && h >= 3 {
        for j in 1..h - 1 {
            for i in 1..w - 1 {
                lap.push(y(i, j - 1) + y(i - 1, j) + y(i + 1, j) + y(i, j + 1) - 4.0 * y(i, j));
                let gx = (y(i + 1, j - 1) + 2.0 * y(i + 1, j) + y(i + 1, j + 1))
                    - (y(i - 1, j - 1) + 2.0 * y(i - 1, j) + y(i - 1, j + 1));
                let gy = (y(i - 1, j + 1) + 2.0 * y(i, j + 1) + y(i + 1, j + 1))
                    - (y(i - 1, j - 1) + 2.0 * y(i, j - 1) + y(i + 1, j - 1));
                sobel.push((gx * gx + gy * gy).sqrt());
            }
        }
    }
    let blur = mean_std(&lap).1;
    FeatureVector {
        luminance,
        contrast,
        chrominance: if luma.is_empty() { 0.0 } else { chroma / luma.len() as f64 },
        blur: blur * blur,
        spatial_information: mean_std(&sobel).1,
    }
}

/// The `k` best-scoring names, highest first; ties break by name.
pub fn top_k(scores: &[(String, f64)], k: usize) -> Vec<(String, f64)> {
    let mut v = scores.to_vec();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.truncate(k);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Rank by counting: rank = #less + (#equal + 1) / 2.
    fn oracle_ranks(x: &[f64]) -> Vec<f64> {
        x.iter()
            .map(|v| {
                let less = x.iter().filter(|u| *u < v).count() as f64;
                let eq = x.iter().filter(|u| *u == v).count() as f64;
                less + (eq + 1.0) / 2.0
            })
            .collect()
    }

    /// Textbook product-moment formula in raw-sum form.
    fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let sx: f64 = x.iter().sum();
        let sy: f64 = y.iter().sum();
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|b| b * b).sum();
        (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
    }

    #[test]
    fn correlation_examples() {
        assert!((srcc(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((srcc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        let x = [0.3, 1.2, 2.0, 7.5];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((plcc(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((plcc(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(srcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(CorrError::Undefined));
        assert_eq!(plcc(&[1.0], &[1.0]), Err(CorrError::TooShort(1)));
        assert_eq!(plcc(&[1.0, 2.0], &[1.0]), Err(CorrError::LengthMismatch(2, 1)));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn correlations_match_oracles_on_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(2..=50);
            let x: Vec<f64> = (0..n).map(|_| (rng.random_range(0..10) as f64) / 3.0).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            match (srcc(&x, &y), plcc(&x, &y)) {
                (Ok(s), Ok(p)) => {
                    assert!((s - oracle_pearson(&oracle_ranks(&x), &oracle_ranks(&y))).abs() < 1e-12);
                    assert!((p - oracle_pearson(&x, &y)).abs() < 1e-12);
                }
                (Err(CorrError::Undefined), _) => assert!(x.iter().all(|v| *v == x[0])),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    proptest! {
        #[test]
        fn correlation_symmetry_and_invariance(
            pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..40),
            scale in 0.1f64..10.0, shift in -50.0f64..50.0,
        ) {
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            if let (Ok(a), Ok(b)) = (plcc(&x, &y), plcc(&y, &x)) {
                prop_assert!((a - b).abs() < 1e-12);
                let moved: Vec<f64> = x.iter().map(|v| v * scale + shift).collect();
                prop_assert!((plcc(&moved, &y).unwrap() - a).abs() < 1e-9);
                let cubed: Vec<f64> = x.iter().map(|v| v * v * v).collect();
                prop_assert!((srcc(&cubed, &y).unwrap() - srcc(&x, &y).unwrap()).abs() < 1e-12);
                prop_assert!((srcc(&x, &y).unwrap() - srcc(&y, &x).unwrap()).abs() < 1e-12);
            }
        }
    }

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn subset_matrix_against_hand_values() {
        let rows = [
            [0.1, 0.2, 0.3, 0.4, 0.5],
            [0.5, 0.4, 0.3, 0.2, 0.1],
            [0.2, 0.1, 0.4, 0.3, 0.6],
        ];
        let scores: Vec<Vec<Option<f64>>> = rows.iter().map(|r| r.iter().map(|v| Some(*v)).collect()).collect();
        let m = subset_correlation_matrix(&labels(3), &scores);
        assert_eq!(m.combined[1][1], Some(1.0));
        assert!((m.combined[0][1].unwrap() + 1.0).abs() < 1e-12);
        // Rows 0 and 2: ranks (1..5) vs (2,1,4,3,5) give srcc 0.8; deviations
        // (-2,-1,0,1,2)/10 and (-12,-22,8,-2,28)/100 give plcc 100/sqrt(10 * 1480).
        let expected_plcc = 5.0 / 37f64.sqrt();
        assert!((m.srcc[0][2].unwrap() - 0.8).abs() < 1e-12);
        assert!((m.plcc[0][2].unwrap() - expected_plcc).abs() < 1e-12);
        assert!((m.combined[2][0].unwrap() - (0.8 + expected_plcc) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn subset_matrix_reports_missing_entries() {
        let scores = vec![vec![Some(0.1), Some(0.2)], vec![Some(0.3), Some(0.1)], vec![Some(0.5), None]];
        let m = subset_correlation_matrix(&labels(3), &scores);
        assert_eq!(m.combined[0][1], None);
        assert_eq!(m.combined[2][2], Some(1.0));
        let constant = vec![vec![Some(0.1); 4], vec![Some(0.1), Some(0.2), Some(0.3), Some(0.4)]];
        let m = subset_correlation_matrix(&labels(2), &constant);
        assert_eq!(m.combined[0][1], None);
    }

    fn pt(x: f64, y: f64) -> NormPoint {
        NormPoint::new(x, y).unwrap()
    }

    #[test]
    fn heatmap_examples() {
        let g = build_heatmap(&[pt(0.0, 0.0)], 64, 36);
        assert_eq!(g.get(0, 0), 1.0);
        let g = build_heatmap(&[pt(1.0, 1.0)], 64, 36);
        assert_eq!(g.get(63, 35), 1.0);
        assert_eq!(build_heatmap(&[], 4, 3).total(), 0.0);
    }

    #[test]
    fn heatmap_matches_direct_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<NormPoint> = (0..1000).map(|_| pt(rng.random(), rng.random())).collect();
        let g = build_heatmap(&pts, 64, 36);
        assert!((g.total() - 1.0).abs() < 1e-12);
        for j in 0..36 {
            for i in 0..64 {
                let count = pts
                    .iter()
                    .filter(|p| (p.x() * 64.0) as usize == i && (p.y() * 36.0) as usize == j)
                    .count();
                assert_eq!(g.get(i, j), count as f64 / 1000.0);
            }
        }
    }

    fn grid(gx: usize, gy: usize, bins: Vec<f64>) -> HeatGrid {
        HeatGrid { gx, gy, bins }
    }

    #[test]
    fn jsd_examples() {
        let p = grid(2, 2, vec![0.5, 0.5, 0.0, 0.0]);
        let q = grid(2, 2, vec![0.0, 0.0, 0.25, 0.75]);
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        assert!((js_divergence(&p, &q).unwrap() - 1.0).abs() < 1e-12);

        let a = grid(2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        let b = grid(2, 2, vec![0.4, 0.3, 0.2, 0.1]);
        // Each bin contributes (a ln(2a/(a+b)) + b ln(2b/(a+b))) / (2 ln 2).
        let direct: f64 = [(0.1f64, 0.4f64), (0.2, 0.3), (0.3, 0.2), (0.4, 0.1)]
            .iter()
            .map(|(x, y)| (x * (2.0 * x / (x + y)).ln() + y * (2.0 * y / (x + y)).ln()) / (2.0 * 2f64.ln()))
            .sum();
        assert!((js_divergence(&a, &b).unwrap() - direct).abs() < 1e-12);
        assert!(js_divergence(&a, &grid(1, 4, a.bins.clone())).is_err());
    }

    proptest! {
        #[test]
        fn jsd_symmetric_and_bounded(raw in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 6)) {
            let (a, b): (Vec<f64>, Vec<f64>) = raw.into_iter().unzip();
            let norm = |v: Vec<f64>| {
                let s: f64 = v.iter().sum();
                if s == 0.0 { vec![1.0 / 6.0; 6] } else { v.iter().map(|x| x / s).collect() }
            };
            let p = grid(3, 2, norm(a));
            let q = grid(3, 2, norm(b));
            let d = js_divergence(&p, &q).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d, js_divergence(&q, &p).unwrap());
        }

        #[test]
        fn phases_partition(a in 0.0f64..=1.0, c in 0.0f64..=1.0, ma in 0.0f64..=1.0, mc in 0.0f64..=1.0) {
            let ph = phase_assign(a, c, ma, mc);
            let hits = [
                a > ma && c > mc,
                a <= ma && c > mc,
                a <= ma && c <= mc,
                a > ma && c <= mc,
            ];
            prop_assert_eq!(hits.iter().filter(|h| **h).count(), 1);
            prop_assert!(hits[Phase::ALL.iter().position(|p| *p == ph).unwrap()]);
        }
    }

    #[test]
    fn phase_examples() {
        assert_eq!(phase_assign(0.7, 0.5, 0.6, 0.4), Phase::P1);
        assert_eq!(phase_assign(0.7, 0.3, 0.6, 0.4), Phase::P4);
        assert_eq!(phase_assign(0.6, 0.4, 0.6, 0.4), Phase::P3);
    }

    fn levels(v: &[f64]) -> Vec<(String, f64)> {
        ["Large", "Middle", "Small"].iter().zip(v).map(|(l, m)| (l.to_string(), *m)).collect()
    }

    #[test]
    fn gain_table_reproduces_published_rows() {
        let rows = gain_table(&levels(&[0.4100, 0.5433, 0.6467]));
        assert!((rows[1].abs_gain.unwrap() - 0.1333).abs() < 1e-9);
        assert!((rows[1].pct_gain.unwrap() - 32.51).abs() < 0.02);
        assert!((rows[2].abs_gain.unwrap() - 0.1034).abs() < 1e-9);
        assert!((rows[2].pct_gain.unwrap() - 19.03).abs() < 0.02);
        assert_eq!(rows[1].cell(), "0.5433(+0.13, 32.51%)");
        assert_eq!(rows[2].cell(), "0.6467(+0.10, 19.03%)");

        let all = gain_table(&levels(&[0.3432, 0.4274, 0.5588]));
        assert!((all[1].pct_gain.unwrap() - 24.53).abs() < 0.02);
        assert!((all[2].pct_gain.unwrap() - 30.74).abs() < 0.02);
    }

    #[test]
    fn gain_edge_cases() {
        let rows = gain_table(&levels(&[0.5, 0.5, 0.0]));
        assert_eq!(rows[0].abs_gain, None);
        assert_eq!((rows[1].abs_gain, rows[1].pct_gain), (Some(0.0), Some(0.0)));
        let rows = gain_table(&levels(&[0.0, 0.2]));
        assert_eq!(rows[1].pct_gain, None);
        assert_eq!(gain_cell(0.1333, Some(32.5122)), "+0.13, 32.51%");
        assert_eq!(gain_cell(-0.004, Some(-1.0)), "+0.00, -1.00%");
        assert_eq!(gain_cell(-0.05, None), "-0.05, n/a");
        assert_eq!(fmt_fixed(0.125, 2), "0.13");
        assert_eq!(fmt_fixed(-0.125, 2), "-0.13");
    }

    #[test]
    fn features_of_flat_images() {
        let gray = low_level_features(&RgbImage::from_pixel(10, 10, image::Rgb([128, 128, 128])));
        assert_eq!((gray.contrast, gray.blur, gray.spatial_information), (0.0, 0.0, 0.0));
        let white = low_level_features(&RgbImage::from_pixel(10, 10, image::Rgb([255, 255, 255])));
        assert!((white.luminance - 255.0).abs() < 1e-9);
        assert!(white.chrominance < 1e-9);
    }

    #[test]
    fn sobel_si_on_vertical_step() {
        let img = RgbImage::from_fn(8, 8, |x, _| if x < 4 { image::Rgb([0, 0, 0]) } else { image::Rgb([255, 255, 255]) });
        let f = low_level_features(&img);
        // Interior columns 3 and 4 straddle the edge: |gx| = 4 * 255 = 1020 on
        // 12 of the 36 interior pixels, 0 elsewhere. Mean 340, so the
        // variance is (12 * 680² + 24 * 340²) / 36 = 231200.
        assert!((f.spatial_information - 231200f64.sqrt()).abs() < 1e-9);
        assert!((f.luminance - 127.5).abs() < 1e-9);
        assert!((f.contrast - 127.5).abs() < 1e-9);
        // Laplacian is +255 at column 3 and -255 at column 4: mean 0, variance 255² / 3.
        assert!((f.blur - 255.0 * 255.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn top_k_orders_by_score_then_name() {
        let s = vec![("b".to_string(), 0.5), ("a".to_string(), 0.5), ("c".to_string(), 0.9)];
        let names: Vec<_> = top_k(&s, 2).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["c", "a"]);
    }
}
