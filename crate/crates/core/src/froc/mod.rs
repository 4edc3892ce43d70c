//! Image-based and exam-based FROC analysis.
//!
//! False positives are counted on normal images only (images without
//! annotated lesions) and averaged over the number of normal images. A lesion
//! is detected at threshold `T` when some candidate with score `>= T` lies
//! within the hit radius of its centre of mass; one candidate may detect
//! several lesions.

mod plot;

pub use plot::froc_svg;

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::candidates::{Candidate, LesionPoint};
use crate::error::{invalid_arg, Error, Result};

pub const HIT_RADIUS_MM: f64 = 15.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LesionMatch {
    pub lesion_id: String,
    /// Highest score among candidates within the hit radius.
    pub matched_score: Option<f32>,
}

impl LesionMatch {
    pub fn hit_at(&self, threshold: f32) -> bool {
        self.matched_score.is_some_and(|s| s >= threshold)
    }
}

/// Matching outcome for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatch {
    pub image_id: String,
    pub exam_id: String,
    pub lesions: Vec<LesionMatch>,
    /// Scores of all candidates on a normal image; empty for lesion images.
    pub false_positive_scores: Vec<f32>,
    /// Scores of all candidates on the image.
    pub candidate_scores: Vec<f32>,
}

impl ImageMatch {
    pub fn is_normal(&self) -> bool {
        self.lesions.is_empty()
    }
}

/// Match the candidates of one image against its lesions.
pub fn match_image(
    image_id: &str,
    exam_id: &str,
    cands: &[Candidate],
    lesions: &[LesionPoint],
    hit_radius_mm: f64,
) -> ImageMatch {
    let r2 = hit_radius_mm * hit_radius_mm;
    let lesion_matches = lesions
        .iter()
        .map(|l| {
            let matched_score = cands
                .iter()
                .filter(|c| {
                    let dx = c.position_mm.0 - l.position_mm.0;
                    let dy = c.position_mm.1 - l.position_mm.1;
                    dx * dx + dy * dy <= r2
                })
                .map(|c| c.score)
                .reduce(f32::max);
            LesionMatch {
                lesion_id: l.lesion_id.clone(),
                matched_score,
            }
        })
        .collect();
    let candidate_scores: Vec<f32> = cands.iter().map(|c| c.score).collect();
    ImageMatch {
        image_id: image_id.to_string(),
        exam_id: exam_id.to_string(),
        lesions: lesion_matches,
        false_positive_scores: if lesions.is_empty() { candidate_scores.clone() } else { Vec::new() },
        candidate_scores,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrocKind {
    Image,
    Exam,
}

impl FrocKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FrocKind::Image => "image",
            FrocKind::Exam => "exam",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrocPoint {
    pub threshold: f32,
    pub fp_per_image: f64,
    pub sensitivity: f64,
}

/// Points sorted by ascending threshold; the last one is at `+inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrocCurve {
    pub kind: FrocKind,
    pub points: Vec<FrocPoint>,
}

impl FrocCurve {
    /// Point with the highest sensitivity; among equals, the one with the
    /// lowest threshold (all candidates of the base threshold included).
    pub fn max_sensitivity_point(&self) -> Option<FrocPoint> {
        self.points
            .iter()
            .copied()
            .reduce(|best, p| if p.sensitivity > best.sensitivity { p } else { best })
    }
}

/// Sorted distinct candidate scores followed by `+inf`.
fn thresholds(matches: &[ImageMatch]) -> Vec<f32> {
    let mut t: Vec<f32> = matches.iter().flat_map(|m| m.candidate_scores.iter().copied()).collect();
    t.sort_by(f32::total_cmp);
    t.dedup();
    t.push(f32::INFINITY);
    t
}

struct FpCounter {
    sorted: Vec<f32>,
    normals: usize,
}

impl FpCounter {
    fn new(matches: &[ImageMatch]) -> Result<Self> {
        let normals = matches.iter().filter(|m| m.is_normal()).count();
        if normals == 0 {
            return Err(Error::Data(
                "FROC needs at least one normal image: false positives are counted on normals".into(),
            ));
        }
        let mut sorted: Vec<f32> = matches
            .iter()
            .filter(|m| m.is_normal())
            .flat_map(|m| m.false_positive_scores.iter().copied())
            .collect();
        sorted.sort_by(f32::total_cmp);
        Ok(FpCounter { sorted, normals })
    }

    fn fp_per_image(&self, t: f32) -> f64 {
        let at_or_above = self.sorted.len() - self.sorted.partition_point(|&s| s < t);
        at_or_above as f64 / self.normals as f64
    }
}

fn count_at_or_above(sorted: &[f32], t: f32) -> usize {
    sorted.len() - sorted.partition_point(|&s| s < t)
}

/// Sensitivity = mean over lesion-bearing images of the fraction of their
/// lesions detected.
pub fn froc_image_based(matches: &[ImageMatch]) -> Result<FrocCurve> {
    let fp = FpCounter::new(matches)?;
    let per_image: Vec<(Vec<f32>, usize)> = matches
        .iter()
        .filter(|m| !m.is_normal())
        .map(|m| {
            let mut s: Vec<f32> = m.lesions.iter().filter_map(|l| l.matched_score).collect();
            s.sort_by(f32::total_cmp);
            (s, m.lesions.len())
        })
        .collect();
    if per_image.is_empty() {
        return Err(Error::Data("FROC needs at least one annotated lesion".into()));
    }
    let points = thresholds(matches)
        .into_iter()
        .map(|t| {
            let total: f64 = per_image
                .iter()
                .map(|(s, n)| count_at_or_above(s, t) as f64 / *n as f64)
                .sum();
            FrocPoint {
                threshold: t,
                fp_per_image: fp.fp_per_image(t),
                sensitivity: total / per_image.len() as f64,
            }
        })
        .collect();
    Ok(FrocCurve {
        kind: FrocKind::Image,
        points,
    })
}

/// Sensitivity = fraction of exams with lesions in which at least one lesion
/// is detected. False positives as in [`froc_image_based`].
pub fn froc_exam_based(matches: &[ImageMatch]) -> Result<FrocCurve> {
    let fp = FpCounter::new(matches)?;
    let mut order: Vec<&str> = Vec::new();
    let mut best: HashMap<&str, Option<f32>> = HashMap::new();
    for m in matches.iter().filter(|m| !m.is_normal()) {
        let entry = best.entry(m.exam_id.as_str()).or_insert_with(|| {
            order.push(m.exam_id.as_str());
            None
        });
        for s in m.lesions.iter().filter_map(|l| l.matched_score) {
            *entry = Some(entry.map_or(s, |e: f32| e.max(s)));
        }
    }
    if order.is_empty() {
        return Err(Error::Data("FROC needs at least one annotated lesion".into()));
    }
    let mut exam_scores: Vec<f32> = order.iter().filter_map(|e| best[e]).collect();
    exam_scores.sort_by(f32::total_cmp);
    let points = thresholds(matches)
        .into_iter()
        .map(|t| FrocPoint {
            threshold: t,
            fp_per_image: fp.fp_per_image(t),
            sensitivity: count_at_or_above(&exam_scores, t) as f64 / order.len() as f64,
        })
        .collect();
    Ok(FrocCurve {
        kind: FrocKind::Exam,
        points,
    })
}

/// Highest sensitivity among points with `fp_per_image <= fp`; 0 if none.
pub fn sensitivity_at_fp(curve: &FrocCurve, fp_per_image: f64) -> Result<f64> {
    if !(fp_per_image >= 0.0) {
        return Err(invalid_arg!("false-positive rate must be non-negative, got {fp_per_image}"));
    }
    Ok(curve
        .points
        .iter()
        .filter(|p| p.fp_per_image <= fp_per_image)
        .map(|p| p.sensitivity)
        .fold(0.0, f64::max))
}

fn fmt_threshold(t: f32) -> String {
    if t.is_infinite() {
        "inf".to_string()
    } else {
        format!("{t:.6}")
    }
}

/// CSV with header `kind,threshold,fp_per_image,sensitivity`.
pub fn curve_csv(curve: &FrocCurve) -> String {
    let mut out = String::from("kind,threshold,fp_per_image,sensitivity\n");
    for p in &curve.points {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6}",
            curve.kind.as_str(),
            fmt_threshold(p.threshold),
            p.fp_per_image,
            p.sensitivity
        );
    }
    out
}

/// One human-readable line with the maximum sensitivity and its false
/// positive rate.
pub fn summary_line(curve: &FrocCurve, base_threshold: f32) -> String {
    match curve.max_sensitivity_point() {
        Some(p) if p.threshold.is_finite() => format!(
            "{}-based: max sensitivity {:.4} at {:.4} FP/image (threshold {:.3})",
            curve.kind.as_str(),
            p.sensitivity,
            p.fp_per_image,
            base_threshold.max(0.0)
        ),
        _ => format!(
            "{}-based: max sensitivity 0.0000 at 0.0000 FP/image (no candidates)",
            curve.kind.as_str()
        ),
    }
}
