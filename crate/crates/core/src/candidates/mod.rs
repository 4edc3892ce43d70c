//! Probability map post-processing: binarisation, connected components and
//! greedy radius clustering into candidate points; lesion masks to centre of
//! mass points.

mod labeling;

pub use labeling::{connected_components, connected_components_with, Connectivity, Labeling};

use std::fmt::Write as _;

use crate::dataset::LesionAnnotation;
use crate::error::{invalid_arg, Error, Result};
use crate::imaging::{BitGrid, Image};

/// Threshold used to binarise probability maps.
pub const BASE_THRESHOLD: f32 = 0.5;
/// Candidates closer than this (mm) to a stronger one are merged into it.
pub const CLUSTER_RADIUS_MM: f64 = 15.0;

/// Per-pixel lesion probability on a physical grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    image: Image,
}

impl ProbabilityMap {
    pub fn new(image: Image) -> Result<Self> {
        if let Some(v) = image.pixels().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("probability map value {v} outside [0, 1]")));
        }
        Ok(ProbabilityMap { image })
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn into_image(self) -> Image {
        self.image
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn spacing_mm(&self) -> f64 {
        self.image.spacing_mm()
    }

    pub fn values(&self) -> &[f32] {
        self.image.pixels()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.image.get(x, y)
    }
}

/// Suspicious location with its detection score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    /// `(x, y)` in mm.
    pub position_mm: (f64, f64),
    /// Source pixel `(x, y)`.
    pub pixel: (usize, usize),
    pub score: f32,
}

/// Centre of mass of an annotated lesion.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionPoint {
    pub position_mm: (f64, f64),
    pub lesion_id: String,
    pub image_id: String,
}

/// Pixel grid position to millimetres: pixel `(x, y)` sits at
/// `(x * spacing, y * spacing)`.
#[inline]
pub fn pixel_to_mm(x: f64, y: f64, spacing_mm: f64) -> (f64, f64) {
    (x * spacing_mm, y * spacing_mm)
}

/// `true` where the probability is strictly above `threshold`.
pub fn binarize(map: &ProbabilityMap, threshold: f32) -> BitGrid {
    BitGrid::from_fn(map.width(), map.height(), |x, y| map.get(x, y) > threshold)
}

/// Candidate points of a probability map.
///
/// Every pixel above `base_threshold` (i.e. every pixel of a connected
/// component of the binarised map) is a raw candidate scored by its
/// probability. Raw candidates are visited by descending score, ties broken by
/// raster order; each unsuppressed one is retained and suppresses all raw
/// candidates within `cluster_radius_mm`. The result is sorted by descending
/// score, so thresholding at any `T >= base_threshold` is a prefix filter.
pub fn extract_candidates(map: &ProbabilityMap, base_threshold: f32, cluster_radius_mm: f64) -> Result<Vec<Candidate>> {
    if !(cluster_radius_mm > 0.0) || !cluster_radius_mm.is_finite() {
        return Err(invalid_arg!("cluster radius must be positive, got {cluster_radius_mm}"));
    }
    if !(0.0..=1.0).contains(&base_threshold) {
        return Err(invalid_arg!("threshold must lie in [0, 1], got {base_threshold}"));
    }
    let (w, h) = (map.width(), map.height());
    let s = map.spacing_mm();
    let bits = binarize(map, base_threshold);
    let labeling = connected_components(&bits);
    let mut raw: Vec<(f32, usize)> = labeling
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != 0)
        .map(|(i, _)| (map.values()[i], i))
        .collect();
    raw.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let r2 = cluster_radius_mm * cluster_radius_mm;
    let reach = (cluster_radius_mm / s).ceil() as isize + 1;
    let mut suppressed = vec![false; w * h];
    let mut kept = Vec::new();
    for (score, idx) in raw {
        if suppressed[idx] {
            continue;
        }
        let (cx, cy) = (idx % w, idx / w);
        let (px, py) = pixel_to_mm(cx as f64, cy as f64, s);
        kept.push(Candidate {
            position_mm: (px, py),
            pixel: (cx, cy),
            score,
        });
        let y0 = (cy as isize - reach).max(0) as usize;
        let y1 = (cy as isize + reach).min(h as isize - 1) as usize;
        let x0 = (cx as isize - reach).max(0) as usize;
        let x1 = (cx as isize + reach).min(w as isize - 1) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (qx, qy) = pixel_to_mm(x as f64, y as f64, s);
                let (dx, dy) = (qx - px, qy - py);
                if dx * dx + dy * dy <= r2 {
                    suppressed[y * w + x] = true;
                }
            }
        }
    }
    Ok(kept)
}

/// Candidates with score at or above `threshold`.
pub fn candidates_at(cands: &[Candidate], threshold: f32) -> Vec<Candidate> {
    cands.iter().copied().filter(|c| c.score >= threshold).collect()
}

/// Unweighted centroid of a mask in mm.
pub fn center_of_mass_mm(mask: &BitGrid, spacing_mm: f64) -> Result<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0usize);
    for (x, y) in mask.ones() {
        sx += x as f64;
        sy += y as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask("lesion mask has no pixels".into()));
    }
    Ok(pixel_to_mm(sx / n as f64, sy / n as f64, spacing_mm))
}

/// Lesion coordinates of one image from its annotation masks.
pub fn lesion_points(image_id: &str, lesions: &[LesionAnnotation], spacing_mm: f64) -> Result<Vec<LesionPoint>> {
    lesions
        .iter()
        .map(|l| {
            Ok(LesionPoint {
                position_mm: center_of_mass_mm(&l.mask, spacing_mm)
                    .map_err(|_| Error::EmptyMask(format!("lesion {} of {image_id} has an empty mask", l.id)))?,
                lesion_id: l.id.clone(),
                image_id: image_id.to_string(),
            })
        })
        .collect()
}

/// Candidate CSV with header `image_id,x_mm,y_mm,score`, six decimals.
pub fn candidates_csv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a [Candidate])>) -> String {
    let mut out = String::from("image_id,x_mm,y_mm,score\n");
    for (image_id, cands) in rows {
        for c in cands {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6}",
                image_id, c.position_mm.0, c.position_mm.1, c.score
            );
        }
    }
    out
}
