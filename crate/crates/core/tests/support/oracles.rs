//! Brute-force reference implementations.

use std::collections::{HashMap, VecDeque};

use lesiondet::candidates::{Candidate, Labeling, LesionPoint, ProbabilityMap};
use lesiondet::froc::{match_image, FrocCurve, ImageMatch};
use lesiondet::imaging::{BitGrid, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_grid(rng: &mut impl Rng, w: usize, h: usize, density: f64) -> BitGrid {
    BitGrid::from_fn(w, h, |_, _| rng.random_bool(density))
}

/// 8-connected breadth-first flood fill; label 0 is background.
pub fn flood_fill_labels(bits: &BitGrid) -> (Vec<u32>, u32) {
    let (w, h) = (bits.width(), bits.height());
    let mut labels = vec![0u32; w * h];
    let mut next = 0u32;
    for start in 0..w * h {
        if !bits.bits()[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if bits.bits()[j] && labels[j] == 0 {
                        labels[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    (labels, next)
}

/// Same partition of the pixels up to a renaming of labels.
pub fn equivalent_labelings(got: &Labeling, oracle: &[u32], oracle_count: u32) -> bool {
    if got.count() as u32 != oracle_count || got.labels().len() != oracle.len() {
        return false;
    }
    let mut fwd: HashMap<u32, u32> = HashMap::new();
    let mut back: HashMap<u32, u32> = HashMap::new();
    for (&a, &b) in got.labels().iter().zip(oracle) {
        if (a == 0) != (b == 0) {
            return false;
        }
        if a == 0 {
            continue;
        }
        if *fwd.entry(a).or_insert(b) != b || *back.entry(b).or_insert(a) != a {
            return false;
        }
    }
    true
}

/// A micro FROC instance: per image, exam id, candidates and lesions.
#[derive(Debug, Clone)]
pub struct MicroImage {
    pub image_id: String,
    pub exam_id: String,
    pub candidates: Vec<Candidate>,
    pub lesions: Vec<LesionPoint>,
}

/// At most 5 images, 3 lesions per image and 6 candidates per image, with at
/// least one normal and one lesion-bearing image. Scores come from a coarse
/// grid so ties are common.
pub fn random_micro_instance(rng: &mut impl Rng) -> Vec<MicroImage> {
    loop {
        let n = rng.random_range(2..=5);
        let n_exams = rng.random_range(1..=n);
        let images: Vec<MicroImage> = (0..n)
            .map(|i| {
                let image_id = format!("img{i}");
                let pos = |rng: &mut dyn rand::RngCore| (rng.random_range(0.0..60.0), rng.random_range(0.0..60.0));
                let candidates = (0..rng.random_range(0..=6))
                    .map(|_| Candidate {
                        position_mm: pos(rng),
                        pixel: (0, 0),
                        score: rng.random_range(5..=10) as f32 / 10.0,
                    })
                    .collect();
                let n_lesions = if rng.random_bool(0.5) { 0 } else { rng.random_range(1..=3) };
                let lesions = (0..n_lesions)
                    .map(|k| LesionPoint {
                        position_mm: pos(rng),
                        lesion_id: format!("{image_id}_l{k}"),
                        image_id: image_id.clone(),
                    })
                    .collect();
                MicroImage {
                    image_id,
                    exam_id: format!("exam{}", rng.random_range(0..n_exams)),
                    candidates,
                    lesions,
                }
            })
            .collect();
        let normals = images.iter().filter(|i| i.lesions.is_empty()).count();
        if normals > 0 && normals < images.len() {
            return images;
        }
    }
}

pub fn matches_of(images: &[MicroImage], hit_radius_mm: f64) -> Vec<ImageMatch> {
    images
        .iter()
        .map(|i| match_image(&i.image_id, &i.exam_id, &i.candidates, &i.lesions, hit_radius_mm))
        .collect()
}

fn detected(img: &MicroImage, lesion: &LesionPoint, t: f32, r: f64) -> bool {
    img.candidates.iter().any(|c| {
        let d = ((c.position_mm.0 - lesion.position_mm.0).powi(2) + (c.position_mm.1 - lesion.position_mm.1).powi(2)).sqrt();
        c.score >= t && d <= r
    })
}

/// Recount everything from raw candidates at each threshold:
/// `(threshold, fp_per_image, image sensitivity, exam sensitivity)`.
pub fn brute_force_froc(images: &[MicroImage], r: f64) -> Vec<(f32, f64, f64, f64)> {
    let mut thresholds: Vec<f32> = images.iter().flat_map(|i| i.candidates.iter().map(|c| c.score)).collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    thresholds.push(f32::INFINITY);
    let normals: Vec<&MicroImage> = images.iter().filter(|i| i.lesions.is_empty()).collect();
    let lesion_images: Vec<&MicroImage> = images.iter().filter(|i| !i.lesions.is_empty()).collect();
    let mut exams: Vec<&str> = Vec::new();
    for i in &lesion_images {
        if !exams.contains(&i.exam_id.as_str()) {
            exams.push(&i.exam_id);
        }
    }
    thresholds
        .into_iter()
        .map(|t| {
            let fps: usize = normals.iter().map(|i| i.candidates.iter().filter(|c| c.score >= t).count()).sum();
            let mut image_sens = 0.0;
            for img in &lesion_images {
                let hits = img.lesions.iter().filter(|l| detected(img, l, t, r)).count();
                image_sens += hits as f64 / img.lesions.len() as f64;
            }
            let exam_hits = exams
                .iter()
                .filter(|&&e| {
                    lesion_images
                        .iter()
                        .filter(|i| i.exam_id == e)
                        .any(|i| i.lesions.iter().any(|l| detected(i, l, t, r)))
                })
                .count();
            (
                t,
                fps as f64 / normals.len() as f64,
                image_sens / lesion_images.len() as f64,
                exam_hits as f64 / exams.len() as f64,
            )
        })
        .collect()
}

/// Exact equality of a curve with one column of the brute-force table.
pub fn curve_equals(curve: &FrocCurve, table: &[(f32, f64, f64, f64)], exam: bool) -> bool {
    curve.points.len() == table.len()
        && curve.points.iter().zip(table).all(|(p, row)| {
            let sens = if exam { row.3 } else { row.2 };
            p.threshold == row.0 && p.fp_per_image == row.1 && p.sensitivity == sens
        })
}

/// Smooth random probability map: a few Gaussian bumps plus mild noise.
pub fn random_probability_map(seed: u64, w: usize, h: usize, spacing_mm: f64) -> ProbabilityMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..=12))
        .map(|_| {
            (
                rng.random_range(0.0..w as f64),
                rng.random_range(0.0..h as f64),
                rng.random_range(2.0..12.0),
                rng.random_range(0.3..1.0),
            )
        })
        .collect();
    let img = Image::from_fn(w, h, spacing_mm, |x, y| {
        let mut v = 0.0f64;
        for &(cx, cy, s, a) in &bumps {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            v = v.max(a * (-d2 / (2.0 * s * s)).exp());
        }
        (v + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0) as f32
    })
    .unwrap();
    ProbabilityMap::new(img).unwrap()
}
