use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, ManifestLesion, ManifestLine};
use super::{stream_rng, Laterality, View};
use crate::candidates::center_of_mass_mm;
use crate::error::{invalid_arg, Result};
use crate::imaging::io::{write_f32i, write_mask_pgm};
use crate::imaging::{gaussian_blur, BitGrid, Image, TARGET_SPACING_MM};

pub const DEFAULT_MALIGNANT_FRACTION: f64 = 0.42;

const SKIN_ROLLOFF_MM: f64 = 15.0;
const SKIN_FLOOR: f64 = 0.15;

/// Generator settings. Intensities are in arbitrary raw units; the breast
/// background peaks near 0.8.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub width: usize,
    pub height: usize,
    pub spacing_mm: f64,
    pub lesion_diameter_mm: (f64, f64),
    /// Ratio of the two ellipse axes.
    pub lesion_aspect: (f64, f64),
    pub lesion_contrast: (f64, f64),
    /// Probability that a lesion-bearing image carries a second lesion.
    pub second_lesion_probability: f64,
    /// Relative amplitude of fine (about 1 mm) texture.
    pub fine_texture: f64,
    /// Relative amplitude of coarse (about 4 mm) texture.
    pub coarse_texture: f64,
    pub noise_std: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            width: 512,
            height: 512,
            spacing_mm: TARGET_SPACING_MM,
            lesion_diameter_mm: (6.0, 40.0),
            lesion_aspect: (0.75, 1.33),
            lesion_contrast: (0.30, 0.45),
            second_lesion_probability: 0.15,
            fine_texture: 0.03,
            coarse_texture: 0.025,
            noise_std: 0.01,
        }
    }
}

impl PhantomSpec {
    fn validate(&self) -> Result<()> {
        let ok_range = |(a, b): (f64, f64)| a > 0.0 && b >= a && b.is_finite();
        if self.width < 16 || self.height < 16 || !(self.spacing_mm > 0.0) {
            return Err(invalid_arg!("phantom image must be at least 16x16 with positive spacing"));
        }
        if !ok_range(self.lesion_diameter_mm) || !ok_range(self.lesion_aspect) || !ok_range(self.lesion_contrast) {
            return Err(invalid_arg!("phantom lesion ranges must be positive and ordered"));
        }
        Ok(())
    }
}

/// A planted lesion: elliptical dome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LesionParams {
    pub center_mm: (f64, f64),
    /// Geometric-mean diameter `2·sqrt(a·b)`.
    pub diameter_mm: f64,
    /// Axis ratio `a / b`.
    pub aspect: f64,
    pub angle_rad: f64,
    pub contrast: f64,
}

/// Add the lesion to `img` and return its mask (pixels with normalised
/// elliptical radius at most 1).
pub fn plant_lesion(img: &mut Image, p: &LesionParams) -> BitGrid {
    let s = img.spacing_mm();
    let r = 0.5 * p.diameter_mm / s;
    let a = r * p.aspect.sqrt();
    let b = r / p.aspect.sqrt();
    let (cx, cy) = (p.center_mm.0 / s, p.center_mm.1 / s);
    let (cos, sin) = (p.angle_rad.cos(), p.angle_rad.sin());
    let (w, h) = (img.width(), img.height());
    let mut mask = BitGrid::empty(w, h);
    let reach = a.max(b).ceil() as i64 + 1;
    for y in (cy as i64 - reach).max(0)..(cy as i64 + reach + 1).min(h as i64) {
        for x in (cx as i64 - reach).max(0)..(cx as i64 + reach + 1).min(w as i64) {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let u = (dx * cos + dy * sin) / a;
            let v = (-dx * sin + dy * cos) / b;
            let q2 = u * u + v * v;
            if q2 <= 1.0 {
                let (xu, yu) = (x as usize, y as usize);
                mask.set(xu, yu, true);
                let dome = (1.0 - q2).sqrt();
                img.set(xu, yu, img.get(xu, yu) + (p.contrast * dome) as f32);
            }
        }
    }
    mask
}

#[derive(Debug, Clone)]
pub struct PhantomImage {
    pub view: View,
    pub laterality: Laterality,
    pub image: Image,
    /// True breast support.
    pub support: BitGrid,
    pub lesions: Vec<(LesionParams, BitGrid)>,
}

#[derive(Debug, Clone)]
pub struct PhantomExam {
    pub exam_id: String,
    pub images: Vec<PhantomImage>,
}

impl PhantomExam {
    pub fn is_malignant(&self) -> bool {
        self.images.iter().any(|i| !i.lesions.is_empty())
    }
}

/// Normalised blurred white noise. The noise is drawn on a margin of three
/// sigmas and cropped, so the image border sees no replicated samples.
fn texture(w: usize, h: usize, s: f64, sigma_mm: f64, rng: &mut impl Rng) -> Result<Vec<f32>> {
    let m = (3.0 * sigma_mm / s).ceil() as usize;
    let (wm, hm) = (w + 2 * m, h + 2 * m);
    let noise = Image::from_fn(wm, hm, s, |_, _| rng.sample::<f32, _>(StandardNormal))?;
    let blurred = gaussian_blur(&noise, sigma_mm)?;
    let px: Vec<f32> = (0..h)
        .flat_map(|y| blurred.pixels()[(y + m) * wm + m..(y + m) * wm + m + w].iter().copied())
        .collect();
    let n = px.len() as f64;
    let mean = px.iter().map(|&v| v as f64).sum::<f64>() / n;
    let std = (px.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    Ok(px.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect())
}

struct BreastShape {
    /// Chest wall column (0 or width - 1).
    wall_x: f64,
    cy: f64,
    ax: f64,
    ay: f64,
}

impl BreastShape {
    fn rho2(&self, x: f64, y: f64) -> f64 {
        let u = (x - self.wall_x) / self.ax;
        let v = (y - self.cy) / self.ay;
        u * u + v * v
    }
}

fn breast_image(
    spec: &PhantomSpec,
    view: View,
    laterality: Laterality,
    lesion_count: usize,
    rng: &mut impl Rng,
) -> Result<PhantomImage> {
    let (w, h, s) = (spec.width, spec.height, spec.spacing_mm);
    let shape = BreastShape {
        wall_x: if laterality == Laterality::L { 0.0 } else { (w - 1) as f64 },
        cy: h as f64 * rng.random_range(0.47..0.53),
        ax: w as f64 * rng.random_range(0.75..0.92),
        ay: h as f64 * rng.random_range(0.38..0.47),
    };
    let fine = texture(w, h, s, 1.0, rng)?;
    let coarse = texture(w, h, s, 4.0, rng)?;
    // Pectoral muscle on oblique views: a bright triangle at the top of the
    // chest wall.
    let pect = (view == View::Mlo).then(|| (w as f64 * rng.random_range(0.2..0.35), h as f64 * rng.random_range(0.3..0.45)));
    let mut support = BitGrid::empty(w, h);
    let mut pixels = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let rho2 = shape.rho2(x as f64, y as f64);
            if rho2 >= 1.0 {
                continue;
            }
            support.set(x, y, true);
            let t = (1.0 - rho2).sqrt();
            // Tissue thins towards the skin line: a smooth roll-off over the
            // outer few millimetres down to a small floor.
            let rho = rho2.sqrt();
            let edge = ((1.0 - rho) * shape.ax.min(shape.ay) * s / SKIN_ROLLOFF_MM).min(1.0);
            let rolloff = SKIN_FLOOR + (1.0 - SKIN_FLOOR) * edge * edge * (3.0 - 2.0 * edge);
            let i = y * w + x;
            let tex = spec.fine_texture * fine[i] as f64 + spec.coarse_texture * coarse[i] as f64;
            let mut v = (0.6 + 0.2 * t) * rolloff * (1.0 + tex);
            if let Some((px, py)) = pect {
                let dx = (x as f64 - shape.wall_x).abs();
                if dx / px + (y as f64) / py < 1.0 {
                    v += 0.15;
                }
            }
            v += spec.noise_std * rng.sample::<f64, _>(StandardNormal);
            pixels[i] = v.max(0.0) as f32;
        }
    }
    let mut image = Image::new(w, h, s, pixels)?;
    let mut lesions: Vec<(LesionParams, BitGrid)> = Vec::new();
    for _ in 0..lesion_count {
        if let Some(p) = place_lesion(spec, &shape, &lesions, rng) {
            let mask = plant_lesion(&mut image, &p);
            if mask.count() > 0 {
                lesions.push((p, mask));
            }
        }
    }
    Ok(PhantomImage {
        view,
        laterality,
        image,
        support,
        lesions,
    })
}

/// Draw lesion parameters fully inside the breast and away from earlier
/// lesions; `None` if no position is found.
fn place_lesion(
    spec: &PhantomSpec,
    shape: &BreastShape,
    existing: &[(LesionParams, BitGrid)],
    rng: &mut impl Rng,
) -> Option<LesionParams> {
    let s = spec.spacing_mm;
    let (dlo, dhi) = spec.lesion_diameter_mm;
    let (alo, ahi) = spec.lesion_aspect;
    let (clo, chi) = spec.lesion_contrast;
    for _ in 0..200 {
        let diameter_mm = rng.random_range(dlo..=dhi);
        let aspect = rng.random_range(alo..=ahi);
        let radius_px = 0.5 * diameter_mm / s * aspect.max(1.0 / aspect).sqrt();
        let x = rng.random_range(0.0..spec.width as f64);
        let y = rng.random_range(0.0..spec.height as f64);
        // Keep the whole ellipse inside 90% of the breast radius.
        let margin = radius_px / shape.ax.min(shape.ay);
        let rho = shape.rho2(x, y).sqrt();
        if rho + margin > 0.9 {
            continue;
        }
        // The breast ellipse is centred on the chest wall column, so it also
        // has to stay clear of the image border.
        if x < radius_px || y < radius_px || x + radius_px > (spec.width - 1) as f64 || y + radius_px > (spec.height - 1) as f64 {
            continue;
        }
        let clear = existing.iter().all(|(p, _)| {
            let dx = p.center_mm.0 / s - x;
            let dy = p.center_mm.1 / s - y;
            (dx * dx + dy * dy).sqrt() > radius_px + 0.5 * p.diameter_mm / s * 1.2 + 10.0
        });
        if !clear {
            continue;
        }
        return Some(LesionParams {
            center_mm: (x * s, y * s),
            diameter_mm,
            aspect,
            angle_rad: rng.random_range(0.0..PI),
            contrast: rng.random_range(clo..=chi),
        });
    }
    None
}

/// One exam of 1 to 4 images. Malignant exams carry at least one lesion, in
/// every image of one breast.
pub fn generate_phantom_exam(
    rng: &mut impl Rng,
    spec: &PhantomSpec,
    exam_id: &str,
    malignant: bool,
) -> Result<PhantomExam> {
    spec.validate()?;
    let affected = if rng.random_bool(0.5) { Laterality::L } else { Laterality::R };
    let u: f64 = rng.random();
    let mut slots: Vec<(Laterality, View)> = if u < 0.7 {
        vec![
            (Laterality::L, View::Cc),
            (Laterality::L, View::Mlo),
            (Laterality::R, View::Cc),
            (Laterality::R, View::Mlo),
        ]
    } else if u < 0.85 {
        vec![(affected, View::Cc), (affected, View::Mlo)]
    } else if u < 0.95 {
        let other = if affected == Laterality::L { Laterality::R } else { Laterality::L };
        vec![(affected, View::Cc), (affected, View::Mlo), (other, View::Cc)]
    } else {
        vec![(affected, View::Cc)]
    };
    slots.sort_by_key(|&(l, v)| (l == Laterality::R, v == View::Mlo));
    loop {
        let mut images = Vec::with_capacity(slots.len());
        for &(laterality, view) in &slots {
            let count = if malignant && laterality == affected {
                1 + usize::from(rng.random_bool(spec.second_lesion_probability))
            } else {
                0
            };
            images.push(breast_image(spec, view, laterality, count, rng)?);
        }
        let exam = PhantomExam {
            exam_id: exam_id.to_string(),
            images,
        };
        if exam.is_malignant() == malignant {
            return Ok(exam);
        }
    }
}

fn image_name(exam_id: &str, img: &PhantomImage) -> String {
    let lat = match img.laterality {
        Laterality::L => "L",
        Laterality::R => "R",
    };
    let view = match img.view {
        View::Cc => "CC",
        View::Mlo => "MLO",
    };
    format!("{exam_id}_{lat}{view}")
}

/// Generate and write `n_exams` phantom exams under `out_dir`: raw images as
/// F32I in `images/`, lesion masks as PGM in `masks/`, and `manifest.jsonl`.
/// Exactly `round(n · malignant_fraction)` exams are malignant.
pub fn synthesize_dataset(
    out_dir: &Path,
    n_exams: usize,
    malignant_fraction: f64,
    seed: u64,
    spec: &PhantomSpec,
) -> Result<(PathBuf, Vec<ManifestLine>)> {
    if n_exams < 3 {
        return Err(invalid_arg!("at least 3 exams are required, got {n_exams}"));
    }
    if !(0.0..=1.0).contains(&malignant_fraction) {
        return Err(invalid_arg!("malignant fraction must lie in [0, 1], got {malignant_fraction}"));
    }
    spec.validate()?;
    let n_mal = (n_exams as f64 * malignant_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n_exams).collect();
    order.shuffle(&mut stream_rng(seed, u64::MAX));
    let mut is_mal = vec![false; n_exams];
    for &i in &order[..n_mal] {
        is_mal[i] = true;
    }
    let per_exam: Vec<Vec<ManifestLine>> = (0..n_exams)
        .into_par_iter()
        .map(|i| {
            let exam_id = format!("exam{i:04}");
            let mut rng = stream_rng(seed, i as u64);
            let exam = generate_phantom_exam(&mut rng, spec, &exam_id, is_mal[i])?;
            let mut lines = Vec::new();
            for img in &exam.images {
                let name = image_name(&exam_id, img);
                let rel_image = PathBuf::from("images").join(format!("{name}.f32i"));
                write_f32i(&out_dir.join(&rel_image), &img.image)?;
                let mut lesions = Vec::new();
                for (k, (_, mask)) in img.lesions.iter().enumerate() {
                    let rel_mask = PathBuf::from("masks").join(format!("{name}_lesion{k}.pgm"));
                    write_mask_pgm(&out_dir.join(&rel_mask), mask)?;
                    let com = center_of_mass_mm(mask, img.image.spacing_mm())?;
                    lesions.push(ManifestLesion {
                        mask_path: rel_mask,
                        com_mm: [com.0, com.1],
                    });
                }
                lines.push(ManifestLine {
                    exam_id: exam_id.clone(),
                    path: rel_image,
                    view: img.view,
                    laterality: img.laterality,
                    lesions,
                    spacing_mm: None,
                });
            }
            Ok(lines)
        })
        .collect::<Result<_>>()?;
    let lines: Vec<ManifestLine> = per_exam.into_iter().flatten().collect();
    let manifest = out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &lines)?;
    Ok((manifest, lines))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            width: 256,
            height: 256,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn normal_exam_has_no_lesions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let exam = generate_phantom_exam(&mut rng, &small_spec(), "e", false).unwrap();
        assert!((1..=4).contains(&exam.images.len()));
        assert!(exam.images.iter().all(|i| i.lesions.is_empty()));
    }

    #[test]
    fn malignant_exam_has_lesions() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let exam = generate_phantom_exam(&mut rng, &small_spec(), "e", true).unwrap();
            assert!(exam.is_malignant());
            for img in &exam.images {
                for (p, mask) in &img.lesions {
                    assert!((0.75..=1.33).contains(&p.aspect));
                    // Lesions lie inside the breast.
                    assert!(mask.ones().all(|(x, y)| img.support.get(x, y)));
                }
            }
        }
    }

    #[test]
    fn planted_circle_bounding_box() {
        let mut img = Image::filled(300, 300, 0.2, 0.5).unwrap();
        let mask = plant_lesion(
            &mut img,
            &LesionParams {
                center_mm: (30.0, 30.0),
                diameter_mm: 20.0,
                aspect: 1.0,
                angle_rad: 0.3,
                contrast: 0.2,
            },
        );
        let (x0, y0, x1, y1) = mask.bounding_box().unwrap();
        for extent in [x1 - x0 + 1, y1 - y0 + 1] {
            assert!((extent as f64 * 0.2 - 20.0).abs() <= 2.0, "{extent}");
        }
        assert!((img.get(150, 150) - 0.7).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_arguments() {
        let dir = tempfile::tempdir().unwrap();
        assert!(synthesize_dataset(dir.path(), 2, 0.4, 0, &small_spec()).is_err());
        assert!(synthesize_dataset(dir.path(), 5, 1.5, 0, &small_spec()).is_err());
    }
}
