use rand::seq::SliceRandom;
use rand::Rng;

use super::{ExamLabel, LesionAnnotation};
use crate::error::{invalid_arg, shape_err, Error, Result};
use crate::imaging::{BitGrid, BreastMask, Image};

/// A preprocessed image ready for patch sampling, with its breast mask and
/// lesions on the same grid.
#[derive(Debug, Clone)]
pub struct TrainingImage {
    pub image_id: String,
    pub exam_id: String,
    pub exam_label: ExamLabel,
    pub image: Image,
    pub breast: BreastMask,
    pub lesions: Vec<LesionAnnotation>,
    lesion_union: BitGrid,
}

impl TrainingImage {
    pub fn new(
        image_id: impl Into<String>,
        exam_id: impl Into<String>,
        exam_label: ExamLabel,
        image: Image,
        breast: BreastMask,
        lesions: Vec<LesionAnnotation>,
    ) -> Result<Self> {
        breast.check_congruent(&image)?;
        let (w, h) = (image.width(), image.height());
        let mut lesion_union = BitGrid::empty(w, h);
        for l in &lesions {
            if l.mask.width() != w || l.mask.height() != h {
                return Err(shape_err!(
                    "lesion {} mask is {}x{} but image is {w}x{h}",
                    l.id,
                    l.mask.width(),
                    l.mask.height()
                ));
            }
            for (x, y) in l.mask.ones() {
                lesion_union.set(x, y, true);
            }
        }
        if exam_label == ExamLabel::Normal && !lesions.is_empty() {
            return Err(Error::Data("an image of a normal exam cannot carry lesions".into()));
        }
        Ok(TrainingImage {
            image_id: image_id.into(),
            exam_id: exam_id.into(),
            exam_label,
            image,
            breast,
            lesions,
            lesion_union,
        })
    }

    pub fn lesion_union(&self) -> &BitGrid {
        &self.lesion_union
    }
}

/// Square input/target pair, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub input: Vec<f32>,
    pub target: Vec<f32>,
}

impl Patch {
    pub fn target_pixels(&self) -> usize {
        self.target.iter().filter(|&&t| t > 0.5).count()
    }
}

/// `size`×`size` window whose centre pixel is `(cx, cy)`: columns
/// `cx - size/2 ..= cx + (size - 1)/2`, same for rows. Outside is `fill`.
pub fn extract_window(
    width: usize,
    height: usize,
    cx: i64,
    cy: i64,
    size: usize,
    mut value: impl FnMut(usize, usize) -> f32,
) -> Vec<f32> {
    let x0 = cx - (size / 2) as i64;
    let y0 = cy - (size / 2) as i64;
    let mut out = vec![0.0f32; size * size];
    for py in 0..size {
        let y = y0 + py as i64;
        if y < 0 || y >= height as i64 {
            continue;
        }
        for px in 0..size {
            let x = x0 + px as i64;
            if x >= 0 && x < width as i64 {
                out[py * size + px] = value(x as usize, y as usize);
            }
        }
    }
    out
}

fn window_patch(img: &TrainingImage, cx: i64, cy: i64, size: usize, with_target: bool) -> Patch {
    let (w, h) = (img.image.width(), img.image.height());
    let input = extract_window(w, h, cx, cy, size, |x, y| img.image.get(x, y));
    let target = if with_target {
        extract_window(w, h, cx, cy, size, |x, y| f32::from(u8::from(img.lesion_union.get(x, y))))
    } else {
        vec![0.0; size * size]
    };
    Patch { size, input, target }
}

/// Lesion centre of mass rounded to the nearest pixel.
fn lesion_center_px(lesion: &LesionAnnotation, spacing_mm: f64) -> (i64, i64) {
    let (x, y) = lesion.center_of_mass_mm;
    ((x / spacing_mm).round() as i64, (y / spacing_mm).round() as i64)
}

/// Window centred on the centre of mass of lesion `lesion_index`. The target
/// includes every lesion of the image falling inside the window.
pub fn sample_positive_patch(img: &TrainingImage, lesion_index: usize, patch_px: usize) -> Result<Patch> {
    check_patch_size(patch_px)?;
    let lesion = img.lesions.get(lesion_index).ok_or_else(|| {
        invalid_arg!("image {} has {} lesions, index {lesion_index} requested", img.image_id, img.lesions.len())
    })?;
    let (cx, cy) = lesion_center_px(lesion, img.image.spacing_mm());
    Ok(window_patch(img, cx, cy, patch_px, true))
}

fn check_patch_size(patch_px: usize) -> Result<()> {
    if patch_px == 0 {
        return Err(invalid_arg!("patch size must be positive"));
    }
    Ok(())
}

/// Pixel `(x, y)` of the `k`-th in-mask pixel in raster order.
fn nth_mask_pixel(mask: &BreastMask, k: usize) -> (usize, usize) {
    let i = mask
        .grid()
        .bits()
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .nth(k)
        .map(|(i, _)| i)
        .expect("k is below the mask area");
    (i % mask.width(), i / mask.width())
}

/// Uniformly random in-breast centre on an image of a normal exam.
fn negative_center(img: &TrainingImage, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if img.exam_label != ExamLabel::Normal {
        return Err(Error::Data(format!(
            "negative patches are drawn from normal exams only; {} belongs to malignant exam {}",
            img.image_id, img.exam_id
        )));
    }
    let area = img.breast.area_px();
    if area == 0 {
        return Err(Error::EmptyMask(format!("breast mask of {} is empty", img.image_id)));
    }
    Ok(nth_mask_pixel(&img.breast, rng.random_range(0..area)))
}

/// Window around a uniformly drawn in-breast pixel; target all zeros.
pub fn sample_negative_patch(img: &TrainingImage, rng: &mut impl Rng, patch_px: usize) -> Result<Patch> {
    check_patch_size(patch_px)?;
    let (cx, cy) = negative_center(img, rng)?;
    Ok(window_patch(img, cx as i64, cy as i64, patch_px, false))
}

/// One entry of an epoch, referring into the image list it was composed
/// from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EpochSample {
    Positive { image: usize, lesion: usize },
    Negative { image: usize, center: (usize, usize) },
}

impl EpochSample {
    pub fn is_positive(&self) -> bool {
        matches!(self, EpochSample::Positive { .. })
    }
}

/// Every lesion once as a positive plus as many fresh negatives (uniform
/// normal image, uniform in-breast centre), shuffled.
pub fn compose_epoch(images: &[TrainingImage], rng: &mut impl Rng) -> Result<Vec<EpochSample>> {
    let mut samples: Vec<EpochSample> = images
        .iter()
        .enumerate()
        .flat_map(|(i, img)| (0..img.lesions.len()).map(move |l| EpochSample::Positive { image: i, lesion: l }))
        .collect();
    if samples.is_empty() {
        return Err(Error::Data("no lesions available for positive samples".into()));
    }
    let normals: Vec<usize> = images
        .iter()
        .enumerate()
        .filter(|(_, img)| img.exam_label == ExamLabel::Normal && img.breast.area_px() > 0)
        .map(|(i, _)| i)
        .collect();
    if normals.is_empty() {
        return Err(Error::Data("no images of normal exams available for negative samples".into()));
    }
    let positives = samples.len();
    for _ in 0..positives {
        let image = normals[rng.random_range(0..normals.len())];
        let center = negative_center(&images[image], rng)?;
        samples.push(EpochSample::Negative { image, center });
    }
    samples.shuffle(rng);
    Ok(samples)
}

/// Patch for one epoch entry, without augmentation.
pub fn materialize(images: &[TrainingImage], sample: &EpochSample, patch_px: usize) -> Result<Patch> {
    check_patch_size(patch_px)?;
    match *sample {
        EpochSample::Positive { image, lesion } => sample_positive_patch(&images[image], lesion, patch_px),
        EpochSample::Negative { image, center } => {
            Ok(window_patch(&images[image], center.0 as i64, center.1 as i64, patch_px, false))
        }
    }
}

fn flip_plane(v: &mut [f32], size: usize, up_down: bool, left_right: bool) {
    if left_right {
        for row in v.chunks_exact_mut(size) {
            row.reverse();
        }
    }
    if up_down {
        for y in 0..size / 2 {
            let (top, bottom) = v.split_at_mut((size - 1 - y) * size);
            top[y * size..(y + 1) * size].swap_with_slice(&mut bottom[..size]);
        }
    }
}

/// Flip input and target together.
pub fn flip_patch(patch: &mut Patch, up_down: bool, left_right: bool) {
    flip_plane(&mut patch.input, patch.size, up_down, left_right);
    flip_plane(&mut patch.target, patch.size, up_down, left_right);
}

/// Independent 50% up-down and 50% left-right flips. Returns the flips made.
pub fn augment_flip(patch: &mut Patch, rng: &mut impl Rng) -> (bool, bool) {
    let up_down = rng.random_bool(0.5);
    let left_right = rng.random_bool(0.5);
    flip_patch(patch, up_down, left_right);
    (up_down, left_right)
}
