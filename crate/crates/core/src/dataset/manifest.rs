use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ExamRecord, ImageRecord, Laterality, LesionAnnotation, SplitAssignment, TrainingImage, View};
use crate::error::{Error, Result};
use crate::imaging::io::{read_image, read_mask_pgm, write_bytes};
use crate::imaging::{preprocess, Image, PreprocessParams, TARGET_SPACING_MM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLesion {
    pub mask_path: PathBuf,
    pub com_mm: [f64; 2],
}

/// One line of the JSON-lines manifest. Relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLine {
    pub exam_id: String,
    pub path: PathBuf,
    pub view: View,
    pub laterality: Laterality,
    pub lesions: Vec<ManifestLesion>,
    /// Pixel spacing for formats that do not carry one (PNG, PGM).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing_mm: Option<f64>,
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn write_manifest(path: &Path, lines: &[ManifestLine]) -> Result<()> {
    let mut out = String::new();
    for line in lines {
        out.push_str(&serde_json::to_string(line).map_err(|e| Error::format(path, e.to_string()))?);
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Read a manifest and its lesion masks, grouping images by exam in order of
/// first appearance.
pub fn read_manifest(path: &Path) -> Result<Vec<ExamRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut lines = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line: ManifestLine =
            serde_json::from_str(raw).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        lines.push(line);
    }
    let mut exams: Vec<ExamRecord> = Vec::new();
    let mut seen_images = std::collections::HashSet::new();
    for line in &lines {
        let image_path = resolve(base, &line.path);
        let image_id = file_stem(&line.path);
        if !seen_images.insert(image_id.clone()) {
            return Err(Error::format(path, format!("duplicate image id {image_id}")));
        }
        let lesions = line
            .lesions
            .iter()
            .map(|l| {
                let mask = read_mask_pgm(&resolve(base, &l.mask_path))?;
                if mask.count() == 0 {
                    return Err(Error::EmptyMask(format!("lesion mask {} is empty", l.mask_path.display())));
                }
                Ok(LesionAnnotation {
                    id: file_stem(&l.mask_path),
                    mask,
                    center_of_mass_mm: (l.com_mm[0], l.com_mm[1]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let record = ImageRecord {
            image_id,
            exam_id: line.exam_id.clone(),
            image_path,
            view: line.view,
            laterality: line.laterality,
            lesions,
            spacing_mm: line.spacing_mm,
        };
        match exams.iter_mut().find(|e| e.exam_id == line.exam_id) {
            Some(e) => e.images.push(record),
            None => exams.push(ExamRecord {
                exam_id: line.exam_id.clone(),
                images: vec![record],
            }),
        }
    }
    if exams.is_empty() {
        return Err(Error::Data(format!("manifest {} lists no images", path.display())));
    }
    Ok(exams)
}

pub fn write_split_file(path: &Path, split: &SplitAssignment) -> Result<()> {
    let mut json = serde_json::to_string_pretty(split).map_err(|e| Error::format(path, e.to_string()))?;
    json.push('\n');
    write_bytes(path, json.as_bytes())
}

pub fn read_split_file(path: &Path) -> Result<SplitAssignment> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Read the raw pixels of an image record.
pub fn read_record_image(rec: &ImageRecord) -> Result<Image> {
    read_image(&rec.image_path, rec.spacing_mm.unwrap_or(TARGET_SPACING_MM))
}

/// Load and preprocess images; lesion masks are carried onto the
/// preprocessed grid by nearest-neighbour resizing. Order follows `images`.
pub fn load_training_images(
    images: &[(&ExamRecord, &ImageRecord)],
    params: &PreprocessParams,
) -> Result<Vec<TrainingImage>> {
    images
        .par_iter()
        .map(|&(exam, rec)| {
            let raw = read_record_image(rec)?;
            for l in &rec.lesions {
                if l.mask.width() != raw.width() || l.mask.height() != raw.height() {
                    return Err(Error::Data(format!(
                        "lesion {} mask is {}x{} but image {} is {}x{}",
                        l.id,
                        l.mask.width(),
                        l.mask.height(),
                        rec.image_id,
                        raw.width(),
                        raw.height()
                    )));
                }
            }
            let pre = preprocess(&raw, params)?;
            let (w, h) = (pre.image.width(), pre.image.height());
            let lesions = rec
                .lesions
                .iter()
                .map(|l| LesionAnnotation {
                    id: l.id.clone(),
                    mask: if (w, h) == (raw.width(), raw.height()) {
                        l.mask.clone()
                    } else {
                        l.mask.resize_nearest(w, h)
                    },
                    center_of_mass_mm: l.center_of_mass_mm,
                })
                .collect();
            TrainingImage::new(&rec.image_id, &exam.exam_id, exam.label(), pre.image, pre.mask, lesions)
        })
        .collect()
}
