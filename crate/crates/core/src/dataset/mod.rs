//! Exam, image and lesion records; exam-level splits; patch sampling and
//! epoch composition; and a synthetic phantom generator standing in for
//! clinical data.

mod manifest;
mod patches;
mod phantom;
mod split;

pub use manifest::{
    load_training_images, read_manifest, read_record_image, read_split_file, write_manifest, write_split_file, ManifestLesion,
    ManifestLine,
};
pub use patches::{
    augment_flip, compose_epoch, extract_window, flip_patch, materialize, sample_negative_patch,
    sample_positive_patch, EpochSample, Patch, TrainingImage,
};
pub use phantom::{
    generate_phantom_exam, plant_lesion, synthesize_dataset, LesionParams, PhantomExam, PhantomImage, PhantomSpec, DEFAULT_MALIGNANT_FRACTION,
};
pub use split::{split_exams, Split, SplitAssignment};

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::imaging::BitGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "CC")]
    Cc,
    #[serde(rename = "MLO")]
    Mlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Laterality {
    L,
    R,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExamLabel {
    Normal,
    Malignant,
}

/// Ground-truth lesion: a mask on its image's grid and its centre of mass.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionAnnotation {
    pub id: String,
    pub mask: BitGrid,
    pub center_of_mass_mm: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub exam_id: String,
    pub image_path: PathBuf,
    pub view: View,
    pub laterality: Laterality,
    pub lesions: Vec<LesionAnnotation>,
    /// Pixel spacing for formats that carry none.
    pub spacing_mm: Option<f64>,
}

impl ImageRecord {
    pub fn is_normal(&self) -> bool {
        self.lesions.is_empty()
    }
}

/// Images of the exams assigned to `split`, in exam order.
pub fn images_in_split<'a>(
    exams: &'a [ExamRecord],
    assignment: &SplitAssignment,
    split: Split,
) -> Vec<(&'a ExamRecord, &'a ImageRecord)> {
    exams
        .iter()
        .filter(|e| assignment.get(&e.exam_id) == Some(split))
        .flat_map(|e| e.images.iter().map(move |i| (e, i)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExamRecord {
    pub exam_id: String,
    pub images: Vec<ImageRecord>,
}

impl ExamRecord {
    pub fn label(&self) -> ExamLabel {
        if self.images.iter().any(|i| !i.is_normal()) {
            ExamLabel::Malignant
        } else {
            ExamLabel::Normal
        }
    }
}

/// Deterministic random stream `stream` of the generator seeded by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream id of sample `index` in `epoch`.
pub fn sample_stream(epoch: usize, index: usize) -> u64 {
    ((epoch as u64 + 1) << 32) | index as u64
}
