use std::path::Path;

use lesiondet::config::RunConfig;
use lesiondet::dataset::{images_in_split, load_training_images, read_manifest, split_exams, synthesize_dataset, Split, TrainingImage};

/// Configuration for quick training runs: 256×256 phantoms with small
/// lesions and 96×96 patches.
pub fn small_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    cfg.phantom.width = 256;
    cfg.phantom.height = 256;
    cfg.phantom.lesion_diameter_mm = (5.0, 12.0);
    cfg.training.patch_px = 96;
    cfg
}

/// Synthesize `n` exams into `dir` and load the train and val splits.
pub fn small_dataset(dir: &Path, n: usize, cfg: &RunConfig) -> (Vec<TrainingImage>, Vec<TrainingImage>) {
    let (manifest, _) = synthesize_dataset(dir, n, 0.5, cfg.seed, &cfg.phantom).unwrap();
    let exams = read_manifest(&manifest).unwrap();
    let split = split_exams(&exams, cfg.seed).unwrap();
    let load = |s| load_training_images(&images_in_split(&exams, &split, s), &cfg.preprocessing).unwrap();
    (load(Split::Train), load(Split::Val))
}
