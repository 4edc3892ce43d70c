use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use lesiondet::candidates::{candidates_csv, extract_candidates, lesion_points, Candidate, ProbabilityMap};
use lesiondet::config::RunConfig;
use lesiondet::dataset::{
    images_in_split, load_training_images, read_manifest, read_record_image, read_split_file, split_exams,
    synthesize_dataset, write_split_file, ExamRecord, Split, SplitAssignment,
};
use lesiondet::froc::{
    curve_csv, froc_exam_based, froc_image_based, froc_svg, match_image, summary_line, FrocCurve, FrocKind,
    FrocPoint, ImageMatch,
};
use lesiondet::imaging::io::{read_f32i, write_f32i, write_mask_pgm};
use lesiondet::imaging::preprocess;
use lesiondet::training::{train, TrainOptions, TrainPaths, TrainReport};
use lesiondet::unet::UnetModel;
use lesiondet::{Error, Result};

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Generate a phantom dataset; returns the manifest path.
pub fn cmd_synth(cfg: &RunConfig, n_exams: usize, malignant_fraction: f64, out_dir: &Path) -> Result<PathBuf> {
    let (manifest, _) = synthesize_dataset(out_dir, n_exams, malignant_fraction, cfg.seed, &cfg.phantom)?;
    Ok(manifest)
}

/// Preprocess every image of a manifest into `out_dir` as
/// `<image_id>.f32i` plus the breast mask `<image_id>_breast.pgm`.
pub fn cmd_preprocess(cfg: &RunConfig, manifest: &Path, out_dir: &Path) -> Result<usize> {
    let exams = read_manifest(manifest)?;
    let images: Vec<_> = exams.iter().flat_map(|e| e.images.iter()).collect();
    images.par_iter().try_for_each(|rec| {
        let pre = preprocess(&read_record_image(rec)?, &cfg.preprocessing)?;
        write_f32i(&out_dir.join(format!("{}.f32i", rec.image_id)), &pre.image)?;
        write_mask_pgm(&out_dir.join(format!("{}_breast.pgm", rec.image_id)), pre.mask.grid())
    })?;
    Ok(images.len())
}

/// Split from a file if given, otherwise recomputed from the seed.
pub fn resolve_split(cfg: &RunConfig, exams: &[ExamRecord], split_file: Option<&Path>) -> Result<SplitAssignment> {
    let split = match split_file {
        Some(p) => read_split_file(p)?,
        None => split_exams(exams, cfg.seed)?,
    };
    if let Some(e) = exams.iter().find(|e| split.get(&e.exam_id).is_none()) {
        return Err(Error::Data(format!("exam {} has no split assignment", e.exam_id)));
    }
    Ok(split)
}

/// Path of the split file written next to a model.
pub fn split_path_for(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".split.json");
    PathBuf::from(s)
}

pub fn cmd_train(
    cfg: &RunConfig,
    manifest: &Path,
    out_model: &Path,
    split_file: Option<&Path>,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    cfg.validate()?;
    let exams = read_manifest(manifest)?;
    let split = resolve_split(cfg, &exams, split_file)?;
    write_split_file(&split_path_for(out_model), &split)?;
    let train_images = load_training_images(&images_in_split(&exams, &split, Split::Train), &cfg.preprocessing)?;
    let val_images = load_training_images(&images_in_split(&exams, &split, Split::Val), &cfg.preprocessing)?;
    train(&train_images, &val_images, cfg, &TrainPaths::for_model(out_model), opts)
}

/// Write one probability map per image of `split` as `<image_id>.f32i`.
/// Returns the image ids in manifest order.
pub fn cmd_infer(
    cfg: &RunConfig,
    model_path: &Path,
    manifest: &Path,
    split: Split,
    split_file: Option<&Path>,
    out_dir: &Path,
) -> Result<Vec<String>> {
    let (model, sidecar) = UnetModel::load(model_path)?;
    let expected = sidecar.preprocessing.target_spacing_mm;
    let found = cfg.preprocessing.target_spacing_mm;
    if (expected - found).abs() > 1e-9 {
        return Err(Error::Data(format!(
            "model was trained at {expected} mm spacing but the configuration requests {found} mm"
        )));
    }
    let exams = read_manifest(manifest)?;
    let assignment = resolve_split(cfg, &exams, split_file)?;
    let records = images_in_split(&exams, &assignment, split);
    records.par_iter().try_for_each(|(_, rec)| {
        let pre = preprocess(&read_record_image(rec)?, &sidecar.preprocessing)?;
        if (pre.image.spacing_mm() - expected).abs() > 1e-9 {
            return Err(Error::Data(format!(
                "image {} preprocessed to {} mm, expected {expected} mm",
                rec.image_id,
                pre.image.spacing_mm()
            )));
        }
        let map = model.infer_full_image(&pre.image)?;
        write_f32i(&out_dir.join(format!("{}.f32i", rec.image_id)), map.image())
    })?;
    Ok(records.iter().map(|(_, r)| r.image_id.clone()).collect())
}

#[derive(Debug, Clone)]
pub struct FrocOutputs {
    pub image_curve: FrocCurve,
    pub exam_curve: FrocCurve,
    pub image_csv: PathBuf,
    pub exam_csv: PathBuf,
    pub candidates_csv: PathBuf,
    pub svg: PathBuf,
    pub summary: Vec<String>,
}

/// Candidates and both FROC curves on the images of `split`.
#[allow(clippy::too_many_arguments)]
pub fn cmd_froc(
    cfg: &RunConfig,
    maps_dir: &Path,
    manifest: &Path,
    split: Split,
    split_file: Option<&Path>,
    out_prefix: &Path,
    log_x: bool,
) -> Result<FrocOutputs> {
    let exams = read_manifest(manifest)?;
    let assignment = resolve_split(cfg, &exams, split_file)?;
    let records = images_in_split(&exams, &assignment, split);
    let missing: Vec<&str> = records
        .iter()
        .filter(|(_, r)| !maps_dir.join(format!("{}.f32i", r.image_id)).exists())
        .map(|(_, r)| r.image_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "missing probability maps in {} for: {}",
            maps_dir.display(),
            missing.join(", ")
        )));
    }
    let per_image: Vec<(Vec<Candidate>, ImageMatch)> = records
        .par_iter()
        .map(|(exam, rec)| {
            let map = ProbabilityMap::new(read_f32i(&maps_dir.join(format!("{}.f32i", rec.image_id)))?)?;
            let cands = extract_candidates(&map, cfg.candidates.base_threshold, cfg.candidates.cluster_radius_mm)?;
            let raw_spacing = read_record_image(rec)?.spacing_mm();
            let lesions = lesion_points(&rec.image_id, &rec.lesions, raw_spacing)?;
            let m = match_image(&rec.image_id, &exam.exam_id, &cands, &lesions, cfg.froc.hit_radius_mm);
            Ok((cands, m))
        })
        .collect::<Result<_>>()?;
    let matches: Vec<ImageMatch> = per_image.iter().map(|(_, m)| m.clone()).collect();
    let image_curve = froc_image_based(&matches)?;
    let exam_curve = froc_exam_based(&matches)?;
    let with = |suffix: &str| {
        let mut s = out_prefix.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    let out = FrocOutputs {
        image_csv: with("_image.csv"),
        exam_csv: with("_exam.csv"),
        candidates_csv: with("_candidates.csv"),
        svg: with(".svg"),
        summary: vec![
            summary_line(&image_curve, cfg.candidates.base_threshold),
            summary_line(&exam_curve, cfg.candidates.base_threshold),
        ],
        image_curve,
        exam_curve,
    };
    write_text(&out.image_csv, &curve_csv(&out.image_curve))?;
    write_text(&out.exam_csv, &curve_csv(&out.exam_curve))?;
    let rows = records.iter().zip(&per_image).map(|((_, r), (c, _))| (r.image_id.as_str(), c.as_slice()));
    write_text(&out.candidates_csv, &candidates_csv(rows))?;
    write_text(&out.svg, &froc_svg(&[&out.image_curve, &out.exam_curve], log_x))?;
    Ok(out)
}

/// Parse a FROC CSV written by [`cmd_froc`].
pub fn read_curve_csv(path: &Path) -> Result<FrocCurve> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut lines = text.lines();
    if lines.next() != Some("kind,threshold,fp_per_image,sensitivity") {
        return Err(bad("missing FROC header".into()));
    }
    let mut kind = None;
    let mut points = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let err = || bad(format!("malformed row {}", n + 2));
        if f.len() != 4 {
            return Err(err());
        }
        let k = match f[0] {
            "image" => FrocKind::Image,
            "exam" => FrocKind::Exam,
            _ => return Err(err()),
        };
        if kind.is_some_and(|p| p != k) {
            return Err(bad("mixed curve kinds".into()));
        }
        kind = Some(k);
        let threshold = if f[1] == "inf" {
            f32::INFINITY
        } else {
            f[1].parse().map_err(|_| err())?
        };
        points.push(FrocPoint {
            threshold,
            fp_per_image: f[2].parse().map_err(|_| err())?,
            sensitivity: f[3].parse().map_err(|_| err())?,
        });
    }
    Ok(FrocCurve {
        kind: kind.ok_or_else(|| bad("no rows".into()))?,
        points,
    })
}

/// Render FROC CSVs to one SVG.
pub fn cmd_plot(csvs: &[PathBuf], out: &Path, log_x: bool) -> Result<()> {
    if csvs.is_empty() {
        return Err(Error::InvalidArgument("at least one FROC CSV is required".into()));
    }
    let curves = csvs.iter().map(|p| read_curve_csv(p)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&FrocCurve> = curves.iter().collect();
    write_text(out, &froc_svg(&refs, log_x))
}

/// Group counts for reporting.
pub fn split_summary(split: &SplitAssignment) -> BTreeMap<&'static str, usize> {
    Split::ALL.iter().map(|s| (s.as_str(), split.count(*s))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn split_file_sits_next_to_model() {
        assert_eq!(split_path_for(Path::new("run/m.ckpt")), PathBuf::from("run/m.ckpt.split.json"));
    }

    #[test]
    fn curve_csv_round_trips() {
        let curve = FrocCurve {
            kind: FrocKind::Exam,
            points: vec![
                FrocPoint { threshold: 0.5, fp_per_image: 1.25, sensitivity: 0.75 },
                FrocPoint { threshold: 0.875, fp_per_image: 0.5, sensitivity: 0.5 },
                FrocPoint { threshold: f32::INFINITY, fp_per_image: 0.0, sensitivity: 0.0 },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.csv", &curve_csv(&curve));
        assert_eq!(read_curve_csv(&p).unwrap(), curve);
    }

    #[test]
    fn malformed_curves_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let header = "kind,threshold,fp_per_image,sensitivity\n";
        for (i, text) in [
            "image,0.5,1,1\n".to_string(),
            header.to_string(),
            format!("{header}image,0.5,1\n"),
            format!("{header}lesion,0.5,1,1\n"),
            format!("{header}image,x,1,1\n"),
            format!("{header}image,0.5,1,1\nexam,0.6,1,1\n"),
        ]
        .iter()
        .enumerate()
        {
            let p = write(dir.path(), &format!("{i}.csv"), text);
            assert!(matches!(read_curve_csv(&p), Err(Error::Format { .. })), "case {i}");
        }
        assert!(matches!(read_curve_csv(&dir.path().join("missing.csv")), Err(Error::Io { .. })));
    }

    #[test]
    fn plot_needs_a_curve() {
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_plot(&[], &dir.path().join("f.svg"), false).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }
}
