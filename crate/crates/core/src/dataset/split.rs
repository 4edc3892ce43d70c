use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ExamLabel, ExamRecord};
use crate::error::{invalid_arg, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(invalid_arg!("unknown split {s:?}; expected train, val or test")),
        }
    }
}

/// Exam id to split. Serialised as a plain JSON object.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SplitAssignment {
    pub by_exam: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn get(&self, exam_id: &str) -> Option<Split> {
        self.by_exam.get(exam_id).copied()
    }

    pub fn exams_in(&self, split: Split) -> impl Iterator<Item = &str> {
        self.by_exam.iter().filter(move |(_, &s)| s == split).map(|(e, _)| e.as_str())
    }

    pub fn count(&self, split: Split) -> usize {
        self.exams_in(split).count()
    }
}

/// Split sizes for `n` exams: half for training, a tenth for validation, the
/// rest for testing.
fn split_sizes(n: usize) -> Result<[usize; 3]> {
    let train = (n / 2).max(1);
    let val = ((n as f64 * 0.1).round() as usize).max(1);
    if n < 3 || train + val >= n {
        return Err(invalid_arg!("at least 3 exams are needed to split, got {n}"));
    }
    Ok([train, val, n - train - val])
}

/// Largest-remainder allocation of `m` items over bins proportional to
/// `sizes`.
fn allocate(m: usize, sizes: &[usize; 3]) -> [usize; 3] {
    let n: usize = sizes.iter().sum();
    let quotas: Vec<f64> = sizes.iter().map(|&s| m as f64 * s as f64 / n as f64).collect();
    let mut out = [0usize; 3];
    for (o, q) in out.iter_mut().zip(&quotas) {
        *o = q.floor() as usize;
    }
    let mut left = m - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        if out[i] < sizes[i] {
            out[i] += 1;
            left -= 1;
        }
    }
    out
}

/// Seeded exam-level split stratified by exam label.
pub fn split_exams(exams: &[ExamRecord], seed: u64) -> Result<SplitAssignment> {
    let sizes = split_sizes(exams.len())?;
    let mut ids: BTreeMap<&str, ExamLabel> = BTreeMap::new();
    for e in exams {
        if ids.insert(e.exam_id.as_str(), e.label()).is_some() {
            return Err(invalid_arg!("duplicate exam id {}", e.exam_id));
        }
    }
    let mut malignant: Vec<&str> = ids.iter().filter(|(_, &l)| l == ExamLabel::Malignant).map(|(e, _)| *e).collect();
    let mut normal: Vec<&str> = ids.iter().filter(|(_, &l)| l == ExamLabel::Normal).map(|(e, _)| *e).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    malignant.shuffle(&mut rng);
    normal.shuffle(&mut rng);
    let mal_counts = allocate(malignant.len(), &sizes);
    let mut out = SplitAssignment::default();
    let (mut mi, mut ni) = (0, 0);
    for (k, split) in Split::ALL.into_iter().enumerate() {
        for e in &malignant[mi..mi + mal_counts[k]] {
            out.by_exam.insert(e.to_string(), split);
        }
        mi += mal_counts[k];
        let normals = sizes[k] - mal_counts[k];
        for e in &normal[ni..ni + normals] {
            out.by_exam.insert(e.to_string(), split);
        }
        ni += normals;
    }
    Ok(out)
}
