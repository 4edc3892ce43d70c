use super::{BitGrid, BreastMask, Image};
use crate::candidates::{connected_components_with, Connectivity};
use crate::error::{Error, Result};

/// Pixels brighter than this fraction of the image maximum are tissue.
pub const BREAST_THRESHOLD_FRACTION: f32 = 0.05;

/// Estimate the breast region of a raw intensity image: threshold at 5% of
/// the maximum, keep the largest 8-connected component, fill its holes.
pub fn estimate_breast_mask(img: &Image) -> Result<BreastMask> {
    let max = img.max();
    if !(max > 0.0) {
        return Err(Error::EmptyMask(format!(
            "image has no positive pixels (max {max}); cannot locate the breast"
        )));
    }
    let threshold = BREAST_THRESHOLD_FRACTION * max;
    let (w, h) = (img.width(), img.height());
    let fg = BitGrid::new(w, h, img.pixels().iter().map(|&v| v > threshold).collect())?;
    let labeling = connected_components_with(&fg, Connectivity::Eight);
    let sizes = labeling.component_sizes();
    // Largest component; the earliest label wins ties.
    let (best, _) = sizes
        .iter()
        .enumerate()
        .skip(1)
        .fold((0usize, 0usize), |acc, (l, &n)| if n > acc.1 { (l, n) } else { acc });
    if best == 0 {
        return Err(Error::EmptyMask("no pixel above the tissue threshold".into()));
    }
    let largest = BitGrid::new(
        w,
        h,
        labeling.labels().iter().map(|&l| l as usize == best).collect(),
    )?;
    Ok(BreastMask::new(fill_holes(&largest)))
}

/// Sets every background region that does not touch the border.
pub(crate) fn fill_holes(grid: &BitGrid) -> BitGrid {
    let (w, h) = (grid.width(), grid.height());
    let background = BitGrid::new(w, h, grid.bits().iter().map(|b| !b).collect()).unwrap();
    let labeling = connected_components_with(&background, Connectivity::Four);
    let mut touches_border = vec![false; labeling.count() + 1];
    for y in 0..h {
        for x in 0..w {
            if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                touches_border[labeling.label(x, y) as usize] = true;
            }
        }
    }
    let bits = labeling
        .labels()
        .iter()
        .map(|&l| l == 0 || !touches_border[l as usize])
        .collect();
    BitGrid::new(w, h, bits).unwrap()
}
