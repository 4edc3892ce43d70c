//! Image container, breast mask estimation and the three preprocessing steps:
//! energy band normalisation, Gaussian anti-aliasing plus resampling to the
//! working grid, and scaling to `[0, 1]`.

mod filter;
pub mod io;
mod mask;
mod normalize;

pub use filter::{gaussian_blur, gaussian_kernel, kernel_radius, resample_to_spacing};
pub use mask::{estimate_breast_mask, BREAST_THRESHOLD_FRACTION};
pub use normalize::{band_decompose, band_normalize, normalized_bands, scale_to_unit, Band};

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, shape_err, Result};

/// Canonical working grid spacing in millimetres (200 µm).
pub const TARGET_SPACING_MM: f64 = 0.2;

/// Default band-normalisation blur scales in millimetres.
pub const DEFAULT_BAND_SIGMAS_MM: [f64; 4] = [0.4, 0.8, 1.6, 3.2];

/// Row-major single-channel float image with isotropic pixel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    spacing_mm: f64,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, spacing_mm: f64, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(shape_err!("image dimensions must be positive, got {width}x{height}"));
        }
        if width * height != pixels.len() {
            return Err(shape_err!(
                "{}x{} image needs {} pixels, got {}",
                width,
                height,
                width * height,
                pixels.len()
            ));
        }
        if !(spacing_mm > 0.0) || !spacing_mm.is_finite() {
            return Err(invalid_arg!("pixel spacing must be positive, got {spacing_mm}"));
        }
        Ok(Image {
            width,
            height,
            spacing_mm,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, spacing_mm: f64, value: f32) -> Result<Self> {
        Image::new(width, height, spacing_mm, vec![value; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        spacing_mm: f64,
        mut f: impl FnMut(usize, usize) -> f32,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Image::new(width, height, spacing_mm, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn spacing_mm(&self) -> f64 {
        self.spacing_mm
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn max(&self) -> f32 {
        self.pixels.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub(crate) fn with_pixels(&self, pixels: Vec<f32>) -> Image {
        debug_assert_eq!(pixels.len(), self.pixels.len());
        Image {
            width: self.width,
            height: self.height,
            spacing_mm: self.spacing_mm,
            pixels,
        }
    }
}

/// Row-major boolean grid, used for breast masks, lesion masks and binarised
/// probability maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitGrid {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BitGrid {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width * height != bits.len() {
            return Err(shape_err!(
                "{}x{} grid needs {} cells, got {}",
                width,
                height,
                width * height,
                bits.len()
            ));
        }
        Ok(BitGrid {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        BitGrid {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        BitGrid {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Iterator over `(x, y)` of set cells in raster order.
    pub fn ones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % w, i / w))
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)` of the set cells.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for (x, y) in self.ones() {
            bbox = Some(match bbox {
                None => (x, y, x, y),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            });
        }
        bbox
    }

    /// Nearest-neighbour resize onto a `width`x`height` grid covering the same
    /// physical extent.
    pub fn resize_nearest(&self, width: usize, height: usize) -> BitGrid {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        BitGrid::from_fn(width, height, |x, y| {
            let src_x = (((x as f64 + 0.5) * sx) as usize).min(self.width - 1);
            let src_y = (((y as f64 + 0.5) * sy) as usize).min(self.height - 1);
            self.get(src_x, src_y)
        })
    }
}

/// Region of the image considered to be breast tissue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BreastMask {
    grid: BitGrid,
    area_px: usize,
}

impl BreastMask {
    pub fn new(grid: BitGrid) -> Self {
        let area_px = grid.count();
        BreastMask { grid, area_px }
    }

    /// Mask covering every pixel of a `width`x`height` image.
    pub fn full(width: usize, height: usize) -> Self {
        BreastMask::new(BitGrid::new(width, height, vec![true; width * height]).unwrap())
    }

    pub fn grid(&self) -> &BitGrid {
        &self.grid
    }

    pub fn area_px(&self) -> usize {
        self.area_px
    }

    pub fn width(&self) -> usize {
        self.grid.width
    }

    pub fn height(&self) -> usize {
        self.grid.height
    }

    #[inline]
    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.grid.get(x, y)
    }

    pub(crate) fn check_congruent(&self, img: &Image) -> Result<()> {
        if self.width() != img.width() || self.height() != img.height() {
            return Err(shape_err!(
                "mask is {}x{} but image is {}x{}",
                self.width(),
                self.height(),
                img.width(),
                img.height()
            ));
        }
        Ok(())
    }
}

/// Parameters of the preprocessing chain applied before training and
/// inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessParams {
    pub target_spacing_mm: f64,
    pub band_sigmas_mm: Vec<f64>,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        PreprocessParams {
            target_spacing_mm: TARGET_SPACING_MM,
            band_sigmas_mm: DEFAULT_BAND_SIGMAS_MM.to_vec(),
        }
    }
}

/// A preprocessed image together with its breast mask on the same grid.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub image: Image,
    pub mask: BreastMask,
}

/// Full preprocessing chain: estimate the breast mask on the raw image, band
/// normalise inside it, blur and resample to the target spacing, then scale the
/// in-mask range to `[0, 1]`.
pub fn preprocess(raw: &Image, params: &PreprocessParams) -> Result<Preprocessed> {
    let mask = estimate_breast_mask(raw)?;
    let normalized = band_normalize(raw, &mask, &params.band_sigmas_mm)?;
    let target = params.target_spacing_mm;
    let (resampled, mask) = if target > raw.spacing_mm() * (1.0 + 1e-9) {
        let blurred = gaussian_blur(&normalized, 0.5 * target)?;
        let out = resample_to_spacing(&blurred, target)?;
        let mask = BreastMask::new(mask.grid().resize_nearest(out.width(), out.height()));
        (out, mask)
    } else {
        (resample_to_spacing(&normalized, target)?, mask)
    };
    let image = scale_to_unit(&resampled, &mask);
    Ok(Preprocessed { image, mask })
}
