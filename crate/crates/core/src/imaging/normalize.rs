use super::filter::{blur_f64, gaussian_kernel, kernel_radius};
use super::{BreastMask, Image};
use crate::error::{invalid_arg, Error, Result};

/// Bands with an in-mask standard deviation below this are left untouched.
pub const MIN_BAND_STD: f64 = 1e-8;

/// One frequency band of the decomposition after normalisation.
#[derive(Debug, Clone)]
pub struct Band {
    pub values: Vec<f64>,
    /// In-mask standard deviation before normalisation.
    pub std_before: f64,
    /// False when the band was below [`MIN_BAND_STD`] and kept as is.
    pub normalized: bool,
}

fn check_sigmas(sigmas_mm: &[f64]) -> Result<()> {
    if sigmas_mm.is_empty() {
        return Err(invalid_arg!("at least one band sigma is required"));
    }
    if sigmas_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(invalid_arg!("band sigmas must be positive: {sigmas_mm:?}"));
    }
    if sigmas_mm.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid_arg!("band sigmas must be strictly increasing: {sigmas_mm:?}"));
    }
    Ok(())
}

/// Difference-of-Gaussians decomposition: `blur(s_i) - blur(s_{i+1})` for each
/// consecutive pair of sigmas, followed by the low-pass residual
/// `blur(s_last)`. Summing the bands gives `blur(s_0)`.
pub fn band_decompose(img: &Image, sigmas_mm: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_sigmas(sigmas_mm)?;
    let src: Vec<f64> = img.pixels().iter().map(|&v| v as f64).collect();
    let blurred: Vec<Vec<f64>> = sigmas_mm
        .iter()
        .map(|&sigma| {
            let radius = kernel_radius(sigma, img.spacing_mm());
            let taps = gaussian_kernel(sigma / img.spacing_mm(), radius);
            blur_f64(&src, img.width(), img.height(), &taps)
        })
        .collect();
    let mut bands: Vec<Vec<f64>> = blurred
        .windows(2)
        .map(|pair| pair[0].iter().zip(&pair[1]).map(|(a, b)| a - b).collect())
        .collect();
    bands.push(blurred.last().cloned().unwrap());
    Ok(bands)
}

fn masked_std(values: &[f64], mask: &BreastMask) -> f64 {
    let n = mask.area_px() as f64;
    let in_mask = || values.iter().zip(mask.grid().bits()).filter(|(_, &m)| m).map(|(v, _)| *v);
    let mean = in_mask().sum::<f64>() / n;
    (in_mask().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Decompose and divide every band (the residual included) by its in-mask
/// standard deviation.
pub fn normalized_bands(img: &Image, mask: &BreastMask, sigmas_mm: &[f64]) -> Result<Vec<Band>> {
    mask.check_congruent(img)?;
    if mask.area_px() == 0 {
        return Err(Error::EmptyMask("band normalisation needs a nonempty breast mask".into()));
    }
    let bands = band_decompose(img, sigmas_mm)?;
    Ok(bands
        .into_iter()
        .map(|mut values| {
            let std_before = masked_std(&values, mask);
            let normalized = std_before >= MIN_BAND_STD;
            if normalized {
                values.iter_mut().for_each(|v| *v /= std_before);
            }
            Band {
                values,
                std_before,
                normalized,
            }
        })
        .collect())
}

/// Energy band normalisation: every band gets unit energy inside the breast
/// mask and the bands are summed back into one image.
pub fn band_normalize(img: &Image, mask: &BreastMask, sigmas_mm: &[f64]) -> Result<Image> {
    let bands = normalized_bands(img, mask, sigmas_mm)?;
    let mut sum = vec![0.0f64; img.pixels().len()];
    for band in &bands {
        for (s, v) in sum.iter_mut().zip(&band.values) {
            *s += v;
        }
    }
    Ok(img.with_pixels(sum.into_iter().map(|v| v as f32).collect()))
}

/// Affine map of the in-mask range onto `[0, 1]`; pixels outside the mask are
/// clamped. Constant images (or an empty in-mask range) map to zeros. An empty
/// mask falls back to the whole image.
pub fn scale_to_unit(img: &Image, mask: &BreastMask) -> Image {
    let use_mask = mask.area_px() > 0
        && mask.width() == img.width()
        && mask.height() == img.height();
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for (i, &v) in img.pixels().iter().enumerate() {
        if !use_mask || mask.grid().bits()[i] {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let range = hi as f64 - lo as f64;
    if !(range > 0.0) || !range.is_finite() {
        return img.with_pixels(vec![0.0; img.pixels().len()]);
    }
    let pixels = img
        .pixels()
        .iter()
        .map(|&v| (((v as f64 - lo as f64) / range) as f32).clamp(0.0, 1.0))
        .collect();
    img.with_pixels(pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{gaussian_blur, BitGrid, DEFAULT_BAND_SIGMAS_MM};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn noise_image(seed: u64, w: usize, h: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, 0.2, |_, _| rng.sample::<f32, _>(StandardNormal)).unwrap()
    }

    fn disk_mask(w: usize, h: usize) -> BreastMask {
        let (cx, cy, r) = (w as f64 / 2.0, h as f64 / 2.0, w.min(h) as f64 * 0.4);
        BreastMask::new(BitGrid::from_fn(w, h, |x, y| {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            dx * dx + dy * dy <= r * r
        }))
    }

    #[test]
    fn band_limited_noise_gets_unit_energy() {
        // White noise blurred at 1 mm has most of its energy between the 0.8
        // and 1.6 mm scales; scale it to std 5 there, then normalise.
        let base = gaussian_blur(&noise_image(3, 96, 96), 1.0).unwrap();
        let mask = disk_mask(96, 96);
        let sigmas = DEFAULT_BAND_SIGMAS_MM;
        let raw = band_decompose(&base, &sigmas).unwrap();
        let std1 = masked_std(&raw[1], &mask);
        let scale = 5.0 / std1;
        let img = base.with_pixels(base.pixels().iter().map(|&v| (v as f64 * scale) as f32).collect());
        let before = band_decompose(&img, &sigmas).unwrap();
        assert!((masked_std(&before[1], &mask) - 5.0).abs() < 1e-3);
        let bands = normalized_bands(&img, &mask, &sigmas).unwrap();
        for band in &bands {
            assert!(band.normalized);
            assert!((masked_std(&band.values, &mask) - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn scale_invariant() {
        let img = gaussian_blur(&noise_image(11, 64, 48), 0.5).unwrap();
        let img = img.with_pixels(img.pixels().iter().map(|v| v + 3.0).collect());
        let mask = disk_mask(64, 48);
        let a = band_normalize(&img, &mask, &DEFAULT_BAND_SIGMAS_MM).unwrap();
        for c in [2.0f32, 0.125, 3.7, 1234.5] {
            let scaled = img.with_pixels(img.pixels().iter().map(|v| v * c).collect());
            let b = band_normalize(&scaled, &mask, &DEFAULT_BAND_SIGMAS_MM).unwrap();
            for (x, y) in a.pixels().iter().zip(b.pixels()) {
                assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "c={c}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn constant_image_keeps_low_pass() {
        let img = Image::filled(32, 32, 0.2, 0.75).unwrap();
        let mask = BreastMask::full(32, 32);
        let bands = normalized_bands(&img, &mask, &DEFAULT_BAND_SIGMAS_MM).unwrap();
        assert!(bands.iter().all(|b| !b.normalized));
        let out = band_normalize(&img, &mask, &DEFAULT_BAND_SIGMAS_MM).unwrap();
        assert!(out.pixels().iter().all(|&v| (v - 0.75).abs() < 1e-6));
    }

    #[test]
    fn empty_mask_and_bad_sigmas_rejected() {
        let img = Image::filled(8, 8, 0.2, 1.0).unwrap();
        let empty = BreastMask::new(BitGrid::empty(8, 8));
        assert!(matches!(band_normalize(&img, &empty, &[0.4, 0.8]), Err(Error::EmptyMask(_))));
        let full = BreastMask::full(8, 8);
        assert!(band_normalize(&img, &full, &[0.8, 0.4]).is_err());
        assert!(band_normalize(&img, &full, &[]).is_err());
        assert!(band_normalize(&img, &full, &[0.0, 0.4]).is_err());
    }

    #[test]
    fn unit_scaling_affine_definition() {
        let img = Image::new(3, 1, 0.2, vec![2.0, 4.0, 6.0]).unwrap();
        let out = scale_to_unit(&img, &BreastMask::full(3, 1));
        assert_eq!(out.pixels(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn unit_scaling_constant_is_zero() {
        let img = Image::filled(5, 5, 0.2, 42.0).unwrap();
        let out = scale_to_unit(&img, &BreastMask::full(5, 5));
        assert!(out.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_scaling_clamps_outside_mask() {
        let img = Image::new(4, 1, 0.2, vec![-10.0, 1.0, 3.0, 10.0]).unwrap();
        let mask = BreastMask::new(BitGrid::new(4, 1, vec![false, true, true, false]).unwrap());
        let out = scale_to_unit(&img, &mask);
        assert_eq!(out.pixels(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn unit_scaling_random_range() {
        let img = noise_image(5, 40, 30);
        let out = scale_to_unit(&img, &BreastMask::full(40, 30));
        let lo = out.pixels().iter().copied().fold(f32::INFINITY, f32::min);
        let hi = out.pixels().iter().copied().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);
    }
}
