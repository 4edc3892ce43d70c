use super::Image;
use crate::error::{invalid_arg, Result};

/// Kernel radius in pixels for a Gaussian of `sigma_mm` on a grid of
/// `spacing_mm`: `ceil(3 sigma)`.
pub fn kernel_radius(sigma_mm: f64, spacing_mm: f64) -> usize {
    (3.0 * sigma_mm / spacing_mm - 1e-9).ceil().max(0.0) as usize
}

/// Normalised 1-D Gaussian taps of length `2 * radius + 1`.
pub fn gaussian_kernel(sigma_px: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let denom = 2.0 * sigma_px * sigma_px;
    let mut taps: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / denom).exp()).collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable Gaussian blur with edge replication at the borders.
pub fn gaussian_blur(img: &Image, sigma_mm: f64) -> Result<Image> {
    if !(sigma_mm > 0.0) || !sigma_mm.is_finite() {
        return Err(invalid_arg!("blur sigma must be positive, got {sigma_mm}"));
    }
    let sigma_px = sigma_mm / img.spacing_mm();
    let radius = kernel_radius(sigma_mm, img.spacing_mm());
    let taps = gaussian_kernel(sigma_px, radius);
    let src: Vec<f64> = img.pixels().iter().map(|&v| v as f64).collect();
    let blurred = blur_f64(&src, img.width(), img.height(), &taps);
    Ok(img.with_pixels(blurred.into_iter().map(|v| v as f32).collect()))
}

/// Blur in f64 without rounding between the two passes. Used directly by the
/// band decomposition.
pub(crate) fn blur_f64(src: &[f64], width: usize, height: usize, taps: &[f64]) -> Vec<f64> {
    let radius = (taps.len() / 2) as isize;
    let mut horiz = vec![0.0f64; src.len()];
    let max_x = width as isize - 1;
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        let out = &mut horiz[y * width..(y + 1) * width];
        for (x, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let sx = (x as isize + k as isize - radius).clamp(0, max_x) as usize;
                acc += t * row[sx];
            }
            *o = acc;
        }
    }
    let mut out = vec![0.0f64; src.len()];
    let max_y = height as isize - 1;
    let mut acc = vec![0.0f64; width];
    for y in 0..height {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (k, &t) in taps.iter().enumerate() {
            let sy = (y as isize + k as isize - radius).clamp(0, max_y) as usize;
            let row = &horiz[sy * width..(sy + 1) * width];
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += t * v;
            }
        }
        out[y * width..(y + 1) * width].copy_from_slice(&acc);
    }
    out
}

/// Bilinear downsampling onto a grid with spacing `target_mm`. The output has
/// `floor(extent / target_mm)` pixels along each axis; pixel centres are
/// aligned to the same physical frame as the input.
///
/// The caller is responsible for the anti-aliasing blur.
pub fn resample_to_spacing(img: &Image, target_mm: f64) -> Result<Image> {
    if !(target_mm > 0.0) || !target_mm.is_finite() {
        return Err(invalid_arg!("target spacing must be positive, got {target_mm}"));
    }
    let spacing = img.spacing_mm();
    if (target_mm - spacing).abs() <= 1e-9 * spacing {
        return Ok(img.clone());
    }
    if target_mm < spacing {
        return Err(invalid_arg!(
            "upscaling is not supported: image spacing {spacing} mm, requested {target_mm} mm"
        ));
    }
    let ratio = target_mm / spacing;
    let out_w = ((img.width() as f64 / ratio) + 1e-9).floor() as usize;
    let out_h = ((img.height() as f64 / ratio) + 1e-9).floor() as usize;
    if out_w == 0 || out_h == 0 {
        return Err(invalid_arg!(
            "{}x{} image at {spacing} mm is smaller than one {target_mm} mm pixel",
            img.width(),
            img.height()
        ));
    }
    let sample_axis = |i: usize, n: usize| -> (usize, usize, f64) {
        let pos = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, pos - i0 as f64)
    };
    let xs: Vec<_> = (0..out_w).map(|x| sample_axis(x, img.width())).collect();
    let mut pixels = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let (y0, y1, fy) = sample_axis(y, img.height());
        for &(x0, x1, fx) in &xs {
            let top = img.get(x0, y0) as f64 * (1.0 - fx) + img.get(x1, y0) as f64 * fx;
            let bottom = img.get(x0, y1) as f64 * (1.0 - fx) + img.get(x1, y1) as f64 * fx;
            pixels.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    Image::new(out_w, out_h, target_mm, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_2d_blur(img: &Image, sigma_px: f64, radius: usize) -> Vec<f64> {
        // Independent oracle: full 2-D kernel, replicated borders.
        let r = radius as isize;
        let (w, h) = (img.width() as isize, img.height() as isize);
        let mut weights = Vec::new();
        let mut total = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let wgt = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma_px * sigma_px)).exp();
                weights.push((dx, dy, wgt));
                total += wgt;
            }
        }
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for &(dx, dy, wgt) in &weights {
                    let sx = (x + dx).clamp(0, w - 1) as usize;
                    let sy = (y + dy).clamp(0, h - 1) as usize;
                    acc += wgt / total * img.get(sx, sy) as f64;
                }
                out.push(acc);
            }
        }
        out
    }

    #[test]
    fn constant_image_is_unchanged() {
        let img = Image::filled(17, 11, 0.2, 3.25).unwrap();
        for sigma in [0.1, 0.2, 0.7, 2.5] {
            let out = gaussian_blur(&img, sigma).unwrap();
            assert!(out.pixels().iter().all(|&v| (v - 3.25).abs() < 1e-6));
        }
    }

    #[test]
    fn radius_is_three_sigma() {
        assert_eq!(kernel_radius(0.2, 0.2), 3);
        assert_eq!(kernel_radius(0.5, 0.2), 8);
        assert_eq!(kernel_radius(1.6, 0.2), 24);
    }

    #[test]
    fn impulse_matches_direct_kernel() {
        let mut img = Image::filled(21, 21, 0.2, 0.0).unwrap();
        img.set(10, 10, 1.0);
        let out = gaussian_blur(&img, 0.2).unwrap();
        let oracle = direct_2d_blur(&img, 1.0, 3);
        for (a, b) in out.pixels().iter().zip(&oracle) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
        let taps = gaussian_kernel(1.0, 3);
        assert!((out.get(10, 10) as f64 - taps[3] * taps[3]).abs() < 1e-7);
        let sum: f64 = out.pixels().iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-5);
    }

    #[test]
    fn blur_preserves_sum_in_interior() {
        let img = Image::from_fn(64, 64, 0.2, |x, y| {
            let dx = x as f32 - 32.0;
            let dy = y as f32 - 30.0;
            (-(dx * dx + dy * dy) / 50.0).exp()
        })
        .unwrap();
        let before: f64 = img.pixels().iter().map(|&v| v as f64).sum();
        let after: f64 = gaussian_blur(&img, 0.6).unwrap().pixels().iter().map(|&v| v as f64).sum();
        assert!(((after - before) / before).abs() < 1e-4);
    }

    #[test]
    fn non_positive_sigma_rejected() {
        let img = Image::filled(4, 4, 0.2, 1.0).unwrap();
        assert!(gaussian_blur(&img, 0.0).is_err());
        assert!(gaussian_blur(&img, -1.0).is_err());
        assert!(gaussian_blur(&img, f64::NAN).is_err());
    }

    #[test]
    fn factor_two_geometry() {
        let img = Image::filled(2000, 2000, 0.1, 1.0).unwrap();
        let out = resample_to_spacing(&img, 0.2).unwrap();
        assert_eq!((out.width(), out.height()), (1000, 1000));
        assert_eq!(out.spacing_mm(), 0.2);
    }

    #[test]
    fn same_spacing_is_identity() {
        let img = Image::from_fn(9, 7, 0.2, |x, y| (x * 3 + y) as f32).unwrap();
        assert_eq!(resample_to_spacing(&img, 0.2).unwrap(), img);
    }

    #[test]
    fn upscaling_rejected() {
        let img = Image::filled(9, 7, 0.2, 0.0).unwrap();
        assert!(resample_to_spacing(&img, 0.1).is_err());
    }

    #[test]
    fn linear_ramp_is_reproduced() {
        // v = x_mm + 2 y_mm sampled at pixel centres.
        let s = 0.1;
        let ramp = |xmm: f64, ymm: f64| xmm + 2.0 * ymm;
        let img = Image::from_fn(40, 30, s, |x, y| {
            ramp((x as f64 + 0.5) * s, (y as f64 + 0.5) * s) as f32
        })
        .unwrap();
        let out = resample_to_spacing(&img, 0.2).unwrap();
        assert_eq!((out.width(), out.height()), (20, 15));
        for y in 1..out.height() - 1 {
            for x in 1..out.width() - 1 {
                let expected = ramp((x as f64 + 0.5) * 0.2, (y as f64 + 0.5) * 0.2);
                assert!((out.get(x, y) as f64 - expected).abs() < 1e-5);
            }
        }
    }
}
