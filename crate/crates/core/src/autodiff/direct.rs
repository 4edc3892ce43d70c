//! Direct 3×3 "same" convolution for `f32`.
//!
//! Thin channel counts at full resolution make im2col + GEMM memory bound.
//! This kernel works on a zero-padded copy of the input and keeps an
//! 8 channel × 8 pixel accumulator tile in registers.

const LANES: usize = 8;
const CO_BLOCK: usize = 8;

/// `out[co] = sum_ci w[co, ci] * x[ci]` for one batch item, without bias.
/// `weights` is laid out as (cout, cin, 3, 3); `out` is (cout, h, w).
pub(crate) fn conv3x3(x: &[f32], cin: usize, h: usize, w: usize, weights: &[f32], cout: usize, out: &mut [f32]) {
    debug_assert_eq!(x.len(), cin * h * w);
    debug_assert_eq!(weights.len(), cout * cin * 9);
    debug_assert_eq!(out.len(), cout * h * w);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the required target features were detected at runtime.
            unsafe { conv3x3_avx2(x, cin, h, w, weights, cout, out) };
            return;
        }
    }
    body::<false>(x, cin, h, w, weights, cout, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn conv3x3_avx2(x: &[f32], cin: usize, h: usize, w: usize, weights: &[f32], cout: usize, out: &mut [f32]) {
    body::<true>(x, cin, h, w, weights, cout, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[inline]
unsafe fn tile_avx2(padded: &[f32], base: usize, hp_wp: usize, wp: usize, cin: usize, wblk: &[f32]) -> [[f32; LANES]; CO_BLOCK] {
    use std::arch::x86_64::*;
    let mut acc = [_mm256_setzero_ps(); CO_BLOCK];
    let (pp, wpp) = (padded.as_ptr(), wblk.as_ptr());
    for ci in 0..cin {
        let row = pp.add(base + ci * hp_wp);
        let wci = wpp.add(ci * 9 * CO_BLOCK);
        for t in 0..9 {
            let inp = _mm256_loadu_ps(row.add((t / 3) * wp + t % 3));
            let wt = wci.add(t * CO_BLOCK);
            for (c, a) in acc.iter_mut().enumerate() {
                *a = _mm256_fmadd_ps(_mm256_broadcast_ss(&*wt.add(c)), inp, *a);
            }
        }
    }
    let mut res = [[0.0f32; LANES]; CO_BLOCK];
    for (r, a) in res.iter_mut().zip(acc) {
        _mm256_storeu_ps(r.as_mut_ptr(), a);
    }
    res
}

/// Accumulates one 8×8 tile over all input channels and taps.
#[inline(always)]
fn tile<const FMA: bool>(padded: &[f32], base: usize, hp_wp: usize, wp: usize, cin: usize, wblk: &[f32]) -> [[f32; LANES]; CO_BLOCK] {
    assert!(base + (cin - 1) * hp_wp + 2 * wp + 2 + LANES <= padded.len());
    assert!(wblk.len() >= cin * 9 * CO_BLOCK);
    #[cfg(target_arch = "x86_64")]
    if FMA {
        // SAFETY: only reached from `conv3x3_avx2`; the asserts above bound
        // every load.
        return unsafe { tile_avx2(padded, base, hp_wp, wp, cin, wblk) };
    }
    let mut acc = [[0.0f32; LANES]; CO_BLOCK];
    for ci in 0..cin {
        for t in 0..9 {
            let off = base + ci * hp_wp + (t / 3) * wp + t % 3;
            let inp = &padded[off..off + LANES];
            let wt = &wblk[(ci * 9 + t) * CO_BLOCK..(ci * 9 + t + 1) * CO_BLOCK];
            for (a, &wv) in acc.iter_mut().zip(wt) {
                for (v, &i) in a.iter_mut().zip(inp) {
                    *v += wv * i;
                }
            }
        }
    }
    acc
}

#[inline(always)]
fn body<const FMA: bool>(x: &[f32], cin: usize, h: usize, w: usize, weights: &[f32], cout: usize, out: &mut [f32]) {
    let chunks = w.div_ceil(LANES);
    // One zero column on the left, enough on the right for the last chunk.
    let wp = chunks * LANES + 2;
    let hp = h + 2;
    let mut padded = vec![0.0f32; cin * hp * wp];
    for ci in 0..cin {
        for y in 0..h {
            let dst = (ci * hp + y + 1) * wp + 1;
            padded[dst..dst + w].copy_from_slice(&x[(ci * h + y) * w..(ci * h + y + 1) * w]);
        }
    }
    let blocks = cout.div_ceil(CO_BLOCK);
    // Weights regrouped as [block][ci][tap][8], zero-filled past cout.
    let mut packed = vec![0.0f32; blocks * cin * 9 * CO_BLOCK];
    for co in 0..cout {
        let (blk, lane) = (co / CO_BLOCK, co % CO_BLOCK);
        for ci in 0..cin {
            for t in 0..9 {
                packed[((blk * cin + ci) * 9 + t) * CO_BLOCK + lane] = weights[(co * cin + ci) * 9 + t];
            }
        }
    }
    let plane = h * w;
    for blk in 0..blocks {
        let wblk = &packed[blk * cin * 9 * CO_BLOCK..(blk + 1) * cin * 9 * CO_BLOCK];
        let co0 = blk * CO_BLOCK;
        let nco = (cout - co0).min(CO_BLOCK);
        for y in 0..h {
            for chunk in 0..chunks {
                let x0 = chunk * LANES;
                let acc = tile::<FMA>(&padded, y * wp + x0, hp * wp, wp, cin, wblk);
                let n = (w - x0).min(LANES);
                for (c, row) in acc.iter().enumerate().take(nco) {
                    let dst = (co0 + c) * plane + y * w + x0;
                    out[dst..dst + n].copy_from_slice(&row[..n]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn oracle(x: &[f32], cin: usize, h: usize, w: usize, wt: &[f32], cout: usize) -> Vec<f64> {
        let mut out = vec![0.0f64; cout * h * w];
        for co in 0..cout {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut s = 0.0f64;
                    for ci in 0..cin {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let xv = x[(ci * h + sy as usize) * w + sx as usize] as f64;
                                s += wt[((co * cin + ci) * 3 + ky as usize) * 3 + kx as usize] as f64 * xv;
                            }
                        }
                    }
                    out[(co * h + y as usize) * w + xx as usize] = s;
                }
            }
        }
        out
    }

    #[test]
    fn matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(cin, cout, h, w) in &[(1, 8, 5, 7), (3, 11, 9, 17), (16, 8, 12, 8), (2, 1, 1, 1), (5, 16, 6, 23)] {
            let x: Vec<f32> = (0..cin * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wt: Vec<f32> = (0..cout * cin * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut out = vec![f32::NAN; cout * h * w];
            conv3x3(&x, cin, h, w, &wt, cout, &mut out);
            let want = oracle(&x, cin, h, w, &wt, cout);
            for (a, b) in out.iter().zip(&want) {
                assert!((*a as f64 - b).abs() < 1e-4, "{a} vs {b} for {cin}->{cout} {h}x{w}");
            }
        }
    }

    #[test]
    fn portable_path_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (cin, cout, h, w) = (4, 9, 10, 13);
        let x: Vec<f32> = (0..cin * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wt: Vec<f32> = (0..cout * cin * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut fast = vec![0.0; cout * h * w];
        let mut plain = vec![0.0; cout * h * w];
        conv3x3(&x, cin, h, w, &wt, cout, &mut fast);
        body::<false>(&x, cin, h, w, &wt, cout, &mut plain);
        for (a, b) in fast.iter().zip(&plain) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
