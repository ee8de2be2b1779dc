//! Small separable filtering helpers shared by the prior backends and SSIM.

use crate::raster::Raster;

/// Normalized 1-D Gaussian taps of odd length `size`.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    assert!(size % 2 == 1, "gaussian window must be odd");
    let half = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - half;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Mirror index without edge repetition (`-1 -> 1`, `n -> n - 2`).
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Same-size separable convolution with reflect boundary handling.
pub fn convolve_reflect(src: &Raster, taps: &[f64]) -> Raster {
    let (h, w, c) = src.dims();
    let half = (taps.len() / 2) as isize;
    let mut tmp = Raster::zeros(h, w, c);
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let cc = reflect(col as isize + k as isize - half, w);
                    acc += t * src.get(r, cc, ch);
                }
                tmp.set(r, col, ch, acc);
            }
        }
    }
    let mut out = Raster::zeros(h, w, c);
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    let rr = reflect(r as isize + k as isize - half, h);
                    acc += t * tmp.get(rr, col, ch);
                }
                out.set(r, col, ch, acc);
            }
        }
    }
    out
}

/// Separable convolution keeping only positions where the window fits
/// entirely (output is `(h - n + 1) x (w - n + 1)`).
pub fn convolve_valid(src: &Raster, taps: &[f64]) -> Raster {
    let (h, w, c) = src.dims();
    let n = taps.len();
    assert!(h >= n && w >= n, "window larger than raster");
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = Raster::zeros(h, ow, c);
    for r in 0..h {
        for col in 0..ow {
            for ch in 0..c {
                let acc = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * src.get(r, col + k, ch))
                    .sum();
                tmp.set(r, col, ch, acc);
            }
        }
    }
    let mut out = Raster::zeros(oh, ow, c);
    for r in 0..oh {
        for col in 0..ow {
            for ch in 0..c {
                let acc = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * tmp.get(r + k, col, ch))
                    .sum();
                out.set(r, col, ch, acc);
            }
        }
    }
    out
}
