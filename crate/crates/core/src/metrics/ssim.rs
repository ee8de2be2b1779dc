//! Windowed SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
//! K2 = 0.03, data range 1. Only windows fully inside the image count.

use super::MetricError;
use crate::filters::{convolve_valid, gaussian_taps};
use crate::raster::{MifStack, Raster};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;

/// Mean SSIM of two single-channel `[0,1]` rasters.
pub fn ssim_channel(a: &Raster, b: &Raster) -> Result<f64, MetricError> {
    if !a.same_shape(b) || a.channels() != 1 {
        return Err(MetricError::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    if a.height() < WINDOW || a.width() < WINDOW {
        return Err(MetricError::Shape(format!(
            "{}x{} is smaller than the {WINDOW}x{WINDOW} window",
            a.height(),
            a.width()
        )));
    }
    let taps = gaussian_taps(WINDOW, SIGMA);
    let prod = |x: &Raster, y: &Raster| Raster::new(x.height(), x.width(), 1, x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect()).expect("same shape");
    let mu_a = convolve_valid(a, &taps);
    let mu_b = convolve_valid(b, &taps);
    let e_aa = convolve_valid(&prod(a, a), &taps);
    let e_bb = convolve_valid(&prod(b, b), &taps);
    let e_ab = convolve_valid(&prod(a, b), &taps);
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let n = mu_a.data().len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a.data()[i], mu_b.data()[i]);
        let va = e_aa.data()[i] - ma * ma;
        let vb = e_bb.data()[i] - mb * mb;
        let cov = e_ab.data()[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / n as f64)
}

/// SSIM averaged over channels, after mapping both stacks to `[0, 1]`.
pub fn ssim(pred: &MifStack, target: &MifStack) -> Result<f64, MetricError> {
    if pred.raster().dims() != target.raster().dims() {
        return Err(MetricError::Shape(format!(
            "pred {:?} vs target {:?}",
            pred.raster().dims(),
            target.raster().dims()
        )));
    }
    let k = pred.channels();
    let mut total = 0.0;
    for ch in 0..k {
        total += ssim_channel(&pred.unit_channel(ch), &target.unit_channel(ch))?;
    }
    Ok(total / k as f64)
}
