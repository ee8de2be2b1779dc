//! Local variance maps `V_k(I) = mu_k(I^2) - mu_k(I)^2` with stride-1 `k x k`
//! average pooling over a reflect-padded image, computed with summed-area
//! tables so the cost is independent of `k`.

use crate::filters::reflect;
use crate::raster::Raster;

use super::LossError;

/// Per-channel local variance, same spatial size as the input.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceMap {
    var: Raster,
    kernel: usize,
}

impl VarianceMap {
    pub fn raster(&self) -> &Raster {
        &self.var
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }
}

pub(crate) fn check_kernel(k: usize, height: usize, width: usize) -> Result<(), LossError> {
    if k % 2 == 0 || k < 3 {
        return Err(LossError::Kernel(format!("kernel {k} must be odd and at least 3")));
    }
    if k > height.min(width) {
        return Err(LossError::Kernel(format!(
            "kernel {k} exceeds raster {height}x{width}"
        )));
    }
    Ok(())
}

/// Inclusive prefix sums with a zero guard row/column: `(h + 1) x (w + 1)`.
struct SummedArea {
    width: usize,
    table: Vec<f64>,
}

impl SummedArea {
    fn new(height: usize, width: usize, value: impl Fn(usize, usize) -> f64) -> Self {
        let stride = width + 1;
        let mut table = vec![0.0; (height + 1) * stride];
        for r in 0..height {
            let mut row_sum = 0.0;
            for c in 0..width {
                row_sum += value(r, c);
                table[(r + 1) * stride + c + 1] = table[r * stride + c + 1] + row_sum;
            }
        }
        Self { width, table }
    }

    /// Sum over rows `r0..r1` and cols `c0..c1` (half-open).
    #[inline]
    fn sum(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> f64 {
        let s = self.width + 1;
        self.table[r1 * s + c1] - self.table[r0 * s + c1] - self.table[r1 * s + c0] + self.table[r0 * s + c0]
    }
}

/// Window means of `I` and `I^2` plus the raw (unclamped) variance for one
/// channel, all `h x w`.
struct ChannelMoments {
    mean: Vec<f64>,
    raw_var: Vec<f64>,
}

fn channel_moments(img: &Raster, ch: usize, k: usize) -> ChannelMoments {
    let (h, w, _) = img.dims();
    let r = (k / 2) as isize;
    let padded = |pr: usize, pc: usize| {
        img.get(
            reflect(pr as isize - r, h),
            reflect(pc as isize - r, w),
            ch,
        )
    };
    let (ph, pw) = (h + k - 1, w + k - 1);
    let s1 = SummedArea::new(ph, pw, padded);
    let s2 = SummedArea::new(ph, pw, |a, b| padded(a, b).powi(2));
    let area = (k * k) as f64;
    let mut mean = Vec::with_capacity(h * w);
    let mut raw_var = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let m1 = s1.sum(i, i + k, j, j + k) / area;
            let m2 = s2.sum(i, i + k, j, j + k) / area;
            mean.push(m1);
            raw_var.push(m2 - m1 * m1);
        }
    }
    ChannelMoments { mean, raw_var }
}

/// Local variance map of every channel; negative round-off is clamped to 0.
pub fn local_variance(img: &Raster, k: usize) -> Result<VarianceMap, LossError> {
    let (h, w, c) = img.dims();
    check_kernel(k, h, w)?;
    let mut var = Raster::zeros(h, w, c);
    for ch in 0..c {
        let m = channel_moments(img, ch, k);
        for i in 0..h {
            for j in 0..w {
                var.set(i, j, ch, m.raw_var[i * w + j].max(0.0));
            }
        }
    }
    Ok(VarianceMap { var, kernel: k })
}

fn check_pair(pred: &Raster, target: &Raster) -> Result<(), LossError> {
    if !pred.same_shape(target) {
        return Err(LossError::Shape(format!(
            "pred {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    Ok(())
}

/// Mean over all elements of `(V_k(pred) - V_k(target))^2`.
pub fn variance_loss(pred: &Raster, target: &Raster, k: usize) -> Result<f64, LossError> {
    check_pair(pred, target)?;
    let vp = local_variance(pred, k)?;
    let vt = local_variance(target, k)?;
    let n = pred.data().len() as f64;
    Ok(vp
        .var
        .data()
        .iter()
        .zip(vt.var.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n)
}

/// Analytic gradient of [`variance_loss`] with respect to `pred`.
///
/// With `g_p = 2 (V(pred)_p - V(target)_p) / N` (zero where the clamp is
/// active) and `P` the reflect-padded prediction, each padded pixel `q`
/// receives `(2 / k^2) (P_q * sum_{p ~ q} g_p - sum_{p ~ q} g_p mu_p)`, where
/// `p ~ q` ranges over output windows containing `q`. Padded gradients are
/// folded back onto their source pixels through the reflection.
pub fn variance_loss_grad(pred: &Raster, target: &Raster, k: usize) -> Result<Raster, LossError> {
    check_pair(pred, target)?;
    let (h, w, c) = pred.dims();
    check_kernel(k, h, w)?;
    let n = pred.data().len() as f64;
    let r = (k / 2) as isize;
    let area = (k * k) as f64;
    let mut grad = Raster::zeros(h, w, c);
    for ch in 0..c {
        let mp = channel_moments(pred, ch, k);
        let mt = channel_moments(target, ch, k);
        let g: Vec<f64> = mp
            .raw_var
            .iter()
            .zip(&mt.raw_var)
            .map(|(&vp, &vt)| {
                if vp < 0.0 {
                    0.0
                } else {
                    2.0 * (vp - vt.max(0.0)) / n
                }
            })
            .collect();
        let sg = SummedArea::new(h, w, |i, j| g[i * w + j]);
        let sgm = SummedArea::new(h, w, |i, j| g[i * w + j] * mp.mean[i * w + j]);
        for qr in 0..h + k - 1 {
            // Output rows whose window covers padded row qr.
            let r0 = qr.saturating_sub(k - 1);
            let r1 = qr.min(h - 1) + 1;
            let src_r = reflect(qr as isize - r, h);
            for qc in 0..w + k - 1 {
                let c0 = qc.saturating_sub(k - 1);
                let c1 = qc.min(w - 1) + 1;
                let a = sg.sum(r0, r1, c0, c1);
                let b = sgm.sum(r0, r1, c0, c1);
                let src_c = reflect(qc as isize - r, w);
                let value = pred.get(src_r, src_c, ch);
                let idx = grad.index(src_r, src_c, ch);
                grad.data_mut()[idx] += 2.0 / area * (value * a - b);
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Direct sliding-window reference with explicit reflect padding.
    use crate::filters::reflect;
    use crate::raster::Raster;

    pub fn naive_local_variance(img: &Raster, k: usize) -> Raster {
        let (h, w, c) = img.dims();
        let r = (k / 2) as isize;
        Raster::from_fn(h, w, c, |i, j, ch| {
            let mut vals = Vec::with_capacity(k * k);
            for di in -r..=r {
                for dj in -r..=r {
                    vals.push(img.get(
                        reflect(i as isize + di, h),
                        reflect(j as isize + dj, w),
                        ch,
                    ));
                }
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).max(0.0)
        })
    }

    pub fn naive_variance_loss(pred: &Raster, target: &Raster, k: usize) -> f64 {
        let a = naive_local_variance(pred, k);
        let b = naive_local_variance(target, k);
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / a.data().len() as f64
    }
}
