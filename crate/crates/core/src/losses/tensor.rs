//! Differentiable loss terms on `[batch, channel, height, width]` tensors.

use candle_core::{DType, Result, Tensor};

use crate::filters::reflect;

fn reflect_index(n: usize, k: usize, device: &candle_core::Device) -> Result<Tensor> {
    let r = (k / 2) as isize;
    let idx: Vec<u32> = (0..n + k - 1).map(|i| reflect(i as isize - r, n) as u32).collect();
    Tensor::from_vec(idx, n + k - 1, device)
}

/// Stride-1 `k x k` box mean over an already padded tensor.
fn box_mean(padded: &Tensor, k: usize, height: usize, width: usize) -> Result<Tensor> {
    let mut rows = padded.narrow(2, 0, height)?;
    for d in 1..k {
        rows = (rows + padded.narrow(2, d, height)?)?;
    }
    let mut cols = rows.narrow(3, 0, width)?;
    for d in 1..k {
        cols = (cols + rows.narrow(3, d, width)?)?;
    }
    cols / (k * k) as f64
}

/// `relu(mu_k(x^2) - mu_k(x)^2)` with reflect padding, same spatial size.
pub fn local_variance(x: &Tensor, k: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if k % 2 == 0 || k < 3 || k > h.min(w) {
        candle_core::bail!("kernel {k} must be odd, >= 3 and <= {}", h.min(w));
    }
    let rows = reflect_index(h, k, x.device())?;
    let cols = reflect_index(w, k, x.device())?;
    let padded = x.index_select(&rows, 2)?.index_select(&cols, 3)?;
    let mean = box_mean(&padded, k, h, w)?;
    let mean_sq = box_mean(&padded.sqr()?, k, h, w)?;
    (mean_sq - mean.sqr()?)?.relu()
}

/// Mean squared difference of the local variance maps; the target side is
/// detached.
pub fn variance_loss(pred: &Tensor, target: &Tensor, k: usize) -> Result<Tensor> {
    let vp = local_variance(pred, k)?;
    let vt = local_variance(&target.detach(), k)?;
    (vp - vt)?.sqr()?.mean_all()
}

pub fn l1(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    (pred - target)?.abs()?.mean_all()
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    (pred - target)?.sqr()?.mean_all()
}

/// `ln(1 + e^x)`, stable for large `|x|`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    x.relu()? + tail
}

/// Non-saturating generator loss `-mean(ln sigmoid(logits))`.
pub fn gan_generator(fake_logits: &Tensor) -> Result<Tensor> {
    softplus(&fake_logits.neg()?)?.mean_all()
}

/// Binary cross-entropy for the discriminator, halved as in pix2pix.
pub fn gan_discriminator(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let real = softplus(&real_logits.neg()?)?.mean_all()?;
    let fake = softplus(fake_logits)?.mean_all()?;
    (real + fake)? * 0.5
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    t.to_dtype(DType::F64)?.to_scalar::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::variance;
    use crate::raster::Raster;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, c: usize, seed: u64) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raster::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
    }

    /// HWC raster -> [1, C, H, W] f64 tensor.
    fn to_tensor(r: &Raster) -> Tensor {
        let (h, w, c) = r.dims();
        Tensor::from_vec(r.data().to_vec(), (1, h, w, c), &Device::Cpu)
            .unwrap()
            .permute((0, 3, 1, 2))
            .unwrap()
            .contiguous()
            .unwrap()
    }

    fn from_tensor(t: &Tensor) -> Vec<f64> {
        t.permute((0, 2, 3, 1)).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn tensor_variance_matches_reference_kernel() {
        for k in [3, 5, 15] {
            let img = random(17, 19, 2, k as u64);
            let t = local_variance(&to_tensor(&img), k).unwrap();
            let reference = variance::local_variance(&img, k).unwrap();
            for (a, b) in from_tensor(&t).iter().zip(reference.raster().data()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn autograd_matches_closed_form_gradient() {
        let target = random(8, 8, 2, 1);
        let pred = random(8, 8, 2, 2);
        for k in [3, 5] {
            let var = Var::from_tensor(&to_tensor(&pred)).unwrap();
            let loss = variance_loss(var.as_tensor(), &to_tensor(&target), k).unwrap();
            let expected = variance::variance_loss(&pred, &target, k).unwrap();
            assert!((scalar(&loss).unwrap() - expected).abs() < 1e-12);
            let grads = loss.backward().unwrap();
            let g = from_tensor(grads.get(var.as_tensor()).unwrap());
            let analytic = variance::variance_loss_grad(&pred, &target, k).unwrap();
            for (a, b) in g.iter().zip(analytic.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn gan_terms() {
        let zero = Tensor::zeros((1, 1, 3, 3), DType::F64, &Device::Cpu).unwrap();
        let g = scalar(&gan_generator(&zero).unwrap()).unwrap();
        assert!((g - std::f64::consts::LN_2).abs() < 1e-12);
        let d = scalar(&gan_discriminator(&zero, &zero).unwrap()).unwrap();
        assert!((d - std::f64::consts::LN_2).abs() < 1e-12);
        let big = Tensor::full(80.0f64, (2, 2), &Device::Cpu).unwrap();
        let sp = softplus(&big).unwrap().to_vec2::<f64>().unwrap();
        assert!((sp[0][0] - 80.0).abs() < 1e-9);
        let sp = softplus(&big.neg().unwrap()).unwrap().to_vec2::<f64>().unwrap();
        assert!(sp[0][0] >= 0.0 && sp[0][0] < 1e-30);
    }

    #[test]
    fn rejects_bad_kernel() {
        let t = Tensor::zeros((1, 1, 6, 6), DType::F32, &Device::Cpu).unwrap();
        assert!(local_variance(&t, 4).is_err());
        assert!(local_variance(&t, 7).is_err());
    }
}
