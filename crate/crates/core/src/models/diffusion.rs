//! Conditional DDPM: linear beta schedule, forward noising, epsilon-prediction
//! denoiser interface and ancestral sampling.

use candle_core::{DType, Device, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::unet::UNet;
use super::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    #[serde(skip)]
    betas: Vec<f64>,
    #[serde(skip)]
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// `beta_t` linear from `beta_start` (t = 1) to `beta_end` (t = T).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> std::result::Result<Self, ModelError> {
        if steps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(ModelError::Config(format!(
                "invalid linear schedule T={steps}, beta {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            steps,
            beta_start,
            beta_end,
            betas,
            alpha_bars,
        })
    }

    /// `T = 1000`, `beta` from `1e-4` to `0.02`.
    pub fn default_linear() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid default schedule")
    }

    /// Rebuilds the derived tables after deserialization.
    pub fn rebuilt(&self) -> std::result::Result<Self, ModelError> {
        Self::linear(self.steps, self.beta_start, self.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `beta_t`, `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// Cumulative product `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_step(&self, t: usize) -> std::result::Result<(), ModelError> {
        if t == 0 || t > self.steps {
            return Err(ModelError::Timestep { t, steps: self.steps });
        }
        Ok(())
    }

    fn per_sample(&self, t: &[usize], f: impl Fn(usize) -> f64, like: &Tensor) -> Result<Tensor> {
        let v: Vec<f64> = t.iter().map(|&s| f(s)).collect();
        Tensor::from_vec(v, (t.len(), 1, 1, 1), like.device())?.to_dtype(like.dtype())
    }

    /// `y_t = sqrt(alpha_bar_t) y0 + sqrt(1 - alpha_bar_t) noise`, one `t` per
    /// batch element.
    pub fn q_sample(&self, y0: &Tensor, t: &[usize], noise: &Tensor) -> std::result::Result<Tensor, ModelError> {
        for &s in t {
            self.check_step(s)?;
        }
        if y0.dim(0)? != t.len() || y0.dims() != noise.dims() {
            return Err(ModelError::Shape(format!(
                "y0 {:?}, noise {:?}, {} timesteps",
                y0.dims(),
                noise.dims(),
                t.len()
            )));
        }
        let a = self.per_sample(t, |s| self.alpha_bar(s).sqrt(), y0)?;
        let b = self.per_sample(t, |s| (1.0 - self.alpha_bar(s)).sqrt(), y0)?;
        Ok((y0.broadcast_mul(&a)? + noise.broadcast_mul(&b)?)?)
    }

    /// Clean-sample estimate implied by a noise prediction.
    pub fn predict_x0(&self, y_t: &Tensor, t: &[usize], eps: &Tensor) -> std::result::Result<Tensor, ModelError> {
        let a = self.per_sample(t, |s| 1.0 / self.alpha_bar(s).sqrt(), y_t)?;
        let b = self.per_sample(t, |s| (1.0 - self.alpha_bar(s)).sqrt(), y_t)?;
        Ok((y_t - eps.broadcast_mul(&b)?)?.broadcast_mul(&a)?)
    }
}

/// Epsilon-prediction network conditioned on the (optionally prior-augmented)
/// brightfield input.
pub trait Denoiser {
    fn predict_noise(&self, y_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor>;
}

/// Always predicts zero noise.
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict_noise(&self, y_t: &Tensor, _t: &[usize], _cond: &Tensor) -> Result<Tensor> {
        y_t.zeros_like()
    }
}

/// U-Net over `[y_t; cond]` with timestep embeddings.
pub struct UNetDenoiser {
    pub(crate) net: UNet,
}

impl Denoiser for UNetDenoiser {
    fn predict_noise(&self, y_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor> {
        self.net.forward_raw(&Tensor::cat(&[y_t, cond], 1)?, Some(t))
    }
}

/// Noises `y0` at steps `t` and returns `(y_t, predicted noise)`.
pub fn ddpm_train_step(
    schedule: &DiffusionSchedule,
    denoiser: &dyn Denoiser,
    x_cond: &Tensor,
    y0: &Tensor,
    t: &[usize],
    noise: &Tensor,
) -> std::result::Result<(Tensor, Tensor), ModelError> {
    let y_t = schedule.q_sample(y0, t, noise)?;
    let eps = denoiser.predict_noise(&y_t, t, x_cond)?;
    if eps.dims() != y0.dims() {
        return Err(ModelError::Shape(format!(
            "denoiser returned {:?} for targets {:?}",
            eps.dims(),
            y0.dims()
        )));
    }
    Ok((y_t, eps))
}

/// Draws `n` standard normal values from `rng` in order.
pub fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Ancestral sampling over all `T` steps with `sigma_t^2 = beta_t`.
///
/// Noise is drawn from a ChaCha8 stream seeded with `seed`: first `y_T`, then
/// one fresh draw per step for `t = T..2` (the final step is noise-free).
/// Output is clipped to `[-1, 1]`.
pub fn ddpm_sample(
    schedule: &DiffusionSchedule,
    denoiser: &dyn Denoiser,
    x_cond: &Tensor,
    out_channels: usize,
    seed: u64,
) -> std::result::Result<Tensor, ModelError> {
    let (b, _, h, w) = x_cond.dims4()?;
    let shape = (b, out_channels, h, w);
    let n = b * out_channels * h * w;
    let device: &Device = x_cond.device();
    let dtype: DType = x_cond.dtype();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = Tensor::from_vec(standard_normal(&mut rng, n), shape, device)?.to_dtype(dtype)?;
    for t in (1..=schedule.steps()).rev() {
        let steps = vec![t; b];
        let eps = denoiser.predict_noise(&y, &steps, x_cond)?;
        let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
        let mean = ((&y - (eps * coef)?)? / schedule.alpha(t).sqrt())?;
        y = if t > 1 {
            let z = Tensor::from_vec(standard_normal(&mut rng, n), shape, device)?.to_dtype(dtype)?;
            (mean + (z * schedule.beta(t).sqrt())?)?
        } else {
            mean
        };
        let finite = y
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(ModelError::NonFinite { step: t });
        }
    }
    Ok(y.clamp(-1.0, 1.0)?)
}
