//! Perceptual distance following the LPIPS recipe over a pluggable feature
//! extractor: per layer, unit-normalize each spatial feature vector across
//! channels, square the difference, average over channels and positions,
//! then sum over layers.
//!
//! The default extractor is a frozen random convolutional pyramid drawn from
//! a fixed seed; reports label it `lpips_like`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::MetricError;
use crate::raster::{MifStack, Raster};

const NORM_EPS: f64 = 1e-10;

/// Feature pyramid over a single-channel image in `[-1, 1]`.
pub trait FeatureBackend: Send + Sync {
    fn name(&self) -> &str;

    fn features(&self, image: &Raster) -> Result<Vec<Raster>, String>;
}

struct ConvLayer {
    cin: usize,
    cout: usize,
    /// `[cout][cin][3][3]`, flattened.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvLayer {
    /// 3x3 convolution (reflect padding), ReLU, then 2x2 average pooling.
    fn forward(&self, x: &Raster) -> Raster {
        let (h, w, _) = x.dims();
        let mut y = Raster::zeros(h, w, self.cout);
        for r in 0..h {
            for c in 0..w {
                for o in 0..self.cout {
                    let mut acc = self.bias[o];
                    for i in 0..self.cin {
                        for dr in 0..3 {
                            let rr = crate::filters::reflect(r as isize + dr as isize - 1, h);
                            for dc in 0..3 {
                                let cc = crate::filters::reflect(c as isize + dc as isize - 1, w);
                                acc += self.weights[((o * self.cin + i) * 3 + dr) * 3 + dc] * x.get(rr, cc, i);
                            }
                        }
                    }
                    y.set(r, c, o, acc.max(0.0));
                }
            }
        }
        let (ph, pw) = ((h / 2).max(1), (w / 2).max(1));
        if h < 2 || w < 2 {
            return y;
        }
        Raster::from_fn(ph, pw, self.cout, |r, c, o| {
            0.25 * (y.get(2 * r, 2 * c, o) + y.get(2 * r + 1, 2 * c, o) + y.get(2 * r, 2 * c + 1, o) + y.get(2 * r + 1, 2 * c + 1, o))
        })
    }
}

/// Three-stage random pyramid (8, 16, 32 channels) with He-scaled weights.
pub struct RandomConvPyramid {
    layers: Vec<ConvLayer>,
    name: String,
}

pub const DEFAULT_PYRAMID_SEED: u64 = 0x5EED_F00D;

impl RandomConvPyramid {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [1usize, 8, 16, 32];
        let layers = widths
            .windows(2)
            .map(|p| {
                let (cin, cout) = (p[0], p[1]);
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let weights = (0..cout * cin * 9)
                    .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                    .collect();
                let bias = (0..cout)
                    .map(|_| 0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                    .collect();
                ConvLayer { cin, cout, weights, bias }
            })
            .collect();
        Self {
            layers,
            name: format!("lpips_like(random-pyramid-{seed:#x})"),
        }
    }
}

impl Default for RandomConvPyramid {
    fn default() -> Self {
        Self::new(DEFAULT_PYRAMID_SEED)
    }
}

impl FeatureBackend for RandomConvPyramid {
    fn name(&self) -> &str {
        &self.name
    }

    fn features(&self, image: &Raster) -> Result<Vec<Raster>, String> {
        if image.channels() != 1 {
            return Err(format!("expected one channel, got {}", image.channels()));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        let mut cur = image.clone();
        for l in &self.layers {
            cur = l.forward(&cur);
            out.push(cur.clone());
        }
        Ok(out)
    }
}

fn unit_normalize(f: &Raster) -> Raster {
    let (h, w, c) = f.dims();
    let mut out = f.clone();
    for p in 0..h * w {
        let v = &mut out.data_mut()[p * c..(p + 1) * c];
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in v.iter_mut() {
            *x /= norm + NORM_EPS;
        }
    }
    out
}

/// Distance between two single-channel `[-1, 1]` images.
pub fn perceptual_distance_channel(a: &Raster, b: &Raster, backend: &dyn FeatureBackend) -> Result<f64, MetricError> {
    if !a.same_shape(b) {
        return Err(MetricError::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let fail = |reason: String| MetricError::Backend {
        backend: backend.name().to_string(),
        reason,
    };
    let fa = backend.features(a).map_err(fail)?;
    let fb = backend.features(b).map_err(fail)?;
    if fa.len() != fb.len() {
        return Err(MetricError::Backend {
            backend: backend.name().to_string(),
            reason: "feature pyramids differ in depth".into(),
        });
    }
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let (nx, ny) = (unit_normalize(x), unit_normalize(y));
        let sq: f64 = nx.data().iter().zip(ny.data()).map(|(p, q)| (p - q).powi(2)).sum();
        total += sq / nx.data().len() as f64;
    }
    Ok(total)
}

/// Per-channel distance averaged over channels, each channel mapped to
/// `[-1, 1]` first.
pub fn perceptual_distance(pred: &MifStack, target: &MifStack, backend: &dyn FeatureBackend) -> Result<f64, MetricError> {
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
        let a = pred.unit_channel(ch).map(|v| 2.0 * v - 1.0);
        let b = target.unit_channel(ch).map(|v| 2.0 * v - 1.0);
        total += perceptual_distance_channel(&a, &b, backend)?;
    }
    Ok(total / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::ValueRange;
    use rand::Rng;
    use rand_distr::Normal;

    fn random(h: usize, w: usize, c: usize, seed: u64) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raster::from_fn(h, w, c, |_, _, _| rng.random())
    }

    fn stack(r: Raster) -> MifStack {
        let names = (0..r.channels()).map(|i| format!("m{i}")).collect();
        MifStack::new(r, ValueRange::Unit, names, 0).unwrap()
    }

    fn noisy(r: &Raster, sigma: f64, seed: u64) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, sigma).unwrap();
        r.map(|v| (v + n.sample(&mut rng)).clamp(0.0, 1.0))
    }

    #[test]
    fn identity_and_symmetry() {
        let b = RandomConvPyramid::default();
        for seed in 0..5 {
            let x = stack(random(16, 16, 2, seed));
            let y = stack(random(16, 16, 2, seed + 50));
            assert_eq!(perceptual_distance(&x, &x, &b).unwrap(), 0.0);
            let d1 = perceptual_distance(&x, &y, &b).unwrap();
            let d2 = perceptual_distance(&y, &x, &b).unwrap();
            assert!(d1 > 0.0 && (d1 - d2).abs() < 1e-6);
        }
    }

    #[test]
    fn stronger_noise_is_farther() {
        let b = RandomConvPyramid::default();
        // Smooth base image so noise dominates the difference.
        let base = Raster::from_fn(32, 32, 1, |r, c, _| 0.5 + 0.3 * ((r as f64) / 5.0).sin() * ((c as f64) / 7.0).cos());
        let a = stack(base.clone());
        let near = stack(noisy(&base, 0.01, 1));
        let far = stack(noisy(&base, 0.3, 2));
        assert!(perceptual_distance(&a, &far, &b).unwrap() > perceptual_distance(&a, &near, &b).unwrap());
    }

    #[test]
    fn pyramid_is_deterministic() {
        let x = random(16, 16, 1, 1);
        let f1 = RandomConvPyramid::default().features(&x).unwrap();
        let f2 = RandomConvPyramid::default().features(&x).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.iter().map(|f| f.dims()).collect::<Vec<_>>(), vec![(8, 8, 8), (4, 4, 16), (2, 2, 32)]);
    }
}
