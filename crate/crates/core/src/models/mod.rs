//! Translation architectures: U-Net and residual generators, the PatchGAN
//! discriminator and the conditional diffusion denoiser. All accept 3
//! (brightfield) or 4 (brightfield + prior) input channels.

pub mod checkpoint;
pub mod diffusion;
pub mod layers;
pub mod patchgan;
pub mod resnet;
pub mod unet;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::raster::{ImagePatch, MifStack, Raster, RasterError, ValueRange};

pub use diffusion::{ddpm_sample, ddpm_train_step, DiffusionSchedule, Denoiser, UNetDenoiser, ZeroDenoiser};
pub use layers::ParamStore;
pub use patchgan::PatchDiscriminator;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("timestep {t} outside 1..={steps}")]
    Timestep { t: usize, steps: usize },
    #[error("non-finite values during sampling at step {step}")]
    NonFinite { step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorArch {
    Unet,
    Resnet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub arch: GeneratorArch,
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    /// Downsampling levels.
    pub depth: usize,
    /// Residual blocks at the bottleneck (ResNet only).
    pub res_blocks: usize,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.in_channels == 3 || self.in_channels == 4) {
            return Err(ModelError::Config(format!(
                "in_channels must be 3 or 4, got {}",
                self.in_channels
            )));
        }
        if self.out_channels == 0 || self.base_width == 0 || self.depth == 0 {
            return Err(ModelError::Config(format!("degenerate generator {self:?}")));
        }
        Ok(())
    }

    /// Inputs must have sides divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    /// Conditioning plus target channels.
    pub in_channels: usize,
    pub base_width: usize,
    /// Stride-2 layers; 3 gives the 70-pixel patch field.
    pub n_layers: usize,
}

impl DiscriminatorSpec {
    pub fn patch70(in_channels: usize, base_width: usize) -> Self {
        Self {
            in_channels,
            base_width,
            n_layers: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserSpec {
    pub cond_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub time_dim: usize,
}

enum GeneratorNet {
    Unet(unet::UNet),
    Resnet(resnet::ResNetGenerator),
}

/// Translation generator with a tanh head.
pub struct Generator {
    spec: GeneratorSpec,
    net: GeneratorNet,
}

impl Generator {
    pub fn new(store: &mut ParamStore, prefix: &str, spec: GeneratorSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        let net = match spec.arch {
            GeneratorArch::Unet => GeneratorNet::Unet(unet::UNet::new(
                store,
                prefix,
                spec.in_channels,
                spec.out_channels,
                spec.base_width,
                spec.depth,
                None,
            )?),
            GeneratorArch::Resnet => GeneratorNet::Resnet(resnet::ResNetGenerator::new(
                store,
                prefix,
                spec.in_channels,
                spec.out_channels,
                spec.base_width,
                spec.depth,
                spec.res_blocks,
            )?),
        };
        Ok(Self { spec, net })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    /// `[B, in, H, W] -> [B, K, H, W]` in `[-1, 1]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let c = x.dim(1)?;
        if c != self.spec.in_channels {
            return Err(ModelError::Config(format!(
                "generator built for {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        let raw = match &self.net {
            GeneratorNet::Unet(n) => n.forward_raw(x, None)?,
            GeneratorNet::Resnet(n) => n.forward_raw(x)?,
        };
        Ok(raw.tanh()?)
    }
}

pub fn build_denoiser(store: &mut ParamStore, prefix: &str, spec: &DenoiserSpec) -> Result<UNetDenoiser, ModelError> {
    if !(spec.cond_channels == 3 || spec.cond_channels == 4) {
        return Err(ModelError::Config(format!(
            "conditioning must have 3 or 4 channels, got {}",
            spec.cond_channels
        )));
    }
    let net = unet::UNet::new(
        store,
        prefix,
        spec.out_channels + spec.cond_channels,
        spec.out_channels,
        spec.base_width,
        spec.depth,
        Some(spec.time_dim),
    )?;
    Ok(UNetDenoiser { net })
}

/// Stacks HWC rasters of equal shape into an NCHW tensor.
pub fn rasters_to_tensor(rasters: &[&Raster], device: &Device, dtype: DType) -> Result<Tensor, ModelError> {
    let first = rasters
        .first()
        .ok_or_else(|| ModelError::Shape("empty batch".into()))?;
    let (h, w, c) = first.dims();
    let mut data = Vec::with_capacity(rasters.len() * h * w * c);
    for r in rasters {
        if r.dims() != (h, w, c) {
            return Err(ModelError::Shape(format!("{:?} vs {:?} in batch", r.dims(), (h, w, c))));
        }
        data.extend_from_slice(r.data());
    }
    Ok(Tensor::from_vec(data, (rasters.len(), h, w, c), device)?
        .permute((0, 3, 1, 2))?
        .contiguous()?
        .to_dtype(dtype)?)
}

/// NCHW tensor into HWC rasters.
pub fn tensor_to_rasters(t: &Tensor) -> Result<Vec<Raster>, ModelError> {
    let (b, c, h, w) = t.dims4()?;
    let flat = t
        .to_dtype(DType::F64)?
        .permute((0, 2, 3, 1))?
        .contiguous()?
        .flatten_all()?
        .to_vec1::<f64>()?;
    flat.chunks_exact(h * w * c)
        .take(b)
        .map(|chunk| Ok(Raster::new(h, w, c, chunk.to_vec())?))
        .collect()
}

/// Runs a generator on one patch and labels the output channels.
pub fn generator_forward(
    generator: &Generator,
    x: &ImagePatch,
    channel_names: &[String],
    nuclear_channel: usize,
    device: &Device,
) -> Result<MifStack, ModelError> {
    if x.channels() != generator.spec.in_channels {
        return Err(ModelError::Config(format!(
            "generator built for {} input channels, got {}",
            generator.spec.in_channels,
            x.channels()
        )));
    }
    let t = rasters_to_tensor(&[x.raster()], device, DType::F32)?;
    let y = generator.forward(&t)?;
    let out = tensor_to_rasters(&y)?.remove(0).map(|v| v.clamp(-1.0, 1.0));
    Ok(MifStack::new(out, ValueRange::Symmetric, channel_names.to_vec(), nuclear_channel)?)
}

/// Runs a discriminator on one aligned pair, returning the score raster.
pub fn discriminator_forward(
    disc: &PatchDiscriminator,
    x: &ImagePatch,
    y: &MifStack,
    device: &Device,
) -> Result<Raster, ModelError> {
    if !x.raster().same_spatial(y.raster()) {
        return Err(ModelError::Shape(format!(
            "input {}x{} vs target {}x{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    let xt = rasters_to_tensor(&[x.raster()], device, DType::F32)?;
    let yt = rasters_to_tensor(&[y.raster()], device, DType::F32)?;
    Ok(tensor_to_rasters(&disc.forward(&xt, &yt)?)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(k: usize) -> Vec<String> {
        ["DAPI", "Lap2", "Ki67"].iter().take(k).map(|s| s.to_string()).collect()
    }

    fn random_patch(h: usize, w: usize, c: usize, seed: u64) -> ImagePatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImagePatch::new(
            Raster::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0)),
            ValueRange::Symmetric,
        )
        .unwrap()
    }

    fn spec(arch: GeneratorArch, in_channels: usize) -> GeneratorSpec {
        GeneratorSpec {
            arch,
            in_channels,
            out_channels: 3,
            base_width: 4,
            depth: if arch == GeneratorArch::Unet { 3 } else { 2 },
            res_blocks: 2,
        }
    }

    #[test]
    fn generators_preserve_shape_and_range() {
        for arch in [GeneratorArch::Unet, GeneratorArch::Resnet] {
            let mut store = ParamStore::new(0, &Device::Cpu, DType::F32);
            let g = Generator::new(&mut store, "g", spec(arch, 4)).unwrap();
            let x = random_patch(32, 32, 4, 1);
            let y = generator_forward(&g, &x, &names(3), 0, &Device::Cpu).unwrap();
            assert_eq!(y.raster().dims(), (32, 32, 3));
            let (lo, hi) = y.raster().min_max();
            assert!(lo >= -1.0 && hi <= 1.0);
            let again = generator_forward(&g, &x, &names(3), 0, &Device::Cpu).unwrap();
            assert_eq!(y, again);
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut store = ParamStore::new(0, &Device::Cpu, DType::F32);
        let g = Generator::new(&mut store, "g", spec(GeneratorArch::Unet, 4)).unwrap();
        let x = random_patch(16, 16, 3, 1);
        assert!(matches!(
            generator_forward(&g, &x, &names(3), 0, &Device::Cpu),
            Err(ModelError::Config(_))
        ));
        let mut bad = spec(GeneratorArch::Unet, 5);
        assert!(bad.validate().is_err());
        bad.in_channels = 3;
        assert!(bad.validate().is_ok());
    }

    #[test]
    fn prior_channel_is_live() {
        let mut store = ParamStore::new(9, &Device::Cpu, DType::F32);
        let g = Generator::new(&mut store, "g", spec(GeneratorArch::Unet, 4)).unwrap();
        let x = random_patch(16, 16, 4, 2);
        let mut altered = x.raster().clone();
        for r in 0..16 {
            for c in 0..16 {
                altered.set(r, c, 3, -altered.get(r, c, 3));
            }
        }
        let x2 = ImagePatch::new(altered, ValueRange::Symmetric).unwrap();
        let a = generator_forward(&g, &x, &names(3), 0, &Device::Cpu).unwrap();
        let b = generator_forward(&g, &x2, &names(3), 0, &Device::Cpu).unwrap();
        let diff = a
            .raster()
            .data()
            .iter()
            .zip(b.raster().data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn sizes_divisible_by_depth_are_preserved() {
        let mut store = ParamStore::new(0, &Device::Cpu, DType::F32);
        let g = Generator::new(&mut store, "g", spec(GeneratorArch::Unet, 3)).unwrap();
        for (h, w) in [(8, 8), (16, 24), (40, 8)] {
            let x = rasters_to_tensor(&[random_patch(h, w, 3, 0).raster()], &Device::Cpu, DType::F32).unwrap();
            assert_eq!(g.forward(&x).unwrap().dims(), &[1, 3, h, w]);
        }
        let x = rasters_to_tensor(&[random_patch(12, 12, 3, 0).raster()], &Device::Cpu, DType::F32).unwrap();
        assert!(g.forward(&x).is_err());
    }

    #[test]
    fn patch_discriminator_geometry() {
        let mut store = ParamStore::new(0, &Device::Cpu, DType::F32);
        let d = PatchDiscriminator::new(&mut store, "d", DiscriminatorSpec::patch70(6, 4)).unwrap();
        assert_eq!(d.patch_field(), 70);
        let x = random_patch(256, 256, 3, 3);
        let y = MifStack::new(random_patch(256, 256, 3, 4).into_raster(), ValueRange::Symmetric, names(3), 0).unwrap();
        let s = discriminator_forward(&d, &x, &y, &Device::Cpu).unwrap();
        assert_eq!(s.dims(), (30, 30, 1));
        assert_eq!(s, discriminator_forward(&d, &x, &y, &Device::Cpu).unwrap());

        // A perturbation in the far corner cannot reach the first score.
        let mut r = x.raster().clone();
        for ch in 0..3 {
            r.set(250, 250, ch, -r.get(250, 250, ch));
        }
        let x2 = ImagePatch::new(r, ValueRange::Symmetric).unwrap();
        let s2 = discriminator_forward(&d, &x2, &y, &Device::Cpu).unwrap();
        assert_eq!(s.get(0, 0, 0), s2.get(0, 0, 0));
        assert_ne!(s.get(29, 29, 0), s2.get(29, 29, 0));

        let small = random_patch(128, 128, 3, 5);
        assert!(matches!(
            discriminator_forward(&d, &small, &y, &Device::Cpu),
            Err(ModelError::Shape(_))
        ));
    }

    #[test]
    fn tensor_round_trip() {
        let a = random_patch(5, 6, 3, 1).into_raster();
        let b = random_patch(5, 6, 3, 2).into_raster();
        let t = rasters_to_tensor(&[&a, &b], &Device::Cpu, DType::F64).unwrap();
        assert_eq!(t.dims(), &[2, 3, 5, 6]);
        assert_eq!(t.get(1).unwrap().get(2).unwrap().get(4).unwrap().get(5).unwrap().to_scalar::<f64>().unwrap(), b.get(4, 5, 2));
        let back = tensor_to_rasters(&t).unwrap();
        assert_eq!(back, vec![a, b]);
    }
}
