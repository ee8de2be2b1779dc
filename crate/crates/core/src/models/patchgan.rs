//! PatchGAN discriminator: a fully convolutional stack whose output is one
//! logit per overlapping input patch.

use candle_core::{Result, Tensor};

use super::layers::{leaky_relu, Conv2d, ParamStore};
use super::{DiscriminatorSpec, ModelError};

pub struct PatchDiscriminator {
    layers: Vec<Conv2d>,
    spec: DiscriminatorSpec,
}

impl PatchDiscriminator {
    pub fn new(store: &mut ParamStore, prefix: &str, spec: DiscriminatorSpec) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.n_layers + 2);
        let mut c = spec.in_channels;
        let mut w = spec.base_width;
        for l in 0..spec.n_layers {
            layers.push(store.conv(&format!("{prefix}.l{l}"), c, w, 4, 2, 1)?);
            c = w;
            w = (2 * w).min(8 * spec.base_width);
        }
        layers.push(store.conv(&format!("{prefix}.l{}", spec.n_layers), c, w, 4, 1, 1)?);
        layers.push(store.conv(&format!("{prefix}.out"), w, 1, 4, 1, 1)?);
        Ok(Self { layers, spec })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    /// Receptive field of one output logit, in input pixels.
    pub fn patch_field(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .fold(1, |rf, l| (rf - 1) * l.stride() + l.kernel())
    }

    /// Logits `[batch, 1, h', w']` for the channel-concatenation of `x`
    /// (conditioning input) and `y` (real or generated target).
    pub fn forward(&self, x: &Tensor, y: &Tensor) -> std::result::Result<Tensor, ModelError> {
        let (bx, cx, hx, wx) = x.dims4()?;
        let (by, cy, hy, wy) = y.dims4()?;
        if (bx, hx, wx) != (by, hy, wy) {
            return Err(ModelError::Shape(format!(
                "input {:?} and target {:?} are not aligned",
                x.dims(),
                y.dims()
            )));
        }
        if cx + cy != self.spec.in_channels {
            return Err(ModelError::Shape(format!(
                "discriminator expects {} channels, got {} + {}",
                self.spec.in_channels, cx, cy
            )));
        }
        let mut cur = Tensor::cat(&[x, y], 1)?;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            cur = l.forward(&cur)?;
            if i != last {
                cur = leaky_relu(&cur)?;
            }
        }
        Ok(cur)
    }
}
