//! Encoder-decoder with skip connections. Used as the translation generator
//! (tanh head) and, with timestep conditioning, as the diffusion denoiser.

use candle_core::{Result, Tensor};

use super::layers::{leaky_relu, timestep_embedding, upsample2, Conv2d, Linear, ParamStore};

struct Level {
    /// Stride-2 entry conv (absent at full resolution).
    down: Option<Conv2d>,
    conv_a: Conv2d,
    conv_b: Conv2d,
    time: Option<Linear>,
}

struct UpLevel {
    up: Conv2d,
    fuse: Conv2d,
    time: Option<Linear>,
}

struct TimeMlp {
    dim: usize,
    proj: Linear,
}

pub struct UNet {
    encoder: Vec<Level>,
    decoder: Vec<UpLevel>,
    head: Conv2d,
    time: Option<TimeMlp>,
    depth: usize,
}

fn width_at(base: usize, level: usize) -> usize {
    base << level.min(3)
}

impl UNet {
    /// `time_dim = Some(d)` adds a sinusoidal timestep embedding at every
    /// resolution.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        base_width: usize,
        depth: usize,
        time_dim: Option<usize>,
    ) -> Result<Self> {
        let time = match time_dim {
            Some(d) => Some(TimeMlp {
                dim: d,
                proj: store.linear(&format!("{prefix}.time.proj"), d, d)?,
            }),
            None => None,
        };
        let mut encoder = Vec::with_capacity(depth + 1);
        for l in 0..=depth {
            let c = width_at(base_width, l);
            let (down, cin) = if l == 0 {
                (None, in_channels)
            } else {
                let prev = width_at(base_width, l - 1);
                (Some(store.conv(&format!("{prefix}.enc{l}.down"), prev, c, 4, 2, 1)?), c)
            };
            encoder.push(Level {
                down,
                conv_a: store.conv(&format!("{prefix}.enc{l}.a"), cin, c, 3, 1, 1)?,
                conv_b: store.conv(&format!("{prefix}.enc{l}.b"), c, c, 3, 1, 1)?,
                time: match time_dim {
                    Some(d) => Some(store.linear(&format!("{prefix}.enc{l}.time"), d, c)?),
                    None => None,
                },
            });
        }
        let mut decoder = Vec::with_capacity(depth);
        for l in (0..depth).rev() {
            let c = width_at(base_width, l);
            let above = width_at(base_width, l + 1);
            decoder.push(UpLevel {
                up: store.conv(&format!("{prefix}.dec{l}.up"), above, c, 3, 1, 1)?,
                fuse: store.conv(&format!("{prefix}.dec{l}.fuse"), 2 * c, c, 3, 1, 1)?,
                time: match time_dim {
                    Some(d) => Some(store.linear(&format!("{prefix}.dec{l}.time"), d, c)?),
                    None => None,
                },
            });
        }
        let head = store.conv(&format!("{prefix}.head"), base_width, out_channels, 1, 1, 0)?;
        Ok(Self {
            encoder,
            decoder,
            head,
            time,
            depth,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    fn add_time(x: Tensor, proj: Option<&Linear>, emb: Option<&Tensor>) -> Result<Tensor> {
        match (proj, emb) {
            (Some(p), Some(e)) => {
                let (b, c, _, _) = x.dims4()?;
                x.broadcast_add(&p.forward(e)?.reshape((b, c, 1, 1))?)
            }
            _ => Ok(x),
        }
    }

    /// Raw (pre-activation) head output. `t` must be given iff the network
    /// was built with timestep conditioning.
    pub fn forward_raw(&self, x: &Tensor, t: Option<&[usize]>) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let m = 1 << self.depth;
        if h % m != 0 || w % m != 0 {
            candle_core::bail!("spatial size {h}x{w} not divisible by {m}");
        }
        let emb = match (&self.time, t) {
            (Some(mlp), Some(t)) => {
                let e = timestep_embedding(t, mlp.dim, x.device(), x.dtype())?;
                Some(leaky_relu(&mlp.proj.forward(&e)?)?)
            }
            (None, None) => None,
            _ => candle_core::bail!("timestep conditioning mismatch"),
        };
        let mut skips = Vec::with_capacity(self.depth + 1);
        let mut cur = x.clone();
        for level in &self.encoder {
            if let Some(down) = &level.down {
                cur = leaky_relu(&down.forward(&cur)?)?;
            }
            cur = leaky_relu(&level.conv_a.forward(&cur)?)?;
            cur = Self::add_time(cur, level.time.as_ref(), emb.as_ref())?;
            cur = leaky_relu(&level.conv_b.forward(&cur)?)?;
            skips.push(cur.clone());
        }
        skips.pop();
        for level in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder level");
            cur = leaky_relu(&level.up.forward(&upsample2(&cur)?)?)?;
            cur = Tensor::cat(&[&cur, &skip], 1)?;
            cur = leaky_relu(&level.fuse.forward(&cur)?)?;
            cur = Self::add_time(cur, level.time.as_ref(), emb.as_ref())?;
        }
        self.head.forward(&cur)
    }
}
