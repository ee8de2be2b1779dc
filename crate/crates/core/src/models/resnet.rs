//! Residual generator: 7x7 stem, strided downsampling, a stack of residual
//! blocks at the bottleneck, nearest-neighbour upsampling back to full size.

use candle_core::{Result, Tensor};

use super::layers::{leaky_relu, upsample2, Conv2d, ParamStore};

struct Block {
    a: Conv2d,
    b: Conv2d,
}

pub struct ResNetGenerator {
    stem: Conv2d,
    down: Vec<Conv2d>,
    blocks: Vec<Block>,
    up: Vec<Conv2d>,
    head: Conv2d,
    depth: usize,
}

impl ResNetGenerator {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        base_width: usize,
        depth: usize,
        res_blocks: usize,
    ) -> Result<Self> {
        let stem = store.conv(&format!("{prefix}.stem"), in_channels, base_width, 7, 1, 3)?;
        let mut down = Vec::with_capacity(depth);
        let mut c = base_width;
        for l in 0..depth {
            down.push(store.conv(&format!("{prefix}.down{l}"), c, 2 * c, 3, 2, 1)?);
            c *= 2;
        }
        let blocks = (0..res_blocks)
            .map(|i| {
                Ok(Block {
                    a: store.conv(&format!("{prefix}.res{i}.a"), c, c, 3, 1, 1)?,
                    b: store.conv(&format!("{prefix}.res{i}.b"), c, c, 3, 1, 1)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut up = Vec::with_capacity(depth);
        for l in 0..depth {
            up.push(store.conv(&format!("{prefix}.up{l}"), c, c / 2, 3, 1, 1)?);
            c /= 2;
        }
        let head = store.conv(&format!("{prefix}.head"), base_width, out_channels, 7, 1, 3)?;
        Ok(Self {
            stem,
            down,
            blocks,
            up,
            head,
            depth,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn forward_raw(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let m = 1 << self.depth;
        if h % m != 0 || w % m != 0 {
            candle_core::bail!("spatial size {h}x{w} not divisible by {m}");
        }
        let mut cur = leaky_relu(&self.stem.forward(x)?)?;
        for d in &self.down {
            cur = leaky_relu(&d.forward(&cur)?)?;
        }
        for b in &self.blocks {
            let inner = b.b.forward(&leaky_relu(&b.a.forward(&cur)?)?)?;
            cur = (cur + inner)?;
        }
        for u in &self.up {
            cur = leaky_relu(&u.forward(&upsample2(&cur)?)?)?;
        }
        self.head.forward(&cur)
    }
}
