//! Parameter registry and the few layers the generators need.
//!
//! Weights are drawn from a seeded ChaCha stream rather than the device RNG
//! so that model initialisation is reproducible bit-for-bit.

use std::collections::BTreeMap;
use std::collections::HashMap;

use candle_core::{DType, Device, Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    device: Device,
    dtype: DType,
}

impl ParamStore {
    pub fn new(seed: u64, device: &Device, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: device.clone(),
            dtype,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(&mut self, name: String, shape: &[usize], std: f64) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            candle_core::bail!("duplicate parameter {name}");
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = if std == 0.0 {
            vec![0.0; n]
        } else {
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| dist.sample(&mut self.rng)).collect()
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }

    /// `k x k` convolution with He-normal weights and zero bias.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Result<Conv2d> {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let weight = self.insert(format!("{name}.weight"), &[cout, cin, k, k], std)?;
        let bias = self.insert(format!("{name}.bias"), &[cout], 0.0)?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize) -> Result<Linear> {
        let std = (1.0 / din as f64).sqrt();
        let weight = self.insert(format!("{name}.weight"), &[dout, din], std)?;
        let bias = self.insert(format!("{name}.bias"), &[dout], 0.0)?;
        Ok(Linear { weight, bias })
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn parameter_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Current weights, detached copies keyed by name.
    pub fn snapshot(&self) -> Result<HashMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }

    pub fn load(&self, weights: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = weights
                .get(name)
                .ok_or_else(|| candle_core::Error::Msg(format!("checkpoint lacks {name}")))?;
            if t.dims() != var.dims() {
                candle_core::bail!("{name}: checkpoint {:?} vs model {:?}", t.dims(), var.dims());
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = if self.kernel() > 1 {
            conv_unfolded(x, &self.weight, self.stride, self.padding)?
        } else {
            x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?
        };
        let c = self.bias.dim(0)?;
        y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }
}

/// Convolution as im2col followed by one matrix product. Same result as
/// `conv2d`; on CPU the backward pass is several times cheaper.
pub fn conv_unfolded(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, cin, h, wd) = x.dims4()?;
    let (cout, wcin, k, k2) = w.dims4()?;
    if wcin != cin || k != k2 || stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
        candle_core::bail!("conv_unfolded: input {:?} vs kernel {:?}", x.dims(), w.dims());
    }
    let g = Unfold {
        c: cin,
        h,
        w: wd,
        k,
        stride,
        pad,
    };
    let (oh, ow) = g.out_hw();
    let cols = x.contiguous()?.apply_op1(g)?;
    w.reshape((cout, cin * k * k))?
        .broadcast_matmul(&cols)?
        .reshape((b, cout, oh, ow))
}

/// im2col geometry: `[b, c, h, w]` to `[b, c*k*k, oh*ow]`, row index
/// `(c*k + dy)*k + dx`, out-of-bounds taps reading zero.
#[derive(Debug, Clone, Copy)]
struct Unfold {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

/// Adjoint of [`Unfold`]: scatter-adds columns back onto the image.
#[derive(Debug, Clone, Copy)]
struct Fold(Unfold);

impl Unfold {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Calls `f(col_start, image_start, len)` for every in-bounds run of taps
    /// of one item; consecutive columns step by one, image pixels by `stride`.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = self.out_hw();
        let (k, s, pad) = (self.k, self.stride, self.pad);
        for dx in 0..k {
            // Columns ox with 0 <= ox*s + dx - pad < w.
            let lo = pad.saturating_sub(dx).div_ceil(s);
            let hi = ((self.w + pad).saturating_sub(dx)).div_ceil(s).min(ow);
            if lo >= hi {
                continue;
            }
            for c in 0..self.c {
                for dy in 0..k {
                    let row = ((c * k + dy) * k + dx) * oh * ow;
                    for oy in 0..oh {
                        let y = oy * s + dy;
                        if y < pad || y - pad >= self.h {
                            continue;
                        }
                        let img = (c * self.h + y - pad) * self.w + lo * s + dx - pad;
                        f(row + oy * ow + lo, img, hi - lo);
                    }
                }
            }
        }
    }

    fn col_len(&self) -> usize {
        let (oh, ow) = self.out_hw();
        self.c * self.k * self.k * oh * ow
    }

    fn img_len(&self) -> usize {
        self.c * self.h * self.w
    }

    fn unfold<T: Copy + Default>(&self, src: &[T], batch: usize) -> Vec<T> {
        let (cl, il) = (self.col_len(), self.img_len());
        let mut out = vec![T::default(); batch * cl];
        for b in 0..batch {
            let (dst, img) = (&mut out[b * cl..(b + 1) * cl], &src[b * il..(b + 1) * il]);
            let s = self.stride;
            self.for_each_run(|ci, ii, n| {
                if s == 1 {
                    dst[ci..ci + n].copy_from_slice(&img[ii..ii + n]);
                } else {
                    for j in 0..n {
                        dst[ci + j] = img[ii + j * s];
                    }
                }
            });
        }
        out
    }

    fn fold<T: Copy + Default + std::ops::AddAssign>(&self, src: &[T], batch: usize) -> Vec<T> {
        let (cl, il) = (self.col_len(), self.img_len());
        let mut out = vec![T::default(); batch * il];
        for b in 0..batch {
            let (dst, cols) = (&mut out[b * il..(b + 1) * il], &src[b * cl..(b + 1) * cl]);
            let s = self.stride;
            self.for_each_run(|ci, ii, n| {
                for j in 0..n {
                    dst[ii + j * s] += cols[ci + j];
                }
            });
        }
        out
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &candle_core::Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("expected a contiguous tensor"),
    }
}

impl candle_core::CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold"
    }

    fn cpu_fwd(&self, storage: &candle_core::CpuStorage, layout: &candle_core::Layout) -> Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let batch = layout.dims()[0];
        let (oh, ow) = self.out_hw();
        let shape = candle_core::Shape::from((batch, self.c * self.k * self.k, oh * ow));
        let out = match storage {
            S::F32(d) => S::F32(self.unfold(contiguous_slice(d, layout)?, batch)),
            S::F64(d) => S::F64(self.unfold(contiguous_slice(d, layout)?, batch)),
            _ => candle_core::bail!("unfold: unsupported dtype"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Fold(*self))?))
    }
}

impl candle_core::CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold"
    }

    fn cpu_fwd(&self, storage: &candle_core::CpuStorage, layout: &candle_core::Layout) -> Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let g = self.0;
        let batch = layout.dims()[0];
        let shape = candle_core::Shape::from((batch, g.c, g.h, g.w));
        let out = match storage {
            S::F32(d) => S::F32(g.fold(contiguous_slice(d, layout)?, batch)),
            S::F64(d) => S::F64(g.fold(contiguous_slice(d, layout)?, batch)),
            _ => candle_core::bail!("fold: unsupported dtype"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(self.0)?))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)
    }
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    x.relu()? - (x.neg()?.relu()? * 0.2)?
}

pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    // Broadcast form; candle's nearest-upsample backward is slow on CPU.
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))
}

/// Sinusoidal timestep embedding, `[batch, dim]`.
pub fn timestep_embedding(t: &[usize], dim: usize, device: &Device, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((step as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((step as f64 * freq).cos());
        }
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Tensor::from_vec(data, (t.len(), dim), device)?.to_dtype(dtype)
}
