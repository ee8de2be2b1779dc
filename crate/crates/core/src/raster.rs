//! Shared raster data model: interleaved HWC buffers, declared value ranges,
//! normalization, bilinear resizing and channel concatenation.

use serde::{Deserialize, Serialize};

use crate::prior::SoftPrior;

/// Side length produced by the standard preprocessing path.
pub const STANDARD_SIZE: usize = 256;

/// Smallest spatial extent accepted by [`resize`].
pub const MIN_RESIZE_EXTENT: usize = 8;

const RANGE_EPS: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("value {value} at index {index} outside declared range {range:?}")]
    RangeViolation {
        value: f64,
        index: usize,
        range: ValueRange,
    },
    #[error("expected value range {expected:?}, found {found:?}")]
    WrongRange {
        expected: ValueRange,
        found: ValueRange,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate raster {height}x{width}: both sides must be at least {MIN_RESIZE_EXTENT}")]
    Degenerate { height: usize, width: usize },
    #[error("invalid stack metadata: {0}")]
    Metadata(String),
}

/// Declared intensity interval of a raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueRange {
    /// `[0, 1]`, as read from disk.
    Unit,
    /// `[-1, 1]`, the model-facing range.
    Symmetric,
}

impl ValueRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Symmetric => (-1.0, 1.0),
        }
    }

    /// Maps a probability-like value in `[0, 1]` onto this range.
    pub fn from_unit(self, v: f64) -> f64 {
        match self {
            ValueRange::Unit => v,
            ValueRange::Symmetric => 2.0 * v - 1.0,
        }
    }

    /// Maps a value in this range back onto `[0, 1]`.
    pub fn to_unit(self, v: f64) -> f64 {
        match self {
            ValueRange::Unit => v,
            ValueRange::Symmetric => (v + 1.0) * 0.5,
        }
    }
}

/// Dense real raster, interleaved `H x W x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self, RasterError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(RasterError::Shape(format!(
                "empty raster {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(RasterError::Shape(format!(
                "buffer of {} values cannot hold {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "empty raster");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    /// Builds a raster by evaluating `f(row, col, channel)` at every element.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self::new(height, width, channels, data).expect("from_fn shape")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        let i = self.index(row, col, ch);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.dims() == other.dims()
    }

    pub fn same_spatial(&self, other: &Raster) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Single channel `ch` as a one-channel raster.
    pub fn channel(&self, ch: usize) -> Raster {
        assert!(ch < self.channels, "channel {ch} out of {}", self.channels);
        let data = self.data.iter().skip(ch).step_by(self.channels).copied().collect();
        Raster::new(self.height, self.width, 1, data).expect("channel shape")
    }

    /// Channels `range` as a new raster, values copied bit-exactly.
    pub fn slice_channels(&self, range: std::ops::Range<usize>) -> Result<Raster, RasterError> {
        if range.start >= range.end || range.end > self.channels {
            return Err(RasterError::Shape(format!(
                "channel range {range:?} invalid for {} channels",
                self.channels
            )));
        }
        let n = range.end - range.start;
        let mut data = Vec::with_capacity(self.height * self.width * n);
        for px in self.data.chunks_exact(self.channels) {
            data.extend_from_slice(&px[range.clone()]);
        }
        Raster::new(self.height, self.width, n, data)
    }

    /// Stacks the channels of `parts` (all with equal spatial size) in order.
    pub fn stack(parts: &[&Raster]) -> Result<Raster, RasterError> {
        let first = parts
            .first()
            .ok_or_else(|| RasterError::Shape("nothing to stack".into()))?;
        if let Some(bad) = parts.iter().find(|p| !p.same_spatial(first)) {
            return Err(RasterError::Shape(format!(
                "cannot stack {}x{} with {}x{}",
                first.height, first.width, bad.height, bad.width
            )));
        }
        let channels: usize = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(first.height * first.width * channels);
        for px in 0..first.height * first.width {
            for p in parts {
                data.extend_from_slice(&p.data[px * p.channels..(px + 1) * p.channels]);
            }
        }
        Raster::new(first.height, first.width, channels, data)
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Raster {
        Raster {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn check_range(&self, range: ValueRange) -> Result<(), RasterError> {
        let (lo, hi) = range.bounds();
        match self
            .data
            .iter()
            .position(|&v| !(v >= lo - RANGE_EPS && v <= hi + RANGE_EPS))
        {
            Some(index) => Err(RasterError::RangeViolation {
                value: self.data[index],
                index,
                range,
            }),
            None => Ok(()),
        }
    }

    /// Bilinear resampling with half-pixel centers (no corner alignment).
    ///
    /// Every output value is a convex combination of at most four inputs,
    /// so constants are preserved and the input min/max bound the output.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Raster {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let rows = axis_weights(self.height, height);
        let cols = axis_weights(self.width, width);
        let mut out = Raster::zeros(height, width, self.channels);
        for (r, &(r0, r1, fr)) in rows.iter().enumerate() {
            for (c, &(c0, c1, fc)) in cols.iter().enumerate() {
                for ch in 0..self.channels {
                    let top = self.get(r0, c0, ch) * (1.0 - fc) + self.get(r0, c1, ch) * fc;
                    let bottom = self.get(r1, c0, ch) * (1.0 - fc) + self.get(r1, c1, ch) * fc;
                    out.set(r, c, ch, top * (1.0 - fr) + bottom * fr);
                }
            }
        }
        out
    }
}

fn axis_weights(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Brightfield input raster with a declared value range.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    raster: Raster,
    range: ValueRange,
}

impl ImagePatch {
    pub fn new(raster: Raster, range: ValueRange) -> Result<Self, RasterError> {
        raster.check_range(range)?;
        Ok(Self { raster, range })
    }

    pub fn raster(&self) -> &Raster {
        &self.raster
    }

    pub fn into_raster(self) -> Raster {
        self.raster
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn height(&self) -> usize {
        self.raster.height
    }

    pub fn width(&self) -> usize {
        self.raster.width
    }

    pub fn channels(&self) -> usize {
        self.raster.channels
    }
}

/// Multiplex fluorescence stack: `K` named marker channels, one of which is
/// the nuclear reference.
#[derive(Debug, Clone, PartialEq)]
pub struct MifStack {
    raster: Raster,
    range: ValueRange,
    channel_names: Vec<String>,
    nuclear_channel: usize,
}

impl MifStack {
    pub fn new(
        raster: Raster,
        range: ValueRange,
        channel_names: Vec<String>,
        nuclear_channel: usize,
    ) -> Result<Self, RasterError> {
        if channel_names.len() != raster.channels {
            return Err(RasterError::Metadata(format!(
                "{} channel names for {} channels",
                channel_names.len(),
                raster.channels
            )));
        }
        if nuclear_channel >= raster.channels {
            return Err(RasterError::Metadata(format!(
                "nuclear channel {nuclear_channel} out of {}",
                raster.channels
            )));
        }
        raster.check_range(range)?;
        Ok(Self {
            raster,
            range,
            channel_names,
            nuclear_channel,
        })
    }

    pub fn raster(&self) -> &Raster {
        &self.raster
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn nuclear_channel(&self) -> usize {
        self.nuclear_channel
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channel_names.iter().position(|n| n.eq_ignore_ascii_case(name))
    }

    pub fn height(&self) -> usize {
        self.raster.height
    }

    pub fn width(&self) -> usize {
        self.raster.width
    }

    pub fn channels(&self) -> usize {
        self.raster.channels
    }

    /// Channel `ch` mapped onto `[0, 1]`.
    pub fn unit_channel(&self, ch: usize) -> Raster {
        let range = self.range;
        self.raster.channel(ch).map(|v| range.to_unit(v))
    }

    /// Same stack with values mapped onto `[0, 1]`.
    pub fn to_unit(&self) -> MifStack {
        let range = self.range;
        MifStack {
            raster: self.raster.map(|v| range.to_unit(v)),
            range: ValueRange::Unit,
            ..self.clone()
        }
    }

    /// Same stack with values mapped onto `[-1, 1]`.
    pub fn to_symmetric(&self) -> MifStack {
        let unit = self.to_unit();
        MifStack {
            raster: unit.raster.map(|v| 2.0 * v - 1.0),
            range: ValueRange::Symmetric,
            ..unit
        }
    }

    pub fn resized(&self, height: usize, width: usize) -> Result<MifStack, RasterError> {
        check_resizable(&self.raster)?;
        Ok(MifStack {
            raster: self.raster.resize_bilinear(height, width),
            ..self.clone()
        })
    }
}

/// `[0,1] -> [-1,1]` via `2x - 1`.
pub fn normalize(patch: &ImagePatch) -> Result<ImagePatch, RasterError> {
    if patch.range != ValueRange::Unit {
        return Err(RasterError::WrongRange {
            expected: ValueRange::Unit,
            found: patch.range,
        });
    }
    patch.raster.check_range(ValueRange::Unit)?;
    Ok(ImagePatch {
        raster: patch.raster.map(|v| 2.0 * v - 1.0),
        range: ValueRange::Symmetric,
    })
}

/// Inverse of [`normalize`].
pub fn denormalize(patch: &ImagePatch) -> Result<ImagePatch, RasterError> {
    if patch.range != ValueRange::Symmetric {
        return Err(RasterError::WrongRange {
            expected: ValueRange::Symmetric,
            found: patch.range,
        });
    }
    patch.raster.check_range(ValueRange::Symmetric)?;
    Ok(ImagePatch {
        raster: patch.raster.map(|v| (v + 1.0) * 0.5),
        range: ValueRange::Unit,
    })
}

fn check_resizable(r: &Raster) -> Result<(), RasterError> {
    if r.height < MIN_RESIZE_EXTENT || r.width < MIN_RESIZE_EXTENT {
        return Err(RasterError::Degenerate {
            height: r.height,
            width: r.width,
        });
    }
    Ok(())
}

/// Bilinear resize to `size x size`.
pub fn resize(patch: &ImagePatch, size: usize) -> Result<ImagePatch, RasterError> {
    check_resizable(&patch.raster)?;
    Ok(ImagePatch {
        raster: patch.raster.resize_bilinear(size, size),
        range: patch.range,
    })
}

pub fn resize_to_256(patch: &ImagePatch) -> Result<ImagePatch, RasterError> {
    resize(patch, STANDARD_SIZE)
}

/// Appends the prior as a fourth channel, rescaled into `x`'s value range.
pub fn concat_channels(x: &ImagePatch, prior: &SoftPrior) -> Result<ImagePatch, RasterError> {
    if x.channels() != 3 {
        return Err(RasterError::Shape(format!(
            "expected a 3-channel input, got {}",
            x.channels()
        )));
    }
    let p = prior.raster();
    if !x.raster.same_spatial(p) {
        return Err(RasterError::Shape(format!(
            "input {}x{} vs prior {}x{}",
            x.height(),
            x.width(),
            p.height(),
            p.width()
        )));
    }
    let range = x.range;
    let rescaled = p.map(|v| range.from_unit(v));
    Ok(ImagePatch {
        raster: Raster::stack(&[&x.raster, &rescaled])?,
        range,
    })
}
