//! Raster file formats.
//!
//! * PNG, 8- or 16-bit, gray / gray+alpha / RGB / RGBA. Values are mapped to
//!   `[0, 1]` by dividing by the bit-depth maximum; alpha is dropped.
//! * `.vstk` stack container for marker stacks with more channels than PNG
//!   can hold. Little-endian layout:
//!
//! ```text
//! magic    b"VSTK"
//! version  u16 (= 1)
//! height   u32
//! width    u32
//! channels u32
//! nuclear  u32                       index of the nuclear reference channel
//! names    channels x (u16 len, utf-8 bytes)
//! data     height*width*channels x f32, interleaved HWC, values in [0, 1]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::raster::{MifStack, Raster, RasterError, ValueRange};

const STACK_MAGIC: &[u8; 4] = b"VSTK";
const STACK_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: png decode: {source}")]
    Decode {
        path: String,
        #[source]
        source: png::DecodingError,
    },
    #[error("{path}: png encode: {source}")]
    Encode {
        path: String,
        #[source]
        source: png::EncodingError,
    },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.display().to_string(),
        source,
    }
}

/// Bit depth used when writing PNGs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Depth {
    Eight,
    Sixteen,
}

/// Reads a PNG into a `[0,1]` raster with 1 (gray) or 3 (colour) channels.
pub fn read_png(path: &Path) -> Result<Raster, IoError> {
    let file = File::open(path).map_err(file_err(path))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let decode = |source| IoError::Decode {
        path: path.display().to_string(),
        source,
    };
    let mut reader = decoder.read_info().map_err(decode)?;
    let size = reader.output_buffer_size().ok_or_else(|| IoError::Format {
        path: path.display().to_string(),
        reason: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(decode)?;
    let (height, width) = (info.height as usize, info.width as usize);
    let samples = info.color_type.samples();
    let (keep, has_alpha) = match info.color_type {
        png::ColorType::Grayscale => (1, false),
        png::ColorType::GrayscaleAlpha => (1, true),
        png::ColorType::Rgb => (3, false),
        png::ColorType::Rgba => (3, true),
        png::ColorType::Indexed => {
            return Err(IoError::Format {
                path: path.display().to_string(),
                reason: "unexpanded palette image".into(),
            })
        }
    };
    debug_assert_eq!(samples, keep + usize::from(has_alpha));
    let mut data = Vec::with_capacity(height * width * keep);
    for row in buf.chunks_exact(info.line_size).take(height) {
        match info.bit_depth {
            png::BitDepth::Sixteen => {
                for px in row.chunks_exact(2 * samples).take(width) {
                    for s in 0..keep {
                        let v = u16::from_be_bytes([px[2 * s], px[2 * s + 1]]);
                        data.push(v as f64 / 65535.0);
                    }
                }
            }
            _ => {
                for px in row.chunks_exact(samples).take(width) {
                    for &v in &px[..keep] {
                        data.push(v as f64 / 255.0);
                    }
                }
            }
        }
    }
    Ok(Raster::new(height, width, keep, data)?)
}

/// Writes a 1- or 3-channel `[0,1]` raster. Values are clamped then rounded.
pub fn write_png(path: &Path, raster: &Raster, depth: Depth) -> Result<(), IoError> {
    let color = match raster.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        n => {
            return Err(IoError::Format {
                path: path.display().to_string(),
                reason: format!("cannot store {n} channels in png"),
            })
        }
    };
    let file = File::create(path).map_err(file_err(path))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), raster.width() as u32, raster.height() as u32);
    encoder.set_color(color);
    let bytes: Vec<u8> = match depth {
        Depth::Eight => {
            encoder.set_depth(png::BitDepth::Eight);
            raster
                .data()
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect()
        }
        Depth::Sixteen => {
            encoder.set_depth(png::BitDepth::Sixteen);
            raster
                .data()
                .iter()
                .flat_map(|&v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes())
                .collect()
        }
    };
    let encode = |source| IoError::Encode {
        path: path.display().to_string(),
        source,
    };
    let mut writer = encoder.write_header().map_err(encode)?;
    writer.write_image_data(&bytes).map_err(encode)?;
    writer.finish().map_err(encode)
}

/// Writes an integer label raster as 16-bit grayscale (labels stored verbatim).
pub fn write_label_png(path: &Path, height: usize, width: usize, labels: &[u32]) -> Result<(), IoError> {
    if labels.iter().any(|&l| l > u16::MAX as u32) {
        return Err(IoError::Format {
            path: path.display().to_string(),
            reason: "label exceeds 16-bit range".into(),
        });
    }
    let data = labels.iter().map(|&l| l as f64 / 65535.0).collect();
    write_png(path, &Raster::new(height, width, 1, data)?, Depth::Sixteen)
}

pub fn read_label_png(path: &Path) -> Result<(usize, usize, Vec<u32>), IoError> {
    let r = read_png(path)?;
    if r.channels() != 1 {
        return Err(IoError::Format {
            path: path.display().to_string(),
            reason: "label image must be grayscale".into(),
        });
    }
    let labels = r.data().iter().map(|&v| (v * 65535.0).round() as u32).collect();
    Ok((r.height(), r.width(), labels))
}

pub fn write_stack(path: &Path, stack: &MifStack) -> Result<(), IoError> {
    let unit = stack.to_unit();
    let r = unit.raster();
    let file = File::create(path).map_err(file_err(path))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::new();
    header.extend_from_slice(STACK_MAGIC);
    header.extend_from_slice(&STACK_VERSION.to_le_bytes());
    for v in [r.height(), r.width(), r.channels(), stack.nuclear_channel()] {
        header.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for name in stack.channel_names() {
        header.extend_from_slice(&(name.len() as u16).to_le_bytes());
        header.extend_from_slice(name.as_bytes());
    }
    w.write_all(&header).map_err(file_err(path))?;
    for &v in r.data() {
        w.write_all(&(v as f32).to_le_bytes()).map_err(file_err(path))?;
    }
    w.flush().map_err(file_err(path))
}

pub fn read_stack(path: &Path) -> Result<MifStack, IoError> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(file_err(path))?
        .read_to_end(&mut bytes)
        .map_err(file_err(path))?;
    let bad = |reason: &str| IoError::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut cur = bytes.as_slice();
    let mut take = |n: usize| -> Result<&[u8], IoError> {
        if cur.len() < n {
            return Err(bad("truncated stack file"));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    if take(4)? != STACK_MAGIC {
        return Err(bad("not a VSTK stack"));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version != STACK_VERSION {
        return Err(bad(&format!("unsupported stack version {version}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    }
    let [height, width, channels, nuclear] = dims;
    let mut names = Vec::with_capacity(channels);
    for _ in 0..channels {
        let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(len)?).map_err(|_| bad("channel name is not utf-8"))?;
        names.push(name.to_string());
    }
    let n = height * width * channels;
    let raw = take(4 * n)?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let raster = Raster::new(height, width, channels, data)?;
    Ok(MifStack::new(raster, ValueRange::Unit, names, nuclear)?)
}
