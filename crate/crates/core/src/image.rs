//! The image raster and its two on-disk formats.
//!
//! Pixels are kept as `f64` in raw detector units. On disk they are unsigned
//! 16-bit: either a 16-bit grayscale PNG or RAW16, a headered raw dump:
//!
//! ```text
//! "BSR1" | width: u32 BE | height: u32 BE | width*height pixels: u16 LE, row-major
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Cursor, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Largest representable raw detector value.
pub const MAX_VALUE: f64 = 65535.0;

/// Only 16-bit data is supported.
pub const BIT_DEPTH: u8 = 16;

pub const RAW16_MAGIC: &[u8; 4] = b"BSR1";
const RAW16_HEADER_LEN: usize = 12;

/// A single-channel image in raw detector units, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        check_dims(width, height)?;
        Ok(Self {
            width,
            height,
            pixels: vec![value; width * height],
        })
    }

    pub fn from_vec(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        check_dims(width, height)?;
        if pixels.len() != width * height {
            return Err(Error::Dimensions {
                width,
                height,
                reason: "pixel count does not match dimensions",
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn from_u16(width: usize, height: usize, pixels: &[u16]) -> Result<Self> {
        Self::from_vec(width, height, pixels.iter().map(|&p| f64::from(p)).collect())
    }

    /// Builds an image by evaluating `f(row, col)` at every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        check_dims(width, height)?;
        let mut pixels = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c));
            }
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `(height, width)`
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn bit_depth(&self) -> u8 {
        BIT_DEPTH
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.pixels[row * self.width + col] = value;
    }

    /// Pixel lookup with coordinates clamped into the image (edge replication).
    #[inline]
    pub fn get_clamped(&self, row: isize, col: isize) -> f64 {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        self.pixels[r * self.width + c]
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Clamps every pixel to the on-disk range `[0, 65535]`.
    pub fn clamped(&self) -> Self {
        self.map(clamp_raw)
    }

    /// Quantizes to on-disk values: clamp, then round half away from zero.
    pub fn to_u16(&self) -> Vec<u16> {
        self.pixels.iter().map(|&v| quantize(v)).collect()
    }

    /// Copies the `height x width` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        if row + height > self.height || col + width > self.width {
            return Err(Error::Dimensions {
                width,
                height,
                reason: "crop window exceeds the image",
            });
        }
        Self::from_fn(width, height, |r, c| self.get(row + r, col + c))
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.pixels.chunks_exact_mut(self.width) {
            row.reverse();
        }
        out
    }

    pub fn flip_vertical(&self) -> Self {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for row in self.pixels.chunks_exact(self.width).rev() {
            pixels.extend_from_slice(row);
        }
        Self {
            width: self.width,
            height: self.height,
            pixels,
        }
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    pub fn same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                left: self.dims(),
                right: other.dims(),
            });
        }
        Ok(())
    }
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::Dimensions {
            width,
            height,
            reason: "width and height must be at least 1",
        });
    }
    if width > u32::MAX as usize || height > u32::MAX as usize {
        return Err(Error::Dimensions {
            width,
            height,
            reason: "dimension exceeds u32",
        });
    }
    Ok(())
}

#[inline]
pub fn clamp_raw(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, MAX_VALUE)
    }
}

#[inline]
pub fn quantize(v: f64) -> u16 {
    clamp_raw(v).round() as u16
}

/// Maps raw detector units onto `[0, 1]` at the model boundary.
#[inline]
pub fn normalize(v: f64) -> f64 {
    v / MAX_VALUE
}

#[inline]
pub fn denormalize(v: f64) -> f64 {
    v * MAX_VALUE
}

/// On-disk container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Png16,
    Raw16,
}

impl ImageFormat {
    /// Picks the format from a file extension (`png`, or `bsr`/`raw`).
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        match ext.as_deref() {
            Some("png") => Ok(Self::Png16),
            Some("bsr") | Some("raw") | Some("raw16") => Ok(Self::Raw16),
            other => Err(Error::UnsupportedFormat(format!(
                "unknown extension {:?}",
                other.unwrap_or("")
            ))),
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Self::Png16 => "png",
            Self::Raw16 => "bsr",
        }
    }
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    match ImageFormat::from_path(path)? {
        ImageFormat::Png16 => decode_png16(&bytes),
        ImageFormat::Raw16 => decode_raw16(&bytes),
    }
}

pub fn write_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match ImageFormat::from_path(path)? {
        ImageFormat::Png16 => encode_png16(img)?,
        ImageFormat::Raw16 => encode_raw16(img),
    };
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

pub fn encode_raw16(img: &Image) -> Vec<u8> {
    encode_raw16_pixels(img.width, img.height, &img.to_u16())
}

/// RAW16 encoding of already-quantized pixels.
pub fn encode_raw16_pixels(width: usize, height: usize, pixels: &[u16]) -> Vec<u8> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut out = Vec::with_capacity(RAW16_HEADER_LEN + 2 * pixels.len());
    out.extend_from_slice(RAW16_MAGIC);
    out.extend_from_slice(&(width as u32).to_be_bytes());
    out.extend_from_slice(&(height as u32).to_be_bytes());
    for p in pixels {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_raw16(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < RAW16_HEADER_LEN {
        return Err(Error::Truncated {
            expected: RAW16_HEADER_LEN,
            actual: bytes.len(),
        });
    }
    if &bytes[..4] != RAW16_MAGIC {
        return Err(Error::UnsupportedFormat("bad RAW16 magic".into()));
    }
    let width = u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = u32::from_be_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(2))
        .and_then(|n| n.checked_add(RAW16_HEADER_LEN))
        .ok_or(Error::Dimensions {
            width,
            height,
            reason: "RAW16 dimensions overflow",
        })?;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let pixels = bytes[RAW16_HEADER_LEN..]
        .chunks_exact(2)
        .map(|b| f64::from(u16::from_le_bytes([b[0], b[1]])))
        .collect();
    Image::from_vec(width, height, pixels)
}

pub fn encode_png16(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Sixteen);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Png(e.to_string()))?;
        let data: Vec<u8> = img
            .to_u16()
            .iter()
            .flat_map(|p| p.to_be_bytes())
            .collect();
        writer
            .write_image_data(&data)
            .map_err(|e| Error::Png(e.to_string()))?;
        writer.finish().map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

pub fn decode_png16(bytes: &[u8]) -> Result<Image> {
    let mut decoder = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let (color, depth) = {
        let info = reader.info();
        (info.color_type, info.bit_depth)
    };
    if color != png::ColorType::Grayscale || depth != png::BitDepth::Sixteen {
        return Err(Error::UnsupportedFormat(format!(
            "expected 16-bit grayscale PNG, found {color:?} at {depth:?}"
        )));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(e.to_string()))?;
    let width = frame.width as usize;
    let height = frame.height as usize;
    let pixels = buf[..frame.buffer_size()]
        .chunks_exact(2)
        .map(|b| f64::from(u16::from_be_bytes([b[0], b[1]])))
        .collect();
    Image::from_vec(width, height, pixels)
}
