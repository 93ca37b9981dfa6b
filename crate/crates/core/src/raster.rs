//! 8-bit rasters and field-of-view masks, with PNG and binary PGM/PPM I/O.
//!
//! Samples are stored exactly as read: no gamma, colour-space or bit-depth
//! conversion is applied. 16-bit sources are rejected.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::util::{read_file, write_atomic};

/// Default binarization threshold for masks: a pixel is set when its value exceeds it.
pub const DEFAULT_MASK_THRESHOLD: u8 = 127;

/// Row-major, channel-interleaved 8-bit image with 1 or 3 channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: u8,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: u8, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::UnsupportedFormat(format!("{channels} channels")));
        }
        let expected = width * height * channels as usize;
        if data.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height}x{channels} raster needs {expected} samples, got {}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: u8, value: u8) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels as usize])
    }

    /// Single-channel raster from a per-pixel function of `(row, col)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    /// Sample at `(row, col, channel)`.
    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> u8 {
        self.data[(row * self.width + col) * self.channels as usize + channel]
    }

    pub(crate) fn require_channels(&self, expected: u8) -> Result<()> {
        if self.channels != expected {
            return Err(Error::WrongChannelCount {
                expected,
                found: self.channels,
            });
        }
        Ok(())
    }
}

/// Binary mask (values exactly 0 or 1), row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FovMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl FovMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} mask needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::CorruptImage(format!("mask value {v} is not binary")));
        }
        Ok(Self { width, height, data })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![1; width * height],
        }
    }

    /// Binarizes a single-channel (or grey RGB) raster: `value > threshold` maps to 1.
    pub fn from_raster(raster: &Raster, threshold: u8) -> Result<Self> {
        let data = match raster.channels() {
            1 => raster.data().iter().map(|&v| u8::from(v > threshold)).collect(),
            _ => raster
                .data()
                .chunks_exact(3)
                .map(|px| {
                    if px[0] != px[1] || px[1] != px[2] {
                        Err(Error::WrongChannelCount {
                            expected: 1,
                            found: 3,
                        })
                    } else {
                        Ok(u8::from(px[0] > threshold))
                    }
                })
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(Self {
            width: raster.width(),
            height: raster.height(),
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Mask as a 0/255 single-channel raster, for saving.
    pub fn to_raster(&self) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().map(|&v| v * 255).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ImageFormat {
    Png,
    Pgm,
    Ppm,
}

fn sniff(bytes: &[u8]) -> Option<ImageFormat> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        Some(ImageFormat::Png)
    } else if bytes.starts_with(b"P5") {
        Some(ImageFormat::Pgm)
    } else if bytes.starts_with(b"P6") {
        Some(ImageFormat::Ppm)
    } else {
        None
    }
}

pub fn load_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    decode_raster(&bytes)
        .map_err(|e| match e {
            Error::CorruptImage(msg) => Error::CorruptImage(format!("{}: {msg}", path.display())),
            other => other,
        })
}

/// Decodes an in-memory PNG, PGM (P5) or PPM (P6) image.
pub fn decode_raster(bytes: &[u8]) -> Result<Raster> {
    match sniff(bytes) {
        Some(ImageFormat::Png) => decode_png(bytes),
        Some(ImageFormat::Pgm) => decode_pnm(bytes, 1),
        Some(ImageFormat::Ppm) => decode_pnm(bytes, 3),
        None => Err(Error::UnsupportedFormat(
            "not a PNG, binary PGM or binary PPM image".into(),
        )),
    }
}

pub fn load_mask(path: impl AsRef<Path>, threshold: u8) -> Result<FovMask> {
    FovMask::from_raster(&load_raster(path)?, threshold)
}

/// Writes a raster; the format follows the extension (`.png`, `.pgm`, `.ppm`).
pub fn save_raster(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let bytes = match ext.as_str() {
        "png" => encode_png(raster)?,
        "pgm" | "ppm" => {
            let want = if ext == "pgm" { 1 } else { 3 };
            raster.require_channels(want)?;
            encode_pnm(raster)
        }
        other => return Err(Error::UnsupportedFormat(format!("extension {other:?}"))),
    };
    write_atomic(path, &bytes)
}

pub fn encode_pnm(raster: &Raster) -> Vec<u8> {
    let magic = if raster.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    out.extend_from_slice(&raster.data);
    out
}

fn decode_pnm(bytes: &[u8], channels: u8) -> Result<Raster> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments between header fields
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::CorruptImage("malformed PNM header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::CorruptImage("PNM header value out of range".into()))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::CorruptImage("missing separator after PNM header".into())),
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::UnsupportedFormat(format!("PNM maxval {maxval} (only 8-bit supported)")));
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels as usize))
        .ok_or_else(|| Error::CorruptImage("PNM dimensions overflow".into()))?;
    let payload = &bytes[pos..];
    if payload.len() != expected {
        return Err(Error::CorruptImage(format!(
            "PNM payload has {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    Raster::new(width, height, channels, payload.to_vec())
}

fn png_err(e: png::DecodingError) -> Error {
    match e {
        png::DecodingError::IoError(io) => Error::CorruptImage(format!("PNG stream: {io}")),
        other => Error::CorruptImage(format!("PNG: {other}")),
    }
}

fn decode_png(bytes: &[u8]) -> Result<Raster> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(png_err)?;
    if reader.info().bit_depth == png::BitDepth::Sixteen {
        return Err(Error::UnsupportedFormat("16-bit PNG".into()));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::CorruptImage("PNG dimensions overflow".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!("PNG bit depth {:?}", info.bit_depth)));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let in_channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::UnsupportedFormat("unexpanded palette PNG".into()))
        }
    };
    // alpha is dropped; colour samples are kept verbatim
    let out_channels: u8 = if in_channels <= 2 { 1 } else { 3 };
    let mut data = Vec::with_capacity(width * height * out_channels as usize);
    for row in buf.chunks_exact(info.line_size).take(height) {
        for px in row[..width * in_channels].chunks_exact(in_channels) {
            data.extend_from_slice(&px[..out_channels as usize]);
        }
    }
    Raster::new(width, height, out_channels, data)
}

fn encode_png(raster: &Raster) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, raster.width as u32, raster.height as u32);
        encoder.set_color(if raster.channels == 1 {
            png::ColorType::Grayscale
        } else {
            png::ColorType::Rgb
        });
        encoder.set_depth(png::BitDepth::Eight);
        let enc_err = |e: png::EncodingError| Error::UnsupportedFormat(format!("PNG encoding: {e}"));
        let mut writer = encoder.write_header().map_err(enc_err)?;
        writer.write_image_data(&raster.data).map_err(enc_err)?;
        writer.finish().map_err(enc_err)?;
    }
    Ok(out)
}
