//! Grayscale and depth rasters with their on-disk encodings: binary PGM
//! (P5, 8-bit) for intensities and a small little-endian float raster for
//! depth.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;

/// 8-bit grayscale image; intensities are exposed as `f32` in [0, 1].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch {
                expected: format!("{} bytes", width * height),
                actual: format!("{} bytes", data.len()),
            });
        }
        Ok(Self { width, height, data })
    }

    /// Quantizes real intensities (clamped to [0, 1]) to 8 bits.
    pub fn from_f32(width: usize, height: usize, values: &[f32]) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", width * height),
                actual: format!("{} values", values.len()),
            });
        }
        let data = values.iter().map(|&v| quantize(v)).collect();
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x] as f32 * (1.0 / 255.0)
    }

    #[inline]
    pub fn get_u8(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: f32) {
        self.data[y * self.width + x] = quantize(value);
    }

    /// Bilinear sample at a real-valued pixel position. The caller keeps the
    /// position inside `[0, w-1] x [0, h-1]`.
    #[inline]
    pub fn sample(&self, u: f64, v: f64) -> f32 {
        let x0 = (u.floor() as usize).min(self.width - 1);
        let y0 = (v.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (u - x0 as f64) as f32;
        let fy = (v - y0 as f64) as f32;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Copies the `w x h` window whose top-left corner is (x0, y0) as floats.
    pub fn crop_f32(&self, x0: usize, y0: usize, w: usize, h: usize, out: &mut [f32]) {
        debug_assert!(x0 + w <= self.width && y0 + h <= self.height);
        for r in 0..h {
            let src = &self.data[(y0 + r) * self.width + x0..][..w];
            for (o, &s) in out[r * w..(r + 1) * w].iter_mut().zip(src) {
                *o = s as f32 * (1.0 / 255.0);
            }
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> GrayImage {
        let mut data = Vec::with_capacity(w * h);
        for r in 0..h {
            data.extend_from_slice(&self.data[(y0 + r) * self.width + x0..][..w]);
        }
        GrayImage { width: w, height: h, data }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&b| b as f32 * (1.0 / 255.0)).collect()
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::format("PGM", reason);
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("not a binary (P5) PGM"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(bad("only 8-bit PGM is supported"));
        }
        pos += 1;
        let body = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated pixel data"))?;
        Self::from_raw(w, h, body.to_vec())
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode_pgm())
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_pgm(&bytes).map_err(|e| match e {
            Error::Format { reason, .. } => Error::format(format!("PGM {}", path.display()), reason),
            other => other,
        })
    }
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Range image in meters (z-depth along the left camera's optical axis).
/// [`DepthImage::NO_RETURN`] marks pixels without a measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

pub const DEPTH_MAGIC: &[u8; 8] = b"IVOADPTH";

impl DepthImage {
    pub const NO_RETURN: f32 = 0.0;

    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![Self::NO_RETURN; width * height] }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", width * height),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f32> {
        let d = self.data[y * self.width + x];
        (d > 0.0).then_some(d)
    }

    pub fn set(&mut self, x: usize, y: usize, depth: Option<f32>) {
        self.data[y * self.width + x] = depth.unwrap_or(Self::NO_RETURN);
    }

    /// 8-byte magic, width and height as u32 LE, then f32 LE row-major.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(DEPTH_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for d in &self.data {
            out.write_all(&d.to_le_bytes()).unwrap();
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::format("depth raster", reason);
        if bytes.len() < 16 || &bytes[..8] != DEPTH_MAGIC {
            return Err(bad("missing IVOADPTH magic"));
        }
        let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() != 4 * w * h {
            return Err(bad("payload size does not match header"));
        }
        let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Self::from_raw(w, h, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
