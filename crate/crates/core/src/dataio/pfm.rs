use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// A 1- or 3-channel 32-bit float image, rows top to bottom, channels
/// interleaved per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FloatMap {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "float maps carry 1 or 3 channels, not {channels}"
            )));
        }
        if width == 0 || height == 0 || data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "{} values do not fill a {width}x{height}x{channels} map",
                data.len()
            )));
        }
        Ok(FloatMap {
            width,
            height,
            channels,
            data,
        })
    }

    /// From a planar `[C][H][W]` buffer.
    pub fn from_planar(width: usize, height: usize, channels: usize, planar: &[f64]) -> Result<Self> {
        let hw = width * height;
        if planar.len() != hw * channels {
            return Err(Error::invalid("planar buffer does not match the map extents"));
        }
        let data = (0..hw)
            .flat_map(|i| (0..channels).map(move |c| planar[c * hw + i] as f32))
            .collect();
        FloatMap::new(width, height, channels, data)
    }

    pub fn to_planar(&self) -> Vec<f64> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; hw * self.channels];
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * hw + i] = v as f64;
            }
        }
        out
    }
}

pub fn encode_pfm(map: &FloatMap) -> Vec<u8> {
    let tag = if map.channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    let row = map.width * map.channels;
    out.reserve(map.data.len() * 4);
    for r in (0..map.height).rev() {
        for v in &map.data[r * row..(r + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos)
        .then(|| std::str::from_utf8(&bytes[start..*pos]).ok())
        .flatten()
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<FloatMap> {
    let bad = |msg: String| Error::format(path, msg);
    let mut pos = 0;
    let channels = match next_token(bytes, &mut pos) {
        Some("PF") => 3,
        Some("Pf") => 1,
        other => return Err(bad(format!("not a PFM file (tag {other:?})"))),
    };
    let mut dim = |what: &str| -> Result<usize> {
        next_token(bytes, &mut pos)
            .and_then(|t| t.parse::<usize>().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| bad(format!("malformed {what} in header")))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let scale: f64 = next_token(bytes, &mut pos)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("malformed scale in header".into()))?;
    if scale >= 0.0 {
        return Err(bad(format!(
            "scale {scale} declares big-endian data; only little-endian (negative scale) PFM is supported"
        )));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("header not terminated".into()));
    }
    pos += 1;
    let payload = &bytes[pos..];
    let expect = width * height * channels * 4;
    if payload.len() != expect {
        return Err(bad(format!(
            "payload has {} bytes, expected {expect} for {width}x{height}x{channels}",
            payload.len()
        )));
    }
    let row = width * channels;
    let mut data = vec![0f32; width * height * channels];
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let (r_file, col) = (k / row, k % row);
        let r = height - 1 - r_file;
        data[r * row + col] = f32::from_le_bytes(chunk.try_into().unwrap());
    }
    FloatMap::new(width, height, channels, data)
}

pub fn write_pfm(path: &Path, map: &FloatMap) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_pfm(map))?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<FloatMap> {
    decode_pfm(&fs::read(path)?, path)
}
