//! On-disk dataset layout:
//!
//! ```text
//! root/manifest.jsonl
//! root/color/<id>.png     8-bit RGB
//! root/depth/<id>.pfm     1-channel float, scene units
//! root/normal/<id>.pfm    3-channel float, raw world-space components
//! ```
//!
//! Stereo datasets stack the reference eye above the second eye in every
//! file.

mod manifest;
mod pfm;
mod validate;

pub use manifest::{DatasetManifest, ManifestHeader, SampleRecord, Split, FORMAT_VERSION, MANIFEST_FILE};
pub use pfm::{decode_pfm, encode_pfm, read_pfm, write_pfm, FloatMap};
pub use validate::{validate_dataset, ValidationReport, Violation, ViolationKind, NORMAL_UNIT_TOL};

use std::fs;
use std::path::Path;

use image::{ColorType, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panosim::{PanoSample, SampleMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Eye {
    #[default]
    Top,
    Bottom,
}

impl std::str::FromStr for Eye {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(Eye::Top),
            "bottom" => Ok(Eye::Bottom),
            _ => Err(Error::invalid(format!("unknown eye {s:?} (expected top or bottom)"))),
        }
    }
}

/// Stacks two planar `[C][H][W]` buffers into `[C][2H][W]`, `a` on top.
pub fn pack_topbottom(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<Vec<f64>> {
    let plane = width * height;
    if a.len() != b.len() || plane == 0 || a.len() % plane != 0 {
        return Err(Error::invalid(format!(
            "cannot stack buffers of {} and {} values at {width}x{height}",
            a.len(),
            b.len()
        )));
    }
    let mut out = Vec::with_capacity(2 * a.len());
    for (pa, pb) in a.chunks_exact(plane).zip(b.chunks_exact(plane)) {
        out.extend_from_slice(pa);
        out.extend_from_slice(pb);
    }
    Ok(out)
}

/// Splits a `[C][2H][W]` buffer into its top and bottom halves.
pub fn unpack_topbottom(stacked: &[f64], width: usize, stacked_height: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if stacked_height % 2 != 0 {
        return Err(Error::invalid(format!("stacked height {stacked_height} is odd")));
    }
    let plane = width * stacked_height;
    if plane == 0 || stacked.len() % plane != 0 {
        return Err(Error::invalid("stacked buffer does not match its extents"));
    }
    let half = plane / 2;
    let (mut top, mut bottom) = (
        Vec::with_capacity(stacked.len() / 2),
        Vec::with_capacity(stacked.len() / 2),
    );
    for p in stacked.chunks_exact(plane) {
        top.extend_from_slice(&p[..half]);
        bottom.extend_from_slice(&p[half..]);
    }
    Ok((top, bottom))
}

pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a planar `[3][H][W]` colour buffer as 8-bit RGB PNG.
pub fn write_png(path: &Path, color: &[f64], width: usize, height: usize) -> Result<()> {
    let hw = width * height;
    if color.len() != 3 * hw {
        return Err(Error::invalid("colour buffer does not match its extents"));
    }
    let img = RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let i = y as usize * width + x as usize;
        image::Rgb([
            quantize_u8(color[i]),
            quantize_u8(color[hw + i]),
            quantize_u8(color[2 * hw + i]),
        ])
    });
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Reads an 8-bit RGB PNG into a planar buffer in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::ImageReader::open(path)?.with_guessed_format()?;
    if img.format() != Some(image::ImageFormat::Png) {
        return Err(Error::format(path, "colour file is not a PNG"));
    }
    let img = img.decode()?;
    if img.color() != ColorType::Rgb8 {
        return Err(Error::format(
            path,
            format!("expected 8-bit RGB, found {:?}", img.color()),
        ));
    }
    let rgb = img.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let hw = w * h;
    let mut out = vec![0.0; 3 * hw];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            out[c * hw + i] = px[c] as f64 / 255.0;
        }
    }
    Ok((out, w, h))
}

pub fn record_for(meta: &SampleMeta, split: Split) -> SampleRecord {
    SampleRecord {
        id: meta.id.clone(),
        color: format!("color/{}.png", meta.id),
        depth: format!("depth/{}.pfm", meta.id),
        normal: format!("normal/{}.pfm", meta.id),
        path: meta.path,
        frame: meta.frame,
        position: meta.position,
        yaw: meta.yaw,
        t: meta.t,
        cloudiness: meta.cloudiness,
        variant: meta.variant,
        split,
    }
}

/// Writes the files of one record; `second` is the bottom eye of a stereo
/// pair.
pub fn write_sample(root: &Path, record: &SampleRecord, top: &PanoSample, second: Option<&PanoSample>) -> Result<()> {
    for dir in ["color", "depth", "normal"] {
        fs::create_dir_all(root.join(dir))?;
    }
    let (w, h) = (top.width, top.height);
    let (color, depth, normal, rows) = match second {
        Some(b) => (
            pack_topbottom(&top.color, &b.color, w, h)?,
            pack_topbottom(&top.depth, &b.depth, w, h)?,
            pack_topbottom(&top.normal, &b.normal, w, h)?,
            2 * h,
        ),
        None => (top.color.clone(), top.depth.clone(), top.normal.clone(), h),
    };
    write_png(&root.join(&record.color), &color, w, rows)?;
    write_pfm(&root.join(&record.depth), &FloatMap::from_planar(w, rows, 1, &depth)?)?;
    write_pfm(&root.join(&record.normal), &FloatMap::from_planar(w, rows, 3, &normal)?)?;
    Ok(())
}

/// Loads one eye of a record as a sample with metric depth.
pub fn read_sample(root: &Path, header: &ManifestHeader, record: &SampleRecord, eye: Eye) -> Result<PanoSample> {
    let (w, h) = (header.width, header.height);
    let rows = if header.stereo { 2 * h } else { h };
    let pick = |planar: Vec<f64>| -> Result<Vec<f64>> {
        if !header.stereo {
            return Ok(planar);
        }
        let (top, bottom) = unpack_topbottom(&planar, w, rows)?;
        Ok(match eye {
            Eye::Top => top,
            Eye::Bottom => bottom,
        })
    };
    let color_path = root.join(&record.color);
    let depth_path = root.join(&record.depth);
    let normal_path = root.join(&record.normal);
    let (color, cw, ch) = read_png(&color_path)?;
    let depth = read_pfm(&depth_path)?;
    let normal = read_pfm(&normal_path)?;
    let check = |p: &Path, dims: (usize, usize), channels: usize, expect: usize| -> Result<()> {
        if dims != (w, rows) {
            return Err(Error::format(
                p,
                format!("expected {w}x{rows}, found {}x{}", dims.0, dims.1),
            ));
        }
        if channels != expect {
            return Err(Error::format(
                p,
                format!("expected {expect} channels, found {channels}"),
            ));
        }
        Ok(())
    };
    check(&color_path, (cw, ch), 3, 3)?;
    check(&depth_path, (depth.width, depth.height), depth.channels, 1)?;
    check(&normal_path, (normal.width, normal.height), normal.channels, 3)?;
    Ok(PanoSample {
        width: w,
        height: h,
        color: pick(color)?,
        depth: pick(depth.to_planar())?,
        normal: pick(normal.to_planar())?,
        meta: SampleMeta {
            id: record.id.clone(),
            path: record.path,
            frame: record.frame,
            position: record.position,
            yaw: record.yaw,
            t: record.t,
            cloudiness: record.cloudiness,
            variant: record.variant,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_unpack_roundtrip() {
        let (w, h) = (4, 2);
        let a: Vec<f64> = (0..24).map(f64::from).collect();
        let b: Vec<f64> = (100..124).map(f64::from).collect();
        let s = pack_topbottom(&a, &b, w, h).unwrap();
        assert_eq!(s.len(), 48);
        assert_eq!(&s[..8], &a[..8]);
        assert_eq!(&s[8..16], &b[..8]);
        assert_eq!(unpack_topbottom(&s, w, 2 * h).unwrap(), (a.clone(), b));
        let (top, bottom) = unpack_topbottom(&pack_topbottom(&a, &a, w, h).unwrap(), w, 2 * h).unwrap();
        assert_eq!(top, bottom);
        assert!(unpack_topbottom(&s, w, 3).is_err());
        assert!(pack_topbottom(&a, &a[..8], w, h).is_err());
    }

    #[test]
    fn tall_stack_halves() {
        let (w, hh) = (8, 1024);
        let s = vec![0.5; w * hh];
        let (t, b) = unpack_topbottom(&s, w, hh).unwrap();
        assert_eq!((t.len(), b.len()), (w * 512, w * 512));
    }

    #[test]
    fn png_roundtrip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        let (w, h) = (4, 2);
        let c: Vec<f64> = (0..24).map(|i| i as f64 / 23.0).collect();
        write_png(&p, &c, w, h).unwrap();
        let (back, bw, bh) = read_png(&p).unwrap();
        assert_eq!((bw, bh), (w, h));
        assert!(back.iter().zip(&c).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
    }
}
