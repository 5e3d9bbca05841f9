use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::dataio::{read_sample, DatasetManifest, Eye, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::objective::{Targets, ValidityMask};
use crate::panosim::PanoSample;

/// Network input and supervision for a group of samples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[B, 3, H, W]` colour in `[0, 1]`.
    pub input: Tensor,
    pub targets: Targets,
}

/// Integer-factor downscale: colour is box-averaged, depth and normals take
/// the sample nearest each block centre so sky and surface values stay
/// exact.
pub fn resize_sample(sample: &PanoSample, width: usize, height: usize) -> Result<PanoSample> {
    if (sample.width, sample.height) == (width, height) {
        return Ok(sample.clone());
    }
    if width == 0 || height == 0 || sample.width % width != 0 || sample.height % height != 0 {
        return Err(Error::invalid(format!(
            "cannot rescale {}x{} to {width}x{height} by an integer factor",
            sample.width, sample.height
        )));
    }
    let (fx, fy) = (sample.width / width, sample.height / height);
    if fx != fy {
        return Err(Error::invalid(format!(
            "anisotropic rescale {fx}x{fy} is not supported"
        )));
    }
    let f = fx;
    let (sw, shw, hw) = (sample.width, sample.pixels(), width * height);
    let box_mean = |src: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; src.len() / shw * hw];
        for (s, d) in src.chunks_exact(shw).zip(out.chunks_exact_mut(hw)) {
            for y in 0..height {
                for x in 0..width {
                    let mut acc = 0.0;
                    for dy in 0..f {
                        let row = (y * f + dy) * sw + x * f;
                        acc += s[row..row + f].iter().sum::<f64>();
                    }
                    d[y * width + x] = acc / (f * f) as f64;
                }
            }
        }
        out
    };
    let centre = |src: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; src.len() / shw * hw];
        for (s, d) in src.chunks_exact(shw).zip(out.chunks_exact_mut(hw)) {
            for y in 0..height {
                for x in 0..width {
                    d[y * width + x] = s[(y * f + f / 2) * sw + x * f + f / 2];
                }
            }
        }
        out
    };
    Ok(PanoSample {
        width,
        height,
        color: box_mean(&sample.color),
        depth: centre(&sample.depth),
        normal: centre(&sample.normal),
        meta: sample.meta.clone(),
    })
}

/// Normalized depth `depth / d_max` clamped to `[0, 1]`.
pub fn normalize_depth(depth: &[f64], d_max: f64) -> Vec<f64> {
    depth.iter().map(|&d| (d / d_max).clamp(0.0, 1.0)).collect()
}

/// `(n + 1) / 2` on valid pixels, zero elsewhere.
pub fn encode_normals(normal: &[f64], valid: &[bool]) -> Vec<f64> {
    let hw = valid.len();
    normal
        .iter()
        .enumerate()
        .map(|(i, &n)| if valid[i % hw] { (n + 1.0) / 2.0 } else { 0.0 })
        .collect()
}

pub fn make_batch(samples: &[PanoSample], d_max: f64) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (w, h) = (first.width, first.height);
    if samples.iter().any(|s| (s.width, s.height) != (w, h)) {
        return Err(Error::invalid("batch samples differ in resolution"));
    }
    let b = samples.len();
    let mut color = Vec::with_capacity(b * 3 * w * h);
    let mut depth01 = Vec::with_capacity(b * w * h);
    let mut normal01 = Vec::with_capacity(b * 3 * w * h);
    let mut depth_mask = Vec::with_capacity(b * w * h);
    let mut normal_valid = Vec::with_capacity(b * w * h);
    for s in samples {
        let d = normalize_depth(&s.depth, d_max);
        let mask = ValidityMask::from_ground_truth(h, w, &d, &s.normal);
        color.extend_from_slice(&s.color);
        normal01.extend(encode_normals(&s.normal, &mask.normal_valid));
        depth01.extend(d);
        depth_mask.extend(mask.depth_valid);
        normal_valid.extend(mask.normal_valid);
    }
    Ok(Batch {
        ids: samples.iter().map(|s| s.meta.id.clone()).collect(),
        input: Tensor::new(&[b, 3, h, w], color)?,
        targets: Targets {
            depth01: Tensor::new(&[b, 1, h, w], depth01)?,
            normal01: Tensor::new(&[b, 3, h, w], normal01)?,
            depth_mask,
            normal_valid,
        },
    })
}

/// Records of one split of an on-disk dataset, loaded at a fixed resolution.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub records: Vec<SampleRecord>,
    pub eye: Eye,
    pub width: usize,
    pub height: usize,
}

impl SampleSet {
    /// `limit` keeps the first records of the split in manifest order.
    pub fn open(
        root: &Path,
        split: Split,
        eye: Eye,
        limit: Option<usize>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let manifest = DatasetManifest::read(root)?;
        let h = &manifest.header;
        if eye == Eye::Bottom && !h.stereo {
            return Err(Error::invalid("bottom eye requested from a mono dataset"));
        }
        if width == 0 || h.width % width != 0 || h.height % height.max(1) != 0 || h.width / width != h.height / height {
            return Err(Error::invalid(format!(
                "dataset resolution {}x{} is incompatible with model input {width}x{height}",
                h.width, h.height
            )));
        }
        let mut records: Vec<SampleRecord> = manifest.split(split).into_iter().cloned().collect();
        if let Some(n) = limit {
            records.truncate(n);
        }
        if records.is_empty() {
            return Err(Error::invalid(format!(
                "split {} of {} is empty",
                split.name(),
                root.display()
            )));
        }
        Ok(SampleSet {
            root: root.to_path_buf(),
            manifest,
            records,
            eye,
            width,
            height,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn d_max(&self) -> f64 {
        self.manifest.header.d_max
    }

    pub fn load(&self, index: usize) -> Result<PanoSample> {
        let s = read_sample(&self.root, &self.manifest.header, &self.records[index], self.eye)?;
        resize_sample(&s, self.width, self.height)
    }

    pub fn load_many(&self, indices: &[usize], parallel: bool) -> Result<Vec<PanoSample>> {
        if parallel {
            indices.par_iter().map(|&i| self.load(i)).collect()
        } else {
            indices.iter().map(|&i| self.load(i)).collect()
        }
    }
}
