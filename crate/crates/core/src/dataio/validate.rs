use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{read_pfm, read_png, DatasetManifest, SampleRecord, Split};
use crate::error::Result;

/// Accepted deviation of a valid normal's length from 1.
pub const NORMAL_UNIT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    MissingFile,
    /// Wrong container for a slot, or an unreadable file.
    Carrier,
    Aspect,
    DepthNonFinite,
    DepthOutOfRange,
    NormalNotUnit,
    ColorRange,
    SplitInconsistent,
    DuplicateId,
    VariantMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// Record id, or `manifest` for dataset-level problems.
    pub frame: String,
    pub kind: ViolationKind,
    /// Offending pixels for per-pixel checks, otherwise 1.
    pub pixels: usize,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub samples: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn counts(&self) -> BTreeMap<ViolationKind, usize> {
        let mut m = BTreeMap::new();
        for v in &self.violations {
            *m.entry(v.kind).or_default() += 1;
        }
        m
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{} samples, {} violations", self.samples, self.violations.len());
        for v in &self.violations {
            s.push_str(&format!("\n  {} {:?} ({} px): {}", v.frame, v.kind, v.pixels, v.detail));
        }
        s
    }
}

fn violation(frame: &str, kind: ViolationKind, pixels: usize, detail: impl Into<String>) -> Violation {
    Violation {
        frame: frame.to_string(),
        kind,
        pixels,
        detail: detail.into(),
    }
}

fn check_record(root: &Path, m: &DatasetManifest, r: &SampleRecord) -> Vec<Violation> {
    let h = &m.header;
    let rows = if h.stereo { 2 * h.height } else { h.height };
    let mut out = Vec::new();
    let id = r.id.as_str();
    if r.variant != h.variant {
        out.push(violation(
            id,
            ViolationKind::VariantMismatch,
            1,
            format!("{:?} in a {:?} dataset", r.variant, h.variant),
        ));
    }
    let slots = [
        ("color", &r.color, "png"),
        ("depth", &r.depth, "pfm"),
        ("normal", &r.normal, "pfm"),
    ];
    let mut present = [false; 3];
    for (k, (slot, rel, ext)) in slots.iter().enumerate() {
        let p = root.join(rel);
        if !p.is_file() {
            out.push(violation(
                id,
                ViolationKind::MissingFile,
                1,
                format!("{slot} file {rel} not found"),
            ));
        } else if Path::new(rel.as_str()).extension().and_then(|e| e.to_str()) != Some(ext) {
            out.push(violation(
                id,
                ViolationKind::Carrier,
                1,
                format!("{slot} file {rel} is not .{ext}"),
            ));
        } else {
            present[k] = true;
        }
    }
    let aspect = |what: &str, w: usize, hh: usize, out: &mut Vec<Violation>| {
        if (w, hh) != (h.width, rows) {
            out.push(violation(
                id,
                ViolationKind::Aspect,
                1,
                format!("{what} is {w}x{hh}, expected {}x{rows}", h.width),
            ));
            false
        } else {
            true
        }
    };
    if present[0] {
        match read_png(&root.join(&r.color)) {
            Err(e) => out.push(violation(id, ViolationKind::Carrier, 1, e.to_string())),
            Ok((c, w, hh)) => {
                if aspect("color", w, hh, &mut out) {
                    let bad = c.iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
                    if bad > 0 {
                        out.push(violation(id, ViolationKind::ColorRange, bad, "colour outside [0, 1]"));
                    }
                }
            }
        }
    }
    if present[1] {
        match read_pfm(&root.join(&r.depth)) {
            Err(e) => out.push(violation(id, ViolationKind::Carrier, 1, e.to_string())),
            Ok(d) if d.channels != 1 => out.push(violation(
                id,
                ViolationKind::Carrier,
                1,
                "depth map must have 1 channel",
            )),
            Ok(d) => {
                if aspect("depth", d.width, d.height, &mut out) {
                    let non_finite = d.data.iter().filter(|v| !v.is_finite()).count();
                    let range = d
                        .data
                        .iter()
                        .filter(|v| v.is_finite() && !(**v > 0.0 && (**v as f64) <= h.d_max))
                        .count();
                    if non_finite > 0 {
                        out.push(violation(
                            id,
                            ViolationKind::DepthNonFinite,
                            non_finite,
                            "NaN or infinite depth",
                        ));
                    }
                    if range > 0 {
                        out.push(violation(
                            id,
                            ViolationKind::DepthOutOfRange,
                            range,
                            format!("depth outside (0, {}]", h.d_max),
                        ));
                    }
                }
            }
        }
    }
    if present[2] {
        match read_pfm(&root.join(&r.normal)) {
            Err(e) => out.push(violation(id, ViolationKind::Carrier, 1, e.to_string())),
            Ok(n) if n.channels != 3 => out.push(violation(
                id,
                ViolationKind::Carrier,
                1,
                "normal map must have 3 channels",
            )),
            Ok(n) => {
                if aspect("normal", n.width, n.height, &mut out) {
                    let bad = n
                        .data
                        .chunks_exact(3)
                        .filter(|v| {
                            if v.iter().all(|&c| c == 0.0) {
                                return false;
                            }
                            let len = v.iter().map(|&c| (c as f64) * (c as f64)).sum::<f64>().sqrt();
                            !((len - 1.0).abs() <= NORMAL_UNIT_TOL)
                        })
                        .count();
                    if bad > 0 {
                        out.push(violation(
                            id,
                            ViolationKind::NormalNotUnit,
                            bad,
                            "normal neither unit length nor zero",
                        ));
                    }
                }
            }
        }
    }
    out
}

/// Structural checks over every record of the dataset at `root`.
pub fn validate_dataset(root: &Path) -> Result<ValidationReport> {
    let m = DatasetManifest::read(root)?;
    let h = &m.header;
    let mut violations = Vec::new();
    if h.height == 0 || h.width != 2 * h.height {
        violations.push(violation(
            "manifest",
            ViolationKind::Aspect,
            1,
            format!("resolution {}x{} is not 2:1", h.width, h.height),
        ));
    }
    let mut seen = HashSet::new();
    for r in &m.records {
        if !seen.insert(r.id.as_str()) {
            violations.push(violation(
                &r.id,
                ViolationKind::DuplicateId,
                1,
                "id appears more than once",
            ));
        }
    }
    let mut test_paths: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for r in &m.records {
        let e = test_paths.entry(r.path).or_default();
        if r.split == Split::Test {
            e.0 += 1;
        } else {
            e.1 += 1;
        }
    }
    for r in &m.records {
        let (test, other) = test_paths[&r.path];
        if test > 0 && other > 0 && r.split != Split::Test {
            violations.push(violation(
                &r.id,
                ViolationKind::SplitInconsistent,
                1,
                format!(
                    "path {} is held out for test but this frame is tagged {}",
                    r.path,
                    r.split.name()
                ),
            ));
        }
    }
    let per_record: Vec<Vec<Violation>> = m.records.par_iter().map(|r| check_record(root, &m, r)).collect();
    violations.extend(per_record.into_iter().flatten());
    Ok(ValidationReport {
        samples: m.records.len(),
        violations,
    })
}
