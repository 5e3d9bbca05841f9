use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panosim::DatasetVariant;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format_version: u32,
    /// Per-eye resolution.
    pub width: usize,
    pub height: usize,
    pub d_max: f64,
    pub seed: u64,
    /// Files hold a top (reference) and bottom eye stacked vertically.
    pub stereo: bool,
    pub variant: DatasetVariant,
    #[serde(default)]
    pub generator: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub color: String,
    pub depth: String,
    pub normal: String,
    pub path: usize,
    pub frame: usize,
    pub position: [f64; 3],
    pub yaw: f64,
    pub t: f64,
    pub cloudiness: f64,
    pub variant: DatasetVariant,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let mut f = BufWriter::new(fs::File::create(root.join(MANIFEST_FILE))?);
        serde_json::to_writer(&mut f, &self.header)?;
        writeln!(f)?;
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            writeln!(f)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let f = BufReader::new(fs::File::open(&path)?);
        let mut lines = f.lines().enumerate();
        let header: ManifestHeader = match lines.next() {
            Some((_, line)) => {
                serde_json::from_str(&line?).map_err(|e| Error::format(&path, format!("line 1: {e}")))?
            }
            None => return Err(Error::format(&path, "empty manifest")),
        };
        if header.format_version != FORMAT_VERSION {
            return Err(Error::format(
                &path,
                format!("unsupported format version {}", header.format_version),
            ));
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r = serde_json::from_str(&line).map_err(|e| Error::format(&path, format!("line {}: {e}", i + 1)))?;
            records.push(r);
        }
        Ok(DatasetManifest { header, records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            header: ManifestHeader {
                format_version: FORMAT_VERSION,
                width: 32,
                height: 16,
                d_max: 150.0,
                seed: 3,
                stereo: true,
                variant: DatasetVariant::StaticVpDl,
                generator: serde_json::json!({"paths": 2}),
            },
            records: vec![SampleRecord {
                id: "p00_f0001".into(),
                color: "color/p00_f0001.png".into(),
                depth: "depth/p00_f0001.pfm".into(),
                normal: "normal/p00_f0001.pfm".into(),
                path: 0,
                frame: 1,
                position: [0.0, 0.0, 1.25],
                yaw: 0.0,
                t: 0.3,
                cloudiness: 0.1,
                variant: DatasetVariant::StaticVpDl,
                split: Split::Val,
            }],
        };
        m.write(dir.path()).unwrap();
        assert_eq!(DatasetManifest::read(dir.path()).unwrap(), m);
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"split\":\"val\""));
    }
}
