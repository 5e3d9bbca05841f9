use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{make_batch, SampleSet};
use crate::dataio::{Eye, Split};
use crate::error::Result;
use crate::model::{load_checkpoint, Model};
use crate::objective::{depth_metrics, format_header, format_row, normal_metrics, MetricReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub split: Split,
    pub eye: Eye,
    pub limit: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            split: Split::Test,
            eye: Eye::Top,
            limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub parameters: usize,
    pub dataset: String,
    pub split: Split,
    pub samples: usize,
    pub metrics: MetricReport,
    pub per_image: Vec<ImageMetrics>,
    /// Provenance carried over from the checkpoint, if any.
    #[serde(default)]
    pub checkpoint_meta: serde_json::Value,
}

impl EvalReport {
    /// Header plus one row in the twelve-column layout.
    pub fn table(&self) -> String {
        format!(
            "{}\n{}\n",
            format_header(),
            format_row(&format!("{} ({})", self.model, self.split.name()), &self.metrics)
        )
    }
}

/// Per-image metrics averaged over one split. Parameters are only read.
pub fn evaluate(model: &Model, root: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let cfg = &model.config;
    let set = SampleSet::open(root, opts.split, opts.eye, opts.limit, cfg.width, cfg.height)?;
    let per_image: Vec<ImageMetrics> = (0..set.len())
        .into_par_iter()
        .map(|i| -> Result<ImageMetrics> {
            let sample = set.load(i)?;
            let batch = make_batch(std::slice::from_ref(&sample), set.d_max())?;
            let pred = model.predict(&batch.input)?;
            let t = &batch.targets;
            Ok(ImageMetrics {
                id: sample.meta.id.clone(),
                metrics: MetricReport {
                    depth: depth_metrics(pred.depth01.data(), t.depth01.data(), &t.depth_mask)?,
                    normal: normal_metrics(pred.normal01.data(), t.normal01.data(), &t.normal_valid)?,
                },
            })
        })
        .collect::<Result<_>>()?;
    let metrics = MetricReport::mean(&per_image.iter().map(|m| m.metrics).collect::<Vec<_>>())?;
    Ok(EvalReport {
        model: cfg.variant.name().to_string(),
        parameters: model.num_parameters(),
        dataset: root.display().to_string(),
        split: opts.split,
        samples: per_image.len(),
        metrics,
        per_image,
        checkpoint_meta: serde_json::Value::Null,
    })
}

pub fn evaluate_checkpoint(checkpoint: &Path, root: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let ck = load_checkpoint(checkpoint)?;
    let mut report = evaluate(&ck.model, root, opts)?;
    report.checkpoint_meta = ck.meta;
    Ok(report)
}
