use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalOptions};
use super::train::{train, TrainConfig};
use crate::dataio::{Eye, Split};
use crate::error::Result;
use crate::objective::{format_header, format_row, MetricReport};
use crate::panosim::{generate_dataset, DatasetVariant, GenConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct AblationConfig {
    /// Generator settings shared by all variants; `variant` is overridden.
    pub generate: GenConfig,
    /// Schedule shared by all variants; `dataset` is overridden.
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub variant: DatasetVariant,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub model: String,
    pub evaluated_on: String,
    pub samples: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let mut s = format!("{}\n", format_header());
        for r in &self.rows {
            s.push_str(&format_row(&r.label, &r.metrics));
            s.push('\n');
        }
        s
    }
}

/// Generates the three dataset variants from one seed under `out/data`,
/// trains one model per variant under `out/runs`, and scores every model on
/// the test split of the fully dynamic variant.
pub fn ablation_run(cfg: &AblationConfig, out: &Path) -> Result<AblationReport> {
    fs::create_dir_all(out)?;
    let data_dir = |v: DatasetVariant| out.join("data").join(v.name());
    for v in DatasetVariant::ALL {
        let gen = GenConfig {
            variant: v,
            ..cfg.generate.clone()
        };
        generate_dataset(&gen, &data_dir(v))?;
    }
    let eval_root = data_dir(DatasetVariant::StaticVpDl);
    let opts = EvalOptions {
        split: Split::Test,
        eye: Eye::Top,
        limit: None,
    };
    let mut rows = Vec::new();
    let mut samples = 0;
    for v in DatasetVariant::ALL {
        let tc = TrainConfig {
            dataset: data_dir(v),
            ..cfg.train.clone()
        };
        let outcome = train(&tc, Some(&out.join("runs").join(v.name())))?;
        let report = evaluate(&outcome.model, &eval_root, &opts)?;
        samples = report.samples;
        rows.push(AblationRow {
            label: v.label().to_string(),
            variant: v,
            metrics: report.metrics,
        });
    }
    let report = AblationReport {
        model: cfg.train.model.variant.name().to_string(),
        evaluated_on: format!("{} ({})", eval_root.display(), Split::Test.name()),
        samples,
        rows,
    };
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    fs::write(out.join("ablation.txt"), report.table())?;
    Ok(report)
}
