//! Training objectives and evaluation metrics.

mod loss;
mod metrics;

pub use loss::{
    berhu, berhu_penalty, berhu_with, l1_normal, total_loss, BerhuThreshold, LossTerms, Targets, BERHU_KNEE,
};
pub use metrics::{
    angular_error_deg, depth_metrics, format_header, format_row, normal_metrics, DepthMetrics, MetricReport,
    NormalMetrics, ANGLE_THRESHOLDS_DEG, COLUMNS, DELTA_BASE, DEPTH_EPS,
};

/// Per-pixel supervision masks for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidityMask {
    pub height: usize,
    pub width: usize,
    /// Stored normal is not the zero vector.
    pub normal_valid: Vec<bool>,
    /// Normalized ground-truth depth is at least [`DEPTH_EPS`].
    pub depth_valid: Vec<bool>,
}

impl ValidityMask {
    /// `depth01` is `H*W` normalized depth, `normal` three planes of raw
    /// (unencoded) components.
    pub fn from_ground_truth(height: usize, width: usize, depth01: &[f64], normal: &[f64]) -> Self {
        let hw = height * width;
        debug_assert_eq!(depth01.len(), hw);
        debug_assert_eq!(normal.len(), 3 * hw);
        ValidityMask {
            height,
            width,
            normal_valid: (0..hw)
                .map(|i| normal[i] != 0.0 || normal[hw + i] != 0.0 || normal[2 * hw + i] != 0.0)
                .collect(),
            depth_valid: depth01.iter().map(|&d| d >= DEPTH_EPS).collect(),
        }
    }
}
