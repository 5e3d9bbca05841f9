//! Depth and surface-normal evaluation statistics.
//!
//! Single-image functions take channel-planar slices: depth as `H*W` values,
//! normals as three consecutive `H*W` planes, both in the `[0, 1]` encoding
//! the network predicts. Set-level numbers are the mean of per-image values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound for depths entering ratio and log terms.
pub const DEPTH_EPS: f64 = 1e-3;
pub const DELTA_BASE: f64 = 1.25;
pub const ANGLE_THRESHOLDS_DEG: [f64; 3] = [5.0, 7.5, 11.25];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub rmse: f64,
    pub mre: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NormalMetrics {
    pub mean_deg: f64,
    pub median_deg: f64,
    pub rmse_deg: f64,
    pub acc5: f64,
    pub acc7_5: f64,
    pub acc11_25: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub depth: DepthMetrics,
    pub normal: NormalMetrics,
}

/// Column headers in report order.
pub const COLUMNS: [&str; 12] = [
    "RMSE", "MRE", "RMSE log", "δ1", "δ2", "δ3", "Mean", "Median", "RMSE", "5.0°", "7.5°", "11.25°",
];

impl MetricReport {
    /// The twelve values in column order; angular accuracies in percent.
    pub fn row(&self) -> [f64; 12] {
        let d = &self.depth;
        let n = &self.normal;
        [
            d.rmse,
            d.mre,
            d.rmse_log,
            d.delta1,
            d.delta2,
            d.delta3,
            n.mean_deg,
            n.median_deg,
            n.rmse_deg,
            100.0 * n.acc5,
            100.0 * n.acc7_5,
            100.0 * n.acc11_25,
        ]
    }

    /// Elementwise mean of per-image reports.
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport> {
        if reports.is_empty() {
            return Err(Error::invalid("cannot aggregate zero reports"));
        }
        let k = reports.len() as f64;
        let avg = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
        Ok(MetricReport {
            depth: DepthMetrics {
                rmse: avg(&|r| r.depth.rmse),
                mre: avg(&|r| r.depth.mre),
                rmse_log: avg(&|r| r.depth.rmse_log),
                delta1: avg(&|r| r.depth.delta1),
                delta2: avg(&|r| r.depth.delta2),
                delta3: avg(&|r| r.depth.delta3),
            },
            normal: NormalMetrics {
                mean_deg: avg(&|r| r.normal.mean_deg),
                median_deg: avg(&|r| r.normal.median_deg),
                rmse_deg: avg(&|r| r.normal.rmse_deg),
                acc5: avg(&|r| r.normal.acc5),
                acc7_5: avg(&|r| r.normal.acc7_5),
                acc11_25: avg(&|r| r.normal.acc11_25),
            },
        })
    }
}

pub fn format_header() -> String {
    let mut s = format!("{:<22}", "");
    for c in COLUMNS {
        s.push_str(&format!("{c:>9}"));
    }
    s
}

pub fn format_row(label: &str, r: &MetricReport) -> String {
    let mut s = format!("{label:<22}");
    for (i, v) in r.row().iter().enumerate() {
        if i < 6 {
            s.push_str(&format!("{v:>9.3}"));
        } else {
            s.push_str(&format!("{v:>9.2}"));
        }
    }
    s
}

fn check_lengths(pred: usize, gt: usize, mask: usize, per_pixel: usize) -> Result<()> {
    if pred != gt || pred != mask * per_pixel {
        return Err(Error::invalid(format!(
            "metric inputs disagree: pred {pred}, gt {gt}, mask {mask} x {per_pixel}"
        )));
    }
    Ok(())
}

/// Depth statistics in normalized units over `valid` pixels. Ratio and log
/// terms additionally require both values to be at least [`DEPTH_EPS`].
pub fn depth_metrics(pred01: &[f64], gt01: &[f64], valid: &[bool]) -> Result<DepthMetrics> {
    check_lengths(pred01.len(), gt01.len(), valid.len(), 1)?;
    let pixels: Vec<(f64, f64)> = pred01
        .iter()
        .zip(gt01)
        .zip(valid)
        .filter(|(_, &v)| v)
        .map(|((&p, &g), _)| (p, g))
        .collect();
    if pixels.is_empty() {
        return Err(Error::invalid("depth_metrics: empty mask"));
    }
    let n = pixels.len() as f64;
    let rmse = (pixels.iter().map(|(p, g)| (p - g).powi(2)).sum::<f64>() / n).sqrt();
    let ratio: Vec<(f64, f64)> = pixels
        .iter()
        .copied()
        .filter(|&(p, g)| p >= DEPTH_EPS && g >= DEPTH_EPS)
        .collect();
    if ratio.is_empty() {
        return Err(Error::invalid("depth_metrics: no pixels above the depth floor"));
    }
    let m = ratio.len() as f64;
    let mre = ratio.iter().map(|(p, g)| (p - g).abs() / g).sum::<f64>() / m;
    let rmse_log = (ratio.iter().map(|(p, g)| (p.ln() - g.ln()).powi(2)).sum::<f64>() / m).sqrt();
    let delta = |k: i32| {
        let thr = DELTA_BASE.powi(k);
        ratio.iter().filter(|(p, g)| (p / g).max(g / p) < thr).count() as f64 / m
    };
    Ok(DepthMetrics {
        rmse,
        mre,
        rmse_log,
        delta1: delta(1),
        delta2: delta(2),
        delta3: delta(3),
    })
}

fn decode_unit(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = [2.0 * v[0] - 1.0, 2.0 * v[1] - 1.0, 2.0 * v[2] - 1.0];
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    (len > 0.0).then(|| [n[0] / len, n[1] / len, n[2] / len])
}

/// Angular error in degrees between two encoded normals; a zero-length
/// prediction counts as 90°.
pub fn angular_error_deg(pred01: [f64; 3], gt01: [f64; 3]) -> f64 {
    match (decode_unit(pred01), decode_unit(gt01)) {
        (Some(p), Some(g)) => (p[0] * g[0] + p[1] * g[1] + p[2] * g[2])
            .clamp(-1.0, 1.0)
            .acos()
            .to_degrees(),
        _ => 90.0,
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Angular statistics over `valid` pixels. Accuracies count errors strictly
/// below each threshold.
pub fn normal_metrics(pred01: &[f64], gt01: &[f64], valid: &[bool]) -> Result<NormalMetrics> {
    check_lengths(pred01.len(), gt01.len(), valid.len(), 3)?;
    let hw = valid.len();
    let at = |buf: &[f64], i: usize| [buf[i], buf[hw + i], buf[2 * hw + i]];
    let mut errs: Vec<f64> = (0..hw)
        .filter(|&i| valid[i])
        .map(|i| angular_error_deg(at(pred01, i), at(gt01, i)))
        .collect();
    if errs.is_empty() {
        return Err(Error::invalid("normal_metrics: empty mask"));
    }
    let n = errs.len() as f64;
    let mean_deg = errs.iter().sum::<f64>() / n;
    let rmse_deg = (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let acc = |t: f64| errs.iter().filter(|&&e| e < t).count() as f64 / n;
    let [t5, t7, t11] = ANGLE_THRESHOLDS_DEG;
    let (acc5, acc7_5, acc11_25) = (acc(t5), acc(t7), acc(t11));
    errs.sort_by(f64::total_cmp);
    Ok(NormalMetrics {
        mean_deg,
        median_deg: median(&errs),
        rmse_deg,
        acc5,
        acc7_5,
        acc11_25,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_depth() {
        let g = [0.2, 0.5, 0.9, 1.0];
        let m = depth_metrics(&g, &g, &[true; 4]).unwrap();
        assert_eq!(
            m,
            DepthMetrics {
                rmse: 0.0,
                mre: 0.0,
                rmse_log: 0.0,
                delta1: 1.0,
                delta2: 1.0,
                delta3: 1.0
            }
        );
    }

    #[test]
    fn two_pixel_hand_case() {
        let m = depth_metrics(&[1.0, 0.5], &[0.5, 0.5], &[true, true]).unwrap();
        assert!((m.rmse - 0.35355).abs() < 1e-5);
        assert!((m.mre - 0.5).abs() < 1e-12);
        assert!((m.rmse_log - 0.49012).abs() < 1e-5);
        assert_eq!((m.delta1, m.delta2, m.delta3), (0.5, 0.5, 0.5));
    }

    #[test]
    fn uniform_scaling_inside_first_threshold() {
        let gt: [f64; 4] = [0.1, 0.3, 0.5, 0.8];
        let pred: Vec<f64> = gt.iter().map(|g| (1.2 * g).min(0.999)).collect();
        let m = depth_metrics(&pred, &gt, &[true; 4]).unwrap();
        assert_eq!(m.delta1, 1.0);
        assert!((m.mre - 0.2).abs() < 1e-12);
    }

    #[test]
    fn depth_matches_naive_loop_on_random_samples() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let hw = 16 * 32;
        for _ in 0..100 {
            let gt: Vec<f64> = (0..hw).map(|_| rng.gen_range(0.0..1.0)).collect();
            let pred: Vec<f64> = (0..hw).map(|_| rng.gen_range(0.0..1.0)).collect();
            let valid: Vec<bool> = (0..hw).map(|_| rng.gen_bool(0.8)).collect();
            let m = depth_metrics(&pred, &gt, &valid).unwrap();
            let (mut se, mut n) = (0.0, 0usize);
            let (mut re, mut le, mut d1, mut d2, mut d3, mut k) = (0.0, 0.0, 0usize, 0usize, 0usize, 0usize);
            for i in 0..hw {
                if !valid[i] {
                    continue;
                }
                n += 1;
                se += (pred[i] - gt[i]) * (pred[i] - gt[i]);
                if pred[i] < 1e-3 || gt[i] < 1e-3 {
                    continue;
                }
                k += 1;
                re += (pred[i] - gt[i]).abs() / gt[i];
                le += (pred[i].ln() - gt[i].ln()).powi(2);
                let r = if pred[i] > gt[i] {
                    pred[i] / gt[i]
                } else {
                    gt[i] / pred[i]
                };
                d1 += (r < 1.25) as usize;
                d2 += (r < 1.5625) as usize;
                d3 += (r < 1.953125) as usize;
            }
            let kf = k as f64;
            assert!((m.rmse - (se / n as f64).sqrt()).abs() < 1e-9);
            assert!((m.mre - re / kf).abs() < 1e-9);
            assert!((m.rmse_log - (le / kf).sqrt()).abs() < 1e-9);
            assert!((m.delta1 - d1 as f64 / kf).abs() < 1e-9);
            assert!((m.delta2 - d2 as f64 / kf).abs() < 1e-9);
            assert!((m.delta3 - d3 as f64 / kf).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_masks_rejected() {
        assert!(depth_metrics(&[0.5], &[0.5], &[false]).is_err());
        assert!(normal_metrics(&[0.5; 3], &[0.5; 3], &[false]).is_err());
    }

    fn encode(n: [f64; 3], hw: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 * hw);
        for c in n {
            v.extend(std::iter::repeat((c + 1.0) / 2.0).take(hw));
        }
        v
    }

    #[test]
    fn identity_normals() {
        let g = encode([0.0, 1.0, 0.0], 6);
        let m = normal_metrics(&g, &g, &[true; 6]).unwrap();
        assert_eq!((m.mean_deg, m.median_deg, m.rmse_deg), (0.0, 0.0, 0.0));
        assert_eq!((m.acc5, m.acc7_5, m.acc11_25), (1.0, 1.0, 1.0));
    }

    #[test]
    fn constant_ten_degree_tilt() {
        let t = 10f64.to_radians();
        let gt = encode([0.0, 0.0, 1.0], 8);
        let pred = encode([t.sin(), 0.0, t.cos()], 8);
        let m = normal_metrics(&pred, &gt, &[true; 8]).unwrap();
        for v in [m.mean_deg, m.median_deg, m.rmse_deg] {
            assert!((v - 10.0).abs() < 1e-6, "{v}");
        }
        assert_eq!((m.acc5, m.acc7_5, m.acc11_25), (0.0, 0.0, 1.0));
    }

    #[test]
    fn zero_prediction_counts_ninety_degrees() {
        assert_eq!(angular_error_deg([0.5, 0.5, 0.5], [1.0, 0.5, 0.5]), 90.0);
    }

    #[test]
    fn report_row_order() {
        let r = MetricReport {
            depth: DepthMetrics {
                rmse: 1.0,
                mre: 2.0,
                rmse_log: 3.0,
                delta1: 4.0,
                delta2: 5.0,
                delta3: 6.0,
            },
            normal: NormalMetrics {
                mean_deg: 7.0,
                median_deg: 8.0,
                rmse_deg: 9.0,
                acc5: 0.10,
                acc7_5: 0.11,
                acc11_25: 0.12,
            },
        };
        let row = r.row();
        assert_eq!(&row[..9], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        assert!((row[9] - 10.0).abs() < 1e-12 && (row[11] - 12.0).abs() < 1e-12);
        let json = serde_json::to_string(&r).unwrap();
        let keys = [
            "rmse\"",
            "mre",
            "rmse_log",
            "delta1",
            "delta2",
            "delta3",
            "mean_deg",
            "median_deg",
            "rmse_deg",
            "acc5",
            "acc7_5",
            "acc11_25",
        ];
        let pos: Vec<usize> = keys.iter().map(|k| json.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{json}");
    }
}
