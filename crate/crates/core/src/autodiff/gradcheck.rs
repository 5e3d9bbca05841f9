//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::precision::{Precision, PrecisionGuard};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub rel_tol: f64,
    /// Absolute error below which a coordinate passes regardless of the
    /// relative error.
    pub abs_floor: f64,
    /// Check at most this many coordinates per input (the largest-gradient
    /// coordinates plus a seeded random sample). `None` checks every one.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-6,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordFailure {
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct InputCheck {
    pub name: String,
    pub shape: Vec<usize>,
    pub checked: usize,
    /// Coordinates whose finite differences straddle a kink (relu, max,
    /// branch switch) and were therefore not compared.
    pub skipped_kinks: usize,
    /// Largest relative error among coordinates whose absolute error
    /// exceeds the floor.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub non_finite: Vec<usize>,
    pub failures: Vec<CoordFailure>,
}

impl InputCheck {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.non_finite.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|i| i.max_rel_error).fold(0.0, f64::max)
    }

    pub fn max_abs_error(&self) -> f64 {
        self.inputs.iter().map(|i| i.max_abs_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.inputs.iter().map(|i| i.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.inputs.iter().map(|i| i.skipped_kinks).sum()
    }

    pub fn with_names<S: AsRef<str>>(mut self, names: &[S]) -> Self {
        for (inp, n) in self.inputs.iter_mut().zip(names) {
            inp.name = n.as_ref().to_string();
        }
        self
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for i in &self.inputs {
            s.push_str(&format!(
                "{:<32} {:>14?} checked={:<6} kinks={:<4} max_rel={:.3e} max_abs={:.3e} {}\n",
                i.name,
                i.shape,
                i.checked,
                i.skipped_kinks,
                i.max_rel_error,
                i.max_abs_error,
                if i.passed() { "ok" } else { "FAIL" }
            ));
        }
        s
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    out.item()
}

fn perturbed(inputs: &[Tensor], which: usize, coord: usize, delta: f64) -> Vec<Tensor> {
    let mut v = inputs.to_vec();
    let mut data = v[which].to_vec();
    data[coord] += delta;
    v[which] = Tensor::from_parts(v[which].shape().to_vec(), data);
    v
}

fn central<F>(f: &F, inputs: &[Tensor], which: usize, coord: usize, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let plus = evaluate(f, &perturbed(inputs, which, coord, eps))?;
    let minus = evaluate(f, &perturbed(inputs, which, coord, -eps))?;
    Ok((plus - minus) / (2.0 * eps))
}

fn select_coords(grad: &[f64], limit: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = grad.len();
    let Some(k) = limit.filter(|&k| k < n) else {
        return (0..n).collect();
    };
    let mut by_mag: Vec<usize> = (0..n).collect();
    by_mag.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = by_mag[..k / 2].to_vec();
    for i in sample(rng, n, n.min(2 * k)).into_iter() {
        if chosen.len() >= k {
            break;
        }
        if !chosen.contains(&i) {
            chosen.push(i);
        }
    }
    chosen.sort_unstable();
    chosen
}

enum Outcome {
    Ok { rel: f64, abs: f64 },
    Kink,
    NonFinite,
    Fail { rel: f64, abs: f64, numeric: f64 },
}

/// Compares the analytic gradient of the scalar function `f` with central
/// differences at every (or a sampled subset of) input coordinate. Always
/// evaluated in 64-bit mode.
pub fn grad_check<F>(f: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var> + Sync,
{
    if !(cfg.eps > 0.0) {
        return Err(Error::invalid("grad_check eps must be positive"));
    }
    let _guard = PrecisionGuard::new(Precision::F64);
    let inputs: Vec<Tensor> = inputs.to_vec();

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; v.value().numel()])
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        inputs: Vec::new(),
        passed: true,
    };
    for (which, t) in inputs.iter().enumerate() {
        let coords = select_coords(&analytic[which], cfg.max_coords_per_input, &mut rng);
        let outcomes: Vec<(usize, Result<Outcome>)> = coords
            .par_iter()
            .map(|&coord| {
                let _g = PrecisionGuard::new(Precision::F64);
                let a = analytic[which][coord];
                let judge = |numeric: f64| -> (bool, f64, f64) {
                    let abs = (a - numeric).abs();
                    let scale = a.abs().max(numeric.abs());
                    let rel = if abs <= cfg.abs_floor || scale == 0.0 {
                        0.0
                    } else {
                        abs / scale
                    };
                    (abs <= cfg.abs_floor || rel <= cfg.rel_tol, rel, abs)
                };
                let res = (|| -> Result<Outcome> {
                    let numeric = central(&f, &inputs, which, coord, cfg.eps)?;
                    if !numeric.is_finite() {
                        return Ok(Outcome::NonFinite);
                    }
                    let (ok, rel, abs) = judge(numeric);
                    if ok {
                        return Ok(Outcome::Ok { rel, abs });
                    }
                    // A smooth function gives consistent estimates at eps and
                    // eps/2; disagreement means a kink lies inside the stencil.
                    let half = central(&f, &inputs, which, coord, cfg.eps / 2.0)?;
                    let spread = (half - numeric).abs();
                    if spread > cfg.abs_floor && spread > cfg.rel_tol * numeric.abs().max(half.abs()) {
                        return Ok(Outcome::Kink);
                    }
                    Ok(Outcome::Fail { rel, abs, numeric })
                })();
                (coord, res)
            })
            .collect();

        let mut check = InputCheck {
            name: format!("input{which}"),
            shape: t.shape().to_vec(),
            checked: 0,
            skipped_kinks: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            non_finite: Vec::new(),
            failures: Vec::new(),
        };
        for (coord, res) in outcomes {
            match res? {
                Outcome::Ok { rel, abs } => {
                    check.checked += 1;
                    check.max_rel_error = check.max_rel_error.max(rel);
                    check.max_abs_error = check.max_abs_error.max(abs);
                }
                Outcome::Kink => check.skipped_kinks += 1,
                Outcome::NonFinite => {
                    check.checked += 1;
                    check.non_finite.push(coord);
                }
                Outcome::Fail { rel, abs, numeric } => {
                    check.checked += 1;
                    check.max_rel_error = check.max_rel_error.max(rel);
                    check.max_abs_error = check.max_abs_error.max(abs);
                    check.failures.push(CoordFailure {
                        coord,
                        analytic: analytic[which][coord],
                        numeric,
                    });
                }
            }
        }
        report.passed &= check.passed();
        report.inputs.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_has_zero_error() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0);
        let cfg = GradCheckConfig {
            eps: 1.0 / 1024.0,
            ..Default::default()
        };
        let report = grad_check(|_, v| Ok(v[0].sum()), &[x], &cfg).unwrap();
        assert!(report.passed);
        assert_eq!(report.max_rel_error(), 0.0);
        assert_eq!(report.max_abs_error(), 0.0);
        assert_eq!(report.checked(), 6);
    }

    #[test]
    fn wrong_adjoint_is_caught() {
        // Forward computes 3x, adjoint claims 2x.
        let f = |tape: &Tape, v: &[Var]| -> Result<Var> {
            let x = &v[0];
            let value = x.value().map(|a| 3.0 * a);
            let y = tape.record("bogus", &[x], value, |g, _| {
                vec![Some(g.iter().map(|v| 2.0 * v).collect())]
            });
            Ok(y.sum())
        };
        let report = grad_check(f, &[Tensor::full(&[3], 0.5)], &GradCheckConfig::default()).unwrap();
        assert!(!report.passed);
        assert_eq!(report.inputs[0].failures.len(), 3);
    }

    #[test]
    fn non_finite_differences_are_reported() {
        // 1/x evaluated at a pole.
        let f = |tape: &Tape, v: &[Var]| -> Result<Var> {
            let x = &v[0];
            let value = x.value().map(|a| 1.0 / a);
            let xv = x.value().clone();
            let y = tape.record("recip", &[x], value, move |g, _| {
                vec![Some(g.iter().zip(xv.data()).map(|(g, a)| -g / (a * a)).collect())]
            });
            Ok(y.sum())
        };
        let cfg = GradCheckConfig {
            eps: 0.5,
            ..Default::default()
        };
        let report = grad_check(f, &[Tensor::new(&[2], vec![0.5, 2.0]).unwrap()], &cfg).unwrap();
        assert!(!report.passed);
        assert_eq!(report.inputs[0].non_finite, vec![0]);
    }

    #[test]
    fn relu_kink_is_skipped_not_failed() {
        let x = Tensor::new(&[3], vec![1e-7, 0.5, -0.3]).unwrap();
        let report = grad_check(|_, v| Ok(v[0].relu().sum()), &[x], &GradCheckConfig::default()).unwrap();
        assert!(report.passed, "{}", report.summary());
        assert_eq!(report.inputs[0].skipped_kinks, 1);
    }

    #[test]
    fn subset_selection_respects_limit() {
        let x = Tensor::from_fn(&[50], |i| (i as f64 * 0.37).sin());
        let cfg = GradCheckConfig {
            max_coords_per_input: Some(10),
            ..Default::default()
        };
        let report = grad_check(|_, v| Ok(v[0].mul(&v[0])?.sum()), &[x], &cfg).unwrap();
        assert!(report.passed);
        assert_eq!(report.checked(), 10);
    }
}
