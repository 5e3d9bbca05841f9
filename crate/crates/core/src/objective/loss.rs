use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

/// Fraction of the largest masked residual used as the berHu knee.
pub const BERHU_KNEE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BerhuThreshold {
    /// `c = fraction * max |r|`, recomputed per call (differentiable through
    /// the arg-max residual).
    Adaptive(f64),
    Fixed(f64),
}

impl Default for BerhuThreshold {
    fn default() -> Self {
        BerhuThreshold::Adaptive(BERHU_KNEE)
    }
}

/// Per-residual reverse Huber penalty for a given knee `c > 0`.
pub fn berhu_penalty(r: f64, c: f64) -> f64 {
    let a = r.abs();
    if a <= c {
        a
    } else {
        (r * r + c * c) / (2.0 * c)
    }
}

fn check_mask(pred: &Var, gt: &Tensor, mask: &[bool], op: &'static str) -> Result<usize> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(op, pred.shape(), gt.shape()));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::invalid(format!("{op}: empty mask")));
    }
    Ok(count)
}

pub fn berhu(pred01: &Var, gt01: &Tensor, mask: &[bool]) -> Result<Var> {
    berhu_with(pred01, gt01, mask, BerhuThreshold::default())
}

/// Masked mean of the berHu penalty of `pred - gt`. `mask` has one entry per
/// element of `pred`.
pub fn berhu_with(pred01: &Var, gt01: &Tensor, mask: &[bool], threshold: BerhuThreshold) -> Result<Var> {
    if mask.len() != pred01.value().numel() {
        return Err(Error::shape("berhu mask", &[mask.len()], pred01.shape()));
    }
    let count = check_mask(pred01, gt01, mask, "berhu")? as f64;
    let residual: Vec<f64> = pred01
        .data()
        .iter()
        .zip(gt01.data())
        .zip(mask)
        .map(|((p, g), &m)| if m { p - g } else { 0.0 })
        .collect();
    // First arg-max over masked residuals.
    let (argmax, max_abs) =
        residual
            .iter()
            .enumerate()
            .filter(|(i, _)| mask[*i])
            .fold(
                (0usize, -1.0f64),
                |(bi, bv), (i, r)| if r.abs() > bv { (i, r.abs()) } else { (bi, bv) },
            );
    let (c, adaptive) = match threshold {
        BerhuThreshold::Adaptive(frac) => (frac * max_abs, Some(frac)),
        BerhuThreshold::Fixed(c) if c > 0.0 => (c, None),
        BerhuThreshold::Fixed(c) => return Err(Error::invalid(format!("berhu threshold {c} must be positive"))),
    };
    if c == 0.0 {
        let n = residual.len();
        return Ok(pred01
            .tape()
            .record("berhu", &[pred01], Tensor::scalar(0.0), move |_, _| {
                vec![Some(vec![0.0; n])]
            }));
    }
    let total: f64 = residual
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&r, _)| berhu_penalty(r, c))
        .sum();
    let mask = mask.to_vec();
    Ok(pred01
        .tape()
        .record("berhu", &[pred01], Tensor::scalar(total / count), move |g, _| {
            let scale = g[0] / count;
            let mut grad = vec![0.0; residual.len()];
            let mut d_c = 0.0;
            for (i, &r) in residual.iter().enumerate() {
                if !mask[i] {
                    continue;
                }
                if r.abs() <= c {
                    grad[i] = if r > 0.0 {
                        scale
                    } else if r < 0.0 {
                        -scale
                    } else {
                        0.0
                    };
                } else {
                    grad[i] = scale * r / c;
                    d_c += scale * (0.5 - r * r / (2.0 * c * c));
                }
            }
            if let Some(frac) = adaptive {
                grad[argmax] += d_c * frac * residual[argmax].signum();
            }
            vec![Some(grad)]
        }))
}

/// Mean absolute difference over the valid pixels of a `[B, 3, H, W]` map;
/// `valid` has one entry per pixel (`B * H * W`).
pub fn l1_normal(pred01: &Var, gt01: &Tensor, valid: &[bool]) -> Result<Var> {
    let (b, c, h, w) = pred01.value().dims4()?;
    if valid.len() != b * h * w {
        return Err(Error::shape("l1_normal mask", &[valid.len()], &[b, h, w]));
    }
    let count = check_mask(pred01, gt01, valid, "l1_normal")?;
    let hw = h * w;
    let mask = Tensor::from_fn(pred01.shape(), |i| {
        let (bi, rest) = (i / (c * hw), i % hw);
        if valid[bi * hw + rest] {
            1.0
        } else {
            0.0
        }
    });
    let tape = pred01.tape();
    let diff = pred01.sub(&tape.constant(gt01.clone()))?.abs();
    Ok(diff.mul(&tape.constant(mask))?.sum().scale(1.0 / (c * count) as f64))
}

/// Encoded supervision for one batch.
#[derive(Debug, Clone)]
pub struct Targets {
    /// `[B, 1, H, W]`, depth divided by the dataset's maximum depth.
    pub depth01: Tensor,
    /// `[B, 3, H, W]`, `(n + 1) / 2` on valid pixels.
    pub normal01: Tensor,
    /// Per pixel; depth is supervised wherever this is set.
    pub depth_mask: Vec<bool>,
    pub normal_valid: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Var,
    pub depth: Var,
    pub normal: Var,
}

/// Unweighted sum of the depth and normal objectives.
pub fn total_loss(depth01: &Var, normal01: &Var, targets: &Targets) -> Result<LossTerms> {
    let depth = berhu(depth01, &targets.depth01, &targets.depth_mask)?;
    let normal = l1_normal(normal01, &targets.normal01, &targets.normal_valid)?;
    let total = depth.add(&normal)?;
    Ok(LossTerms { total, depth, normal })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{grad_check, GradCheckConfig, Precision, PrecisionGuard, Tape};

    #[test]
    fn zero_residual_gives_zero() {
        let tape = Tape::new();
        let gt = Tensor::from_fn(&[1, 1, 2, 2], |i| 0.1 * i as f64);
        let p = tape.param(gt.clone());
        let l = berhu(&p, &gt, &[true; 4]).unwrap();
        assert_eq!(l.item().unwrap(), 0.0);
    }

    #[test]
    fn two_residual_worked_example() {
        let _g = PrecisionGuard::new(Precision::F64);
        let tape = Tape::new();
        let gt = Tensor::new(&[2], vec![0.0, 0.0]).unwrap();
        let p = tape.param(Tensor::new(&[2], vec![0.1, 1.0]).unwrap());
        let l = berhu(&p, &gt, &[true, true]).unwrap().item().unwrap();
        assert!((l - 1.35).abs() < 1e-12, "{l}");
    }

    #[test]
    fn linear_branch_equals_masked_l1() {
        let _g = PrecisionGuard::new(Precision::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let gt = Tensor::uniform(&[1, 1, 4, 4], 0.0, 1.0, &mut rng);
        let p = Tensor::uniform(&[1, 1, 4, 4], 0.0, 1.0, &mut rng);
        let mask: Vec<bool> = (0..16).map(|i| i % 3 != 0).collect();
        let l = berhu_with(&tape.param(p.clone()), &gt, &mask, BerhuThreshold::Fixed(2.0)).unwrap();
        let l1: f64 = p
            .data()
            .iter()
            .zip(gt.data())
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|((a, b), _)| (a - b).abs())
            .sum::<f64>()
            / mask.iter().filter(|&&m| m).count() as f64;
        assert_eq!(l.item().unwrap(), l1);
    }

    #[test]
    fn continuous_at_knee() {
        for c in [0.01, 0.2, 3.0] {
            assert!((berhu_penalty(c, c) - c).abs() < 1e-9);
            assert!((berhu_penalty(c + 1e-12, c) - c).abs() < 1e-9);
            assert!((berhu_penalty(-c, c) - c).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_mask_rejected() {
        let tape = Tape::new();
        let gt = Tensor::zeros(&[1, 1, 2, 2]);
        let p = tape.param(gt.clone());
        assert!(berhu(&p, &gt, &[false; 4]).is_err());
        let gt3 = Tensor::zeros(&[1, 3, 2, 2]);
        let p3 = tape.param(gt3.clone());
        assert!(l1_normal(&p3, &gt3, &[false; 4]).is_err());
    }

    #[test]
    fn berhu_gradcheck_on_random_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = Tensor::uniform(&[1, 1, 2, 2], 0.0, 1.0, &mut rng);
        let pred = Tensor::uniform(&[1, 1, 2, 2], 0.0, 1.0, &mut rng);
        let cfg = GradCheckConfig {
            eps: 1e-3,
            ..Default::default()
        };
        let report = grad_check(move |_, v| berhu(&v[0], &gt, &[true; 4]), &[pred], &cfg).unwrap();
        assert!(report.passed, "{}", report.summary());
        assert_eq!(report.skipped(), 0);
    }

    #[test]
    fn l1_normal_offset_and_loop_oracle() {
        let _g = PrecisionGuard::new(Precision::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let gt = Tensor::uniform(&[2, 3, 3, 4], 0.0, 0.8, &mut rng);
        let valid: Vec<bool> = (0..24).map(|i| i % 5 != 1).collect();
        let shifted = tape.param(gt.map(|v| v + 0.1));
        let l = l1_normal(&shifted, &gt, &valid).unwrap().item().unwrap();
        assert!((l - 0.1).abs() < 1e-12);

        let pred = Tensor::uniform(&[2, 3, 3, 4], 0.0, 1.0, &mut rng);
        let l = l1_normal(&tape.param(pred.clone()), &gt, &valid)
            .unwrap()
            .item()
            .unwrap();
        let mut acc = 0.0;
        let mut n = 0;
        for b in 0..2 {
            for px in 0..12 {
                if !valid[b * 12 + px] {
                    continue;
                }
                n += 1;
                for c in 0..3 {
                    let i = (b * 3 + c) * 12 + px;
                    acc += (pred.data()[i] - gt.data()[i]).abs();
                }
            }
        }
        assert!((l - acc / (3 * n) as f64).abs() < 1e-9);
    }

    #[test]
    fn total_is_sum_of_terms() {
        let _g = PrecisionGuard::new(Precision::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tape = Tape::new();
        let targets = Targets {
            depth01: Tensor::uniform(&[1, 1, 2, 4], 0.0, 1.0, &mut rng),
            normal01: Tensor::uniform(&[1, 3, 2, 4], 0.0, 1.0, &mut rng),
            depth_mask: vec![true; 8],
            normal_valid: vec![true, false, true, true, true, true, false, true],
        };
        let d = tape.param(Tensor::uniform(&[1, 1, 2, 4], 0.0, 1.0, &mut rng));
        let n = tape.param(Tensor::uniform(&[1, 3, 2, 4], 0.0, 1.0, &mut rng));
        let terms = total_loss(&d, &n, &targets).unwrap();
        let separate = berhu(&d, &targets.depth01, &targets.depth_mask)
            .unwrap()
            .item()
            .unwrap()
            + l1_normal(&n, &targets.normal01, &targets.normal_valid)
                .unwrap()
                .item()
                .unwrap();
        assert_eq!(terms.total.item().unwrap(), separate);

        let zero = total_loss(
            &tape.param(targets.depth01.clone()),
            &tape.param(targets.normal01.clone()),
            &targets,
        )
        .unwrap();
        assert_eq!(zero.total.item().unwrap(), 0.0);
    }
}
