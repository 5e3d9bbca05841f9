//! Network blocks: equirectangular-aware convolutions, anti-aliased pooling,
//! upsampling, group normalization and 2-D multi-head self-attention.

mod attention;
mod conv;
mod pool;

pub use crate::model::count_parameters;
pub use attention::{mhsa2d, mhsa2d_with_attention, relative_index, MhsaParams, PositionEncoding};
pub use conv::{conv2d, conv2d_padded, separable_conv2d, Conv2dParams};
pub use pool::{aa_maxpool, aa_maxpool_with, blur_downsample, max_pool2x2, max_pool_stride1, BlurKernel};

use crate::autodiff::Var;
use crate::error::Result;

pub const GROUP_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_GROUPS: usize = 8;

pub fn group_norm(x: &Var, gamma: &Var, beta: &Var, groups: usize) -> Result<Var> {
    x.group_norm(gamma, beta, groups, GROUP_NORM_EPS)
}

pub fn bilinear_upsample2x(x: &Var) -> Result<Var> {
    x.upsample_bilinear2x()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{Precision, PrecisionGuard, Tape, Tensor};

    fn affine(tape: &Tape, c: usize, g: f64, b: f64) -> (Var, Var) {
        (tape.param(Tensor::full(&[c], g)), tape.param(Tensor::full(&[c], b)))
    }

    #[test]
    fn group_norm_constant_input_is_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 8, 3, 4], 7.0));
        let (g, b) = affine(&tape, 8, 1.0, 0.0);
        let y = group_norm(&x, &g, &b, 8).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_norm_statistics_follow_affine() {
        let _p = PrecisionGuard::new(Precision::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[2, 16, 5, 6], -3.0, 5.0, &mut rng));
        let (g, b) = affine(&tape, 16, 2.5, 0.75);
        let y = group_norm(&x, &g, &b, 8).unwrap();
        let n = 2 * 5 * 6;
        for grp in y.data().chunks(n) {
            let mean = grp.iter().sum::<f64>() / n as f64;
            let std = (grp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            assert!((mean - 0.75).abs() < 1e-9);
            assert!((std - 2.5).abs() < 1e-3, "std {std}");
        }
    }

    #[test]
    fn group_norm_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tape = Tape::new();
        let raw = Tensor::uniform(&[1, 8, 4, 4], -3.0, 3.0, &mut rng);
        let x = tape.constant(raw.clone());
        let xa = tape.constant(raw.map(|v| 3.7 * v));
        let (g, b) = affine(&tape, 8, 1.3, 0.0);
        let y1 = group_norm(&x, &g, &b, 8).unwrap();
        let y2 = group_norm(&xa, &g, &b, 8).unwrap();
        assert!(y1.value().max_abs_diff(y2.value()) < 1e-5);
    }

    #[test]
    fn group_norm_rejects_indivisible_channels() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 6, 2, 2]));
        let (g, b) = affine(&tape, 6, 1.0, 0.0);
        assert!(group_norm(&x, &g, &b, 4).is_err());
    }

    #[test]
    fn upsample_matches_per_pixel_oracle() {
        let _p = PrecisionGuard::new(Precision::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::new();
        let (h, w) = (3, 5);
        let raw = Tensor::uniform(&[1, 2, h, w], 0.0, 1.0, &mut rng);
        let y = bilinear_upsample2x(&tape.constant(raw.clone())).unwrap();
        let src = |c: usize, yy: usize, xx: usize| raw.data()[(c * h + yy) * w + xx];
        let coord = |o: usize, n: usize| {
            let s = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = s.floor() as usize;
            (i0.min(n - 1), (i0 + 1).min(n - 1), s - i0 as f64)
        };
        for c in 0..2 {
            for oy in 0..2 * h {
                for ox in 0..2 * w {
                    let (y0, y1, fy) = coord(oy, h);
                    let (x0, x1, fx) = coord(ox, w);
                    let expect = src(c, y0, x0) * (1.0 - fy) * (1.0 - fx)
                        + src(c, y0, x1) * (1.0 - fy) * fx
                        + src(c, y1, x0) * fy * (1.0 - fx)
                        + src(c, y1, x1) * fy * fx;
                    let got = y.data()[(c * 2 * h + oy) * 2 * w + ox];
                    assert!((got - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn upsample_preserves_constants() {
        let tape = Tape::new();
        let y = bilinear_upsample2x(&tape.constant(Tensor::full(&[1, 3, 4, 8], 3.0))).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
    }
}
