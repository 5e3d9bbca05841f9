use crate::autodiff::{Pad2d, PadMode, Var};
use crate::error::{Error, Result};

/// Weights of a square-kernel convolution. Spatial padding keeps the size at
/// stride 1: circular across the horizontal (longitude) seam, zero at the
/// poles.
#[derive(Debug, Clone)]
pub struct Conv2dParams {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
}

impl Conv2dParams {
    pub fn new(weight: Var, bias: Option<Var>) -> Self {
        Conv2dParams {
            weight,
            bias,
            stride: 1,
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }
}

fn same_padding(x: &Var, k: usize) -> Result<Var> {
    if k % 2 == 0 {
        return Err(Error::invalid(format!("kernel size {k} must be odd")));
    }
    let p = k / 2;
    if p == 0 {
        return Ok(x.clone());
    }
    let (_, _, _, w) = x.value().dims4()?;
    if w % 2 != 0 {
        return Err(Error::invalid(format!("circular padding needs an even width, got {w}")));
    }
    x.pad2d(Pad2d::wrap(p, PadMode::Zero))
}

pub fn conv2d(x: &Var, p: &Conv2dParams) -> Result<Var> {
    let w = p.weight.shape();
    if w.len() != 4 || w[2] != w[3] {
        return Err(Error::invalid(format!("conv weight must be [Cout,Cin,k,k], got {w:?}")));
    }
    let padded = same_padding(x, w[2])?;
    padded.conv2d_valid(&p.weight, p.bias.as_ref(), p.stride, 1)
}

/// Convolution with explicit padding, used where the standard equirect
/// padding does not apply.
pub fn conv2d_padded(
    x: &Var,
    weight: &Var,
    bias: Option<&Var>,
    pad: Pad2d,
    stride: usize,
    groups: usize,
) -> Result<Var> {
    x.pad2d(pad)?.conv2d_valid(weight, bias, stride, groups)
}

/// Depthwise `k x k` filter per channel followed by a pointwise `1 x 1` mix.
pub fn separable_conv2d(x: &Var, depthwise: &Var, pointwise: &Var, bias: Option<&Var>) -> Result<Var> {
    let (_, c, _, _) = x.value().dims4()?;
    let dw = depthwise.shape();
    if dw.len() != 4 || dw[0] != c || dw[1] != 1 || dw[2] != dw[3] {
        return Err(Error::shape("separable_conv2d depthwise", x.shape(), dw));
    }
    let padded = same_padding(x, dw[2])?;
    let spatial = padded.conv2d_valid(depthwise, None, 1, c)?;
    spatial.conv2d_valid(pointwise, bias, 1, 1)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{Precision, PrecisionGuard, Tape, Tensor};

    /// Direct six-loop reference with circular columns and zero rows.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64]) -> Vec<f64> {
        let (bn, cin, h, wd) = x.dims4().unwrap();
        let (cout, _, k, _) = w.dims4().unwrap();
        let r = (k / 2) as isize;
        let mut out = vec![0.0; bn * cout * h * wd];
        for n in 0..bn {
            for co in 0..cout {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize - r;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    let sx = (xx as isize + kx as isize - r).rem_euclid(wd as isize) as usize;
                                    acc += w.data()[((co * cin + ci) * k + ky) * k + kx]
                                        * x.data()[((n * cin + ci) * h + sy as usize) * wd + sx];
                                }
                            }
                        }
                        out[((n * cout + co) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = tape.constant(Tensor::uniform(&[2, 1, 4, 6], -1.0, 1.0, &mut rng));
        let p = Conv2dParams::new(
            tape.param(Tensor::full(&[1, 1, 1, 1], 1.0)),
            Some(tape.param(Tensor::zeros(&[1]))),
        );
        assert_eq!(conv2d(&x, &p).unwrap().data(), x.data());
    }

    #[test]
    fn ones_kernel_wraps_horizontally() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 4, 8], 1.0));
        let p = Conv2dParams::new(tape.param(Tensor::full(&[1, 1, 3, 3], 1.0)), None);
        let y = conv2d(&x, &p).unwrap();
        for row in 1..3 {
            for col in 0..8 {
                assert_eq!(y.data()[row * 8 + col], 9.0, "row {row} col {col}");
            }
        }
        // Top and bottom rows see one zero-padded row.
        assert_eq!(y.data()[0], 6.0);
        assert_eq!(y.data()[3 * 8 + 7], 6.0);
    }

    #[test]
    fn matches_naive_loops() {
        let _p = PrecisionGuard::new(Precision::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let xt = Tensor::uniform(&[1, 2, 6, 12], -1.0, 1.0, &mut rng);
        let wt = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let bt = Tensor::uniform(&[3], -1.0, 1.0, &mut rng);
        let p = Conv2dParams::new(tape.param(wt.clone()), Some(tape.param(bt.clone())));
        let y = conv2d(&tape.constant(xt.clone()), &p).unwrap();
        let expect = naive_conv(&xt, &wt, bt.data());
        for (a, b) in y.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_even_kernel_and_odd_width() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 4, 8]));
        let even = Conv2dParams::new(tape.param(Tensor::zeros(&[1, 1, 2, 2])), None);
        assert!(conv2d(&x, &even).is_err());
        let odd_w = tape.constant(Tensor::zeros(&[1, 1, 4, 7]));
        let k3 = Conv2dParams::new(tape.param(Tensor::zeros(&[1, 1, 3, 3])), None);
        assert!(conv2d(&odd_w, &k3).is_err());
        let wrong_c = tape.constant(Tensor::zeros(&[1, 2, 4, 8]));
        assert!(conv2d(&wrong_c, &k3).is_err());
    }

    #[test]
    fn separable_identity_and_decomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[1, 3, 4, 8], -1.0, 1.0, &mut rng));
        let mut center = vec![0.0; 3 * 9];
        for c in 0..3 {
            center[c * 9 + 4] = 1.0;
        }
        let dw = tape.param(Tensor::new(&[3, 1, 3, 3], center).unwrap());
        let pw = tape.param(Tensor::from_fn(&[3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        assert_eq!(separable_conv2d(&x, &dw, &pw, None).unwrap().data(), x.data());

        let dw = tape.param(Tensor::uniform(&[3, 1, 3, 3], -1.0, 1.0, &mut rng));
        let pw = tape.param(Tensor::uniform(&[5, 3, 1, 1], -1.0, 1.0, &mut rng));
        let b = tape.param(Tensor::uniform(&[5], -1.0, 1.0, &mut rng));
        let fused = separable_conv2d(&x, &dw, &pw, Some(&b)).unwrap();
        let padded = x.pad2d(Pad2d::wrap(1, PadMode::Zero)).unwrap();
        let step1 = padded.conv2d_valid(&dw, None, 1, 3).unwrap();
        let step2 = step1.conv2d_valid(&pw, Some(&b), 1, 1).unwrap();
        assert_eq!(fused.data(), step2.data());
    }

    #[test]
    fn separable_parameter_ratio() {
        let (c, cout, k) = (64usize, 64usize, 3usize);
        let separable = c * k * k + c * cout;
        let full = k * k * c * cout;
        let ratio = separable as f64 / full as f64;
        assert!((ratio - 0.127).abs() < 5e-4, "{ratio}");
    }

    #[test]
    fn commutes_with_column_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tape = Tape::new();
        let xt = Tensor::uniform(&[1, 2, 6, 16], -1.0, 1.0, &mut rng);
        let p = Conv2dParams::new(
            tape.param(Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng)),
            Some(tape.param(Tensor::uniform(&[3], -1.0, 1.0, &mut rng))),
        );
        let base = conv2d(&tape.constant(xt.clone()), &p).unwrap();
        for k in [1, 5, 15] {
            let shifted = conv2d(&tape.constant(xt.roll_last(k)), &p).unwrap();
            assert!(shifted.value().max_abs_diff(&base.value().roll_last(k)) < 1e-6);
        }
    }
}
