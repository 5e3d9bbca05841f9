use crate::autodiff::{Pad2d, PadMode, Tensor, Var};
use crate::error::{Error, Result};

/// Separable binomial low-pass filter applied per channel at stride 2.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    taps: Vec<f64>,
}

impl Default for BlurKernel {
    fn default() -> Self {
        BlurKernel::binomial(3).expect("size 3 is valid")
    }
}

impl BlurKernel {
    /// Row `size - 1` of Pascal's triangle, e.g. `[1, 2, 1]` for size 3.
    pub fn binomial(size: usize) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::invalid(format!("blur size {size} must be odd")));
        }
        let mut taps = vec![1.0];
        for _ in 1..size {
            let mut next = vec![1.0; taps.len() + 1];
            for i in 1..taps.len() {
                next[i] = taps[i - 1] + taps[i];
            }
            taps = next;
        }
        Ok(BlurKernel { taps })
    }

    pub fn size(&self) -> usize {
        self.taps.len()
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Normalized outer product `taps ⊗ taps / sum²`, row-major.
    pub fn weights_2d(&self) -> Vec<f64> {
        let s: f64 = self.taps.iter().sum();
        let mut w = Vec::with_capacity(self.size() * self.size());
        for a in &self.taps {
            for b in &self.taps {
                w.push(a * b / (s * s));
            }
        }
        w
    }
}

fn require_even(x: &Var, op: &str) -> Result<(usize, usize, usize, usize)> {
    let dims = x.value().dims4()?;
    if dims.2 % 2 != 0 || dims.3 % 2 != 0 {
        return Err(Error::invalid(format!(
            "{op} needs even spatial extents, got {:?}",
            x.shape()
        )));
    }
    Ok(dims)
}

/// 2x2 max at stride 1. The trailing row is replicated and the trailing
/// column wraps around, so the output keeps the input size.
pub fn max_pool_stride1(x: &Var) -> Result<Var> {
    let (_, _, h, w) = x.value().dims4()?;
    let p = x.pad2d(Pad2d {
        top: 0,
        bottom: 1,
        left: 0,
        right: 1,
        vertical: PadMode::Replicate,
        horizontal: PadMode::Circular,
    })?;
    let rows0 = p.slice(2, 0, h)?;
    let rows1 = p.slice(2, 1, h + 1)?;
    let a = rows0.slice(3, 0, w)?.maximum(&rows0.slice(3, 1, w + 1)?)?;
    let b = rows1.slice(3, 0, w)?.maximum(&rows1.slice(3, 1, w + 1)?)?;
    a.maximum(&b)
}

/// Depthwise blur at stride 2 (replicate rows, circular columns).
pub fn blur_downsample(x: &Var, kernel: &BlurKernel) -> Result<Var> {
    let (_, c, _, _) = require_even(x, "blur_downsample")?;
    let k = kernel.size();
    let w2d = kernel.weights_2d();
    let mut weights = Vec::with_capacity(c * k * k);
    for _ in 0..c {
        weights.extend_from_slice(&w2d);
    }
    let weight = x.tape().constant(Tensor::new(&[c, 1, k, k], weights)?);
    let pad = Pad2d {
        top: k / 2,
        bottom: k / 2,
        left: k / 2,
        right: k / 2,
        vertical: PadMode::Replicate,
        horizontal: PadMode::Circular,
    };
    x.pad2d(pad)?.conv2d_valid(&weight, None, 2, c)
}

/// Anti-aliased max pooling: dense 2x2 max followed by a stride-2 blur.
pub fn aa_maxpool(x: &Var) -> Result<Var> {
    aa_maxpool_with(x, &BlurKernel::default())
}

pub fn aa_maxpool_with(x: &Var, kernel: &BlurKernel) -> Result<Var> {
    require_even(x, "aa_maxpool")?;
    blur_downsample(&max_pool_stride1(x)?, kernel)
}

/// Plain 2x2 max pooling at stride 2. Ties go to the first element in
/// row-major window order.
pub fn max_pool2x2(x: &Var) -> Result<Var> {
    let (b, c, h, w) = require_even(x, "max_pool2x2")?;
    let (ho, wo) = (h / 2, w / 2);
    let src = x.data();
    let mut out = vec![0.0; b * c * ho * wo];
    let mut arg = vec![0usize; out.len()];
    for p in 0..b * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = (p * h + 2 * oy + dy) * w + 2 * ox + dx;
                    if src[i] > best {
                        best = src[i];
                        best_i = i;
                    }
                }
                let o = (p * ho + oy) * wo + ox;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    let value = Tensor::new(&[b, c, ho, wo], out)?;
    let n_in = b * c * h * w;
    Ok(x.tape().record("max_pool2x2", &[x], value, move |g, _| {
        let mut gx = vec![0.0; n_in];
        for (gi, &ai) in g.iter().zip(&arg) {
            gx[ai] += gi;
        }
        vec![Some(gx)]
    }))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{Precision, PrecisionGuard, Tape};

    #[test]
    fn blur_coefficients_sum_to_one() {
        for size in [1, 3, 5, 7] {
            let k = BlurKernel::binomial(size).unwrap();
            assert!((k.weights_2d().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        assert_eq!(BlurKernel::default().taps(), &[1.0, 2.0, 1.0]);
        assert!(BlurKernel::binomial(4).is_err());
    }

    #[test]
    fn constant_input_stays_constant() {
        let tape = Tape::new();
        let y = aa_maxpool(&tape.constant(Tensor::full(&[1, 2, 8, 16], 5.0))).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4, 8]);
        assert!(y.data().iter().all(|&v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn odd_extents_rejected() {
        let tape = Tape::new();
        assert!(aa_maxpool(&tape.constant(Tensor::zeros(&[1, 1, 5, 8]))).is_err());
        assert!(max_pool2x2(&tape.constant(Tensor::zeros(&[1, 1, 4, 7]))).is_err());
    }

    /// Two-stage reference on plain arrays: dense max with the trailing
    /// padding convention, then the [1,2,1]^2/16 blur at stride 2.
    fn spike_oracle(x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let at = |y: usize, xx: usize| x[y.min(h - 1) * w + xx % w];
        let mut m = vec![0.0; h * w];
        for y in 0..h {
            for xx in 0..w {
                m[y * w + xx] = at(y, xx).max(at(y, xx + 1)).max(at(y + 1, xx)).max(at(y + 1, xx + 1));
            }
        }
        let taps = [1.0, 2.0, 1.0];
        let mut out = vec![0.0; (h / 2) * (w / 2)];
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let mut acc = 0.0;
                for (i, ty) in taps.iter().enumerate() {
                    for (j, tx) in taps.iter().enumerate() {
                        let sy = (2 * oy + i).saturating_sub(1).min(h - 1);
                        let sx = (2 * ox + j + w - 1) % w;
                        acc += ty * tx / 16.0 * m[sy * w + sx];
                    }
                }
                out[oy * (w / 2) + ox] = acc;
            }
        }
        out
    }

    #[test]
    fn spike_matches_two_stage_oracle() {
        let _p = PrecisionGuard::new(Precision::F64);
        for spike in [0, 5, 10, 15] {
            let mut data = vec![0.0; 16];
            data[spike] = 1.0;
            let tape = Tape::new();
            let x = tape.constant(Tensor::new(&[1, 1, 4, 4], data.clone()).unwrap());
            let y = aa_maxpool(&x).unwrap();
            let expect = spike_oracle(&data, 4, 4);
            for (a, b) in y.data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-15, "spike {spike}: {:?} vs {expect:?}", y.data());
            }
        }
    }

    #[test]
    fn equals_definitional_composition_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[2, 3, 8, 16], -1.0, 1.0, &mut rng));
        let fused = aa_maxpool(&x).unwrap();
        let two_stage = blur_downsample(&max_pool_stride1(&x).unwrap(), &BlurKernel::default()).unwrap();
        assert_eq!(fused.data(), two_stage.data());
    }

    #[test]
    fn more_shift_robust_than_strided_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut wins = 0;
        for _ in 0..100 {
            let tape = Tape::new();
            let raw = Tensor::uniform(&[1, 1, 8, 16], 0.0, 1.0, &mut rng);
            let x = tape.constant(raw.clone());
            let xs = tape.constant(raw.roll_last(1));
            let dist = |a: &Var, b: &Var| {
                a.value()
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(p, q)| (p - q).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            let aa = dist(&aa_maxpool(&xs).unwrap(), &aa_maxpool(&x).unwrap());
            let mp = dist(&max_pool2x2(&xs).unwrap(), &max_pool2x2(&x).unwrap());
            if aa <= mp {
                wins += 1;
            }
        }
        assert_eq!(wins, 100);
    }
}
