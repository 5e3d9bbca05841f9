//! Multi-head self-attention over the positions of a small feature map.
//!
//! Positions of an `Hb x Wb` map are flattened row-major into `n = Hb * Wb`
//! tokens. With relative encoding the logit between query `(i, j)` and key
//! `(i', j')` is
//!
//! ```text
//! ( q·k + q·(Rh[i' - i + Hb - 1] + Rw[j' - j + Wb - 1]) ) / sqrt(d_head)
//! ```
//!
//! where `Rh`, `Rw` are learned tables shared by all heads.

use crate::autodiff::{RelativeBias, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum PositionEncoding {
    /// `Rh: [2Hb-1, d_head]`, `Rw: [2Wb-1, d_head]`.
    Relative { height: Var, width: Var },
    /// Learned `[C, Hb, Wb]` embedding added to the keys.
    Absolute { embedding: Var },
}

#[derive(Debug, Clone)]
pub struct MhsaParams {
    /// Query, key, value and output projections, each `[C, C, 1, 1]`.
    /// Head `h` owns channels `h*d_head .. (h+1)*d_head` of each projection.
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub output: Var,
    pub heads: usize,
    pub position: PositionEncoding,
}

impl MhsaParams {
    pub fn channels(&self) -> usize {
        self.query.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.heads
    }
}

/// `index[q * n + k]` = row of the relative table used by query token `q`
/// attending to key token `k` along one axis.
pub fn relative_index(hb: usize, wb: usize) -> (Vec<usize>, Vec<usize>) {
    let n = hb * wb;
    let mut rows = Vec::with_capacity(n * n);
    let mut cols = Vec::with_capacity(n * n);
    for q in 0..n {
        let (qi, qj) = (q / wb, q % wb);
        for k in 0..n {
            let (ki, kj) = (k / wb, k % wb);
            rows.push(ki + hb - 1 - qi);
            cols.push(kj + wb - 1 - qj);
        }
    }
    (rows, cols)
}

pub fn mhsa2d(x: &Var, p: &MhsaParams) -> Result<Var> {
    Ok(mhsa2d_with_attention(x, p)?.0)
}

/// Returns the block output and the attention weights `[B*heads, n, n]`
/// (rows index queries).
pub fn mhsa2d_with_attention(x: &Var, p: &MhsaParams) -> Result<(Var, Tensor)> {
    let (b, c, hb, wb) = x.value().dims4()?;
    let n = hb * wb;
    for w in [&p.query, &p.key, &p.value, &p.output] {
        if w.shape() != [c, c, 1, 1] {
            return Err(Error::shape("mhsa2d projection", w.shape(), &[c, c, 1, 1]));
        }
    }
    if p.heads == 0 || c % p.heads != 0 {
        return Err(Error::invalid(format!(
            "mhsa2d: {c} channels cannot be split into {} heads",
            p.heads
        )));
    }
    let d = c / p.heads;
    let bh = b * p.heads;
    let project = |w: &Var| -> Result<Var> { x.conv2d_valid(w, None, 1, 1)?.reshape(&[bh, d, n]) };
    let q = project(&p.query)?;
    let k = project(&p.key)?;
    let v = project(&p.value)?;
    let q_t = q.transpose_last2()?; // [bh, n, d]
    let scale = 1.0 / (d as f64).sqrt();
    let (out, attn) = match &p.position {
        PositionEncoding::Relative { height, width } => {
            if height.shape() != [2 * hb - 1, d] || width.shape() != [2 * wb - 1, d] {
                return Err(Error::shape("mhsa2d relative tables", height.shape(), width.shape()));
            }
            let rel_h = q_t.matmul(&height.transpose_last2()?)?;
            let rel_w = q_t.matmul(&width.transpose_last2()?)?;
            let bias = RelativeBias {
                height: &rel_h,
                width: &rel_w,
                hb,
                wb,
            };
            q_t.attention(&k, &v, Some(bias), scale)?
        }
        PositionEncoding::Absolute { embedding } => {
            if embedding.shape() != [c, hb, wb] {
                return Err(Error::shape(
                    "mhsa2d absolute embedding",
                    embedding.shape(),
                    &[c, hb, wb],
                ));
            }
            let pos = embedding.reshape(&[p.heads, d, n])?;
            let tiled = if b == 1 {
                pos
            } else {
                let copies: Vec<&Var> = std::iter::repeat(&pos).take(b).collect();
                Var::concat(&copies, 0)?
            };
            q_t.attention(&k.add(&tiled)?, &v, None, scale)?
        }
    };
    let merged = out.reshape(&[b, c, hb, wb])?;
    Ok((merged.conv2d_valid(&p.output, None, 1, 1)?, attn))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{Precision, PrecisionGuard, Tape, Tensor};

    fn params(
        tape: &Tape,
        c: usize,
        heads: usize,
        hb: usize,
        wb: usize,
        rng: &mut ChaCha8Rng,
        zero_rel: bool,
    ) -> MhsaParams {
        let d = c / heads;
        let mut w = || tape.param(Tensor::uniform(&[c, c, 1, 1], -1.0, 1.0, rng));
        let (query, key, value, output) = (w(), w(), w(), w());
        let table = |len: usize, rng: &mut ChaCha8Rng| {
            if zero_rel {
                tape.param(Tensor::zeros(&[len, d]))
            } else {
                tape.param(Tensor::uniform(&[len, d], -1.0, 1.0, rng))
            }
        };
        let height = table(2 * hb - 1, rng);
        let width = table(2 * wb - 1, rng);
        MhsaParams {
            query,
            key,
            value,
            output,
            heads,
            position: PositionEncoding::Relative { height, width },
        }
    }

    fn mat(t: &Tensor, c: usize) -> impl Fn(usize, usize) -> f64 + '_ {
        move |o, i| t.data()[o * c + i]
    }

    /// All-pairs reference: explicit loops over every query/key token.
    fn brute_force(x: &Tensor, p: &MhsaParams) -> Vec<f64> {
        let (b, c, hb, wb) = x.dims4().unwrap();
        let n = hb * wb;
        let d = c / p.heads;
        let (wq, wk, wv, wo) = (
            mat(p.query.value(), c),
            mat(p.key.value(), c),
            mat(p.value.value(), c),
            mat(p.output.value(), c),
        );
        let PositionEncoding::Relative { height, width } = &p.position else {
            unreachable!()
        };
        let feat = |bi: usize, ch: usize, t: usize| x.data()[(bi * c + ch) * n + t];
        let mut out = vec![0.0; b * c * n];
        for bi in 0..b {
            let proj = |w: &dyn Fn(usize, usize) -> f64, o: usize, t: usize| {
                (0..c).map(|i| w(o, i) * feat(bi, i, t)).sum::<f64>()
            };
            let mut merged = vec![0.0; c * n];
            for h in 0..p.heads {
                for qt in 0..n {
                    let (qi, qj) = (qt / wb, qt % wb);
                    let q: Vec<f64> = (0..d).map(|e| proj(&wq, h * d + e, qt)).collect();
                    let mut logits = vec![0.0; n];
                    for (kt, l) in logits.iter_mut().enumerate() {
                        let (ki, kj) = (kt / wb, kt % wb);
                        let mut s = 0.0;
                        for e in 0..d {
                            let k = proj(&wk, h * d + e, kt);
                            let rh = height.value().data()[(ki + hb - 1 - qi) * d + e];
                            let rw = width.value().data()[(kj + wb - 1 - qj) * d + e];
                            s += q[e] * (k + rh + rw);
                        }
                        *l = s / (d as f64).sqrt();
                    }
                    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                    for e in 0..d {
                        merged[(h * d + e) * n + qt] = (0..n)
                            .map(|kt| (logits[kt] - mx).exp() / z * proj(&wv, h * d + e, kt))
                            .sum();
                    }
                }
            }
            for o in 0..c {
                for t in 0..n {
                    out[(bi * c + o) * n + t] = (0..c).map(|i| wo(o, i) * merged[i * n + t]).sum();
                }
            }
        }
        out
    }

    #[test]
    fn matches_brute_force_on_2x2() {
        let _p = PrecisionGuard::new(Precision::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let tape = Tape::new();
        let p = params(&tape, 8, 2, 2, 2, &mut rng, false);
        let xt = Tensor::uniform(&[2, 8, 2, 2], -1.0, 1.0, &mut rng);
        let (y, attn) = mhsa2d_with_attention(&tape.constant(xt.clone()), &p).unwrap();
        let expect = brute_force(&xt, &p);
        for (a, b) in y.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        for row in attn.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_token_reduces_to_projections() {
        let _p = PrecisionGuard::new(Precision::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let tape = Tape::new();
        let c = 4;
        let p = params(&tape, c, 2, 1, 1, &mut rng, false);
        let xt = Tensor::uniform(&[1, c, 1, 1], -1.0, 1.0, &mut rng);
        let (y, attn) = mhsa2d_with_attention(&tape.constant(xt.clone()), &p).unwrap();
        assert!(attn.data().iter().all(|&a| (a - 1.0).abs() < 1e-15));
        let wv = mat(p.value.value(), c);
        let wo = mat(p.output.value(), c);
        let vx: Vec<f64> = (0..c).map(|o| (0..c).map(|i| wv(o, i) * xt.data()[i]).sum()).collect();
        for o in 0..c {
            let expect: f64 = (0..c).map(|i| wo(o, i) * vx[i]).sum();
            assert!((y.data()[o] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_attend_uniformly() {
        let _p = PrecisionGuard::new(Precision::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let tape = Tape::new();
        let (c, hb, wb) = (8, 2, 3);
        let p = params(&tape, c, 4, hb, wb, &mut rng, true);
        let column: Vec<f64> = (0..c).map(|i| (i as f64 * 0.7).sin()).collect();
        let xt = Tensor::from_fn(&[1, c, hb, wb], |i| column[i / (hb * wb)]);
        let (y, attn) = mhsa2d_with_attention(&tape.constant(xt), &p).unwrap();
        let n = hb * wb;
        assert!(attn.data().iter().all(|&a| (a - 1.0 / n as f64).abs() < 1e-12));
        for ch in y.data().chunks(n) {
            assert!(ch.iter().all(|&v| (v - ch[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn relative_index_centers_on_self() {
        let (rows, cols) = relative_index(2, 3);
        let n = 6;
        for t in 0..n {
            assert_eq!(rows[t * n + t], 1);
            assert_eq!(cols[t * n + t], 2);
        }
        assert!(rows.iter().all(|&r| r < 3));
        assert!(cols.iter().all(|&r| r < 5));
    }

    #[test]
    fn head_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let tape = Tape::new();
        let mut p = params(&tape, 8, 2, 2, 2, &mut rng, true);
        p.heads = 3;
        let x = tape.constant(Tensor::zeros(&[1, 8, 2, 2]));
        assert!(mhsa2d(&x, &p).is_err());
    }

    #[test]
    fn absolute_variant_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let tape = Tape::new();
        let mut p = params(&tape, 8, 2, 2, 4, &mut rng, true);
        p.position = PositionEncoding::Absolute {
            embedding: tape.param(Tensor::uniform(&[8, 2, 4], -0.1, 0.1, &mut rng)),
        };
        let x = tape.constant(Tensor::uniform(&[2, 8, 2, 4], -1.0, 1.0, &mut rng));
        let y = mhsa2d(&x, &p).unwrap();
        assert_eq!(y.shape(), &[2, 8, 2, 4]);
        assert!(y.value().is_finite());
    }
}
