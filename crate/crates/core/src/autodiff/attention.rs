//! Fused scaled dot-product attention with an optional 2-D relative bias.

use rayon::prelude::*;

use super::tape::Var;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Per-query logits over relative offsets of a `hb x wb` token grid.
/// `height` is `[B, n, 2hb-1]`, `width` is `[B, n, 2wb-1]`; query `(i, j)`
/// and key `(i', j')` receive `height[.., i'-i+hb-1] + width[.., j'-j+wb-1]`.
#[derive(Debug, Clone, Copy)]
pub struct RelativeBias<'a> {
    pub height: &'a Var,
    pub width: &'a Var,
    pub hb: usize,
    pub wb: usize,
}

struct Layout {
    bh: usize,
    n: usize,
    d: usize,
    /// `(hb, wb)` when a relative bias is present.
    grid: Option<(usize, usize)>,
    scale: f64,
}

impl Layout {
    fn lh(&self) -> usize {
        self.grid.map_or(0, |(hb, _)| 2 * hb - 1)
    }

    fn lw(&self) -> usize {
        self.grid.map_or(0, |(_, wb)| 2 * wb - 1)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Attention rows and the transposed output `[n, d]` of one batch entry.
fn forward_one(
    l: &Layout,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    rh: &[f64],
    rw: &[f64],
    attn: &mut [f64],
    out_t: &mut [f64],
) {
    let (n, d) = (l.n, l.d);
    for i in 0..n {
        let row = &mut attn[i * n..(i + 1) * n];
        for e in 0..d {
            let qe = q[i * d + e];
            for (r, kv) in row.iter_mut().zip(&k[e * n..(e + 1) * n]) {
                *r += qe * kv;
            }
        }
        if let Some((hb, wb)) = l.grid {
            let (qi, qj) = (i / wb, i % wb);
            let th = &rh[i * l.lh()..(i + 1) * l.lh()];
            let tw = &rw[i * l.lw() + wb - 1 - qj..];
            for ki in 0..hb {
                let hv = th[ki + hb - 1 - qi];
                for (r, wv) in row[ki * wb..(ki + 1) * wb].iter_mut().zip(&tw[..wb]) {
                    *r += hv + wv;
                }
            }
        }
        for r in row.iter_mut() {
            *r *= l.scale;
        }
        softmax_in_place(row);
        for e in 0..d {
            out_t[i * d + e] = row.iter().zip(&v[e * n..(e + 1) * n]).map(|(a, b)| a * b).sum();
        }
    }
}

struct Grads {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    rh: Vec<f64>,
    rw: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn backward_one(l: &Layout, g: &[f64], q: &[f64], k: &[f64], v: &[f64], attn: &[f64]) -> Grads {
    let (n, d) = (l.n, l.d);
    let mut out = Grads {
        q: vec![0.0; n * d],
        k: vec![0.0; d * n],
        v: vec![0.0; d * n],
        rh: vec![0.0; n * l.lh()],
        rw: vec![0.0; n * l.lw()],
    };
    let mut ds = vec![0.0; n];
    for i in 0..n {
        let a = &attn[i * n..(i + 1) * n];
        ds.fill(0.0);
        for e in 0..d {
            let ge = g[e * n + i];
            for ((s, vv), (dv, av)) in ds
                .iter_mut()
                .zip(&v[e * n..(e + 1) * n])
                .zip(out.v[e * n..(e + 1) * n].iter_mut().zip(a))
            {
                *s += ge * vv;
                *dv += av * ge;
            }
        }
        let dot: f64 = a.iter().zip(&ds).map(|(x, y)| x * y).sum();
        for (s, av) in ds.iter_mut().zip(a) {
            *s = l.scale * av * (*s - dot);
        }
        for e in 0..d {
            let qe = q[i * d + e];
            let krow = &k[e * n..(e + 1) * n];
            out.q[i * d + e] = ds.iter().zip(krow).map(|(x, y)| x * y).sum();
            for (dk, s) in out.k[e * n..(e + 1) * n].iter_mut().zip(&ds) {
                *dk += s * qe;
            }
        }
        if let Some((hb, wb)) = l.grid {
            let (qi, qj) = (i / wb, i % wb);
            let (lh, lw) = (l.lh(), l.lw());
            for ki in 0..hb {
                let seg = &ds[ki * wb..(ki + 1) * wb];
                out.rh[i * lh + ki + hb - 1 - qi] += seg.iter().sum::<f64>();
                for (dw, s) in out.rw[i * lw + wb - 1 - qj..i * lw + 2 * wb - 1 - qj]
                    .iter_mut()
                    .zip(seg)
                {
                    *dw += s;
                }
            }
        }
    }
    out
}

impl Var {
    /// `softmax(scale · (Qᵀ K + bias)) ` applied to the values. `self` holds
    /// queries `[B, n, d]`; `keys` and `values` are `[B, d, n]`. Returns the
    /// output `[B, d, n]` and the attention weights `[B, n, n]` (rows index
    /// queries).
    pub fn attention(
        &self,
        keys: &Var,
        values: &Var,
        bias: Option<RelativeBias<'_>>,
        scale: f64,
    ) -> Result<(Var, Tensor)> {
        self.check_same_tape(keys)?;
        self.check_same_tape(values)?;
        let (bh, n, d) = match self.shape() {
            [b, n, d] => (*b, *n, *d),
            s => return Err(Error::shape("attention queries", s, &[0, 0, 0])),
        };
        for t in [keys, values] {
            if t.shape() != [bh, d, n] {
                return Err(Error::shape("attention keys/values", t.shape(), &[bh, d, n]));
            }
        }
        let layout = Layout {
            bh,
            n,
            d,
            grid: bias.map(|b| (b.hb, b.wb)),
            scale,
        };
        if let Some(b) = bias {
            b.height.check_same_tape(self)?;
            b.width.check_same_tape(self)?;
            if b.hb * b.wb != n || b.hb == 0 {
                return Err(Error::invalid(format!(
                    "attention grid {}x{} does not hold {n} tokens",
                    b.hb, b.wb
                )));
            }
            if b.height.shape() != [bh, n, layout.lh()] || b.width.shape() != [bh, n, layout.lw()] {
                return Err(Error::shape(
                    "attention relative bias",
                    b.height.shape(),
                    b.width.shape(),
                ));
            }
        }
        let (qv, kv, vv) = (self.value().clone(), keys.value().clone(), values.value().clone());
        let (rh, rw) = match bias {
            Some(b) => (b.height.value().clone(), b.width.value().clone()),
            None => (Tensor::zeros(&[0]), Tensor::zeros(&[0])),
        };
        let (lh, lw) = (layout.lh(), layout.lw());
        let mut attn = vec![0.0; bh * n * n];
        let mut out_t = vec![0.0; bh * n * d];
        attn.par_chunks_mut(n * n)
            .zip(out_t.par_chunks_mut(n * d))
            .enumerate()
            .for_each(|(b, (a, o))| {
                let (brh, brw) = if layout.grid.is_some() {
                    (
                        &rh.data()[b * n * lh..(b + 1) * n * lh],
                        &rw.data()[b * n * lw..(b + 1) * n * lw],
                    )
                } else {
                    (&[][..], &[][..])
                };
                forward_one(
                    &layout,
                    &qv.data()[b * n * d..(b + 1) * n * d],
                    &kv.data()[b * d * n..(b + 1) * d * n],
                    &vv.data()[b * d * n..(b + 1) * d * n],
                    brh,
                    brw,
                    a,
                    o,
                );
            });
        let mut out = vec![0.0; bh * d * n];
        for b in 0..bh {
            for i in 0..n {
                for e in 0..d {
                    out[(b * d + e) * n + i] = out_t[(b * n + i) * d + e];
                }
            }
        }
        let attn = Tensor::from_parts(vec![bh, n, n], attn);
        let value = Tensor::from_parts(vec![bh, d, n], out);
        let saved = attn.clone();
        let mut inputs = vec![self, keys, values];
        if let Some(b) = bias {
            inputs.push(b.height);
            inputs.push(b.width);
        }
        let var = self.tape().record("attention", &inputs, value, move |g, need| {
            let parts: Vec<Grads> = (0..layout.bh)
                .into_par_iter()
                .map(|b| {
                    backward_one(
                        &layout,
                        &g[b * d * n..(b + 1) * d * n],
                        &qv.data()[b * n * d..(b + 1) * n * d],
                        &kv.data()[b * d * n..(b + 1) * d * n],
                        &vv.data()[b * d * n..(b + 1) * d * n],
                        &saved.data()[b * n * n..(b + 1) * n * n],
                    )
                })
                .collect();
            let gather =
                |f: fn(&Grads) -> &Vec<f64>| parts.iter().flat_map(|p| f(p).iter().copied()).collect::<Vec<f64>>();
            let mut res = vec![
                need[0].then(|| gather(|p| &p.q)),
                need[1].then(|| gather(|p| &p.k)),
                need[2].then(|| gather(|p| &p.v)),
            ];
            if layout.grid.is_some() {
                res.push(need[3].then(|| gather(|p| &p.rh)));
                res.push(need[4].then(|| gather(|p| &p.rw)));
            }
            res
        });
        Ok((var, attn))
    }
}
