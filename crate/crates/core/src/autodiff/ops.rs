//! Differentiable primitives. Every op computes its forward value eagerly and
//! records a closure evaluating its adjoint.

use std::sync::Arc;

use rayon::prelude::*;

use super::tape::Var;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// How a spatial axis is extended past its border.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Zero,
    Circular,
    Replicate,
}

/// Padding of the two trailing axes of a rank-4 tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pad2d {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
    pub vertical: PadMode,
    pub horizontal: PadMode,
}

impl Pad2d {
    /// Equal padding on every side: circular horizontally, the given mode vertically.
    pub fn wrap(pad: usize, vertical: PadMode) -> Self {
        Pad2d {
            top: pad,
            bottom: pad,
            left: pad,
            right: pad,
            vertical,
            horizontal: PadMode::Circular,
        }
    }
}

const PAR_THRESHOLD: usize = 1 << 14;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::invalid(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

fn map_grad(g: &[f64], f: impl Fn(usize, f64) -> f64) -> Vec<f64> {
    g.iter().enumerate().map(|(i, &gi)| f(i, gi)).collect()
}

impl Var {
    fn same_shape(&self, other: &Var, op: &'static str) -> Result<()> {
        self.check_same_tape(other)?;
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    fn zip_values(&self, other: &Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        Tensor::from_parts(self.shape().to_vec(), data)
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.same_shape(other, "add")?;
        let value = self.zip_values(other, |a, b| a + b);
        Ok(self.tape().record("add", &[self, other], value, |g, _| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        }))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.same_shape(other, "sub")?;
        let value = self.zip_values(other, |a, b| a - b);
        Ok(self.tape().record("sub", &[self, other], value, |g, _| {
            vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
        }))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.same_shape(other, "mul")?;
        let value = self.zip_values(other, |a, b| a * b);
        let (a, b) = (self.value().clone(), other.value().clone());
        Ok(self.tape().record("mul", &[self, other], value, move |g, need| {
            vec![
                need[0].then(|| map_grad(g, |i, gi| gi * b.data()[i])),
                need[1].then(|| map_grad(g, |i, gi| gi * a.data()[i])),
            ]
        }))
    }

    pub fn scale(&self, s: f64) -> Var {
        let value = self.value().map(|v| v * s);
        self.tape().record("scale", &[self], value, move |g, _| {
            vec![Some(g.iter().map(|v| v * s).collect())]
        })
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        let value = self.value().map(|v| v + s);
        self.tape()
            .record("add_scalar", &[self], value, |g, _| vec![Some(g.to_vec())])
    }

    pub fn exp(&self) -> Var {
        let value = self.value().map(f64::exp);
        let y = value.clone();
        self.tape().record("exp", &[self], value, move |g, _| {
            vec![Some(map_grad(g, |i, gi| gi * y.data()[i]))]
        })
    }

    /// Natural logarithm; non-positive inputs are rejected rather than
    /// producing infinities.
    pub fn ln(&self) -> Result<Var> {
        if let Some(bad) = self.data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::invalid(format!("ln of non-positive value {bad}")));
        }
        let value = self.value().map(f64::ln);
        let x = self.value().clone();
        Ok(self.tape().record("ln", &[self], value, move |g, _| {
            vec![Some(map_grad(g, |i, gi| gi / x.data()[i]))]
        }))
    }

    pub fn relu(&self) -> Var {
        let value = self.value().map(|v| v.max(0.0));
        let x = self.value().clone();
        self.tape().record("relu", &[self], value, move |g, _| {
            vec![Some(map_grad(g, |i, gi| if x.data()[i] > 0.0 { gi } else { 0.0 }))]
        })
    }

    pub fn sigmoid(&self) -> Var {
        let value = self.value().map(sigmoid);
        let y = value.clone();
        self.tape().record("sigmoid", &[self], value, move |g, _| {
            vec![Some(map_grad(g, |i, gi| {
                let s = y.data()[i];
                gi * s * (1.0 - s)
            }))]
        })
    }

    pub fn abs(&self) -> Var {
        let value = self.value().map(f64::abs);
        let x = self.value().clone();
        self.tape().record("abs", &[self], value, move |g, _| {
            vec![Some(map_grad(g, |i, gi| {
                let v = x.data()[i];
                if v > 0.0 {
                    gi
                } else if v < 0.0 {
                    -gi
                } else {
                    0.0
                }
            }))]
        })
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(&self, other: &Var) -> Result<Var> {
        self.same_shape(other, "maximum")?;
        let value = self.zip_values(other, f64::max);
        let (a, b) = (self.value().clone(), other.value().clone());
        Ok(self.tape().record("maximum", &[self, other], value, move |g, _| {
            let first = |i: usize| a.data()[i] >= b.data()[i];
            vec![
                Some(map_grad(g, |i, gi| if first(i) { gi } else { 0.0 })),
                Some(map_grad(g, |i, gi| if first(i) { 0.0 } else { gi })),
            ]
        }))
    }

    pub fn sum(&self) -> Var {
        let total: f64 = self.data().iter().sum();
        let n = self.value().numel();
        self.tape().record("sum", &[self], Tensor::scalar(total), move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Var {
        let n = self.value().numel();
        let total: f64 = self.data().iter().sum();
        self.tape()
            .record("mean", &[self], Tensor::scalar(total / n as f64), move |g, _| {
                vec![Some(vec![g[0] / n as f64; n])]
            })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let value = self.value().reshape(shape)?;
        Ok(self
            .tape()
            .record("reshape", &[self], value, |g, _| vec![Some(g.to_vec())]))
    }

    /// Sub-range `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var> {
        check_axis(self.shape(), axis, "slice")?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        if start >= end || end > len {
            return Err(Error::invalid(format!(
                "slice {start}..{end} out of range for axis {axis} of {:?}",
                self.shape()
            )));
        }
        let width = end - start;
        let src = self.data();
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&src[base..base + width * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = width;
        let in_numel = self.value().numel();
        Ok(self
            .tape()
            .record("slice", &[self], Tensor::from_parts(shape, out), move |g, _| {
                let mut gx = vec![0.0; in_numel];
                for o in 0..outer {
                    let base = (o * len + start) * inner;
                    let chunk = &g[o * width * inner..(o + 1) * width * inner];
                    gx[base..base + width * inner].copy_from_slice(chunk);
                }
                vec![Some(gx)]
            }))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        check_axis(first.shape(), axis, "concat")?;
        for p in &parts[1..] {
            first.check_same_tape(p)?;
            let ok = p.shape().len() == first.shape().len()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let value = Tensor::from_parts(shape, out);
        Ok(first.tape().record("concat", parts, value, move |g, need| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(&lens) {
                    gp.extend_from_slice(&g[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads.into_iter().zip(need).map(|(gp, &n)| n.then_some(gp)).collect()
        }))
    }

    pub fn concat_channels(parts: &[&Var]) -> Result<Var> {
        Var::concat(parts, 1)
    }

    /// Pads the two spatial axes of a rank-4 tensor.
    pub fn pad2d(&self, pad: Pad2d) -> Result<Var> {
        let (b, c, h, w) = self.value().dims4()?;
        let rows = pad_index(h, pad.top, pad.bottom, pad.vertical)?;
        let cols = pad_index(w, pad.left, pad.right, pad.horizontal)?;
        let (ho, wo) = (rows.len(), cols.len());
        let src = self.data();
        let mut out = vec![0.0; b * c * ho * wo];
        for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(ho * wo)) {
            for (y, ry) in rows.iter().enumerate() {
                let Some(sy) = ry else { continue };
                for (x, rx) in cols.iter().enumerate() {
                    if let Some(sx) = rx {
                        dst[y * wo + x] = plane[sy * w + sx];
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![b, c, ho, wo], out);
        Ok(self.tape().record("pad2d", &[self], value, move |g, _| {
            let mut gx = vec![0.0; b * c * h * w];
            for (gplane, dst) in g.chunks(ho * wo).zip(gx.chunks_mut(h * w)) {
                for (y, ry) in rows.iter().enumerate() {
                    let Some(sy) = ry else { continue };
                    for (x, rx) in cols.iter().enumerate() {
                        if let Some(sx) = rx {
                            dst[sy * w + sx] += gplane[y * wo + x];
                        }
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last2(&self) -> Result<Var> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::invalid("transpose needs rank >= 2"));
        }
        let (m, n) = (self.shape()[r - 2], self.shape()[r - 1]);
        let batch = self.value().numel() / (m * n);
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            transpose_into(
                &self.data()[bi * m * n..(bi + 1) * m * n],
                m,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut shape = self.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let value = Tensor::from_parts(shape, out);
        Ok(self.tape().record("transpose", &[self], value, move |g, _| {
            let mut gx = vec![0.0; batch * m * n];
            for bi in 0..batch {
                transpose_into(
                    &g[bi * m * n..(bi + 1) * m * n],
                    n,
                    m,
                    &mut gx[bi * m * n..(bi + 1) * m * n],
                );
            }
            vec![Some(gx)]
        }))
    }

    /// Matrix product. Supports `[m,k]x[k,n]`, batched `[B,m,k]x[B,k,n]` and
    /// `[B,m,k]x[k,n]` with the right operand shared across the batch.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.check_same_tape(other)?;
        let (sa, sb) = (self.shape(), other.shape());
        let mismatch = || Error::shape("matmul", sa, sb);
        let (batch, m, k, n, shared_rhs) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n, true),
            ([b, m, k], [b2, k2, n]) if b == b2 && k == k2 => (*b, *m, *k, *n, false),
            ([b, m, k], [k2, n]) if k == k2 => (*b, *m, *k, *n, true),
            _ => return Err(mismatch()),
        };
        let a = self.value().clone();
        let bt = other.value().clone();
        let rhs = move |bi: usize| -> std::ops::Range<usize> {
            if shared_rhs {
                0..k * n
            } else {
                bi * k * n..(bi + 1) * k * n
            }
        };
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm(
                &a.data()[bi * m * k..(bi + 1) * m * k],
                &bt.data()[rhs(bi)],
                m,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::from_parts(shape, out);
        let b_numel = bt.numel();
        Ok(self.tape().record("matmul", &[self, other], value, move |g, need| {
            let mut ga = need[0].then(|| vec![0.0; batch * m * k]);
            let mut gb = need[1].then(|| vec![0.0; b_numel]);
            let mut scratch_t = Vec::new();
            let mut scratch_out = Vec::new();
            for bi in 0..batch {
                let gslice = &g[bi * m * n..(bi + 1) * m * n];
                let aslice = &a.data()[bi * m * k..(bi + 1) * m * k];
                let bslice = &bt.data()[rhs(bi)];
                if let Some(ga) = ga.as_mut() {
                    // dA = G * B^T
                    scratch_t.resize(n * k, 0.0);
                    transpose_into(bslice, k, n, &mut scratch_t);
                    gemm(gslice, &scratch_t, m, n, k, &mut ga[bi * m * k..(bi + 1) * m * k]);
                }
                if let Some(gb) = gb.as_mut() {
                    // dB = A^T * G
                    scratch_t.resize(k * m, 0.0);
                    transpose_into(aslice, m, k, &mut scratch_t);
                    scratch_out.clear();
                    scratch_out.resize(k * n, 0.0);
                    gemm(&scratch_t, gslice, k, m, n, &mut scratch_out);
                    let dst = &mut gb[rhs(bi)];
                    for (d, s) in dst.iter_mut().zip(&scratch_out) {
                        *d += s;
                    }
                }
            }
            vec![ga, gb]
        }))
    }

    /// Softmax along `axis`, evaluated with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Var> {
        check_axis(self.shape(), axis, "softmax")?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[idx(j)] - mx).exp();
                    y[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[idx(j)] /= total;
                }
            }
        }
        let value = Tensor::from_parts(self.shape().to_vec(), y);
        let yv = value.clone();
        Ok(self.tape().record("softmax", &[self], value, move |g, _| {
            let y = yv.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                    for j in 0..len {
                        gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Row-wise gather on the trailing axis: for input `[.., rows, m]` and an
    /// index table of `rows * n_out` entries, `out[.., r, j] = in[.., r, index[r * n_out + j]]`.
    pub fn gather_last(&self, index: Arc<Vec<usize>>, n_out: usize) -> Result<Var> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::invalid("gather_last needs rank >= 2"));
        }
        let (rows, m) = (self.shape()[r - 2], self.shape()[r - 1]);
        if index.len() != rows * n_out || index.iter().any(|&i| i >= m) {
            return Err(Error::invalid(format!(
                "gather index table invalid for rows={rows}, m={m}, n_out={n_out}"
            )));
        }
        let batch = self.value().numel() / (rows * m);
        let x = self.data();
        let mut out = vec![0.0; batch * rows * n_out];
        for bi in 0..batch {
            for row in 0..rows {
                let src = &x[(bi * rows + row) * m..(bi * rows + row + 1) * m];
                let dst = &mut out[(bi * rows + row) * n_out..(bi * rows + row + 1) * n_out];
                for (d, &ix) in dst.iter_mut().zip(&index[row * n_out..(row + 1) * n_out]) {
                    *d = src[ix];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[r - 1] = n_out;
        let value = Tensor::from_parts(shape, out);
        Ok(self.tape().record("gather_last", &[self], value, move |g, _| {
            let mut gx = vec![0.0; batch * rows * m];
            for bi in 0..batch {
                for row in 0..rows {
                    let base_in = (bi * rows + row) * m;
                    let base_out = (bi * rows + row) * n_out;
                    for j in 0..n_out {
                        gx[base_in + index[row * n_out + j]] += g[base_out + j];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Unpadded 2-D cross-correlation with optional bias and channel groups.
    /// `self` is `[B, Cin, H, W]`, `weight` is `[Cout, Cin/groups, kh, kw]`.
    pub fn conv2d_valid(&self, weight: &Var, bias: Option<&Var>, stride: usize, groups: usize) -> Result<Var> {
        self.check_same_tape(weight)?;
        let (b, cin, h, w) = self.value().dims4()?;
        let (cout, cin_g, kh, kw) = weight.value().dims4()?;
        if stride == 0 || groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::shape("conv2d", self.shape(), weight.shape()));
        }
        if kh > h || kw > w {
            return Err(Error::shape("conv2d", self.shape(), weight.shape()));
        }
        if let Some(bv) = bias {
            bv.check_same_tape(self)?;
            if bv.shape() != [cout] {
                return Err(Error::shape("conv2d bias", bv.shape(), &[cout]));
            }
        }
        let geo = ConvGeometry {
            b,
            cin,
            h,
            w,
            cout,
            cin_g,
            cout_g: cout / groups,
            kh,
            kw,
            stride,
            ho: (h - kh) / stride + 1,
            wo: (w - kw) / stride + 1,
        };
        let x = self.value().clone();
        let wt = weight.value().clone();
        let out = conv_forward(&geo, x.data(), wt.data(), bias.map(|v| v.data()));
        let value = Tensor::from_parts(vec![b, cout, geo.ho, geo.wo], out);
        let mut inputs: Vec<&Var> = vec![self, weight];
        if let Some(bv) = bias {
            inputs.push(bv);
        }
        let has_bias = bias.is_some();
        Ok(self.tape().record("conv2d", &inputs, value, move |g, need| {
            let mut res = vec![
                need[0].then(|| conv_grad_input(&geo, g, wt.data())),
                need[1].then(|| conv_grad_weight(&geo, g, x.data())),
            ];
            if has_bias {
                res.push(need[2].then(|| conv_grad_bias(&geo, g)));
            }
            res
        }))
    }

    /// Group normalization of a `[B, C, H, W]` tensor followed by a
    /// per-channel affine map.
    pub fn group_norm(&self, gamma: &Var, beta: &Var, groups: usize, eps: f64) -> Result<Var> {
        self.check_same_tape(gamma)?;
        self.check_same_tape(beta)?;
        let (b, c, h, w) = self.value().dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::invalid(format!(
                "group_norm: {c} channels not divisible by {groups} groups"
            )));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape("group_norm affine", gamma.shape(), &[c]));
        }
        let cg = c / groups;
        let hw = h * w;
        let n = cg * hw;
        let x = self.data();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; b * groups];
        for (gi, (src, dst)) in x.chunks(n).zip(xhat.chunks_mut(n)).enumerate() {
            let mean = src.iter().sum::<f64>() / n as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[gi] = is;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
        }
        let (gm, bt) = (gamma.value().clone(), beta.value().clone());
        let mut y = vec![0.0; x.len()];
        for (pi, (src, dst)) in xhat.chunks(hw).zip(y.chunks_mut(hw)).enumerate() {
            let ch = pi % c;
            let (s, o) = (gm.data()[ch], bt.data()[ch]);
            for (d, v) in dst.iter_mut().zip(src) {
                *d = s * v + o;
            }
        }
        let value = Tensor::from_parts(vec![b, c, h, w], y);
        Ok(self
            .tape()
            .record("group_norm", &[self, gamma, beta], value, move |g, need| {
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (pi, (gp, xp)) in g.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                    let ch = pi % c;
                    for (gv, xv) in gp.iter().zip(xp) {
                        dgamma[ch] += gv * xv;
                        dbeta[ch] += gv;
                    }
                }
                let dx = need[0].then(|| {
                    let mut dx = vec![0.0; g.len()];
                    for gi in 0..b * groups {
                        let range = gi * n..(gi + 1) * n;
                        let first_ch = (gi % groups) * cg;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for (j, idx) in range.clone().enumerate() {
                            let d = g[idx] * gm.data()[first_ch + j / hw];
                            sum_d += d;
                            sum_dx += d * xhat[idx];
                        }
                        let is = inv_std[gi];
                        for (j, idx) in range.enumerate() {
                            let d = g[idx] * gm.data()[first_ch + j / hw];
                            dx[idx] = is / n as f64 * (n as f64 * d - sum_d - xhat[idx] * sum_dx);
                        }
                    }
                    dx
                });
                vec![dx, need[1].then_some(dgamma), need[2].then_some(dbeta)]
            }))
    }

    /// Bilinear 2x upsampling of the spatial axes (half-pixel centers, edge clamped).
    pub fn upsample_bilinear2x(&self) -> Result<Var> {
        let (b, c, h, w) = self.value().dims4()?;
        let (ho, wo) = (2 * h, 2 * w);
        let rows = bilinear_taps(h, ho);
        let cols = bilinear_taps(w, wo);
        let x = self.data();
        let mut out = vec![0.0; b * c * ho * wo];
        for (src, dst) in x.chunks(h * w).zip(out.chunks_mut(ho * wo)) {
            for (y, &(y0, y1, ly)) in rows.iter().enumerate() {
                for (xo, &(x0, x1, lx)) in cols.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                    let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                    dst[y * wo + xo] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
        let value = Tensor::from_parts(vec![b, c, ho, wo], out);
        Ok(self.tape().record("upsample_bilinear2x", &[self], value, move |g, _| {
            let mut gx = vec![0.0; b * c * h * w];
            for (gp, dst) in g.chunks(ho * wo).zip(gx.chunks_mut(h * w)) {
                for (y, &(y0, y1, ly)) in rows.iter().enumerate() {
                    for (xo, &(x0, x1, lx)) in cols.iter().enumerate() {
                        let gv = gp[y * wo + xo];
                        dst[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                        dst[y0 * w + x1] += gv * (1.0 - ly) * lx;
                        dst[y1 * w + x0] += gv * ly * (1.0 - lx);
                        dst[y1 * w + x1] += gv * ly * lx;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Source index per output position along one padded axis (`None` = zero fill).
fn pad_index(n: usize, before: usize, after: usize, mode: PadMode) -> Result<Vec<Option<usize>>> {
    if mode == PadMode::Circular && (before > n || after > n) {
        return Err(Error::invalid(format!(
            "circular pad ({before},{after}) exceeds extent {n}"
        )));
    }
    Ok((0..n + before + after)
        .map(|i| {
            let p = i as isize - before as isize;
            if (0..n as isize).contains(&p) {
                return Some(p as usize);
            }
            match mode {
                PadMode::Zero => None,
                PadMode::Circular => Some(p.rem_euclid(n as isize) as usize),
                PadMode::Replicate => Some(p.clamp(0, n as isize - 1) as usize),
            }
        })
        .collect())
}

fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn transpose_into(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// `out += a[m,k] * b[k,n]`, row-parallel for large products.
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let row = |(i, orow): (usize, &mut [f64])| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

fn conv_forward(geo: &ConvGeometry, x: &[f64], wt: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let ConvGeometry {
        cin,
        h,
        w,
        cout,
        cin_g,
        cout_g,
        kh,
        kw,
        stride,
        ho,
        wo,
        ..
    } = *geo;
    let mut out = vec![0.0; geo.b * cout * ho * wo];
    let fused = geo.is_3x3_unit_stride();
    let plane = |(idx, dst): (usize, &mut [f64])| {
        let (bi, co) = (idx / cout, idx % cout);
        let group = co / cout_g;
        if let Some(bias) = bias {
            dst.fill(bias[co]);
        }
        for cil in 0..cin_g {
            let ci = group * cin_g + cil;
            let src = &x[(bi * cin + ci) * h * w..(bi * cin + ci + 1) * h * w];
            let kern = &wt[(co * cin_g + cil) * kh * kw..(co * cin_g + cil + 1) * kh * kw];
            if fused {
                for oy in 0..ho {
                    let r = |k: usize| &src[(oy + k) * w..(oy + k) * w + wo + 2];
                    row3x3(&mut dst[oy * wo..(oy + 1) * wo], r(0), r(1), r(2), kern);
                }
                continue;
            }
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = kern[ky * kw + kx];
                    for oy in 0..ho {
                        let srow = &src[(oy * stride + ky) * w + kx..];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        if stride == 1 {
                            for (d, s) in drow.iter_mut().zip(&srow[..wo]) {
                                *d += wv * s;
                            }
                        } else {
                            for (ox, d) in drow.iter_mut().enumerate() {
                                *d += wv * srow[ox * stride];
                            }
                        }
                    }
                }
            }
        }
    };
    if out.len() * cin_g * kh * kw >= PAR_THRESHOLD {
        out.par_chunks_mut(ho * wo).enumerate().for_each(plane);
    } else {
        out.chunks_mut(ho * wo).enumerate().for_each(plane);
    }
    out
}

impl ConvGeometry {
    fn is_3x3_unit_stride(&self) -> bool {
        self.kh == 3 && self.kw == 3 && self.stride == 1
    }
}

/// `dst[x] += Σ k[3a+b] · r_a[x+b]` over one output row.
fn row3x3(dst: &mut [f64], r0: &[f64], r1: &[f64], r2: &[f64], k: &[f64]) {
    let n = dst.len();
    let (r0, r1, r2) = (&r0[..n + 2], &r1[..n + 2], &r2[..n + 2]);
    let k: [f64; 9] = k[..9].try_into().expect("3x3 kernel");
    for x in 0..n {
        let a = k[0] * r0[x] + k[1] * r0[x + 1] + k[2] * r0[x + 2];
        let b = k[3] * r1[x] + k[4] * r1[x + 1] + k[5] * r1[x + 2];
        let c = k[6] * r2[x] + k[7] * r2[x + 1] + k[8] * r2[x + 2];
        dst[x] += a + b + c;
    }
}

/// Input gradient of a 3x3 unit-stride convolution as a forward
/// convolution of the zero-padded output gradient with flipped kernels.
fn conv_grad_input_3x3(geo: &ConvGeometry, g: &[f64], wt: &[f64]) -> Vec<f64> {
    let ConvGeometry {
        b,
        cin,
        cout,
        cin_g,
        cout_g,
        ho,
        wo,
        ..
    } = *geo;
    let (hp, wp) = (ho + 4, wo + 4);
    let mut gpad = vec![0.0; b * cout * hp * wp];
    for (src, dst) in g.chunks_exact(ho * wo).zip(gpad.chunks_exact_mut(hp * wp)) {
        for y in 0..ho {
            dst[(y + 2) * wp + 2..(y + 2) * wp + 2 + wo].copy_from_slice(&src[y * wo..(y + 1) * wo]);
        }
    }
    let mut flipped = vec![0.0; cin * cout_g * 9];
    for co in 0..cout {
        let group = co / cout_g;
        let col = co % cout_g;
        for cil in 0..cin_g {
            let ci = group * cin_g + cil;
            for t in 0..9 {
                flipped[(ci * cout_g + col) * 9 + 8 - t] = wt[(co * cin_g + cil) * 9 + t];
            }
        }
    }
    let geo_t = ConvGeometry {
        b,
        cin: cout,
        h: hp,
        w: wp,
        cout: cin,
        cin_g: cout_g,
        cout_g: cin_g,
        kh: 3,
        kw: 3,
        stride: 1,
        ho: geo.h,
        wo: geo.w,
    };
    conv_forward(&geo_t, &gpad, &flipped, None)
}

fn conv_grad_input(geo: &ConvGeometry, g: &[f64], wt: &[f64]) -> Vec<f64> {
    if geo.is_3x3_unit_stride() {
        return conv_grad_input_3x3(geo, g, wt);
    }
    let ConvGeometry {
        cin,
        h,
        w,
        cout,
        cin_g,
        cout_g,
        kh,
        kw,
        stride,
        ho,
        wo,
        ..
    } = *geo;
    let mut gx = vec![0.0; geo.b * cin * h * w];
    let plane = |(idx, dst): (usize, &mut [f64])| {
        let (bi, ci) = (idx / cin, idx % cin);
        let group = ci / cin_g;
        let cil = ci % cin_g;
        for co in group * cout_g..(group + 1) * cout_g {
            let gp = &g[(bi * cout + co) * ho * wo..(bi * cout + co + 1) * ho * wo];
            let kern = &wt[(co * cin_g + cil) * kh * kw..(co * cin_g + cil + 1) * kh * kw];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = kern[ky * kw + kx];
                    for oy in 0..ho {
                        let grow = &gp[oy * wo..(oy + 1) * wo];
                        let base = (oy * stride + ky) * w + kx;
                        if stride == 1 {
                            for (d, gv) in dst[base..base + wo].iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        } else {
                            for (ox, gv) in grow.iter().enumerate() {
                                dst[base + ox * stride] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    };
    if gx.len() * cout_g * kh * kw >= PAR_THRESHOLD {
        gx.par_chunks_mut(h * w).enumerate().for_each(plane);
    } else {
        gx.chunks_mut(h * w).enumerate().for_each(plane);
    }
    gx
}

fn conv_grad_weight(geo: &ConvGeometry, g: &[f64], x: &[f64]) -> Vec<f64> {
    let ConvGeometry {
        b,
        cin,
        h,
        w,
        cout,
        cin_g,
        cout_g,
        kh,
        kw,
        stride,
        ho,
        wo,
    } = *geo;
    let mut gw = vec![0.0; cout * cin_g * kh * kw];
    let fused = geo.is_3x3_unit_stride();
    let kernel = |(idx, dst): (usize, &mut [f64])| {
        let (co, cil) = (idx / cin_g, idx % cin_g);
        let ci = (co / cout_g) * cin_g + cil;
        if fused {
            let mut acc = [[0.0f64; 4]; 9];
            let mut tail = [0.0f64; 9];
            for bi in 0..b {
                let gp = &g[(bi * cout + co) * ho * wo..(bi * cout + co + 1) * ho * wo];
                let src = &x[(bi * cin + ci) * h * w..(bi * cin + ci + 1) * h * w];
                for oy in 0..ho {
                    let grow = &gp[oy * wo..(oy + 1) * wo];
                    let rows = [0, 1, 2].map(|k| &src[(oy + k) * w..(oy + k) * w + wo + 2]);
                    let full = wo / 4 * 4;
                    for base in (0..full).step_by(4) {
                        let gv: [f64; 4] = grow[base..base + 4].try_into().expect("lane chunk");
                        for (t, a) in acc.iter_mut().enumerate() {
                            let s = &rows[t / 3][base + t % 3..base + t % 3 + 4];
                            for l in 0..4 {
                                a[l] += gv[l] * s[l];
                            }
                        }
                    }
                    for ox in full..wo {
                        for (t, a) in tail.iter_mut().enumerate() {
                            *a += grow[ox] * rows[t / 3][ox + t % 3];
                        }
                    }
                }
            }
            for t in 0..9 {
                dst[t] = acc[t].iter().sum::<f64>() + tail[t];
            }
            return;
        }
        for ky in 0..kh {
            for kx in 0..kw {
                let mut acc = 0.0;
                for bi in 0..b {
                    let gp = &g[(bi * cout + co) * ho * wo..(bi * cout + co + 1) * ho * wo];
                    let src = &x[(bi * cin + ci) * h * w..(bi * cin + ci + 1) * h * w];
                    for oy in 0..ho {
                        let grow = &gp[oy * wo..(oy + 1) * wo];
                        let srow = &src[(oy * stride + ky) * w + kx..];
                        if stride == 1 {
                            acc += grow.iter().zip(&srow[..wo]).map(|(a, b)| a * b).sum::<f64>();
                        } else {
                            acc += grow
                                .iter()
                                .enumerate()
                                .map(|(ox, a)| a * srow[ox * stride])
                                .sum::<f64>();
                        }
                    }
                }
                dst[ky * kw + kx] = acc;
            }
        }
    };
    if b * cout * cin_g * kh * kw * ho * wo >= PAR_THRESHOLD {
        gw.par_chunks_mut(kh * kw).enumerate().for_each(kernel);
    } else {
        gw.chunks_mut(kh * kw).enumerate().for_each(kernel);
    }
    gw
}

fn conv_grad_bias(geo: &ConvGeometry, g: &[f64]) -> Vec<f64> {
    let plane = geo.ho * geo.wo;
    let mut gb = vec![0.0; geo.cout];
    for (idx, gp) in g.chunks(plane).enumerate() {
        gb[idx % geo.cout] += gp.iter().sum::<f64>();
    }
    gb
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Precision, PrecisionGuard, Tape};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_orthogonal_rows() {
        let tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(eye.matmul(&m).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let c = tape.constant(t(&[2, 1], &[0.0, 1.0]));
        assert_eq!(r.matmul(&c).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match a.matmul(&b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn softmax_closed_forms() {
        let _g = PrecisionGuard::new(Precision::F64);
        let tape = Tape::new();
        let z = tape.constant(t(&[3], &[0.0, 0.0, 0.0])).softmax(0).unwrap();
        for v in z.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = tape.constant(t(&[2], &[1000.0, 0.0])).softmax(0).unwrap();
        assert!((big.data()[0] - 1.0).abs() < 1e-12);
        assert!(big.data()[1].abs() < 1e-12);
        assert!(big.value().is_finite());
        let s = tape.constant(t(&[3], &[1.0, 2.0, 3.0])).softmax(0).unwrap();
        let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in s.data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / denom).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_examples() {
        let _g = PrecisionGuard::new(Precision::F64);
        let tape = Tape::new();
        let x = tape.param(Tensor::uniform(&[2, 3, 4], -1.0, 1.0, &mut rand::thread_rng()));
        tape.backward(&x.sum()).unwrap();
        assert!(tape.grad(&x).unwrap().data().iter().all(|&v| v == 1.0));

        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let loss = x.mul(&x).unwrap().mean();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[1.0, 2.0]);

        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        tape.backward(&x.sigmoid()).unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn relu_adjoint_at_zero_is_zero() {
        let tape = Tape::new();
        let x = tape.param(t(&[3], &[-1.0, 0.0, 2.0]));
        tape.backward(&x.relu().sum()).unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn ln_rejects_non_positive() {
        let tape = Tape::new();
        assert!(tape.constant(t(&[2], &[1.0, 0.0])).ln().is_err());
    }

    #[test]
    fn pad_modes() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = x
            .pad2d(Pad2d {
                top: 1,
                bottom: 1,
                left: 1,
                right: 1,
                vertical: PadMode::Zero,
                horizontal: PadMode::Circular,
            })
            .unwrap();
        assert_eq!(p.shape(), &[1, 1, 4, 5]);
        assert_eq!(
            p.data(),
            &[
                0.0, 0.0, 0.0, 0.0, 0.0, //
                3.0, 1.0, 2.0, 3.0, 1.0, //
                6.0, 4.0, 5.0, 6.0, 4.0, //
                0.0, 0.0, 0.0, 0.0, 0.0,
            ]
        );
        let r = x
            .pad2d(Pad2d {
                top: 1,
                bottom: 0,
                left: 0,
                right: 0,
                vertical: PadMode::Replicate,
                horizontal: PadMode::Circular,
            })
            .unwrap();
        assert_eq!(&r.data()[..3], &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn concat_and_slice_invert() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[2, 2, 2, 2], |i| i as f64));
        let b = tape.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| 100.0 + i as f64));
        let c = Var::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 5, 2, 2]);
        assert_eq!(c.slice(1, 0, 2).unwrap().data(), a.data());
        assert_eq!(c.slice(1, 2, 5).unwrap().data(), b.data());
    }

    #[test]
    fn upsample_closed_form_row() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 2], &[0.0, 1.0]));
        let y = x.upsample_bilinear2x().unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        assert_eq!(&y.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
        assert_eq!(&y.data()[4..], &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn gather_last_picks_columns() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = x.gather_last(Arc::new(vec![2, 0, 1, 1]), 2).unwrap();
        assert_eq!(y.data(), &[3.0, 1.0, 5.0, 5.0]);
        assert!(x.gather_last(Arc::new(vec![3, 0, 1, 1]), 2).is_err());
    }
}
