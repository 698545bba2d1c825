//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its output value plus whatever it needs
//! for the backward pass. `backward` walks the tape once in reverse and
//! returns gradients keyed by [`ParamId`]. The tape also tallies analytic
//! FLOPs under the profiler's counting rules so a real forward pass can be
//! audited against the closed-form counts.

use std::collections::HashMap;

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{gemm, MatMut, MatRef, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub const LN_EPS: f64 = 1e-5;

/// Geometry of a 2-d convolution over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Input,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    ScaleRows {
        x: Var,
        factors: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Silu(Var),
    Tanh(Var),
    Attention {
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    WeightedRowSum {
        x: Var,
        groups: Vec<Vec<(usize, T)>>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geo: ConvGeom,
        cols: Vec<T>,
    },
    Upsample2(Var),
    NchwToRows(Var),
    Reshape(Var),
    /// Scalar whose gradient w.r.t. each input was computed in closed form
    /// during the forward pass.
    Loss(Vec<(Var, Tensor<T>)>),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'a, T: Real> {
    store: &'a ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    flops: u64,
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let one = T::one();
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let y = half * x * (one + th);
    let dy = half * (one + th)
        + half * x * (one - th * th) * c * (one + T::from_f64_lossy(3.0) * k * x * x);
    (y, dy)
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn im2col<T: Real>(x: &[T], geo: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = (geo.out_h(), geo.out_w());
    let hw = ho * wo;
    for c in 0..geo.c_in {
        for ki in 0..geo.kh {
            for kj in 0..geo.kw {
                let row = (c * geo.kh + ki) * geo.kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * geo.stride + kj) as isize - geo.pad as isize;
                        dst[oy * wo + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < geo.h
                            && (ix as usize) < geo.w
                        {
                            x[(c * geo.h + iy as usize) * geo.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], geo: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = (geo.out_h(), geo.out_w());
    let hw = ho * wo;
    for c in 0..geo.c_in {
        for ki in 0..geo.kh {
            for kj in 0..geo.kw {
                let row = (c * geo.kh + ki) * geo.kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                    if iy < 0 || iy as usize >= geo.h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * geo.stride + kj) as isize - geo.pad as isize;
                        if ix < 0 || ix as usize >= geo.w {
                            continue;
                        }
                        dx[(c * geo.h + iy as usize) * geo.w + ix as usize] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            flops: 0,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// FLOPs tallied so far (1 multiply-add = 2 FLOPs; see `eval::cost`).
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Elements held by all non-parameter tape values.
    pub fn activation_elems(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match &n.value {
                Value::Owned(t) => t.numel(),
                Value::Param(_) => 0,
            })
            .sum()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(format!("{what}: expected 2-d input, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `x·w + b` with `x: [rows, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, d_in) = self.matrix_dims(x, "linear")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[0] != d_in {
            return Err(Error::shape(format!(
                "linear: input width {d_in} vs weight {ws:?}"
            )));
        }
        let d_out = ws[1];
        let mut y = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.numel() != d_out {
                    return Err(Error::shape(format!(
                        "linear: bias has {} elements, expected {d_out}",
                        bv.numel()
                    )));
                }
                let mut y = Vec::with_capacity(rows * d_out);
                for _ in 0..rows {
                    y.extend_from_slice(bv.data());
                }
                y
            }
            None => vec![T::zero(); rows * d_out],
        };
        gemm(
            T::one(),
            MatRef::dense(self.value(x).data(), rows, d_in),
            MatRef::dense(self.value(w).data(), d_in, d_out),
            T::one(),
            MatMut::dense(&mut y, rows, d_out),
        );
        self.flops += 2 * (rows * d_in * d_out) as u64;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(
            Tensor::new(vec![rows, d_out], y)?,
            Op::Linear { x, w, b },
            ng,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != factors.len() {
            return Err(Error::shape(format!(
                "scale_rows: {} rows vs {} factors",
                xv.rows(),
                factors.len()
            )));
        }
        let c = xv.cols();
        let mut out = xv.clone();
        for (row, &f) in out.data_mut().chunks_mut(c.max(1)).zip(&factors) {
            for v in row {
                *v *= f;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::ScaleRows { x, factors }, ng))
    }

    /// Layer normalization over the last dimension of a `[rows, d]` input.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, d) = self.matrix_dims(x, "layer_norm")?;
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape("layer_norm: affine width mismatch"));
        }
        let eps = T::from_f64_lossy(LN_EPS);
        let inv_d = T::one() / T::from_usize(d).unwrap();
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut y = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                y[r * d + j] = xh * g[j] + bt[j];
            }
        }
        self.flops += 5 * (rows * d) as u64;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::new(vec![rows, d], y)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu_parts(v).0);
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let ng = self.ng(x);
        self.push(out, Op::Silu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let ng = self.ng(x);
        self.push(out, Op::Tanh(x), ng)
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `[batch·seq, 3·d]` with query, key and value blocks side by
    /// side; each block splits into `heads` contiguous column groups. When
    /// `key_mask` is given (`true` = may be attended to, one entry per row of
    /// `qkv`) masked keys get zero weight. Returns `[batch·seq, d]`.
    pub fn attention(
        &mut self,
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (rows, w3) = self.matrix_dims(qkv, "attention")?;
        if rows != batch * seq || w3 % 3 != 0 || (w3 / 3) % heads != 0 {
            return Err(Error::shape(format!(
                "attention: qkv {rows}x{w3} incompatible with batch {batch}, seq {seq}, heads {heads}"
            )));
        }
        if let Some(m) = key_mask {
            if m.len() != rows {
                return Err(Error::shape("attention: key mask length"));
            }
            for b in 0..batch {
                if !m[b * seq..(b + 1) * seq].iter().any(|&k| k) {
                    return Err(Error::shape(format!(
                        "attention: batch item {b} masks every key"
                    )));
                }
            }
        }
        let d = w3 / 3;
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let src = self.value(qkv).data();
        let mut out = vec![T::zero(); rows * d];
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        for b in 0..batch {
            let base = b * seq * w3;
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                let q = MatRef::strided(&src[base + h * dh..], seq, dh, w3, 1);
                let k = MatRef::strided(&src[base + d + h * dh..], seq, dh, w3, 1);
                let v = MatRef::strided(&src[base + 2 * d + h * dh..], seq, dh, w3, 1);
                gemm(scale, q, k.t(), T::zero(), MatMut::dense(p, seq, seq));
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    if let Some(m) = key_mask {
                        for (j, s) in row.iter_mut().enumerate() {
                            if !m[b * seq + j] {
                                *s = T::neg_infinity();
                            }
                        }
                    }
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for s in row.iter_mut() {
                        *s = (*s - mx).exp();
                        sum += *s;
                    }
                    let inv = T::one() / sum;
                    for s in row.iter_mut() {
                        *s *= inv;
                    }
                }
                let o = MatMut::strided(&mut out[b * seq * d + h * dh..], seq, dh, d, 1);
                gemm(T::one(), MatRef::dense(p, seq, seq), v, T::zero(), o);
            }
        }
        let (bh, kk) = ((batch * heads) as u64, (seq * seq) as u64);
        self.flops += 2 * bh * kk * dh as u64 * 2 + 5 * bh * kk;
        let ng = self.ng(qkv);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Attention weights of the most recent call that produced `v`, laid out
    /// `[batch, heads, seq, seq]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape(format!("gather_rows: index {bad} >= {r} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::GatherRows { x, idx }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(Error::shape("concat_rows: width mismatch"));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![rows, c], data)?,
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.matrix_dims(a, "concat_cols")?;
        let (rb, cb) = self.matrix_dims(b, "concat_cols")?;
        if ra != rb {
            return Err(Error::shape("concat_cols: row mismatch"));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(vec![ra, ca + cb], data)?,
            Op::ConcatCols(a, b),
            ng,
        ))
    }

    /// `out[g] = Σ w · x[i]` over the `(i, w)` pairs of group `g`.
    pub fn weighted_row_sum(&mut self, x: Var, groups: Vec<Vec<(usize, T)>>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = vec![T::zero(); groups.len() * c];
        for (g, members) in groups.iter().enumerate() {
            let dst = &mut data[g * c..(g + 1) * c];
            for &(i, w) in members {
                if i >= r {
                    return Err(Error::shape("weighted_row_sum: row index"));
                }
                for (o, &v) in dst.iter_mut().zip(xv.row(i)) {
                    *o += w * v;
                }
            }
        }
        let out = Tensor::new(vec![groups.len(), c], data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::WeightedRowSum { x, groups }, ng))
    }

    /// Convolution over NCHW input; `w: [c_out, c_in, kh, kw]`, `b: [c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] {
            return Err(Error::shape(format!("conv2d: input {xs:?} weight {ws:?}")));
        }
        let geo = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        };
        if geo.h + 2 * pad < geo.kh || geo.w + 2 * pad < geo.kw || stride == 0 {
            return Err(Error::shape("conv2d: kernel larger than padded input"));
        }
        if self.value(b).numel() != geo.c_out {
            return Err(Error::shape("conv2d: bias width"));
        }
        let (ho, wo) = (geo.out_h(), geo.out_w());
        let hw = ho * wo;
        let kl = geo.patch_len();
        let in_sz = geo.c_in * geo.h * geo.w;
        let mut cols = vec![T::zero(); geo.batch * kl * hw];
        let mut y = vec![T::zero(); geo.batch * geo.c_out * hw];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        for bi in 0..geo.batch {
            let col = &mut cols[bi * kl * hw..(bi + 1) * kl * hw];
            im2col(&xv[bi * in_sz..(bi + 1) * in_sz], &geo, col);
            let yb = &mut y[bi * geo.c_out * hw..(bi + 1) * geo.c_out * hw];
            for (co, chunk) in yb.chunks_mut(hw).enumerate() {
                chunk.fill(bv[co]);
            }
            gemm(
                T::one(),
                MatRef::dense(wv, geo.c_out, kl),
                MatRef::dense(col, kl, hw),
                T::one(),
                MatMut::dense(yb, geo.c_out, hw),
            );
        }
        self.flops += 2 * (geo.batch * hw * geo.c_out * kl) as u64;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            Tensor::new(vec![geo.batch, geo.c_out, ho, wo], y)?,
            Op::Conv2d { x, w, b, geo, cols },
            ng,
        ))
    }

    /// Nearest-neighbour 2× upsampling of NCHW input.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("upsample2: expected NCHW"));
        }
        let (n, h, w) = (s[0] * s[1], s[2], s[3]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * 4 * h * w];
        for p in 0..n {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[(p * 2 * h + i) * 2 * w + j] = xv[(p * h + i / 2) * w + j / 2];
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out)?,
            Op::Upsample2(x),
            ng,
        ))
    }

    /// `[b, c, h, w]` → `[b·h·w, c]`, one row per spatial position.
    pub fn nchw_to_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("nchw_to_rows: expected NCHW"));
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * c * hw];
        for bi in 0..b {
            for ci in 0..c {
                for p in 0..hw {
                    out[(bi * hw + p) * c + ci] = xv[(bi * c + ci) * hw + p];
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![b * hw, c], out)?, Op::NchwToRows(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Records a scalar loss whose input gradients are already known.
    pub fn loss(&mut self, value: T, grads: Vec<(Var, Tensor<T>)>) -> Result<Var> {
        for (v, g) in &grads {
            if self.shape(*v) != g.shape() {
                return Err(Error::shape("loss: gradient shape differs from input"));
            }
        }
        let ng = grads.iter().any(|(v, _)| self.ng(*v));
        Ok(self.push(Tensor::scalar(value), Op::Loss(grads), ng))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.numel() != target.numel() {
            return Err(Error::shape(format!(
                "mse: prediction {:?} vs target {:?}",
                pv.shape(),
                target.shape()
            )));
        }
        let n = T::from_usize(pv.numel()).unwrap();
        let mut sum = T::zero();
        let two_over_n = T::from_f64_lossy(2.0) / n;
        let grad: Vec<T> = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let d = p - t;
                sum += d * d;
                two_over_n * d
            })
            .collect();
        let g = Tensor::new(pv.shape().to_vec(), grad)?;
        self.loss(sum / n, vec![(pred, g)])
    }

    /// Mean binary cross-entropy on logits against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.numel() != targets.numel() {
            return Err(Error::shape("bce_with_logits: target size"));
        }
        let n = T::from_usize(lv.numel()).unwrap();
        let mut sum = T::zero();
        let grad: Vec<T> = lv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| {
                sum += x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln();
                (sigmoid(x) - y) / n
            })
            .collect();
        let g = Tensor::new(lv.shape().to_vec(), grad)?;
        self.loss(sum / n, vec![(logits, g)])
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape("backward: root must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        let mut out = Grads::new(self.store.len());

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.accumulate(*id, dy),
                Op::Linear { x, w, b } => {
                    let (rows, d_in) = (self.value(*x).rows(), self.value(*x).cols());
                    let d_out = dy.cols();
                    if self.ng(*x) {
                        let mut dx = vec![T::zero(); rows * d_in];
                        gemm(
                            T::one(),
                            MatRef::dense(dy.data(), rows, d_out),
                            MatRef::dense(self.value(*w).data(), d_in, d_out).t(),
                            T::zero(),
                            MatMut::dense(&mut dx, rows, d_in),
                        );
                        self.acc(&mut grads, *x, Tensor::new(vec![rows, d_in], dx)?);
                    }
                    if self.ng(*w) {
                        let mut dw = vec![T::zero(); d_in * d_out];
                        gemm(
                            T::one(),
                            MatRef::dense(self.value(*x).data(), rows, d_in).t(),
                            MatRef::dense(dy.data(), rows, d_out),
                            T::zero(),
                            MatMut::dense(&mut dw, d_in, d_out),
                        );
                        self.acc(&mut grads, *w, Tensor::new(vec![d_in, d_out], dw)?);
                    }
                    if let Some(b) = b {
                        if self.ng(*b) {
                            let mut db = vec![T::zero(); d_out];
                            for r in 0..rows {
                                for (acc, &v) in db.iter_mut().zip(dy.row(r)) {
                                    *acc += v;
                                }
                            }
                            let shape = self.value(*b).shape().to_vec();
                            self.acc(&mut grads, *b, Tensor::new(shape, db)?);
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        self.acc(&mut grads, *a, dy.clone());
                    }
                    if self.ng(*b) {
                        self.acc(&mut grads, *b, dy);
                    }
                }
                Op::ScaleRows { x, factors } => {
                    let c = dy.cols().max(1);
                    let mut dx = dy;
                    for (row, &f) in dx.data_mut().chunks_mut(c).zip(factors) {
                        for v in row {
                            *v *= f;
                        }
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let d = dy.cols();
                    let rows = dy.rows();
                    let g = self.value(*gamma).data();
                    if self.ng(*gamma) || self.ng(*beta) {
                        let mut dg = vec![T::zero(); d];
                        let mut db = vec![T::zero(); d];
                        for r in 0..rows {
                            for j in 0..d {
                                let v = dy.data()[r * d + j];
                                dg[j] += v * xhat[r * d + j];
                                db[j] += v;
                            }
                        }
                        if self.ng(*gamma) {
                            let s = self.value(*gamma).shape().to_vec();
                            self.acc(&mut grads, *gamma, Tensor::new(s, dg)?);
                        }
                        if self.ng(*beta) {
                            let s = self.value(*beta).shape().to_vec();
                            self.acc(&mut grads, *beta, Tensor::new(s, db)?);
                        }
                    }
                    if self.ng(*x) {
                        let inv_d = T::one() / T::from_usize(d).unwrap();
                        let mut dx = vec![T::zero(); rows * d];
                        for r in 0..rows {
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for j in 0..d {
                                let dxh = dy.data()[r * d + j] * g[j];
                                m1 += dxh;
                                m2 += dxh * xhat[r * d + j];
                            }
                            m1 *= inv_d;
                            m2 *= inv_d;
                            for j in 0..d {
                                let dxh = dy.data()[r * d + j] * g[j];
                                dx[r * d + j] = rstd[r] * (dxh - m1 - xhat[r * d + j] * m2);
                            }
                        }
                        self.acc(&mut grads, *x, Tensor::new(vec![rows, d], dx)?);
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut dx = dy;
                    for (g, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        *g *= gelu_parts(v).1;
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let mut dx = dy;
                    for (g, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        let s = sigmoid(v);
                        *g *= s * (T::one() + v * (T::one() - s));
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let yv = self.value(Var(i));
                    let mut dx = dy;
                    for (g, &y) in dx.data_mut().iter_mut().zip(yv.data()) {
                        *g *= T::one() - y * y;
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::Attention {
                    qkv,
                    batch,
                    seq,
                    heads,
                    probs,
                } => {
                    let dq = self.attention_backward(*qkv, *batch, *seq, *heads, probs, &dy)?;
                    self.acc(&mut grads, *qkv, dq);
                }
                Op::GatherRows { x, idx } => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut dx = Tensor::zeros(xv.shape());
                    let d = dx.data_mut();
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, &v) in d[i * c..(i + 1) * c].iter_mut().zip(dy.row(k)) {
                            *o += v;
                        }
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let n = pv.numel();
                        if self.ng(p) {
                            let g = Tensor::new(pv.shape().to_vec(), dy.data()[off..off + n].to_vec())?;
                            self.acc(&mut grads, p, g);
                        }
                        off += n;
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                    let rows = dy.rows();
                    if self.ng(*a) {
                        let mut da = Vec::with_capacity(rows * ca);
                        for r in 0..rows {
                            da.extend_from_slice(&dy.row(r)[..ca]);
                        }
                        self.acc(&mut grads, *a, Tensor::new(vec![rows, ca], da)?);
                    }
                    if self.ng(*b) {
                        let mut db = Vec::with_capacity(rows * cb);
                        for r in 0..rows {
                            db.extend_from_slice(&dy.row(r)[ca..]);
                        }
                        self.acc(&mut grads, *b, Tensor::new(vec![rows, cb], db)?);
                    }
                }
                Op::WeightedRowSum { x, groups } => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut dx = Tensor::zeros(xv.shape());
                    let d = dx.data_mut();
                    for (g, members) in groups.iter().enumerate() {
                        for &(i, w) in members {
                            for (o, &v) in d[i * c..(i + 1) * c].iter_mut().zip(dy.row(g)) {
                                *o += w * v;
                            }
                        }
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::Conv2d { x, w, b, geo, cols } => {
                    let hw = geo.out_h() * geo.out_w();
                    let kl = geo.patch_len();
                    let wv = self.value(*w).data();
                    let mut dw = vec![T::zero(); geo.c_out * kl];
                    let mut db = vec![T::zero(); geo.c_out];
                    let in_sz = geo.c_in * geo.h * geo.w;
                    let mut dx = vec![T::zero(); geo.batch * in_sz];
                    let mut dcol = vec![T::zero(); kl * hw];
                    for bi in 0..geo.batch {
                        let dyb = &dy.data()[bi * geo.c_out * hw..(bi + 1) * geo.c_out * hw];
                        let col = &cols[bi * kl * hw..(bi + 1) * kl * hw];
                        gemm(
                            T::one(),
                            MatRef::dense(dyb, geo.c_out, hw),
                            MatRef::dense(col, kl, hw).t(),
                            T::one(),
                            MatMut::dense(&mut dw, geo.c_out, kl),
                        );
                        for (co, chunk) in dyb.chunks(hw).enumerate() {
                            db[co] += chunk.iter().copied().sum::<T>();
                        }
                        if self.ng(*x) {
                            gemm(
                                T::one(),
                                MatRef::dense(wv, geo.c_out, kl).t(),
                                MatRef::dense(dyb, geo.c_out, hw),
                                T::zero(),
                                MatMut::dense(&mut dcol, kl, hw),
                            );
                            col2im(&dcol, geo, &mut dx[bi * in_sz..(bi + 1) * in_sz]);
                        }
                    }
                    if self.ng(*w) {
                        let s = self.value(*w).shape().to_vec();
                        self.acc(&mut grads, *w, Tensor::new(s, dw)?);
                    }
                    if self.ng(*b) {
                        let s = self.value(*b).shape().to_vec();
                        self.acc(&mut grads, *b, Tensor::new(s, db)?);
                    }
                    if self.ng(*x) {
                        let s = self.value(*x).shape().to_vec();
                        self.acc(&mut grads, *x, Tensor::new(s, dx)?);
                    }
                }
                Op::Upsample2(x) => {
                    let s = self.value(*x).shape().to_vec();
                    let (n, h, w) = (s[0] * s[1], s[2], s[3]);
                    let mut dx = vec![T::zero(); n * h * w];
                    for p in 0..n {
                        for i in 0..2 * h {
                            for j in 0..2 * w {
                                dx[(p * h + i / 2) * w + j / 2] += dy.data()[(p * 2 * h + i) * 2 * w + j];
                            }
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::new(s, dx)?);
                }
                Op::NchwToRows(x) => {
                    let s = self.value(*x).shape().to_vec();
                    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let mut dx = vec![T::zero(); b * c * hw];
                    for bi in 0..b {
                        for ci in 0..c {
                            for p in 0..hw {
                                dx[(bi * c + ci) * hw + p] = dy.data()[(bi * hw + p) * c + ci];
                            }
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::new(s, dx)?);
                }
                Op::Reshape(x) => {
                    let s = self.value(*x).shape().to_vec();
                    self.acc(&mut grads, *x, dy.reshape(&s)?);
                }
                Op::Loss(inputs) => {
                    let up = dy.data()[0];
                    for (v, g) in inputs {
                        if self.ng(*v) {
                            let mut g = g.clone();
                            g.scale(up);
                            self.acc(&mut grads, *v, g);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn attention_backward(
        &self,
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: &[T],
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let src = self.value(qkv).data();
        let w3 = self.value(qkv).cols();
        let d = w3 / 3;
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut dqkv = vec![T::zero(); batch * seq * w3];
        let mut dp = vec![T::zero(); seq * seq];
        for b in 0..batch {
            let base = b * seq * w3;
            for h in 0..heads {
                let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                let d_o = MatRef::strided(&dy.data()[b * seq * d + h * dh..], seq, dh, d, 1);
                let q = MatRef::strided(&src[base + h * dh..], seq, dh, w3, 1);
                let k = MatRef::strided(&src[base + d + h * dh..], seq, dh, w3, 1);
                let v = MatRef::strided(&src[base + 2 * d + h * dh..], seq, dh, w3, 1);
                // dV = Pᵀ·dO
                gemm(
                    T::one(),
                    MatRef::dense(p, seq, seq).t(),
                    d_o,
                    T::zero(),
                    MatMut::strided(&mut dqkv[base + 2 * d + h * dh..], seq, dh, w3, 1),
                );
                // dP = dO·Vᵀ, then softmax backward in place
                gemm(T::one(), d_o, v.t(), T::zero(), MatMut::dense(&mut dp, seq, seq));
                for i in 0..seq {
                    let pr = &p[i * seq..(i + 1) * seq];
                    let dr = &mut dp[i * seq..(i + 1) * seq];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (g, &pv) in dr.iter_mut().zip(pr) {
                        *g = pv * (*g - dot);
                    }
                }
                // dQ = scale·dS·K, dK = scale·dSᵀ·Q
                gemm(
                    scale,
                    MatRef::dense(&dp, seq, seq),
                    k,
                    T::zero(),
                    MatMut::strided(&mut dqkv[base + h * dh..], seq, dh, w3, 1),
                );
                gemm(
                    scale,
                    MatRef::dense(&dp, seq, seq).t(),
                    q,
                    T::zero(),
                    MatMut::strided(&mut dqkv[base + d + h * dh..], seq, dh, w3, 1),
                );
            }
        }
        Tensor::new(vec![batch * seq, w3], dqkv)
    }
}
