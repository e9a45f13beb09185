//! Tape-based reverse-mode automatic differentiation.
//!
//! Ops append nodes to a single-threaded [`Tape`]; `backward` walks the tape
//! in reverse and accumulates gradients exactly once per use. Execution is
//! sequential with a fixed reduction order, so repeated runs over the same
//! inputs are bit-identical.

use crate::tensor::{softmax_into, Scalar, Tensor, TensorError};

/// Handle to a tape node.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    Transpose {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Silu {
        x: Var,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: Vec<T>,
    },
    StraightThrough {
        z: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    SumAll {
        x: Var,
    },
    MeanAll {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
        wsum: T,
    },
}

/// Loss node plus the all-positions-masked flag.
#[derive(Debug, Clone, Copy)]
pub struct CrossEntropyOut {
    pub loss: Var,
    pub all_masked: bool,
}

pub struct Tape<T: Scalar> {
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Tensor<T>>>,
    ops: Vec<Op<T>>,
    requires: Vec<bool>,
    backward_done: bool,
}

const RMS_EPS: f64 = 1e-5;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    /// Gradient of the last `backward` root with respect to `v`, if any
    /// reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.requires.push(requires_grad);
        Var(self.values.len() - 1)
    }

    fn push_from(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let req = inputs.iter().any(|v| self.requires[v.0]);
        self.push(value, op, req)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = crate::tensor::matmul(&self.values[a.0], &self.values[b.0])?;
        Ok(self.push_from(out, Op::Matmul { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.values[a.0].zip_map(&self.values[b.0], "add", |x, y| x + y)?;
        Ok(self.push_from(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.values[a.0].zip_map(&self.values[b.0], "mul", |x, y| x * y)?;
        Ok(self.push_from(out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.values[a.0].map(|x| x * c);
        self.push_from(out, Op::Scale { a, c }, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = crate::tensor::transpose2d(&self.values[a.0])?;
        Ok(self.push_from(out, Op::Transpose { a }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.values[a.0].reshape(shape)?;
        Ok(self.push_from(out, Op::Reshape { a }, &[a]))
    }

    /// Rows of `table` selected by `ids`; backward scatter-adds into the
    /// selected rows.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let t = &self.values[table.0];
        if t.rank() != 2 {
            return Err(TensorError::Incompatible {
                op: "gather_rows",
                detail: format!("expected rank-2 table, got shape {:?}", t.shape()),
            });
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (i, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    bound: rows,
                });
            }
            out.data_mut()[i * d..(i + 1) * d].copy_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        Ok(self.push_from(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Row-wise RMS normalization of a 2-D input followed by a per-feature
    /// gain: `y[i][j] = x[i][j] / rms(x[i]) * gain[j]`.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var, TensorError> {
        let xv = &self.values[x.0];
        let gv = &self.values[gain.0];
        if xv.rank() != 2 || gv.rank() != 1 || gv.shape()[0] != xv.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "rms_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        let eps = T::from_f64(RMS_EPS);
        let dn = T::from_f64(d as f64);
        let mut inv_rms = Vec::with_capacity(n);
        let mut out = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let row = &xv.data()[i * d..(i + 1) * d];
            let mut ss = T::zero();
            for &v in row {
                ss += v * v;
            }
            let inv = (ss / dn + eps).sqrt().recip();
            inv_rms.push(inv);
            for j in 0..d {
                out.data_mut()[i * d + j] = row[j] * inv * gv.data()[j];
            }
        }
        Ok(self.push_from(out, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.values[x.0].map(|v| v * sigmoid(v));
        self.push_from(out, Op::Silu { x }, &[x])
    }

    /// Multi-head causal self-attention over `batch` packed sequences.
    ///
    /// `q`, `k`, `v` are `[batch * seq, d]`; each sequence and head is
    /// processed independently, positions attend to themselves and earlier
    /// positions only, and scores are scaled by `1/sqrt(d / heads)`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
    ) -> Result<Var, TensorError> {
        let (qv, kv, vv) = (&self.values[q.0], &self.values[k.0], &self.values[v.0]);
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "causal_attention",
                lhs: qv.shape().to_vec(),
                rhs: if kv.shape() != qv.shape() {
                    kv.shape().to_vec()
                } else {
                    vv.shape().to_vec()
                },
            });
        }
        if qv.rank() != 2 || batch == 0 || heads == 0 {
            return Err(TensorError::Incompatible {
                op: "causal_attention",
                detail: format!("expected rank-2 inputs, got shape {:?}", qv.shape()),
            });
        }
        let (rows, d) = (qv.shape()[0], qv.shape()[1]);
        if rows % batch != 0 || d % heads != 0 {
            return Err(TensorError::Incompatible {
                op: "causal_attention",
                detail: format!(
                    "rows {rows} must divide by batch {batch} and width {d} by heads {heads}"
                ),
            });
        }
        let n = rows / batch;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); batch * heads * n * n];
        let mut out = Tensor::zeros(&[rows, d]);

        let mut qh = vec![T::zero(); n * dh];
        let mut kh = vec![T::zero(); n * dh];
        let mut vh = vec![T::zero(); n * dh];
        let mut scores = vec![T::zero(); n * n];
        let mut oh = vec![T::zero(); n * dh];
        for b in 0..batch {
            for hd in 0..heads {
                copy_block(qv.data(), d, b * n, n, hd * dh, dh, &mut qh);
                copy_block(kv.data(), d, b * n, n, hd * dh, dh, &mut kh);
                copy_block(vv.data(), d, b * n, n, hd * dh, dh, &mut vh);
                // scores = qh @ kh^T, scaled.
                T::gemm(n, dh, n, &qh, dh as isize, 1, &kh, 1, dh as isize, T::zero(), &mut scores);
                let p = &mut probs[(b * heads + hd) * n * n..(b * heads + hd + 1) * n * n];
                for i in 0..n {
                    for s in &mut scores[i * n..i * n + i + 1] {
                        *s *= scale;
                    }
                    softmax_into(&scores[i * n..i * n + i + 1], &mut p[i * n..i * n + i + 1]);
                }
                // oh = probs @ vh; upper-triangular entries of probs are zero.
                T::gemm(n, n, dh, p, n as isize, 1, &vh, dh as isize, 1, T::zero(), &mut oh);
                add_block(out.data_mut(), d, b * n, n, hd * dh, dh, &oh, false);
            }
        }
        Ok(self.push_from(
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Forward emits `codes` verbatim; backward passes the incoming gradient
    /// to `z` unchanged (the quantizer's straight-through estimator).
    pub fn straight_through(&mut self, z: Var, codes: Tensor<T>) -> Result<Var, TensorError> {
        if codes.shape() != self.values[z.0].shape() {
            return Err(TensorError::ShapeMismatch {
                op: "straight_through",
                lhs: self.values[z.0].shape().to_vec(),
                rhs: codes.shape().to_vec(),
            });
        }
        Ok(self.push_from(codes, Op::StraightThrough { z }, &[z]))
    }

    /// 2-D convolution of `x: [c_in, h, w]` with `w: [c_out, c_in, kh, kw]`
    /// and per-channel bias, zero padding `pad`, square stride.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let (xv, wv, bv) = (&self.values[x.0], &self.values[w.0], &self.values[bias.0]);
        if xv.rank() != 3 || wv.rank() != 4 || wv.shape()[1] != xv.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let (c_in, h, w_in) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (c_out, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
        if bv.rank() != 1 || bv.shape()[0] != c_out {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: wv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        if h + 2 * pad < kh || w_in + 2 * pad < kw || stride == 0 {
            return Err(TensorError::Incompatible {
                op: "conv2d",
                detail: format!(
                    "kernel {kh}x{kw} stride {stride} pad {pad} exceeds input {h}x{w_in}"
                ),
            });
        }
        // Floor output size, as is conventional for strided convolution.
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w_in + 2 * pad - kw) / stride + 1;
        let cols = im2col(xv.data(), c_in, h, w_in, kh, kw, stride, pad, oh, ow);
        let mut out = Tensor::zeros(&[c_out, oh, ow]);
        T::gemm(
            c_out,
            c_in * kh * kw,
            oh * ow,
            wv.data(),
            (c_in * kh * kw) as isize,
            1,
            &cols,
            (oh * ow) as isize,
            1,
            T::zero(),
            out.data_mut(),
        );
        for co in 0..c_out {
            let b = bv.data()[co];
            for v in &mut out.data_mut()[co * oh * ow..(co + 1) * oh * ow] {
                *v += b;
            }
        }
        Ok(self.push_from(
            out,
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
                cols,
            },
            &[x, w, bias],
        ))
    }

    /// Transposed 2-D convolution (the adjoint of [`Tape::conv2d`]'s spatial
    /// map) of `x: [c_in, h, w]` with `w: [c_in, c_out, kh, kw]`.
    /// Output spatial size is `(h - 1) * stride + kh - 2 * pad`.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let (xv, wv, bv) = (&self.values[x.0], &self.values[w.0], &self.values[bias.0]);
        if xv.rank() != 3 || wv.rank() != 4 || wv.shape()[0] != xv.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_transpose",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let (c_in, h, w_in) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (c_out, kh, kw) = (wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        if bv.rank() != 1 || bv.shape()[0] != c_out {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d_transpose",
                lhs: wv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        if (h - 1) * stride + kh < 2 * pad || (w_in - 1) * stride + kw < 2 * pad {
            return Err(TensorError::Incompatible {
                op: "conv2d_transpose",
                detail: format!("padding {pad} exceeds output extent"),
            });
        }
        let oh = (h - 1) * stride + kh - 2 * pad;
        let ow = (w_in - 1) * stride + kw - 2 * pad;
        // tmp[(co, u, v), (i, j)] = sum_ci w[ci, co, u, v] * x[ci, i, j]
        let mut tmp = vec![T::zero(); c_out * kh * kw * h * w_in];
        T::gemm(
            c_out * kh * kw,
            c_in,
            h * w_in,
            wv.data(),
            1,
            (c_out * kh * kw) as isize,
            xv.data(),
            (h * w_in) as isize,
            1,
            T::zero(),
            &mut tmp,
        );
        let mut out = Tensor::zeros(&[c_out, oh, ow]);
        col2im_add(&tmp, c_out, oh, ow, kh, kw, stride, pad, h, w_in, out.data_mut());
        for co in 0..c_out {
            let b = bv.data()[co];
            for v in &mut out.data_mut()[co * oh * ow..(co + 1) * oh * ow] {
                *v += b;
            }
        }
        Ok(self.push_from(
            out,
            Op::ConvTranspose2d {
                x,
                w,
                bias,
                stride,
                pad,
            },
            &[x, w, bias],
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.values[x.0].sum());
        self.push_from(out, Op::SumAll { x }, &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = T::from_f64(self.values[x.0].numel() as f64);
        let out = Tensor::scalar(self.values[x.0].sum() / n);
        self.push_from(out, Op::MeanAll { x }, &[x])
    }

    /// Mean masked cross-entropy between `logits: [n, v]` rows and integer
    /// `targets`, weighted per position. Positions with zero weight are
    /// skipped entirely: they contribute exactly zero loss and gradient.
    /// A zero total weight yields loss 0 and sets `all_masked`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[T],
    ) -> Result<CrossEntropyOut, TensorError> {
        let lv = &self.values[logits.0];
        if lv.rank() != 2 || targets.len() != lv.shape()[0] || weights.len() != targets.len() {
            return Err(TensorError::Incompatible {
                op: "softmax_cross_entropy",
                detail: format!(
                    "logits {:?} with {} targets and {} weights",
                    lv.shape(),
                    targets.len(),
                    weights.len()
                ),
            });
        }
        let (n, v) = (lv.shape()[0], lv.shape()[1]);
        for &t in targets {
            if t >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "softmax_cross_entropy",
                    index: t,
                    bound: v,
                });
            }
        }
        for &w in weights {
            if !w.is_finite() || w < T::zero() {
                return Err(TensorError::NonFinite {
                    op: "softmax_cross_entropy",
                });
            }
        }
        let mut wsum = T::zero();
        for &w in weights {
            wsum += w;
        }
        let all_masked = wsum == T::zero();
        let mut probs = vec![T::zero(); if all_masked { 0 } else { n * v }];
        let mut loss = T::zero();
        if !all_masked {
            for i in 0..n {
                let w = weights[i];
                if w == T::zero() {
                    continue;
                }
                let row = &lv.data()[i * v..(i + 1) * v];
                let p = &mut probs[i * v..(i + 1) * v];
                let mut max = T::neg_infinity();
                for &x in row {
                    if x > max {
                        max = x;
                    }
                }
                let mut sum = T::zero();
                for (pj, &x) in p.iter_mut().zip(row) {
                    let e = (x - max).exp();
                    *pj = e;
                    sum += e;
                }
                let lse = max + sum.ln();
                for pj in p.iter_mut() {
                    *pj /= sum;
                }
                loss += w * (lse - row[targets[i]]);
            }
            loss /= wsum;
        }
        let out = self.push_from(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                wsum,
            },
            &[logits],
        );
        Ok(CrossEntropyOut {
            loss: out,
            all_masked,
        })
    }

    /// Reverse pass from a scalar root. May be called once per tape; op
    /// caches are consumed. Leaf gradients remain readable via `grad`.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::Incompatible {
                op: "backward",
                detail: "backward already ran on this tape".into(),
            });
        }
        if self.values[root.0].numel() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: self.values[root.0].shape().to_vec(),
            });
        }
        self.backward_done = true;
        if !self.requires[root.0] {
            return Ok(());
        }
        let shape = self.values[root.0].shape().to_vec();
        self.grads[root.0] = Some(Tensor::full(&shape, T::one()));
        for i in (0..=root.0).rev() {
            if !self.requires[i] {
                continue;
            }
            let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
            if matches!(op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                self.ops[i] = op;
                continue;
            };
            backprop(op, &g, &self.values, &mut self.grads, &self.requires);
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Copy a `[rows, cols]` block out of a row-major matrix with `stride`
/// columns, starting at `(row0, col0)`.
fn copy_block<T: Scalar>(
    src: &[T],
    stride: usize,
    row0: usize,
    rows: usize,
    col0: usize,
    cols: usize,
    dst: &mut [T],
) {
    for i in 0..rows {
        let s = (row0 + i) * stride + col0;
        dst[i * cols..(i + 1) * cols].copy_from_slice(&src[s..s + cols]);
    }
}

/// Write (`accumulate = true`: add) a block back into a row-major matrix.
fn add_block<T: Scalar>(
    dst: &mut [T],
    stride: usize,
    row0: usize,
    rows: usize,
    col0: usize,
    cols: usize,
    src: &[T],
    accumulate: bool,
) {
    for i in 0..rows {
        let d = (row0 + i) * stride + col0;
        if accumulate {
            for j in 0..cols {
                dst[d + j] += src[i * cols + j];
            }
        } else {
            dst[d..d + cols].copy_from_slice(&src[i * cols..(i + 1) * cols]);
        }
    }
}

/// Patch matrix: `out[(c, u, v), (oy, ox)] = src[c, oy*s + u - p, ox*s + v - p]`
/// with zeros outside the input.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let cols_n = oh * ow;
    let mut out = vec![T::zero(); c * kh * kw * cols_n];
    for ci in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let r = (ci * kh + u) * kw + v;
                for oy in 0..oh {
                    let iy = oy * stride + u;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let src_row = (ci * h + iy - pad) * w;
                    let dst_row = r * cols_n + oy * ow;
                    for ox in 0..ow {
                        let ix = ox * stride + v;
                        if ix < pad || ix - pad >= w {
                            continue;
                        }
                        out[dst_row + ox] = src[src_row + ix - pad];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add patches into a `[c, h, w]` image.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dst: &mut [T],
) {
    let cols_n = oh * ow;
    for ci in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let r = (ci * kh + u) * kw + v;
                for oy in 0..oh {
                    let iy = oy * stride + u;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let dst_row = (ci * h + iy - pad) * w;
                    let src_row = r * cols_n + oy * ow;
                    for ox in 0..ow {
                        let ix = ox * stride + v;
                        if ix < pad || ix - pad >= w {
                            continue;
                        }
                        dst[dst_row + ix - pad] += cols[src_row + ox];
                    }
                }
            }
        }
    }
}

/// Allocate-on-demand access to a gradient buffer; `None` when the node does
/// not require gradients.
fn acc<'a, T: Scalar>(
    grads: &'a mut [Option<Tensor<T>>],
    requires: &[bool],
    v: Var,
    shape: &[usize],
) -> Option<&'a mut [T]> {
    if !requires[v.0] {
        return None;
    }
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(shape));
    }
    Some(slot.as_mut().unwrap().data_mut())
}

fn backprop<T: Scalar>(
    op: Op<T>,
    g: &Tensor<T>,
    values: &[Tensor<T>],
    grads: &mut [Option<Tensor<T>>],
    requires: &[bool],
) {
    match op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, k) = (values[a.0].shape()[0], values[a.0].shape()[1]);
            let n = values[b.0].shape()[1];
            if let Some(da) = acc(grads, requires, a, values[a.0].shape()) {
                // da += g @ b^T
                T::gemm(m, n, k, g.data(), n as isize, 1, values[b.0].data(), 1, n as isize, T::one(), da);
            }
            if let Some(db) = acc(grads, requires, b, values[b.0].shape()) {
                // db += a^T @ g
                T::gemm(k, m, n, values[a.0].data(), 1, k as isize, g.data(), n as isize, 1, T::one(), db);
            }
        }
        Op::Add { a, b } => {
            for v in [a, b] {
                if let Some(dv) = acc(grads, requires, v, g.shape()) {
                    for (d, &gi) in dv.iter_mut().zip(g.data()) {
                        *d += gi;
                    }
                }
            }
        }
        Op::Mul { a, b } => {
            if let Some(da) = acc(grads, requires, a, g.shape()) {
                for ((d, &gi), &bv) in da.iter_mut().zip(g.data()).zip(values[b.0].data()) {
                    *d += gi * bv;
                }
            }
            if let Some(db) = acc(grads, requires, b, g.shape()) {
                for ((d, &gi), &av) in db.iter_mut().zip(g.data()).zip(values[a.0].data()) {
                    *d += gi * av;
                }
            }
        }
        Op::Scale { a, c } => {
            if let Some(da) = acc(grads, requires, a, g.shape()) {
                for (d, &gi) in da.iter_mut().zip(g.data()) {
                    *d += gi * c;
                }
            }
        }
        Op::Transpose { a } => {
            if let Some(da) = acc(grads, requires, a, values[a.0].shape()) {
                let (m, n) = (values[a.0].shape()[0], values[a.0].shape()[1]);
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] += g.data()[j * m + i];
                    }
                }
            }
        }
        Op::Reshape { a } => {
            if let Some(da) = acc(grads, requires, a, values[a.0].shape()) {
                for (d, &gi) in da.iter_mut().zip(g.data()) {
                    *d += gi;
                }
            }
        }
        Op::GatherRows { table, ids } => {
            if let Some(dt) = acc(grads, requires, table, values[table.0].shape()) {
                let d = values[table.0].shape()[1];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g.data()[i * d + j];
                    }
                }
            }
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let (n, d) = (values[x.0].shape()[0], values[x.0].shape()[1]);
            let dn = T::from_f64(d as f64);
            if let Some(dgain) = acc(grads, requires, gain, values[gain.0].shape()) {
                for i in 0..n {
                    let inv = inv_rms[i];
                    for j in 0..d {
                        dgain[j] += g.data()[i * d + j] * values[x.0].data()[i * d + j] * inv;
                    }
                }
            }
            if let Some(dx) = acc(grads, requires, x, values[x.0].shape()) {
                let gainv = values[gain.0].data();
                let xv = values[x.0].data();
                for i in 0..n {
                    let inv = inv_rms[i];
                    // h = g * gain is the gradient at u = x * inv_rms.
                    let mut hdotx = T::zero();
                    for j in 0..d {
                        hdotx += g.data()[i * d + j] * gainv[j] * xv[i * d + j];
                    }
                    let coeff = hdotx * inv * inv * inv / dn;
                    for j in 0..d {
                        dx[i * d + j] += g.data()[i * d + j] * gainv[j] * inv - xv[i * d + j] * coeff;
                    }
                }
            }
        }
        Op::Silu { x } => {
            if let Some(dx) = acc(grads, requires, x, g.shape()) {
                for ((d, &gi), &xv) in dx.iter_mut().zip(g.data()).zip(values[x.0].data()) {
                    *d += gi * silu_grad(xv);
                }
            }
        }
        Op::CausalAttention {
            q,
            k,
            v,
            batch,
            heads,
            probs,
        } => {
            let (rows, d) = (values[q.0].shape()[0], values[q.0].shape()[1]);
            let n = rows / batch;
            let dh = d / heads;
            let scale = T::from_f64(1.0 / (dh as f64).sqrt());
            let mut qh = vec![T::zero(); n * dh];
            let mut kh = vec![T::zero(); n * dh];
            let mut vh = vec![T::zero(); n * dh];
            let mut gh = vec![T::zero(); n * dh];
            let mut dp = vec![T::zero(); n * n];
            let mut ds = vec![T::zero(); n * n];
            let mut dblock = vec![T::zero(); n * dh];
            // Split borrows: q/k/v gradients may alias each other only via
            // distinct Vars, so accumulate one input at a time.
            for b in 0..batch {
                for hd in 0..heads {
                    let p = &probs[(b * heads + hd) * n * n..(b * heads + hd + 1) * n * n];
                    copy_block(values[q.0].data(), d, b * n, n, hd * dh, dh, &mut qh);
                    copy_block(values[k.0].data(), d, b * n, n, hd * dh, dh, &mut kh);
                    copy_block(values[v.0].data(), d, b * n, n, hd * dh, dh, &mut vh);
                    copy_block(g.data(), d, b * n, n, hd * dh, dh, &mut gh);
                    // dv_h = probs^T @ g_h
                    if requires[v.0] {
                        T::gemm(n, n, dh, p, 1, n as isize, &gh, dh as isize, 1, T::zero(), &mut dblock);
                        if let Some(dv) = acc(grads, requires, v, values[v.0].shape()) {
                            add_block(dv, d, b * n, n, hd * dh, dh, &dblock, true);
                        }
                    }
                    if !(requires[q.0] || requires[k.0]) {
                        continue;
                    }
                    // dp = g_h @ v_h^T, then softmax jacobian restricted to
                    // the causal prefix, with the score scale folded in.
                    T::gemm(n, dh, n, &gh, dh as isize, 1, &vh, 1, dh as isize, T::zero(), &mut dp);
                    for i in 0..n {
                        let mut dot = T::zero();
                        for j in 0..=i {
                            dot += p[i * n + j] * dp[i * n + j];
                        }
                        for j in 0..n {
                            ds[i * n + j] = if j <= i {
                                p[i * n + j] * (dp[i * n + j] - dot) * scale
                            } else {
                                T::zero()
                            };
                        }
                    }
                    if requires[q.0] {
                        // dq_h = ds @ k_h
                        T::gemm(n, n, dh, &ds, n as isize, 1, &kh, dh as isize, 1, T::zero(), &mut dblock);
                        if let Some(dq) = acc(grads, requires, q, values[q.0].shape()) {
                            add_block(dq, d, b * n, n, hd * dh, dh, &dblock, true);
                        }
                    }
                    if requires[k.0] {
                        // dk_h = ds^T @ q_h
                        T::gemm(n, n, dh, &ds, 1, n as isize, &qh, dh as isize, 1, T::zero(), &mut dblock);
                        if let Some(dk) = acc(grads, requires, k, values[k.0].shape()) {
                            add_block(dk, d, b * n, n, hd * dh, dh, &dblock, true);
                        }
                    }
                }
            }
        }
        Op::StraightThrough { z } => {
            if let Some(dz) = acc(grads, requires, z, g.shape()) {
                for (d, &gi) in dz.iter_mut().zip(g.data()) {
                    *d += gi;
                }
            }
        }
        Op::Conv2d {
            x,
            w,
            bias,
            stride,
            pad,
            cols,
        } => {
            let (c_in, h, w_in) = (
                values[x.0].shape()[0],
                values[x.0].shape()[1],
                values[x.0].shape()[2],
            );
            let (c_out, kh, kw) = (
                values[w.0].shape()[0],
                values[w.0].shape()[2],
                values[w.0].shape()[3],
            );
            let oh = (h + 2 * pad - kh) / stride + 1;
            let ow = (w_in + 2 * pad - kw) / stride + 1;
            let spatial = oh * ow;
            if let Some(db) = acc(grads, requires, bias, values[bias.0].shape()) {
                for co in 0..c_out {
                    let mut s = T::zero();
                    for &gi in &g.data()[co * spatial..(co + 1) * spatial] {
                        s += gi;
                    }
                    db[co] += s;
                }
            }
            if let Some(dw) = acc(grads, requires, w, values[w.0].shape()) {
                // dw = g_mat @ cols^T
                T::gemm(
                    c_out,
                    spatial,
                    c_in * kh * kw,
                    g.data(),
                    spatial as isize,
                    1,
                    &cols,
                    1,
                    spatial as isize,
                    T::one(),
                    dw,
                );
            }
            if let Some(dx) = acc(grads, requires, x, values[x.0].shape()) {
                // dcols = w_mat^T @ g_mat, then scatter back to the image.
                let mut dcols = vec![T::zero(); c_in * kh * kw * spatial];
                T::gemm(
                    c_in * kh * kw,
                    c_out,
                    spatial,
                    values[w.0].data(),
                    1,
                    (c_in * kh * kw) as isize,
                    g.data(),
                    spatial as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                );
                col2im_add(&dcols, c_in, h, w_in, kh, kw, stride, pad, oh, ow, dx);
            }
        }
        Op::ConvTranspose2d {
            x,
            w,
            bias,
            stride,
            pad,
        } => {
            let (c_in, h, w_in) = (
                values[x.0].shape()[0],
                values[x.0].shape()[1],
                values[x.0].shape()[2],
            );
            let (c_out, kh, kw) = (
                values[w.0].shape()[1],
                values[w.0].shape()[2],
                values[w.0].shape()[3],
            );
            let oh = (h - 1) * stride + kh - 2 * pad;
            let ow = (w_in - 1) * stride + kw - 2 * pad;
            if let Some(db) = acc(grads, requires, bias, values[bias.0].shape()) {
                for co in 0..c_out {
                    let mut s = T::zero();
                    for &gi in &g.data()[co * oh * ow..(co + 1) * oh * ow] {
                        s += gi;
                    }
                    db[co] += s;
                }
            }
            if requires[x.0] || requires[w.0] {
                // gcols[(co, u, v), (i, j)] = g[co, i*s + u - p, j*s + v - p]
                let gcols = im2col(g.data(), c_out, oh, ow, kh, kw, stride, pad, h, w_in);
                if let Some(dx) = acc(grads, requires, x, values[x.0].shape()) {
                    // dx = w_mat @ gcols
                    T::gemm(
                        c_in,
                        c_out * kh * kw,
                        h * w_in,
                        values[w.0].data(),
                        (c_out * kh * kw) as isize,
                        1,
                        &gcols,
                        (h * w_in) as isize,
                        1,
                        T::one(),
                        dx,
                    );
                }
                if let Some(dw) = acc(grads, requires, w, values[w.0].shape()) {
                    // dw = x_mat @ gcols^T
                    T::gemm(
                        c_in,
                        h * w_in,
                        c_out * kh * kw,
                        values[x.0].data(),
                        (h * w_in) as isize,
                        1,
                        &gcols,
                        1,
                        (h * w_in) as isize,
                        T::one(),
                        dw,
                    );
                }
            }
        }
        Op::SumAll { x } => {
            let gi = g.data()[0];
            if let Some(dx) = acc(grads, requires, x, values[x.0].shape()) {
                for d in dx.iter_mut() {
                    *d += gi;
                }
            }
        }
        Op::MeanAll { x } => {
            let gi = g.data()[0] / T::from_f64(values[x.0].numel() as f64);
            if let Some(dx) = acc(grads, requires, x, values[x.0].shape()) {
                for d in dx.iter_mut() {
                    *d += gi;
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
            wsum,
        } => {
            if wsum == T::zero() {
                return;
            }
            if let Some(dl) = acc(grads, requires, logits, values[logits.0].shape()) {
                let v = values[logits.0].shape()[1];
                let gi = g.data()[0] / wsum;
                for (i, &t) in targets.iter().enumerate() {
                    let w = weights[i];
                    if w == T::zero() {
                        continue;
                    }
                    let c = gi * w;
                    let p = &probs[i * v..(i + 1) * v];
                    for j in 0..v {
                        dl[i * v + j] += c * (p[j] - if j == t { T::one() } else { T::zero() });
                    }
                }
            }
        }
    }
}
