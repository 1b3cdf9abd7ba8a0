//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends one node to the [`Tape`]; a node only refers to
//! nodes recorded before it, so the node vector is already a topological
//! order and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use wpnas::numerics::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::vector(vec![2.0, -3.0]));
//! let sq = tape.mul(w, w).unwrap();
//! let s = tape.sum(sq).unwrap();
//! let loss = tape.scale(s, 0.5).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(w).data(), &[2.0, -3.0]);
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddTrailing(usize, usize),
    MulTrailing(usize, usize),
    AddChannel(usize, usize),
    Affine {
        x: usize,
        scale: f64,
    },
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Concat(Vec<usize>),
    Sum(usize),
    Mean(usize),
    RowMean(usize),
    Gather {
        x: usize,
        index: Vec<usize>,
    },
    GatherRows {
        x: usize,
        index: Vec<usize>,
    },
    Reshape(usize),
    Crop {
        x: usize,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    GlobalAvgPool(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Single-owner record of a forward computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every recorded node.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the loss does not depend on `v` at all.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`, zero-filled when the loss ignores it.
    pub fn wrt(&self, v: Var) -> Tensor {
        assert_eq!(v.tape, self.tape, "variable from a different tape");
        match &self.grads[v.idx] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.idx]),
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.idx).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn conv_out(h: usize, k: usize, pad: usize) -> Option<usize> {
    (h + 2 * pad).checked_sub(k).map(|d| d + 1)
}

/// Unfolds `[N, C, H, W]` into `[C·kh·kw, N·Ho·Wo]` columns.
pub(crate) fn im2col(input: &Tensor, kh: usize, kw: usize, pad: usize) -> (Vec<f64>, usize, usize) {
    let s = input.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let ho = conv_out(h, kh, pad).expect("kernel larger than padded input");
    let wo = conv_out(w, kw, pad).expect("kernel larger than padded input");
    let ncols = n * ho * wo;
    let mut cols = vec![0.0; c * kh * kw * ncols];
    let x = input.data();
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for ni in 0..n {
                    let src = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ni * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[base + ox] = src[iy as usize * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub(crate) fn col2im(cols: &[f64], shape: &[usize], kh: usize, kw: usize, pad: usize, out: &mut [f64]) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let ho = conv_out(h, kh, pad).unwrap();
    let wo = conv_out(w, kw, pad).unwrap();
    let ncols = n * ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for ni in 0..n {
                    let dst = &mut out[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ni * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[iy as usize * w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let (rows, cols) = x.rows_cols();
    let mut out = x.data().to_vec();
    for r in 0..rows {
        let row = &mut out[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let (rows, cols) = x.rows_cols();
    let mut out = x.data().to_vec();
    for r in 0..rows {
        let row = &mut out[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Row-wise softmax over the last axis, outside any tape.
pub fn softmax(x: &Tensor) -> Tensor {
    softmax_rows(x)
}

/// Numerically stable `log(sum(exp(v)))`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Tape(format!("variable {v:?} is not on this tape")));
        }
        Ok(v.idx)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        &self.nodes[v.idx].value
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(ia, ib)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(out, op(ia, ib)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn trailing(&mut self, name: &'static str, a: Var, b: Var, mul: bool) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(name, ta, tb));
        }
        let inner = tb.len();
        let data = ta
            .data()
            .chunks(inner)
            .flat_map(|chunk| {
                chunk
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| if mul { x * y } else { x + y })
            })
            .collect();
        let out = Tensor::from_parts(sa.to_vec(), data);
        let op = if mul {
            Op::MulTrailing(ia, ib)
        } else {
            Op::AddTrailing(ia, ib)
        };
        Ok(self.push(out, op))
    }

    /// Adds `b` to every trailing block of `a` whose shape equals `b`'s
    /// (bias-add for `[n, m] + [m]`).
    pub fn add_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        self.trailing("add_trailing", a, b, false)
    }

    /// Multiplies every trailing block of `a` elementwise by `b`.
    pub fn mul_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        self.trailing("mul_trailing", a, b, true)
    }

    /// Per-channel bias for `[N, C, H, W]` feature maps.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(bias)?);
        let (tx, tb) = (self.val(ix), self.val(ib));
        if tx.shape().len() != 4 || tb.shape() != [tx.shape()[1]] {
            return Err(shape_err("add_channel_bias", tx, tb));
        }
        let c = tx.shape()[1];
        let plane = tx.shape()[2] * tx.shape()[3];
        let mut data = tx.data().to_vec();
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            let b = tb.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(out, Op::AddChannel(ix, ib)))
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = self.val(ix).map(|v| scale * v + shift);
        Ok(self.push(out, Op::Affine { x: ix, scale }))
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: fn(usize) -> Op) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = self.val(ix).map(f);
        Ok(self.push(out, op(ix)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::exp, Op::Exp)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = softmax_rows(self.val(ix));
        Ok(self.push(out, Op::Softmax(ix)))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = log_softmax_rows(self.val(ix));
        Ok(self.push(out, Op::LogSoftmax(ix)))
    }

    /// Concatenation along the last axis; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let first = self
            .val(*idx.first().ok_or_else(|| Error::Tape("concat of nothing".into()))?)
            .clone();
        let lead = &first.shape()[..first.shape().len() - 1];
        for &i in &idx[1..] {
            let t = self.val(i);
            if &t.shape()[..t.shape().len() - 1] != lead {
                return Err(shape_err("concat", &first, t));
            }
        }
        let rows = first.rows_cols().0;
        let widths: Vec<usize> = idx.iter().map(|&i| self.val(i).rows_cols().1).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&i, &w) in idx.iter().zip(&widths) {
                data.extend_from_slice(&self.val(i).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(idx)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = Tensor::scalar(self.val(ix).sum());
        Ok(self.push(out, Op::Sum(ix)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.val(ix);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        Ok(self.push(out, Op::Mean(ix)))
    }

    /// Mean over the last axis: `[.., m] → [..]` (a 1-D input gives `[1]`).
    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.val(ix);
        let (rows, cols) = t.rows_cols();
        let data: Vec<f64> = t
            .data()
            .chunks(cols)
            .map(|c| c.iter().sum::<f64>() / cols as f64)
            .collect();
        let shape = if t.shape().len() == 1 {
            vec![1]
        } else {
            t.shape()[..t.shape().len() - 1].to_vec()
        };
        debug_assert_eq!(data.len(), rows);
        Ok(self.push(Tensor::from_parts(shape, data), Op::RowMean(ix)))
    }

    /// Picks flat elements: output shape `[index.len()]`.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.val(ix);
        if index.is_empty() || index.iter().any(|&i| i >= t.len()) {
            return Err(Error::Tape(format!(
                "gather: index out of range for {} elements",
                t.len()
            )));
        }
        let data = index.iter().map(|&i| t.data()[i]).collect();
        let out = Tensor::from_parts(vec![index.len()], data);
        Ok(self.push(
            out,
            Op::Gather {
                x: ix,
                index: index.to_vec(),
            },
        ))
    }

    /// Picks rows of a 2-D tensor (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.val(ix);
        if t.shape().len() != 2 || index.is_empty() || index.iter().any(|&i| i >= t.shape()[0]) {
            return Err(Error::Tape(format!("gather_rows: bad index for shape {:?}", t.shape())));
        }
        let cols = t.shape()[1];
        let mut data = Vec::with_capacity(index.len() * cols);
        for &r in index {
            data.extend_from_slice(&t.data()[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::from_parts(vec![index.len(), cols], data);
        Ok(self.push(
            out,
            Op::GatherRows {
                x: ix,
                index: index.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = self.val(ix).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(ix)))
    }

    /// Keeps the top-left `h × w` window of the last two axes.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.val(ix);
        let s = t.shape();
        if s.len() < 2 || h > s[s.len() - 2] || w > s[s.len() - 1] || h == 0 || w == 0 {
            return Err(Error::Shape {
                op: "crop",
                lhs: s.to_vec(),
                rhs: vec![h, w],
            });
        }
        let (fh, fw) = (s[s.len() - 2], s[s.len() - 1]);
        let mut data = Vec::with_capacity(t.len() / (fh * fw) * h * w);
        for plane in t.data().chunks(fh * fw) {
            for r in 0..h {
                data.extend_from_slice(&plane[r * fw..r * fw + w]);
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([h, w]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Crop { x: ix }))
    }

    /// Stride-1 convolution of `[N, C, H, W]` with `[O, C, kh, kw]` via
    /// im2col and a single matrix product; `pad` zeros on every side.
    pub fn conv2d(&mut self, input: Var, kernel: Var, pad: usize) -> Result<Var> {
        let (ii, ik) = (self.idx(input)?, self.idx(kernel)?);
        let (tx, tk) = (self.val(ii), self.val(ik));
        let (sx, sk) = (tx.shape(), tk.shape());
        if sx.len() != 4
            || sk.len() != 4
            || sx[1] != sk[1]
            || conv_out(sx[2], sk[2], pad).is_none()
            || conv_out(sx[3], sk[3], pad).is_none()
        {
            return Err(shape_err("conv2d", tx, tk));
        }
        let (n, o) = (sx[0], sk[0]);
        let ckk = sk[1] * sk[2] * sk[3];
        let (cols, ho, wo) = im2col(tx, sk[2], sk[3], pad);
        let hw = ho * wo;
        let mut mat = vec![0.0; o * n * hw];
        gemm(o, ckk, n * hw, tk.data(), false, &cols, false, &mut mat, false);
        let mut out = vec![0.0; n * o * hw];
        for oi in 0..o {
            for ni in 0..n {
                out[(ni * o + oi) * hw..(ni * o + oi + 1) * hw]
                    .copy_from_slice(&mat[oi * n * hw + ni * hw..oi * n * hw + (ni + 1) * hw]);
            }
        }
        let value = Tensor::from_parts(vec![n, o, ho, wo], out);
        Ok(self.push(
            value,
            Op::Conv2d {
                input: ii,
                kernel: ik,
                pad,
                cols,
            },
        ))
    }

    /// `[N, C, H, W] → [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.val(ix);
        if t.shape().len() != 4 {
            return Err(Error::Shape {
                op: "global_avg_pool",
                lhs: t.shape().to_vec(),
                rhs: vec![4],
            });
        }
        let plane = t.shape()[2] * t.shape()[3];
        let data = t
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor::from_parts(vec![t.shape()[0], t.shape()[1]], data);
        Ok(self.push(out, Op::GlobalAvgPool(ix)))
    }

    /// Mean cross-entropy of `[N, K]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let t = self.val(il);
        if t.shape().len() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let k = t.shape()[1];
        if labels.iter().any(|&l| l >= k) {
            return Err(Error::Tape(format!(
                "cross_entropy: label out of range for {k} classes"
            )));
        }
        let logp = log_softmax_rows(t);
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(r, &l)| logp.data()[r * k + l])
            .sum::<f64>()
            / labels.len() as f64;
        let probs = logp.data().iter().map(|v| v.exp()).collect();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: il,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Consumes the tape and back-propagates from a scalar `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let il = self.idx(loss)?;
        if !self.val(il).is_scalar() {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(il).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[il] = Some(Tensor::full(self.val(il).shape(), 1.0));

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |j: usize, d: Tensor| match &mut grads[j] {
            Some(existing) => existing.add_assign(&d),
            slot @ None => *slot = Some(d),
        };
        let like = |t: &Tensor, data: Vec<f64>| Tensor::from_parts(t.shape().to_vec(), data);
        let zip = |a: &Tensor, b: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, tb.data(), true, &mut da, false);
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, false);
                acc(*a, like(ta, da));
                acc(*b, like(tb, db));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                acc(*a, like(ta, zip(g, tb, &|x, y| x * y)));
                acc(*b, like(tb, zip(g, ta, &|x, y| x * y)));
            }
            Op::AddTrailing(a, b) => {
                let tb = self.val(*b);
                let mut db = vec![0.0; tb.len()];
                for chunk in g.data().chunks(tb.len()) {
                    db.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                }
                acc(*a, g.clone());
                acc(*b, like(tb, db));
            }
            Op::MulTrailing(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let inner = tb.len();
                let mut da = Vec::with_capacity(ta.len());
                let mut db = vec![0.0; inner];
                for (gc, ac) in g.data().chunks(inner).zip(ta.data().chunks(inner)) {
                    for j in 0..inner {
                        da.push(gc[j] * tb.data()[j]);
                        db[j] += gc[j] * ac[j];
                    }
                }
                acc(*a, like(ta, da));
                acc(*b, like(tb, db));
            }
            Op::AddChannel(x, b) => {
                let tb = self.val(*b);
                let c = tb.len();
                let plane = y.shape()[2] * y.shape()[3];
                let mut db = vec![0.0; c];
                for (k, chunk) in g.data().chunks(plane).enumerate() {
                    db[k % c] += chunk.iter().sum::<f64>();
                }
                acc(*x, g.clone());
                acc(*b, like(tb, db));
            }
            Op::Affine { x, scale } => acc(*x, g.map(|v| v * scale)),
            Op::Relu(x) => {
                let tx = self.val(*x);
                acc(*x, like(tx, zip(g, tx, &|gv, xv| if xv > 0.0 { gv } else { 0.0 })));
            }
            Op::Sigmoid(x) => acc(*x, like(y, zip(g, y, &|gv, s| gv * s * (1.0 - s)))),
            Op::Tanh(x) => acc(*x, like(y, zip(g, y, &|gv, t| gv * (1.0 - t * t)))),
            Op::Exp(x) => acc(*x, like(y, zip(g, y, &|gv, e| gv * e))),
            Op::Softmax(x) => {
                let (rows, cols) = y.rows_cols();
                let mut d = vec![0.0; y.len()];
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let (yr, gr) = (&y.data()[s.clone()], &g.data()[s.clone()]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (k, dv) in d[s].iter_mut().enumerate() {
                        *dv = yr[k] * (gr[k] - dot);
                    }
                }
                acc(*x, like(y, d));
            }
            Op::LogSoftmax(x) => {
                let (rows, cols) = y.rows_cols();
                let mut d = vec![0.0; y.len()];
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let (yr, gr) = (&y.data()[s.clone()], &g.data()[s.clone()]);
                    let gsum: f64 = gr.iter().sum();
                    for (k, dv) in d[s].iter_mut().enumerate() {
                        *dv = gr[k] - yr[k].exp() * gsum;
                    }
                }
                acc(*x, like(y, d));
            }
            Op::Concat(parts) => {
                let (rows, total) = y.rows_cols();
                let mut offset = 0;
                for &p in parts {
                    let tp = self.val(p);
                    let w = tp.rows_cols().1;
                    let mut d = Vec::with_capacity(tp.len());
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    acc(p, like(tp, d));
                }
            }
            Op::Sum(x) => {
                let tx = self.val(*x);
                acc(*x, Tensor::full(tx.shape(), g.data()[0]));
            }
            Op::Mean(x) => {
                let tx = self.val(*x);
                acc(*x, Tensor::full(tx.shape(), g.data()[0] / tx.len() as f64));
            }
            Op::RowMean(x) => {
                let tx = self.val(*x);
                let (_, cols) = tx.rows_cols();
                let d = g
                    .data()
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv / cols as f64, cols))
                    .collect();
                acc(*x, like(tx, d));
            }
            Op::Gather { x, index } => {
                let tx = self.val(*x);
                let mut d = vec![0.0; tx.len()];
                for (&k, gv) in index.iter().zip(g.data()) {
                    d[k] += gv;
                }
                acc(*x, like(tx, d));
            }
            Op::GatherRows { x, index } => {
                let tx = self.val(*x);
                let cols = tx.shape()[1];
                let mut d = vec![0.0; tx.len()];
                for (r, &k) in index.iter().enumerate() {
                    for c in 0..cols {
                        d[k * cols + c] += g.data()[r * cols + c];
                    }
                }
                acc(*x, like(tx, d));
            }
            Op::Reshape(x) => {
                let tx = self.val(*x);
                acc(*x, like(tx, g.data().to_vec()));
            }
            Op::Crop { x } => {
                let tx = self.val(*x);
                let s = tx.shape();
                let (fh, fw) = (s[s.len() - 2], s[s.len() - 1]);
                let (h, w) = (y.shape()[y.shape().len() - 2], y.shape()[y.shape().len() - 1]);
                let mut d = vec![0.0; tx.len()];
                for (p, gp) in g.data().chunks(h * w).enumerate() {
                    for r in 0..h {
                        let dst = p * fh * fw + r * fw;
                        d[dst..dst + w].copy_from_slice(&gp[r * w..(r + 1) * w]);
                    }
                }
                acc(*x, like(tx, d));
            }
            Op::Conv2d {
                input,
                kernel,
                pad,
                cols,
            } => {
                let (tx, tk) = (self.val(*input), self.val(*kernel));
                let sk = tk.shape();
                let (n, o) = (tx.shape()[0], sk[0]);
                let ckk = sk[1] * sk[2] * sk[3];
                let hw = y.shape()[2] * y.shape()[3];
                // [N, O, hw] -> [O, N·hw]
                let mut gm = vec![0.0; o * n * hw];
                for oi in 0..o {
                    for ni in 0..n {
                        gm[oi * n * hw + ni * hw..oi * n * hw + (ni + 1) * hw]
                            .copy_from_slice(&g.data()[(ni * o + oi) * hw..(ni * o + oi + 1) * hw]);
                    }
                }
                let mut dk = vec![0.0; o * ckk];
                gemm(o, n * hw, ckk, &gm, false, cols, true, &mut dk, false);
                let mut dcols = vec![0.0; ckk * n * hw];
                gemm(ckk, o, n * hw, tk.data(), true, &gm, false, &mut dcols, false);
                let mut dx = vec![0.0; tx.len()];
                col2im(&dcols, tx.shape(), sk[2], sk[3], *pad, &mut dx);
                acc(*input, like(tx, dx));
                acc(*kernel, like(tk, dk));
            }
            Op::GlobalAvgPool(x) => {
                let tx = self.val(*x);
                let plane = tx.shape()[2] * tx.shape()[3];
                let d = g
                    .data()
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv / plane as f64, plane))
                    .collect();
                acc(*x, like(tx, d));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let tl = self.val(*logits);
                let k = tl.shape()[1];
                let scale = g.data()[0] / labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] -= scale;
                }
                acc(*logits, like(tl, d));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_gradients, GradCheck};
    use crate::numerics::rng::seeded;

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = tape.leaf(rows(&[&[3.0], &[4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[3.0, 4.0]);
    }

    #[test]
    fn softmax_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0; 3]));
        let s = tape.softmax(x).unwrap();
        for &p in tape.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_all_ones_gives_nines() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 5, 5]));
        let k = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d(x, k, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = tape.leaf(Tensor::zeros(&[3]));
        assert!(tape.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2]));
        let mut other = Tape::new();
        let foreign = other.leaf(Tensor::scalar(1.0));
        assert!(tape.relu(foreign).is_err());
        assert!(Tape::backward(tape, a).is_err());
        let mut t2 = Tape::new();
        let _ = t2.leaf(Tensor::scalar(0.0));
        assert!(t2.backward(foreign).is_err());
    }

    #[test]
    fn linear_and_quadratic_gradients() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![0.3, -1.0, 2.0]));
        let s = tape.sum(w).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(w).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn unused_inputs_report_none() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(1.0));
        let b = tape.leaf(Tensor::scalar(2.0));
        let s = tape.sum(a).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(b).is_none());
        assert_eq!(g.wrt(b).data(), &[0.0]);
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = seeded(7);
        let inputs = vec![
            Tensor::randn(&[2, 1, 5, 5], 1.0, &mut rng),
            Tensor::randn(&[3, 1, 3, 3], 0.5, &mut rng),
            Tensor::randn(&[3], 0.5, &mut rng),
            Tensor::randn(&[3, 2], 0.5, &mut rng),
        ];
        let report = check_gradients(&inputs, 1e-5, |tape, v| {
            let c = tape.conv2d(v[0], v[1], 1)?;
            let c = tape.add_channel_bias(c, v[2])?;
            let c = tape.tanh(c)?;
            let p = tape.global_avg_pool(c)?;
            let logits = tape.matmul(p, v[3])?;
            tape.cross_entropy(logits, &[0, 1])
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn replay_is_deterministic() {
        let run = || {
            let mut rng = seeded(11);
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::randn(&[4, 3], 1.0, &mut rng));
            let b = tape.leaf(Tensor::randn(&[3, 2], 1.0, &mut rng));
            let c = tape.matmul(a, b).unwrap();
            let c = tape.sigmoid(c).unwrap();
            let l = tape.mean(c).unwrap();
            let g = tape.backward(l).unwrap();
            (g.wrt(a), g.wrt(b))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradcheck_reports_structure() {
        let r: GradCheck = check_gradients(&[Tensor::vector(vec![1.0, 2.0])], 1e-5, |t, v| {
            let e = t.exp(v[0])?;
            t.sum(e)
        })
        .unwrap();
        assert_eq!(r.checked, 2);
    }
}
