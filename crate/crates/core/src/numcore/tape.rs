//! Wengert-tape reverse-mode differentiation over [`Tensor`] values.
//!
//! Every differentiable primitive appends a node to the tape during the
//! forward pass. `backward` walks the tape once in reverse creation order,
//! which is a reverse topological order because ops can only reference
//! earlier nodes.

use super::{NumError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Minimum(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Clamp(NodeId, f64, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    KlDivRows {
        t_log: Tensor,
        s: NodeId,
        s_log: Tensor,
    },
    LogSumExpRows(NodeId),
    ConcatCols(NodeId, NodeId),
    StackRows(Vec<NodeId>),
    Row(NodeId, usize),
    Transpose(NodeId),
    MeanAxis(NodeId, usize),
    SumAll(NodeId),
    MulRowBroadcast(NodeId, NodeId),
    AddRowBroadcast(NodeId, NodeId),
    LayerNormRows(NodeId, f64),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        pad_top: usize,
        pad_left: usize,
    },
    MaxPool2d {
        input: NodeId,
        argmax: Vec<usize>,
    },
    AvgPool2d {
        input: NodeId,
        k: usize,
    },
    SpatialMean(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a node; zeros when the node is
    /// unreachable from the loss.
    pub fn get(&self, id: NodeId, tape: &Tape) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.nodes[id.0].value.shape()),
        }
    }

    pub fn take(&mut self, id: NodeId, tape: &Tape) -> Tensor {
        self.grads[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(tape.nodes[id.0].value.shape()))
    }
}

fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    let mut out = Tensor::zeros(&[m, n]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for i in 0..m {
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut od[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// Row-wise log-softmax on a plain tensor; the reference computation shared
/// by the tape ops so teacher- and student-side probabilities are bitwise
/// comparable.
pub fn log_softmax_plain(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut v = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let row = &t.data()[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        for j in 0..c {
            v.data_mut()[i * c + j] = row[j] - lse;
        }
    }
    v
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - m).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Differentiable leaf (parameters).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input (data, detached tensors, masks).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(NumError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let v = matmul_raw(ta, tb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Matmul(a, b), rg))
    }

    fn zip_ewise(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumError::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let v = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.zip_ewise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.zip_ewise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.zip_ewise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.zip_ewise(a, b, "minimum", f64::min, Op::Minimum(a, b))
    }

    fn map_ewise(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|&x| f(x)).collect();
        let v = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(v, op, rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.map_ewise(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.map_ewise(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.map_ewise(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map_ewise(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map_ewise(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.map_ewise(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.map_ewise(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.map_ewise(a, f64::ln, Op::Log(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut v = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let row = &ta.data()[i * c..(i + 1) * c];
            let mut out = vec![0.0; c];
            softmax_row(row, &mut out);
            v.data_mut()[i * c..(i + 1) * c].copy_from_slice(&out);
        }
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let v = log_softmax_plain(ta);
        let rg = self.rg(a);
        self.push(v, Op::LogSoftmaxRows(a), rg)
    }

    /// Fused Σ p_T (log p_T − log_softmax(s)) over all rows, with p_T held
    /// constant. `teacher_log_probs` must come from [`log_softmax_plain`];
    /// both value and gradient are then exactly zero when the student logits
    /// equal the teacher's, so a cloned teacher induces no drift.
    pub fn kl_div_rows(&mut self, teacher_log_probs: &Tensor, s: NodeId) -> Result<NodeId, NumError> {
        let ts = self.value(s);
        if teacher_log_probs.shape() != ts.shape() {
            return Err(NumError::ShapeMismatch {
                op: "kl_div_rows",
                lhs: teacher_log_probs.shape().to_vec(),
                rhs: ts.shape().to_vec(),
            });
        }
        let s_log = log_softmax_plain(ts);
        let total: f64 = teacher_log_probs
            .data()
            .iter()
            .zip(s_log.data())
            .map(|(&lt, &ls)| lt.exp() * (lt - ls))
            .sum();
        let rg = self.rg(s);
        Ok(self.push(
            Tensor::scalar(total),
            Op::KlDivRows {
                t_log: teacher_log_probs.clone(),
                s,
                s_log,
            },
            rg,
        ))
    }

    /// Row-wise log-sum-exp, output shape R x 1.
    pub fn log_sum_exp_rows(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut v = Tensor::zeros(&[r, 1]);
        for i in 0..r {
            let row = &ta.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            v.data_mut()[i] = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        }
        let rg = self.rg(a);
        self.push(v, Op::LogSumExpRows(a), rg)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(NumError::ShapeMismatch {
                op: "concat_cols",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (r, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
        let mut v = Tensor::zeros(&[r, ca + cb]);
        for i in 0..r {
            v.data_mut()[i * (ca + cb)..i * (ca + cb) + ca].copy_from_slice(ta.row_slice(i));
            v.data_mut()[i * (ca + cb) + ca..(i + 1) * (ca + cb)].copy_from_slice(tb.row_slice(i));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::ConcatCols(a, b), rg))
    }

    /// Stack 1 x C rows into an N x C matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId, NumError> {
        let c = self.value(rows[0]).cols();
        let mut v = Tensor::zeros(&[rows.len(), c]);
        let mut rg = false;
        for (i, &id) in rows.iter().enumerate() {
            let t = self.value(id);
            if t.shape() != [1, c] {
                return Err(NumError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![1, c],
                    rhs: t.shape().to_vec(),
                });
            }
            v.data_mut()[i * c..(i + 1) * c].copy_from_slice(t.data());
            rg |= self.rg(id);
        }
        Ok(self.push(v, Op::StackRows(rows.to_vec()), rg))
    }

    pub fn row(&mut self, a: NodeId, i: usize) -> NodeId {
        let ta = self.value(a);
        let v = Tensor::new(vec![1, ta.cols()], ta.row_slice(i).to_vec()).expect("row");
        let rg = self.rg(a);
        self.push(v, Op::Row(a, i), rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut v = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                v.data_mut()[j * r + i] = ta.at2(i, j);
            }
        }
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    /// Mean over one axis of a 2-D tensor. axis 0 -> 1 x C, axis 1 -> R x 1.
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let v = if axis == 0 {
            let mut out = Tensor::zeros(&[1, c]);
            for i in 0..r {
                for j in 0..c {
                    out.data_mut()[j] += ta.at2(i, j) / r as f64;
                }
            }
            out
        } else {
            let mut out = Tensor::zeros(&[r, 1]);
            for i in 0..r {
                out.data_mut()[i] = ta.row_slice(i).iter().sum::<f64>() / c as f64;
            }
            out
        };
        let rg = self.rg(a);
        self.push(v, Op::MeanAxis(a, axis), rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// a: R x C, g: 1 x C, out[i][j] = a[i][j] * g[j].
    pub fn mul_row_broadcast(&mut self, a: NodeId, g: NodeId) -> Result<NodeId, NumError> {
        let (ta, tg) = (self.value(a), self.value(g));
        if tg.shape() != [1, ta.cols()] {
            return Err(NumError::ShapeMismatch {
                op: "mul_row_broadcast",
                lhs: ta.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let (r, c) = (ta.rows(), ta.cols());
        let mut v = Tensor::zeros(&[r, c]);
        for i in 0..r {
            for j in 0..c {
                v.data_mut()[i * c + j] = ta.at2(i, j) * tg.data()[j];
            }
        }
        let rg = self.rg(a) || self.rg(g);
        Ok(self.push(v, Op::MulRowBroadcast(a, g), rg))
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape() != [1, ta.cols()] {
            return Err(NumError::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (r, c) = (ta.rows(), ta.cols());
        let mut v = Tensor::zeros(&[r, c]);
        for i in 0..r {
            for j in 0..c {
                v.data_mut()[i * c + j] = ta.at2(i, j) + tb.data()[j];
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::AddRowBroadcast(a, b), rg))
    }

    /// Row-wise layer normalization (no affine part; compose with
    /// `mul_row_broadcast` / `add_row_broadcast` for gain and bias).
    pub fn layer_norm_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut v = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let row = ta.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                v.data_mut()[i * c + j] = (row[j] - mean) * inv;
            }
        }
        let rg = self.rg(a);
        self.push(v, Op::LayerNormRows(a, eps), rg)
    }

    /// Inverted dropout: multiplies by a 0 / (1/(1-rate)) mask drawn from `rng`.
    pub fn dropout<R: rand::Rng>(&mut self, a: NodeId, rate: f64, rng: &mut R) -> Result<NodeId, NumError> {
        let shape = self.value(a).shape().to_vec();
        let keep = 1.0 - rate;
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = self.constant(Tensor::new(shape, data).expect("mask"));
        self.mul(a, mask)
    }

    /// 2-D convolution with zero "same" padding.
    /// input: [Cin, H, W], kernel: [Cout, Cin, kh, kw], bias: [Cout].
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
    ) -> Result<NodeId, NumError> {
        let ti = self.value(input);
        let tk = self.value(kernel);
        if ti.shape().len() != 3 || tk.shape().len() != 4 || ti.shape()[0] != tk.shape()[1] {
            return Err(NumError::ShapeMismatch {
                op: "conv2d",
                lhs: ti.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        let (cin, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2]);
        let (cout, kh, kw) = (tk.shape()[0], tk.shape()[2], tk.shape()[3]);
        let oh = (h + stride - 1) / stride;
        let ow = (w + stride - 1) / stride;
        let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
        let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
        let (pad_top, pad_left) = (pad_h / 2, pad_w / 2);

        let tb = self.value(bias).clone();
        let ti = self.value(input).clone();
        let tk = self.value(kernel).clone();
        let mut out = Tensor::zeros(&[cout, oh, ow]);
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = tb.data()[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad_top as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad_left as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += ti.data()[(ci * h + iy as usize) * w + ix as usize]
                                    * tk.data()[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out.data_mut()[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad_top,
                pad_left,
            },
            rg,
        ))
    }

    /// Non-overlapping k x k max pooling over [C, H, W].
    pub fn max_pool2d(&mut self, input: NodeId, k: usize) -> Result<NodeId, NumError> {
        let ti = self.value(input);
        if ti.shape().len() != 3 {
            return Err(NumError::ShapeMismatch {
                op: "max_pool2d",
                lhs: ti.shape().to_vec(),
                rhs: vec![k, k],
            });
        }
        let (c, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2]);
        let (oh, ow) = (h / k, w / k);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        let mut argmax = vec![0usize; c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut besti = 0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = (ci * h + oy * k + ky) * w + ox * k + kx;
                            if ti.data()[idx] > best {
                                best = ti.data()[idx];
                                besti = idx;
                            }
                        }
                    }
                    out.data_mut()[(ci * oh + oy) * ow + ox] = best;
                    argmax[(ci * oh + oy) * ow + ox] = besti;
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(out, Op::MaxPool2d { input, argmax }, rg))
    }

    /// Non-overlapping k x k average pooling over [C, H, W].
    pub fn avg_pool2d(&mut self, input: NodeId, k: usize) -> Result<NodeId, NumError> {
        let ti = self.value(input);
        if ti.shape().len() != 3 {
            return Err(NumError::ShapeMismatch {
                op: "avg_pool2d",
                lhs: ti.shape().to_vec(),
                rhs: vec![k, k],
            });
        }
        let (c, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2]);
        let (oh, ow) = (h / k, w / k);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += ti.data()[(ci * h + oy * k + ky) * w + ox * k + kx];
                        }
                    }
                    out.data_mut()[(ci * oh + oy) * ow + ox] = acc / (k * k) as f64;
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(out, Op::AvgPool2d { input, k }, rg))
    }

    /// Mean over the spatial dims of [C, H, W], output 1 x C.
    pub fn spatial_mean(&mut self, input: NodeId) -> Result<NodeId, NumError> {
        let ti = self.value(input);
        if ti.shape().len() != 3 {
            return Err(NumError::ShapeMismatch {
                op: "spatial_mean",
                lhs: ti.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (c, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2]);
        let mut out = Tensor::zeros(&[1, c]);
        for ci in 0..c {
            out.data_mut()[ci] =
                ti.data()[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
        }
        let rg = self.rg(input);
        Ok(self.push(out, Op::SpatialMean(input), rg))
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NumError> {
        if !self.value(loss).is_scalar() {
            return Err(NumError::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            None => grads[id.0] = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                // dA = G B^T
                let mut bt = Tensor::zeros(&[tb.cols(), tb.rows()]);
                for i in 0..tb.rows() {
                    for j in 0..tb.cols() {
                        bt.data_mut()[j * tb.rows() + i] = tb.at2(i, j);
                    }
                }
                self.accum(grads, *a, matmul_raw(g, &bt));
                // dB = A^T G
                let mut at = Tensor::zeros(&[ta.cols(), ta.rows()]);
                for i in 0..ta.rows() {
                    for j in 0..ta.cols() {
                        at.data_mut()[j * ta.rows() + i] = ta.at2(i, j);
                    }
                }
                self.accum(grads, *b, matmul_raw(&at, g));
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                let mut ng = g.clone();
                for v in ng.data_mut() {
                    *v = -*v;
                }
                self.accum(grads, *b, ng);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut da = g.clone();
                for (v, &y) in da.data_mut().iter_mut().zip(tb.data()) {
                    *v *= y;
                }
                self.accum(grads, *a, da);
                let mut db = g.clone();
                for (v, &x) in db.data_mut().iter_mut().zip(ta.data()) {
                    *v *= x;
                }
                self.accum(grads, *b, db);
            }
            Op::Minimum(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut da = g.clone();
                let mut db = g.clone();
                for i in 0..g.numel() {
                    if ta.data()[i] <= tb.data()[i] {
                        db.data_mut()[i] = 0.0;
                    } else {
                        da.data_mut()[i] = 0.0;
                    }
                }
                self.accum(grads, *a, da);
                self.accum(grads, *b, db);
            }
            Op::Scale(a, c) => {
                let mut da = g.clone();
                for v in da.data_mut() {
                    *v *= c;
                }
                self.accum(grads, *a, da);
            }
            Op::AddScalar(a) => self.accum(grads, *a, g.clone()),
            Op::Clamp(a, lo, hi) => {
                let ta = self.value(*a);
                let mut da = g.clone();
                for (v, &x) in da.data_mut().iter_mut().zip(ta.data()) {
                    if x < *lo || x > *hi {
                        *v = 0.0;
                    }
                }
                self.accum(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let mut da = g.clone();
                for (v, &y) in da.data_mut().iter_mut().zip(out.data()) {
                    *v *= y * (1.0 - y);
                }
                self.accum(grads, *a, da);
            }
            Op::Tanh(a) => {
                let mut da = g.clone();
                for (v, &y) in da.data_mut().iter_mut().zip(out.data()) {
                    *v *= 1.0 - y * y;
                }
                self.accum(grads, *a, da);
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let mut da = g.clone();
                for (v, &x) in da.data_mut().iter_mut().zip(ta.data()) {
                    if x <= 0.0 {
                        *v = 0.0;
                    }
                }
                self.accum(grads, *a, da);
            }
            Op::Exp(a) => {
                let mut da = g.clone();
                for (v, &y) in da.data_mut().iter_mut().zip(out.data()) {
                    *v *= y;
                }
                self.accum(grads, *a, da);
            }
            Op::Log(a) => {
                let ta = self.value(*a);
                let mut da = g.clone();
                for (v, &x) in da.data_mut().iter_mut().zip(ta.data()) {
                    *v /= x;
                }
                self.accum(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = (out.rows(), out.cols());
                let mut da = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let p = out.row_slice(i);
                    let gr = g.row_slice(i);
                    let dot: f64 = p.iter().zip(gr).map(|(&pi, &gi)| pi * gi).sum();
                    for j in 0..c {
                        da.data_mut()[i * c + j] = p[j] * (gr[j] - dot);
                    }
                }
                self.accum(grads, *a, da);
            }
            Op::LogSoftmaxRows(a) => {
                let (r, c) = (out.rows(), out.cols());
                let mut da = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let gr = g.row_slice(i);
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..c {
                        let p = out.at2(i, j).exp();
                        da.data_mut()[i * c + j] = gr[j] - p * gsum;
                    }
                }
                self.accum(grads, *a, da);
            }
            Op::KlDivRows { t_log, s, s_log } => {
                let gs = g.data()[0];
                let mut da = Tensor::zeros(s_log.shape());
                for (d, (&ls, &lt)) in da
                    .data_mut()
                    .iter_mut()
                    .zip(s_log.data().iter().zip(t_log.data()))
                {
                    *d = gs * (ls.exp() - lt.exp());
                }
                self.accum(grads, *s, da);
            }
            Op::LogSumExpRows(a) => {
                let ta = self.value(*a);
                let (r, c) = (ta.rows(), ta.cols());
                let mut da = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let lse = out.data()[i];
                    for j in 0..c {
                        da.data_mut()[i * c + j] = g.data()[i] * (ta.at2(i, j) - lse).exp();
                    }
                }
                self.accum(grads, *a, da);
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let r = out.rows();
                let mut da = Tensor::zeros(&[r, ca]);
                let mut db = Tensor::zeros(&[r, cb]);
                for i in 0..r {
                    let gr = g.row_slice(i);
                    da.data_mut()[i * ca..(i + 1) * ca].copy_from_slice(&gr[..ca]);
                    db.data_mut()[i * cb..(i + 1) * cb].copy_from_slice(&gr[ca..]);
                }
                self.accum(grads, *a, da);
                self.accum(grads, *b, db);
            }
            Op::StackRows(rows) => {
                let c = out.cols();
                for (i, &rid) in rows.iter().enumerate() {
                    let da = Tensor::new(vec![1, c], g.row_slice(i).to_vec()).expect("row grad");
                    self.accum(grads, rid, da);
                }
            }
            Op::Row(a, i) => {
                let ta = self.value(*a);
                let mut da = Tensor::zeros(ta.shape());
                let c = ta.cols();
                da.data_mut()[i * c..(i + 1) * c].copy_from_slice(g.data());
                self.accum(grads, *a, da);
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                let mut da = Tensor::zeros(&[c, r]);
                for i in 0..r {
                    for j in 0..c {
                        da.data_mut()[j * r + i] = g.at2(i, j);
                    }
                }
                self.accum(grads, *a, da);
            }
            Op::MeanAxis(a, axis) => {
                let ta = self.value(*a);
                let (r, c) = (ta.rows(), ta.cols());
                let mut da = Tensor::zeros(&[r, c]);
                if *axis == 0 {
                    for i in 0..r {
                        for j in 0..c {
                            da.data_mut()[i * c + j] = g.data()[j] / r as f64;
                        }
                    }
                } else {
                    for i in 0..r {
                        for j in 0..c {
                            da.data_mut()[i * c + j] = g.data()[i] / c as f64;
                        }
                    }
                }
                self.accum(grads, *a, da);
            }
            Op::SumAll(a) => {
                let ta = self.value(*a);
                let da = Tensor::full(ta.shape(), g.data()[0]);
                self.accum(grads, *a, da);
            }
            Op::MulRowBroadcast(a, gm) => {
                let (ta, tg) = (self.value(*a), self.value(*gm));
                let (r, c) = (ta.rows(), ta.cols());
                let mut da = Tensor::zeros(&[r, c]);
                let mut dg = Tensor::zeros(&[1, c]);
                for i in 0..r {
                    for j in 0..c {
                        da.data_mut()[i * c + j] = g.at2(i, j) * tg.data()[j];
                        dg.data_mut()[j] += g.at2(i, j) * ta.at2(i, j);
                    }
                }
                self.accum(grads, *a, da);
                self.accum(grads, *gm, dg);
            }
            Op::AddRowBroadcast(a, b) => {
                let c = out.cols();
                let mut db = Tensor::zeros(&[1, c]);
                for i in 0..out.rows() {
                    for j in 0..c {
                        db.data_mut()[j] += g.at2(i, j);
                    }
                }
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, db);
            }
            Op::LayerNormRows(a, eps) => {
                let ta = self.value(*a);
                let (r, c) = (ta.rows(), ta.cols());
                let mut da = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let row = ta.row_slice(i);
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let y = out.row_slice(i);
                    let gr = g.row_slice(i);
                    let gmean: f64 = gr.iter().sum::<f64>() / c as f64;
                    let gydot: f64 =
                        gr.iter().zip(y).map(|(&gi, &yi)| gi * yi).sum::<f64>() / c as f64;
                    for j in 0..c {
                        da.data_mut()[i * c + j] = inv * (gr[j] - gmean - y[j] * gydot);
                    }
                }
                self.accum(grads, *a, da);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad_top,
                pad_left,
            } => {
                let ti = self.value(*input);
                let tk = self.value(*kernel);
                let (cin, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2]);
                let (cout, kh, kw) = (tk.shape()[0], tk.shape()[2], tk.shape()[3]);
                let (oh, ow) = (out.shape()[1], out.shape()[2]);
                let mut di = Tensor::zeros(ti.shape());
                let mut dk = Tensor::zeros(tk.shape());
                let mut db = Tensor::zeros(&[cout]);
                for co in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g.data()[(co * oh + oy) * ow + ox];
                            db.data_mut()[co] += gv;
                            for ci in 0..cin {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - *pad_top as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - *pad_left as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let ii = (ci * h + iy as usize) * w + ix as usize;
                                        let ki = ((co * cin + ci) * kh + ky) * kw + kx;
                                        di.data_mut()[ii] += gv * tk.data()[ki];
                                        dk.data_mut()[ki] += gv * ti.data()[ii];
                                    }
                                }
                            }
                        }
                    }
                }
                self.accum(grads, *input, di);
                self.accum(grads, *kernel, dk);
                self.accum(grads, *bias, db);
            }
            Op::MaxPool2d { input, argmax } => {
                let ti = self.value(*input);
                let mut di = Tensor::zeros(ti.shape());
                for (oi, &ii) in argmax.iter().enumerate() {
                    di.data_mut()[ii] += g.data()[oi];
                }
                self.accum(grads, *input, di);
            }
            Op::AvgPool2d { input, k } => {
                let ti = self.value(*input);
                let (c, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2]);
                let (oh, ow) = (out.shape()[1], out.shape()[2]);
                let mut di = Tensor::zeros(ti.shape());
                let inv = 1.0 / (k * k) as f64;
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g.data()[(ci * oh + oy) * ow + ox] * inv;
                            for ky in 0..*k {
                                for kx in 0..*k {
                                    di.data_mut()[(ci * h + oy * k + ky) * w + ox * k + kx] += gv;
                                }
                            }
                        }
                    }
                }
                self.accum(grads, *input, di);
            }
            Op::SpatialMean(input) => {
                let ti = self.value(*input);
                let (c, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2]);
                let mut di = Tensor::zeros(ti.shape());
                let inv = 1.0 / (h * w) as f64;
                for ci in 0..c {
                    for v in di.data_mut()[ci * h * w..(ci + 1) * h * w].iter_mut() {
                        *v = g.data()[ci] * inv;
                    }
                }
                self.accum(grads, *input, di);
            }
        }
    }
}
