//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to compute the vector-Jacobian product. [`Tape::backward`] walks the
//! nodes in reverse once, so a tape is single-use.

use super::kernels::{self, order_invariant_sum, ConvGeometry};
use super::tensor::{axis_split, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How a batch-norm node obtains its per-channel statistics.
#[derive(Debug, Clone, Copy)]
pub enum Normalization<'a> {
    /// Statistics of the current batch (training mode).
    Batch,
    /// Fixed running statistics (evaluation mode).
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel mean and biased variance of a training batch.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of samples each channel was reduced over.
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Affine(Var, f64),
    MulScalar(Var, Var),
    MulRows(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Max {
        x: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    RepeatRows(Var),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        index: Vec<usize>,
        scale: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
    },
    Deconv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Mse {
        x: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<(u64, usize)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn out(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).expect("op produced consistent shape")
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        t.grad = None;
        self.push(t, Op::Leaf, false)
    }

    /// Binds a parameter. Gradients are tracked when the tensor requires them.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let tracked = t.requires_grad();
        let mut value = t.clone();
        value.grad = None;
        let v = self.push(value, Op::Leaf, tracked);
        if tracked {
            self.leaves.push((t.id(), v.0));
        }
        v
    }

    fn expect_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<()> {
        if self.shape(v).len() != rank {
            return Err(Error::invalid(
                op,
                format!("expected rank {rank}, got shape {:?}", self.shape(v)),
            ));
        }
        Ok(())
    }

    /// `[n×k] · [k×m] → [n×m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_rank("matmul", a, 2)?;
        self.expect_rank("matmul", b, 2)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        kernels::matmul_acc(self.data(a), self.data(b), &mut out, n, k, m);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Self::out(&[n, m], out), Op::MatMul(a, b), tracked))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Self::out(self.shape(a), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Sub(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Mul(a, b), tracked))
    }

    /// Adds a per-channel bias along axis 1 (columns of a matrix, channels of
    /// an image batch).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(bias) != [shape[1]] {
            return Err(Error::shape("add_bias", &shape, self.shape(bias)));
        }
        let (outer, c, inner) = axis_split(&shape, 1);
        let mut out = self.data(x).to_vec();
        let b = self.data(bias);
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for v in &mut out[base..base + inner] {
                    *v += b[ch];
                }
            }
        }
        let tracked = self.tracked(x) || self.tracked(bias);
        Ok(self.push(Self::out(&shape, out), Op::AddBias(x, bias), tracked))
    }

    /// `scale * x + offset`
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        let data = self.data(x).iter().map(|&v| scale * v + offset).collect();
        let t = Self::out(self.shape(x), data);
        let tracked = self.tracked(x);
        self.push(t, Op::Affine(x, scale), tracked)
    }

    /// Multiplies every element by a single-element tensor.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("mul_scalar", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).item();
        let data = self.data(x).iter().map(|&v| v * sv).collect();
        let t = Self::out(self.shape(x), data);
        let tracked = self.tracked(x) || self.tracked(s);
        Ok(self.push(t, Op::MulScalar(x, s), tracked))
    }

    /// `[n×m] ⊙ [n×1]`, broadcasting the column across each row.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        self.expect_rank("mul_rows", x, 2)?;
        let (n, m) = (self.shape(x)[0], self.shape(x)[1]);
        if self.shape(s) != [n, 1] {
            return Err(Error::shape("mul_rows", self.shape(x), self.shape(s)));
        }
        let sv = self.data(s);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / m])
            .collect();
        let t = Self::out(&[n, m], data);
        let tracked = self.tracked(x) || self.tracked(s);
        Ok(self.push(t, Op::MulRows(x, s), tracked))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let t = Self::out(self.shape(x), data);
        let tracked = self.tracked(x);
        self.push(t, Op::Relu(x), tracked)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let t = Self::out(self.shape(x), data);
        let tracked = self.tracked(x);
        self.push(t, Op::Sigmoid(x), tracked)
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} invalid for {shape:?}"),
            ));
        }
        let out = softmax_along(self.data(x), &shape, axis);
        let tracked = self.tracked(x);
        Ok(self.push(Self::out(&shape, out), Op::Softmax { x, axis }, tracked))
    }

    /// Maximum along `axis`, which is removed from the shape. Returns the
    /// pooled values and, per output element, the winning position along the
    /// axis. Ties go to the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "max_axis",
                format!("axis {axis} invalid for {shape:?}"),
            ));
        }
        if shape[axis] == 0 {
            return Err(Error::invalid("max_axis", "cannot pool over an empty axis"));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xd = self.data(x);
        let mut values = Vec::with_capacity(outer * inner);
        let mut flat = Vec::with_capacity(outer * inner);
        let mut positions = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = xd[o * len * inner + i];
                for a in 1..len {
                    let v = xd[(o * len + a) * inner + i];
                    if v > best_v {
                        best = a;
                        best_v = v;
                    }
                }
                values.push(best_v);
                flat.push((o * len + best) * inner + i);
                positions.push(best);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let tracked = self.tracked(x);
        let v = self.push(
            Self::out(&out_shape, values),
            Op::Max { x, argmax: flat },
            tracked,
        );
        Ok((v, positions))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.data(x).iter().sum::<f64>() / n;
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Mean(x), tracked)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let tracked = self.tracked(x);
        Ok(self.push(t, Op::Reshape(x), tracked))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.expect_rank("transpose", x, 2)?;
        let (n, m) = (self.shape(x)[0], self.shape(x)[1]);
        let xd = self.data(x);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = xd[i * m + j];
            }
        }
        let tracked = self.tracked(x);
        Ok(self.push(Self::out(&[m, n], out), Op::Transpose(x), tracked))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} invalid for {base:?}"),
            ));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.data(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(
            Self::out(&shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            tracked,
        ))
    }

    /// `[1×m] → [n×m]`
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        self.expect_rank("repeat_rows", x, 2)?;
        if self.shape(x)[0] != 1 {
            return Err(Error::shape(
                "repeat_rows",
                self.shape(x),
                &[1, self.shape(x)[1]],
            ));
        }
        let m = self.shape(x)[1];
        let row = self.data(x).to_vec();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(&row);
        }
        let tracked = self.tracked(x);
        Ok(self.push(Self::out(&[n, m], out), Op::RepeatRows(x), tracked))
    }

    /// Selects rows of a matrix by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        self.expect_rank("gather_rows", x, 2)?;
        let (n, m) = (self.shape(x)[0], self.shape(x)[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(
                "gather_rows",
                format!("row {bad} out of range {n}"),
            ));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(index.len() * m);
        for &i in index {
            out.extend_from_slice(&xd[i * m..(i + 1) * m]);
        }
        let tracked = self.tracked(x);
        let op = Op::GatherRows {
            x,
            index: index.to_vec(),
        };
        Ok(self.push(Self::out(&[index.len(), m], out), op, tracked))
    }

    /// `out[index[i]] += scale[i] * x[i]` into a zero `[rows×m]` matrix.
    pub fn scatter_rows(
        &mut self,
        x: Var,
        index: &[usize],
        scale: &[f64],
        rows: usize,
    ) -> Result<Var> {
        self.expect_rank("scatter_rows", x, 2)?;
        let (n, m) = (self.shape(x)[0], self.shape(x)[1]);
        if index.len() != n || scale.len() != n {
            return Err(Error::shape(
                "scatter_rows",
                &[n],
                &[index.len(), scale.len()],
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(
                "scatter_rows",
                format!("row {bad} out of range {rows}"),
            ));
        }
        let xd = self.data(x);
        let mut out = vec![0.0; rows * m];
        for (i, (&dst, &s)) in index.iter().zip(scale).enumerate() {
            for j in 0..m {
                out[dst * m + j] += s * xd[i * m + j];
            }
        }
        let tracked = self.tracked(x);
        let op = Op::ScatterRows {
            x,
            index: index.to_vec(),
            scale: scale.to_vec(),
        };
        Ok(self.push(Self::out(&[rows, m], out), op, tracked))
    }

    /// Batch normalization over every axis except axis 1.
    ///
    /// In [`Normalization::Batch`] mode the batch statistics are returned so
    /// the caller can update running estimates. Batch sums are accumulated in
    /// sorted order, which makes the result independent of sample order.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        norm: Normalization<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::invalid(
                "batch_norm",
                format!("need rank ≥ 2, got {shape:?}"),
            ));
        }
        let (outer, c, inner) = axis_split(&shape, 1);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", &shape, self.shape(gamma)));
        }
        let count = outer * inner;
        let xd = self.data(x);
        let (mean, var, stats) = match norm {
            Normalization::Batch => {
                if count < 2 {
                    return Err(Error::invalid(
                        "batch_norm",
                        "training mode needs at least 2 samples per channel (batch variance undefined)",
                    ));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                let mut buf = Vec::with_capacity(count);
                for ch in 0..c {
                    buf.clear();
                    for o in 0..outer {
                        let base = (o * c + ch) * inner;
                        buf.extend_from_slice(&xd[base..base + inner]);
                    }
                    let mu = order_invariant_sum(&mut buf) / count as f64;
                    for v in buf.iter_mut() {
                        *v = (*v - mu) * (*v - mu);
                    }
                    mean[ch] = mu;
                    var[ch] = order_invariant_sum(&mut buf) / count as f64;
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count,
                };
                (mean, var, Some(stats))
            }
            Normalization::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", &[c], &[mean.len(), var.len()]));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + b[ch];
                }
            }
        }
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            training: matches!(norm, Normalization::Batch),
        };
        Ok((self.push(Self::out(&shape, out), op, tracked), stats))
    }

    fn conv_geometry(
        &self,
        op: &'static str,
        x: Var,
        w: Var,
    ) -> Result<(usize, usize, usize, usize, usize, usize)> {
        if self.shape(x).len() != 4 || self.shape(w).len() != 4 {
            return Err(Error::shape(op, self.shape(x), self.shape(w)));
        }
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws[2] != ws[3] || ws[2] == 0 {
            return Err(Error::invalid(
                op,
                format!("kernel must be square and non-empty, got {ws:?}"),
            ));
        }
        Ok((xs[0], xs[1], xs[2], xs[3], ws[0], ws[1]))
    }

    /// Direct 2-D convolution. `x: [B, C, H, W]`, `w: [C_out, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (b, c, h, wd, oc, wc) = self.conv_geometry("conv2d", x, w)?;
        if wc != c {
            return Err(Error::shape("conv2d", self.shape(x), self.shape(w)));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be ≥ 1"));
        }
        let k = self.shape(w)[2];
        let (oh, ow) = match (
            ConvGeometry::conv_out(h, k, stride, padding),
            ConvGeometry::conv_out(wd, k, stride, padding),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::invalid(
                    "conv2d",
                    format!("kernel {k} with padding {padding} leaves no output for {h}×{wd}"),
                ))
            }
        };
        let geom = ConvGeometry {
            batch: b,
            in_channels: c,
            out_channels: oc,
            in_h: h,
            in_w: wd,
            out_h: oh,
            out_w: ow,
            kernel: k,
            stride,
            padding,
        };
        let out = kernels::conv2d_forward(self.data(x), self.data(w), &geom);
        let tracked = self.tracked(x) || self.tracked(w);
        Ok(self.push(
            Self::out(&[b, oc, oh, ow], out),
            Op::Conv2d { x, w, geom },
            tracked,
        ))
    }

    /// Transposed convolution without padding. `x: [B, C, H, W]`,
    /// `w: [C, C_out, k, k]`; output extent `(H - 1) * stride + k`.
    pub fn deconv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (b, c, h, wd, wc, oc) = self.conv_geometry("deconv2d", x, w)?;
        if wc != c {
            return Err(Error::shape("deconv2d", self.shape(x), self.shape(w)));
        }
        if stride == 0 || h == 0 || wd == 0 {
            return Err(Error::invalid(
                "deconv2d",
                "stride and input extents must be ≥ 1",
            ));
        }
        let k = self.shape(w)[2];
        let geom = ConvGeometry {
            batch: b,
            in_channels: c,
            out_channels: oc,
            in_h: h,
            in_w: wd,
            out_h: ConvGeometry::deconv_out(h, k, stride),
            out_w: ConvGeometry::deconv_out(wd, k, stride),
            kernel: k,
            stride,
            padding: 0,
        };
        let out = kernels::deconv2d_forward(self.data(x), self.data(w), &geom);
        let shape = [b, oc, geom.out_h, geom.out_w];
        let tracked = self.tracked(x) || self.tracked(w);
        Ok(self.push(Self::out(&shape, out), Op::Deconv2d { x, w, geom }, tracked))
    }

    /// Weighted mean cross-entropy of row-wise logits against class targets:
    /// `Σ wᵢ · (−log softmax(zᵢ)[tᵢ]) / Σ wᵢ`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        self.expect_rank("cross_entropy", logits, 2)?;
        let (n, m) = (self.shape(logits)[0], self.shape(logits)[1]);
        if targets.len() != n || weights.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                &[n, m],
                &[targets.len(), weights.len()],
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= m) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("target {bad} ≥ classes {m}"),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid(
                "cross_entropy",
                "weights must have a positive sum",
            ));
        }
        let probs = softmax_along(self.data(logits), &[n, m], 1);
        let mut loss = 0.0;
        for i in 0..n {
            loss -= weights[i] * probs[i * m + targets[i]].max(f64::MIN_POSITIVE).ln();
        }
        let norm: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let tracked = self.tracked(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights: norm,
            probs,
        };
        Ok(self.push(Tensor::scalar(loss / total), op, tracked))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        if target.len() != self.value(x).numel() {
            return Err(Error::shape("mse", self.shape(x), &[target.len()]));
        }
        let n = target.len().max(1) as f64;
        let l = self
            .data(x)
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let tracked = self.tracked(x);
        Ok(self.push(
            Tensor::scalar(l),
            Op::Mse {
                x,
                target: target.to_vec(),
            },
            tracked,
        ))
    }

    /// Runs the backward pass from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            self.propagate(i, g, lower);
        }
        Ok(Gradients {
            grads,
            leaves: self.leaves,
        })
    }

    fn propagate(&self, i: usize, g: &[f64], lower: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let y = &nodes[i].value;
        // Accumulates into a parent's gradient buffer if that parent is tracked.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].tracked {
                return;
            }
            let slot = lower[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let m = nodes[b.0].value.shape()[1];
                acc(*a, &mut |ga| {
                    kernels::matmul_a_bt_acc(g, val(*b), ga, n, k, m)
                });
                acc(*b, &mut |gb| {
                    kernels::matmul_at_b_acc(val(*a), g, gb, n, k, m)
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v)
                });
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |ga| {
                    for ((o, gv), bv) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *o += gv * bv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, gv), av) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *o += gv * av;
                    }
                });
            }
            Op::AddBias(x, bias) => {
                acc(*x, &mut |gx| add_into(gx, g));
                let (outer, c, inner) = axis_split(y.shape(), 1);
                acc(*bias, &mut |gb| {
                    for o in 0..outer {
                        for (ch, gbc) in gb.iter_mut().enumerate().take(c) {
                            let base = (o * c + ch) * inner;
                            *gbc += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::Affine(x, scale) => {
                acc(*x, &mut |gx| {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += scale * v)
                });
            }
            Op::MulScalar(x, s) => {
                let sv = nodes[s.0].value.item();
                acc(*x, &mut |gx| {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += sv * v)
                });
                acc(*s, &mut |gs| {
                    gs[0] += g.iter().zip(val(*x)).map(|(a, b)| a * b).sum::<f64>();
                });
            }
            Op::MulRows(x, s) => {
                let m = nodes[x.0].value.shape()[1];
                acc(*x, &mut |gx| {
                    let sv = val(*s);
                    for (j, (o, v)) in gx.iter_mut().zip(g).enumerate() {
                        *o += sv[j / m] * v;
                    }
                });
                acc(*s, &mut |gs| {
                    let xv = val(*x);
                    for (j, (gv, xv)) in g.iter().zip(xv).enumerate() {
                        gs[j / m] += gv * xv;
                    }
                });
            }
            Op::Relu(x) => {
                acc(*x, &mut |gx| {
                    for ((o, gv), xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                acc(*x, &mut |gx| {
                    for ((o, gv), s) in gx.iter_mut().zip(g).zip(y.data()) {
                        *o += gv * s * (1.0 - s);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let yd = y.data();
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |a: usize| (o * len + a) * inner + ii;
                            let dot: f64 = (0..len).map(|a| g[idx(a)] * yd[idx(a)]).sum();
                            for a in 0..len {
                                gx[idx(a)] += yd[idx(a)] * (g[idx(a)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Max { x, argmax } => {
                acc(*x, &mut |gx| {
                    for (gv, &src) in g.iter().zip(argmax) {
                        gx[src] += gv;
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel().max(1) as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Transpose(x) => {
                let (n, m) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                acc(*x, &mut |gx| {
                    for r in 0..n {
                        for c in 0..m {
                            gx[r * m + c] += g[c * n + r];
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(y.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.shape()[*axis];
                    acc(*p, &mut |gp| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            add_into(&mut gp[dst..dst + len * inner], &g[src..src + len * inner]);
                        }
                    });
                    offset += len;
                }
            }
            Op::RepeatRows(x) => {
                let m = nodes[x.0].value.shape()[1];
                acc(*x, &mut |gx| {
                    for row in g.chunks(m) {
                        add_into(gx, row);
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let m = nodes[x.0].value.shape()[1];
                acc(*x, &mut |gx| {
                    for (r, &src) in index.iter().enumerate() {
                        add_into(&mut gx[src * m..(src + 1) * m], &g[r * m..(r + 1) * m]);
                    }
                });
            }
            Op::ScatterRows { x, index, scale } => {
                let m = nodes[x.0].value.shape()[1];
                acc(*x, &mut |gx| {
                    for (r, (&dst, &s)) in index.iter().zip(scale).enumerate() {
                        for j in 0..m {
                            gx[r * m + j] += s * g[dst * m + j];
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let (outer, c, inner) = axis_split(y.shape(), 1);
                let gam = val(*gamma);
                let count = (outer * inner) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for j in base..base + inner {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat[j];
                        }
                    }
                }
                acc(*gamma, &mut |gg| add_into(gg, &sum_gx));
                acc(*beta, &mut |gb| add_into(gb, &sum_g));
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            let k = gam[ch] * inv_std[ch];
                            for j in base..base + inner {
                                gx[j] += if *training {
                                    k * (g[j] - sum_g[ch] / count - xhat[j] * sum_gx[ch] / count)
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                });
            }
            Op::Conv2d { x, w, geom } => {
                let want_x = nodes[x.0].tracked;
                let want_w = nodes[w.0].tracked;
                let (gx, gw) = kernels::conv2d_backward(val(*x), val(*w), g, geom, want_x, want_w);
                acc(*x, &mut |o| add_into(o, &gx));
                acc(*w, &mut |o| add_into(o, &gw));
            }
            Op::Deconv2d { x, w, geom } => {
                let want_x = nodes[x.0].tracked;
                let want_w = nodes[w.0].tracked;
                let (gx, gw) =
                    kernels::deconv2d_backward(val(*x), val(*w), g, geom, want_x, want_w);
                acc(*x, &mut |o| add_into(o, &gx));
                acc(*w, &mut |o| add_into(o, &gw));
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let m = nodes[logits.0].value.shape()[1];
                acc(*logits, &mut |gl| {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        for j in 0..m {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * m + j] += g[0] * w * (probs[r * m + j] - onehot);
                        }
                    }
                });
            }
            Op::Mse { x, target } => {
                let n = target.len().max(1) as f64;
                acc(*x, &mut |gx| {
                    for ((o, xv), t) in gx.iter_mut().zip(val(*x)).zip(target) {
                        *o += g[0] * 2.0 * (xv - t) / n;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax_along(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let max = (0..len)
                .map(|a| x[idx(a)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for a in 0..len {
                let e = (x[idx(a)] - max).exp();
                out[idx(a)] = e;
                total += e;
            }
            for a in 0..len {
                out[idx(a)] /= total;
            }
        }
    }
    out
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    leaves: Vec<(u64, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to any recorded value.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Writes the accumulated gradient of every binding of `t` into `t.grad`.
    /// Returns false (leaving `grad` untouched) when `t` was never bound.
    pub fn write_to(&self, t: &mut Tensor) -> bool {
        let mut found = false;
        let mut total = vec![0.0; t.numel()];
        for &(id, node) in &self.leaves {
            if id != t.id() {
                continue;
            }
            found = true;
            if let Some(g) = &self.grads[node] {
                add_into(&mut total, g);
            }
        }
        if found {
            t.grad = Some(total);
        }
        found
    }
}
