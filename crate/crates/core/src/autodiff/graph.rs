//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and backward is a single reverse sweep.

use super::kernels::{self, ConvGeometry};
use super::tensor::{Real, Tensor};
use super::TensorError;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    AddBroadcast(Var, Var),
    AddChannel(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Sum(Var),
    MeanAxis { x: Var, axis: usize },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<Real>, rstd: Vec<Real> },
    Gelu(Var),
    Conv2d { x: Var, w: Var, geometry: ConvGeometry },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<Real> },
    ClipRows { x: Var, max_norm: Real, norms: Vec<Real> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Tape of tensor operations.
///
/// Leaf gradients accumulate across calls to [`Graph::backward`]; call
/// [`Graph::zero_grad`] to reset them. Intermediate gradients are never kept.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        #[cfg(debug_assertions)]
        {
            if inputs.iter().all(|v| self.nodes[v.0].value.is_finite()) {
                debug_assert!(value.is_finite(), "non-finite output from finite inputs in {op:?}");
            }
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[Real] {
        self.nodes[v.0].value.data()
    }

    // ---- forward ops -------------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", left: sa, right: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, 0.0);
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `[p, m, k] x [p, k, n] -> [p, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch { op: "bmm", left: sa, right: sb });
        }
        let (p, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; p * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..p {
            kernels::gemm(
                m,
                k,
                n,
                &da[i * m * k..],
                false,
                &db[i * k * n..],
                false,
                &mut out[i * m * n..],
                0.0,
            );
        }
        let value = Tensor::new([p, m, n], out)?;
        Ok(self.push(value, Op::BatchMatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// `x + y` where the shape of `y` is a trailing suffix of the shape of `x`.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var, TensorError> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(TensorError::ShapeMismatch {
                op: "add_broadcast",
                left: sx.to_vec(),
                right: sy.to_vec(),
            });
        }
        let yd = self.data(y);
        let n = yd.len();
        let data = self.data(x).iter().enumerate().map(|(i, v)| v + yd[i % n]).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::AddBroadcast(x, y), &[x, y]))
    }

    /// `x[b, c, ...] + bias[c]`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel",
                left: sx.to_vec(),
                right: sb.to_vec(),
            });
        }
        let channels = sx[1];
        let inner: usize = sx[2..].iter().product();
        let bd = self.data(bias);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[(i / inner) % channels])
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::AddChannel(x, bias), &[x, bias]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: Real) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::Dimension {
                op: "permute",
                detail: format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            });
        }
        let (out_shape, data) = kernels::permute(self.data(x), &shape, perm);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Permute(x, perm.to_vec()), &[x]))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let value = self.value(x).narrow(axis, start, len)?;
        Ok(self.push(value, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self.shape(*parts.first().ok_or_else(|| {
            TensorError::Validation("concat of zero tensors".into())
        })?)
        .to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidAxis { op: "concat", axis, rank: first.len() });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch { op: "concat", left: first, right: s.to_vec() });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.data(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis { op: "mean_axis", axis, rank: shape.len() });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &xd[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let inv = 1.0 / len as Real;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::MeanAxis { x, axis }, &[x]))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis { op: "softmax", axis, rank: shape.len() });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| xd[at(a)]).fold(Real::NEG_INFINITY, Real::max);
                let mut total = 0.0;
                for a in 0..len {
                    let e = (xd[at(a)] - max).exp();
                    out[at(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    out[at(a)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: Real) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| TensorError::Validation("layer_norm of a scalar".into()))?;
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: shape.clone(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        if eps <= 0.0 {
            return Err(TensorError::Validation(format!("layer_norm eps must be positive, got {eps}")));
        }
        let rows = if n == 0 { 0 } else { self.value(x).numel() / n };
        let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().sum::<Real>() / n as Real;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n as Real;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..n {
                let h = (row[j] - mean) * s;
                xhat[r * n + j] = h;
                out[r * n + j] = gd[j] * h + bd[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Exact GELU, `0.5 x (1 + erf(x / sqrt 2))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu_scalar);
        self.push(value, Op::Gelu(x), &[x])
    }

    /// Cross-correlation of `x[B, C, H, W]` with `w[F, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", left: sx, right: sw });
        }
        if stride == 0 {
            return Err(TensorError::Validation("conv2d stride must be at least 1".into()));
        }
        let (batch, channels, height, width) = (sx[0], sx[1], sx[2], sx[3]);
        let (filters, kernel_h, kernel_w) = (sw[0], sw[2], sw[3]);
        if kernel_h > height + 2 * padding || kernel_w > width + 2 * padding || kernel_h == 0 || kernel_w == 0 {
            return Err(TensorError::Dimension {
                op: "conv2d",
                detail: format!(
                    "kernel {kernel_h}x{kernel_w} does not fit input {height}x{width} with padding {padding}"
                ),
            });
        }
        let geometry = ConvGeometry {
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (height + 2 * padding - kernel_h) / stride + 1,
            out_w: (width + 2 * padding - kernel_w) / stride + 1,
        };
        let (pl, ol) = (geometry.patch_len(), geometry.out_len());
        let img_len = channels * height * width;
        let mut cols = vec![0.0; pl * ol];
        let mut out = vec![0.0; batch * filters * ol];
        let (xd, wd) = (self.data(x), self.data(w));
        for b in 0..batch {
            kernels::im2col(&xd[b * img_len..(b + 1) * img_len], &geometry, &mut cols);
            kernels::gemm(filters, pl, ol, wd, false, &cols, false, &mut out[b * filters * ol..], 0.0);
        }
        let value = Tensor::new([batch, filters, geometry.out_h, geometry.out_w], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, geometry }, &[x, w]))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(TensorError::Dimension {
                op: "cross_entropy",
                detail: format!("logits {shape:?} against {} labels", labels.len()),
            });
        }
        let (batch, classes) = (shape[0], shape[1]);
        if batch == 0 {
            return Err(TensorError::Validation("cross_entropy of an empty batch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::Validation(format!("label {bad} out of range for {classes} classes")));
        }
        let ld = self.data(logits);
        let mut probs = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let row = &ld[b * classes..(b + 1) * classes];
            let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let total: Real = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + total.ln();
            loss += lse - row[label];
            for k in 0..classes {
                probs[b * classes + k] = (row[k] - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / batch as Real);
        Ok(self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    /// Rescales each sample (first axis) to L2 norm at most `max_norm`.
    pub fn clip_rows(&mut self, x: Var, max_norm: Real) -> Result<Var, TensorError> {
        if max_norm <= 0.0 || !max_norm.is_finite() {
            return Err(TensorError::Validation(format!("clip norm must be positive, got {max_norm}")));
        }
        let value = self.value(x);
        let rows = value.shape().first().copied().unwrap_or(1);
        let width = if rows == 0 { 0 } else { value.numel() / rows };
        let mut out = value.data().to_vec();
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut out[r * width..(r + 1) * width];
            let norm = row.iter().map(|v| v * v).sum::<Real>().sqrt();
            norms.push(norm);
            if norm > max_norm {
                let s = max_norm / norm;
                row.iter_mut().for_each(|v| *v *= s);
            }
        }
        let value = Tensor::new(value.shape().to_vec(), out)?;
        Ok(self.push(value, Op::ClipRows { x, max_norm, norms }, &[x]))
    }

    // ---- composites --------------------------------------------------------

    /// `x[.., in] * w[in, out] + b[out]` over any number of leading axes.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let fan_in = *shape.last().ok_or_else(|| TensorError::Validation("linear of a scalar".into()))?;
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let out_dim = self.shape(w).get(1).copied().unwrap_or(0);
        let flat = self.reshape(x, &[rows, fan_in])?;
        let y = self.matmul(flat, w)?;
        let y = self.add_broadcast(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = out_dim;
        self.reshape(y, &out_shape)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ---- backward ----------------------------------------------------------

    /// Backpropagates from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let seed = Tensor::full(self.shape(loss).to_vec(), 1.0);
        self.backward_with(loss, seed)
    }

    /// Backpropagates an upstream gradient `seed` arriving at `root`.
    pub fn backward_with(&mut self, root: Var, seed: Tensor) -> Result<(), TensorError> {
        if seed.shape() != self.shape(root) {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                left: self.shape(root).to_vec(),
                right: seed.shape().to_vec(),
            });
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        let mut leaf_grads = Vec::new();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                leaf_grads.push((i, g));
            } else {
                self.backprop_node(i, g, &mut grads);
            }
        }
        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let gd = g.data();
        match &node.op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, gd, false, self.data(*b), true, &mut da, 0.0);
                    self.accumulate(grads, *a, Tensor::new([m, k], da).unwrap());
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, self.data(*a), true, gd, false, &mut db, 0.0);
                    self.accumulate(grads, *b, Tensor::new([k, n], db).unwrap());
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (p, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if self.needs(*a) {
                    let mut da = vec![0.0; p * m * k];
                    let bd = self.data(*b);
                    for q in 0..p {
                        kernels::gemm(m, n, k, &gd[q * m * n..], false, &bd[q * k * n..], true, &mut da[q * m * k..], 0.0);
                    }
                    self.accumulate(grads, *a, Tensor::new(sa, da).unwrap());
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; p * k * n];
                    let ad = self.data(*a);
                    for q in 0..p {
                        kernels::gemm(k, m, n, &ad[q * m * k..], true, &gd[q * m * n..], false, &mut db[q * k * n..], 0.0);
                    }
                    self.accumulate(grads, *b, Tensor::new(sb, db).unwrap());
                }
            }
            Op::Add(a, b) => {
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
                self.accumulate(grads, *a, g);
            }
            Op::AddBroadcast(x, y) => {
                if self.needs(*y) {
                    let ys = self.shape(*y).to_vec();
                    let n = ys.iter().product::<usize>().max(1);
                    let mut dy = vec![0.0; n];
                    for chunk in gd.chunks(n) {
                        for (d, v) in dy.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *y, Tensor::new(ys, dy).unwrap());
                }
                self.accumulate(grads, *x, g);
            }
            Op::AddChannel(x, bias) => {
                if self.needs(*bias) {
                    let channels = out_shape[1];
                    let inner: usize = out_shape[2..].iter().product();
                    let mut db = vec![0.0; channels];
                    for (idx, v) in gd.iter().enumerate() {
                        db[(idx / inner) % channels] += v;
                    }
                    self.accumulate(grads, *bias, Tensor::new([channels], db).unwrap());
                }
                self.accumulate(grads, *x, g);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = gd.iter().zip(self.data(*b)).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, Tensor::new(out_shape.to_vec(), d).unwrap());
                }
                if self.needs(*b) {
                    let d = gd.iter().zip(self.data(*a)).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, Tensor::new(out_shape.to_vec(), d).unwrap());
                }
            }
            Op::Scale(x, factor) => {
                let f = *factor;
                self.accumulate(grads, *x, g.map(|v| v * f));
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.reshape(shape).unwrap());
            }
            Op::Permute(x, perm) => {
                let inv = kernels::inverse_permutation(perm);
                let (shape, d) = kernels::permute(gd, out_shape, &inv);
                self.accumulate(grads, *x, Tensor::new(shape, d).unwrap());
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = self.shape(*x).to_vec();
                let (outer, full, inner) = split_axis(&in_shape, *axis);
                let len = out_shape[*axis];
                let mut dx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(in_shape, dx).unwrap());
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let len = ps[*axis];
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            dp.extend_from_slice(&gd[src..src + len * inner]);
                        }
                        self.accumulate(grads, p, Tensor::new(ps, dp).unwrap());
                    }
                    offset += len;
                }
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::full(shape, gd[0]));
            }
            Op::MeanAxis { x, axis } => {
                let in_shape = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis(&in_shape, *axis);
                let inv = 1.0 / len as Real;
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        for i in 0..inner {
                            dx[(o * len + a) * inner + i] = gd[o * inner + i] * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(in_shape, dx).unwrap());
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(out_shape, *axis);
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot: Real = (0..len).map(|a| gd[at(a)] * y[at(a)]).sum();
                        for a in 0..len {
                            dx[at(a)] = y[at(a)] * (gd[at(a)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out_shape.to_vec(), dx).unwrap());
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = *out_shape.last().unwrap();
                let rows = rstd.len();
                if self.needs(*beta) {
                    let mut db = vec![0.0; n];
                    for r in 0..rows {
                        for j in 0..n {
                            db[j] += gd[r * n + j];
                        }
                    }
                    self.accumulate(grads, *beta, Tensor::new([n], db).unwrap());
                }
                if self.needs(*gamma) {
                    let mut dg = vec![0.0; n];
                    for r in 0..rows {
                        for j in 0..n {
                            dg[j] += gd[r * n + j] * xhat[r * n + j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::new([n], dg).unwrap());
                }
                if self.needs(*x) {
                    let gamma_d = self.data(*gamma);
                    let mut dx = vec![0.0; rows * n];
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..n {
                            let dh = gd[r * n + j] * gamma_d[j];
                            mean_d += dh;
                            mean_dh += dh * xhat[r * n + j];
                        }
                        mean_d /= n as Real;
                        mean_dh /= n as Real;
                        for j in 0..n {
                            let dh = gd[r * n + j] * gamma_d[j];
                            dx[r * n + j] = rstd[r] * (dh - mean_d - xhat[r * n + j] * mean_dh);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(out_shape.to_vec(), dx).unwrap());
                }
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                let d = gd.iter().zip(xd).map(|(g, &v)| g * gelu_derivative(v)).collect();
                self.accumulate(grads, *x, Tensor::new(out_shape.to_vec(), d).unwrap());
            }
            Op::Conv2d { x, w, geometry } => {
                let sx = self.shape(*x).to_vec();
                let sw = self.shape(*w).to_vec();
                let (batch, filters) = (sx[0], sw[0]);
                let (pl, ol) = (geometry.patch_len(), geometry.out_len());
                let img_len = geometry.channels * geometry.height * geometry.width;
                let (xd, wd) = (self.data(*x), self.data(*w));
                let mut cols = vec![0.0; pl * ol];
                let mut dw = vec![0.0; filters * pl];
                let mut dx = vec![0.0; xd.len()];
                let need_w = self.needs(*w);
                let need_x = self.needs(*x);
                for b in 0..batch {
                    let gb = &gd[b * filters * ol..(b + 1) * filters * ol];
                    if need_w {
                        kernels::im2col(&xd[b * img_len..(b + 1) * img_len], geometry, &mut cols);
                        kernels::gemm(filters, ol, pl, gb, false, &cols, true, &mut dw, 1.0);
                    }
                    if need_x {
                        kernels::gemm(pl, filters, ol, wd, true, gb, false, &mut cols, 0.0);
                        kernels::col2im(&cols, geometry, &mut dx[b * img_len..(b + 1) * img_len]);
                    }
                }
                if need_w {
                    self.accumulate(grads, *w, Tensor::new(sw, dw).unwrap());
                }
                if need_x {
                    self.accumulate(grads, *x, Tensor::new(sx, dx).unwrap());
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = self.shape(*logits)[1];
                let scale = gd[0] / labels.len() as Real;
                let mut d = probs.clone();
                for (b, &label) in labels.iter().enumerate() {
                    d[b * classes + label] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                let shape = self.shape(*logits).to_vec();
                self.accumulate(grads, *logits, Tensor::new(shape, d).unwrap());
            }
            Op::ClipRows { x, max_norm, norms } => {
                let xd = self.data(*x);
                let rows = norms.len();
                let width = if rows == 0 { 0 } else { xd.len() / rows };
                let mut dx = gd.to_vec();
                for (r, &norm) in norms.iter().enumerate() {
                    if norm <= *max_norm {
                        continue;
                    }
                    let xr = &xd[r * width..(r + 1) * width];
                    let dr = &mut dx[r * width..(r + 1) * width];
                    let dot: Real = xr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    let s = max_norm / norm;
                    let k = dot / (norm * norm);
                    for (d, &xv) in dr.iter_mut().zip(xr) {
                        *d = s * (*d - xv * k);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out_shape.to_vec(), dx).unwrap());
            }
        }
    }
}

/// `(outer, axis length, inner)` for an axis of `shape`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn gelu_scalar(x: Real) -> Real {
    0.5 * x * (1.0 + kernels::erf(x * std::f64::consts::FRAC_1_SQRT_2 as Real))
}

fn gelu_derivative(x: Real) -> Real {
    let cdf = 0.5 * (1.0 + kernels::erf(x * std::f64::consts::FRAC_1_SQRT_2 as Real));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI as Real).sqrt();
    cdf + x * pdf
}
