use std::collections::BTreeMap;

use thiserror::Error;

use super::tensor::Tensor;

/// Errors raised while recording or differentiating a tape.
#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss does not depend on any differentiable leaf")]
    NonDifferentiableLoss,
    #[error("duplicate parameter path {0:?} on tape")]
    DuplicatePath(String),
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize, len: usize },
    Reshape(Var),
    Softmax(Var),
    Relu(Var),
    Abs(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Clamp(Var, f32, f32),
    Maximum(Var, Var),
    Mean(Var),
    Sum(Var),
    L2Norm(Var),
    Conv2d { input: Var, kernel: Var, bias: Option<Var> },
    AvgPool2(Var),
    Upsample2(Var),
    MaxSpatial(Var),
    MulChannel { image: Var, mask: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode Wengert tape.
///
/// Values are owned by the tape arena and addressed by [`Var`] handles.
/// Every operation records enough to replay the chain rule in reverse; a
/// tensor used several times accumulates the sum of its incoming gradients.
/// One tape serves one forward/backward pass and is single-threaded;
/// parallelism happens across independent tapes.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    by_var: Vec<Option<Tensor>>,
    by_path: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a specific tape value, if it received one.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.by_var.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradients keyed by parameter path. Every parameter leaf registered on
    /// the tape is present; leaves the loss never reached map to zeros.
    pub fn by_path(&self) -> &BTreeMap<String, Tensor> {
        &self.by_path
    }

    pub fn into_by_path(self) -> BTreeMap<String, Tensor> {
        self.by_path
    }
}

fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert a value that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Insert a differentiable leaf (no parameter path).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Insert a differentiable leaf addressed by a parameter path, so its
    /// gradient shows up in [`Gradients::by_path`].
    pub fn param(&mut self, path: &str, value: Tensor) -> Result<Var, TapeError> {
        if self.params.contains_key(path) {
            return Err(TapeError::DuplicatePath(path.to_string()));
        }
        let var = self.push(value, Op::Leaf, true);
        self.params.insert(path.to_string(), var);
        Ok(var)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn rg2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
    }

    fn shape_err(op: &'static str, detail: String) -> TapeError {
        TapeError::ShapeMismatch { op, detail }
    }

    // ---- elementwise and scalar ops ----

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var, TapeError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Self::shape_err(op_name, format!("{sa:?} vs {sb:?}")));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(sa.to_vec(), data);
        let rg = self.rg2(a, b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.binary_same_shape("maximum", a, b, f32::max, Op::Maximum(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f32::abs, Op::Abs(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f32::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f32::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f32::ln, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f32::sqrt, Op::Sqrt(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    // ---- structural ops ----

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TapeError> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Self::shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.value(a).shape()),
            ));
        }
        let value = Tensor::new(shape, self.value(a).data().to_vec());
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TapeError> {
        let shape = self.value(a).shape();
        if shape.len() != 2 {
            return Err(Self::shape_err("transpose", format!("{shape:?} is not 2-D")));
        }
        let (m, n) = (shape[0], shape[1]);
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], data);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TapeError> {
        if parts.is_empty() {
            return Err(Self::shape_err("concat", "no inputs".to_string()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Self::shape_err(
                "concat",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Self::shape_err("concat", format!("{first:?} vs {s:?}")));
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut data = vec![0.0; shape.iter().product()];
        for o in 0..outer {
            let mut dst = o * axis_total * inner;
            for &p in parts {
                let s = self.value(p).shape();
                let span = s[axis] * inner;
                let src = &self.value(p).data()[o * span..(o + 1) * span];
                data[dst..dst + span].copy_from_slice(src);
                dst += span;
            }
        }
        let value = Tensor::new(shape, data);
        let rg = parts.iter().any(|&p| self.nodes[p.0].requires_grad);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(
        &mut self,
        input: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, TapeError> {
        let shape = self.value(input).shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Self::shape_err(
                "slice",
                format!("axis {axis}, range {start}..{} of {shape:?}", start + len),
            ));
        }
        let (outer, axis_len, inner) = axis_extents(&shape, axis);
        let src = self.value(input).data();
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let from = (o * axis_len + start) * inner;
            let to = o * len * inner;
            data[to..to + len * inner].copy_from_slice(&src[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data);
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            value,
            Op::Slice {
                input,
                axis,
                start,
                len,
            },
            rg,
        ))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Self::shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let arow = &da[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = &db[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out);
        let rg = self.rg2(a, b);
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TapeError> {
        let shape = self.value(a).shape().to_vec();
        if shape.is_empty() {
            return Err(Self::shape_err("softmax", "rank-0 input".to_string()));
        }
        let last = shape[shape.len() - 1];
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        for (row_in, row_out) in src.chunks(last).zip(data.chunks_mut(last)) {
            let max = row_in.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for (o, &x) in row_out.iter_mut().zip(row_in) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in row_out.iter_mut() {
                *o /= sum;
            }
        }
        let value = Tensor::new(shape, data);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f32 = self.value(a).data().iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f32;
        let total: f32 = self.value(a).data().iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::scalar(total / n), Op::Mean(a), rg)
    }

    /// Euclidean norm of all entries, as a scalar. The gradient at the origin
    /// is defined as zero (a valid subgradient), so hinge-style losses can sit
    /// exactly at their minimum.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let sumsq: f32 = self.value(a).data().iter().map(|&x| x * x).sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::scalar(sumsq.sqrt()), Op::L2Norm(a), rg)
    }

    // ---- image ops ----

    /// Stride-1, zero-padded "same" 2-D convolution.
    ///
    /// `input` is `[C_in, H, W]`, `kernel` is `[C_out, C_in, KH, KW]` with odd
    /// `KH`, `KW` no larger than the spatial extent, `bias` is `[C_out]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var, TapeError> {
        let si = self.value(input).shape().to_vec();
        let sk = self.value(kernel).shape().to_vec();
        if si.len() != 3 || sk.len() != 4 || sk[1] != si[0] {
            return Err(Self::shape_err(
                "conv2d",
                format!("input {si:?} vs kernel {sk:?}"),
            ));
        }
        let (ci, h, w) = (si[0], si[1], si[2]);
        let (co, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh % 2 == 0 || kw % 2 == 0 || kh > h || kw > w {
            return Err(Self::shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} invalid for {h}x{w} input"),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [co] {
                return Err(Self::shape_err(
                    "conv2d",
                    format!("bias {:?} vs C_out {co}", self.value(b).shape()),
                ));
            }
        }
        let src = self.value(input).data();
        let ker = self.value(kernel).data();
        let mut out = vec![0.0f32; co * h * w];
        conv2d_forward(src, ker, &mut out, ci, co, h, w, kh, kw);
        if let Some(b) = bias {
            let bd = self.value(b).data().to_vec();
            for (c, bv) in bd.iter().enumerate() {
                for v in &mut out[c * h * w..(c + 1) * h * w] {
                    *v += bv;
                }
            }
        }
        let value = Tensor::new(vec![co, h, w], out);
        let rg = self.rg2(input, kernel) || bias.is_some_and(|b| self.nodes[b.0].requires_grad);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
            },
            rg,
        ))
    }

    /// 2x2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var, TapeError> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Self::shape_err("avg_pool2", format!("{s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(a).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let base = ch * h * w + 2 * y * w + 2 * x;
                    out[ch * oh * ow + y * ow + x] =
                        0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, Op::AvgPool2(a), rg))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&mut self, a: Var) -> Result<Var, TapeError> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 3 {
            return Err(Self::shape_err("upsample2", format!("{s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.value(a).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = src[ch * h * w + y * w + x];
                    let base = ch * oh * ow + 2 * y * ow + 2 * x;
                    out[base] = v;
                    out[base + 1] = v;
                    out[base + ow] = v;
                    out[base + ow + 1] = v;
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, Op::Upsample2(a), rg))
    }

    /// Per-channel spatial maximum: `[C, H, W] -> [C]`. Ties resolve to the
    /// smallest row-major index.
    pub fn max_spatial(&mut self, a: Var) -> Result<Var, TapeError> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 3 {
            return Err(Self::shape_err("max_spatial", format!("{s:?}")));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let src = self.value(a).data();
        let mut out = vec![f32::NEG_INFINITY; c];
        for ch in 0..c {
            for &v in &src[ch * hw..(ch + 1) * hw] {
                if v > out[ch] {
                    out[ch] = v;
                }
            }
        }
        let value = Tensor::new(vec![c], out);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, Op::MaxSpatial(a), rg))
    }

    /// Broadcast a `[H, W]` mask across every channel of a `[C, H, W]` image.
    pub fn mul_channel(&mut self, image: Var, mask: Var) -> Result<Var, TapeError> {
        let si = self.value(image).shape().to_vec();
        let sm = self.value(mask).shape().to_vec();
        if si.len() != 3 || sm.len() != 2 || si[1] != sm[0] || si[2] != sm[1] {
            return Err(Self::shape_err(
                "mul_channel",
                format!("image {si:?} vs mask {sm:?}"),
            ));
        }
        let hw = si[1] * si[2];
        let img = self.value(image).data();
        let msk = self.value(mask).data();
        let mut out = vec![0.0; img.len()];
        for c in 0..si[0] {
            for p in 0..hw {
                out[c * hw + p] = img[c * hw + p] * msk[p];
            }
        }
        let value = Tensor::new(si, out);
        let rg = self.rg2(image, mask);
        Ok(self.push(value, Op::MulChannel { image, mask }, rg))
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// differentiable leaf reachable from the loss; registered parameter
    /// leaves that the loss never reached get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TapeError> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(TapeError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        if !loss_node.requires_grad {
            return Err(TapeError::NonDifferentiableLoss);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(grad) = grads[id].clone() else {
                continue;
            };
            self.backprop_node(id, &grad, &mut grads);
        }

        let mut by_path = BTreeMap::new();
        for (path, var) in &self.params {
            let g = match &grads[var.0] {
                Some(t) => t.clone(),
                None => Tensor::zeros(self.value(*var).shape().to_vec()),
            };
            by_path.insert(path.clone(), g);
        }
        Ok(Gradients {
            by_var: grads,
            by_path,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                let dst = existing.data_mut();
                for (d, s) in dst.iter_mut().zip(delta.data()) {
                    *d += s;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, id: usize, grad: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, grad.clone());
                self.accumulate(grads, *b, grad.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, grad.clone());
                self.accumulate(grads, *b, grad.map(|g| -g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = Tensor::new(
                    va.shape().to_vec(),
                    grad.data().iter().zip(vb.data()).map(|(&g, &y)| g * y).collect(),
                );
                let db = Tensor::new(
                    vb.shape().to_vec(),
                    grad.data().iter().zip(va.data()).map(|(&g, &x)| g * x).collect(),
                );
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, grad.map(|g| g * c));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, grad.clone()),
            Op::Maximum(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![0.0; va.len()];
                let mut db = vec![0.0; vb.len()];
                for i in 0..va.len() {
                    if va[i] >= vb[i] {
                        da[i] = grad.data()[i];
                    } else {
                        db[i] = grad.data()[i];
                    }
                }
                self.accumulate(grads, *a, Tensor::new(self.value(*a).shape().to_vec(), da));
                self.accumulate(grads, *b, Tensor::new(self.value(*b).shape().to_vec(), db));
            }
            Op::Relu(a) => {
                let mask = self.value(*a).data();
                let d = grad
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(grad.shape().to_vec(), d));
            }
            Op::Abs(a) => {
                let src = self.value(*a).data();
                let d = grad
                    .data()
                    .iter()
                    .zip(src)
                    .map(|(&g, &x)| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(grad.shape().to_vec(), d));
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let d = grad
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| g * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(grad.shape().to_vec(), d));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let d = grad
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| g * y * (1.0 - y))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(grad.shape().to_vec(), d));
            }
            Op::Exp(a) => {
                let y = node.value.data();
                let d = grad.data().iter().zip(y).map(|(&g, &y)| g * y).collect();
                self.accumulate(grads, *a, Tensor::new(grad.shape().to_vec(), d));
            }
            Op::Ln(a) => {
                let x = self.value(*a).data();
                let d = grad.data().iter().zip(x).map(|(&g, &x)| g / x).collect();
                self.accumulate(grads, *a, Tensor::new(grad.shape().to_vec(), d));
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                let d = grad
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| if y > 0.0 { g * 0.5 / y } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(grad.shape().to_vec(), d));
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                let (lo, hi) = (*lo, *hi);
                let d = grad
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > lo && x < hi { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(grad.shape().to_vec(), d));
            }
            Op::Reshape(a) => {
                let d = Tensor::new(self.value(*a).shape().to_vec(), grad.data().to_vec());
                self.accumulate(grads, *a, d);
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let (m, n) = (s[0], s[1]);
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[j * m + i] = grad.data()[i * n + j];
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![n, m], d));
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, axis_total, inner) = axis_extents(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let ps = self.value(p).shape().to_vec();
                    let plen = ps[*axis];
                    let mut d = vec![0.0; self.value(p).numel()];
                    for o in 0..outer {
                        let from = (o * axis_total + offset) * inner;
                        let to = o * plen * inner;
                        d[to..to + plen * inner]
                            .copy_from_slice(&grad.data()[from..from + plen * inner]);
                    }
                    offset += plen;
                    self.accumulate(grads, p, Tensor::new(ps, d));
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                len,
            } => {
                let ishape = self.value(*input).shape().to_vec();
                let (outer, axis_len, inner) = axis_extents(&ishape, *axis);
                let mut d = vec![0.0; self.value(*input).numel()];
                for o in 0..outer {
                    let to = (o * axis_len + start) * inner;
                    let from = o * len * inner;
                    d[to..to + len * inner]
                        .copy_from_slice(&grad.data()[from..from + len * inner]);
                }
                self.accumulate(grads, *input, Tensor::new(ishape, d));
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let shape = node.value.shape();
                let last = shape[shape.len() - 1];
                let mut d = vec![0.0; y.len()];
                for ((yr, gr), dr) in y
                    .chunks(last)
                    .zip(grad.data().chunks(last))
                    .zip(d.chunks_mut(last))
                {
                    let dot: f32 = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    for i in 0..last {
                        dr[i] = yr[i] * (gr[i] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(shape.to_vec(), d));
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da_v, db_v) = (self.value(*a).data(), self.value(*b).data());
                let g = grad.data();
                // dA = dC * B^T
                let mut da = vec![0.0f32; m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let brow = &db_v[kk * n..(kk + 1) * n];
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += grow[j] * brow[j];
                        }
                        da[i * k + kk] = acc;
                    }
                }
                // dB = A^T * dC
                let mut db = vec![0.0f32; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let arow = &da_v[i * k..(i + 1) * k];
                    for (kk, &aik) in arow.iter().enumerate() {
                        if aik == 0.0 {
                            continue;
                        }
                        let drow = &mut db[kk * n..(kk + 1) * n];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d += aik * gv;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![m, k], da));
                self.accumulate(grads, *b, Tensor::new(vec![k, n], db));
            }
            Op::Sum(a) => {
                let g = grad.item();
                let d = Tensor::filled(self.value(*a).shape().to_vec(), g);
                self.accumulate(grads, *a, d);
            }
            Op::Mean(a) => {
                let g = grad.item() / self.value(*a).numel() as f32;
                let d = Tensor::filled(self.value(*a).shape().to_vec(), g);
                self.accumulate(grads, *a, d);
            }
            Op::L2Norm(a) => {
                let norm = node.value.item();
                let g = grad.item();
                let x = self.value(*a);
                let d = if norm > 0.0 {
                    x.map(|v| g * v / norm)
                } else {
                    Tensor::zeros(x.shape().to_vec())
                };
                self.accumulate(grads, *a, d);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                let si = self.value(*input).shape().to_vec();
                let sk = self.value(*kernel).shape().to_vec();
                let (ci, h, w) = (si[0], si[1], si[2]);
                let (co, kh, kw) = (sk[0], sk[2], sk[3]);
                let g = grad.data();
                if self.nodes[input.0].requires_grad {
                    let mut din = vec![0.0f32; ci * h * w];
                    conv2d_backward_input(
                        g,
                        self.value(*kernel).data(),
                        &mut din,
                        ci,
                        co,
                        h,
                        w,
                        kh,
                        kw,
                    );
                    self.accumulate(grads, *input, Tensor::new(si, din));
                }
                if self.nodes[kernel.0].requires_grad {
                    let mut dker = vec![0.0f32; co * ci * kh * kw];
                    conv2d_backward_kernel(
                        g,
                        self.value(*input).data(),
                        &mut dker,
                        ci,
                        co,
                        h,
                        w,
                        kh,
                        kw,
                    );
                    self.accumulate(grads, *kernel, Tensor::new(sk, dker));
                }
                if let Some(b) = bias {
                    if self.nodes[b.0].requires_grad {
                        let mut dbias = vec![0.0f32; co];
                        for c in 0..co {
                            dbias[c] = g[c * h * w..(c + 1) * h * w].iter().sum();
                        }
                        self.accumulate(grads, *b, Tensor::new(vec![co], dbias));
                    }
                }
            }
            Op::AvgPool2(a) => {
                let s = self.value(*a).shape().to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            let g = 0.25 * grad.data()[ch * oh * ow + y * ow + x];
                            let base = ch * h * w + 2 * y * w + 2 * x;
                            d[base] += g;
                            d[base + 1] += g;
                            d[base + w] += g;
                            d[base + w + 1] += g;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(s, d));
            }
            Op::Upsample2(a) => {
                let s = self.value(*a).shape().to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let base = ch * oh * ow + 2 * y * ow + 2 * x;
                            d[ch * h * w + y * w + x] = grad.data()[base]
                                + grad.data()[base + 1]
                                + grad.data()[base + ow]
                                + grad.data()[base + ow + 1];
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(s, d));
            }
            Op::MaxSpatial(a) => {
                let s = self.value(*a).shape().to_vec();
                let (c, hw) = (s[0], s[1] * s[2]);
                let src = self.value(*a).data();
                let mut d = vec![0.0; src.len()];
                for ch in 0..c {
                    let row = &src[ch * hw..(ch + 1) * hw];
                    let mut best = 0;
                    for (i, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = i;
                        }
                    }
                    d[ch * hw + best] = grad.data()[ch];
                }
                self.accumulate(grads, *a, Tensor::new(s, d));
            }
            Op::MulChannel { image, mask } => {
                let si = self.value(*image).shape().to_vec();
                let hw = si[1] * si[2];
                let img = self.value(*image).data();
                let msk = self.value(*mask).data();
                if self.nodes[image.0].requires_grad {
                    let mut d = vec![0.0; img.len()];
                    for c in 0..si[0] {
                        for p in 0..hw {
                            d[c * hw + p] = grad.data()[c * hw + p] * msk[p];
                        }
                    }
                    self.accumulate(grads, *image, Tensor::new(si.clone(), d));
                }
                if self.nodes[mask.0].requires_grad {
                    let mut d = vec![0.0; hw];
                    for c in 0..si[0] {
                        for p in 0..hw {
                            d[p] += grad.data()[c * hw + p] * img[c * hw + p];
                        }
                    }
                    self.accumulate(
                        grads,
                        *mask,
                        Tensor::new(self.value(*mask).shape().to_vec(), d),
                    );
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    src: &[f32],
    ker: &[f32],
    out: &mut [f32],
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) {
    let (ph, pw) = (kh / 2, kw / 2);
    for c_out in 0..co {
        for c_in in 0..ci {
            for ky in 0..kh {
                let dy = ky as isize - ph as isize;
                let y0 = (-dy).max(0) as usize;
                let y1 = ((h as isize - dy).min(h as isize)) as usize;
                for kx in 0..kw {
                    let dx = kx as isize - pw as isize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((w as isize - dx).min(w as isize)) as usize;
                    let wv = ker[((c_out * ci + c_in) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let orow = &mut out[(c_out * h + y) * w + x0..(c_out * h + y) * w + x1];
                        let irow = &src[(c_in * h + iy) * w + (x0 as isize + dx) as usize..];
                        for (o, &iv) in orow.iter_mut().zip(irow) {
                            *o += wv * iv;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(
    dout: &[f32],
    ker: &[f32],
    din: &mut [f32],
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) {
    let (ph, pw) = (kh / 2, kw / 2);
    for c_out in 0..co {
        for c_in in 0..ci {
            for ky in 0..kh {
                let dy = ky as isize - ph as isize;
                let y0 = (-dy).max(0) as usize;
                let y1 = ((h as isize - dy).min(h as isize)) as usize;
                for kx in 0..kw {
                    let dx = kx as isize - pw as isize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((w as isize - dx).min(w as isize)) as usize;
                    let wv = ker[((c_out * ci + c_in) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let grow = &dout[(c_out * h + y) * w + x0..(c_out * h + y) * w + x1];
                        let drow = &mut din[(c_in * h + iy) * w + (x0 as isize + dx) as usize..];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d += wv * gv;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_kernel(
    dout: &[f32],
    src: &[f32],
    dker: &mut [f32],
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) {
    let (ph, pw) = (kh / 2, kw / 2);
    for c_out in 0..co {
        for c_in in 0..ci {
            for ky in 0..kh {
                let dy = ky as isize - ph as isize;
                let y0 = (-dy).max(0) as usize;
                let y1 = ((h as isize - dy).min(h as isize)) as usize;
                for kx in 0..kw {
                    let dx = kx as isize - pw as isize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((w as isize - dx).min(w as isize)) as usize;
                    let mut acc = 0.0f32;
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let grow = &dout[(c_out * h + y) * w + x0..(c_out * h + y) * w + x1];
                        let irow = &src[(c_in * h + iy) * w + (x0 as isize + dx) as usize..];
                        for (&gv, &iv) in grow.iter().zip(irow) {
                            acc += gv * iv;
                        }
                    }
                    dker[((c_out * ci + c_in) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
}
