use super::kernels::{self, AttnGeometry, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitives with backward rules, in the order they are reported by
/// gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    MatMul,
    Conv1d,
    Add,
    Sub,
    Mul,
    Scale,
    Gelu,
    Softmax,
    LogSoftmax,
    ClampLog,
    LayerNorm,
    GroupNorm,
    Sum,
    Mean,
    MeanRows,
    Transpose,
    Reshape,
    Narrow,
    ConcatRows,
    ScaledDotAttention,
}

impl Primitive {
    pub const ALL: [Primitive; 20] = [
        Primitive::MatMul,
        Primitive::Conv1d,
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::Gelu,
        Primitive::Softmax,
        Primitive::LogSoftmax,
        Primitive::ClampLog,
        Primitive::LayerNorm,
        Primitive::GroupNorm,
        Primitive::Sum,
        Primitive::Mean,
        Primitive::MeanRows,
        Primitive::Transpose,
        Primitive::Reshape,
        Primitive::Narrow,
        Primitive::ConcatRows,
        Primitive::ScaledDotAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Conv1d => "conv1d",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::Gelu => "gelu",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::ClampLog => "clamp_log",
            Primitive::LayerNorm => "layer_norm",
            Primitive::GroupNorm => "group_norm",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::MeanRows => "mean_rows",
            Primitive::Transpose => "transpose",
            Primitive::Reshape => "reshape",
            Primitive::Narrow => "narrow",
            Primitive::ConcatRows => "concat_rows",
            Primitive::ScaledDotAttention => "scaled_dot_attention",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dAttrs {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv1dAttrs {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Conv1d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geo: ConvGeometry,
    },
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Scale(usize, f64),
    Gelu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    ClampLog {
        a: usize,
        floor: f64,
    },
    Normalize {
        a: usize,
        chunk: usize,
        inv_std: Vec<f64>,
    },
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    Transpose(usize),
    Reshape(usize),
    Narrow {
        a: usize,
        axis: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        geo: AttnGeometry,
        probs: Vec<f64>,
    },
}

/// How the second operand of a binary op maps onto the first.
#[derive(Debug, Clone)]
enum Broadcast {
    Same,
    /// Right operand is a single value.
    Scalar,
    /// Right operand is repeated every `period` elements.
    Suffix(usize),
    /// Flat index into the right operand for every element of the left.
    Map(Vec<usize>),
}

impl Broadcast {
    fn resolve(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Broadcast::Same);
        }
        let b_numel: usize = b.iter().product();
        if b_numel == 1 {
            return Ok(Broadcast::Scalar);
        }
        if b.len() > a.len() {
            return Err(Error::shape(
                op,
                format!("cannot broadcast {b:?} onto {a:?}"),
            ));
        }
        let lead = a.len() - b.len();
        if a[lead..] == *b {
            return Ok(Broadcast::Suffix(b_numel));
        }
        for (i, &bd) in b.iter().enumerate() {
            if bd != 1 && bd != a[lead + i] {
                return Err(Error::shape(
                    op,
                    format!("cannot broadcast {b:?} onto {a:?}"),
                ));
            }
        }
        // General case: strides of b aligned to a's trailing dims, zero where b has extent 1.
        let mut b_strides = vec![0usize; a.len()];
        let mut stride = 1;
        for i in (0..b.len()).rev() {
            if b[i] != 1 {
                b_strides[lead + i] = stride;
            }
            stride *= b[i];
        }
        let numel: usize = a.iter().product();
        let mut map = Vec::with_capacity(numel);
        let mut idx = vec![0usize; a.len()];
        for _ in 0..numel {
            map.push(idx.iter().zip(&b_strides).map(|(i, s)| i * s).sum());
            for d in (0..a.len()).rev() {
                idx[d] += 1;
                if idx[d] < a[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Broadcast::Map(map))
    }

    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Suffix(p) => i % p,
            Broadcast::Map(m) => m[i],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    finite: bool,
    grad: Option<Tensor>,
}

/// Records primitives for one forward pass; see the module docs.
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

    /// Inserts a leaf. Leaves with `requires_grad` receive gradients from
    /// [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let finite = value.is_finite();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            finite,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    /// Accumulated gradient of a leaf, if any backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn check_finite(&self, op: &'static str, inputs: &[usize]) -> Result<()> {
        if inputs.iter().all(|&i| self.nodes[i].finite) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    fn push(&mut self, op: Op, inputs: &[usize], shape: Vec<usize>, data: Vec<f64>) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let value = Tensor::from_parts(shape, data);
        let finite = value.is_finite();
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
            finite,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(
                op,
                format!("expected a rank-2 input, got {s:?}"),
            )),
        }
    }

    // ---- primitives -------------------------------------------------------

    /// `[m,k] · [k,n] → [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "matmul";
        let (m, k) = self.rank2(OP, a)?;
        let (k2, n) = self.rank2(OP, b)?;
        if k != k2 {
            return Err(Error::shape(
                OP,
                format!("inner dims differ: [{m},{k}] · [{k2},{n}]"),
            ));
        }
        self.check_finite(OP, &[a.0, b.0])?;
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Op::MatMul(a.0, b.0), &[a.0, b.0], vec![m, n], data))
    }

    /// 1-D convolution of `x: [c_in, time]` with `w: [c_out, c_in/groups, kernel]`
    /// and optional `bias: [c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, attrs: Conv1dAttrs) -> Result<Var> {
        const OP: &str = "conv1d";
        let (c_in, t_in) = self.rank2(OP, x)?;
        let (c_out, cin_g, kernel) = match *self.shape(w) {
            [a, b, c] => (a, b, c),
            ref s => {
                return Err(Error::shape(
                    OP,
                    format!("weight must be rank 3, got {s:?}"),
                ))
            }
        };
        let Conv1dAttrs {
            stride,
            padding,
            groups,
        } = attrs;
        if stride == 0 || groups == 0 || kernel == 0 {
            return Err(Error::shape(
                OP,
                "stride, groups and kernel must be positive",
            ));
        }
        if c_in % groups != 0 || c_out % groups != 0 || cin_g != c_in / groups {
            return Err(Error::shape(
                OP,
                format!("channels in={c_in} out={c_out} weight={cin_g} incompatible with groups={groups}"),
            ));
        }
        if t_in + 2 * padding < kernel {
            return Err(Error::shape(
                OP,
                format!("input length {t_in} (padding {padding}) shorter than kernel {kernel}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::shape(
                    OP,
                    format!("bias shape {:?}, expected [{c_out}]", self.shape(b)),
                ));
            }
        }
        let mut inputs = vec![x.0, w.0];
        inputs.extend(bias.map(|b| b.0));
        self.check_finite(OP, &inputs)?;
        let t_out = (t_in + 2 * padding - kernel) / stride + 1;
        let geo = ConvGeometry {
            c_in,
            c_out,
            t_in,
            t_out,
            kernel,
            stride,
            padding,
            groups,
        };
        let data = kernels::conv1d(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            geo,
        );
        let op = Op::Conv1d {
            x: x.0,
            w: w.0,
            b: bias.map(|b| b.0),
            geo,
        };
        Ok(self.push(op, &inputs, vec![c_out, t_out], data))
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(usize, usize, Broadcast) -> Op,
    ) -> Result<Var> {
        let bc = Broadcast::resolve(op_name, self.shape(a), self.shape(b))?;
        self.check_finite(op_name, &[a.0, b.0])?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data = match &bc {
            Broadcast::Same => av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect(),
            _ => av
                .iter()
                .enumerate()
                .map(|(i, x)| f(*x, bv[bc.index(i)]))
                .collect(),
        };
        let shape = self.shape(a).to_vec();
        Ok(self.push(make(a.0, b.0, bc), &[a.0, b.0], shape, data))
    }

    /// Elementwise `a + b`; `b` broadcasts onto `a` along trailing dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check_finite("scale", &[a.0])?;
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Scale(a.0, c), &[a.0], shape, data))
    }

    /// `x·Φ(x)` with the exact error function.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check_finite("gelu", &[a.0])?;
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| kernels::gelu(x))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Gelu(a.0), &[a.0], shape, data))
    }

    fn last_dim(&self, op: &'static str, a: Var) -> Result<usize> {
        match self.shape(a).last() {
            Some(&w) if w > 0 => Ok(w),
            _ => Err(Error::shape(
                op,
                format!("needs a non-empty last axis, got {:?}", self.shape(a)),
            )),
        }
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let width = self.last_dim("softmax", a)?;
        self.check_finite("softmax", &[a.0])?;
        let data = kernels::softmax_rows(self.value(a).data(), width);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Softmax(a.0), &[a.0], shape, data))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let width = self.last_dim("log_softmax", a)?;
        self.check_finite("log_softmax", &[a.0])?;
        let data = kernels::log_softmax_rows(self.value(a).data(), width);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::LogSoftmax(a.0), &[a.0], shape, data))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn clamp_log(&mut self, a: Var, floor: f64) -> Result<Var> {
        if floor.is_nan() || floor <= 0.0 {
            return Err(Error::Invalid(format!(
                "clamp_log floor must be positive, got {floor}"
            )));
        }
        self.check_finite("clamp_log", &[a.0])?;
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x.max(floor).ln())
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::ClampLog { a: a.0, floor }, &[a.0], shape, data))
    }

    /// Zero-mean, unit-variance normalization over the last axis (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let width = self.last_dim("layer_norm", a)?;
        self.normalize("layer_norm", a, width, eps)
    }

    /// Normalization of `[channels, time]` over groups of `channels/groups`
    /// consecutive channels and all frames. `groups == channels` normalizes
    /// each channel over time.
    pub fn group_norm(&mut self, a: Var, groups: usize, eps: f64) -> Result<Var> {
        let (c, t) = self.rank2("group_norm", a)?;
        if groups == 0 || c % groups != 0 || t == 0 {
            return Err(Error::shape(
                "group_norm",
                format!("{c} channels not divisible into {groups} groups (time {t})"),
            ));
        }
        self.normalize("group_norm", a, (c / groups) * t, eps)
    }

    fn normalize(&mut self, op: &'static str, a: Var, chunk: usize, eps: f64) -> Result<Var> {
        self.check_finite(op, &[a.0])?;
        let (data, inv_std) = kernels::normalize_chunks(self.value(a).data(), chunk, eps);
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            Op::Normalize {
                a: a.0,
                chunk,
                inv_std,
            },
            &[a.0],
            shape,
            data,
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check_finite("sum", &[a.0])?;
        let s = self.value(a).data().iter().sum();
        Ok(self.push(Op::Sum(a.0), &[a.0], Vec::new(), vec![s]))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::shape("mean", "empty input"));
        }
        self.check_finite("mean", &[a.0])?;
        let s = self.value(a).data().iter().sum::<f64>() / n as f64;
        Ok(self.push(Op::Mean(a.0), &[a.0], Vec::new(), vec![s]))
    }

    /// Mean over the first axis: `[rows, cols] → [cols]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rank2("mean_rows", a)?;
        if r == 0 {
            return Err(Error::shape("mean_rows", "no rows"));
        }
        self.check_finite("mean_rows", &[a.0])?;
        let mut out = vec![0.0; c];
        for row in self.value(a).data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        Ok(self.push(Op::MeanRows(a.0), &[a.0], vec![c], out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rank2("transpose", a)?;
        self.check_finite("transpose", &[a.0])?;
        let data = transpose(self.value(a).data(), r, c);
        Ok(self.push(Op::Transpose(a.0), &[a.0], vec![c, r], data))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} → {shape:?} changes element count", self.shape(a)),
            ));
        }
        self.check_finite("reshape", &[a.0])?;
        let data = self.value(a).data().to_vec();
        Ok(self.push(Op::Reshape(a.0), &[a.0], shape.to_vec(), data))
    }

    /// Slice `len` entries starting at `start` along `axis` of a rank-2 tensor.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rank2("narrow", a)?;
        let extent = match axis {
            0 => r,
            1 => c,
            _ => {
                return Err(Error::shape(
                    "narrow",
                    format!("axis {axis} out of range for rank 2"),
                ))
            }
        };
        if len == 0 || start + len > extent {
            return Err(Error::shape(
                "narrow",
                format!(
                    "range {start}..{} outside axis {axis} of extent {extent}",
                    start + len
                ),
            ));
        }
        self.check_finite("narrow", &[a.0])?;
        let src = self.value(a).data();
        let (shape, data) = if axis == 0 {
            (vec![len, c], src[start * c..(start + len) * c].to_vec())
        } else {
            let mut d = Vec::with_capacity(r * len);
            for row in src.chunks(c) {
                d.extend_from_slice(&row[start..start + len]);
            }
            (vec![r, len], d)
        };
        Ok(self.push(
            Op::Narrow {
                a: a.0,
                axis,
                start,
            },
            &[a.0],
            shape,
            data,
        ))
    }

    /// Stacks rank-2 tensors with equal column counts along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let (_, c) = self.rank2("concat_rows", first)?;
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.rank2("concat_rows", p)?;
            if pc != c {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column counts {c} and {pc} differ"),
                ));
            }
            rows += r;
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.check_finite("concat_rows", &idx)?;
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Op::ConcatRows(idx.clone()), &idx, vec![rows, c], data))
    }

    /// Multi-head scaled dot-product self-attention. `q`, `k`, `v` are
    /// `[frames, dim]`; heads split `dim` into contiguous slices.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        const OP: &str = "scaled_dot_attention";
        let (frames, dim) = self.rank2(OP, q)?;
        if self.shape(k) != [frames, dim] || self.shape(v) != [frames, dim] {
            return Err(Error::shape(
                OP,
                format!(
                    "q {:?}, k {:?}, v {:?} must share one shape",
                    self.shape(q),
                    self.shape(k),
                    self.shape(v)
                ),
            ));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(Error::shape(
                OP,
                format!("dim {dim} not divisible by {heads} heads"),
            ));
        }
        self.check_finite(OP, &[q.0, k.0, v.0])?;
        let geo = AttnGeometry { frames, dim, heads };
        let (data, probs) = kernels::attention(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            geo,
        );
        let op = Op::Attention {
            q: q.0,
            k: k.0,
            v: v.0,
            geo,
            probs,
        };
        Ok(self.push(op, &[q.0, k.0, v.0], vec![frames, dim], data))
    }

    // ---- backward ---------------------------------------------------------

    /// Propagates d(root)/d(leaf) into every leaf that requires gradients,
    /// adding to any gradient already stored there.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_shape = self.shape(root);
        if root_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarRoot(root_shape.to_vec()));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                if node.requires_grad {
                    let shape = node.value.shape().to_vec();
                    let slot = &mut self.nodes[id].grad;
                    match slot {
                        Some(acc) => {
                            for (a, d) in acc.data_mut().iter_mut().zip(&g) {
                                *a += d;
                            }
                        }
                        None => *slot = Some(Tensor::from_parts(shape, g)),
                    }
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[id];
        let val = |i: usize| nodes[i].value.data();
        let wants = |i: usize| nodes[i].requires_grad;
        let fresh = |i: usize| vec![0.0; nodes[i].value.numel()];

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                let n = nodes[*b].value.shape()[1];
                let mut da = wants(*a).then(|| fresh(*a));
                let mut db = wants(*b).then(|| fresh(*b));
                kernels::matmul_backward(
                    val(*a),
                    val(*b),
                    g,
                    m,
                    k,
                    n,
                    da.as_deref_mut(),
                    db.as_deref_mut(),
                );
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Conv1d { x, w, b, geo } => {
                let mut dx = wants(*x).then(|| fresh(*x));
                let mut dw = wants(*w).then(|| fresh(*w));
                let mut db = b.filter(|&b| wants(b)).map(fresh);
                kernels::conv1d_backward(
                    val(*x),
                    val(*w),
                    g,
                    *geo,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
                if let Some(b) = b {
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if wants(*a) {
                    accumulate(grads, *a, Some(g.to_vec()));
                }
                if wants(*b) {
                    let mut db = fresh(*b);
                    for (i, gv) in g.iter().enumerate() {
                        db[bc.index(i)] += sign * gv;
                    }
                    accumulate(grads, *b, Some(db));
                }
            }
            Op::Mul(a, b, bc) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let da = g
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * bv[bc.index(i)])
                        .collect();
                    accumulate(grads, *a, Some(da));
                }
                if wants(*b) {
                    let mut db = fresh(*b);
                    for (i, gv) in g.iter().enumerate() {
                        db[bc.index(i)] += gv * av[i];
                    }
                    accumulate(grads, *b, Some(db));
                }
            }
            Op::Scale(a, c) => {
                accumulate(grads, *a, Some(g.iter().map(|gv| c * gv).collect()));
            }
            Op::Gelu(a) => {
                let da = g
                    .iter()
                    .zip(val(*a))
                    .map(|(gv, x)| gv * kernels::gelu_grad(*x))
                    .collect();
                accumulate(grads, *a, Some(da));
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let width = *node.value.shape().last().unwrap();
                let mut da = fresh(*a);
                for ((ys, gs), ds) in y
                    .chunks(width)
                    .zip(g.chunks(width))
                    .zip(da.chunks_mut(width))
                {
                    let inner = kernels::dot(ys, gs);
                    for ((d, yv), gv) in ds.iter_mut().zip(ys).zip(gs) {
                        *d = yv * (gv - inner);
                    }
                }
                accumulate(grads, *a, Some(da));
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let width = *node.value.shape().last().unwrap();
                let mut da = fresh(*a);
                for ((ys, gs), ds) in y
                    .chunks(width)
                    .zip(g.chunks(width))
                    .zip(da.chunks_mut(width))
                {
                    let total: f64 = gs.iter().sum();
                    for ((d, yv), gv) in ds.iter_mut().zip(ys).zip(gs) {
                        *d = gv - yv.exp() * total;
                    }
                }
                accumulate(grads, *a, Some(da));
            }
            Op::ClampLog { a, floor } => {
                let da = g
                    .iter()
                    .zip(val(*a))
                    .map(|(gv, x)| if *x > *floor { gv / x } else { 0.0 })
                    .collect();
                accumulate(grads, *a, Some(da));
            }
            Op::Normalize { a, chunk, inv_std } => {
                let mut da = fresh(*a);
                kernels::normalize_chunks_backward(node.value.data(), inv_std, g, *chunk, &mut da);
                accumulate(grads, *a, Some(da));
            }
            Op::Sum(a) => {
                accumulate(grads, *a, Some(vec![g[0]; nodes[*a].value.numel()]));
            }
            Op::Mean(a) => {
                let n = nodes[*a].value.numel();
                accumulate(grads, *a, Some(vec![g[0] / n as f64; n]));
            }
            Op::MeanRows(a) => {
                let c = g.len();
                let n = nodes[*a].value.numel();
                let r = (n / c) as f64;
                let da = (0..n).map(|i| g[i % c] / r).collect();
                accumulate(grads, *a, Some(da));
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                accumulate(grads, *a, Some(transpose(g, c, r)));
            }
            Op::Reshape(a) => {
                accumulate(grads, *a, Some(g.to_vec()));
            }
            Op::Narrow { a, axis, start } => {
                let c = nodes[*a].value.shape()[1];
                let mut da = fresh(*a);
                if *axis == 0 {
                    da[start * c..start * c + g.len()].copy_from_slice(g);
                } else {
                    let len = node.value.shape()[1];
                    for (row, gs) in da.chunks_mut(c).zip(g.chunks(len)) {
                        row[*start..*start + len].copy_from_slice(gs);
                    }
                }
                accumulate(grads, *a, Some(da));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p].value.numel();
                    if wants(p) {
                        accumulate(grads, p, Some(g[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                geo,
                probs,
            } => {
                let mut dq = wants(*q).then(|| fresh(*q));
                let mut dk = wants(*k).then(|| fresh(*k));
                let mut dv = wants(*v).then(|| fresh(*v));
                kernels::attention_backward(
                    val(*q),
                    val(*k),
                    val(*v),
                    probs,
                    g,
                    *geo,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                accumulate(grads, *q, dq);
                accumulate(grads, *k, dk);
                accumulate(grads, *v, dv);
            }
        }
    }
}

/// Adds `delta` into node `i`'s pending gradient. Inputs may alias (e.g.
/// `mul(x, x)`), so contributions are always summed, never overwritten.
fn accumulate(grads: &mut [Option<Vec<f64>>], i: usize, delta: Option<Vec<f64>>) {
    let Some(delta) = delta else { return };
    match &mut grads[i] {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(&delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn transpose(src: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}
