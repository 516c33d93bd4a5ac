use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Smallest norm `normalize_rows` divides by.
pub const NORMALIZE_FLOOR: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride and zero padding of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self { stride: 1, padding: 0 }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        c_out: usize,
        cols: Vec<f64>,
    },
    Relu(Var),
    AvgPool2d(Var, usize),
    Upsample2d(Var, usize),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    L2Norm(Var),
    NormalizeRows {
        input: Var,
        norms: Vec<f64>,
    },
    SqL2Distance(Var, Var),
    L1Distance(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Blend {
        a: Var,
        b: Var,
        mask: Tensor,
    },
    Clamp {
        input: Var,
        lo: f64,
        hi: f64,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Tensor>,
}

/// A recorded forward computation.
///
/// Nodes are appended in execution order, so the node list is always a
/// topological order. A graph must stay on the thread that built it.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
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

    /// Registers an input tensor. Gradients are only collected for leaves
    /// created with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
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

    /// Gradient of the last [`backward`](Self::backward) loss with respect
    /// to a `requires_grad` leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        check_finite(op_name, &data)?;
        let requires_grad = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts_unchecked(shape, data),
            requires_grad,
            op,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::SqL2Distance(a, b)
            | Op::L1Distance(a, b)
            | Op::Blend { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::AvgPool2d(a, _)
            | Op::Upsample2d(a, _)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::L2Norm(a)
            | Op::NormalizeRows { input: a, .. }
            | Op::CrossEntropy { logits: a, .. }
            | Op::Clamp { input: a, .. } => vec![*a],
            Op::Conv2d {
                input, weight, bias, ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.value(a).expect_same_shape(op, self.value(b))
    }

    fn elementwise(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|v| v * s).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, data, Op::Scale(a, s))
    }

    /// `[m, k] × [k, n] → [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    /// Adds a rank-1 bias `[n]` to every row of `[.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::shape("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let n = sb[0];
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        let shape = sx.to_vec();
        self.push("add_bias", shape, data, Op::AddBias(x, bias))
    }

    /// 2-D convolution of `[b, c_in, h, w]` with `[c_out, c_in, kh, kw]`
    /// and an optional per-output-channel bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] {
            return Err(Error::shape("conv2d", format!("input {si:?}, weight {sw:?}")));
        }
        if spec.stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let (batch, c_in, h, w) = (si[0], si[1], si[2], si[3]);
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {c_out} channels", self.shape(b)),
                ));
            }
        }
        let (hp, wp) = (h + 2 * spec.padding, w + 2 * spec.padding);
        if hp < kh || wp < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {hp}x{wp}"),
            ));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            kh,
            kw,
            stride: spec.stride,
            pad: spec.padding,
            h_out: (hp - kh) / spec.stride + 1,
            w_out: (wp - kw) / spec.stride + 1,
        };
        let (rows, ncol) = (geom.rows(), geom.cols());
        let mut cols = vec![0.0; batch * rows * ncol];
        let mut out = vec![0.0; batch * c_out * ncol];
        let x = self.value(input).data();
        let wdata = self.value(weight).data();
        let bdata = bias.map(|b| self.value(b).data());
        for bi in 0..batch {
            let col_b = &mut cols[bi * rows * ncol..(bi + 1) * rows * ncol];
            kernels::im2col(&geom, &x[bi * c_in * h * w..(bi + 1) * c_in * h * w], col_b);
            let out_b = &mut out[bi * c_out * ncol..(bi + 1) * c_out * ncol];
            if let Some(bd) = bdata {
                for (co, chunk) in out_b.chunks_mut(ncol).enumerate() {
                    chunk.fill(bd[co]);
                }
            }
            kernels::gemm_nn(c_out, rows, ncol, wdata, col_b, out_b);
        }
        let shape = vec![batch, c_out, geom.h_out, geom.w_out];
        self.push(
            "conv2d",
            shape,
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                batch,
                c_out,
                cols,
            },
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push("relu", shape, data, Op::Relu(a))
    }

    /// Non-overlapping `k×k` average pooling over the last two axes of a
    /// rank-4 tensor. Height and width must be multiples of `k`.
    pub fn avg_pool2d(&mut self, a: Var, k: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return Err(Error::shape("avg_pool2d", format!("{s:?} with window {k}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / k, w / k);
        let x = self.value(a).data();
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            for y in 0..h {
                for xx in 0..w {
                    out[(p * ho + y / k) * wo + xx / k] += x[(p * h + y) * w + xx] * inv;
                }
            }
        }
        self.push("avg_pool2d", vec![s[0], s[1], ho, wo], out, Op::AvgPool2d(a, k))
    }

    /// Nearest-neighbour upsampling of a rank-4 tensor by an integer factor.
    pub fn upsample_nearest2d(&mut self, a: Var, factor: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(Error::shape("upsample_nearest2d", format!("{s:?} by {factor}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h * factor, w * factor);
        let x = self.value(a).data();
        let mut out = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            for y in 0..ho {
                for xx in 0..wo {
                    out[(p * ho + y) * wo + xx] = x[(p * h + y / factor) * w + xx / factor];
                }
            }
        }
        self.push(
            "upsample_nearest2d",
            vec![s[0], s[1], ho, wo],
            out,
            Op::Upsample2d(a, factor),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let data = self.value(a).data().to_vec();
        self.push("reshape", shape, data, Op::Reshape(a))
    }

    /// `[b, ...] → [b, prod(...)]`
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let (&b, rest) = s.split_first().ok_or_else(|| Error::shape("flatten", "scalar input"))?;
        let inner = rest.iter().product::<usize>();
        self.reshape(a, vec![b, inner])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", vec![], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let m = t.mean();
        self.push("mean", vec![], vec![m], Op::Mean(a))
    }

    /// Euclidean norm of all elements, as a scalar.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).norm_l2();
        self.push("l2_norm", vec![], vec![n], Op::L2Norm(a))
    }

    /// Divides each row of the last axis by `sqrt(‖row‖² + δ²)` with
    /// `δ = NORMALIZE_FLOOR`: unit norm for any row not vanishingly small,
    /// and a zero row maps to zero with a finite gradient.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("normalize_rows", "scalar input"))?;
        if d == 0 {
            return Err(Error::shape("normalize_rows", "empty rows"));
        }
        let x = self.value(a).data();
        let mut norms = Vec::with_capacity(x.len() / d);
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(d) {
            let n = (kernels::dot(row, row) + NORMALIZE_FLOOR * NORMALIZE_FLOOR).sqrt();
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        self.push("normalize_rows", s, out, Op::NormalizeRows { input: a, norms })
    }

    /// `Σ (a − b)²` as a scalar.
    pub fn sq_l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sq_l2_distance", a, b)?;
        let d: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push("sq_l2_distance", vec![], vec![d], Op::SqL2Distance(a, b))
    }

    /// Mean absolute difference `mean |a − b|` as a scalar.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_distance", a, b)?;
        let n = self.value(a).len().max(1) as f64;
        let d: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / n;
        self.push("l1_distance", vec![], vec![d], Op::L1Distance(a, b))
    }

    /// Mean softmax cross-entropy of `[b, k]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let k = s[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let x = self.value(logits).data();
        let mut probs = Vec::with_capacity(x.len());
        let mut loss = 0.0;
        for (row, &label) in x.chunks(k).zip(labels) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let log_z = z.ln() + mx;
            loss += log_z - row[label];
            probs.extend(row.iter().map(|v| (v - log_z).exp()));
        }
        loss /= labels.len() as f64;
        self.push(
            "cross_entropy",
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// `a ⊙ mask + b ⊙ (1 − mask)` with a constant mask.
    pub fn elementwise_blend(&mut self, a: Var, b: Var, mask: &Tensor) -> Result<Var> {
        self.same_shape("elementwise_blend", a, b)?;
        self.value(a).expect_same_shape("elementwise_blend", mask)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .zip(mask.data())
            .map(|((x, y), m)| x * m + y * (1.0 - m))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(
            "elementwise_blend",
            shape,
            data,
            Op::Blend {
                a,
                b,
                mask: mask.clone(),
            },
        )
    }

    /// Clamps into `[lo, hi]`; gradient flows only where the input was
    /// inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = self.shape(a).to_vec();
        self.push("clamp", shape, data, Op::Clamp { input: a, lo, hi })
    }

    /// Back-propagates from a one-element loss. Afterwards every leaf that
    /// requires grad and is reachable from `loss` holds `d loss / d leaf`;
    /// unreachable ones hold zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid("loss does not belong to this graph"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, shape is {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                check_finite("backward", &g)?;
                node.grad = Some(Tensor::from_parts_unchecked(node.value.shape().to_vec(), g));
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.wants(v) {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(d, s)| *d += s));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(d, s)| *d += s));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(d, s)| *d += s));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |buf| {
                    for ((d, s), y) in buf.iter_mut().zip(g).zip(vb) {
                        *d += s * y;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((d, s), x) in buf.iter_mut().zip(g).zip(va) {
                        *d += s * x;
                    }
                });
            }
            Op::Scale(a, k) => {
                acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(d, s)| *d += s * k));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |buf| kernels::gemm_nt(m, n, k, g, vb, buf));
                acc(*b, &mut |buf| kernels::gemm_tn(k, m, n, va, g, buf));
            }
            Op::AddBias(x, b) => {
                let n = self.value(*b).len();
                acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(d, s)| *d += s));
                acc(*b, &mut |buf| {
                    for (j, s) in g.iter().enumerate() {
                        buf[j % n] += s;
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                batch,
                c_out,
                cols,
            } => {
                let (rows, ncol) = (geom.rows(), geom.cols());
                let img = geom.c_in * geom.h * geom.w;
                if let Some(b) = bias {
                    acc(*b, &mut |buf| {
                        for bi in 0..*batch {
                            for co in 0..*c_out {
                                let off = (bi * c_out + co) * ncol;
                                buf[co] += g[off..off + ncol].iter().sum::<f64>();
                            }
                        }
                    });
                }
                acc(*weight, &mut |buf| {
                    for bi in 0..*batch {
                        let g_b = &g[bi * c_out * ncol..(bi + 1) * c_out * ncol];
                        let col_b = &cols[bi * rows * ncol..(bi + 1) * rows * ncol];
                        kernels::gemm_nt(*c_out, ncol, rows, g_b, col_b, buf);
                    }
                });
                let wdata = self.value(*weight).data();
                acc(*input, &mut |buf| {
                    let mut dcols = vec![0.0; rows * ncol];
                    for bi in 0..*batch {
                        dcols.fill(0.0);
                        let g_b = &g[bi * c_out * ncol..(bi + 1) * c_out * ncol];
                        kernels::gemm_tn(rows, *c_out, ncol, wdata, g_b, &mut dcols);
                        kernels::col2im(geom, &dcols, &mut buf[bi * img..(bi + 1) * img]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |buf| {
                    for ((d, s), v) in buf.iter_mut().zip(g).zip(x) {
                        if *v > 0.0 {
                            *d += s;
                        }
                    }
                });
            }
            Op::AvgPool2d(a, k) => {
                let s = self.shape(*a);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (ho, wo) = (h / k, w / k);
                let inv = 1.0 / (k * k) as f64;
                acc(*a, &mut |buf| {
                    for p in 0..planes {
                        for y in 0..h {
                            for x in 0..w {
                                buf[(p * h + y) * w + x] += g[(p * ho + y / k) * wo + x / k] * inv;
                            }
                        }
                    }
                });
            }
            Op::Upsample2d(a, f) => {
                let s = self.shape(*a);
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (ho, wo) = (h * f, w * f);
                acc(*a, &mut |buf| {
                    for p in 0..planes {
                        for y in 0..ho {
                            for x in 0..wo {
                                buf[(p * h + y / f) * w + x / f] += g[(p * ho + y) * wo + x];
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(d, s)| *d += s));
            }
            Op::Sum(a) => {
                acc(*a, &mut |buf| buf.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc(*a, &mut |buf| buf.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::L2Norm(a) => {
                let norm = node.value.data()[0];
                let x = self.value(*a).data();
                acc(*a, &mut |buf| {
                    if norm > 0.0 {
                        for (d, v) in buf.iter_mut().zip(x) {
                            *d += g[0] * v / norm;
                        }
                    }
                });
            }
            Op::NormalizeRows { input, norms } => {
                let y = node.value.data();
                let d = y.len() / norms.len();
                acc(*input, &mut |buf| {
                    for (r, n) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let proj = kernels::dot(yr, gr);
                        for j in 0..d {
                            buf[r * d + j] += (gr[j] - yr[j] * proj) / n;
                        }
                    }
                });
            }
            Op::SqL2Distance(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |buf| {
                    for ((d, x), y) in buf.iter_mut().zip(va).zip(vb) {
                        *d += 2.0 * g[0] * (x - y);
                    }
                });
                acc(*b, &mut |buf| {
                    for ((d, x), y) in buf.iter_mut().zip(va).zip(vb) {
                        *d -= 2.0 * g[0] * (x - y);
                    }
                });
            }
            Op::L1Distance(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let scale = g[0] / va.len().max(1) as f64;
                let sign = |x: f64, y: f64| {
                    if x > y {
                        1.0
                    } else if x < y {
                        -1.0
                    } else {
                        0.0
                    }
                };
                acc(*a, &mut |buf| {
                    for ((d, x), y) in buf.iter_mut().zip(va).zip(vb) {
                        *d += scale * sign(*x, *y);
                    }
                });
                acc(*b, &mut |buf| {
                    for ((d, x), y) in buf.iter_mut().zip(va).zip(vb) {
                        *d -= scale * sign(*x, *y);
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / labels.len() as f64;
                acc(*logits, &mut |buf| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            buf[r * k + j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                });
            }
            Op::Blend { a, b, mask } => {
                let m = mask.data();
                acc(*a, &mut |buf| {
                    for ((d, s), mv) in buf.iter_mut().zip(g).zip(m) {
                        *d += s * mv;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((d, s), mv) in buf.iter_mut().zip(g).zip(m) {
                        *d += s * (1.0 - mv);
                    }
                });
            }
            Op::Clamp { input, lo, hi } => {
                let x = self.value(*input).data();
                acc(*input, &mut |buf| {
                    for ((d, s), v) in buf.iter_mut().zip(g).zip(x) {
                        if *v >= *lo && *v <= *hi {
                            *d += s;
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn normalize_rows_zero_row_is_finite() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 3.0, 0.0, 4.0]).unwrap(),
            true,
        );
        let y = g.normalize_rows(x).unwrap();
        assert_eq!(&g.value(y).data()[..3], &[0.0, 0.0, 0.0]);
        assert!((g.value(y).data()[3] - 0.6).abs() < 1e-15);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sq_l2_distance_of_identical_is_zero() {
        let mut g = Graph::new();
        let v = g.constant(t(&[4], &[0.3, -1.2, 5.0, 2.0]));
        let d = g.sq_l2_distance(v, v).unwrap();
        assert_eq!(g.value(d).item().unwrap(), 0.0);
    }

    #[test]
    fn conv2d_all_ones_kernel_sums_windows() {
        // hand-summed 2x2 windows of [[1,2,3],[4,5,6],[7,8,9]]
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let w = g.constant(Tensor::ones(vec![1, 1, 2, 2]));
        let y = g.conv2d(x, w, None, Conv2dSpec::default()).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn blend_grad_equals_mask() {
        let mut g = Graph::new();
        let mask = t(&[4], &[1.0, 0.0, 1.0, 0.0]);
        let x = g.param(t(&[4], &[0.1, 0.2, 0.3, 0.4]));
        let n = g.constant(t(&[4], &[0.9, 0.8, 0.7, 0.6]));
        let y = g.elementwise_blend(x, n, &mask).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &mask);
        assert_eq!(g.value(y).data(), &[0.1, 0.8, 0.3, 0.6]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Shape { .. })));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 2]));
        let err = g.matmul(b, b).and_then(|_| g.matmul(a, a)).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        assert!(g.add(a, b).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1], &[1e308]));
        assert!(matches!(g.scale(a, 10.0), Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let unused = g.param(t(&[2], &[3.0, 4.0]));
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn constants_are_not_recorded_for_grad() {
        let mut g = Graph::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let y = g.scale(c, 3.0).unwrap();
        assert!(!g.requires_grad(y));
    }
}
