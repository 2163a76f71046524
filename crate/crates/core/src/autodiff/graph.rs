use std::str::FromStr;

use super::kernels::{mm_nn, mm_nt, mm_tn};
use super::tensor::{strides, Tensor};
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operations reachable through [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Square,
}

impl ElementwiseOp {
    fn tag(&self) -> &'static str {
        match self {
            ElementwiseOp::Add => "add",
            ElementwiseOp::Sub => "sub",
            ElementwiseOp::Mul => "mul",
            ElementwiseOp::Scale(_) => "scale",
            ElementwiseOp::Square => "square",
        }
    }
}

impl FromStr for ElementwiseOp {
    type Err = AutodiffError;

    /// Parses `add`, `sub`, `mul`, `square` or `scale:<factor>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(Self::Add),
            "sub" => Ok(Self::Sub),
            "mul" => Ok(Self::Mul),
            "square" => Ok(Self::Square),
            _ => s
                .strip_prefix("scale:")
                .and_then(|f| f.parse().ok())
                .map(Self::Scale)
                .ok_or_else(|| AutodiffError::UnknownOp(s.to_string())),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add {
        a: Var,
        b: Var,
        map: Option<Vec<usize>>,
    },
    Sub {
        a: Var,
        b: Var,
        map: Option<Vec<usize>>,
    },
    Mul {
        a: Var,
        b: Var,
        map: Option<Vec<usize>>,
    },
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Abs(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Gather {
        a: Var,
        map: Vec<usize>,
    },
    PrependRow {
        x: Var,
        row: Var,
    },
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so reverse
/// insertion order is a valid reverse topological order for backward.
#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    ops: Vec<Op>,
    requires: Vec<bool>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.requires.push(requires_grad);
        Var(self.values.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Accumulated gradient, `None` if backward never reached `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.values[v.0].shape(), g.clone()).expect("grad shape"))
    }

    /// Gradient as a tensor of zeros when backward never reached `v`.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.values[v.0].shape()))
    }

    fn req(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        mm_nn(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let value = Tensor::new(&[m, n], out)?;
        let req = self.req(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), req))
    }

    /// Batched product over a leading group axis: `[g,m,k]·[g,k,n]`, or
    /// `[g,m,k]·[g,n,k]ᵀ` when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b {
                sa[2] == sb[2]
            } else {
                sa[2] == sb[1]
            };
        if !ok {
            return Err(mismatch("bmm", sa, sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; g * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..g {
            let ab = &av[i * m * k..(i + 1) * m * k];
            let bb = &bv[i * k * n..(i + 1) * k * n];
            let ob = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                mm_nt(ab, bb, ob, m, k, n);
            } else {
                mm_nn(ab, bb, ob, m, k, n);
            }
        }
        let value = Tensor::new(&[g, m, n], out)?;
        let req = self.req(&[a, b]);
        Ok(self.push(value, Op::BatchMatMul { a, b, transpose_b }, req))
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Option<Vec<usize>>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(None);
        }
        broadcast_map(sa, sb)
            .map(Some)
            .ok_or_else(|| mismatch(op, sa, sb))
    }

    /// `a + b`, with `b` broadcast into the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = self.broadcast("add", a, b)?;
        let value = self.binary_value(a, b, map.as_deref(), |x, y| x + y);
        let req = self.req(&[a, b]);
        Ok(self.push(value, Op::Add { a, b, map }, req))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = self.broadcast("sub", a, b)?;
        let value = self.binary_value(a, b, map.as_deref(), |x, y| x - y);
        let req = self.req(&[a, b]);
        Ok(self.push(value, Op::Sub { a, b, map }, req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = self.broadcast("mul", a, b)?;
        let value = self.binary_value(a, b, map.as_deref(), |x, y| x * y);
        let req = self.req(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b, map }, req))
    }

    fn binary_value(
        &self,
        a: Var,
        b: Var,
        map: Option<&[usize]>,
        f: impl Fn(f64, f64) -> f64,
    ) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b).data());
        let data = match map {
            None => av.data().iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Some(map) => av
                .data()
                .iter()
                .zip(map)
                .map(|(&x, &j)| f(x, bv[j]))
                .collect(),
        };
        Tensor::new(av.shape(), data).expect("same shape")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| c * x);
        let req = self.req(&[a]);
        self.push(value, Op::Scale(a, c), req)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let req = self.req(&[a]);
        self.push(value, Op::AddScalar(a), req)
    }

    /// `1 - a`, exact at `a ∈ {0, 1}`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let req = self.req(&[a]);
        self.push(value, Op::Square(a), req)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let req = self.req(&[a]);
        self.push(value, Op::Abs(a), req)
    }

    /// Tagged pointwise dispatch. Binary tags require `b`.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        match (op, b) {
            (ElementwiseOp::Add, Some(b)) => self.add(a, b),
            (ElementwiseOp::Sub, Some(b)) => self.sub(a, b),
            (ElementwiseOp::Mul, Some(b)) => self.mul(a, b),
            (ElementwiseOp::Scale(c), None) => Ok(self.scale(a, c)),
            (ElementwiseOp::Square, None) => Ok(self.square(a)),
            (ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul, None) => {
                Err(AutodiffError::MissingOperand(op.tag()))
            }
            (_, Some(_)) => Err(AutodiffError::InvalidArgument {
                op: op.tag(),
                msg: "unary op given a second operand".into(),
            }),
        }
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu_scalar);
        let req = self.req(&[a]);
        self.push(value, Op::Gelu(a), req)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        check_finite("softmax", x.data())?;
        let n = last_dim(x.shape());
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(x.shape(), out)?;
        let req = self.req(&[a]);
        Ok(self.push(value, Op::Softmax(a), req))
    }

    /// Softmax of a single row `[n]`.
    pub fn softmax_row(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 1 {
            return Err(AutodiffError::InvalidArgument {
                op: "softmax_row",
                msg: format!("expected a vector, got shape {:?}", self.shape(a)),
            });
        }
        self.softmax(a)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        check_finite("log_softmax", x.data())?;
        let n = last_dim(x.shape());
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor::new(x.shape(), out)?;
        let req = self.req(&[a]);
        Ok(self.push(value, Op::LogSoftmax(a), req))
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = last_dim(&sx);
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(mismatch("layernorm", &sx, self.shape(p)));
            }
        }
        if !(eps > 0.0) {
            return Err(AutodiffError::InvalidArgument {
                op: "layernorm",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let (xv, gv, bv) = (
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j] + bv[j];
            }
        }
        let value = Tensor::new(&sx, out)?;
        let req = self.req(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            req,
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits [B×C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("logits {:?} vs {} labels", s, labels.len()),
            });
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(AutodiffError::LabelOutOfRange { label, classes: c });
        }
        let xv = self.value(logits).data();
        check_finite("cross_entropy", xv)?;
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &xv[r * c..(r + 1) * c];
            let lse = log_sum_exp(row);
            loss += lse - row[label];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / b as f64);
        let req = self.req(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            req,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let req = self.req(&[a]);
        self.push(value, Op::Sum(a), req)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let req = self.req(&[a]);
        self.push(value, Op::Mean(a), req)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let req = self.req(&[a]);
        Ok(self.push(value, Op::Reshape(a), req))
    }

    /// Axis permutation; `axes[i]` names the input axis placed at output axis `i`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        let valid = axes.len() == s.len()
            && axes
                .iter()
                .all(|&ax| ax < s.len() && !std::mem::replace(&mut seen[ax], true));
        if !valid {
            return Err(AutodiffError::InvalidArgument {
                op: "permute",
                msg: format!("axes {axes:?} for shape {s:?}"),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| s[ax]).collect();
        let in_strides = strides(&s);
        let perm_strides: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
        let map = strided_map(&out_shape, &perm_strides);
        Ok(self.gather(a, &out_shape, map))
    }

    /// Removes `axis` by taking the slice at `index`.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || index >= s[axis] {
            return Err(AutodiffError::InvalidArgument {
                op: "select",
                msg: format!("index {index} on axis {axis} of shape {s:?}"),
            });
        }
        let st = strides(&s);
        let offset = index * st[axis];
        let mut out_shape = s.clone();
        out_shape.remove(axis);
        let mut out_strides = st.clone();
        out_strides.remove(axis);
        let map = strided_map(&out_shape, &out_strides)
            .into_iter()
            .map(|i| i + offset)
            .collect();
        Ok(self.gather(a, &out_shape, map))
    }

    fn gather(&mut self, a: Var, shape: &[usize], map: Vec<usize>) -> Var {
        let src = self.value(a).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, data).expect("gather shape");
        let req = self.req(&[a]);
        self.push(value, Op::Gather { a, map }, req)
    }

    /// `x [B,P,d]` with `row [d]` prepended along the token axis → `[B,P+1,d]`.
    pub fn prepend_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x).to_vec(), self.shape(row).to_vec());
        if sx.len() != 3 || sr != [sx[2]] {
            return Err(mismatch("prepend_row", &sx, &sr));
        }
        let (b, p, d) = (sx[0], sx[1], sx[2]);
        let (xv, rv) = (self.value(x).data(), self.value(row).data());
        let mut out = Vec::with_capacity(b * (p + 1) * d);
        for bi in 0..b {
            out.extend_from_slice(rv);
            out.extend_from_slice(&xv[bi * p * d..(bi + 1) * p * d]);
        }
        let value = Tensor::new(&[b, p + 1, d], out)?;
        let req = self.req(&[x, row]);
        Ok(self.push(value, Op::PrependRow { x, row }, req))
    }

    /// Backpropagates from a scalar `root`. Every node is visited once,
    /// in reverse recording order.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.values[root.0].len() != 1 {
            return Err(AutodiffError::NotScalar(
                self.values[root.0].shape().to_vec(),
            ));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.requires[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let Graph {
            values,
            grads,
            ops,
            requires,
        } = self;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if requires[v.0] {
                let len = values[v.0].len();
                f(grads[v.0].get_or_insert_with(|| vec![0.0; len]));
            }
        };
        let val = |v: Var| values[v.0].data();
        match &ops[i] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (values[a.0].shape(), values[b.0].shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                acc(*a, &mut |ga| mm_nt(g, val(*b), ga, m, n, k));
                acc(*b, &mut |gb| mm_tn(val(*a), g, gb, k, m, n));
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (sa, sb) = (values[a.0].shape(), values[b.0].shape());
                let (groups, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *transpose_b { sb[1] } else { sb[2] };
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for t in 0..groups {
                        let gg = &g[t * m * n..(t + 1) * m * n];
                        let bb = &bv[t * k * n..(t + 1) * k * n];
                        let out = &mut ga[t * m * k..(t + 1) * m * k];
                        if *transpose_b {
                            mm_nn(gg, bb, out, m, n, k);
                        } else {
                            mm_nt(gg, bb, out, m, n, k);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for t in 0..groups {
                        let gg = &g[t * m * n..(t + 1) * m * n];
                        let ab = &av[t * m * k..(t + 1) * m * k];
                        let out = &mut gb[t * k * n..(t + 1) * k * n];
                        if *transpose_b {
                            mm_tn(gg, ab, out, n, m, k);
                        } else {
                            mm_tn(ab, gg, out, k, m, n);
                        }
                    }
                });
            }
            Op::Add { a, b, map } | Op::Sub { a, b, map } => {
                let sign = if matches!(ops[i], Op::Sub { .. }) {
                    -1.0
                } else {
                    1.0
                };
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| match map {
                    None => gb.iter_mut().zip(g).for_each(|(d, &s)| *d += sign * s),
                    Some(map) => map.iter().zip(g).for_each(|(&j, &s)| gb[j] += sign * s),
                });
            }
            Op::Mul { a, b, map } => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| match map {
                    None => (0..g.len()).for_each(|j| ga[j] += g[j] * bv[j]),
                    Some(map) => (0..g.len()).for_each(|j| ga[j] += g[j] * bv[map[j]]),
                });
                acc(*b, &mut |gb| match map {
                    None => (0..g.len()).for_each(|j| gb[j] += g[j] * av[j]),
                    Some(map) => (0..g.len()).for_each(|j| gb[map[j]] += g[j] * av[j]),
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d += c * s)
            }),
            Op::AddScalar(a) | Op::Reshape(a) | Op::Sum(a) => {
                let broadcast = g.len() == 1;
                acc(*a, &mut |ga| {
                    if broadcast {
                        ga.iter_mut().for_each(|d| *d += g[0]);
                    } else {
                        add_into(ga, g);
                    }
                });
            }
            Op::Mean(a) => {
                let scale = g[0] / values[a.0].len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += scale));
            }
            Op::Square(a) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    (0..g.len()).for_each(|j| ga[j] += 2.0 * av[j] * g[j])
                });
            }
            Op::Abs(a) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for j in 0..g.len() {
                        let s = if av[j] > 0.0 {
                            1.0
                        } else if av[j] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        ga[j] += s * g[j];
                    }
                });
            }
            Op::Gelu(a) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    (0..g.len()).for_each(|j| ga[j] += gelu_grad(av[j]) * g[j])
                });
            }
            Op::Softmax(a) => {
                let y = values[i].data();
                let n = last_dim(values[i].shape());
                acc(*a, &mut |ga| {
                    for r in 0..y.len() / n {
                        let (ys, gs) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            ga[r * n + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = values[i].data();
                let n = last_dim(values[i].shape());
                acc(*a, &mut |ga| {
                    for r in 0..y.len() / n {
                        let gs = &g[r * n..(r + 1) * n];
                        let total: f64 = gs.iter().sum();
                        for j in 0..n {
                            ga[r * n + j] += gs[j] - y[r * n + j].exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = last_dim(values[x.0].shape());
                let rows = xhat.len() / n;
                let gv = val(*gamma);
                acc(*gamma, &mut |gg| {
                    for r in 0..rows {
                        for j in 0..n {
                            gg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for r in 0..rows {
                        add_into(gb, &g[r * n..(r + 1) * n]);
                    }
                });
                acc(*x, &mut |gx| {
                    let nf = n as f64;
                    for r in 0..rows {
                        let h = &xhat[r * n..(r + 1) * n];
                        let dh: Vec<f64> = (0..n).map(|j| g[r * n + j] * gv[j]).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(h).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[r * n + j] +=
                                inv_std[r] / nf * (nf * dh[j] - sum_dh - h[j] * sum_dh_h);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = values[logits.0].shape()[1];
                let scale = g[0] / labels.len() as f64;
                acc(*logits, &mut |gl| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Gather { a, map } => {
                acc(*a, &mut |ga| {
                    map.iter().zip(g).for_each(|(&j, &s)| ga[j] += s)
                });
            }
            Op::PrependRow { x, row } => {
                let s = values[i].shape();
                let (b, t, d) = (s[0], s[1], s[2]);
                acc(*row, &mut |gr| {
                    for bi in 0..b {
                        add_into(gr, &g[bi * t * d..bi * t * d + d]);
                    }
                });
                acc(*x, &mut |gx| {
                    for bi in 0..b {
                        let src = &g[bi * t * d + d..(bi + 1) * t * d];
                        add_into(&mut gx[bi * (t - 1) * d..(bi + 1) * (t - 1) * d], src);
                    }
                });
            }
        }
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AutodiffError::NonFinite { op })
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

/// Flat source index for every position of an output of `shape`, walking
/// the source with `src_strides`.
fn strided_map(shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let len: usize = shape.iter().product();
    let mut map = Vec::with_capacity(len);
    let mut idx = vec![0usize; shape.len()];
    let mut offset = 0usize;
    for _ in 0..len {
        map.push(offset);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            offset -= src_strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Index map broadcasting `b` (trailing-aligned, dims equal or 1) into `a`.
fn broadcast_map(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if b.len() > a.len() {
        return None;
    }
    let lead = a.len() - b.len();
    let bs = strides(b);
    let mut src_strides = vec![0; a.len()];
    for (j, &bd) in b.iter().enumerate() {
        let ad = a[lead + j];
        if bd == ad {
            src_strides[lead + j] = bs[j];
        } else if bd != 1 {
            return None;
        }
    }
    Some(strided_map(a, &src_strides))
}
