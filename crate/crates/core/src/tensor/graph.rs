use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gemm, Result, Scalar, Tensor, TensorError};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    AddTrailing { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    AddScalar { a: Var },
    Transpose { a: Var, d1: usize, d2: usize },
    Reshape { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Gather { table: Var, ids: Vec<usize> },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Relu { a: Var },
    Gelu { a: Var },
    Dropout { a: Var, mask: Vec<T> },
    Sum { a: Var },
    SumLast { a: Var },
    Mean { a: Var },
    MaskedFill { a: Var, mask: Vec<bool> },
    Sigmoid { a: Var },
    Exp { a: Var },
    Log { a: Var },
    SelectLast { a: Var, idx: Vec<usize> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<usize>,
    grad: Option<Tensor<T>>,
}

/// Append-only computation graph.
///
/// In training mode dropout draws from a seeded ChaCha stream, so a graph
/// built twice from the same seed and inputs produces identical values.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    train: bool,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Evaluation-mode graph (dropout is the identity).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training-mode graph with a seeded dropout stream.
    pub fn training(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// `(parameter id, gradient)` for every parameter leaf that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.grad.as_ref()?)))
    }

    fn leaf_node(&mut self, t: Tensor<T>, requires_grad: bool, param: Option<usize>) -> Result<Var> {
        if !t.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
            param,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf_node(t, false, None)
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf_node(t, true, None)
    }

    /// Leaf bound to an external parameter id (see [`Graph::param_grads`]).
    pub fn param(&mut self, t: Tensor<T>, id: usize) -> Result<Var> {
        self.leaf_node(t, true, Some(id))
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Saved activations are only needed when a gradient can flow.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn map(&mut self, name: &'static str, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let src = self.value(a);
        let out = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&x| f(x)).collect(),
        };
        self.push(name, out, op, &[a])
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
        };
        self.push(name, out, op, &[a, b])
    }

    /// Matrix product over the last two dimensions. Leading dimensions must
    /// match exactly.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(mismatch());
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        let (va, vb) = (&self.value(a).data, &self.value(b).data);
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &va[i * m * k..],
                false,
                &vb[i * k * n..],
                false,
                &mut out[i * m * n..],
                false,
            );
        }
        let value = Tensor { shape, data: out };
        self.push("matmul", value, Op::MatMul { a, b, batch, m, k, n }, &[a, b])
    }

    /// Elementwise sum. `b` may also be a trailing-dimension suffix of `a`
    /// (bias add); no other broadcasting is performed.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return self.zip("add", a, b, Op::Add { a, b }, |x, y| x + y);
        }
        if sb.len() < sa.len() && sa.ends_with(sb) && !sb.is_empty() {
            let vb = self.value(b).data.clone();
            let src = self.value(a);
            let out = Tensor {
                shape: src.shape.clone(),
                data: src
                    .data
                    .iter()
                    .zip(vb.iter().cycle())
                    .map(|(&x, &y)| x + y)
                    .collect(),
            };
            return self.push("add", out, Op::AddTrailing { a, b }, &[a, b]);
        }
        Err(TensorError::ShapeMismatch {
            op: "add",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = T::of(factor);
        self.map("scale", a, Op::Scale { a, factor: f }, |x| x * f)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.map("add_scalar", a, Op::AddScalar { a }, |x| x + c)
    }

    /// Swap two axes.
    pub fn transpose(&mut self, a: Var, d1: usize, d2: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if d1 >= shape.len() || d2 >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                detail: format!("axes ({d1}, {d2}) out of range for shape {shape:?}"),
            });
        }
        let (d1, d2) = (d1.min(d2), d1.max(d2));
        let (data, out_shape) = swap_axes(&self.value(a).data, &shape, d1, d2);
        let value = Tensor { shape: out_shape, data };
        self.push("transpose", value, Op::Transpose { a, d1, d2 }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape { a }, &[a])
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                detail: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let pre: usize = base[..axis].iter().product();
        let post: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(pre * total * post);
        for p_i in 0..pre {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape[axis] * post;
                data.extend_from_slice(&v.data[p_i * chunk..(p_i + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor { shape, data };
        self.push("concat", value, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    /// Rows of a `[V, d]` table selected by `ids`, giving `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "embedding_gather",
                detail: format!("table must be rank 2, got {shape:?}"),
            });
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::InvalidArgument {
                op: "embedding_gather",
                detail: format!("id {bad} out of range for {v} rows"),
            });
        }
        let src = &self.value(table).data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor {
            shape: vec![ids.len(), d],
            data,
        };
        self.push("embedding_gather", value, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let d = src.last_dim();
        let mut data = src.data.clone();
        for row in data.chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum = sum + *x;
            }
            for x in row.iter_mut() {
                *x = *x / sum;
            }
        }
        let value = Tensor {
            shape: src.shape.clone(),
            data,
        };
        self.push("softmax", value, Op::Softmax { a }, &[a])
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let d = src.last_dim();
        let mut data = src.data.clone();
        for row in data.chunks_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            for x in row.iter_mut() {
                *x = *x - lse;
            }
        }
        let value = Tensor {
            shape: src.shape.clone(),
            data,
        };
        self.push("log_softmax", value, Op::LogSoftmax { a }, &[a])
    }

    /// Layer normalization over the last dimension followed by the affine
    /// `gamma * xhat + beta`. A constant row normalizes to exactly zero.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: sx.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::of(LAYER_NORM_EPS);
        let dn = T::of(d as f64);
        let src = &self.value(x).data;
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let rows = src.len() / d.max(1);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let (lo, hi) = row
                .iter()
                .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = if lo == hi { T::zero() } else { (row[j] - mean) * rs };
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor { shape: sx, data: out };
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            &[x, gamma, beta],
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, Op::Relu { a }, |x| x.max(T::zero()))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map("gelu", a, Op::Gelu { a }, |x| {
            let (c, k) = gelu_consts::<T>();
            T::of(0.5) * x * (T::one() + (c * (x + k * x * x * x)).tanh())
        })
    }

    /// Inverted dropout; identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                detail: format!("probability {p} outside [0, 1)"),
            });
        }
        if !self.train || p == 0.0 {
            return Ok(a);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.value(a).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let src = self.value(a);
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().zip(&mask).map(|(&x, &m)| x * m).collect(),
        };
        self.push("dropout", value, Op::Dropout { a, mask }, &[a])
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    /// Sum over the last dimension.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let d = src.last_dim();
        let mut shape = src.shape[..src.shape.len().saturating_sub(1)].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let data = src.data.chunks(d).map(|r| r.iter().copied().sum()).collect();
        self.push("sum_last", Tensor { shape, data }, Op::SumLast { a }, &[a])
    }

    /// Mean of all entries, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        if src.numel() == 0 {
            return Err(TensorError::InvalidArgument {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let s = src.data.iter().copied().sum::<T>() / T::of(src.numel() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean { a }, &[a])
    }

    /// Replace entries where `mask` is true with `value`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Result<Var> {
        let src = self.value(a);
        if mask.len() != src.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_fill",
                lhs: src.shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let fill = T::of(value);
        let out = Tensor {
            shape: src.shape.clone(),
            data: src
                .data
                .iter()
                .zip(mask)
                .map(|(&x, &m)| if m { fill } else { x })
                .collect(),
        };
        self.push("masked_fill", out, Op::MaskedFill { a, mask: mask.to_vec() }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, Op::Sigmoid { a }, sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, Op::Exp { a }, |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map("log", a, Op::Log { a }, |x| x.ln())
    }

    /// Pick one entry per last-dimension row: `out[r] = a[r, idx[r]]`.
    pub fn select_last(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let d = src.last_dim();
        let rows = src.numel() / d.max(1);
        if idx.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "select_last",
                lhs: src.shape.clone(),
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= d) {
            return Err(TensorError::InvalidArgument {
                op: "select_last",
                detail: format!("index {bad} out of range for last dimension {d}"),
            });
        }
        let mut shape = src.shape[..src.shape.len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let data = idx.iter().enumerate().map(|(r, &i)| src.data[r * d + i]).collect();
        self.push("select_last", Tensor { shape, data }, Op::SelectLast { a, idx: idx.to_vec() }, &[a])
    }

    /// Reverse pass from a scalar `loss`. Gradients add onto whatever the
    /// leaves already hold until [`Graph::zero_grad`] is called.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(ls.to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }

        for (i, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.requires_grad, g) {
                match &mut node.grad {
                    Some(existing) => {
                        for (e, x) in existing.data.iter_mut().zip(g) {
                            *e = *e + x;
                        }
                    }
                    None => {
                        node.grad = Some(Tensor {
                            shape: node.value.shape.clone(),
                            data: g,
                        })
                    }
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[i].value.data;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, batch, m, k, n } => {
                let (va, vb) = (&self.value(a).data, &self.value(b).data);
                if let Some(ga) = self.slot(grads, a) {
                    for bi in 0..batch {
                        gemm(m, n, k, &g[bi * m * n..], false, &vb[bi * k * n..], true, &mut ga[bi * m * k..], true);
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for bi in 0..batch {
                        gemm(k, m, n, &va[bi * m * k..], true, &g[bi * m * n..], false, &mut gb[bi * k * n..], true);
                    }
                }
            }
            &Op::Add { a, b } => {
                self.acc(grads, a, g.iter().copied());
                self.acc(grads, b, g.iter().copied());
            }
            &Op::AddTrailing { a, b } => {
                self.acc(grads, a, g.iter().copied());
                if let Some(gb) = self.slot(grads, b) {
                    let d = gb.len();
                    for chunk in g.chunks(d) {
                        for (x, &y) in gb.iter_mut().zip(chunk) {
                            *x = *x + y;
                        }
                    }
                }
            }
            &Op::Sub { a, b } => {
                self.acc(grads, a, g.iter().copied());
                self.acc(grads, b, g.iter().map(|&x| -x));
            }
            &Op::Mul { a, b } => {
                let (va, vb) = (&self.value(a).data, &self.value(b).data);
                self.acc(grads, a, g.iter().zip(vb).map(|(&x, &y)| x * y));
                self.acc(grads, b, g.iter().zip(va).map(|(&x, &y)| x * y));
            }
            &Op::Scale { a, factor } => self.acc(grads, a, g.iter().map(|&x| x * factor)),
            &Op::AddScalar { a } | &Op::Reshape { a } => self.acc(grads, a, g.iter().copied()),
            &Op::Transpose { a, d1, d2 } => {
                let out_shape = &self.nodes[i].value.shape;
                let (back, _) = swap_axes(g, out_shape, d1, d2);
                self.acc(grads, a, back.into_iter());
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let shape = &self.nodes[i].value.shape;
                let pre: usize = shape[..axis].iter().product();
                let post: usize = shape[axis + 1..].iter().product();
                let total = shape[axis];
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[axis];
                    if let Some(gp) = self.slot(grads, p) {
                        for p_i in 0..pre {
                            let src = &g[(p_i * total + offset) * post..(p_i * total + offset + len) * post];
                            let dst = &mut gp[p_i * len * post..(p_i + 1) * len * post];
                            for (x, &y) in dst.iter_mut().zip(src) {
                                *x = *x + y;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(gt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] = gt[id * d + j] + g[r * d + j];
                        }
                    }
                }
            }
            &Op::Softmax { a } => {
                let d = self.nodes[i].value.last_dim();
                let mut back = vec![T::zero(); g.len()];
                for ((gr, yr), br) in g.chunks(d).zip(out.chunks(d)).zip(back.chunks_mut(d)) {
                    let dot: T = gr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                    for j in 0..d {
                        br[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, a, back.into_iter());
            }
            &Op::LogSoftmax { a } => {
                let d = self.nodes[i].value.last_dim();
                let mut back = vec![T::zero(); g.len()];
                for ((gr, yr), br) in g.chunks(d).zip(out.chunks(d)).zip(back.chunks_mut(d)) {
                    let total: T = gr.iter().copied().sum();
                    for j in 0..d {
                        br[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                self.acc(grads, a, back.into_iter());
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.shape(*gamma)[0];
                let gam = &self.value(*gamma).data;
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            gb[j] = gb[j] + gr[j];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let dn = T::of(d as f64);
                    for (r, ((gr, hr), xr)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * hr[j];
                        }
                        mean_dh = mean_dh / dn;
                        mean_dh_h = mean_dh_h / dn;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            xr[j] = xr[j] + rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            &Op::Relu { a } => {
                let va = &self.value(a).data;
                self.acc(grads, a, g.iter().zip(va).map(|(&x, &v)| if v > T::zero() { x } else { T::zero() }));
            }
            &Op::Gelu { a } => {
                let va = &self.value(a).data;
                let (c, k) = gelu_consts::<T>();
                let half = T::of(0.5);
                let three_k = T::of(3.0) * k;
                self.acc(
                    grads,
                    a,
                    g.iter().zip(va).map(|(&gi, &x)| {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three_k * x * x);
                        gi * (half * (T::one() + t) + half * x * dt)
                    }),
                );
            }
            Op::Dropout { a, mask } => self.acc(grads, *a, g.iter().zip(mask).map(|(&x, &m)| x * m)),
            &Op::Sum { a } => {
                let n = self.value(a).numel();
                self.acc(grads, a, std::iter::repeat(g[0]).take(n));
            }
            &Op::SumLast { a } => {
                let d = self.value(a).last_dim();
                self.acc(grads, a, g.iter().flat_map(|&x| std::iter::repeat(x).take(d)));
            }
            &Op::Mean { a } => {
                let n = self.value(a).numel();
                let v = g[0] / T::of(n as f64);
                self.acc(grads, a, std::iter::repeat(v).take(n));
            }
            Op::MaskedFill { a, mask } => {
                self.acc(grads, *a, g.iter().zip(mask).map(|(&x, &m)| if m { T::zero() } else { x }))
            }
            &Op::Sigmoid { a } => {
                self.acc(grads, a, g.iter().zip(out).map(|(&x, &y)| x * y * (T::one() - y)))
            }
            &Op::Exp { a } => self.acc(grads, a, g.iter().zip(out).map(|(&x, &y)| x * y)),
            &Op::Log { a } => {
                let va = &self.value(a).data;
                self.acc(grads, a, g.iter().zip(va).map(|(&x, &v)| x / v));
            }
            Op::SelectLast { a, idx } => {
                let d = self.value(*a).last_dim();
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, &j) in idx.iter().enumerate() {
                        ga[r * d + j] = ga[r * d + j] + g[r];
                    }
                }
            }
        }
    }

    /// Mutable gradient buffer for `v`, zero-initialized on first use, or
    /// `None` when `v` does not need a gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, g: impl Iterator<Item = T>) {
        if let Some(buf) = self.slot(grads, v) {
            for (x, y) in buf.iter_mut().zip(g) {
                *x = *x + y;
            }
        }
    }
}

fn gelu_consts<T: Scalar>() -> (T, T) {
    (T::of((2.0 / std::f64::consts::PI).sqrt()), T::of(0.044715))
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Swap axes `d1 < d2` of a row-major buffer.
fn swap_axes<T: Scalar>(data: &[T], shape: &[usize], d1: usize, d2: usize) -> (Vec<T>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(d1, d2);
    if d1 == d2 {
        return (data.to_vec(), out_shape);
    }
    let pre: usize = shape[..d1].iter().product();
    let a = shape[d1];
    let mid: usize = shape[d1 + 1..d2].iter().product();
    let b = shape[d2];
    let post: usize = shape[d2 + 1..].iter().product();
    let mut out = vec![T::zero(); data.len()];
    for p in 0..pre {
        for i in 0..a {
            for m in 0..mid {
                for j in 0..b {
                    let src = ((((p * a + i) * mid + m) * b) + j) * post;
                    let dst = ((((p * b + j) * mid + m) * a) + i) * post;
                    out[dst..dst + post].copy_from_slice(&data[src..src + post]);
                }
            }
        }
    }
    (out, out_shape)
}
