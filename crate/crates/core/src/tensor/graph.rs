use super::{matmul_dims, matmul_nt, matmul_raw, matmul_tn, Result, Tensor, TensorError};

/// Epsilon guarding [`Graph::l2_normalize`] against zero rows.
pub const L2_EPS: f64 = 1e-12;
/// Variance epsilon of [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside [`Graph::bce`].
pub const BCE_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is spread over the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    /// Rank-1 right operand matching the trailing axis of the left.
    Row,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var, bc: Bcast },
    Sub { a: Var, b: Var, bc: Bcast },
    Mul { a: Var, b: Var, bc: Bcast },
    Div { a: Var, b: Var, bc: Bcast },
    Scale { x: Var, s: f64 },
    AddScalar { x: Var },
    Relu { x: Var },
    Gelu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Transpose { x: Var, rows: usize, cols: usize },
    Reshape { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Concat { parts: Vec<Var> },
    L2Normalize { x: Var, norms: Vec<f64> },
    Gather { x: Var, index: Vec<Option<usize>> },
    Bce { x: Var, target: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Div { .. } => "div",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Relu { .. } => "relu",
            Op::Gelu { .. } => "gelu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "reduce_sum",
            Op::Mean { .. } => "reduce_mean",
            Op::Concat { .. } => "concat",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Gather { .. } => "gather",
            Op::Bce { .. } => "bce",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. }
            | Op::Add { a, b, .. }
            | Op::Sub { a, b, .. }
            | Op::Mul { a, b, .. }
            | Op::Div { a, b, .. } => vec![*a, *b],
            Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::Relu { x }
            | Op::Gelu { x }
            | Op::Sigmoid { x }
            | Op::Softmax { x }
            | Op::LayerNorm { x, .. }
            | Op::Transpose { x, .. }
            | Op::Reshape { x }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::L2Normalize { x, .. }
            | Op::Gather { x, .. }
            | Op::Bce { x, .. } => vec![*x],
            Op::Concat { parts } => parts.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape. Inputs of a node always precede it, so the backward
/// sweep is a plain reverse iteration.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// Registers a tracked leaf (a parameter or differentiable input).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t, Op::Leaf, true)
    }

    /// Registers an untracked leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t, Op::Leaf, false)
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

    /// Gradient of the last [`Graph::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if let Some(index) = value.data().iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                op: op.name(),
                index,
            });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Bcast::Same)
        } else if self.value(b).numel() == 1 && sb.len() <= 1 {
            Ok(Bcast::Scalar)
        } else if sb.len() == 1 && !sa.is_empty() && sa[sa.len() - 1] == sb[0] {
            Ok(Bcast::Row)
        } else {
            Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Bcast)> {
        let bc = self.bcast(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let bd = vb.data();
        let d = bd.len();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match bc {
                    Bcast::Same => bd[i],
                    Bcast::Scalar => bd[0],
                    Bcast::Row => bd[i % d],
                };
                f(x, y)
            })
            .collect();
        Ok((Tensor::new(va.shape().to_vec(), data)?, bc))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(vec![m, n], data)?, Op::MatMul { a, b, m, k, n })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("add", a, b, |x, y| x + y)?;
        self.push(t, Op::Add { a, b, bc })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push(t, Op::Sub { a, b, bc })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(t, Op::Mul { a, b, bc })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bc) = self.binary("div", a, b, |x, y| x / y)?;
        self.push(t, Op::Div { a, b, bc })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * s);
        self.push(t, Op::Scale { x, s })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::AddScalar { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu { x })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| 0.5 * v * (1.0 + gelu_inner(v).tanh()));
        self.push(t, Op::Gelu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid { x })
    }

    /// Softmax over the trailing axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let d = v.last_dim();
        let mut out = v.data().to_vec();
        if d > 0 {
            for row in out.chunks_mut(d) {
                softmax_in_place(row);
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push(t, Op::Softmax { x })
    }

    /// Normalizes the trailing axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let d = v.last_dim();
        let mut out = v.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / d.max(1));
        for row in out.chunks_mut(d.max(1)) {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for r in row.iter_mut() {
                *r = (*r - mean) * inv;
            }
            inv_std.push(inv);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push(t, Op::LayerNorm { x, inv_std })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        let (rows, cols) = (t.shape()[1], t.shape()[0]);
        self.push(t, Op::Transpose { x, rows, cols })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push(t, Op::Reshape { x })
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(TensorError::Invalid {
                op: "reduce_mean",
                msg: "mean of an empty tensor".into(),
            });
        }
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean { x })
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let tail = self.shape(first).get(1..).unwrap_or(&[]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let t = Tensor::new(shape, data)?;
        self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
            },
        )
    }

    /// Divides each trailing-axis row by `max(||row||_2, 1e-12)`.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let d = v.last_dim().max(1);
        let mut out = v.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let n = row.iter().map(|r| r * r).sum::<f64>().sqrt().max(L2_EPS);
            for r in row.iter_mut() {
                *r /= n;
            }
            norms.push(n);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push(t, Op::L2Normalize { x, norms })
    }

    /// `out.flat[i] = x.flat[index[i]]`, with `None` producing zero.
    pub fn gather(&mut self, x: Var, index: Vec<Option<usize>>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if shape.iter().product::<usize>() != index.len() {
            return Err(TensorError::BufferLength {
                shape: shape.to_vec(),
                len: index.len(),
            });
        }
        let mut data = Vec::with_capacity(index.len());
        for &i in &index {
            data.push(match i {
                Some(i) if i < src.len() => src[i],
                Some(i) => {
                    return Err(TensorError::Invalid {
                        op: "gather",
                        msg: format!("index {i} out of range for {} elements", src.len()),
                    })
                }
                None => 0.0,
            });
        }
        let t = Tensor::new(shape.to_vec(), data)?;
        self.push(t, Op::Gather { x, index })
    }

    /// Rows of a rank-2 tensor, in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op: "select_rows",
                msg: format!("expected rank 2, got {s:?}"),
            });
        }
        let c = s[1];
        let index = rows
            .iter()
            .flat_map(|&r| (0..c).map(move |j| Some(r * c + j)))
            .collect();
        self.gather(x, index, &[rows.len(), c])
    }

    /// Elementwise binary cross-entropy of probabilities against fixed targets.
    pub fn bce(&mut self, x: Var, target: &[f64]) -> Result<Var> {
        let v = self.value(x);
        if v.numel() != target.len() {
            return Err(TensorError::Shape {
                op: "bce",
                lhs: v.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data()
                .iter()
                .zip(target)
                .map(|(&p, &y)| bce_value(p, y))
                .collect(),
        )?;
        self.push(
            t,
            Op::Bce {
                x,
                target: target.to_vec(),
            },
        )
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively over
    /// every path that reaches a node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[id] = None;
            } else if grads[id].is_none() && matches!(node.op, Op::Leaf) {
                grads[id] = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.nodes[a.0].requires_grad {
                    acc(a, matmul_nt(g, self.value(b).data(), m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    acc(b, matmul_tn(self.value(a).data(), g, m, k, n));
                }
            }
            &Op::Add { a, b, bc } => {
                acc(a, g.to_vec());
                acc(b, reduce_bcast(g, bc, self.value(b).numel()));
            }
            &Op::Sub { a, b, bc } => {
                acc(a, g.to_vec());
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                acc(b, reduce_bcast(&neg, bc, self.value(b).numel()));
            }
            &Op::Mul { a, b, bc } => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * pick(vb, i, bc))
                    .collect();
                acc(a, ga);
                let gb: Vec<f64> = g.iter().zip(va).map(|(gi, x)| gi * x).collect();
                acc(b, reduce_bcast(&gb, bc, vb.len()));
            }
            &Op::Div { a, b, bc } => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi / pick(vb, i, bc))
                    .collect();
                acc(a, ga);
                let gb: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| {
                        let y = pick(vb, i, bc);
                        -gi * va[i] / (y * y)
                    })
                    .collect();
                acc(b, reduce_bcast(&gb, bc, vb.len()));
            }
            &Op::Scale { x, s } => acc(x, g.iter().map(|v| v * s).collect()),
            &Op::AddScalar { x } => acc(x, g.to_vec()),
            &Op::Relu { x } => {
                let vx = self.value(x).data();
                acc(
                    x,
                    g.iter()
                        .zip(vx)
                        .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                        .collect(),
                );
            }
            &Op::Gelu { x } => {
                let vx = self.value(x).data();
                acc(
                    x,
                    g.iter().zip(vx).map(|(gi, &xi)| gi * gelu_grad(xi)).collect(),
                );
            }
            &Op::Sigmoid { x } => acc(
                x,
                g.iter().zip(out).map(|(gi, y)| gi * y * (1.0 - y)).collect(),
            ),
            &Op::Softmax { x } => {
                let d = node.value.last_dim().max(1);
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), dst) in g.chunks(d).zip(out.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gi), yi) in dst.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                acc(x, gx);
            }
            Op::LayerNorm { x, inv_std } => {
                let d = node.value.last_dim().max(1);
                let n = d as f64;
                let mut gx = vec![0.0; g.len()];
                for (r, ((gr, yr), dst)) in g
                    .chunks(d)
                    .zip(out.chunks(d))
                    .zip(gx.chunks_mut(d))
                    .enumerate()
                {
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, gi), yi) in dst.iter_mut().zip(gr).zip(yr) {
                        *o = inv_std[r] * (gi - mean_g - yi * mean_gy);
                    }
                }
                acc(*x, gx);
            }
            &Op::Transpose { x, rows, cols } => {
                // g is [cols, rows]; input was [rows, cols]
                let mut gx = vec![0.0; g.len()];
                for i in 0..rows {
                    for j in 0..cols {
                        gx[i * cols + j] = g[j * rows + i];
                    }
                }
                acc(x, gx);
            }
            &Op::Reshape { x } => acc(x, g.to_vec()),
            &Op::Sum { x } => acc(x, vec![g[0]; self.value(x).numel()]),
            &Op::Mean { x } => {
                let n = self.value(x).numel();
                acc(x, vec![g[0] / n as f64; n]);
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::L2Normalize { x, norms } => {
                let d = node.value.last_dim().max(1);
                let vx = self.value(*x).data();
                let mut gx = vec![0.0; g.len()];
                for (r, ((gr, yr), dst)) in g
                    .chunks(d)
                    .zip(out.chunks(d))
                    .zip(gx.chunks_mut(d))
                    .enumerate()
                {
                    let n = norms[r];
                    let raw = vx[r * d..(r + 1) * d]
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt();
                    if raw > L2_EPS {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gi), yi) in dst.iter_mut().zip(gr).zip(yr) {
                            *o = (gi - yi * dot) / n;
                        }
                    } else {
                        for (o, gi) in dst.iter_mut().zip(gr) {
                            *o = gi / n;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Gather { x, index } => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (gi, i) in g.iter().zip(index) {
                    if let Some(i) = i {
                        gx[*i] += gi;
                    }
                }
                acc(*x, gx);
            }
            Op::Bce { x, target } => {
                let vx = self.value(*x).data();
                acc(
                    *x,
                    g.iter()
                        .zip(vx)
                        .zip(target)
                        .map(|((gi, &p), &y)| gi * bce_grad(p, y))
                        .collect(),
                );
            }
        }
    }
}

fn pick(b: &[f64], i: usize, bc: Bcast) -> f64 {
    match bc {
        Bcast::Same => b[i],
        Bcast::Scalar => b[0],
        Bcast::Row => b[i % b.len()],
    }
}

fn reduce_bcast(g: &[f64], bc: Bcast, len: usize) -> Vec<f64> {
    match bc {
        Bcast::Same => g.to_vec(),
        Bcast::Scalar => vec![g.iter().sum()],
        Bcast::Row => {
            let mut out = vec![0.0; len];
            for row in g.chunks(len) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            out
        }
    }
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for r in row.iter_mut() {
        *r = (*r - max).exp();
        total += *r;
    }
    for r in row.iter_mut() {
        *r /= total;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_inner(x: f64) -> f64 {
    GELU_C * (x + 0.044715 * x * x * x)
}

fn gelu_grad(x: f64) -> f64 {
    let t = gelu_inner(x).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn bce_value(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn bce_grad(p: f64, y: f64) -> f64 {
    if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
        return 0.0;
    }
    -y / p + (1.0 - y) / (1.0 - p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[1000.0, 0.0]));
        let y = g.softmax(x).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        // exp(k - 3) / (e^-2 + e^-1 + 1), evaluated term by term
        let denom = (-2.0f64).exp() + (-1.0f64).exp() + 1.0;
        let expected = [(-2.0f64).exp() / denom, (-1.0f64).exp() / denom, 1.0 / denom];
        // 40-digit evaluation with mpmath
        let frozen = [0.090_030_573_170_380_458, 0.244_728_471_054_797_652, 0.665_240_955_774_821_890];
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.softmax(x).unwrap();
        for ((a, b), c) in g.value(y).data().iter().zip(expected).zip(frozen) {
            assert!((a - b).abs() < 1e-15);
            assert!((a - c).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_cases() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(1e3) - 1.0).abs() < 1e-12);
        assert!(sigmoid(-1e3) >= 0.0);
        assert!((sigmoid(-(3.0f64).ln()) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_and_layer_norm() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[3.0, 4.0]));
        let y = g.l2_normalize(x).unwrap();
        assert!(g.value(y).max_abs_diff(&t(&[2], &[0.6, 0.8])) < 1e-15);
        let z = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.l2_normalize(z).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
        let c = g.constant(t(&[4], &[2.5; 4]));
        let y = g.layer_norm(c).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let half = g.scale(s, 0.5).unwrap();
        g.backward(half).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn leaf_used_twice_sums_paths() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.5, -0.5]));
        let a = g.scale(x, 3.0).unwrap();
        let b = g.scale(x, -7.0).unwrap();
        let c = g.add(a, b).unwrap();
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[-4.0, -4.0]);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn nan_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[0.0]));
        let y = g.constant(t(&[1], &[0.0]));
        assert!(matches!(g.div(x, y), Err(TensorError::NonFinite { op: "div", .. })));
    }

    #[test]
    fn broadcasting_is_restricted() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let row = g.constant(Tensor::ones(&[3]));
        let col = g.constant(Tensor::ones(&[2]));
        let s = g.constant(Tensor::scalar(2.0));
        assert!(g.add(a, row).is_ok());
        assert!(g.mul(a, s).is_ok());
        assert!(matches!(g.add(a, col), Err(TensorError::Shape { .. })));
        let other = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.sub(a, other).is_err());
    }

    #[test]
    fn gather_scatters_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.gather(x, vec![Some(2), None, Some(2), Some(0)], &[4]).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 0.0, 3.0, 1.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 2.0]);
    }

    #[test]
    fn untouched_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let unused = g.leaf(t(&[1], &[5.0]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0]);
    }
}
