//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! Every differentiable operation appends a node to a [`Graph`]; `backward`
//! walks the tape in reverse and deposits gradients on nodes that require
//! them. The op set is intentionally small: exactly what the encoder,
//! pooling and classifier stacks need, so each op can carry an exhaustive
//! finite-difference test.

use crate::error::{Error, Result};

/// Node handle into a [`Graph`].
pub type TensorId = usize;

/// Dense row-major f64 tensor.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Rows/cols of a 2-d tensor.
    fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("expected 2-d tensor, got {:?}", s))),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    AddBias { a: TensorId, bias: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f64 },
    Softmax { a: TensorId },
    LayerNorm { a: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    Gelu { a: TensorId },
    Reshape { a: TensorId },
    Transpose { a: TensorId },
    SliceRows { a: TensorId, start: usize },
    SliceCols { a: TensorId, start: usize, end: usize },
    ConcatRows { parts: Vec<TensorId> },
    ConcatCols { parts: Vec<TensorId> },
    MeanRows { a: TensorId },
    Sum { a: TensorId },
    GatherRows { a: TensorId, idx: Vec<usize> },
    Rope { a: TensorId, cos: Vec<f64>, sin: Vec<f64> },
    CrossEntropy { logits: TensorId, targets: Vec<usize>, weights: Vec<f64> },
}

struct Node {
    t: Tensor,
    op: Op,
}

/// Tape of executed ops. Inputs always precede their consumers, so the
/// reverse index order is a valid reverse topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    named: std::collections::HashMap<String, TensorId>,
}

fn check_finite(data: &[f64], op: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite value produced by {op}")))
    }
}

/// GELU, tanh approximation.
pub fn gelu_scalar(x: f64) -> f64 {
    const K: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const K: f64 = 0.7978845608028654;
    let u = K * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id].t
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id].t.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].t.shape
    }

    /// Gradient deposited by the last `backward`, if any.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id].t.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.t.grad = None;
        }
    }

    fn push(&mut self, t: Tensor, op: Op) -> TensorId {
        self.nodes.push(Node { t, op });
        self.nodes.len() - 1
    }

    /// Insert a leaf tensor.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        check_finite(&data, "leaf")?;
        Ok(self.push(
            Tensor { shape, data, requires_grad, grad: None },
            Op::Leaf,
        ))
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    /// Insert a trainable leaf once per name; later calls with the same name
    /// return the existing node so gradients of shared parameters accumulate
    /// in one place and can be collected by name after `backward`.
    pub fn named_leaf(&mut self, name: &str, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        if let Some(&id) = self.named.get(name) {
            return Ok(id);
        }
        let id = self.leaf(data, shape, true)?;
        self.named.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn named_id(&self, name: &str) -> Option<TensorId> {
        self.named.get(name).copied()
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].t.requires_grad)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.nodes[a].t.dims2()?;
        let (k2, n) = self.nodes[b].t.dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims disagree: {:?} x {:?}",
                self.nodes[a].t.shape, self.nodes[b].t.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        {
            let da = &self.nodes[a].t.data;
            let db = &self.nodes[b].t.data;
            matmul_into(da, db, &mut out, m, k, n);
        }
        check_finite(&out, "matmul")?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor { shape: vec![m, n], data: out, requires_grad: rg, grad: None },
            Op::MatMul { a, b },
        ))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a].t.shape != self.nodes[b].t.shape {
            return Err(Error::Shape(format!(
                "add shapes disagree: {:?} vs {:?}",
                self.nodes[a].t.shape, self.nodes[b].t.shape
            )));
        }
        let out: Vec<f64> = self.nodes[a]
            .t
            .data
            .iter()
            .zip(&self.nodes[b].t.data)
            .map(|(x, y)| x + y)
            .collect();
        check_finite(&out, "add")?;
        let rg = self.any_grad(&[a, b]);
        let shape = self.nodes[a].t.shape.clone();
        Ok(self.push(Tensor { shape, data: out, requires_grad: rg, grad: None }, Op::Add { a, b }))
    }

    /// Add a length-d bias to every row of an [n, d] tensor.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (n, d) = self.nodes[a].t.dims2()?;
        if self.nodes[bias].t.numel() != d {
            return Err(Error::Shape(format!(
                "bias length {} does not match row width {}",
                self.nodes[bias].t.numel(),
                d
            )));
        }
        let mut out = self.nodes[a].t.data.clone();
        for r in 0..n {
            for c in 0..d {
                out[r * d + c] += self.nodes[bias].t.data[c];
            }
        }
        check_finite(&out, "add_bias")?;
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(
            Tensor { shape: vec![n, d], data: out, requires_grad: rg, grad: None },
            Op::AddBias { a, bias },
        ))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a].t.shape != self.nodes[b].t.shape {
            return Err(Error::Shape(format!(
                "mul shapes disagree: {:?} vs {:?}",
                self.nodes[a].t.shape, self.nodes[b].t.shape
            )));
        }
        let out: Vec<f64> = self.nodes[a]
            .t
            .data
            .iter()
            .zip(&self.nodes[b].t.data)
            .map(|(x, y)| x * y)
            .collect();
        check_finite(&out, "mul")?;
        let rg = self.any_grad(&[a, b]);
        let shape = self.nodes[a].t.shape.clone();
        Ok(self.push(Tensor { shape, data: out, requires_grad: rg, grad: None }, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let out: Vec<f64> = self.nodes[a].t.data.iter().map(|x| x * c).collect();
        check_finite(&out, "scale")?;
        let rg = self.nodes[a].t.requires_grad;
        let shape = self.nodes[a].t.shape.clone();
        Ok(self.push(Tensor { shape, data: out, requires_grad: rg, grad: None }, Op::Scale { a, c }))
    }

    /// Softmax along the last axis, with max-subtraction.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.nodes[a].t.shape.clone();
        let last = *shape.last().ok_or_else(|| Error::Shape("softmax on 0-d tensor".into()))?;
        let mut out = self.nodes[a].t.data.clone();
        for row in out.chunks_mut(last) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        check_finite(&out, "softmax")?;
        let rg = self.nodes[a].t.requires_grad;
        Ok(self.push(Tensor { shape, data: out, requires_grad: rg, grad: None }, Op::Softmax { a }))
    }

    /// Layer normalization over the last axis, then elementwise affine.
    pub fn layer_norm(&mut self, a: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> Result<TensorId> {
        let shape = self.nodes[a].t.shape.clone();
        let d = *shape.last().ok_or_else(|| Error::Shape("layer_norm on 0-d tensor".into()))?;
        if self.nodes[gamma].t.numel() != d || self.nodes[beta].t.numel() != d {
            return Err(Error::Shape(format!(
                "layer_norm affine width {} / {} does not match last axis {}",
                self.nodes[gamma].t.numel(),
                self.nodes[beta].t.numel(),
                d
            )));
        }
        let mut out = self.nodes[a].t.data.clone();
        let g = &self.nodes[gamma].t.data;
        let b = &self.nodes[beta].t.data;
        for row in out.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[c] + b[c];
            }
        }
        check_finite(&out, "layer_norm")?;
        let rg = self.any_grad(&[a, gamma, beta]);
        Ok(self.push(
            Tensor { shape, data: out, requires_grad: rg, grad: None },
            Op::LayerNorm { a, gamma, beta, eps },
        ))
    }

    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.nodes[a].t.data.iter().map(|&x| gelu_scalar(x)).collect();
        check_finite(&out, "gelu")?;
        let rg = self.nodes[a].t.requires_grad;
        let shape = self.nodes[a].t.shape.clone();
        Ok(self.push(Tensor { shape, data: out, requires_grad: rg, grad: None }, Op::Gelu { a }))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a].t.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.nodes[a].t.shape, shape
            )));
        }
        let data = self.nodes[a].t.data.clone();
        let rg = self.nodes[a].t.requires_grad;
        Ok(self.push(Tensor { shape, data, requires_grad: rg, grad: None }, Op::Reshape { a }))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.nodes[a].t.dims2()?;
        let src = &self.nodes[a].t.data;
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = src[r * n + c];
            }
        }
        let rg = self.nodes[a].t.requires_grad;
        Ok(self.push(
            Tensor { shape: vec![n, m], data: out, requires_grad: rg, grad: None },
            Op::Transpose { a },
        ))
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let (m, n) = self.nodes[a].t.dims2()?;
        if start >= end || end > m {
            return Err(Error::Shape(format!("row slice {start}..{end} out of bounds for {m} rows")));
        }
        let data = self.nodes[a].t.data[start * n..end * n].to_vec();
        let rg = self.nodes[a].t.requires_grad;
        Ok(self.push(
            Tensor { shape: vec![end - start, n], data, requires_grad: rg, grad: None },
            Op::SliceRows { a, start },
        ))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let (m, n) = self.nodes[a].t.dims2()?;
        if start >= end || end > n {
            return Err(Error::Shape(format!("col slice {start}..{end} out of bounds for {n} cols")));
        }
        let w = end - start;
        let src = &self.nodes[a].t.data;
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        let rg = self.nodes[a].t.requires_grad;
        Ok(self.push(
            Tensor { shape: vec![m, w], data: out, requires_grad: rg, grad: None },
            Op::SliceCols { a, start, end },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows of zero parts".into()));
        }
        let (_, n) = self.nodes[parts[0]].t.dims2()?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (m, w) = self.nodes[p].t.dims2()?;
            if w != n {
                return Err(Error::Shape(format!("concat_rows width mismatch: {w} vs {n}")));
            }
            data.extend_from_slice(&self.nodes[p].t.data);
            rows += m;
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor { shape: vec![rows, n], data, requires_grad: rg, grad: None },
            Op::ConcatRows { parts: parts.to_vec() },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of zero parts".into()));
        }
        let (m, _) = self.nodes[parts[0]].t.dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (r, w) = self.nodes[p].t.dims2()?;
            if r != m {
                return Err(Error::Shape(format!("concat_cols row mismatch: {r} vs {m}")));
            }
            widths.push(w);
            total += w;
        }
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = &self.nodes[p].t.data;
            for r in 0..m {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor { shape: vec![m, total], data, requires_grad: rg, grad: None },
            Op::ConcatCols { parts: parts.to_vec() },
        ))
    }

    /// Mean over axis 0 of an [n, d] tensor, yielding [1, d].
    pub fn mean_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.nodes[a].t.dims2()?;
        if m == 0 {
            return Err(Error::Shape("mean_rows of empty tensor".into()));
        }
        let src = &self.nodes[a].t.data;
        let mut out = vec![0.0; n];
        for r in 0..m {
            for c in 0..n {
                out[c] += src[r * n + c];
            }
        }
        for v in &mut out {
            *v /= m as f64;
        }
        check_finite(&out, "mean_rows")?;
        let rg = self.nodes[a].t.requires_grad;
        Ok(self.push(
            Tensor { shape: vec![1, n], data: out, requires_grad: rg, grad: None },
            Op::MeanRows { a },
        ))
    }

    /// Sum of all elements -> scalar (shape [1]).
    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f64 = self.nodes[a].t.data.iter().sum();
        check_finite(&[s], "sum")?;
        let rg = self.nodes[a].t.requires_grad;
        Ok(self.push(Tensor { shape: vec![1], data: vec![s], requires_grad: rg, grad: None }, Op::Sum { a }))
    }

    /// Row lookup (embedding-style gather): out[r] = a[idx[r]].
    pub fn gather_rows(&mut self, a: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (m, n) = self.nodes[a].t.dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Shape(format!("gather index {bad} out of bounds for {m} rows")));
        }
        let src = &self.nodes[a].t.data;
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.nodes[a].t.requires_grad;
        Ok(self.push(
            Tensor { shape: vec![idx.len(), n], data, requires_grad: rg, grad: None },
            Op::GatherRows { a, idx: idx.to_vec() },
        ))
    }

    /// Rotary rotation of an [n, d] tensor (d even): row i is rotated by the
    /// angles `positions[i] * base^(-2j/d)` over consecutive coordinate pairs.
    pub fn rope(&mut self, a: TensorId, positions: &[f64], base: f64) -> Result<TensorId> {
        let (n, d) = self.nodes[a].t.dims2()?;
        if d % 2 != 0 {
            return Err(Error::Config(format!("rotary head dim {d} must be even")));
        }
        if positions.len() != n {
            return Err(Error::Shape(format!(
                "rope positions length {} does not match {} rows",
                positions.len(),
                n
            )));
        }
        let half = d / 2;
        let mut cos = Vec::with_capacity(n * half);
        let mut sin = Vec::with_capacity(n * half);
        for &p in positions {
            for j in 0..half {
                let theta = p * base.powf(-2.0 * j as f64 / d as f64);
                cos.push(theta.cos());
                sin.push(theta.sin());
            }
        }
        let src = &self.nodes[a].t.data;
        let mut out = vec![0.0; n * d];
        apply_rotation(src, &mut out, &cos, &sin, false);
        check_finite(&out, "rope")?;
        let rg = self.nodes[a].t.requires_grad;
        Ok(self.push(
            Tensor { shape: vec![n, d], data: out, requires_grad: rg, grad: None },
            Op::Rope { a, cos, sin },
        ))
    }

    /// Class-weighted mean negative log likelihood over rows of [b, c] logits.
    /// loss = sum_i w[y_i] * nll_i / sum_i w[y_i].
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[usize], class_weights: &[f64]) -> Result<TensorId> {
        let (b, c) = self.nodes[logits].t.dims2()?;
        if targets.len() != b {
            return Err(Error::Shape(format!("{} targets for {b} logit rows", targets.len())));
        }
        if class_weights.len() != c {
            return Err(Error::Shape(format!("{} class weights for {c} classes", class_weights.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Validation(format!("target class {bad} out of range 0..{c}")));
        }
        let src = &self.nodes[logits].t.data;
        let mut wsum = 0.0;
        let mut loss = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let w = class_weights[y];
            loss += w * (lse - row[y]);
            wsum += w;
        }
        if wsum <= 0.0 {
            return Err(Error::Validation("cross_entropy: total class weight is zero".into()));
        }
        loss /= wsum;
        check_finite(&[loss], "cross_entropy")?;
        let rg = self.nodes[logits].t.requires_grad;
        Ok(self.push(
            Tensor { shape: vec![1], data: vec![loss], requires_grad: rg, grad: None },
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: class_weights.to_vec() },
        ))
    }

    /// Reverse pass from a scalar loss. Deposits (accumulates) gradients on
    /// every node with `requires_grad`; internal scratch is fresh per call,
    /// so repeated calls add exactly one more d(loss)/d(param) each time.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss].t.numel() != 1 {
            return Err(Error::Validation(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].t.shape
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].t.requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            // Deposit on the node itself.
            match &mut self.nodes[id].t.grad {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: TensorId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let add_to = |grads: &mut [Option<Vec<f64>>], target: TensorId, contrib: Vec<f64>| {
            match &mut grads[target] {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(&contrib) {
                        *a += v;
                    }
                }
                slot => *slot = Some(contrib),
            }
        };
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[*a].t.shape[0], self.nodes[*a].t.shape[1]);
                let n2 = self.nodes[*b].t.shape[1];
                if self.nodes[*a].t.requires_grad {
                    // dA = dC . B^T
                    let db = &self.nodes[*b].t.data;
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n2 {
                            let gij = g[i * n2 + j];
                            if gij != 0.0 {
                                for p in 0..k {
                                    da[i * k + p] += gij * db[p * n2 + j];
                                }
                            }
                        }
                    }
                    add_to(grads, *a, da);
                }
                if self.nodes[*b].t.requires_grad {
                    // dB = A^T . dC
                    let daa = &self.nodes[*a].t.data;
                    let mut db = vec![0.0; k * n2];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = daa[i * k + p];
                            if aip != 0.0 {
                                for j in 0..n2 {
                                    db[p * n2 + j] += aip * g[i * n2 + j];
                                }
                            }
                        }
                    }
                    add_to(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                if self.nodes[*a].t.requires_grad {
                    add_to(grads, *a, g.to_vec());
                }
                if self.nodes[*b].t.requires_grad {
                    add_to(grads, *b, g.to_vec());
                }
            }
            Op::AddBias { a, bias } => {
                let d = self.nodes[*bias].t.numel();
                if self.nodes[*a].t.requires_grad {
                    add_to(grads, *a, g.to_vec());
                }
                if self.nodes[*bias].t.requires_grad {
                    let mut gb = vec![0.0; d];
                    for row in g.chunks(d) {
                        for (c, v) in row.iter().enumerate() {
                            gb[c] += v;
                        }
                    }
                    add_to(grads, *bias, gb);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].t.requires_grad {
                    let gb: Vec<f64> = g.iter().zip(&self.nodes[*b].t.data).map(|(x, y)| x * y).collect();
                    add_to(grads, *a, gb);
                }
                if self.nodes[*b].t.requires_grad {
                    let ga: Vec<f64> = g.iter().zip(&self.nodes[*a].t.data).map(|(x, y)| x * y).collect();
                    add_to(grads, *b, ga);
                }
            }
            Op::Scale { a, c } => {
                if self.nodes[*a].t.requires_grad {
                    add_to(grads, *a, g.iter().map(|v| v * c).collect());
                }
            }
            Op::Softmax { a } => {
                if self.nodes[*a].t.requires_grad {
                    let d = *node.t.shape.last().unwrap();
                    let p = &node.t.data;
                    let mut da = vec![0.0; p.len()];
                    for (row, (prow, grow)) in p.chunks(d).zip(g.chunks(d)).enumerate() {
                        let dot: f64 = prow.iter().zip(grow).map(|(x, y)| x * y).sum();
                        for c in 0..d {
                            da[row * d + c] = prow[c] * (grow[c] - dot);
                        }
                    }
                    add_to(grads, *a, da);
                }
            }
            Op::LayerNorm { a, gamma, beta, eps } => {
                let d = *node.t.shape.last().unwrap();
                let x = &self.nodes[*a].t.data;
                let gam = &self.nodes[*gamma].t.data;
                let rows = x.len() / d;
                // Recompute per-row stats.
                let mut da = vec![0.0; x.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let xr = &x[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mean = xr.iter().sum::<f64>() / d as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
                    let gy: Vec<f64> = gr.iter().zip(gam).map(|(gv, gm)| gv * gm).collect();
                    let sum_gy: f64 = gy.iter().sum();
                    let sum_gy_xhat: f64 = gy.iter().zip(&xhat).map(|(a2, b2)| a2 * b2).sum();
                    for c in 0..d {
                        da[r * d + c] =
                            inv * (gy[c] - sum_gy / d as f64 - xhat[c] * sum_gy_xhat / d as f64);
                        dgamma[c] += gr[c] * xhat[c];
                        dbeta[c] += gr[c];
                    }
                }
                if self.nodes[*a].t.requires_grad {
                    add_to(grads, *a, da);
                }
                if self.nodes[*gamma].t.requires_grad {
                    add_to(grads, *gamma, dgamma);
                }
                if self.nodes[*beta].t.requires_grad {
                    add_to(grads, *beta, dbeta);
                }
            }
            Op::Gelu { a } => {
                if self.nodes[*a].t.requires_grad {
                    let da: Vec<f64> = self.nodes[*a]
                        .t
                        .data
                        .iter()
                        .zip(g)
                        .map(|(&x, &gv)| gv * gelu_grad_scalar(x))
                        .collect();
                    add_to(grads, *a, da);
                }
            }
            Op::Reshape { a } => {
                if self.nodes[*a].t.requires_grad {
                    add_to(grads, *a, g.to_vec());
                }
            }
            Op::Transpose { a } => {
                if self.nodes[*a].t.requires_grad {
                    let (m, n2) = (self.nodes[*a].t.shape[0], self.nodes[*a].t.shape[1]);
                    let mut da = vec![0.0; m * n2];
                    for r in 0..m {
                        for c in 0..n2 {
                            da[r * n2 + c] = g[c * m + r];
                        }
                    }
                    add_to(grads, *a, da);
                }
            }
            Op::SliceRows { a, start } => {
                if self.nodes[*a].t.requires_grad {
                    let (m, n2) = (self.nodes[*a].t.shape[0], self.nodes[*a].t.shape[1]);
                    let mut da = vec![0.0; m * n2];
                    da[start * n2..start * n2 + g.len()].copy_from_slice(g);
                    add_to(grads, *a, da);
                }
            }
            Op::SliceCols { a, start, end } => {
                if self.nodes[*a].t.requires_grad {
                    let (m, n2) = (self.nodes[*a].t.shape[0], self.nodes[*a].t.shape[1]);
                    let w = end - start;
                    let mut da = vec![0.0; m * n2];
                    for r in 0..m {
                        da[r * n2 + start..r * n2 + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    add_to(grads, *a, da);
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].t.numel();
                    if self.nodes[p].t.requires_grad {
                        add_to(grads, p, g[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            Op::ConcatCols { parts } => {
                let m = node.t.shape[0];
                let total = node.t.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p].t.shape[1];
                    if self.nodes[p].t.requires_grad {
                        let mut dp = vec![0.0; m * w];
                        for r in 0..m {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        add_to(grads, p, dp);
                    }
                    off += w;
                }
            }
            Op::MeanRows { a } => {
                if self.nodes[*a].t.requires_grad {
                    let (m, n2) = (self.nodes[*a].t.shape[0], self.nodes[*a].t.shape[1]);
                    let mut da = vec![0.0; m * n2];
                    for r in 0..m {
                        for c in 0..n2 {
                            da[r * n2 + c] = g[c] / m as f64;
                        }
                    }
                    add_to(grads, *a, da);
                }
            }
            Op::Sum { a } => {
                if self.nodes[*a].t.requires_grad {
                    add_to(grads, *a, vec![g[0]; self.nodes[*a].t.numel()]);
                }
            }
            Op::GatherRows { a, idx } => {
                if self.nodes[*a].t.requires_grad {
                    let (m, n2) = (self.nodes[*a].t.shape[0], self.nodes[*a].t.shape[1]);
                    let mut da = vec![0.0; m * n2];
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..n2 {
                            da[i * n2 + c] += g[r * n2 + c];
                        }
                    }
                    add_to(grads, *a, da);
                }
            }
            Op::Rope { a, cos, sin } => {
                if self.nodes[*a].t.requires_grad {
                    let mut da = vec![0.0; g.len()];
                    apply_rotation(g, &mut da, cos, sin, true);
                    add_to(grads, *a, da);
                }
            }
            Op::CrossEntropy { logits, targets, weights } => {
                if self.nodes[*logits].t.requires_grad {
                    let (b, c) = (self.nodes[*logits].t.shape[0], self.nodes[*logits].t.shape[1]);
                    let src = &self.nodes[*logits].t.data;
                    let wsum: f64 = targets.iter().map(|&y| weights[y]).sum();
                    let gl = g[0];
                    let mut da = vec![0.0; b * c];
                    for (i, &y) in targets.iter().enumerate() {
                        let row = &src[i * c..(i + 1) * c];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        let w = weights[y] / wsum;
                        for j in 0..c {
                            let p = (row[j] - max).exp() / sum;
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            da[i * c + j] = gl * w * (p - onehot);
                        }
                    }
                    add_to(grads, *logits, da);
                }
            }
        }
    }
}

/// Pairwise rotation y = R(theta) x (or the inverse when `transpose`).
fn apply_rotation(src: &[f64], out: &mut [f64], cos: &[f64], sin: &[f64], transpose: bool) {
    for (k, pair) in src.chunks(2).enumerate() {
        let (c, s) = (cos[k], sin[k]);
        let (x1, x2) = (pair[0], pair[1]);
        if transpose {
            out[2 * k] = c * x1 + s * x2;
            out[2 * k + 1] = -s * x1 + c * x2;
        } else {
            out[2 * k] = c * x1 - s * x2;
            out[2 * k + 1] = s * x1 + c * x2;
        }
    }
}

/// out += is not used; plain overwrite of a zeroed buffer, ikj order.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randvec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Central finite-difference gradient of `f` w.r.t. the leaf with the
    /// given data, evaluated entry by entry.
    fn fd_grad<F>(data: &[f64], h: f64, mut f: F) -> Vec<f64>
    where
        F: FnMut(&[f64]) -> f64,
    {
        let mut g = vec![0.0; data.len()];
        let mut x = data.to_vec();
        for i in 0..data.len() {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            g[i] = (up - down) / (2.0 * h);
        }
        g
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i = g.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let b = g.constant(vec![5.0, 6.0, 7.0, 8.0], vec![2, 2]).unwrap();
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.data(c), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_hand() {
        let mut g = Graph::new();
        let a = g.constant(vec![1.0, 2.0], vec![1, 2]).unwrap();
        let b = g.constant(vec![3.0, 4.0], vec![2, 1]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = g.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn matmul_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a0 = randvec(&mut rng, 12);
        let b0 = randvec(&mut rng, 8);
        let run = |av: &[f64], bv: &[f64]| {
            let mut g = Graph::new();
            let a = g.leaf(av.to_vec(), vec![3, 4], true).unwrap();
            let b = g.leaf(bv.to_vec(), vec![4, 2], true).unwrap();
            let c = g.matmul(a, b).unwrap();
            // Weighted sum so every entry matters differently.
            let w = g
                .constant((1..=6).map(|i| i as f64 * 0.3).collect(), vec![3, 2])
                .unwrap();
            let p = g.mul(c, w).unwrap();
            let s = g.sum(p).unwrap();
            (g, a, b, s)
        };
        let (mut g, a, b, s) = run(&a0, &b0);
        g.backward(s).unwrap();
        let ga = g.grad(a).unwrap().to_vec();
        let gb = g.grad(b).unwrap().to_vec();
        let fa = fd_grad(&a0, 1e-6, |x| {
            let (g2, _, _, s2) = run(x, &b0);
            g2.data(s2)[0]
        });
        let fb = fd_grad(&b0, 1e-6, |x| {
            let (g2, _, _, s2) = run(&a0, x);
            g2.data(s2)[0]
        });
        assert!(max_rel_err(&ga, &fa) < 1e-6);
        assert!(max_rel_err(&gb, &fb) < 1e-6);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut g = Graph::new();
        let a = g.constant(vec![0.0, 0.0, 0.0], vec![1, 3]).unwrap();
        let s = g.softmax(a).unwrap();
        for v in g.data(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let b = g.constant(vec![1000.0, 1000.0], vec![1, 2]).unwrap();
        let s2 = g.softmax(b).unwrap();
        assert!((g.data(s2)[0] - 0.5).abs() < 1e-15);
        assert!((g.data(s2)[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_gradcheck_and_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = randvec(&mut rng, 5);
        let run = |xv: &[f64]| {
            let mut g = Graph::new();
            let x = g.leaf(xv.to_vec(), vec![1, 5], true).unwrap();
            let s = g.softmax(x).unwrap();
            let w = g.constant(vec![0.9, -0.4, 0.2, 1.3, -0.7], vec![1, 5]).unwrap();
            let p = g.mul(s, w).unwrap();
            let l = g.sum(p).unwrap();
            (g, x, s, l)
        };
        let (mut g, x, s, l) = run(&x0);
        let total: f64 = g.data(s).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        g.backward(l).unwrap();
        let gx = g.grad(x).unwrap().to_vec();
        let fx = fd_grad(&x0, 1e-6, |v| {
            let (g2, _, _, l2) = run(v);
            g2.data(l2)[0]
        });
        assert!(max_rel_err(&gx, &fx) < 1e-5);
    }

    #[test]
    fn layer_norm_limits() {
        let mut g = Graph::new();
        let x = g.constant(vec![5.0, 5.0, 5.0], vec![1, 3]).unwrap();
        let gamma = g.constant(vec![1.0; 3], vec![3]).unwrap();
        let beta = g.constant(vec![0.0; 3], vec![3]).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for v in g.data(y) {
            assert!(v.abs() < 1e-9);
        }
        let x2 = g.constant(vec![1.0, 3.0], vec![1, 2]).unwrap();
        let gamma2 = g.constant(vec![1.0; 2], vec![2]).unwrap();
        let beta2 = g.constant(vec![0.0; 2], vec![2]).unwrap();
        let y2 = g.layer_norm(x2, gamma2, beta2, 1e-12).unwrap();
        assert!((g.data(y2)[0] + 1.0).abs() < 1e-5);
        assert!((g.data(y2)[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = randvec(&mut rng, 8);
        let g0 = randvec(&mut rng, 4);
        let b0 = randvec(&mut rng, 4);
        let run = |xv: &[f64], gv: &[f64], bv: &[f64]| {
            let mut g = Graph::new();
            let x = g.leaf(xv.to_vec(), vec![2, 4], true).unwrap();
            let gamma = g.leaf(gv.to_vec(), vec![4], true).unwrap();
            let beta = g.leaf(bv.to_vec(), vec![4], true).unwrap();
            let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
            let w = g.constant((1..=8).map(|i| (i as f64).sin()).collect(), vec![2, 4]).unwrap();
            let p = g.mul(y, w).unwrap();
            let l = g.sum(p).unwrap();
            (g, x, gamma, beta, l)
        };
        let (mut g, x, gamma, beta, l) = run(&x0, &g0, &b0);
        g.backward(l).unwrap();
        let f = |xv: &[f64], gv: &[f64], bv: &[f64]| {
            let (g2, _, _, _, l2) = run(xv, gv, bv);
            g2.data(l2)[0]
        };
        let fx = fd_grad(&x0, 1e-6, |v| f(v, &g0, &b0));
        let fg = fd_grad(&g0, 1e-6, |v| f(&x0, v, &b0));
        let fb = fd_grad(&b0, 1e-6, |v| f(&x0, &g0, v));
        assert!(max_rel_err(g.grad(x).unwrap(), &fx) < 1e-5);
        assert!(max_rel_err(g.grad(gamma).unwrap(), &fg) < 1e-5);
        assert!(max_rel_err(g.grad(beta).unwrap(), &fb) < 1e-5);
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut g = Graph::new();
        let p = g.leaf(vec![1.5, -2.0, 0.5, 3.0, 0.0, -1.0], vec![2, 3], true).unwrap();
        let l = g.sum(p).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[1.0; 6]);

        let mut g2 = Graph::new();
        let p2 = g2.leaf(vec![1.5, -2.0, 0.5], vec![1, 3], true).unwrap();
        let sq = g2.mul(p2, p2).unwrap();
        let s = g2.sum(sq).unwrap();
        let l2 = g2.scale(s, 0.5).unwrap();
        g2.backward(l2).unwrap();
        assert_eq!(g2.grad(p2).unwrap(), &[1.5, -2.0, 0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let p = g.leaf(vec![1.0, 2.0], vec![1, 2], true).unwrap();
        assert!(g.backward(p).is_err());
    }

    #[test]
    fn backward_accumulates_without_zeroing() {
        let mut g = Graph::new();
        let p = g.leaf(vec![2.0, 3.0], vec![1, 2], true).unwrap();
        let l = g.sum(p).unwrap();
        g.backward(l).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[2.0, 2.0]);
        g.zero_grad();
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(vec![0.3, -0.7, 1.1, 0.2], vec![1, 4]).unwrap();
        let y = g.rope(x, &[0.0], 10000.0).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn rope_relative_position_property() {
        // Rotated q . k must depend only on the position offset.
        let base = 10000.0;
        let q0 = vec![0.4, -0.2, 0.9, 0.1, -0.5, 0.3, 0.7, -0.8];
        let k0 = vec![-0.1, 0.6, 0.2, -0.9, 0.5, 0.4, -0.3, 0.2];
        let dot_at = |p: f64, delta: f64| {
            let mut g = Graph::new();
            let q = g.constant(q0.clone(), vec![1, 8]).unwrap();
            let k = g.constant(k0.clone(), vec![1, 8]).unwrap();
            let qr = g.rope(q, &[p], base).unwrap();
            let kr = g.rope(k, &[p + delta], base).unwrap();
            let kt = g.transpose(kr).unwrap();
            let d = g.matmul(qr, kt).unwrap();
            g.data(d)[0]
        };
        let reference = dot_at(0.0, 3.0);
        for p in [5.0, 11.0] {
            assert!((dot_at(p, 3.0) - reference).abs() < 1e-10);
        }
    }

    #[test]
    fn gather_rows_forward_backward() {
        let mut g = Graph::new();
        let table = g.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![3, 2], true).unwrap();
        let picked = g.gather_rows(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.data(picked), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let l = g.sum(picked).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let logits = g.constant(vec![0.0, 0.0], vec![1, 2]).unwrap();
        let l = g.cross_entropy(logits, &[1], &[1.0, 1.0]).unwrap();
        assert!((g.data(l)[0] - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn composite_ops_gradcheck() {
        // Chain exercising gelu, add_bias, slice/concat, transpose, mean_rows,
        // rope and cross-entropy in one tape.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = randvec(&mut rng, 4 * 6);
        let w0 = randvec(&mut rng, 6 * 4);
        let b0 = randvec(&mut rng, 4);
        let run = |xv: &[f64], wv: &[f64], bv: &[f64]| {
            let mut g = Graph::new();
            let x = g.leaf(xv.to_vec(), vec![4, 6], true).unwrap();
            let w = g.leaf(wv.to_vec(), vec![6, 4], true).unwrap();
            let b = g.leaf(bv.to_vec(), vec![4], true).unwrap();
            let h = g.matmul(x, w).unwrap();
            let h = g.add_bias(h, b).unwrap();
            let h = g.gelu(h).unwrap();
            let h = g.rope(h, &[0.0, 1.0, 2.0, 3.0], 100.0).unwrap();
            let left = g.slice_cols(h, 0, 2).unwrap();
            let right = g.slice_cols(h, 2, 4).unwrap();
            let h = g.concat_cols(&[right, left]).unwrap();
            let top = g.slice_rows(h, 0, 2).unwrap();
            let bottom = g.slice_rows(h, 2, 4).unwrap();
            let h = g.concat_rows(&[bottom, top]).unwrap();
            let ht = g.transpose(h).unwrap();
            let pooled = g.mean_rows(ht).unwrap();
            let pt = g.transpose(pooled).unwrap();
            let logits = g.reshape(pt, vec![2, 2]).unwrap();
            let l = g.cross_entropy(logits, &[0, 1], &[1.0, 2.0]).unwrap();
            (g, x, w, b, l)
        };
        let (mut g, x, w, b, l) = run(&x0, &w0, &b0);
        g.backward(l).unwrap();
        let f = |xv: &[f64], wv: &[f64], bv: &[f64]| {
            let (g2, _, _, _, l2) = run(xv, wv, bv);
            g2.data(l2)[0]
        };
        let fx = fd_grad(&x0, 1e-6, |v| f(v, &w0, &b0));
        let fw = fd_grad(&w0, 1e-6, |v| f(&x0, v, &b0));
        let fb = fd_grad(&b0, 1e-6, |v| f(&x0, &w0, v));
        assert!(max_rel_err(g.grad(x).unwrap(), &fx) < 1e-4);
        assert!(max_rel_err(g.grad(w).unwrap(), &fw) < 1e-4);
        assert!(max_rel_err(g.grad(b).unwrap(), &fb) < 1e-4);
    }

    #[test]
    fn nan_input_rejected() {
        let mut g = Graph::new();
        assert!(g.leaf(vec![f64::NAN], vec![1], false).is_err());
    }
}
