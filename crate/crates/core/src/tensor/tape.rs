//! Reverse-mode autodiff over a dynamically recorded operation graph.
//!
//! Each op computes its forward value at record time; [`Tape::backward`]
//! walks the nodes in reverse and accumulates vector-Jacobian products.
//! The tape is intended to live for one forward/backward round and be
//! dropped afterwards; leaves hold copies of the caller's values, and the
//! caller reads gradients back out by [`VarId`].

use crate::error::{Error, Result};
use crate::tensor::{log_softmax_slice, norm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `[n,k] x [k,p] -> [n,p]`
    Matmul { a: VarId, b: VarId },
    Transpose { a: VarId },
    /// Elementwise sum of two same-shape nodes.
    Add { a: VarId, b: VarId },
    /// `[n,d] + [d]`, the bias-broadcast case.
    AddRow { a: VarId, bias: VarId },
    /// Elementwise product of two same-shape nodes.
    Mul { a: VarId, b: VarId },
    Scale { a: VarId, c: f64 },
    AddConst { a: VarId },
    Gelu { a: VarId },
    Exp { a: VarId },
    Log { a: VarId },
    /// Row-wise layer norm with affine terms; `eps` sits inside the sqrt.
    LayerNorm {
        a: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
    },
    /// Softmax over the last axis (vector, or matrix rows).
    Softmax { a: VarId },
    /// Row-wise softmax over `[n,n]` where row `i` sees columns `0..=i`.
    CausalSoftmax { a: VarId },
    /// Log-softmax of a vector.
    LogSoftmax { a: VarId },
    /// Row lookup: `out[r,:] = table[ids[r],:]`.
    Gather { table: VarId, ids: Vec<usize> },
    /// Extract row `index` of a matrix as a vector.
    Row { a: VarId, index: usize },
    /// Columns `start..start+width` of a matrix.
    SliceCols {
        a: VarId,
        start: usize,
        width: usize,
    },
    /// Horizontal concatenation of same-height matrices.
    ConcatCols { parts: Vec<VarId> },
    /// Vector built from scalar nodes.
    StackScalars { items: Vec<VarId> },
    /// Maximum entry of a vector; `argmax` is the lowest maximizing index.
    MaxVec { a: VarId, argmax: usize },
    /// Scalar element of a vector.
    Pick { a: VarId, index: usize },
    /// Cosine similarity of two vectors.
    Cosine { u: VarId, v: VarId },
    /// Sum of scalar nodes.
    SumScalars { items: Vec<VarId> },
    /// Sum of all elements.
    SumAll { a: VarId },
    /// Fixed-weight linear functional of a node's elements.
    WeightedSum { a: VarId, weights: Vec<f64> },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

/// Recorded operation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> VarId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = VarId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: Vec::new(),
            op,
        });
        id
    }

    pub fn leaf(&mut self, t: &Tensor) -> VarId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    pub fn leaf_vector(&mut self, data: &[f64]) -> VarId {
        self.push(vec![data.len()], data.to_vec(), Op::Leaf)
    }

    pub fn shape(&self, v: VarId) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: VarId) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Value of a scalar (single-element) node.
    pub fn scalar(&self, v: VarId) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: VarId) -> &[f64] {
        &self.nodes[v.0].grad
    }

    fn dims2(&self, v: VarId, what: &str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(Error::Dimension(format!(
                "{what} requires a 2-D tensor, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    // ── op constructors ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (n, k) = self.dims2(a, "matmul lhs")?;
        let (k2, p) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: lhs {:?} vs rhs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, n, k, p);
        Ok(self.push(vec![n, p], data, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        let (n, p) = self.dims2(a, "transpose")?;
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; n * p];
        for i in 0..n {
            for j in 0..p {
                out[j * n + i] = src[i * p + j];
            }
        }
        Ok(self.push(vec![p, n], out, Op::Transpose { a }))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Add { a, b })
    }

    pub fn add_row(&mut self, a: VarId, bias: VarId) -> VarId {
        let (n, d) = self.dims2(a, "add_row lhs").expect("add_row lhs must be 2-D");
        assert_eq!(self.shape(bias), &[d], "add_row: bias shape mismatch");
        let mut data = self.nodes[a.0].data.clone();
        let b = &self.nodes[bias.0].data;
        for r in 0..n {
            for j in 0..d {
                data[r * d + j] += b[j];
            }
        }
        self.push(vec![n, d], data, Op::AddRow { a, bias })
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Scale { a, c })
    }

    pub fn add_const(&mut self, a: VarId, c: f64) -> VarId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::AddConst { a })
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| gelu_tanh(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Gelu { a })
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.exp()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Exp { a })
    }

    pub fn log(&mut self, a: VarId) -> VarId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.ln()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Log { a })
    }

    /// Row-wise layer norm over the last axis of a 1-D or 2-D node, with
    /// affine `gamma`/`beta`. A constant row maps to `beta` (zero pre-affine)
    /// because `eps` is added inside the square root.
    pub fn layer_norm(&mut self, a: VarId, gamma: VarId, beta: VarId, eps: f64) -> VarId {
        let (rows, d) = self.rows_cols(a);
        assert_eq!(self.shape(gamma), &[d], "layer_norm: gamma shape mismatch");
        assert_eq!(self.shape(beta), &[d], "layer_norm: beta shape mismatch");
        let x = &self.nodes[a.0].data;
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, out, Op::LayerNorm { a, gamma, beta, eps })
    }

    /// Stable softmax along `axis`: 0 for a vector, 1 for matrix rows.
    pub fn softmax(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        let shape = self.nodes[a.0].shape.clone();
        match (shape.len(), axis) {
            (1, 0) | (2, 1) => {}
            _ => {
                return Err(Error::Dimension(format!(
                    "softmax axis {axis} is invalid for shape {shape:?}"
                )))
            }
        }
        let (rows, d) = self.rows_cols(a);
        let x = &self.nodes[a.0].data;
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..d {
                let e = (row[j] - max).exp();
                out[r * d + j] = e;
                sum += e;
            }
            for j in 0..d {
                out[r * d + j] /= sum;
            }
        }
        Ok(self.push(shape, out, Op::Softmax { a }))
    }

    /// Softmax over `[n,n]` attention scores where row `i` attends to
    /// columns `0..=i`; masked entries come out exactly zero.
    pub fn causal_softmax(&mut self, a: VarId) -> Result<VarId> {
        let (n, n2) = self.dims2(a, "causal_softmax")?;
        if n != n2 {
            return Err(Error::Dimension(format!(
                "causal_softmax requires a square matrix, got {:?}",
                self.shape(a)
            )));
        }
        let x = &self.nodes[a.0].data;
        let mut out = vec![0.0; x.len()];
        for i in 0..n {
            let row = &x[i * n..i * n + i + 1];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..=i {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..=i {
                out[i * n + j] /= sum;
            }
        }
        Ok(self.push(vec![n, n], out, Op::CausalSoftmax { a }))
    }

    pub fn log_softmax(&mut self, a: VarId) -> Result<VarId> {
        if self.nodes[a.0].shape.len() != 1 {
            return Err(Error::Dimension(format!(
                "log_softmax requires a vector, got shape {:?}",
                self.shape(a)
            )));
        }
        let out = log_softmax_slice(&self.nodes[a.0].data);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, out, Op::LogSoftmax { a }))
    }

    pub fn gather(&mut self, table: VarId, ids: &[usize]) -> Result<VarId> {
        let (v, d) = self.dims2(table, "gather table")?;
        if ids.is_empty() {
            return Err(Error::Input("gather with no indices".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!(
                "gather index {bad} out of range for table with {v} rows"
            )));
        }
        let src = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn row(&mut self, a: VarId, index: usize) -> Result<VarId> {
        let (n, d) = self.dims2(a, "row")?;
        if index >= n {
            return Err(Error::Input(format!(
                "row index {index} out of range for {n} rows"
            )));
        }
        let data = self.nodes[a.0].data[index * d..(index + 1) * d].to_vec();
        Ok(self.push(vec![d], data, Op::Row { a, index }))
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, width: usize) -> VarId {
        let (n, d) = self.dims2(a, "slice_cols").expect("slice_cols needs 2-D");
        assert!(start + width <= d, "slice_cols out of range");
        let src = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(n * width);
        for r in 0..n {
            out.extend_from_slice(&src[r * d + start..r * d + start + width]);
        }
        self.push(vec![n, width], out, Op::SliceCols { a, start, width })
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty(), "concat_cols with no parts");
        let n = self.shape(parts[0])[0];
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                let d = self.nodes[p.0].shape[1];
                out.extend_from_slice(&self.nodes[p.0].data[r * d..(r + 1) * d]);
            }
        }
        self.push(
            vec![n, total],
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn stack_scalars(&mut self, items: &[VarId]) -> Result<VarId> {
        if items.is_empty() {
            return Err(Error::Input("stack_scalars with no items".into()));
        }
        let data: Vec<f64> = items.iter().map(|&v| self.scalar(v)).collect();
        Ok(self.push(
            vec![items.len()],
            data,
            Op::StackScalars {
                items: items.to_vec(),
            },
        ))
    }

    /// Maximum entry of a vector node. Ties resolve to the lowest index and
    /// the subgradient routes only through the winning entry.
    pub fn max_vec(&mut self, a: VarId) -> Result<(VarId, usize)> {
        if self.nodes[a.0].shape.len() != 1 {
            return Err(Error::Dimension(format!(
                "max_vec requires a vector, got shape {:?}",
                self.shape(a)
            )));
        }
        let data = &self.nodes[a.0].data;
        let mut argmax = 0;
        let mut best = data[0];
        for (i, &v) in data.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                argmax = i;
            }
        }
        let id = self.push(vec![1], vec![best], Op::MaxVec { a, argmax });
        Ok((id, argmax))
    }

    pub fn pick(&mut self, a: VarId, index: usize) -> Result<VarId> {
        if self.nodes[a.0].shape.len() != 1 || index >= self.nodes[a.0].data.len() {
            return Err(Error::Input(format!(
                "pick index {index} invalid for shape {:?}",
                self.shape(a)
            )));
        }
        let v = self.nodes[a.0].data[index];
        Ok(self.push(vec![1], vec![v], Op::Pick { a, index }))
    }

    pub fn cosine(&mut self, u: VarId, v: VarId) -> Result<VarId> {
        if self.shape(u) != self.shape(v) || self.nodes[u.0].shape.len() != 1 {
            return Err(Error::Dimension(format!(
                "cosine requires two equal-length vectors, got {:?} and {:?}",
                self.shape(u),
                self.shape(v)
            )));
        }
        let ud = &self.nodes[u.0].data;
        let vd = &self.nodes[v.0].data;
        let nu = norm(ud);
        let nv = norm(vd);
        if nu == 0.0 || nv == 0.0 {
            return Err(Error::Degenerate(
                "cosine of a zero-norm vector".into(),
            ));
        }
        let c = super::dot(ud, vd) / (nu * nv);
        Ok(self.push(vec![1], vec![c], Op::Cosine { u, v }))
    }

    pub fn sum_scalars(&mut self, items: &[VarId]) -> Result<VarId> {
        if items.is_empty() {
            return Err(Error::Input("sum_scalars with no items".into()));
        }
        let s: f64 = items.iter().map(|&v| self.scalar(v)).sum();
        Ok(self.push(
            vec![1],
            vec![s],
            Op::SumScalars {
                items: items.to_vec(),
            },
        ))
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.push(vec![1], vec![s], Op::SumAll { a })
    }

    /// Scalar `sum_i weights[i] * a[i]` with constant weights.
    pub fn weighted_sum(&mut self, a: VarId, weights: &[f64]) -> Result<VarId> {
        if weights.len() != self.nodes[a.0].data.len() {
            return Err(Error::Dimension(format!(
                "weighted_sum needs {} weights, got {}",
                self.nodes[a.0].data.len(),
                weights.len()
            )));
        }
        let s = super::dot(&self.nodes[a.0].data, weights);
        Ok(self.push(
            vec![1],
            vec![s],
            Op::WeightedSum {
                a,
                weights: weights.to_vec(),
            },
        ))
    }

    fn rows_cols(&self, a: VarId) -> (usize, usize) {
        let s = &self.nodes[a.0].shape;
        match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => panic!("expected 1-D or 2-D node, got shape {s:?}"),
        }
    }

    // ── backward ────────────────────────────────────────────────────

    /// Accumulate gradients of every node with respect to the scalar `output`.
    pub fn backward(&mut self, output: VarId) -> Result<()> {
        if self.nodes[output.0].data.len() != 1 {
            return Err(Error::Dimension(
                "backward requires a scalar output node".into(),
            ));
        }
        for node in &mut self.nodes {
            node.grad = vec![0.0; node.data.len()];
        }
        self.nodes[output.0].grad[0] = 1.0;

        for i in (0..=output.0).rev() {
            if self.nodes[i].grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let g = std::mem::take(&mut self.nodes[i].grad);
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (n, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let p = self.nodes[b.0].shape[1];
                    // dA = G * B^T, dB = A^T * G
                    let bt = transpose_raw(&self.nodes[b.0].data, k, p);
                    let da = matmul_raw(&g, &bt, n, p, k);
                    let at = transpose_raw(&self.nodes[a.0].data, n, k);
                    let db = matmul_raw(&at, &g, k, n, p);
                    accumulate(&mut self.nodes[a.0].grad, &da);
                    accumulate(&mut self.nodes[b.0].grad, &db);
                }
                Op::Transpose { a } => {
                    let (n, p) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let da = transpose_raw(&g, p, n);
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                Op::Add { a, b } => {
                    accumulate(&mut self.nodes[a.0].grad, &g);
                    accumulate(&mut self.nodes[b.0].grad, &g);
                }
                Op::AddRow { a, bias } => {
                    accumulate(&mut self.nodes[a.0].grad, &g);
                    let d = self.nodes[bias.0].data.len();
                    let rows = g.len() / d;
                    let gb = &mut self.nodes[bias.0].grad;
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(gi, bi)| gi * bi)
                        .collect();
                    let db: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(gi, ai)| gi * ai)
                        .collect();
                    accumulate(&mut self.nodes[a.0].grad, &da);
                    accumulate(&mut self.nodes[b.0].grad, &db);
                }
                Op::Scale { a, c } => {
                    let da: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                Op::AddConst { a } => {
                    accumulate(&mut self.nodes[a.0].grad, &g);
                }
                Op::Gelu { a } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(gi, &x)| gi * gelu_tanh_deriv(x))
                        .collect();
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                Op::Exp { a } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[i].data)
                        .map(|(gi, &e)| gi * e)
                        .collect();
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                Op::Log { a } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(gi, &x)| gi / x)
                        .collect();
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                Op::LayerNorm { a, gamma, beta, eps } => {
                    let (rows, d) = self.rows_cols(a);
                    let x = self.nodes[a.0].data.clone();
                    let gm = self.nodes[gamma.0].data.clone();
                    let mut dx = vec![0.0; x.len()];
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for r in 0..rows {
                        let row = &x[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> =
                            row.iter().map(|v| (v - mean) * inv_std).collect();
                        let dxhat: Vec<f64> =
                            grow.iter().zip(&gm).map(|(gi, gmj)| gi * gmj).collect();
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let df = d as f64;
                        for j in 0..d {
                            dgamma[j] += grow[j] * xhat[j];
                            dbeta[j] += grow[j];
                            dx[r * d + j] = inv_std / df
                                * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    accumulate(&mut self.nodes[a.0].grad, &dx);
                    accumulate(&mut self.nodes[gamma.0].grad, &dgamma);
                    accumulate(&mut self.nodes[beta.0].grad, &dbeta);
                }
                Op::Softmax { a } => {
                    let (rows, d) = self.rows_cols(a);
                    let s = &self.nodes[i].data;
                    let mut da = vec![0.0; s.len()];
                    for r in 0..rows {
                        let srow = &s[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let dot: f64 = srow.iter().zip(grow).map(|(si, gi)| si * gi).sum();
                        for j in 0..d {
                            da[r * d + j] = srow[j] * (grow[j] - dot);
                        }
                    }
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                Op::CausalSoftmax { a } => {
                    let n = self.nodes[a.0].shape[0];
                    let s = &self.nodes[i].data;
                    let mut da = vec![0.0; s.len()];
                    for r in 0..n {
                        let srow = &s[r * n..r * n + r + 1];
                        let grow = &g[r * n..r * n + r + 1];
                        let dot: f64 = srow.iter().zip(grow).map(|(si, gi)| si * gi).sum();
                        for j in 0..=r {
                            da[r * n + j] = srow[j] * (grow[j] - dot);
                        }
                    }
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                Op::LogSoftmax { a } => {
                    let y = &self.nodes[i].data;
                    let gsum: f64 = g.iter().sum();
                    let da: Vec<f64> = g
                        .iter()
                        .zip(y)
                        .map(|(gi, &yi)| gi - yi.exp() * gsum)
                        .collect();
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                Op::Gather { table, ids } => {
                    let d = self.nodes[table.0].shape[1];
                    let gt = &mut self.nodes[table.0].grad;
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                }
                Op::Row { a, index } => {
                    let d = g.len();
                    let ga = &mut self.nodes[a.0].grad;
                    for j in 0..d {
                        ga[index * d + j] += g[j];
                    }
                }
                Op::SliceCols { a, start, width } => {
                    let d = self.nodes[a.0].shape[1];
                    let rows = g.len() / width;
                    let ga = &mut self.nodes[a.0].grad;
                    for r in 0..rows {
                        for j in 0..width {
                            ga[r * d + start + j] += g[r * width + j];
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let rows = self.nodes[i].shape[0];
                    let total = self.nodes[i].shape[1];
                    let mut offset = 0;
                    for &p in &parts {
                        let d = self.nodes[p.0].shape[1];
                        let gp = &mut self.nodes[p.0].grad;
                        for r in 0..rows {
                            for j in 0..d {
                                gp[r * d + j] += g[r * total + offset + j];
                            }
                        }
                        offset += d;
                    }
                }
                Op::StackScalars { items } => {
                    for (j, &item) in items.iter().enumerate() {
                        self.nodes[item.0].grad[0] += g[j];
                    }
                }
                Op::MaxVec { a, argmax } => {
                    self.nodes[a.0].grad[argmax] += g[0];
                }
                Op::Pick { a, index } => {
                    self.nodes[a.0].grad[index] += g[0];
                }
                Op::Cosine { u, v } => {
                    let ud = &self.nodes[u.0].data;
                    let vd = &self.nodes[v.0].data;
                    let nu = norm(ud);
                    let nv = norm(vd);
                    let c = self.nodes[i].data[0];
                    let g0 = g[0];
                    let du: Vec<f64> = ud
                        .iter()
                        .zip(vd)
                        .map(|(&ui, &vi)| g0 * (vi / (nu * nv) - c * ui / (nu * nu)))
                        .collect();
                    let dv: Vec<f64> = ud
                        .iter()
                        .zip(vd)
                        .map(|(&ui, &vi)| g0 * (ui / (nu * nv) - c * vi / (nv * nv)))
                        .collect();
                    accumulate(&mut self.nodes[u.0].grad, &du);
                    accumulate(&mut self.nodes[v.0].grad, &dv);
                }
                Op::SumScalars { items } => {
                    for &item in &items {
                        self.nodes[item.0].grad[0] += g[0];
                    }
                }
                Op::SumAll { a } => {
                    let ga = &mut self.nodes[a.0].grad;
                    for v in ga.iter_mut() {
                        *v += g[0];
                    }
                }
                Op::WeightedSum { a, weights } => {
                    let ga = &mut self.nodes[a.0].grad;
                    for (j, w) in weights.iter().enumerate() {
                        ga[j] += g[0] * w;
                    }
                }
            }
            self.nodes[i].grad = g;
        }
        Ok(())
    }
}

/// Row-major `[n,k] x [k,p]` product.
pub fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * p..(i + 1) * p];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        for j in 0..p {
            out[j * n + i] = a[i * p + j];
        }
    }
    out
}

fn accumulate(target: &mut [f64], src: &[f64]) {
    debug_assert_eq!(target.len(), src.len());
    for (t, s) in target.iter_mut().zip(src) {
        *t += s;
    }
}

/// GELU, tanh approximation.
pub fn gelu_tanh(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_tanh_deriv(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.leaf(
            &Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let a = tape.leaf(
            &Tensor::matrix(3, 3, vec![2.0, -1.0, 0.5, 3.0, 4.0, -2.0, 0.0, 1.0, 7.0]).unwrap(),
        );
        let prod = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(prod), tape.value(a));
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(&Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(vec![2, 3]).unwrap());
        let b = tape.leaf(&Tensor::zeros(vec![2, 3]).unwrap());
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "unexpected message: {msg}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap());
        let s = tape.softmax(a, 1).unwrap();
        let out = tape.value(s);
        assert!((out[0..3].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((out[3..6].iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_invalid_axis() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::vector(&[1.0, 2.0]).unwrap());
        assert!(tape.softmax(a, 1).is_err());
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::new();
        let a = tape.leaf(
            &Tensor::matrix(3, 3, vec![5.0, 9.0, 9.0, 1.0, 1.0, 9.0, 0.0, 1.0, 2.0]).unwrap(),
        );
        let s = tape.causal_softmax(a).unwrap();
        let out = tape.value(s);
        assert_eq!(out[0], 1.0); // row 0 sees only itself
        assert_eq!(out[1], 0.0);
        assert_eq!(out[2], 0.0);
        assert_eq!(out[5], 0.0); // row 1 must not see column 2
        assert!((out[3] - 0.5).abs() < 1e-12);
        assert!((out[6..9].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_is_beta() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(&[3.0, 3.0, 3.0, 3.0]).unwrap());
        let gamma = tape.leaf(&Tensor::vector(&[1.0; 4]).unwrap());
        let beta = tape.leaf(&Tensor::vector(&[0.0; 4]).unwrap());
        let y = tape.layer_norm(x, gamma, beta, 1e-5);
        for &v in tape.value(y) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn gelu_zero_is_zero() {
        assert_eq!(gelu_tanh(0.0), 0.0);
    }

    #[test]
    fn gather_returns_rows() {
        let mut tape = Tape::new();
        let table = tape.leaf(&Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let out = tape.gather(table, &[2, 0]).unwrap();
        assert_eq!(tape.value(out), &[5.0, 6.0, 1.0, 2.0]);
    }

    #[test]
    fn max_vec_tie_breaks_low() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::vector(&[0.5, 0.5, 0.5]).unwrap());
        let (m, argmax) = tape.max_vec(a).unwrap();
        assert_eq!(tape.scalar(m), 0.5);
        assert_eq!(argmax, 0);
        let b = tape.leaf(&Tensor::vector(&[0.1, 0.5, 0.3]).unwrap());
        let (m2, arg2) = tape.max_vec(b).unwrap();
        assert_eq!(tape.scalar(m2), 0.5);
        assert_eq!(arg2, 1);
    }

    #[test]
    fn backward_through_max_routes_to_argmax_only() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::vector(&[0.1, 0.9, 0.3]).unwrap());
        let (m, _) = tape.max_vec(a).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(a), &[0.0, 1.0, 0.0]);
    }

    #[test]
    #[allow(clippy::approx_constant)] // frozen hand-computed fixture
    fn cosine_on_tape_matches_value_level() {
        let mut tape = Tape::new();
        let u = tape.leaf(&Tensor::vector(&[1.0, 1.0]).unwrap());
        let v = tape.leaf(&Tensor::vector(&[1.0, 0.0]).unwrap());
        let c = tape.cosine(u, v).unwrap();
        assert!((tape.scalar(c) - 0.70711).abs() < 1e-5);
    }
}
