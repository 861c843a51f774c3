//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A forward pass appends nodes to the tape; each node stores its value,
//! its parent ids, and a closure that maps the upstream gradient to
//! per-parent gradient contributions. `backward` walks the tape in reverse
//! (the append order is already topological). Tapes are single-threaded
//! and rebuilt for every forward pass.

use super::tensor::Tensor;
use super::{NumericsError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

type BackFn = Box<dyn Fn(&Tensor, &Tape, &[NodeId]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<NodeId>,
    back: Option<BackFn>,
    needs_grad: bool,
}

/// Recorded computation graph for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, parents: Vec<NodeId>, back: Option<BackFn>) -> NodeId {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, parents, back, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf node; `needs_grad` marks trainable leaves.
    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, parents: Vec::new(), back: None, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient (inputs, masks, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// Reverse pass from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: NodeId) -> Result<Grads> {
        let root_val = self.value(root);
        if root_val.numel() != 1 {
            return Err(NumericsError::ShapeMismatch {
                op: "backward",
                detail: format!("root must be scalar, got shape {:?}", root_val.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad && node.back.is_some() {
                continue;
            }
            let Some(g) = grads[i].as_ref() else { continue };
            let Some(back) = &node.back else { continue };
            let contribs = back(g, self, &node.parents);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (pid, contrib) in node.parents.iter().zip(contribs) {
                if !self.nodes[pid.0].needs_grad {
                    continue;
                }
                if let Some(c) = contrib {
                    match &mut grads[pid.0] {
                        Some(acc) => acc.accumulate(&c),
                        slot => *slot = Some(c),
                    }
                }
            }
        }
        Ok(Grads { grads })
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, vec![a, b], Some(Box::new(|g, _, _| {
            vec![Some(g.clone()), Some(g.clone())]
        }))))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, vec![a, b], Some(Box::new(|g, _, _| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        }))))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, vec![a, b], Some(Box::new(|g, tape, ps| {
            let (va, vb) = (tape.value(ps[0]), tape.value(ps[1]));
            let da = g.data().iter().zip(vb.data()).map(|(gi, bi)| gi * bi).collect();
            let db = g.data().iter().zip(va.data()).map(|(gi, ai)| gi * ai).collect();
            vec![
                Some(Tensor::new(va.shape().to_vec(), da).unwrap()),
                Some(Tensor::new(vb.shape().to_vec(), db).unwrap()),
            ]
        }))))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|v| v * c);
        self.push(value, vec![a], Some(Box::new(move |g, _, _| vec![Some(g.map(|v| v * c))])))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|v| v + c);
        self.push(value, vec![a], Some(Box::new(|g, _, _| vec![Some(g.clone())])))
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        let value = self.value(a).map(gelu_scalar);
        self.push(value, vec![a], Some(Box::new(|g, tape, ps| {
            let x = tape.value(ps[0]);
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(gi, &xi)| {
                    let u = C * (xi + 0.044715 * xi * xi * xi);
                    let t = u.tanh();
                    let du = C * (1.0 + 3.0 * 0.044715 * xi * xi);
                    gi * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du)
                })
                .collect();
            vec![Some(Tensor::new(x.shape().to_vec(), data).unwrap())]
        })))
    }

    // ---- linear algebra ----

    /// Standard matrix product `[m x k] . [k x n] -> [m x n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} . {:?}", ta.shape(), tb.shape()),
            });
        }
        let value = matmul_raw(ta, tb);
        Ok(self.push(value, vec![a, b], Some(Box::new(|g, tape, ps| {
            let (va, vb) = (tape.value(ps[0]), tape.value(ps[1]));
            // dA = g . B^T ; dB = A^T . g
            let da = matmul_nt(g, vb);
            let db = matmul_tn(va, g);
            vec![Some(da), Some(db)]
        }))))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "transpose",
                detail: format!("rank {} tensor", ta.rank()),
            });
        }
        let value = transpose_raw(ta);
        Ok(self.push(value, vec![a], Some(Box::new(|g, _, _| vec![Some(transpose_raw(g))]))))
    }

    /// Adds a length-`n` bias vector to every row of an `[m x n]` matrix.
    pub fn add_row_vector(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.rank() != 2 || tb.rank() != 1 || tx.cols() != tb.numel() {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row_vector",
                detail: format!("{:?} + {:?}", tx.shape(), tb.shape()),
            });
        }
        let n = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % n])
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, vec![x, b], Some(Box::new(move |g, _, _| {
            let mut db = vec![0.0; n];
            for (i, gi) in g.data().iter().enumerate() {
                db[i % n] += gi;
            }
            vec![Some(g.clone()), Some(Tensor::vector(db))]
        }))))
    }

    /// Multiplies row `i` of an `[m x n]` matrix by `s[i]`.
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (tx, ts) = (self.value(x), self.value(s));
        if tx.rank() != 2 || ts.rank() != 1 || tx.rows() != ts.numel() {
            return Err(NumericsError::ShapeMismatch {
                op: "scale_rows",
                detail: format!("{:?} x {:?}", tx.shape(), ts.shape()),
            });
        }
        let n = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * ts.data()[i / n])
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, vec![x, s], Some(Box::new(move |g, tape, ps| {
            let (vx, vs) = (tape.value(ps[0]), tape.value(ps[1]));
            let dx = g
                .data()
                .iter()
                .enumerate()
                .map(|(i, gi)| gi * vs.data()[i / n])
                .collect();
            let mut ds = vec![0.0; vs.numel()];
            for (i, gi) in g.data().iter().enumerate() {
                ds[i / n] += gi * vx.data()[i];
            }
            vec![
                Some(Tensor::new(vx.shape().to_vec(), dx).unwrap()),
                Some(Tensor::vector(ds)),
            ]
        }))))
    }

    /// Divides row `i` of an `[m x n]` matrix by `s[i]`.
    pub fn div_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (tx, ts) = (self.value(x), self.value(s));
        if tx.rank() != 2 || ts.rank() != 1 || tx.rows() != ts.numel() {
            return Err(NumericsError::ShapeMismatch {
                op: "div_rows",
                detail: format!("{:?} / {:?}", tx.shape(), ts.shape()),
            });
        }
        let n = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v / ts.data()[i / n])
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, vec![x, s], Some(Box::new(move |g, tape, ps| {
            let (vx, vs) = (tape.value(ps[0]), tape.value(ps[1]));
            let dx = g
                .data()
                .iter()
                .enumerate()
                .map(|(i, gi)| gi / vs.data()[i / n])
                .collect();
            let mut ds = vec![0.0; vs.numel()];
            for (i, gi) in g.data().iter().enumerate() {
                let r = i / n;
                let si = vs.data()[r];
                ds[r] -= gi * vx.data()[i] / (si * si);
            }
            vec![
                Some(Tensor::new(vx.shape().to_vec(), dx).unwrap()),
                Some(Tensor::vector(ds)),
            ]
        }))))
    }

    /// Per-row Euclidean norm of an `[m x n]` matrix, yielding `[m]`.
    pub fn row_l2norm(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "row_l2norm",
                detail: format!("rank {} tensor", tx.rank()),
            });
        }
        let n = tx.cols();
        let norms: Vec<f64> = tx
            .data()
            .chunks(n)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let value = Tensor::vector(norms);
        Ok(self.push(value, vec![x], Some(Box::new(move |g, tape, ps| {
            let vx = tape.value(ps[0]);
            let norms: Vec<f64> = vx
                .data()
                .chunks(n)
                .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30))
                .collect();
            let dx = vx
                .data()
                .iter()
                .enumerate()
                .map(|(i, xi)| g.data()[i / n] * xi / norms[i / n])
                .collect();
            vec![Some(Tensor::new(vx.shape().to_vec(), dx).unwrap())]
        }))))
    }

    // ---- shape plumbing ----

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let ta = self.value(a);
        let old_shape = ta.shape().to_vec();
        let value = ta.clone().reshaped(shape)?;
        Ok(self.push(value, vec![a], Some(Box::new(move |g, _, _| {
            vec![Some(g.clone().reshaped(old_shape.clone()).unwrap())]
        }))))
    }

    /// Zero-pads a 1-D tensor on the right to `len`.
    pub fn pad_to_len(&mut self, a: NodeId, len: usize) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.rank() != 1 || ta.numel() > len {
            return Err(NumericsError::ShapeMismatch {
                op: "pad_to_len",
                detail: format!("{:?} -> length {}", ta.shape(), len),
            });
        }
        let orig = ta.numel();
        let mut data = ta.data().to_vec();
        data.resize(len, 0.0);
        Ok(self.push(Tensor::vector(data), vec![a], Some(Box::new(move |g, _, _| {
            vec![Some(Tensor::vector(g.data()[..orig].to_vec()))]
        }))))
    }

    /// Appends zero rows to an `[r x c]` matrix until it has `target` rows.
    pub fn pad_rows_to(&mut self, a: NodeId, target: usize) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.rank() != 2 || ta.rows() > target {
            return Err(NumericsError::ShapeMismatch {
                op: "pad_rows_to",
                detail: format!("{:?} -> {} rows", ta.shape(), target),
            });
        }
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = ta.data().to_vec();
        data.resize(target * c, 0.0);
        let value = Tensor::new(vec![target, c], data)?;
        Ok(self.push(value, vec![a], Some(Box::new(move |g, _, _| {
            let dg = Tensor::new(vec![r, c], g.data()[..r * c].to_vec()).unwrap();
            vec![Some(dg)]
        }))))
    }

    /// Rows `r0..r1` of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: NodeId, r0: usize, r1: usize) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.rank() != 2 || r0 > r1 || r1 > ta.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "slice_rows",
                detail: format!("{:?} rows {}..{}", ta.shape(), r0, r1),
            });
        }
        let (rows, c) = (ta.rows(), ta.cols());
        let value = Tensor::new(vec![r1 - r0, c], ta.data()[r0 * c..r1 * c].to_vec())?;
        Ok(self.push(value, vec![a], Some(Box::new(move |g, _, _| {
            let mut dx = vec![0.0; rows * c];
            dx[r0 * c..r1 * c].copy_from_slice(g.data());
            vec![Some(Tensor::new(vec![rows, c], dx).unwrap())]
        }))))
    }

    /// Columns `c0..c1` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: NodeId, c0: usize, c1: usize) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.rank() != 2 || c0 > c1 || c1 > ta.cols() {
            return Err(NumericsError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("{:?} cols {}..{}", ta.shape(), c0, c1),
            });
        }
        let (r, c) = (ta.rows(), ta.cols());
        let w = c1 - c0;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&ta.data()[i * c + c0..i * c + c1]);
        }
        let value = Tensor::new(vec![r, w], data)?;
        Ok(self.push(value, vec![a], Some(Box::new(move |g, _, _| {
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                dx[i * c + c0..i * c + c1].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
            }
            vec![Some(Tensor::new(vec![r, c], dx).unwrap())]
        }))))
    }

    /// Vertically stacks rank-2 tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(NumericsError::ShapeMismatch {
                op: "concat_rows",
                detail: "no parts".into(),
            });
        }
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut row_counts = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.cols() != c {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("expected {} cols, got {:?}", c, t.shape()),
                });
            }
            row_counts.push(t.rows());
            data.extend_from_slice(t.data());
        }
        let total: usize = row_counts.iter().sum();
        let value = Tensor::new(vec![total, c], data)?;
        Ok(self.push(value, parts.to_vec(), Some(Box::new(move |g, _, _| {
            let mut out = Vec::with_capacity(row_counts.len());
            let mut offset = 0;
            for &r in &row_counts {
                let part = Tensor::new(vec![r, c], g.data()[offset * c..(offset + r) * c].to_vec()).unwrap();
                out.push(Some(part));
                offset += r;
            }
            out
        }))))
    }

    /// Horizontally stacks rank-2 tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(NumericsError::ShapeMismatch {
                op: "concat_cols",
                detail: "no parts".into(),
            });
        }
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.rows() != r {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("expected {} rows, got {:?}", r, t.shape()),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let t = self.value(p);
                let w = t.cols();
                data.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![r, total], data)?;
        Ok(self.push(value, parts.to_vec(), Some(Box::new(move |g, _, _| {
            let mut out: Vec<Option<Tensor>> = Vec::with_capacity(widths.len());
            let mut offset = 0;
            for &w in &widths {
                let mut data = Vec::with_capacity(r * w);
                for i in 0..r {
                    data.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                }
                out.push(Some(Tensor::new(vec![r, w], data).unwrap()));
                offset += w;
            }
            out
        }))))
    }

    /// Looks up rows of an embedding table `[V x d]` by id, yielding `[ids.len() x d]`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "gather_rows",
                detail: format!("table rank {}", tt.rank()),
            });
        }
        let (v, d) = (tt.rows(), tt.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(NumericsError::ShapeMismatch {
                op: "gather_rows",
                detail: format!("id {} out of range (table has {} rows)", bad, v),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let ids = ids.to_vec();
        Ok(self.push(value, vec![table], Some(Box::new(move |g, _, _| {
            let mut dt = vec![0.0; v * d];
            for (row, &i) in ids.iter().enumerate() {
                for j in 0..d {
                    dt[i * d + j] += g.data()[row * d + j];
                }
            }
            vec![Some(Tensor::new(vec![v, d], dt).unwrap())]
        }))))
    }

    // ---- nonlinear blocks ----

    /// Numerically stable softmax along `axis`; slices along that axis sum to 1.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let ta = self.value(a);
        if axis >= ta.rank() {
            return Err(NumericsError::ShapeMismatch {
                op: "softmax",
                detail: format!("axis {} for shape {:?}", axis, ta.shape()),
            });
        }
        let value = softmax_raw(ta, axis);
        Ok(self.push(value, vec![a], Some(Box::new(move |g, tape, ps| {
            // y is this node's value; recompute from the parent to stay
            // independent of node bookkeeping.
            let y = softmax_raw(tape.value(ps[0]), axis);
            let (outer, alen, inner) = axis_split(y.shape(), axis);
            let mut dx = vec![0.0; y.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let mut dot = 0.0;
                    for k in 0..alen {
                        let idx = (o * alen + k) * inner + i;
                        dot += g.data()[idx] * y.data()[idx];
                    }
                    for k in 0..alen {
                        let idx = (o * alen + k) * inner + i;
                        dx[idx] = y.data()[idx] * (g.data()[idx] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(y.shape().to_vec(), dx).unwrap())]
        }))))
    }

    /// Per-row layer normalisation over the last dimension with affine output.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        const EPS: f64 = 1e-5;
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = *tx.shape().last().ok_or(NumericsError::ShapeMismatch {
            op: "layer_norm",
            detail: "rank-0 input".into(),
        })?;
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("input {:?}, gain {:?}, bias {:?}", tx.shape(), tg.shape(), tb.shape()),
            });
        }
        let rows = tx.numel() / d;
        let mut data = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * inv * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, vec![x, gain, bias], Some(Box::new(move |g, tape, ps| {
            let (vx, vg) = (tape.value(ps[0]), tape.value(ps[1]));
            let rows = vx.numel() / d;
            let mut dx = vec![0.0; vx.numel()];
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            for r in 0..rows {
                let row = &vx.data()[r * d..(r + 1) * d];
                let grow = &g.data()[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + EPS).sqrt();
                // xhat_j = (x_j - mean) * inv
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for j in 0..d {
                    let xhat = (row[j] - mean) * inv;
                    let dxhat = grow[j] * vg.data()[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    dgain[j] += grow[j] * xhat;
                    dbias[j] += grow[j];
                }
                let dn = d as f64;
                for j in 0..d {
                    let xhat = (row[j] - mean) * inv;
                    let dxhat = grow[j] * vg.data()[j];
                    dx[r * d + j] = inv * (dxhat - sum_dxhat / dn - xhat * sum_dxhat_xhat / dn);
                }
            }
            vec![
                Some(Tensor::new(vx.shape().to_vec(), dx).unwrap()),
                Some(Tensor::vector(dgain)),
                Some(Tensor::vector(dbias)),
            ]
        }))))
    }

    /// Replaces entries above the diagonal of an `[L x L]` score matrix with a
    /// large negative constant, so a subsequent row softmax zeroes them.
    pub fn causal_mask(&mut self, a: NodeId) -> Result<NodeId> {
        const NEG: f64 = -1e30;
        let ta = self.value(a);
        if ta.rank() != 2 || ta.rows() != ta.cols() {
            return Err(NumericsError::ShapeMismatch {
                op: "causal_mask",
                detail: format!("{:?} not square", ta.shape()),
            });
        }
        let l = ta.rows();
        let mut data = ta.data().to_vec();
        for i in 0..l {
            for j in (i + 1)..l {
                data[i * l + j] = NEG;
            }
        }
        let value = Tensor::new(vec![l, l], data)?;
        Ok(self.push(value, vec![a], Some(Box::new(move |g, _, _| {
            let mut dx = g.data().to_vec();
            for i in 0..l {
                for j in (i + 1)..l {
                    dx[i * l + j] = 0.0;
                }
            }
            vec![Some(Tensor::new(vec![l, l], dx).unwrap())]
        }))))
    }

    // ---- reductions and losses ----

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let value = Tensor::scalar(ta.data().iter().sum());
        self.push(value, vec![a], Some(Box::new(|g, tape, ps| {
            let shape = tape.value(ps[0]).shape().to_vec();
            let gv = g.item();
            let n: usize = shape.iter().product();
            vec![Some(Tensor::new(shape, vec![gv; n]).unwrap())]
        })))
    }

    /// Mean negative log-likelihood of `targets` under row softmax of
    /// `logits`, averaged over positions where `mask` is true.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], mask: &[bool]) -> Result<NodeId> {
        let tl = self.value(logits);
        if tl.rank() != 2 || tl.rows() != targets.len() || targets.len() != mask.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("logits {:?}, {} targets, {} mask", tl.shape(), targets.len(), mask.len()),
            });
        }
        let v = tl.cols();
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("target id {} out of range {}", bad, v),
            });
        }
        let n_masked = mask.iter().filter(|&&m| m).count();
        if n_masked == 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                detail: "empty mask".into(),
            });
        }
        let mut loss = 0.0;
        for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            let row = &tl.data()[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        loss /= n_masked as f64;
        let targets = targets.to_vec();
        let mask = mask.to_vec();
        let value = Tensor::scalar(loss);
        Ok(self.push(value, vec![logits], Some(Box::new(move |g, tape, ps| {
            let vl = tape.value(ps[0]);
            let v = vl.cols();
            let scale = g.item() / n_masked as f64;
            let mut dl = vec![0.0; vl.numel()];
            for (i, (&t, &m)) in targets.iter().zip(&mask).enumerate() {
                if !m {
                    continue;
                }
                let row = &vl.data()[i * v..(i + 1) * v];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for j in 0..v {
                    let p = exps[j] / z;
                    dl[i * v + j] = scale * (p - if j == t { 1.0 } else { 0.0 });
                }
            }
            vec![Some(Tensor::new(vl.shape().to_vec(), dl).unwrap())]
        }))))
    }
}

/// Non-overlapping 1-D convolution: stride = kernel = `patch`, the final
/// partial window zero-padded on the right. `weights` is `[d_out x patch]`,
/// `bias` is `[d_out]`; output is `[ceil(T / patch) x d_out]`.
pub fn conv1d_patch(
    tape: &mut Tape,
    signal: NodeId,
    patch: usize,
    weights: NodeId,
    bias: NodeId,
) -> Result<NodeId> {
    let ts = tape.value(signal);
    if ts.rank() != 1 || patch == 0 {
        return Err(NumericsError::ShapeMismatch {
            op: "conv1d_patch",
            detail: format!("signal {:?}, patch {}", ts.shape(), patch),
        });
    }
    let tw = tape.value(weights);
    if tw.rank() != 2 || tw.cols() != patch {
        return Err(NumericsError::ShapeMismatch {
            op: "conv1d_patch",
            detail: format!("weights {:?} for patch {}", tw.shape(), patch),
        });
    }
    let t = ts.numel();
    let rows = t.div_ceil(patch);
    let padded = tape.pad_to_len(signal, rows * patch)?;
    let windows = tape.reshape(padded, vec![rows, patch])?;
    let wt = tape.transpose(weights)?;
    let projected = tape.matmul(windows, wt)?;
    tape.add_row_vector(projected, bias)
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(NumericsError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data()[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data()[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// `a . b^T`
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = b.rows();
    debug_assert_eq!(b.cols(), k);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data()[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data()[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// `a^T . b`
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = (a.rows(), a.cols());
    let n = b.cols();
    debug_assert_eq!(b.rows(), k);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data()[p * m..(p + 1) * m];
        let brow = &b.data()[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

fn transpose_raw(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).unwrap()
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let alen = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, alen, inner)
}

fn softmax_raw(x: &Tensor, axis: usize) -> Tensor {
    let (outer, alen, inner) = axis_split(x.shape(), axis);
    let mut data = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * alen + k) * inner + i;
            let mut max = f64::NEG_INFINITY;
            for k in 0..alen {
                max = max.max(x.data()[idx(k)]);
            }
            let mut z = 0.0;
            for k in 0..alen {
                let e = (x.data()[idx(k)] - max).exp();
                data[idx(k)] = e;
                z += e;
            }
            for k in 0..alen {
                data[idx(k)] /= z;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), data).unwrap()
}
