//! Reverse-mode differentiation over a per-operation tape.
//!
//! Each recorded node holds its forward value. [`Tape::backward`] walks the
//! nodes in reverse and returns one gradient slot per bound parameter group.

use super::matrix::gemm;
use super::{Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Elementwise or row-wise activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Sigmoid,
    Tanh,
    /// Row-wise softmax.
    Softmax,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Applies `kind` to `x`; softmax works row by row with max subtraction.
pub fn activation_forward(x: &Matrix, kind: Activation) -> Matrix {
    match kind {
        Activation::Identity => x.clone(),
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Tanh => x.map(f64::tanh),
        Activation::Softmax => {
            let mut out = x.clone();
            for r in 0..out.rows() {
                let row = out.row_mut(r);
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
            out
        }
    }
}

/// `x·W + b` for a batch of row vectors.
pub fn affine_forward(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    if x.cols() != w.rows() {
        return Err(Error::shape("affine_forward", x.shape(), w.shape()));
    }
    if b.rows() != 1 || b.cols() != w.cols() {
        return Err(Error::shape("affine_forward bias", w.shape(), b.shape()));
    }
    let mut out = x.matmul(w)?;
    out.add_row_broadcast(b)?;
    Ok(out)
}

enum Value<'a> {
    Owned(Matrix),
    Borrowed(&'a Matrix),
}

impl Value<'_> {
    fn get(&self) -> &Matrix {
        match self {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }
}

enum Op {
    Input,
    Param(ParamId),
    Affine { x: NodeId, w: NodeId, b: Option<NodeId> },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Act(NodeId, Activation),
    Concat(Vec<NodeId>),
    Slice { a: NodeId, start: usize },
    BlockScale { x: NodeId, weights: NodeId, blocks: Vec<(usize, usize)> },
    WeightedSqErr { pred: NodeId, target: Matrix, weights: Matrix },
    MaskedSqDiff { a: NodeId, b: NodeId, mask: Vec<f64> },
    Scale(NodeId, f64),
    Sum(Vec<NodeId>),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<Option<Matrix>>,
}

/// Parameter nodes bound on a tape, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<NodeId>);

impl std::ops::Index<ParamId> for Bound {
    type Output = NodeId;
    fn index(&self, id: ParamId) -> &NodeId {
        &self.0[id.0]
    }
}

/// A recording of one forward computation.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    n_params: usize,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), n_params: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value: Value::Owned(value), op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        self.nodes[id.0].value.get()
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).get(0, 0)
    }

    /// Records every group of `store` as a parameter leaf without copying.
    pub fn bind(&mut self, store: &'a ParamStore) -> Bound {
        self.n_params = self.n_params.max(store.len());
        let ids = store
            .groups()
            .iter()
            .enumerate()
            .map(|(i, g)| {
                self.nodes.push(Node { value: Value::Borrowed(&g.value), op: Op::Param(ParamId(i)) });
                NodeId(self.nodes.len() - 1)
            })
            .collect();
        Bound(ids)
    }

    /// Constant leaf.
    pub fn input(&mut self, m: Matrix) -> NodeId {
        self.push(m, Op::Input)
    }

    /// Constant leaf borrowed from the caller.
    pub fn input_ref(&mut self, m: &'a Matrix) -> NodeId {
        self.nodes.push(Node { value: Value::Borrowed(m), op: Op::Input });
        NodeId(self.nodes.len() - 1)
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let out = {
            let (xv, wv) = (self.value(x), self.value(w));
            match b {
                Some(b) => affine_forward(xv, wv, self.value(b))?,
                None => xv.matmul(wv)?,
            }
        };
        Ok(self.push(out, Op::Affine { x, w, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn activation(&mut self, a: NodeId, kind: Activation) -> NodeId {
        if kind == Activation::Identity {
            return a;
        }
        let v = activation_forward(self.value(a), kind);
        self.push(v, Op::Act(a, kind))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.activation(a, Activation::Tanh)
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.activation(a, Activation::Softmax)
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let v = {
            let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
            Matrix::hstack(&mats)?
        };
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    /// Columns `[start, start + len)`.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let src = self.value(a);
        if start + len > src.cols() {
            return Err(Error::Dimension(format!(
                "slice [{start}, {}) out of range for {}x{}",
                start + len,
                src.rows(),
                src.cols()
            )));
        }
        let v = src.col_slice(start, len);
        Ok(self.push(v, Op::Slice { a, start }))
    }

    /// Multiplies every column of block `k` of `x` by `weights[:, k]`.
    pub fn block_scale(&mut self, x: NodeId, weights: NodeId, blocks: &[(usize, usize)]) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(weights));
        if wv.rows() != xv.rows() || wv.cols() != blocks.len() {
            return Err(Error::shape("block_scale", xv.shape(), wv.shape()));
        }
        if let Some(&(o, w)) = blocks.iter().find(|&&(o, w)| o + w > xv.cols()) {
            return Err(Error::Dimension(format!("block ({o}, {w}) exceeds {} columns", xv.cols())));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (k, &(off, width)) in blocks.iter().enumerate() {
                let a = wv.get(r, k);
                for v in &mut out.row_mut(r)[off..off + width] {
                    *v *= a;
                }
            }
        }
        Ok(self.push(out, Op::BlockScale { x, weights, blocks: blocks.to_vec() }))
    }

    /// `Σ weights ⊙ (pred − target)²` as a `1 × 1` node. `weights` has the
    /// shape of `pred` and carries both channel weights and padding masks.
    pub fn weighted_sq_err(&mut self, pred: NodeId, target: Matrix, weights: Matrix) -> Result<NodeId> {
        let p = self.value(pred);
        if p.shape() != target.shape() || p.shape() != weights.shape() {
            return Err(Error::shape("weighted_sq_err", p.shape(), target.shape()));
        }
        let total: f64 = p
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .zip(weights.as_slice())
            .map(|((p, t), w)| w * (p - t) * (p - t))
            .sum();
        Ok(self.push(Matrix::filled(1, 1, total), Op::WeightedSqErr { pred, target, weights }))
    }

    /// `Σ_r mask[r] · ‖a_r − b_r‖²` as a `1 × 1` node.
    pub fn masked_sq_diff(&mut self, a: NodeId, b: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || mask.len() != av.rows() {
            return Err(Error::shape("masked_sq_diff", av.shape(), bv.shape()));
        }
        let mut total = 0.0;
        for (r, &m) in mask.iter().enumerate() {
            if m != 0.0 {
                let d: f64 = av.row(r).iter().zip(bv.row(r)).map(|(x, y)| (x - y) * (x - y)).sum();
                total += m * d;
            }
        }
        Ok(self.push(Matrix::filled(1, 1, total), Op::MaskedSqDiff { a, b, mask }))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).scale(k);
        self.push(v, Op::Scale(a, k))
    }

    /// Sum of same-shaped nodes.
    pub fn sum(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| Error::State("sum of zero nodes".into()))?;
        let mut acc = self.value(*first).clone();
        for &p in &parts[1..] {
            acc.add_assign(self.value(p))?;
        }
        Ok(self.push(acc, Op::Sum(parts.to_vec())))
    }

    /// Backpropagates from a scalar root with seed gradient 1.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        self.backward_with_seed(root, Matrix::filled(1, 1, 1.0))
    }

    pub fn backward_with_seed(&self, root: NodeId, seed: Matrix) -> Result<Gradients> {
        if self.nodes.is_empty() || root.0 >= self.nodes.len() {
            return Err(Error::State("backward called before a forward pass was recorded".into()));
        }
        if self.value(root).shape() != seed.shape() {
            return Err(Error::shape("backward seed", self.value(root).shape(), seed.shape()));
        }
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(seed);
        let mut params: Vec<Option<Matrix>> = vec![None; self.n_params];

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => accumulate(&mut params[pid.0], g),
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    if self.needs_grad(*x) {
                        gemm_into(&mut grads[x.0], &g, false, wv, true, xv.shape());
                    }
                    if self.needs_grad(*w) {
                        gemm_into(&mut grads[w.0], xv, true, &g, false, wv.shape());
                    }
                    if let Some(b) = b {
                        accumulate(&mut grads[b.0], g.col_sums());
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Mul(a, b) => {
                    let da = g.hadamard(self.value(*b))?;
                    let db = g.hadamard(self.value(*a))?;
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Act(a, kind) => {
                    let y = node.value.get();
                    let da = match kind {
                        Activation::Identity => g,
                        Activation::Sigmoid => {
                            Matrix::from_fn(y.rows(), y.cols(), |r, c| {
                                let s = y.get(r, c);
                                g.get(r, c) * s * (1.0 - s)
                            })
                        }
                        Activation::Tanh => Matrix::from_fn(y.rows(), y.cols(), |r, c| {
                            let t = y.get(r, c);
                            g.get(r, c) * (1.0 - t * t)
                        }),
                        Activation::Softmax => {
                            let mut out = Matrix::zeros(y.rows(), y.cols());
                            for r in 0..y.rows() {
                                let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                                for c in 0..y.cols() {
                                    out.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                                }
                            }
                            out
                        }
                    };
                    accumulate(&mut grads[a.0], da);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        accumulate(&mut grads[p.0], g.col_slice(off, w));
                        off += w;
                    }
                }
                Op::Slice { a, start } => {
                    let src = self.value(*a);
                    let slot = grads[a.0].get_or_insert_with(|| Matrix::zeros(src.rows(), src.cols()));
                    for r in 0..g.rows() {
                        for (d, v) in slot.row_mut(r)[*start..*start + g.cols()].iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                }
                Op::BlockScale { x, weights, blocks } => {
                    let (xv, wv) = (self.value(*x), self.value(*weights));
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    let mut dw = Matrix::zeros(wv.rows(), wv.cols());
                    for r in 0..xv.rows() {
                        for (k, &(off, width)) in blocks.iter().enumerate() {
                            let a = wv.get(r, k);
                            let mut acc = 0.0;
                            for c in off..off + width {
                                dx.set(r, c, g.get(r, c) * a);
                                acc += g.get(r, c) * xv.get(r, c);
                            }
                            dw.set(r, k, acc);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                    accumulate(&mut grads[weights.0], dw);
                }
                Op::WeightedSqErr { pred, target, weights } => {
                    let p = self.value(*pred);
                    let s = g.get(0, 0);
                    let mut d = Matrix::zeros(p.rows(), p.cols());
                    for (((d, p), t), w) in d
                        .as_mut_slice()
                        .iter_mut()
                        .zip(p.as_slice())
                        .zip(target.as_slice())
                        .zip(weights.as_slice())
                    {
                        *d = 2.0 * s * w * (p - t);
                    }
                    accumulate(&mut grads[pred.0], d);
                }
                Op::MaskedSqDiff { a, b, mask } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let s = g.get(0, 0);
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for (r, &m) in mask.iter().enumerate() {
                        if m != 0.0 {
                            for c in 0..av.cols() {
                                da.set(r, c, 2.0 * s * m * (av.get(r, c) - bv.get(r, c)));
                            }
                        }
                    }
                    let db = da.scale(-1.0);
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Scale(a, k) => accumulate(&mut grads[a.0], g.scale(*k)),
                Op::Sum(parts) => {
                    for p in parts {
                        accumulate(&mut grads[p.0], g.clone());
                    }
                }
            }
        }
        Ok(Gradients { params })
    }

    fn needs_grad(&self, id: NodeId) -> bool {
        !matches!(self.nodes[id.0].op, Op::Input)
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn gemm_into(slot: &mut Option<Matrix>, a: &Matrix, ta: bool, b: &Matrix, tb: bool, shape: (usize, usize)) {
    match slot {
        Some(existing) => gemm(a, ta, b, tb, existing, 1.0),
        None => {
            let mut out = Matrix::zeros(shape.0, shape.1);
            gemm(a, ta, b, tb, &mut out, 0.0);
            *slot = Some(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_examples() {
        let x = Matrix::row_vector(&[1.0, 2.0]);
        let eye = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let zero_b = Matrix::zeros(1, 2);
        assert_eq!(affine_forward(&x, &eye, &zero_b).unwrap().as_slice(), &[1.0, 2.0]);

        let w = Matrix::from_rows(&[vec![5.0, -1.0], vec![2.0, 7.0]]).unwrap();
        let b = Matrix::row_vector(&[3.0, 4.0]);
        assert_eq!(affine_forward(&Matrix::zeros(1, 2), &w, &b).unwrap().as_slice(), &[3.0, 4.0]);

        let w = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let b = Matrix::row_vector(&[1.0, 1.0]);
        let x = Matrix::row_vector(&[1.0, 1.0]);
        let got = affine_forward(&x, &w, &b).unwrap();
        // scalar-loop oracle
        let mut want = [0.0; 2];
        for (j, o) in want.iter_mut().enumerate() {
            *o = b.get(0, j);
            for i in 0..2 {
                *o += x.get(0, i) * w.get(i, j);
            }
        }
        assert_eq!(got.as_slice(), &want);
        assert_eq!(want, [3.0, 4.0]);
    }

    #[test]
    fn affine_shape_error_names_shapes() {
        let err = affine_forward(&Matrix::zeros(1, 3), &Matrix::zeros(2, 2), &Matrix::zeros(1, 2))
            .unwrap_err()
            .to_string();
        assert!(err.contains("1x3") && err.contains("2x2"), "{err}");
    }

    #[test]
    fn activation_examples() {
        let s = activation_forward(&Matrix::zeros(1, 4), Activation::Softmax);
        assert_eq!(s.as_slice(), &[0.25; 4]);
        assert_eq!(activation_forward(&Matrix::zeros(1, 1), Activation::Sigmoid).as_slice(), &[0.5]);
        let big = activation_forward(&Matrix::row_vector(&[1000.0, 0.0]), Activation::Softmax);
        assert!(big.is_finite());
        assert_eq!(big.get(0, 0), 1.0);
        assert!(big.get(0, 1) < 1e-300);
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let tape = Tape::new();
        assert!(matches!(tape.backward(NodeId(0)), Err(Error::State(_))));
    }

    #[test]
    fn reused_param_accumulates() {
        let mut store = ParamStore::new();
        let p = store.add("w", Matrix::row_vector(&[3.0]));
        let mut tape = Tape::new();
        let bound = tape.bind(&store);
        // L = w*w + w*w
        let sq = tape.mul(bound[p], bound[p]).unwrap();
        let l = tape.sum(&[sq, sq]).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.params[0].as_ref().unwrap().as_slice(), &[12.0]);
    }
}
