//! Reverse-mode automatic differentiation on an explicit tape.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order. `Var` handles carry the tape generation; after
//! `Tape::reset` old handles are rejected with `GraphConsumed`.

use super::tensor::{check_finite, dot, l2_norm, Tensor};
use super::NumericsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    index: usize,
    generation: u64,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    AddRow(usize, usize),
    Clamp(usize, f64, f64),
    SignedSquare(usize),
    Tanh(usize),
    RowNorms(usize),
    MeanRows(usize),
    Cosine(usize, usize),
    Sum(usize),
    Gather(usize, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    generation: u64,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node. Handles from before the reset become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.generation += 1;
    }

    fn idx(&self, v: Var) -> Result<usize, NumericsError> {
        if v.generation != self.generation || v.index >= self.nodes.len() {
            return Err(NumericsError::GraphConsumed);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            requires_grad: false,
            grad: None,
        });
        Var {
            index: self.nodes.len() - 1,
            generation: self.generation,
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            requires_grad,
            grad: None,
        });
        Var {
            index: self.nodes.len() - 1,
            generation: self.generation,
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor, NumericsError> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    /// Accumulated gradient of a leaf, if `backward` has reached it.
    pub fn grad(&self, v: Var) -> Result<Option<&Tensor>, NumericsError> {
        Ok(self.nodes[self.idx(v)?].grad.as_ref())
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[ia].value.add(&self.nodes[ib].value)?;
        Ok(self.push(v, Op::Add(ia, ib), &[ia, ib]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[ia].value.sub(&self.nodes[ib].value)?;
        Ok(self.push(v, Op::Sub(ia, ib), &[ia, ib]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[ia].value.mul(&self.nodes[ib].value)?;
        Ok(self.push(v, Op::Mul(ia, ib), &[ia, ib]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, NumericsError> {
        let ia = self.idx(a)?;
        let v = self.nodes[ia].value.map("add_scalar", |x| x + c)?;
        Ok(self.push(v, Op::AddScalar(ia), &[ia]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, NumericsError> {
        let ia = self.idx(a)?;
        let v = self.nodes[ia].value.scale(k)?;
        Ok(self.push(v, Op::Scale(ia, k), &[ia]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        Ok(self.push(v, Op::MatMul(ia, ib), &[ia, ib]))
    }

    /// Adds a length-`D` vector to every row of an `N x D` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (ia, ib) = (self.idx(a)?, self.idx(row)?);
        let (m, r) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if m.rank() != 2 || r.len() != m.cols() {
            return Err(shape_err("add_row", m, r));
        }
        let d = m.cols();
        let data: Vec<f64> = m
            .data()
            .iter()
            .enumerate()
            .map(|(k, x)| x + r.data()[k % d])
            .collect();
        check_finite("add_row", &data)?;
        let v = Tensor::new(m.shape().to_vec(), data)?;
        Ok(self.push(v, Op::AddRow(ia, ib), &[ia, ib]))
    }

    /// Elementwise clamp. The gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, NumericsError> {
        let ia = self.idx(a)?;
        let v = self.nodes[ia].value.clamp(lo, hi);
        Ok(self.push(v, Op::Clamp(ia, lo, hi), &[ia]))
    }

    /// `x * |x|`, elementwise.
    pub fn signed_square(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ia = self.idx(a)?;
        let v = self.nodes[ia].value.map("signed_square", |x| x * x.abs())?;
        Ok(self.push(v, Op::SignedSquare(ia), &[ia]))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ia = self.idx(a)?;
        let v = self.nodes[ia].value.map("tanh", f64::tanh)?;
        Ok(self.push(v, Op::Tanh(ia), &[ia]))
    }

    /// Row norms of an `N x D` matrix, as an `N x 1` column.
    pub fn row_norms(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ia = self.idx(a)?;
        let m = &self.nodes[ia].value;
        if m.rank() != 2 {
            return Err(NumericsError::RankMismatch {
                op: "row_norms",
                expected: 2,
                got: m.rank(),
            });
        }
        let v = Tensor::new(vec![m.rows(), 1], m.row_norms())?;
        Ok(self.push(v, Op::RowNorms(ia), &[ia]))
    }

    /// Column mean of an `N x D` matrix, as a length-`D` vector.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ia = self.idx(a)?;
        let v = Tensor::vector(self.nodes[ia].value.mean_rows()?)?;
        Ok(self.push(v, Op::MeanRows(ia), &[ia]))
    }

    /// Cosine similarity of two equal-length tensors, as a scalar.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let c = super::tensor::cosine(self.nodes[ia].value.data(), self.nodes[ib].value.data())?;
        let v = Tensor::scalar(c)?;
        Ok(self.push(v, Op::Cosine(ia, ib), &[ia, ib]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ia = self.idx(a)?;
        let v = Tensor::scalar(self.nodes[ia].value.sum())?;
        Ok(self.push(v, Op::Sum(ia), &[ia]))
    }

    /// `out[k] = a[indices[k]]` over the flattened input, reshaped to `shape`.
    pub fn gather(
        &mut self,
        a: Var,
        indices: Vec<usize>,
        shape: Vec<usize>,
    ) -> Result<Var, NumericsError> {
        let ia = self.idx(a)?;
        let src = self.nodes[ia].value.data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(NumericsError::IndexOutOfRange {
                op: "gather",
                index: bad,
                len: src.len(),
            });
        }
        let data = indices.iter().map(|&i| src[i]).collect();
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Gather(ia, indices), &[ia]))
    }

    /// Propagates d(loss)/d(node) back to every leaf with `requires_grad`.
    /// Gradients accumulate across calls until `zero_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        let il = self.idx(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(NumericsError::NotScalar {
                shape: self.nodes[il].value.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; il + 1];
        adj[il] = Some(vec![1.0]);

        fn acc(adj: &mut [Option<Vec<f64>>], i: usize, g: Vec<f64>) {
            match &mut adj[i] {
                Some(cur) => cur.iter_mut().zip(g).for_each(|(c, x)| *c += x),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=il).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            check_finite("backward", &g)?;
            let nodes = &self.nodes;
            let want = |j: usize| nodes[j].needs_grad;
            match &nodes[i].op {
                Op::Leaf => {
                    if nodes[i].requires_grad {
                        let gt = Tensor::new(nodes[i].value.shape().to_vec(), g)?;
                        let node = &mut self.nodes[i];
                        node.grad = Some(match node.grad.take() {
                            Some(prev) => prev.add(&gt)?,
                            None => gt,
                        });
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if want(b) {
                        acc(&mut adj, b, g.clone());
                    }
                    if want(a) {
                        acc(&mut adj, a, g);
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if want(b) {
                        acc(&mut adj, b, g.iter().map(|x| -x).collect());
                    }
                    if want(a) {
                        acc(&mut adj, a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (va, vb) = (nodes[a].value.data(), nodes[b].value.data());
                    let ga: Vec<f64> = g.iter().zip(vb).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = g.iter().zip(va).map(|(x, y)| x * y).collect();
                    if want(a) {
                        acc(&mut adj, a, ga);
                    }
                    if want(b) {
                        acc(&mut adj, b, gb);
                    }
                }
                Op::AddScalar(a) => {
                    let a = *a;
                    acc(&mut adj, a, g);
                }
                Op::Scale(a, k) => {
                    let (a, k) = (*a, *k);
                    acc(&mut adj, a, g.iter().map(|x| x * k).collect());
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let out_shape = nodes[i].value.shape().to_vec();
                    let gt = Tensor::new(out_shape, g)?;
                    if want(a) {
                        let ga = gt.matmul(&nodes[b].value.transpose()?)?;
                        acc(&mut adj, a, ga.into_data());
                    }
                    if want(b) {
                        let gb = nodes[a].value.transpose()?.matmul(&gt)?;
                        acc(&mut adj, b, gb.into_data());
                    }
                }
                Op::AddRow(a, b) => {
                    let (a, b) = (*a, *b);
                    if want(b) {
                        let d = nodes[b].value.len();
                        let mut gb = vec![0.0; d];
                        for (k, x) in g.iter().enumerate() {
                            gb[k % d] += x;
                        }
                        acc(&mut adj, b, gb);
                    }
                    if want(a) {
                        acc(&mut adj, a, g);
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let (a, lo, hi) = (*a, *lo, *hi);
                    let ga = g
                        .iter()
                        .zip(nodes[a].value.data())
                        .map(|(x, v)| if *v >= lo && *v <= hi { *x } else { 0.0 })
                        .collect();
                    acc(&mut adj, a, ga);
                }
                Op::SignedSquare(a) => {
                    let a = *a;
                    let ga = g
                        .iter()
                        .zip(nodes[a].value.data())
                        .map(|(x, v)| x * 2.0 * v.abs())
                        .collect();
                    acc(&mut adj, a, ga);
                }
                Op::Tanh(a) => {
                    let a = *a;
                    let ga = g
                        .iter()
                        .zip(nodes[i].value.data())
                        .map(|(x, y)| x * (1.0 - y * y))
                        .collect();
                    acc(&mut adj, a, ga);
                }
                Op::RowNorms(a) => {
                    let a = *a;
                    let m = &nodes[a].value;
                    let norms = nodes[i].value.data();
                    let d = m.cols();
                    let ga = m
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, v)| {
                            let n = norms[k / d];
                            if n == 0.0 {
                                0.0
                            } else {
                                g[k / d] * v / n
                            }
                        })
                        .collect();
                    acc(&mut adj, a, ga);
                }
                Op::MeanRows(a) => {
                    let a = *a;
                    let n = nodes[a].value.rows() as f64;
                    let d = g.len();
                    let ga = (0..nodes[a].value.len()).map(|k| g[k % d] / n).collect();
                    acc(&mut adj, a, ga);
                }
                Op::Cosine(a, b) => {
                    let (a, b) = (*a, *b);
                    let (va, vb) = (nodes[a].value.data(), nodes[b].value.data());
                    let (na, nb) = (l2_norm(va), l2_norm(vb));
                    let c = dot(va, vb) / (na * nb);
                    let s = g[0];
                    if want(a) {
                        let ga = va
                            .iter()
                            .zip(vb)
                            .map(|(x, y)| s * (y / (na * nb) - c * x / (na * na)))
                            .collect();
                        acc(&mut adj, a, ga);
                    }
                    if want(b) {
                        let gb = va
                            .iter()
                            .zip(vb)
                            .map(|(x, y)| s * (x / (na * nb) - c * y / (nb * nb)))
                            .collect();
                        acc(&mut adj, b, gb);
                    }
                }
                Op::Sum(a) => {
                    let a = *a;
                    acc(&mut adj, a, vec![g[0]; nodes[a].value.len()]);
                }
                Op::Gather(a, indices) => {
                    let a = *a;
                    let mut ga = vec![0.0; nodes[a].value.len()];
                    for (k, &src) in indices.iter().enumerate() {
                        ga[src] += g[k];
                    }
                    acc(&mut adj, a, ga);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![3], vec![1.0, -2.0, 3.0]), true);
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![1], vec![2.0]), true);
        let y = tape.scale(x, 3.0).unwrap();
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap().data(), &[6.0]);
        tape.zero_grad();
        assert!(tape.grad(x).unwrap().is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![2], vec![1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(NumericsError::NotScalar { .. })));
    }

    #[test]
    fn stale_handle_is_consumed() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![1], vec![1.0]), true);
        tape.reset();
        assert!(matches!(tape.backward(x), Err(NumericsError::GraphConsumed)));
    }

    #[test]
    fn constants_get_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![2], vec![1.0, 2.0]), true);
        let c = tape.constant(t(vec![2], vec![3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap().data(), &[3.0, 4.0]);
        assert!(tape.grad(c).unwrap().is_none());
    }

    #[test]
    fn clamp_blocks_outside_range() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![3], vec![-0.5, 0.5, 1.5]), true);
        let y = tape.clamp(x, 0.0, 1.0).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn gather_scatters_back() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![3], vec![1.0, 2.0, 3.0]), true);
        let y = tape.gather(x, vec![2, 0, 2], vec![3]).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[3.0, 1.0, 3.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap().data(), &[1.0, 0.0, 2.0]);
    }
}
