//! Tensor-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive in evaluation order. [`Tape::grad`]
//! walks the record backwards and builds each adjoint out of the same
//! primitives, appending them to the tape. Adjoints are therefore ordinary
//! differentiable nodes: calling `grad` again on an expression that contains
//! them yields second-order derivatives. The gradient penalty of the critic
//! relies on this.
//!
//! Only nodes that depend on a parameter leaf take part in the backward walk;
//! constants (data, masks, noise) never receive adjoints.

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    BroadcastScalar(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Recip(Var),
    Sqrt(Var),
    Softplus(Var),
    ConcatCols(Vec<Var>),
    SliceCols { src: Var, start: usize },
    PadCols { src: Var, start: usize },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Record of primitive operations; single-threaded by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op, value: Tensor, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives an adjoint.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` transposes the trailing two axes when the
    /// matching flag is set. Rank-3 operands are multiplied batch-wise.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b), ta, tb)?;
        Ok(self.push(Op::MatMul { a, b, ta, tb }, value, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), value, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), value, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        self.push(Op::Scale(a, k), value, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|v| v + k);
        self.push(Op::AddScalar(a), value, &[a])
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        av.expect_rank2("add_row")?;
        if rv.shape() != [1, av.cols()] {
            return Err(Error::dim(
                "add_row",
                format!("{:?} + row {:?}", av.shape(), rv.shape()),
            ));
        }
        let c = av.cols();
        let mut value = av.clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += rv.data()[i % c];
        }
        Ok(self.push(Op::AddRow(a, row), value, &[a, row]))
    }

    /// Scales row `i` of an `m×n` matrix by entry `i` of an `m×1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        av.expect_rank2("mul_col")?;
        if cv.shape() != [av.rows(), 1] {
            return Err(Error::dim(
                "mul_col",
                format!("{:?} * col {:?}", av.shape(), cv.shape()),
            ));
        }
        let c = av.cols();
        let mut value = av.clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v *= cv.data()[i / c];
        }
        Ok(self.push(Op::MulCol(a, col), value, &[a, col]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), value, &[a])
    }

    /// Column sums of a matrix as a `1×n` row.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        av.expect_rank2("sum_rows")?;
        let c = av.cols();
        let mut out = vec![0.0; c];
        for (i, v) in av.data().iter().enumerate() {
            out[i % c] += v;
        }
        let value = Tensor::from_vec(1, c, out)?;
        Ok(self.push(Op::SumRows(a), value, &[a]))
    }

    /// Row sums of a matrix as an `m×1` column.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        av.expect_rank2("sum_cols")?;
        let value = Tensor::from_vec(
            av.rows(),
            1,
            (0..av.rows()).map(|i| av.row(i).iter().sum()).collect(),
        )?;
        Ok(self.push(Op::SumCols(a), value, &[a]))
    }

    /// Expands a one-element tensor to `shape`.
    pub fn broadcast_scalar(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if !av.is_scalar() {
            return Err(Error::dim("broadcast_scalar", format!("{:?}", av.shape())));
        }
        let value = Tensor::full(shape, av.item());
        Ok(self.push(Op::BroadcastScalar(a), value, &[a]))
    }

    /// Repeats a `1×n` row `m` times.
    pub fn broadcast_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 || av.rows() != 1 {
            return Err(Error::dim("broadcast_rows", format!("{:?}", av.shape())));
        }
        let value = Tensor::from_vec(m, av.cols(), av.data().repeat(m))?;
        Ok(self.push(Op::BroadcastRows(a), value, &[a]))
    }

    /// Repeats an `m×1` column `n` times.
    pub fn broadcast_cols(&mut self, a: Var, n: usize) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 || av.cols() != 1 {
            return Err(Error::dim("broadcast_cols", format!("{:?}", av.shape())));
        }
        let data = av
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, n))
            .collect();
        let value = Tensor::from_vec(av.rows(), n, data)?;
        Ok(self.push(Op::BroadcastCols(a), value, &[a]))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), value, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), value, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), value, &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(Op::Ln(a), value, &[a])
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::recip);
        self.push(Op::Recip(a), value, &[a])
    }

    /// Square root. Its adjoint treats `1/(2√a)` as a constant, so sqrt
    /// supports one level of differentiation only; at `a = 0` the adjoint is
    /// taken to be zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), value, &[a])
    }

    /// `ln(1 + e^a)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        self.push(Op::Softplus(a), value, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols", "no operands"))?;
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            v.expect_rank2("concat_cols")?;
            if v.rows() != rows {
                return Err(Error::dim("concat_cols", "row counts differ"));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::from_vec(rows, total, data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        av.expect_rank2("slice_cols")?;
        if start + len > av.cols() {
            return Err(Error::dim(
                "slice_cols",
                format!("{}..{} of {}", start, start + len, av.cols()),
            ));
        }
        let data = (0..av.rows())
            .flat_map(|i| av.row(i)[start..start + len].to_vec())
            .collect();
        let value = Tensor::from_vec(av.rows(), len, data)?;
        Ok(self.push(Op::SliceCols { src: a, start }, value, &[a]))
    }

    /// Embeds `a` into a zero matrix of width `total` starting at `start`.
    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Result<Var> {
        let av = self.value(a);
        av.expect_rank2("pad_cols")?;
        if start + av.cols() > total {
            return Err(Error::dim("pad_cols", "padding narrower than operand"));
        }
        let mut out = Tensor::zeros(&[av.rows(), total]);
        for i in 0..av.rows() {
            for (j, &v) in av.row(i).iter().enumerate() {
                out.set(i, start + j, v);
            }
        }
        Ok(self.push(Op::PadCols { src: a, start }, out, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), value, &[a]))
    }

    /// Adjoints of the scalar `root` with respect to `wrt`.
    ///
    /// The adjoints are recorded on this tape, so they can themselves be
    /// differentiated. Targets that `root` does not depend on receive a zero
    /// tensor.
    pub fn grad(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if !self.value(root).is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let n = root.0 + 1;
        let mut adj: Vec<Option<Var>> = vec![None; n];
        let seed = Tensor::full(self.shape(root), 1.0);
        adj[root.0] = Some(self.constant(seed));

        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (parent, contribution) in self.vjp(Var(i), &op, g)? {
                adj[parent.0] = Some(match adj[parent.0] {
                    None => contribution,
                    Some(prev) => self.add(prev, contribution)?,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|&v| match adj.get(v.0).copied().flatten() {
                Some(a) => a,
                None => {
                    let z = Tensor::zeros(self.shape(v));
                    self.constant(z)
                }
            })
            .collect())
    }

    /// Adjoint values of `root` with respect to `wrt`.
    pub fn gradients(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let g = self.grad(root, wrt)?;
        Ok(g.into_iter().map(|v| self.value(v).clone()).collect())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // Contributions of output adjoint `g` to each parent that needs one.
    fn vjp(&mut self, out: Var, op: &Op, g: Var) -> Result<Vec<(Var, Var)>> {
        let mut c = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                if self.wants(a) {
                    let ga = match (ta, tb) {
                        (false, false) => self.matmul_t(g, b, false, true)?,
                        (false, true) => self.matmul_t(g, b, false, false)?,
                        (true, false) => self.matmul_t(b, g, false, true)?,
                        (true, true) => self.matmul_t(b, g, true, true)?,
                    };
                    c.push((a, ga));
                }
                if self.wants(b) {
                    let gb = match (ta, tb) {
                        (false, false) => self.matmul_t(a, g, true, false)?,
                        (false, true) => self.matmul_t(g, a, true, false)?,
                        (true, false) => self.matmul_t(a, g, false, false)?,
                        (true, true) => self.matmul_t(g, a, true, true)?,
                    };
                    c.push((b, gb));
                }
            }
            Op::Add(a, b) => {
                if self.wants(a) {
                    c.push((a, g));
                }
                if self.wants(b) {
                    c.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(a) {
                    c.push((a, g));
                }
                if self.wants(b) {
                    let neg = self.scale(g, -1.0);
                    c.push((b, neg));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let ga = self.mul(g, b)?;
                    c.push((a, ga));
                }
                if self.wants(b) {
                    let gb = self.mul(g, a)?;
                    c.push((b, gb));
                }
            }
            Op::Scale(a, k) => {
                let ga = self.scale(g, k);
                c.push((a, ga));
            }
            Op::AddScalar(a) => c.push((a, g)),
            Op::AddRow(a, r) => {
                if self.wants(a) {
                    c.push((a, g));
                }
                if self.wants(r) {
                    let gr = self.sum_rows(g)?;
                    c.push((r, gr));
                }
            }
            Op::MulCol(a, col) => {
                if self.wants(a) {
                    let ga = self.mul_col(g, col)?;
                    c.push((a, ga));
                }
                if self.wants(col) {
                    let ga = self.mul(g, a)?;
                    let gc = self.sum_cols(ga)?;
                    c.push((col, gc));
                }
            }
            Op::SumAll(a) => {
                let shape = self.shape(a).to_vec();
                let ga = self.broadcast_scalar(g, &shape)?;
                c.push((a, ga));
            }
            Op::SumRows(a) => {
                let m = self.value(a).rows();
                let ga = self.broadcast_rows(g, m)?;
                c.push((a, ga));
            }
            Op::SumCols(a) => {
                let n = self.value(a).cols();
                let ga = self.broadcast_cols(g, n)?;
                c.push((a, ga));
            }
            Op::BroadcastScalar(a) => {
                let s = self.sum_all(g);
                let shape = self.shape(a).to_vec();
                let ga = self.reshape(s, &shape)?;
                c.push((a, ga));
            }
            Op::BroadcastRows(a) => {
                let ga = self.sum_rows(g)?;
                c.push((a, ga));
            }
            Op::BroadcastCols(a) => {
                let ga = self.sum_cols(g)?;
                c.push((a, ga));
            }
            Op::Tanh(a) => {
                // g * (1 - y^2)
                let y2 = self.mul(out, out)?;
                let neg = self.scale(y2, -1.0);
                let d = self.add_scalar(neg, 1.0);
                let ga = self.mul(g, d)?;
                c.push((a, ga));
            }
            Op::Sigmoid(a) => {
                // g * y * (1 - y)
                let neg = self.scale(out, -1.0);
                let one_minus = self.add_scalar(neg, 1.0);
                let d = self.mul(out, one_minus)?;
                let ga = self.mul(g, d)?;
                c.push((a, ga));
            }
            Op::Exp(a) => {
                let ga = self.mul(g, out)?;
                c.push((a, ga));
            }
            Op::Ln(a) => {
                let r = self.recip(a);
                let ga = self.mul(g, r)?;
                c.push((a, ga));
            }
            Op::Recip(a) => {
                let y2 = self.mul(out, out)?;
                let t = self.mul(g, y2)?;
                let ga = self.scale(t, -1.0);
                c.push((a, ga));
            }
            Op::Sqrt(a) => {
                let factor = self
                    .value(out)
                    .map(|y| if y > 0.0 { 0.5 / y } else { 0.0 });
                let f = self.constant(factor);
                let ga = self.mul(g, f)?;
                c.push((a, ga));
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(a);
                let ga = self.mul(g, s)?;
                c.push((a, ga));
            }
            Op::ConcatCols(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let gp = self.slice_cols(g, offset, w)?;
                        c.push((p, gp));
                    }
                    offset += w;
                }
            }
            Op::SliceCols { src, start } => {
                let total = self.value(src).cols();
                let ga = self.pad_cols(g, start, total)?;
                c.push((src, ga));
            }
            Op::PadCols { src, start } => {
                let w = self.value(src).cols();
                let ga = self.slice_cols(g, start, w)?;
                c.push((src, ga));
            }
            Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                let ga = self.reshape(g, &shape)?;
                c.push((a, ga));
            }
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.gradients(y, &[x]).unwrap();
        assert_eq!(g[0].item(), 6.0);
    }

    #[test]
    fn root_adjoint_is_one() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(2.0));
        let y = t.tanh(x);
        let g = t.gradients(y, &[y]).unwrap();
        assert_eq!(g[0].item(), 1.0);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(t.grad(x, &[x]), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_parameter_gets_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(1.0));
        let unused = t.param(Tensor::zeros(&[2, 3]));
        let y = t.scale(x, 4.0);
        let g = t.gradients(y, &[x, unused]).unwrap();
        assert_eq!(g[0].item(), 4.0);
        assert_eq!(g[1], Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn sigmoid_at_zero() {
        // f(W) = sum(sigmoid(W x)) at W = 0: df/dW_ij = 0.25 * x_j
        let mut t = Tape::new();
        let w = t.param(Tensor::zeros(&[3, 2]));
        let x = t.constant(Tensor::from_vec(2, 1, vec![1.5, -2.0]).unwrap());
        let z = t.matmul(w, x).unwrap();
        let s = t.sigmoid(z);
        let f = t.sum_all(s);
        let g = t.gradients(f, &[w]).unwrap();
        for i in 0..3 {
            assert_eq!(g[0].get(i, 0), 0.25 * 1.5);
            assert_eq!(g[0].get(i, 1), 0.25 * -2.0);
        }
    }

    #[test]
    fn second_derivative_of_cube() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(2.0));
        let x2 = t.mul(x, x).unwrap();
        let x3 = t.mul(x2, x).unwrap();
        let dx = t.grad(x3, &[x]).unwrap()[0];
        assert_eq!(t.scalar_value(dx), 12.0);
        let d2 = t.gradients(dx, &[x]).unwrap();
        assert_eq!(d2[0].item(), 12.0);
    }

    #[test]
    fn stable_sigmoid_and_softplus() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(100.0) - 100.0).abs() < 1e-12);
    }
}
