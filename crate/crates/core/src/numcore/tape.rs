//! Reverse-mode differentiation over a fixed set of matrix operations.
//!
//! A [`Tape`] records every intermediate value of one forward pass. Calling
//! [`Tape::backward`] on a scalar node propagates gradients back to the
//! parameter leaves and accumulates them into the owning [`ParamStore`].

use super::matrix::gemm;
use super::{Matrix, ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Matrix),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Softplus(Var),
    LogSoftmax(Var),
    MaskedSoftmax(Var, Vec<bool>),
    Sum(Var),
    GroupSum(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Const | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::MulConst(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Softplus(a)
            | Op::LogSoftmax(a)
            | Op::MaskedSoftmax(a, _)
            | Op::Sum(a)
            | Op::GroupSum(a, _)
            | Op::SliceCols(a, _, _)
            | Op::GatherRows(a, _)
            | Op::Pick(a, _) => vec![*a],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
    /// Whether any parameter feeds into this node.
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(64) }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let needs_grad = matches!(op, Op::Param(_)) || op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Const)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.cols(), mb.rows(), "matmul shape mismatch {:?} x {:?}", ma.shape(), mb.shape());
        let v = ma.matmul(mb);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(ma.rows(), mb.rows());
        gemm(ma, false, mb, true, &mut out, 0.0);
        self.push(out, Op::MatMulNt(a, b))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.shape(), mb.shape(), "elementwise shape mismatch");
        let data = ma.data().iter().zip(mb.data()).map(|(&x, &y)| f(x, y)).collect();
        Matrix::from_vec(ma.rows(), ma.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ma, mr) = (self.value(a), self.value(row));
        assert_eq!((1, ma.cols()), mr.shape(), "add_row shape mismatch");
        let mut v = ma.clone();
        let r = mr.data();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(r) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Var {
        let ma = self.value(a);
        assert_eq!(ma.shape(), c.shape(), "mul_const shape mismatch");
        let data = ma.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let v = Matrix::from_vec(ma.rows(), ma.cols(), data);
        self.push(v, Op::MulConst(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ma = self.value(a);
        let mut v = ma.clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let lse = log_sum_exp(row);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(v, Op::LogSoftmax(a))
    }

    /// Row-wise softmax restricted to entries where `mask` is true; masked
    /// entries are exactly zero. A fully masked row yields all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: Vec<bool>) -> Var {
        let ma = self.value(a);
        assert_eq!(mask.len(), ma.len(), "mask length mismatch");
        let cols = ma.cols();
        let mut v = Matrix::zeros(ma.rows(), cols);
        for r in 0..ma.rows() {
            let src = ma.row(r);
            let m = &mask[r * cols..(r + 1) * cols];
            let mut max = f64::NEG_INFINITY;
            for (x, &ok) in src.iter().zip(m) {
                if ok && *x > max {
                    max = *x;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let dst = v.row_mut(r);
            let mut sum = 0.0;
            for j in 0..cols {
                if m[j] {
                    let e = (src[j] - max).exp();
                    dst[j] = e;
                    sum += e;
                }
            }
            for j in 0..cols {
                if m[j] {
                    dst[j] /= sum;
                }
            }
        }
        self.push(v, Op::MaskedSoftmax(a, mask))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let mask = vec![true; self.value(a).len()];
        self.masked_softmax(a, mask)
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums consecutive blocks of `group` rows: `(n·group) × c → n × c`.
    pub fn group_sum(&mut self, a: Var, group: usize) -> Var {
        let ma = self.value(a);
        assert!(group > 0 && ma.rows() % group == 0, "group_sum: rows not divisible by group");
        let n = ma.rows() / group;
        let mut v = Matrix::zeros(n, ma.cols());
        for r in 0..ma.rows() {
            let dst = r / group;
            for (c, x) in ma.row(r).iter().enumerate() {
                v.data_mut()[dst * ma.cols() + c] += x;
            }
        }
        self.push(v, Op::GroupSum(a, group))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let m = self.value(p);
                assert_eq!(m.rows(), rows, "concat_cols row mismatch");
                v.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
                off += m.cols();
            }
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let ma = self.value(a);
        assert!(start <= end && end <= ma.cols(), "slice_cols out of range");
        let mut v = Matrix::zeros(ma.rows(), end - start);
        for r in 0..ma.rows() {
            v.row_mut(r).copy_from_slice(&ma.row(r)[start..end]);
        }
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Var {
        let ma = self.value(a);
        let mut v = Matrix::zeros(indices.len(), ma.cols());
        for (r, &i) in indices.iter().enumerate() {
            v.row_mut(r).copy_from_slice(ma.row(i));
        }
        self.push(v, Op::GatherRows(a, indices))
    }

    /// Selects entry `columns[r]` from each row `r`, giving an `n × 1` column.
    pub fn pick(&mut self, a: Var, columns: Vec<usize>) -> Var {
        let ma = self.value(a);
        assert_eq!(columns.len(), ma.rows(), "pick: one column index per row");
        let data = columns.iter().enumerate().map(|(r, &c)| ma.get(r, c)).collect();
        self.push(Matrix::from_vec(ma.rows(), 1, data), Op::Pick(a, columns))
    }

    /// Back-propagates from the scalar `loss` and adds parameter gradients
    /// into `store`.
    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn backward(&self, loss: Var, store: &mut ParamStore) {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Const => {}
                Op::Param(id) => store.accumulate_grad(*id, &g),
                Op::MatMul(a, b) => {
                    let (ma, mb) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let mut ga = Matrix::zeros(ma.rows(), ma.cols());
                        gemm(&g, false, mb, true, &mut ga, 0.0);
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let mut gb = Matrix::zeros(mb.rows(), mb.cols());
                        gemm(ma, true, &g, false, &mut gb, 0.0);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (ma, mb) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let mut ga = Matrix::zeros(ma.rows(), ma.cols());
                        gemm(&g, false, mb, false, &mut ga, 0.0);
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let mut gb = Matrix::zeros(mb.rows(), mb.cols());
                        gemm(&g, true, ma, false, &mut gb, 0.0);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, hadamard(&g, self.value(*b)));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, hadamard(&g, self.value(*a)));
                    }
                }
                Op::AddRow(a, row) => {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.map(|x| c * x)),
                Op::MulConst(a, c) => accumulate(&mut grads, *a, hadamard(&g, c)),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let ga = zip_map(&g, x, |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = zip_map(&g, &node.value, |gi, yi| gi * (1.0 - yi * yi));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, hadamard(&g, &node.value)),
                Op::Softplus(a) => {
                    let ga = zip_map(&g, self.value(*a), |gi, xi| gi * sigmoid(xi));
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    // dx = g - softmax(x) * sum(g) per row
                    let y = &node.value;
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let gsum: f64 = g.row(r).iter().sum();
                        for (gx, yi) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                            *gx -= yi.exp() * gsum;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::MaskedSoftmax(a, mask) => {
                    // dx_i = p_i (g_i - sum_j p_j g_j); masked entries have p = 0.
                    let p = &node.value;
                    let cols = p.cols();
                    let mut ga = Matrix::zeros(p.rows(), cols);
                    for r in 0..p.rows() {
                        let (pr, gr) = (p.row(r), g.row(r));
                        let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                        let m = &mask[r * cols..(r + 1) * cols];
                        let out = ga.row_mut(r);
                        for j in 0..cols {
                            if m[j] {
                                out[j] = pr[j] * (gr[j] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.data()[0]));
                }
                Op::GroupSum(a, group) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i).copy_from_slice(g.row(i / group));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.value(p).shape();
                        let mut gp = Matrix::zeros(r, c);
                        for i in 0..r {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        off += c;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::SliceCols(a, start, _end) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, indices) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for (row, &i) in indices.iter().enumerate() {
                        for (acc, x) in ga.row_mut(i).iter_mut().zip(g.row(row)) {
                            *acc += x;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Pick(a, columns) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for (row, &col) in columns.iter().enumerate() {
                        ga.set(row, col, g.data()[row]);
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_softmax_is_stable_for_huge_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_rows(&[vec![1e4, -1e4, 0.0]]));
        let y = tape.log_softmax(x);
        let v = tape.value(y);
        assert!(v.all_finite());
        assert!(v.get(0, 0).abs() < 1e-12);
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_rows(&[vec![1e4, -1e4, 3.0]]));
        let p = tape.softmax(x);
        let total: f64 = tape.value(p).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-7);
    }

    #[test]
    fn softplus_matches_definition_and_does_not_overflow() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-12);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let p = tape.masked_softmax(x, vec![false, false, true, false]);
        assert_eq!(tape.value(p).data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn shared_node_gradients_accumulate() {
        let mut store = ParamStore::new();
        let id = store.add("p", Matrix::from_vec(1, 2, vec![1.5, -2.0]));
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let sq = tape.mul(p, p);
        let loss = tape.sum(sq);
        tape.backward(loss, &mut store);
        assert_eq!(store.grad(id).data(), &[3.0, -4.0]);
    }
}
