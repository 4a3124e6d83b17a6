use super::{kernels, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    SubRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Square(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    Pick(Var, Vec<usize>),
    SqDist(Var, Var),
    /// Forward copy of its input; backward never visits the input.
    StopGradient,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A tape of operations. Nodes are appended in evaluation order, so the
/// tape is always topologically sorted and acyclic.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros when the loss does not depend on it.
    pub fn wrt_or_zero(&self, var: Var) -> Tensor {
        self.wrt(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// A leaf that gradients flow into.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let rg = self.any_grad(&[a]);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.any_grad(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, value, Op::MatMul(a, b)))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn zip_row(
        &self,
        op: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (r, c) = ta.dims2(op)?;
        if tr.shape() != [1, c] {
            return Err(mismatch(op, ta, tr));
        }
        let rv = tr.data();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(ta.row_slice(i).iter().zip(rv).map(|(&x, &y)| f(x, y)));
        }
        Tensor::matrix(r, c, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.binary(a, b, value, Op::Add(a, b)))
    }

    /// Adds a `1×n` row to every row of an `r×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.zip_row("add_row", a, row, |x, y| x + y)?;
        Ok(self.binary(a, row, value, Op::AddRow(a, row)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.binary(a, b, value, Op::Sub(a, b)))
    }

    /// Subtracts a `1×n` row from every row of an `r×n` matrix.
    pub fn sub_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.zip_row("sub_row", a, row, |x, y| x - y)?;
        Ok(self.binary(a, row, value, Op::SubRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.binary(a, b, value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        self.unary(a, value, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.unary(a, value, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.unary(a, value, Op::Tanh(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * v);
        self.unary(a, value, Op::Square(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.unary(a, value, Op::Exp(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).softmax_rows()?;
        Ok(self.unary(a, value, Op::SoftmaxRows(a)))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2("log_softmax")?;
        let mut data = t.data().to_vec();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let lse = kernels::log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::matrix(r, c, data)?;
        Ok(self.unary(a, value, Op::LogSoftmaxRows(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.unary(a, value, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.unary(a, value, Op::MeanAll(a))
    }

    /// Row sums: `r×c → r×1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, _) = t.dims2("sum_cols")?;
        let data = (0..r).map(|i| t.row_slice(i).iter().sum()).collect();
        let value = Tensor::matrix(r, 1, data)?;
        Ok(self.unary(a, value, Op::SumCols(a)))
    }

    /// Selects `a[i, index[i]]` from each row: `r×c → r×1`.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2("pick")?;
        if index.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "pick",
                lhs: t.shape().to_vec(),
                rhs: vec![index.len()],
            });
        }
        let mut data = Vec::with_capacity(r);
        for (i, &j) in index.iter().enumerate() {
            if j >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick",
                    index: j,
                    bound: c,
                });
            }
            data.push(t.get2(i, j));
        }
        let value = Tensor::matrix(r, 1, data)?;
        Ok(self.unary(a, value, Op::Pick(a, index.to_vec())))
    }

    /// Pairwise squared Euclidean distances between rows: `a (r×d)`,
    /// `b (m×d)` → `r×m`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, d) = ta.dims2("sq_dist")?;
        let (m, d2) = tb.dims2("sq_dist")?;
        if d != d2 {
            return Err(mismatch("sq_dist", ta, tb));
        }
        let mut data = Vec::with_capacity(r * m);
        for i in 0..r {
            let x = ta.row_slice(i);
            for k in 0..m {
                let y = tb.row_slice(k);
                data.push(x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum());
            }
        }
        let value = Tensor::matrix(r, m, data)?;
        Ok(self.binary(a, b, value, Op::SqDist(a, b)))
    }

    /// Forward identity whose backward contributes nothing to `a`.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shapes: Vec<Vec<usize>> = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(TensorError::NotScalar(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        let slot =
            grads[var.0].get_or_insert_with(|| Tensor::zeros(self.nodes[var.0].value.shape()));
        f(slot.data_mut());
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        let add_into = |dst: &mut [f64], src: &[f64], sign: f64| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += sign * s;
            }
        };
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = ta.dims2("matmul")?;
                let (_, m) = tb.dims2("matmul")?;
                self.accumulate(grads, *a, |ga| {
                    kernels::matmul_nt(gd, tb.data(), ga, n, k, m)
                });
                self.accumulate(grads, *b, |gb| {
                    kernels::matmul_tn(ta.data(), gd, gb, n, k, m)
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                self.accumulate(grads, *a, |ga| add_into(ga, gd, 1.0));
                self.accumulate(grads, *b, |gb| add_into(gb, gd, sign));
            }
            Op::AddRow(a, row) | Op::SubRow(a, row) => {
                let sign = if matches!(node.op, Op::SubRow(..)) {
                    -1.0
                } else {
                    1.0
                };
                let c = g.cols();
                self.accumulate(grads, *a, |ga| add_into(ga, gd, 1.0));
                self.accumulate(grads, *row, |gr| {
                    for chunk in gd.chunks(c) {
                        add_into(gr, chunk, sign);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for ((d, &gv), &bv) in ga.iter_mut().zip(gd).zip(tb) {
                        *d += gv * bv;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((d, &gv), &av) in gb.iter_mut().zip(gd).zip(ta) {
                        *d += gv * av;
                    }
                });
            }
            Op::Scale(a, factor) => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd, *factor));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for ((d, &gv), &xv) in ga.iter_mut().zip(gd).zip(x) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |ga| {
                    for ((d, &gv), &yv) in ga.iter_mut().zip(gd).zip(y) {
                        *d += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for ((d, &gv), &xv) in ga.iter_mut().zip(gd).zip(x) {
                        *d += 2.0 * xv * gv;
                    }
                });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |ga| {
                    for ((d, &gv), &yv) in ga.iter_mut().zip(gd).zip(y) {
                        *d += gv * yv;
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let c = y.cols();
                self.accumulate(grads, *a, |ga| {
                    for (i, grow) in gd.chunks(c).enumerate() {
                        let yrow = y.row_slice(i);
                        let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            ga[i * c + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let c = y.cols();
                self.accumulate(grads, *a, |ga| {
                    for (i, grow) in gd.chunks(c).enumerate() {
                        let total: f64 = grow.iter().sum();
                        let yrow = y.row_slice(i);
                        for j in 0..c {
                            ga[i * c + j] += grow[j] - yrow[j].exp() * total;
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let gv = g.item();
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|d| *d += gv));
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len() as f64;
                let gv = g.item() / n;
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|d| *d += gv));
            }
            Op::SumCols(a) => {
                let c = self.value(*a).cols();
                self.accumulate(grads, *a, |ga| {
                    for (i, chunk) in ga.chunks_mut(c).enumerate() {
                        chunk.iter_mut().for_each(|d| *d += gd[i]);
                    }
                });
            }
            Op::Pick(a, index) => {
                let c = self.value(*a).cols();
                self.accumulate(grads, *a, |ga| {
                    for (i, &j) in index.iter().enumerate() {
                        ga[i * c + j] += gd[i];
                    }
                });
            }
            Op::SqDist(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (r, d) = ta.dims2("sq_dist")?;
                let m = tb.rows();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..r {
                        let x = ta.row_slice(i);
                        for k in 0..m {
                            let w = 2.0 * gd[i * m + k];
                            let y = tb.row_slice(k);
                            for t in 0..d {
                                ga[i * d + t] += w * (x[t] - y[t]);
                            }
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..r {
                        let x = ta.row_slice(i);
                        for k in 0..m {
                            let w = 2.0 * gd[i * m + k];
                            let y = tb.row_slice(k);
                            for t in 0..d {
                                gb[k * d + t] += w * (y[t] - x[t]);
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_and_softmax_values() {
        let mut g = Graph::new();
        let x = g.constant(t(1, 3, &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(t(1, 2, &[0.0, 0.0]));
        let s = g.softmax_rows(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let w = g.param(t(1, 2, &[1.0, 2.0]));
        let sq = g.square(w);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn stop_gradient_blocks_one_factor() {
        let mut g = Graph::new();
        let w = g.param(t(1, 2, &[1.0, 2.0]));
        let v = g.param(t(1, 2, &[3.0, 5.0]));
        let sw = g.stop_gradient(w);
        let prod = g.mul(sw, v).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt_or_zero(w).data(), &[0.0, 0.0]);
        assert_eq!(grads.wrt(v).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn stop_gradient_of_square_has_zero_derivative() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let s = g.stop_gradient(x);
        assert_eq!(g.value(s).item(), 3.0);
        let sq = g.square(s);
        let grads = g.backward(sq).unwrap();
        assert!(grads.wrt(x).is_none());
        assert_eq!(grads.wrt_or_zero(x).item(), 0.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.param(t(1, 2, &[1.0, 2.0]));
        assert_eq!(
            g.backward(w).unwrap_err(),
            TensorError::NotScalar(vec![1, 2])
        );
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let mut g = Graph::new();
        let used = g.param(Tensor::scalar(2.0));
        let unused = g.param(t(2, 2, &[1.0; 4]));
        let loss = g.square(used);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt_or_zero(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn shared_node_accumulates() {
        // loss = sum(x * x) through mul with the same operand twice
        let mut g = Graph::new();
        let x = g.param(t(1, 2, &[3.0, -1.0]));
        let p = g.mul(x, x).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[6.0, -2.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(t(2, 2, &[0.0; 4]));
        let b = g.constant(t(1, 3, &[0.0; 3]));
        let err = g.add_row(a, b).unwrap_err();
        assert!(matches!(
            err,
            TensorError::ShapeMismatch { op: "add_row", .. }
        ));
        let err = g.pick(a, &[0, 2]).unwrap_err();
        assert!(matches!(
            err,
            TensorError::IndexOutOfRange { op: "pick", .. }
        ));
    }
}
