//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! Nodes are appended to a [`Graph`] in creation order, so the node index is
//! already a topological order and `backward` is a single reverse sweep.
//! Every quantity is a 2-D matrix; scalars are `1 x 1`.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Log(Var),
    Exp(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    SoftmaxRows(Var),
}

/// A value in the graph together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct GraphValue<T> {
    pub data: Array2<T>,
    pub grad: Array2<T>,
    pub requires_grad: bool,
    op: Op<T>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<GraphValue<T>>,
}

fn shape<T>(a: &Array2<T>) -> (usize, usize) {
    a.dim()
}

/// Plain `a · b` with a fixed accumulation order, so row `i` of the result
/// depends only on row `i` of `a`.
pub fn matmul_kernel<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>) -> Array2<T> {
    let (m, k) = a.dim();
    let n = b.ncols();
    debug_assert_eq!(k, b.nrows());
    let mut out = Array2::<T>::zeros((m, n));
    for i in 0..m {
        let mut row = out.row_mut(i);
        for p in 0..k {
            let aip = a[[i, p]];
            if aip == T::zero() {
                continue;
            }
            let brow = b.row(p);
            for (o, &bv) in row.iter_mut().zip(brow.iter()) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_kernel<T: Scalar>(z: ArrayView2<T>) -> Array2<T> {
    let mut out = z.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total: T = row.iter().copied().sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &GraphValue<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].grad
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        let d = self.value(v);
        debug_assert_eq!(d.dim(), (1, 1));
        d[[0, 0]]
    }

    fn push(&mut self, data: Array2<T>, op: Op<T>, requires_grad: bool) -> Var {
        let grad = Array2::zeros(data.raw_dim());
        self.nodes.push(GraphValue {
            data,
            grad,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, data: Array2<T>) -> Var {
        self.push(data, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, data: Array2<T>) -> Var {
        self.push(data, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (shape(self.value(a)), shape(self.value(b)));
        if sa.1 != sb.0 {
            return Err(Error::Dimension {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let out = matmul_kernel(self.value(a).view(), self.value(b).view());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (shape(self.value(a)), shape(self.value(b)));
        if sa != sb {
            return Err(Error::Dimension {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `a + row`, broadcasting a `1 x c` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (shape(self.value(a)), shape(self.value(row)));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(Error::Dimension {
                op: "add_row",
                left: sa,
                right: sr,
            });
        }
        let out = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).mapv(|v| v * k);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, k), rg)
    }

    /// Natural log of `max(a, 1e-12)`.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("log"));
        }
        let floor = T::log_floor();
        let out = x.mapv(|v| v.max(floor).ln());
        let rg = self.rg(a);
        Ok(self.push(out, Op::Log(a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(T::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(T::zero()));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Array2::from_elem((1, 1), total), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let total = x.sum() / T::of(x.len() as f64);
        let rg = self.rg(a);
        self.push(Array2::from_elem((1, 1), total), Op::Mean(a), rg)
    }

    /// Per-row sums: `r x c -> r x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(out, Op::SumRows(a), rg)
    }

    /// Per-column sums: `r x c -> 1 x c`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(out, Op::SumCols(a), rg)
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let sa = shape(self.value(a));
        if start >= end || end > sa.1 {
            return Err(Error::Dimension {
                op: "slice_cols",
                left: sa,
                right: (start, end),
            });
        }
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| contract("concat_cols needs at least one input"))?;
        let rows = self.value(*first).nrows();
        for p in parts {
            let sp = shape(self.value(*p));
            if sp.0 != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    left: shape(self.value(*first)),
                    right: sp,
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn softmax_rows(&mut self, z: Var) -> Result<Var> {
        if self.value(z).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax_rows"));
        }
        let out = softmax_kernel(self.value(z).view());
        let rg = self.rg(z);
        Ok(self.push(out, Op::SoftmaxRows(z), rg))
    }

    /// Resets every accumulated gradient to zero.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.fill(T::zero());
        }
    }

    /// Accumulates `d root / d node` into every node that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rs = shape(self.value(root));
        if rs != (1, 1) {
            return Err(contract(format!(
                "backward needs a 1x1 root, got {}x{}",
                rs.0, rs.1
            )));
        }
        if !self.rg(root) {
            return Ok(());
        }
        let mut adj: Vec<Option<Array2<T>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Array2::ones((1, 1)));

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            self.nodes[i].grad += &g;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Array2<T>, adj: &mut [Option<Array2<T>>]) {
        let mut send = |v: Var, contrib: Array2<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => *acc += &contrib,
                slot @ None => *slot = Some(contrib),
            }
        };
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    send(*a, matmul_kernel(g.view(), self.value(*b).t()));
                }
                if self.rg(*b) {
                    send(*b, matmul_kernel(self.value(*a).t(), g.view()));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                send(*a, g.clone());
                send(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                send(*a, g * self.value(*b));
                send(*b, g * self.value(*a));
            }
            Op::Scale(a, k) => {
                let k = *k;
                send(*a, g.mapv(|v| v * k));
            }
            Op::Log(a) => {
                let floor = T::log_floor();
                let mut d = g.clone();
                ndarray::Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| *d = if x > floor { *d / x } else { T::zero() });
                send(*a, d);
            }
            Op::Exp(a) => send(*a, g * &node.data),
            Op::Relu(a) => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x <= T::zero() {
                            *d = T::zero()
                        }
                    });
                send(*a, d);
            }
            Op::Sum(a) => {
                let gv = g[[0, 0]];
                send(*a, Array2::from_elem(self.value(*a).raw_dim(), gv));
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let gv = g[[0, 0]] / T::of(x.len() as f64);
                send(*a, Array2::from_elem(x.raw_dim(), gv));
            }
            Op::SumRows(a) => {
                let x = self.value(*a);
                let mut d = Array2::zeros(x.raw_dim());
                for (mut row, gi) in d.rows_mut().into_iter().zip(g.column(0)) {
                    row.fill(*gi);
                }
                send(*a, d);
            }
            Op::SumCols(a) => {
                let x = self.value(*a);
                let mut d = Array2::zeros(x.raw_dim());
                for mut row in d.rows_mut() {
                    row.assign(&g.row(0));
                }
                send(*a, d);
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let mut d = Array2::zeros(x.raw_dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                send(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    send(*p, g.slice(s![.., off..off + w]).to_owned());
                    off += w;
                }
            }
            Op::Transpose(a) => send(*a, g.t().to_owned()),
            Op::SoftmaxRows(z) => {
                let y = &node.data;
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot: T = drow.iter().copied().sum();
                    ndarray::Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|dv, &yv| *dv -= yv * dot);
                }
                send(*z, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check(build: impl Fn(&mut Graph<f64>, Var) -> Var, x0: Array2<f64>) {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let root = build(&mut g, x);
        g.backward(root).unwrap();
        let analytic = g.grad(x).clone();
        let h = 1e-5;
        for idx in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.as_slice_mut().unwrap()[idx] += delta;
                let mut g = Graph::new();
                let x = g.param(xp);
                let r = build(&mut g, x);
                g.scalar(r)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            let tol = (1e-4 * a.abs().max(fd.abs())).max(1e-6);
            assert!((a - fd).abs() <= tol, "coord {idx}: analytic {a} vs fd {fd}");
        }
    }

    #[test]
    fn matmul_identity_and_selection() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let i = g.constant(Array2::eye(2));
        let p = g.matmul(a, i).unwrap();
        assert_eq!(g.value(p), &array![[1.0, 2.0], [3.0, 4.0]]);

        let r = g.constant(array![[1.0, 0.0]]);
        let c = g.constant(array![[2.0], [5.0]]);
        let p = g.matmul(r, c).unwrap();
        assert_eq!(g.value(p), &array![[2.0]]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Array2::zeros((2, 3)));
        let b = g.constant(Array2::zeros((2, 3)));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("(2, 3) vs (2, 3)"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_fd() {
        let a0 = array![
            [0.3, -1.2, 0.5, 1.9],
            [1.1, 0.4, -0.7, 0.2],
            [-1.5, 0.8, 0.9, -0.3]
        ];
        let b0 = array![[0.2, -0.4], [1.3, 0.6], [-0.9, 1.7], [0.5, -1.1]];
        fd_check(
            move |g, a| {
                let b = g.constant(b0.clone());
                let p = g.matmul(a, b).unwrap();
                g.sum(p)
            },
            a0,
        );
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(array![[0.0, 0.0, 0.0, 0.0], [1000.0, 0.0, 0.0, 0.0]]);
        let y = g.softmax_rows(z).unwrap();
        let y = g.value(y);
        for v in y.row(0) {
            assert_eq!(*v, 0.25);
        }
        assert!((y[[1, 0]] - 1.0).abs() < 1e-12 && y[[1, 1]] < 1e-300);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(array![[f64::NAN, 0.0]]);
        assert!(matches!(g.softmax_rows(z), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_gradient_matches_fd() {
        let w = array![[0.7, -1.3, 2.1]];
        fd_check(
            move |g, z| {
                let y = g.softmax_rows(z).unwrap();
                let w = g.constant(w.clone());
                let p = g.mul(y, w).unwrap();
                g.sum(p)
            },
            array![[1.0, 2.0, 3.0]],
        );
    }

    #[test]
    fn log_clamps_at_floor() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(array![[0.0]]);
        let y = g.log(x).unwrap();
        assert_eq!(g.scalar(y), 1e-12f64.ln());
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(array![[-1.0, 2.0]]);
        let y = g.relu(x);
        assert_eq!(g.value(y), &array![[0.0, 2.0]]);
    }

    #[test]
    fn sum_and_mean_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Array2::ones((2, 2)));
        let s = g.sum(x);
        assert_eq!(g.scalar(s), 4.0);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &Array2::ones((2, 2)));

        let mut g = Graph::<f64>::new();
        let x = g.param(Array2::from_elem((2, 5), 3.0));
        let m = g.mean(x);
        g.backward(m).unwrap();
        assert!(g.grad(x).iter().all(|&v| v == 0.1));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Array2::ones((2, 2)));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates_and_zero_grad_resets() {
        let mut g = Graph::<f64>::new();
        let x = g.param(array![[1.0, -2.0]]);
        let c = g.constant(array![[3.0, 4.0]]);
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &array![[6.0, 8.0]]);
        assert_eq!(g.grad(c), &array![[0.0, 0.0]]);
        g.zero_grad();
        assert_eq!(g.grad(x), &array![[0.0, 0.0]]);
    }

    #[test]
    fn node_reuse_sums_gradients() {
        fd_check(
            |g, x| {
                let y = g.mul(x, x).unwrap();
                let z = g.add(y, x).unwrap();
                g.sum(z)
            },
            array![[0.5, -1.5], [2.0, 0.1]],
        );
    }

    #[test]
    fn composite_graph_of_every_op_matches_fd() {
        let row = array![[0.1, -0.2, 0.3]];
        fd_check(
            move |g, x| {
                let r = g.constant(row.clone());
                let xt = g.transpose(x);
                let xtx = g.matmul(xt, x).unwrap(); // 3x3
                let a = g.add_row(xtx, r).unwrap();
                let sc = g.scale(a, 0.25);
                let e = g.exp(sc);
                let rl = g.relu(a);
                let m = g.sub(e, rl).unwrap();
                let left = g.slice_cols(m, 0, 1).unwrap();
                let right = g.slice_cols(m, 1, 3).unwrap();
                let cat = g.concat_cols(&[right, left]).unwrap();
                let sm = g.softmax_rows(cat).unwrap();
                let rs = g.sum_rows(sm);
                let cs = g.sum_cols(sm);
                let lc = g.log(cs).unwrap();
                let rsum = g.mean(rs);
                let lsum = g.sum(lc);
                let tot = g.add(rsum, lsum).unwrap();
                let xm = g.mean(x);
                g.add(tot, xm).unwrap()
            },
            array![[0.4, -0.6, 1.1], [0.9, 0.3, -1.2]],
        );
    }

    #[test]
    fn constant_nodes_keep_zero_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.param(array![[1.0, 2.0]]);
        let c = g.constant(array![[1.0], [1.0]]);
        let p = g.matmul(x, c).unwrap();
        g.backward(p).unwrap();
        assert!(g.grad(c).iter().all(|&v| v == 0.0));
        assert_eq!(g.grad(x), &array![[1.0, 1.0]]);
    }
}
