//! Tape-based reverse-mode automatic differentiation over `f64` matrices.
//!
//! Every value on the tape is a 2-D array; scalars are 1x1. Operations are
//! recorded eagerly, `backward` walks the tape once in reverse and accumulates
//! gradients for every node. Discrete choices (neighbor sets, argmax rows,
//! median positions) are never tape operations: callers compute index lists
//! from node *values* and record them as gathers, so the recorded graph is
//! smooth and finite differences of the same graph agree with the analytic
//! gradients.

use ndarray::{Array2, Axis};
use std::rc::Rc;

pub type VarId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a (n x m) · b (m x p)
    MatMul(VarId, VarId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    /// elementwise product, same shape
    Mul(VarId, VarId),
    /// a (n x d) + row (1 x d) broadcast over rows
    AddRow(VarId, VarId),
    /// a (n x d) scaled per row by s (n x 1)
    RowScale(VarId, VarId),
    /// a (n x d) scaled by scalar node s (1 x 1)
    ScaleByScalar(VarId, VarId),
    Scale(VarId, f64),
    AddConst(VarId, f64),
    LeakyRelu(VarId, f64),
    Exp(VarId),
    Ln(VarId),
    Sqrt(VarId),
    Recip(VarId),
    /// n x d -> n x 1 sum over columns
    RowSum(VarId),
    /// -> 1 x 1
    SumAll(VarId),
    /// (g*k) x d -> g x d, summing consecutive blocks of k rows
    SumGroups(VarId, usize),
    GatherRows(VarId, Rc<Vec<usize>>),
    /// columns [c0, c1)
    SliceCols(VarId, usize, usize),
    ConcatCols(VarId, VarId),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Recorded computation graph.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    /// Scalar payload of a 1x1 node.
    pub fn scalar(&self, id: VarId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.dim(), (1, 1));
        self.nodes[id].value[(0, 0)]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> VarId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> VarId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> VarId {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: VarId, row: VarId) -> VarId {
        debug_assert_eq!(self.nodes[row].value.nrows(), 1);
        let v = &self.nodes[a].value + &self.nodes[row].value;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn row_scale(&mut self, a: VarId, s: VarId) -> VarId {
        debug_assert_eq!(self.nodes[s].value.ncols(), 1);
        debug_assert_eq!(self.nodes[a].value.nrows(), self.nodes[s].value.nrows());
        let v = &self.nodes[a].value * &self.nodes[s].value;
        self.push(v, Op::RowScale(a, s))
    }

    pub fn scale_by_scalar(&mut self, a: VarId, s: VarId) -> VarId {
        let sv = self.scalar(s);
        let v = &self.nodes[a].value * sv;
        self.push(v, Op::ScaleByScalar(a, s))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let v = &self.nodes[a].value * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: VarId, c: f64) -> VarId {
        let v = &self.nodes[a].value + c;
        self.push(v, Op::AddConst(a, c))
    }

    pub fn leaky_relu(&mut self, a: VarId, alpha: f64) -> VarId {
        let v = self.nodes[a].value.mapv(|x| if x > 0.0 { x } else { alpha * x });
        self.push(v, Op::LeakyRelu(a, alpha))
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a].value.mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a].value.mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a].value.mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a].value.mapv(|x| 1.0 / x);
        self.push(v, Op::Recip(a))
    }

    pub fn row_sum(&mut self, a: VarId) -> VarId {
        let s = self.nodes[a].value.sum_axis(Axis(1));
        let n = s.len();
        let v = s.into_shape_with_order((n, 1)).expect("row_sum reshape");
        self.push(v, Op::RowSum(a))
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let v = Array2::from_elem((1, 1), self.nodes[a].value.sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn sum_groups(&mut self, a: VarId, k: usize) -> VarId {
        let av = &self.nodes[a].value;
        let (n, d) = av.dim();
        debug_assert_eq!(n % k, 0);
        let g = n / k;
        let mut v = Array2::zeros((g, d));
        for i in 0..g {
            for r in 0..k {
                for c in 0..d {
                    v[(i, c)] += av[(i * k + r, c)];
                }
            }
        }
        self.push(v, Op::SumGroups(a, k))
    }

    pub fn gather_rows(&mut self, a: VarId, idx: Rc<Vec<usize>>) -> VarId {
        let av = &self.nodes[a].value;
        let d = av.ncols();
        let mut v = Array2::zeros((idx.len(), d));
        for (out, &src) in idx.iter().enumerate() {
            for c in 0..d {
                v[(out, c)] = av[(src, c)];
            }
        }
        self.push(v, Op::GatherRows(a, idx))
    }

    pub fn slice_cols(&mut self, a: VarId, c0: usize, c1: usize) -> VarId {
        let v = self.nodes[a].value.slice(ndarray::s![.., c0..c1]).to_owned();
        self.push(v, Op::SliceCols(a, c0, c1))
    }

    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> VarId {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        debug_assert_eq!(av.nrows(), bv.nrows());
        let v = ndarray::concatenate(Axis(1), &[av.view(), bv.view()]).expect("concat_cols");
        self.push(v, Op::ConcatCols(a, b))
    }

    /// mean of squared row norms: (1/n) sum_i ||a_i||^2, as a 1x1 node
    pub fn mean_row_sumsq(&mut self, a: VarId) -> VarId {
        let n = self.nodes[a].value.nrows();
        let sq = self.mul(a, a);
        let total = self.sum_all(sq);
        self.scale(total, 1.0 / n as f64)
    }

    /// per-row L2 norm as an n x 1 node; gradient at a zero row is zero
    pub fn row_norm(&mut self, a: VarId) -> VarId {
        let sq = self.mul(a, a);
        let ss = self.row_sum(sq);
        self.sqrt(ss)
    }

    /// Reverse pass from a 1x1 node; returns per-node gradients.
    pub fn backward(&self, from: VarId) -> Gradients {
        assert_eq!(
            self.nodes[from].value.dim(),
            (1, 1),
            "backward starts from a scalar node"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[from] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=from).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[*b].value.t());
                    let gb = self.nodes[*a].value.t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[*b].value;
                    let gb = &g * &self.nodes[*a].value;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let grow = g.sum_axis(Axis(0));
                    let d = grow.len();
                    let grow = grow.into_shape_with_order((1, d)).expect("addrow grad");
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *row, grow);
                }
                Op::RowScale(a, s) => {
                    let ga = &g * &self.nodes[*s].value;
                    let gs = (&g * &self.nodes[*a].value).sum_axis(Axis(1));
                    let n = gs.len();
                    let gs = gs.into_shape_with_order((n, 1)).expect("rowscale grad");
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *s, gs);
                }
                Op::ScaleByScalar(a, s) => {
                    let sv = self.nodes[*s].value[(0, 0)];
                    let ga = &g * sv;
                    let gs = Array2::from_elem((1, 1), (&g * &self.nodes[*a].value).sum());
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *s, gs);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, &g * *c),
                Op::AddConst(a, _) => accumulate(&mut grads, *a, g),
                Op::LeakyRelu(a, alpha) => {
                    let mask = self.nodes[*a].value.mapv(|x| if x > 0.0 { 1.0 } else { *alpha });
                    accumulate(&mut grads, *a, &g * &mask);
                }
                Op::Exp(a) => {
                    let ga = &g * &self.nodes[id].value;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Ln(a) => {
                    let ga = &g / &self.nodes[*a].value;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    // subgradient 0 at sqrt(0): row-norm gradients vanish at the centre
                    let out = &self.nodes[id].value;
                    let ga = ndarray::Zip::from(&g).and(out).map_collect(|&gv, &ov| {
                        if ov > 0.0 {
                            gv * 0.5 / ov
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Recip(a) => {
                    let av = &self.nodes[*a].value;
                    let ga = ndarray::Zip::from(&g)
                        .and(av)
                        .map_collect(|&gv, &xv| -gv / (xv * xv));
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowSum(a) => {
                    let (n, d) = self.nodes[*a].value.dim();
                    let mut ga = Array2::zeros((n, d));
                    for i in 0..n {
                        let gi = g[(i, 0)];
                        for c in 0..d {
                            ga[(i, c)] = gi;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let gv = g[(0, 0)];
                    let ga = Array2::from_elem(self.nodes[*a].value.dim(), gv);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumGroups(a, k) => {
                    let (n, d) = self.nodes[*a].value.dim();
                    let mut ga = Array2::zeros((n, d));
                    for i in 0..n {
                        for c in 0..d {
                            ga[(i, c)] = g[(i / k, c)];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let (n, d) = self.nodes[*a].value.dim();
                    let mut ga = Array2::zeros((n, d));
                    for (out, &src) in idx.iter().enumerate() {
                        for c in 0..d {
                            ga[(src, c)] += g[(out, c)];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, c0, _c1) => {
                    let (n, d) = self.nodes[*a].value.dim();
                    let mut ga = Array2::zeros((n, d));
                    for i in 0..g.nrows() {
                        for c in 0..g.ncols() {
                            ga[(i, c0 + c)] = g[(i, c)];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let wa = self.nodes[*a].value.ncols();
                    let ga = g.slice(ndarray::s![.., ..wa]).to_owned();
                    let gb = g.slice(ndarray::s![.., wa..]).to_owned();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
            }
        }
        Gradients { grads }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: VarId, g: Array2<f64>) {
    match &mut grads[id] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Array2<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zeros if the leaf did not influence the output.
    pub fn of(&self, id: VarId, shape: (usize, usize)) -> Array2<f64> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// central finite difference of a scalar-valued tape program w.r.t. one leaf entry
    fn fd_check<F>(build: F, leaf_value: Array2<f64>, rtol: f64)
    where
        F: Fn(&mut Tape, VarId) -> VarId,
    {
        let h = 1e-6;
        let mut tape = Tape::new();
        let x = tape.leaf(leaf_value.clone());
        let out = build(&mut tape, x);
        let grads = tape.backward(out);
        let analytic = grads.of(x, leaf_value.dim());

        for i in 0..leaf_value.nrows() {
            for j in 0..leaf_value.ncols() {
                let mut vp = leaf_value.clone();
                vp[(i, j)] += h;
                let mut tp = Tape::new();
                let xp = tp.leaf(vp);
                let op = build(&mut tp, xp);
                let fp = tp.scalar(op);

                let mut vm = leaf_value.clone();
                vm[(i, j)] -= h;
                let mut tm = Tape::new();
                let xm = tm.leaf(vm);
                let om = build(&mut tm, xm);
                let fm = tm.scalar(om);

                let fd = (fp - fm) / (2.0 * h);
                let a = analytic[(i, j)];
                let denom = a.abs().max(fd.abs()).max(1e-8);
                assert!(
                    (a - fd).abs() / denom < rtol,
                    "entry ({i},{j}): analytic={a}, fd={fd}"
                );
            }
        }
    }

    #[test]
    fn matmul_chain_gradient() {
        let w = array![[0.3, -0.5, 0.2], [0.8, 0.1, -0.4]];
        fd_check(
            |t, x| {
                let c = t.leaf(array![[1.0, -2.0], [0.5, 0.25], [2.0, 1.0]]);
                let y = t.matmul(x, c);
                let sq = t.mul(y, y);
                t.sum_all(sq)
            },
            w,
            1e-5,
        );
    }

    #[test]
    fn elementwise_ops_gradient() {
        let x = array![[0.7, -1.3], [0.2, 2.1]];
        fd_check(
            |t, x| {
                let e = t.exp(x);
                let r = t.leaky_relu(x, 0.1);
                let m = t.mul(e, r);
                let s = t.scale(m, 0.5);
                let c = t.add_const(s, 1.5);
                let ln = t.ln(c);
                t.sum_all(ln)
            },
            x,
            1e-4,
        );
    }

    #[test]
    fn row_ops_gradient() {
        let x = array![[0.7, -1.3, 0.4], [0.2, 2.1, -0.9]];
        fd_check(
            |t, x| {
                let nrm = t.row_norm(x);
                let e = t.add_const(nrm, 0.05);
                let inv = t.recip(e);
                let xb = t.row_scale(x, inv);
                let rs = t.row_sum(xb);
                let sq = t.mul(rs, rs);
                t.sum_all(sq)
            },
            x,
            1e-4,
        );
    }

    #[test]
    fn gather_concat_slice_gradient() {
        let x = array![[0.7, -1.3], [0.2, 2.1], [1.1, -0.4]];
        fd_check(
            |t, x| {
                let idx = Rc::new(vec![2usize, 0, 0, 1]);
                let g = t.gather_rows(x, idx);
                let left = t.slice_cols(g, 0, 1);
                let right = t.slice_cols(g, 1, 2);
                let j = t.concat_cols(right, left);
                let s = t.mul(j, g);
                let grp = t.sum_groups(s, 2);
                let tot = t.sum_all(grp);
                t.scale(tot, 0.25)
            },
            x,
            1e-5,
        );
    }

    #[test]
    fn scalar_broadcast_gradient() {
        let x = array![[0.4, 1.2], [-0.3, 0.9]];
        fd_check(
            |t, x| {
                let s = t.sum_all(x);
                let sb = t.scale_by_scalar(x, s);
                let sq = t.mul(sb, sb);
                let row = t.leaf(array![[0.5, -1.5]]);
                let a = t.add_row(sq, row);
                t.sum_all(a)
            },
            x,
            1e-5,
        );
    }

    #[test]
    fn sqrt_zero_row_subgradient_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[0.0, 0.0], [3.0, 4.0]]);
        let n = tape.row_norm(x);
        let s = tape.sum_all(n);
        assert_eq!(tape.scalar(s), 5.0);
        let g = tape.backward(s).of(x, (2, 2));
        assert_eq!(g[(0, 0)], 0.0);
        assert_eq!(g[(0, 1)], 0.0);
        assert!((g[(1, 0)] - 3.0 / 5.0).abs() < 1e-12);
        assert!((g[(1, 1)] - 4.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_probe_matches_known_gradient() {
        // f(w) = ||w||^2 has gradient 2w
        let w = array![[1.5, -2.0, 0.25]];
        let mut tape = Tape::new();
        let x = tape.leaf(w.clone());
        let sq = tape.mul(x, x);
        let f = tape.sum_all(sq);
        let g = tape.backward(f).of(x, (1, 3));
        for j in 0..3 {
            assert!((g[(0, j)] - 2.0 * w[(0, j)]).abs() < 1e-12);
        }
    }
}
