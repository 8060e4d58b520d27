//! Reverse-mode automatic differentiation over row-major `f64` matrices.
//!
//! Every value on the tape is a 2-D matrix whose rows are batch entries.
//! Leaves are either constants (never receive a gradient) or tracked
//! parameters. An op result is tracked iff one of its inputs is, so frozen
//! weights registered as constants stay outside the gradient path entirely.

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    RepeatRows(Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Silu(Var),
    Exp(Var),
    Recip(Var),
    Clamp(Var, f64, f64),
    RowNormalize { input: Var, norms: Vec<f64> },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Matrix },
    MeanRowSquaredNorm(Var),
    SumAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

/// Linear recording of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`]. Untracked nodes have none.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, var: Var, like: &Matrix) -> Matrix {
        self.get(var).cloned().unwrap_or_else(|| Matrix::zeros(like.raw_dim()))
    }
}

fn shape(m: &Matrix) -> (usize, usize) {
    (m.nrows(), m.ncols())
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

    fn push(&mut self, value: Matrix, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.tracked(v)
    }

    /// Number of tracked leaves, i.e. the parameters a backward pass can reach.
    pub fn tracked_leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.tracked && matches!(n.op, Op::Leaf))
            .count()
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant row vector.
    pub fn row(&mut self, values: &[f64]) -> Var {
        let m = Matrix::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape");
        self.constant(m)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul shape {:?} x {:?}", shape(va), shape(vb));
        let out = va.dot(vb);
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::MatMul(a, b), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(shape(self.value(a)), shape(self.value(b)), "add shape");
        let out = self.value(a) + self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(shape(self.value(a)), shape(self.value(b)), "sub shape");
        let out = self.value(a) - self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Sub(a, b), t)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(shape(self.value(a)), shape(self.value(b)), "mul shape");
        let out = self.value(a) * self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Mul(a, b), t)
    }

    /// `x + row` with `row` (1×n) broadcast over the rows of `x` (B×n).
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (vx, vr) = (self.value(x), self.value(row));
        assert_eq!(vr.nrows(), 1, "add_row expects a row vector");
        assert_eq!(vx.ncols(), vr.ncols(), "add_row width");
        let out = vx + vr;
        let t = self.tracked(x) || self.tracked(row);
        self.push(out, Op::AddRow(x, row), t)
    }

    /// Broadcast a 1×n row to `rows`×n.
    pub fn repeat_rows(&mut self, row: Var, rows: usize) -> Var {
        let vr = self.value(row);
        assert_eq!(vr.nrows(), 1, "repeat_rows expects a row vector");
        let out = vr
            .broadcast((rows, vr.ncols()))
            .expect("broadcast")
            .to_owned();
        let t = self.tracked(row);
        self.push(out, Op::RepeatRows(row), t)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x) * k;
        let t = self.tracked(x);
        self.push(out, Op::Scale(x, k), t)
    }

    /// `a·ka + b·kb`.
    pub fn axpby(&mut self, a: Var, ka: f64, b: Var, kb: f64) -> Var {
        let sa = self.scale(a, ka);
        let sb = self.scale(b, kb);
        self.add(sa, sb)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::tanh);
        let t = self.tracked(x);
        self.push(out, Op::Tanh(x), t)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        let t = self.tracked(x);
        self.push(out, Op::Relu(x), t)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v / (1.0 + (-v).exp()));
        let t = self.tracked(x);
        self.push(out, Op::Silu(x), t)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::exp);
        let t = self.tracked(x);
        self.push(out, Op::Exp(x), t)
    }

    /// Elementwise `1/x`.
    pub fn recip(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::recip);
        let t = self.tracked(x);
        self.push(out, Op::Recip(x), t)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).mapv(|v| v.clamp(lo, hi));
        let t = self.tracked(x);
        self.push(out, Op::Clamp(x, lo, hi), t)
    }

    /// Divide every row by its Euclidean norm. Zero rows are an error.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let norms: Vec<f64> = vx
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect();
        if let Some(row) = norms.iter().position(|n| !(*n > 0.0) || !n.is_finite()) {
            return Err(Error::Degenerate(format!(
                "row {row} has norm {} and cannot be normalized",
                norms[row]
            )));
        }
        let mut out = vx.clone();
        for (mut r, n) in out.rows_mut().into_iter().zip(&norms) {
            r /= *n;
        }
        let t = self.tracked(x);
        Ok(self.push(out, Op::RowNormalize { input: x, norms }, t))
    }

    /// Mean over rows of `-log softmax(logits)[target]`. Produces a 1×1 node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.nrows(), targets.len(), "one target per row");
        let probs = softmax_rows(vl);
        let mut loss = 0.0;
        for (b, &y) in targets.iter().enumerate() {
            let row = vl.row(b);
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        loss /= targets.len() as f64;
        let t = self.tracked(logits);
        self.push(
            Matrix::from_elem((1, 1), loss),
            Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), probs },
            t,
        )
    }

    /// Mean over rows of the squared row norm. Produces a 1×1 node.
    pub fn mean_row_squared_norm(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let v = vx.iter().map(|a| a * a).sum::<f64>() / vx.nrows() as f64;
        let t = self.tracked(x);
        self.push(Matrix::from_elem((1, 1), v), Op::MeanRowSquaredNorm(x), t)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        let t = self.tracked(x);
        self.push(Matrix::from_elem((1, 1), v), Op::SumAll(x), t)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(shape(m), (1, 1), "not a scalar node");
        m[[0, 0]]
    }

    /// Back-propagate from a 1×1 node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(shape(self.value(loss)), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.tracked(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Matrix::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            // Leaves keep their gradient for the caller; intermediates are dropped.
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.tracked(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.tracked(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.tracked(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.tracked(*b) {
                        accumulate(&mut grads, *b, -&g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.tracked(*b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::AddRow(x, row) => {
                    if self.tracked(*row) {
                        accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.tracked(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::RepeatRows(row) => {
                    accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Scale(x, k) => accumulate(&mut grads, *x, g * *k),
                Op::Tanh(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(&node.value).for_each(|gi, &y| *gi *= 1.0 - y * y);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|gi, &v| {
                        if v <= 0.0 {
                            *gi = 0.0
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Silu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|gi, &v| {
                        let s = 1.0 / (1.0 + (-v).exp());
                        *gi *= s * (1.0 + v * (1.0 - s));
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Exp(x) => {
                    let gx = g * &node.value;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Recip(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(&node.value).for_each(|gi, &y| *gi *= -y * y);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Clamp(x, lo, hi) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|gi, &v| {
                        if v < *lo || v > *hi {
                            *gi = 0.0
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::RowNormalize { input, norms } => {
                    let y = &node.value;
                    let mut gx = g.clone();
                    for (b, n) in norms.iter().enumerate() {
                        let yr = y.row(b);
                        let gr = g.row(b);
                        let proj = yr.dot(&gr);
                        let mut out = gx.row_mut(b);
                        Zip::from(&mut out)
                            .and(&yr)
                            .and(&gr)
                            .for_each(|o, &yi, &gi| *o = (gi - yi * proj) / n);
                    }
                    accumulate(&mut grads, *input, gx);
                }
                Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                    let scale = g[[0, 0]] / targets.len() as f64;
                    let mut gx = probs.clone();
                    for (b, &y) in targets.iter().enumerate() {
                        gx[[b, y]] -= 1.0;
                    }
                    gx *= scale;
                    accumulate(&mut grads, *logits, gx);
                }
                Op::MeanRowSquaredNorm(x) => {
                    let vx = self.value(*x);
                    let k = 2.0 * g[[0, 0]] / vx.nrows() as f64;
                    accumulate(&mut grads, *x, vx * k);
                }
                Op::SumAll(x) => {
                    let vx = self.value(*x);
                    accumulate(&mut grads, *x, Matrix::from_elem(vx.raw_dim(), g[[0, 0]]));
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix {
        Matrix::from_shape_fn((r, c), |_| rng.random_range(lo..hi))
    }

    /// Compare the tape gradient of `f` at `x` against central differences.
    fn check(x: &Matrix, f: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let out = f(&mut tape, v);
        let grads = tape.backward(out);
        let g = grads.get(v).expect("gradient");
        let h = 1e-6;
        for idx in 0..x.len() {
            let (i, j) = (idx / x.ncols(), idx % x.ncols());
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp[[i, j]] += delta;
                let mut t = Tape::new();
                let v = t.constant(xp);
                let o = f(&mut t, v);
                t.scalar(o)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - g[[i, j]]).abs() <= 1e-6 * (1.0 + fd.abs()), "({i},{j}) fd {fd} tape {}", g[[i, j]]);
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 3, 4, -1.5, 1.5);
        let w = random(&mut rng, 3, 4, -1.0, 1.0);
        let with_w = move |t: &mut Tape, v: Var, y: Var| {
            let wv = t.constant(w.clone());
            let p = t.mul(y, wv);
            let _ = v;
            t.sum_all(p)
        };
        check(&x, |t, v| {
            let y = t.tanh(v);
            with_w(t, v, y)
        });
        check(&x, |t, v| {
            let y = t.silu(v);
            with_w(t, v, y)
        });
        check(&x, |t, v| {
            let y = t.exp(v);
            with_w(t, v, y)
        });
        check(&x, |t, v| {
            let y = t.scale(v, -2.5);
            let y = t.axpby(y, 0.5, v, 3.0);
            with_w(t, v, y)
        });
        let pos = random(&mut rng, 3, 4, 0.5, 2.0);
        check(&pos, |t, v| {
            let y = t.recip(v);
            with_w(t, v, y)
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 3, 4, -1.0, 1.0);
        let m = random(&mut rng, 4, 2, -1.0, 1.0);
        let r = random(&mut rng, 1, 4, -1.0, 1.0);
        check(&x, |t, v| {
            let mv = t.constant(m.clone());
            let y = t.matmul(v, mv);
            t.mean_row_squared_norm(y)
        });
        check(&m, |t, v| {
            let xv = t.constant(x.clone());
            let y = t.matmul(xv, v);
            t.mean_row_squared_norm(y)
        });
        check(&r, |t, v| {
            let xv = t.constant(x.clone());
            let y = t.add_row(xv, v);
            let z = t.repeat_rows(v, 3);
            let y = t.sub(y, z);
            let y = t.mul(y, y);
            let y = t.add(y, xv);
            t.mean_row_squared_norm(y)
        });
        check(&x, |t, v| {
            let y = t.row_normalize(v).unwrap();
            let y = t.mul(y, v);
            t.sum_all(y)
        });
        check(&x, |t, v| t.softmax_cross_entropy(v, &[0, 3, 1]));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::ones((2, 2)));
        let b = tape.param(Matrix::ones((2, 2)));
        let p = tape.mul(a, b);
        let s = tape.sum_all(p);
        let g = tape.backward(s);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap(), &Matrix::ones((2, 2)));
        assert_eq!(tape.tracked_leaf_count(), 1);
    }

    #[test]
    fn zero_row_normalization_is_degenerate() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::zeros((1, 3)));
        assert!(matches!(tape.row_normalize(x), Err(Error::Degenerate(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(&ndarray::array![[1000.0, 0.0], [1.0, 1.0]]);
        assert!((p[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((p[[1, 0]] - 0.5).abs() < 1e-15);
    }
}
