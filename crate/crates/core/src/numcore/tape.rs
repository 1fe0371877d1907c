//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Every primitive appends one node holding its forward value. Calling
//! [`Tape::backward`] on a 1x1 node walks the nodes in reverse creation
//! order, visiting each exactly once, and accumulates gradients into the
//! parents of every node that received one.

use std::borrow::Cow;

use super::matrix::{gemm, log_sigmoid, logsumexp_nonempty, sigmoid, Matrix};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    LogSigmoid(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumRows(Var),
    LogSumExpRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Var, Var),
    L2NormalizeRows(Var),
    PairwiseGaussLogPdf { z: Var, mean: Var, log_var: Var },
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
}

/// A recording of primitive ops for one forward/backward pass. Leaves may
/// borrow their values for `'a`.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of a scalar output with respect to every node on a tape.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; exactly zero if `v` did not influence the output.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn shape_err(what: &str, a: &Matrix, b: &Matrix) -> Error {
    Error::Shape(format!(
        "{what}: {}x{} vs {}x{}",
        a.rows(),
        a.cols(),
        b.rows(),
        b.cols()
    ))
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf node. Parameters and constants are both leaves; gradients are
    /// available for either.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf borrowing its value, e.g. a model parameter.
    pub fn leaf_ref(&mut self, value: &'a Matrix) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Adds the 1xcols row vector `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(shape_err("row broadcast", av, bv));
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(log_sigmoid);
        self.push(value, Op::LogSigmoid(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Per-row sums as an nx1 column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Matrix::from_fn(av.rows(), 1, |r, _| av.row(r).iter().sum());
        self.push(value, Op::SumRows(a))
    }

    /// Per-row log-sum-exp as an nx1 column.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.cols() == 0 {
            return Err(Error::Domain("logsumexp over zero columns".into()));
        }
        let value = Matrix::from_fn(av.rows(), 1, |r, _| logsumexp_nonempty(av.row(r)));
        Ok(self.push(value, Op::LogSumExpRows(a)))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.cols() == 0 {
            return Err(Error::Domain("log-softmax over zero columns".into()));
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            let lse = logsumexp_nonempty(value.row(r));
            for x in value.row_mut(r) {
                *x -= lse;
            }
        }
        Ok(self.push(value, Op::LogSoftmaxRows(a)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_cols(self.value(b))?;
        Ok(self.push(value, Op::ConcatCols(a, b)))
    }

    /// Scales every row to unit Euclidean norm. All-zero rows pass through.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
        self.push(value, Op::L2NormalizeRows(a))
    }

    /// Log-density of every row of `z` (BxD) under every diagonal Gaussian
    /// component `(mean[k], log_var[k])` (KxD each). Returns BxK.
    pub fn pairwise_gauss_log_pdf(&mut self, z: Var, mean: Var, log_var: Var) -> Result<Var> {
        let (zv, mv, lv) = (self.value(z), self.value(mean), self.value(log_var));
        if mv.shape() != lv.shape() {
            return Err(shape_err("gaussian components", mv, lv));
        }
        if zv.cols() != mv.cols() {
            return Err(shape_err("gaussian evaluation point", zv, mv));
        }
        let d = zv.cols();
        let inv_var = lv.map(|x| (-x).exp());
        let log_norm: Vec<f64> = (0..mv.rows())
            .map(|k| -0.5 * (d as f64 * super::LN_2PI + lv.row(k).iter().sum::<f64>()))
            .collect();
        let value = Matrix::from_fn(zv.rows(), mv.rows(), |b, k| {
            let quad: f64 = zv
                .row(b)
                .iter()
                .zip(mv.row(k))
                .zip(inv_var.row(k))
                .map(|((z, m), iv)| (z - m) * (z - m) * iv)
                .sum();
            log_norm[k] - 0.5 * quad
        });
        Ok(self.push(
            value,
            Op::PairwiseGaussLogPdf { z, mean, log_var },
        ))
    }

    /// Reverse sweep from the 1x1 node `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let out_value = self.value(out);
        if out_value.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward from a {}x{} node; expected a scalar",
                out_value.rows(),
                out_value.cols()
            )));
        }
        let n = out.0 + 1;
        let mut grads: Vec<Option<Matrix>> = vec![None; n];
        grads[out.0] = Some(Matrix::scalar(1.0));

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(&node.op, node.value.as_ref(), &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes[..n].iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, op: &Op, y: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, delta: Matrix| match &mut grads[v.0] {
            Some(existing) => existing.add_assign_scaled(&delta, 1.0),
            slot @ None => *slot = Some(delta),
        };
        let zip = |a: &Matrix, b: &Matrix, f: fn(f64, f64) -> f64| {
            a.zip_map(b, f).expect("tape shapes are consistent")
        };
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(a, gemm(g, false, self.value(b), true));
                acc(b, gemm(self.value(a), true, g, false));
            }
            Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(a, zip(g, self.value(b), |g, b| g * b));
                acc(b, zip(g, self.value(a), |g, a| g * a));
            }
            Op::AddRow(a, bias) => {
                acc(a, g.clone());
                acc(bias, g.sum_cols());
            }
            Op::Scale(a, factor) => acc(a, g.map(|x| x * factor)),
            Op::AddScalar(a) => acc(a, g.clone()),
            Op::Sigmoid(a) => acc(a, zip(g, y, |g, s| g * s * (1.0 - s))),
            Op::Tanh(a) => acc(a, zip(g, y, |g, t| g * (1.0 - t * t))),
            Op::Exp(a) => acc(a, zip(g, y, |g, e| g * e)),
            Op::Log(a) => acc(a, zip(g, self.value(a), |g, x| g / x)),
            Op::LogSigmoid(a) => acc(a, zip(g, self.value(a), |g, x| g * sigmoid(-x))),
            Op::Clamp(a, lo, hi) => {
                let x = self.value(a);
                let d = Matrix::from_fn(x.rows(), x.cols(), |r, c| {
                    let v = x.get(r, c);
                    if v > lo && v < hi {
                        g.get(r, c)
                    } else {
                        0.0
                    }
                });
                acc(a, d);
            }
            Op::Sum(a) => {
                let x = self.value(a);
                acc(a, Matrix::filled(x.rows(), x.cols(), g.data()[0]));
            }
            Op::SumRows(a) => {
                let x = self.value(a);
                acc(a, Matrix::from_fn(x.rows(), x.cols(), |r, _| g.get(r, 0)));
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(a);
                acc(
                    a,
                    Matrix::from_fn(x.rows(), x.cols(), |r, c| {
                        g.get(r, 0) * (x.get(r, c) - y.get(r, 0)).exp()
                    }),
                );
            }
            Op::LogSoftmaxRows(a) => {
                let row_g: Vec<f64> = (0..g.rows()).map(|r| g.row(r).iter().sum()).collect();
                acc(
                    a,
                    Matrix::from_fn(y.rows(), y.cols(), |r, c| {
                        g.get(r, c) - y.get(r, c).exp() * row_g[r]
                    }),
                );
            }
            Op::ConcatCols(a, b) => {
                let split = self.value(a).cols();
                acc(a, Matrix::from_fn(g.rows(), split, |r, c| g.get(r, c)));
                acc(
                    b,
                    Matrix::from_fn(g.rows(), g.cols() - split, |r, c| g.get(r, split + c)),
                );
            }
            Op::L2NormalizeRows(a) => {
                let x = self.value(a);
                let mut d = g.clone();
                for r in 0..x.rows() {
                    let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(y, g)| y * g).sum();
                        for (c, out) in d.row_mut(r).iter_mut().enumerate() {
                            *out = (g.get(r, c) - y.get(r, c) * dot) / norm;
                        }
                    }
                }
                acc(a, d);
            }
            Op::PairwiseGaussLogPdf { z, mean, log_var } => {
                let (zv, mv, lv) = (self.value(z), self.value(mean), self.value(log_var));
                let inv_var = lv.map(|x| (-x).exp());
                let mut dz = Matrix::zeros(zv.rows(), zv.cols());
                let mut dm = Matrix::zeros(mv.rows(), mv.cols());
                let mut dlv = Matrix::zeros(lv.rows(), lv.cols());
                for b in 0..zv.rows() {
                    for k in 0..mv.rows() {
                        let gbk = g.get(b, k);
                        if gbk == 0.0 {
                            continue;
                        }
                        for d in 0..zv.cols() {
                            let diff = zv.get(b, d) - mv.get(k, d);
                            let iv = inv_var.get(k, d);
                            let scaled = gbk * diff * iv;
                            dz.row_mut(b)[d] -= scaled;
                            dm.row_mut(k)[d] += scaled;
                            dlv.row_mut(k)[d] += 0.5 * gbk * (diff * diff * iv - 1.0);
                        }
                    }
                }
                acc(z, dz);
                acc(mean, dm);
                acc(log_var, dlv);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(lo..hi))
    }

    /// Runs `build` on a fresh tape with `x` as leaf, reduces through a fixed
    /// random weighting so every output entry matters, and grad-checks.
    fn check_unary(
        points: usize,
        shape: (usize, usize),
        range: (f64, f64),
        build: impl Fn(&mut Tape, Var) -> Var,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..points {
            let x = random(&mut rng, shape.0, shape.1, range.0, range.1);
            let probe = {
                let mut t = Tape::new();
                let v = t.leaf(x.clone());
                let y = build(&mut t, v);
                t.value(y).shape()
            };
            let w = random(&mut rng, probe.0, probe.1, -1.0, 1.0);
            let f = |p: &Matrix| {
                let mut t = Tape::new();
                let v = t.leaf(p.clone());
                let y = build(&mut t, v);
                let wv = t.leaf(w.clone());
                let prod = t.mul(y, wv).unwrap();
                let s = t.sum(prod);
                let grads = t.backward(s).unwrap();
                Ok((t.value(s).item().unwrap(), grads.get(v)))
            };
            let err = grad_check(f, &x, 1e-5).unwrap();
            assert!(err < 1e-6, "relative error {err}");
        }
    }

    #[test]
    fn elementwise_primitives_pass_grad_check() {
        check_unary(100, (2, 3), (-2.0, 2.0), |t, v| t.sigmoid(v));
        check_unary(100, (2, 3), (-2.0, 2.0), |t, v| t.tanh(v));
        check_unary(100, (2, 3), (-2.0, 2.0), |t, v| t.exp(v));
        check_unary(100, (2, 3), (0.2, 3.0), |t, v| t.log(v));
        check_unary(100, (2, 3), (-4.0, 4.0), |t, v| t.log_sigmoid(v));
        check_unary(100, (2, 3), (-2.0, 2.0), |t, v| {
            let s = t.scale(v, 2.5);
            t.add_scalar(s, 1.0)
        });
    }

    #[test]
    fn binary_primitives_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let other = random(&mut rng, 2, 3, -1.0, 1.0);
        let right = random(&mut rng, 3, 4, -1.0, 1.0);
        let bias = random(&mut rng, 1, 3, -1.0, 1.0);
        check_unary(100, (2, 3), (-2.0, 2.0), |t, v| {
            let o = t.leaf(other.clone());
            let a = t.add(v, o).unwrap();
            let m = t.mul(a, v).unwrap();
            t.sub(m, o).unwrap()
        });
        check_unary(100, (2, 3), (-2.0, 2.0), |t, v| {
            let r = t.leaf(right.clone());
            t.matmul(v, r).unwrap()
        });
        check_unary(100, (4, 2), (-2.0, 2.0), |t, v| {
            let l = t.leaf(right.clone());
            t.matmul(l, v).unwrap()
        });
        check_unary(100, (2, 3), (-2.0, 2.0), |t, v| {
            let b = t.leaf(bias.clone());
            t.add_row(v, b).unwrap()
        });
        check_unary(100, (1, 3), (-2.0, 2.0), |t, v| {
            let a = t.leaf(other.clone());
            t.add_row(a, v).unwrap()
        });
        check_unary(100, (2, 3), (-2.0, 2.0), |t, v| {
            let a = t.leaf(other.clone());
            t.concat_cols(a, v).unwrap()
        });
    }

    #[test]
    fn reductions_pass_grad_check() {
        check_unary(100, (3, 5), (-3.0, 3.0), |t, v| t.logsumexp_rows(v).unwrap());
        check_unary(100, (3, 5), (-3.0, 3.0), |t, v| t.log_softmax_rows(v).unwrap());
        check_unary(100, (3, 5), (-3.0, 3.0), |t, v| t.sum_rows(v));
        check_unary(100, (3, 5), (0.1, 3.0), |t, v| t.l2_normalize_rows(v));
        check_unary(100, (2, 2), (-0.9, 0.9), |t, v| t.clamp(v, -1.0, 1.0));
    }

    #[test]
    fn pairwise_gaussian_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mean = random(&mut rng, 3, 2, -1.0, 1.0);
        let lv = random(&mut rng, 3, 2, -1.0, 1.0);
        let z = random(&mut rng, 4, 2, -1.0, 1.0);
        check_unary(100, (4, 2), (-2.0, 2.0), |t, v| {
            let (m, l) = (t.leaf(mean.clone()), t.leaf(lv.clone()));
            t.pairwise_gauss_log_pdf(v, m, l).unwrap()
        });
        check_unary(100, (3, 2), (-2.0, 2.0), |t, v| {
            let (zz, l) = (t.leaf(z.clone()), t.leaf(lv.clone()));
            t.pairwise_gauss_log_pdf(zz, v, l).unwrap()
        });
        check_unary(100, (3, 2), (-2.0, 2.0), |t, v| {
            let (zz, m) = (t.leaf(z.clone()), t.leaf(mean.clone()));
            t.pairwise_gauss_log_pdf(zz, m, v).unwrap()
        });
    }

    #[test]
    fn pairwise_gaussian_matches_standard_normal() {
        let mut t = Tape::new();
        let z = t.leaf(Matrix::zeros(1, 2));
        let m = t.leaf(Matrix::zeros(1, 2));
        let l = t.leaf(Matrix::zeros(1, 2));
        let out = t.pairwise_gauss_log_pdf(z, m, l).unwrap();
        assert!((t.value(out).get(0, 0) + 1.8378770664093453).abs() < 1e-15);
    }

    #[test]
    fn unused_leaf_gets_exact_zero_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::filled(2, 2, 3.0));
        let unused = t.leaf(Matrix::filled(3, 1, 1.0));
        let s = t.sum(a);
        let grads = t.backward(s).unwrap();
        assert_eq!(grads.get(unused), Matrix::zeros(3, 1));
        assert_eq!(grads.get(a), Matrix::filled(2, 2, 1.0));
    }

    #[test]
    fn shared_node_accumulates() {
        // y = sum(x * x) → dy/dx = 2x
        let mut t = Tape::new();
        let x = t.leaf(Matrix::row_vector(vec![1.0, -2.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let grads = t.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[2.0, -4.0]);
    }

    #[test]
    fn zero_row_normalization_passes_through() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros(1, 3));
        let y = t.l2_normalize_rows(x);
        assert_eq!(t.value(y), &Matrix::zeros(1, 3));
        let s = t.sum(y);
        let grads = t.backward(s).unwrap();
        assert_eq!(grads.get(x), Matrix::filled(1, 3, 1.0));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros(2, 2));
        assert!(matches!(t.backward(x), Err(Error::Shape(_))));
    }
}
