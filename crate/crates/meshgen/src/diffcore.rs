//! Minimal reverse-mode differentiation over the fixed op set the models
//! need: dense and sparse matrix products, add (with row broadcast),
//! subtract, scalar scale, transpose, reshape, column concat/slice, ELU,
//! mean-absolute (L1) loss, and sum. Everything is float64 and 2-D; a
//! scalar is a 1 x 1 array.
//!
//! A [`Tape`] records executed primitives in order; [`Tape::backward`]
//! walks them in exact reverse, accumulating adjoints into every value
//! that (transitively) depends on a `requires_grad` input. Sparse
//! operands are constants: their adjoint never materializes a dense
//! matrix, only the stored transpose is multiplied.
//!
//! The finite-difference harness [`check_gradients`] is the verification
//! gate for every primitive and every assembled model. ELU (alpha = 1)
//! and absolute value have non-smooth points; the tape tracks the closest
//! approach to such a kink so the harness can deterministically resample
//! inputs that sit too close for central differencing to be trusted.

use std::sync::Arc;

use ndarray::Array2;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::sparse::CsrMatrix;

/// Inputs closer than this to an ELU or L1 kink trigger a resample in
/// [`check_gradients`].
pub const KINK_MARGIN: f64 = 1e-3;

/// Resample attempts before the harness gives up and proceeds anyway.
pub const MAX_RESAMPLES: usize = 32;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("backward target must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// A sparse matrix packaged with its transpose so the backward pass can
/// apply the adjoint without densifying anything.
#[derive(Debug, Clone)]
pub struct SparseOp {
    fwd: Arc<CsrMatrix>,
    adj: Arc<CsrMatrix>,
}

impl SparseOp {
    pub fn new(m: CsrMatrix) -> Self {
        let adj = m.transpose();
        SparseOp { fwd: Arc::new(m), adj: Arc::new(adj) }
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.fwd
    }

    pub fn nrows(&self) -> usize {
        self.fwd.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.fwd.ncols()
    }
}

enum Op {
    Input,
    MatMul(Var, Var),
    Spmm(SparseOp, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    Elu(Var),
    L1(Var, Var),
    Sum(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    min_kink: f64,
    poisoned: Option<&'static str>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), min_kink: f64::INFINITY, poisoned: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.dim(), (1, 1), "scalar() on a non-scalar value");
        val[[0, 0]]
    }

    /// Smallest observed distance to an ELU or L1 non-smooth point during
    /// forward evaluation; infinity if no such op ran.
    pub fn min_kink_distance(&self) -> f64 {
        self.min_kink
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool, name: &'static str) -> Var {
        #[cfg(debug_assertions)]
        if self.poisoned.is_none() && value.iter().any(|v| !v.is_finite()) {
            self.poisoned = Some(name);
        }
        #[cfg(not(debug_assertions))]
        let _ = name;
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, value: Array2<f64>, requires_grad: bool) -> Var {
        self.push(value, Op::Input, requires_grad, "input")
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.input(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(
            av.ncols(),
            bv.nrows(),
            "matmul shape mismatch: {:?} x {:?}",
            av.dim(),
            bv.dim()
        );
        let value = av.dot(bv);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn spmm(&mut self, m: &SparseOp, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(
            m.ncols(),
            xv.nrows(),
            "spmm shape mismatch: {}x{} times {:?}",
            m.nrows(),
            m.ncols(),
            xv.dim()
        );
        let value = m.fwd.matmul_dense(xv);
        let rg = self.rg(x);
        self.push(value, Op::Spmm(m.clone(), x), rg, "spmm")
    }

    /// Elementwise sum of same-shape values.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.dim(), bv.dim(), "add shape mismatch");
        let value = av + bv;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg, "add")
    }

    /// Adds a 1 x F row vector to every row of an n x F value.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        assert_eq!(rv.nrows(), 1, "add_row needs a 1 x F row");
        assert_eq!(av.ncols(), rv.ncols(), "add_row width mismatch");
        let mut value = av.clone();
        for mut r in value.rows_mut() {
            for (x, y) in r.iter_mut().zip(rv.row(0)) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg, "add_row")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.dim(), bv.dim(), "sub shape mismatch");
        let value = av - bv;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg, "sub")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value * c;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg, "scale")
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let (r, c) = av.dim();
        let mut value = Array2::zeros((c, r));
        for i in 0..r {
            for j in 0..c {
                value[[j, i]] = av[[i, j]];
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg, "transpose")
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.len(), rows * cols, "reshape element count mismatch");
        let value =
            Array2::from_shape_vec((rows, cols), av.iter().copied().collect()).unwrap();
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg, "reshape")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.nrows(), bv.nrows(), "concat_cols row mismatch");
        let (n, fa, fb) = (av.nrows(), av.ncols(), bv.ncols());
        let mut value = Array2::zeros((n, fa + fb));
        for i in 0..n {
            for j in 0..fa {
                value[[i, j]] = av[[i, j]];
            }
            for j in 0..fb {
                value[[i, fa + j]] = bv[[i, j]];
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::ConcatCols(a, b), rg, "concat_cols")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert!(start < end && end <= av.ncols(), "slice_cols out of range");
        let value = av.slice(ndarray::s![.., start..end]).to_owned();
        let value = Array2::from_shape_vec(
            (av.nrows(), end - start),
            value.iter().copied().collect(),
        )
        .unwrap();
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start, end), rg, "slice_cols")
    }

    /// ELU with alpha = 1: x for x > 0, exp(x) - 1 otherwise.
    pub fn elu(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let mut kink = self.min_kink;
        let value = av.mapv(|x| {
            kink = kink.min(x.abs());
            if x > 0.0 {
                x
            } else {
                x.exp() - 1.0
            }
        });
        self.min_kink = kink;
        let rg = self.rg(a);
        self.push(value, Op::Elu(a), rg, "elu")
    }

    /// Mean absolute deviation over all entries; a 1 x 1 scalar.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.dim(), bv.dim(), "l1_loss shape mismatch");
        let mut kink = self.min_kink;
        let mut total = 0.0;
        for (x, y) in av.iter().zip(bv.iter()) {
            let d = x - y;
            kink = kink.min(d.abs());
            total += d.abs();
        }
        self.min_kink = kink;
        let value = Array2::from_elem((1, 1), total / av.len() as f64);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::L1(a, b), rg, "l1_loss")
    }

    /// Sum of all entries; a 1 x 1 scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg, "sum")
    }

    /// Reverse sweep from a scalar loss. Returns one gradient slot per
    /// tape node; only `requires_grad` nodes are populated.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        if let Some(op) = self.poisoned {
            return Err(DiffError::NonFinite { op });
        }
        let lv = &self.nodes[loss.0].value;
        if lv.dim() != (1, 1) {
            return Err(DiffError::NonScalarLoss { rows: lv.nrows(), cols: lv.ncols() });
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let gb = g.dot(&self.transposed_value(*b));
                        accumulate(&mut grads[a.0], gb);
                    }
                    if self.rg(*b) {
                        let ag = self.transposed_value(*a).dot(&g);
                        accumulate(&mut grads[b.0], ag);
                    }
                }
                Op::Spmm(m, x) => {
                    if self.rg(*x) {
                        accumulate(&mut grads[x.0], m.adj.matmul_dense(&g));
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        let mut rg_ = Array2::zeros((1, g.ncols()));
                        for r in g.rows() {
                            for (s, v) in rg_.row_mut(0).iter_mut().zip(r) {
                                *s += v;
                            }
                        }
                        accumulate(&mut grads[row.0], rg_);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], -&g);
                    }
                }
                Op::Scale(a, c) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], &g * *c);
                    }
                }
                Op::Transpose(a) => {
                    if self.rg(*a) {
                        let (r, c) = g.dim();
                        let mut gt = Array2::zeros((c, r));
                        for i in 0..r {
                            for j in 0..c {
                                gt[[j, i]] = g[[i, j]];
                            }
                        }
                        accumulate(&mut grads[a.0], gt);
                    }
                }
                Op::Reshape(a) => {
                    if self.rg(*a) {
                        let dim = self.nodes[a.0].value.dim();
                        let back =
                            Array2::from_shape_vec(dim, g.iter().copied().collect()).unwrap();
                        accumulate(&mut grads[a.0], back);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let fa = self.nodes[a.0].value.ncols();
                    if self.rg(*a) {
                        let ga = g.slice(ndarray::s![.., ..fa]).to_owned();
                        accumulate(&mut grads[a.0], standardize(ga));
                    }
                    if self.rg(*b) {
                        let gb = g.slice(ndarray::s![.., fa..]).to_owned();
                        accumulate(&mut grads[b.0], standardize(gb));
                    }
                }
                Op::SliceCols(a, start, end) => {
                    if self.rg(*a) {
                        let mut back = Array2::zeros(self.nodes[a.0].value.dim());
                        back.slice_mut(ndarray::s![.., *start..*end]).assign(&g);
                        accumulate(&mut grads[a.0], back);
                    }
                }
                Op::Elu(a) => {
                    if self.rg(*a) {
                        let av = &self.nodes[a.0].value;
                        let mut ga = g.clone();
                        for (gi, xi) in ga.iter_mut().zip(av.iter()) {
                            if *xi <= 0.0 {
                                *gi *= xi.exp();
                            }
                        }
                        accumulate(&mut grads[a.0], ga);
                    }
                }
                Op::L1(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let scale = g[[0, 0]] / av.len() as f64;
                    // subgradient at 0 is 0 by convention
                    let signed = Array2::from_shape_fn(av.dim(), |ij| {
                        let d = av[ij] - bv[ij];
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    });
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], signed.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], -&signed);
                    }
                }
                Op::Sum(a) => {
                    if self.rg(*a) {
                        let back = Array2::from_elem(self.nodes[a.0].value.dim(), g[[0, 0]]);
                        accumulate(&mut grads[a.0], back);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn transposed_value(&self, v: Var) -> Array2<f64> {
        let av = &self.nodes[v.0].value;
        let (r, c) = av.dim();
        let mut out = Array2::zeros((c, r));
        for i in 0..r {
            for j in 0..c {
                out[[j, i]] = av[[i, j]];
            }
        }
        out
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

/// Copies an array into guaranteed standard (row-major) layout.
fn standardize(a: Array2<f64>) -> Array2<f64> {
    Array2::from_shape_vec(a.dim(), a.iter().copied().collect()).unwrap()
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads[v.0].take()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub resamples: usize,
}

/// Compares the tape gradient of `f` at `x0` against central finite
/// differences with step `h`, coordinate by coordinate. Error metric per
/// coordinate: |analytic - numeric| / max(1, |numeric|).
///
/// If the forward pass comes within [`KINK_MARGIN`] of an ELU or L1 kink,
/// the input is deterministically jittered (growing magnitude, seeded) and
/// the check retried, up to [`MAX_RESAMPLES`] times.
pub fn check_gradients<F>(f: F, x0: &Array2<f64>, h: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let mut resamples = 0;
    let mut x = x0.clone();
    let analytic = loop {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone(), true);
        let loss = f(&mut tape, xv);
        if tape.min_kink_distance() >= KINK_MARGIN || resamples >= MAX_RESAMPLES {
            let grads = tape.backward(loss).expect("gradient check forward failed");
            break grads
                .get(xv)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(x.dim()));
        }
        resamples += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(0xC41B_5EED ^ resamples as u64);
        let delta = (2e-3 * (1.5f64).powi(resamples as i32)).min(0.1);
        x = x0.clone();
        for v in x.iter_mut() {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            *v += sign * delta * (1.0 + rng.random::<f64>());
        }
    };

    let eval = |xp: &Array2<f64>| -> f64 {
        let mut tape = Tape::new();
        let xv = tape.input(xp.clone(), false);
        let loss = f(&mut tape, xv);
        tape.scalar(loss)
    };

    let mut max_rel_error = 0.0f64;
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let (i, j) = (idx / x.ncols(), idx % x.ncols());
        let orig = xp[[i, j]];
        xp[[i, j]] = orig + h;
        let fp = eval(&xp);
        xp[[i, j]] = orig - h;
        let fm = eval(&xp);
        xp[[i, j]] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (analytic[[i, j]] - numeric).abs() / numeric.abs().max(1.0);
        max_rel_error = max_rel_error.max(rel);
    }
    GradCheckReport { max_rel_error, resamples }
}
