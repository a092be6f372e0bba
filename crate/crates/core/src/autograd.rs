//! A small reverse-mode differentiation tape over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D matrix; scalars are `1 x 1`. Operations
//! append a node holding the forward value plus whatever the backward rule
//! needs, and [`Tape::backward`] walks the nodes in reverse creation order.
//! Only the operations the models in this crate need are provided.

use nalgebra::{linalg::Cholesky, DMatrix, Dyn};
use ndarray::{concatenate, s, Array2, Axis};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Jitter schedule for Cholesky factorizations of kernel matrices.
pub const JITTER_ESCALATION: [f64; 3] = [1.0, 10.0, 100.0];

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulConst(Var, Mat),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    FloorAt(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows { x: Var, xhat: Mat, inv_std: Vec<f64> },
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    TileRows(Var, usize),
    Gather(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Rbf { a: Var, b: Var, log_gamma: Var },
    SpdSolve { k: Var, b: Var, factor: Cholesky<f64, Dyn> },
    GaussKl { k: Var, mean: Var, log_var: Var, k_inv: Mat },
    Norm(Var),
}

struct Node {
    value: Mat,
    op: Op,
    tracked: bool,
}

/// Recorded computation. Values are owned by the tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar (or seeded) output with respect to every tracked node.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, or zeros shaped like `shape` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.grads[v.0].clone().unwrap_or_else(|| Mat::zeros(shape))
    }
}

fn shape(m: &Mat) -> (usize, usize) {
    m.dim()
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn to_dmatrix(m: &Mat) -> DMatrix<f64> {
    let (r, c) = m.dim();
    DMatrix::from_fn(r, c, |i, j| m[[i, j]])
}

fn from_dmatrix(m: &DMatrix<f64>) -> Mat {
    Mat::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Lower Cholesky factor of `k + jitter * I`, escalating the jitter on failure.
pub fn cholesky_with_jitter(k: &Mat, jitter: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = k.nrows();
    for factor in JITTER_ESCALATION {
        let eps = jitter * factor;
        let mut dm = to_dmatrix(k);
        for i in 0..n {
            dm[(i, i)] += eps;
        }
        if let Some(ch) = Cholesky::new(dm) {
            let l = ch.l_dirty();
            if (0..n).all(|i| l[(i, i)] > 0.0 && l[(i, i)].is_finite()) {
                return Ok((ch, eps));
            }
        }
    }
    Err(Error::NumericalSingularity {
        jitter: jitter * JITTER_ESCALATION[JITTER_ESCALATION.len() - 1],
    })
}

fn chol_solve(factor: &Cholesky<f64, Dyn>, b: &Mat) -> Mat {
    from_dmatrix(&factor.solve(&to_dmatrix(b)))
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// A trainable input; gradients flow into it.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A fixed input; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let t = self.tracked(&[a, b]);
        self.push(v, Op::MatMul(a, b), t)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let t = self.tracked(&[a]);
        self.push(v, Op::Transpose(a), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let t = self.tracked(&[a, b]);
        self.push(v, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let t = self.tracked(&[a, b]);
        self.push(v, Op::Sub(a, b), t)
    }

    /// `a + row`, with `row` (`1 x m`) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        let t = self.tracked(&[a, row]);
        self.push(v, Op::AddRow(a, row), t)
    }

    /// `a + col`, with `col` (`n x 1`) broadcast over the columns of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let v = self.value(a) + self.value(col);
        let t = self.tracked(&[a, col]);
        self.push(v, Op::AddCol(a, col), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let t = self.tracked(&[a, b]);
        self.push(v, Op::Mul(a, b), t)
    }

    /// `a * row` elementwise, with `row` broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        let t = self.tracked(&[a, row]);
        self.push(v, Op::MulRow(a, row), t)
    }

    pub fn mul_const(&mut self, a: Var, c: Mat) -> Var {
        let v = self.value(a) * &c;
        let t = self.tracked(&[a]);
        self.push(v, Op::MulConst(a, c), t)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let t = self.tracked(&[a]);
        self.push(v, Op::Scale(a, k), t)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        let t = self.tracked(&[a]);
        self.push(v, Op::AddScalar(a), t)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let t = self.tracked(&[a]);
        self.push(v, Op::Tanh(a), t)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| gelu_parts(x).0);
        let t = self.tracked(&[a]);
        self.push(v, Op::Gelu(a), t)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let t = self.tracked(&[a]);
        self.push(v, Op::Exp(a), t)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        let t = self.tracked(&[a]);
        self.push(v, Op::Log(a), t)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        let t = self.tracked(&[a]);
        self.push(v, Op::Sqrt(a), t)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        let t = self.tracked(&[a]);
        self.push(v, Op::Square(a), t)
    }

    /// `max(a, floor)` elementwise; no gradient flows through floored entries.
    pub fn floor_at(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).mapv(|x| x.max(floor));
        let t = self.tracked(&[a]);
        self.push(v, Op::FloorAt(a, floor), t)
    }

    /// Row-wise softmax. Columns where `keep[j]` is false receive an additive
    /// negative infinity before normalization, so their probability is zero.
    pub fn softmax_rows_masked(&mut self, a: Var, keep: Option<&[bool]>) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            if let Some(keep) = keep {
                for (x, &k) in row.iter_mut().zip(keep) {
                    if !k {
                        *x = f64::NEG_INFINITY;
                    }
                }
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            row.mapv_inplace(|x| x / sum);
        }
        let t = self.tracked(&[a]);
        self.push(v, Op::SoftmaxRows(a), t)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.softmax_rows_masked(a, None)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let t = self.tracked(&[a]);
        self.push(v, Op::LogSoftmaxRows(a), t)
    }

    /// Normalizes every row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (n, m) = x.dim();
        let mut xhat = Mat::zeros((n, m));
        let mut inv_std = Vec::with_capacity(n);
        for (i, row) in x.rows().into_iter().enumerate() {
            let mean = row.sum() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..m {
                xhat[[i, j]] = (row[j] - mean) * is;
            }
        }
        let t = self.tracked(&[a]);
        self.push(xhat.clone(), Op::LayerNormRows { x: a, xhat, inv_std }, t)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        let t = self.tracked(&[a]);
        self.push(v, Op::SumAll(a), t)
    }

    /// Sums each row: `n x m -> n x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let t = self.tracked(&[a]);
        self.push(v, Op::SumRows(a), t)
    }

    /// Sums each column: `n x m -> 1 x m`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let t = self.tracked(&[a]);
        self.push(v, Op::SumCols(a), t)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + width]).to_owned();
        let t = self.tracked(&[a]);
        self.push(v, Op::SliceCols(a, start), t)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let t = self.tracked(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let t = self.tracked(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), t)
    }

    /// Stacks `times` copies of `a` vertically.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Var {
        let x = self.value(a);
        let views: Vec<_> = (0..times).map(|_| x.view()).collect();
        let v = concatenate(Axis(0), &views).expect("tile_rows");
        let t = self.tracked(&[a]);
        self.push(v, Op::TileRows(a, times), t)
    }

    /// Row lookup: output row `i` is row `indices[i]` of `table`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Var {
        let x = self.value(table);
        let v = Mat::from_shape_fn((indices.len(), x.ncols()), |(i, j)| x[[indices[i], j]]);
        let t = self.tracked(&[table]);
        self.push(v, Op::Gather(table, indices.to_vec()), t)
    }

    /// Picks column `cols[i]` from row `i`: `n x m -> n x 1`.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Var {
        let x = self.value(a);
        let v = Mat::from_shape_fn((cols.len(), 1), |(i, _)| x[[i, cols[i]]]);
        let t = self.tracked(&[a]);
        self.push(v, Op::Pick(a, cols.to_vec()), t)
    }

    /// `K[i, j] = exp(-|a_i - b_j|^2 / gamma)` with `gamma = exp(log_gamma)`.
    pub fn rbf(&mut self, a: Var, b: Var, log_gamma: Var) -> Var {
        let gamma = self.scalar(log_gamma).exp();
        let v = rbf_matrix(self.value(a), self.value(b), gamma);
        let t = self.tracked(&[a, b, log_gamma]);
        self.push(v, Op::Rbf { a, b, log_gamma }, t)
    }

    /// `(K + jitter I)^-1 B` for symmetric positive definite `K`.
    pub fn spd_solve(&mut self, k: Var, b: Var, jitter: f64) -> Result<Var> {
        let (factor, _) = cholesky_with_jitter(self.value(k), jitter)?;
        let v = chol_solve(&factor, self.value(b));
        let t = self.tracked(&[k, b]);
        Ok(self.push(v, Op::SpdSolve { k, b, factor }, t))
    }

    /// `sum_j KL(N(mean_j, diag(exp(log_var_j))) || N(0, K + jitter I))` over
    /// the columns `j` of `mean` and `log_var`.
    pub fn gauss_kl(&mut self, k: Var, mean: Var, log_var: Var, jitter: f64) -> Result<Var> {
        let (factor, _) = cholesky_with_jitter(self.value(k), jitter)?;
        let m = self.value(k).nrows();
        let k_inv = chol_solve(&factor, &Mat::eye(m));
        let l = factor.l_dirty();
        let logdet: f64 = 2.0 * (0..m).map(|i| l[(i, i)].ln()).sum::<f64>();
        let mu = self.value(mean);
        let lv = self.value(log_var);
        let units = mu.ncols();
        let mut kl = 0.0;
        let kinv_mu = k_inv.dot(mu);
        for j in 0..units {
            let mut trace = 0.0;
            let mut quad = 0.0;
            let mut log_s = 0.0;
            for i in 0..m {
                trace += k_inv[[i, i]] * lv[[i, j]].exp();
                quad += mu[[i, j]] * kinv_mu[[i, j]];
                log_s += lv[[i, j]];
            }
            kl += 0.5 * (trace + quad - m as f64 + logdet - log_s);
        }
        let t = self.tracked(&[k, mean, log_var]);
        Ok(self.push(
            Mat::from_elem((1, 1), kl),
            Op::GaussKl { k, mean, log_var, k_inv },
            t,
        ))
    }

    /// Frobenius norm, `1 x 1`.
    pub fn norm(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).mapv(|x| x * x).sum().sqrt());
        let t = self.tracked(&[a]);
        self.push(v, Op::Norm(a), t)
    }

    /// Gradients of the scalar `out` with respect to every tracked node.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.value(out).dim(), (1, 1), "backward needs a scalar output");
        self.backward_with(out, Mat::from_elem((1, 1), 1.0))
    }

    /// Reverse pass seeded with an arbitrary upstream gradient at `out`.
    pub fn backward_with(&self, out: Var, seed: Mat) -> Grads {
        assert_eq!(seed.dim(), self.value(out).dim(), "seed shape mismatch");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for id in (0..=out.0).rev() {
            if !self.nodes[id].tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Mat>], v: Var) -> Option<&'g mut Mat> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let shape = shape(&self.nodes[v.0].value);
        Some(grads[v.0].get_or_insert_with(|| Mat::zeros(shape)))
    }

    fn propagate(&self, id: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].tracked {
                    self.acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.nodes[b.0].tracked {
                    self.acc(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.t().to_owned()),
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, -g);
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::AddCol(a, col) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *col, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].tracked {
                    self.acc(grads, *a, g * self.value(*b));
                }
                if self.nodes[b.0].tracked {
                    self.acc(grads, *b, g * self.value(*a));
                }
            }
            Op::MulRow(a, row) => {
                if self.nodes[a.0].tracked {
                    self.acc(grads, *a, g * self.value(*row));
                }
                if self.nodes[row.0].tracked {
                    let prod = g * self.value(*a);
                    self.acc(grads, *row, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulConst(a, c) => self.acc(grads, *a, g * c),
            Op::Scale(a, k) => self.acc(grads, *a, g * *k),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::Tanh(a) => {
                let d = out.mapv(|y| 1.0 - y * y);
                self.acc(grads, *a, g * &d);
            }
            Op::Gelu(a) => {
                let d = self.value(*a).mapv(|x| gelu_parts(x).1);
                self.acc(grads, *a, g * &d);
            }
            Op::Exp(a) => self.acc(grads, *a, g * out),
            Op::Log(a) => self.acc(grads, *a, g / self.value(*a)),
            Op::Sqrt(a) => {
                let d = out.mapv(|y| if y > 0.0 { 0.5 / y } else { 0.0 });
                self.acc(grads, *a, g * &d);
            }
            Op::Square(a) => self.acc(grads, *a, g * self.value(*a) * 2.0),
            Op::FloorAt(a, floor) => {
                let x = self.value(*a);
                let d = Mat::from_shape_fn(x.dim(), |ij| if x[ij] > *floor { g[ij] } else { 0.0 });
                self.acc(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = out * g;
                for (mut drow, prow) in d.rows_mut().into_iter().zip(out.rows()) {
                    let s = drow.sum();
                    for (dv, pv) in drow.iter_mut().zip(prow.iter()) {
                        *dv -= pv * s;
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let mut d = g.clone();
                for (mut drow, lrow) in d.rows_mut().into_iter().zip(out.rows()) {
                    let s = drow.sum();
                    for (dv, lv) in drow.iter_mut().zip(lrow.iter()) {
                        *dv -= lv.exp() * s;
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::LayerNormRows { x, xhat, inv_std } => {
                let m = xhat.ncols() as f64;
                let mut d = Mat::zeros(xhat.dim());
                for i in 0..xhat.nrows() {
                    let gr = g.row(i);
                    let xr = xhat.row(i);
                    let mean_g = gr.sum() / m;
                    let mean_gx = gr.dot(&xr) / m;
                    for j in 0..xhat.ncols() {
                        d[[i, j]] = inv_std[i] * (gr[j] - mean_g - xr[j] * mean_gx);
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::SumAll(a) => {
                let sh = shape(self.value(*a));
                self.acc(grads, *a, Mat::from_elem(sh, g[[0, 0]]));
            }
            Op::SumRows(a) => {
                let sh = shape(self.value(*a));
                self.acc(grads, *a, Mat::from_shape_fn(sh, |(i, _)| g[[i, 0]]));
            }
            Op::SumCols(a) => {
                let sh = shape(self.value(*a));
                self.acc(grads, *a, Mat::from_shape_fn(sh, |(_, j)| g[[0, j]]));
            }
            Op::SliceCols(a, start) => {
                let width = g.ncols();
                if let Some(slot) = self.slot(grads, *a) {
                    let mut view = slot.slice_mut(s![.., *start..*start + width]);
                    view += g;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    self.acc(grads, *p, g.slice(s![.., offset..offset + w]).to_owned());
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let h = self.value(*p).nrows();
                    self.acc(grads, *p, g.slice(s![offset..offset + h, ..]).to_owned());
                    offset += h;
                }
            }
            Op::TileRows(a, times) => {
                let h = self.value(*a).nrows();
                let mut d = Mat::zeros(shape(self.value(*a)));
                for t in 0..*times {
                    d += &g.slice(s![t * h..(t + 1) * h, ..]);
                }
                self.acc(grads, *a, d);
            }
            Op::Gather(table, indices) => {
                if let Some(slot) = self.slot(grads, *table) {
                    for (i, &row) in indices.iter().enumerate() {
                        let mut dst = slot.row_mut(row);
                        dst += &g.row(i);
                    }
                }
            }
            Op::Pick(a, cols) => {
                if let Some(slot) = self.slot(grads, *a) {
                    for (i, &c) in cols.iter().enumerate() {
                        slot[[i, c]] += g[[i, 0]];
                    }
                }
            }
            Op::Rbf { a, b, log_gamma } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let gamma = self.scalar(*log_gamma).exp();
                let gk = g * out;
                if self.nodes[a.0].tracked {
                    let row_sum = gk.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let d = (av * &row_sum - gk.dot(bv)) * (-2.0 / gamma);
                    self.acc(grads, *a, d);
                }
                if self.nodes[b.0].tracked {
                    let col_sum = gk.sum_axis(Axis(0)).insert_axis(Axis(1));
                    let d = (bv * &col_sum - gk.t().dot(av)) * (-2.0 / gamma);
                    self.acc(grads, *b, d);
                }
                if self.nodes[log_gamma.0].tracked {
                    let mut total = 0.0;
                    for ((i, j), &gij) in gk.indexed_iter() {
                        let d2: f64 = av
                            .row(i)
                            .iter()
                            .zip(bv.row(j).iter())
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum();
                        total += gij * d2;
                    }
                    self.acc(grads, *log_gamma, Mat::from_elem((1, 1), total / gamma));
                }
            }
            Op::SpdSolve { k, b, factor } => {
                let gb = chol_solve(factor, g);
                if self.nodes[k.0].tracked {
                    self.acc(grads, *k, -gb.dot(&out.t()));
                }
                self.acc(grads, *b, gb);
            }
            Op::GaussKl { k, mean, log_var, k_inv } => {
                let g0 = g[[0, 0]];
                let mu = self.value(*mean);
                let lv = self.value(*log_var);
                let units = mu.ncols() as f64;
                if self.nodes[mean.0].tracked {
                    self.acc(grads, *mean, k_inv.dot(mu) * g0);
                }
                if self.nodes[log_var.0].tracked {
                    let d = Mat::from_shape_fn(lv.dim(), |(i, j)| {
                        0.5 * g0 * (k_inv[[i, i]] * lv[[i, j]].exp() - 1.0)
                    });
                    self.acc(grads, *log_var, d);
                }
                if self.nodes[k.0].tracked {
                    let mut inner = mu.dot(&mu.t());
                    for i in 0..inner.nrows() {
                        inner[[i, i]] += lv.row(i).mapv(f64::exp).sum();
                    }
                    let d = (k_inv * units - k_inv.dot(&inner).dot(k_inv)) * (0.5 * g0);
                    self.acc(grads, *k, d);
                }
            }
            Op::Norm(a) => {
                let n = out[[0, 0]];
                if n > 0.0 {
                    self.acc(grads, *a, self.value(*a) * (g[[0, 0]] / n));
                }
            }
        }
    }
}

/// Dense RBF kernel matrix `exp(-|a_i - b_j|^2 / gamma)`.
pub fn rbf_matrix(a: &Mat, b: &Mat, gamma: f64) -> Mat {
    Mat::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
        let d2: f64 = a
            .row(i)
            .iter()
            .zip(b.row(j).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        (-d2 / gamma).exp()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(f: impl Fn(&Mat) -> f64, x: &Mat) -> Mat {
        let h = 1e-6;
        Mat::from_shape_fn(x.dim(), |ij| {
            let mut xp = x.clone();
            xp[ij] += h;
            let mut xm = x.clone();
            xm[ij] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
    }

    fn assert_close(a: &Mat, b: &Mat, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn softmax_jacobian_rows_sum_to_zero() {
        let mut tape = Tape::new();
        let x = tape.param(array![[0.3, -1.2, 2.0]]);
        let p = tape.softmax_rows(x);
        let mut seed = Mat::zeros((1, 3));
        for k in 0..3 {
            seed.fill(0.0);
            seed[[0, k]] = 1.0;
            let grads = tape.backward_with(p, seed.clone());
            let row_sum: f64 = grads.get(x).unwrap().sum();
            assert!(row_sum.abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[1.0, 5.0, 2.0]]);
        let p = tape.softmax_rows_masked(x, Some(&[true, false, true]));
        let v = tape.value(p);
        assert_eq!(v[[0, 1]], 0.0);
        assert!((v.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn composite_gradient_matches_numeric() {
        let x0 = array![[0.2, -0.4], [0.7, 0.1], [-0.3, 0.5]];
        let w0 = array![[0.5, -0.3, 0.8], [0.1, 0.9, -0.6]];
        let f = |x: &Mat, w: &Mat| {
            let mut tape = Tape::new();
            let xv = tape.param(x.clone());
            let wv = tape.param(w.clone());
            let h = tape.matmul(xv, wv);
            let n = tape.layer_norm_rows(h, 1e-5);
            let a = tape.gelu(n);
            let l = tape.log_softmax_rows(a);
            let p = tape.pick(l, &[0, 2, 1]);
            let s = tape.sum_all(p);
            (tape, xv, wv, s)
        };
        let (tape, xv, wv, s) = f(&x0, &w0);
        let grads = tape.backward(s);
        let nx = numeric_grad(|x| { let (t, _, _, s) = f(x, &w0); t.scalar(s) }, &x0);
        let nw = numeric_grad(|w| { let (t, _, _, s) = f(&x0, w); t.scalar(s) }, &w0);
        assert_close(grads.get(xv).unwrap(), &nx, 1e-6);
        assert_close(grads.get(wv).unwrap(), &nw, 1e-6);
    }

    #[test]
    fn rbf_solve_and_kl_gradients_match_numeric() {
        let z0 = array![[0.0, 0.3], [0.8, -0.2], [-0.5, 0.6]];
        let e0 = array![[0.1, 0.1], [0.4, -0.5]];
        let o0 = array![[0.3, -0.2], [0.1, 0.5], [-0.4, 0.2]];
        let s0 = array![[-1.0, -0.5], [-0.2, -1.5], [-0.8, -0.3]];
        let f = |z: &Mat, e: &Mat, lg: f64| {
            let mut tape = Tape::new();
            let zv = tape.param(z.clone());
            let ev = tape.param(e.clone());
            let ov = tape.param(o0.clone());
            let sv = tape.param(s0.clone());
            let g = tape.param(Mat::from_elem((1, 1), lg));
            let kzz = tape.rbf(zv, zv, g);
            let kxz = tape.rbf(ev, zv, g);
            let kzx = tape.transpose(kxz);
            let sol = tape.spd_solve(kzz, kzx, 1e-6).unwrap();
            let a = tape.transpose(sol);
            let mu = tape.matmul(a, ov);
            let sq = tape.square(mu);
            let fit = tape.sum_all(sq);
            let kl = tape.gauss_kl(kzz, ov, sv, 1e-6).unwrap();
            let tot = tape.add(fit, kl);
            (tape, zv, ev, ov, sv, g, tot)
        };
        let (tape, zv, ev, ov, sv, g, tot) = f(&z0, &e0, 0.2);
        let grads = tape.backward(tot);
        let nz = numeric_grad(|z| { let r = f(z, &e0, 0.2); r.0.scalar(r.6) }, &z0);
        let ne = numeric_grad(|e| { let r = f(&z0, e, 0.2); r.0.scalar(r.6) }, &e0);
        let ng = numeric_grad(
            |g| { let r = f(&z0, &e0, g[[0, 0]]); r.0.scalar(r.6) },
            &Mat::from_elem((1, 1), 0.2),
        );
        assert_close(grads.get(zv).unwrap(), &nz, 1e-5);
        assert_close(grads.get(ev).unwrap(), &ne, 1e-5);
        assert_close(grads.get(g).unwrap(), &ng, 1e-5);
        assert!(grads.get(ov).is_some() && grads.get(sv).is_some());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(array![[1.0, 2.0]]);
        let p = tape.param(array![[3.0, 4.0]]);
        let m = tape.mul(c, p);
        let s = tape.sum_all(m);
        let grads = tape.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap(), &array![[1.0, 2.0]]);
    }

    #[test]
    fn cholesky_escalates_then_fails() {
        // Rank-deficient but PSD: succeeds once jitter is added.
        let k = array![[1.0, 1.0], [1.0, 1.0]];
        assert!(cholesky_with_jitter(&k, 1e-6).is_ok());
        let bad = array![[-1.0, 0.0], [0.0, 1.0]];
        assert!(matches!(
            cholesky_with_jitter(&bad, 1e-6),
            Err(Error::NumericalSingularity { .. })
        ));
    }
}
