use std::borrow::Cow;

use ndarray::{s, Array2, Axis, Zip};

use super::params::{Gradients, ParamId, ParamStore};
use super::Real;
use crate::error::{Error, Result};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    MulConst(Var, Array2<S>),
    AddConst(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<S>,
        inv_std: Vec<S>,
    },
    Silu(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        seq_len: usize,
        kernel: usize,
        cols: Array2<S>,
    },
    Concat(Var, Var),
    RepeatRows(Var, usize),
    MeanPool(Var, usize),
    Reshape(Var),
    TimeDiff(Var, usize),
    SelectCols(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    SumAbs(Var),
    SumSq(Var),
    Sum(Var),
    Exp(Var),
    SixdToMatrix(Var),
}

struct Node<'a, S: Real> {
    value: Cow<'a, Array2<S>>,
    op: Op<S>,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Parameter leaves borrow their values from the [`ParamStore`]; the tape
/// must be dropped (or consumed by [`Tape::backward`]) before the store can
/// be updated.
pub struct Tape<'a, S: Real> {
    nodes: Vec<Node<'a, S>>,
    macs: u64,
}

impl<'a, S: Real> Default for Tape<'a, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, S: Real> Tape<'a, S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            macs: 0,
        }
    }

    fn push(&mut self, value: Cow<'a, Array2<S>>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Array2<S>, op: Op<S>) -> Var {
        self.push(Cow::Owned(value), op)
    }

    pub fn value(&self, v: Var) -> &Array2<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn scalar(&self, v: Var) -> S {
        self.value(v)[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations performed by matrix products and
    /// convolutions recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn constant(&mut self, value: Array2<S>) -> Var {
        self.push_owned(value, Op::Leaf)
    }

    pub fn constant_ref(&mut self, value: &'a Array2<S>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf)
    }

    pub fn param(&mut self, store: &'a ParamStore<S>, id: ParamId) -> Var {
        self.push(Cow::Borrowed(store.value(id)), Op::Param(id))
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        self.macs += (m * k * n) as u64;
        let value = self.value(a).dot(self.value(b));
        Ok(self.push_owned(value, Op::MatMul(a, b)))
    }

    /// Adds a `1 x n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, n) = self.shape(x);
        if self.shape(row) != (1, n) {
            return Err(Error::Shape(format!(
                "bias {:?} for input with {n} columns",
                self.shape(row)
            )));
        }
        let value = self.value(x) + self.value(row);
        Ok(self.push_owned(value, Op::AddRow(x, row)))
    }

    /// `x W + b`, row-wise.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let value = self.value(a) + self.value(b);
        Ok(self.push_owned(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        let value = self.value(a) - self.value(b);
        Ok(self.push_owned(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let value = self.value(a) * self.value(b);
        Ok(self.push_owned(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let value = self.value(a) * c;
        self.push_owned(value, Op::Scale(a, c))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, a: Var, c: Array2<S>) -> Result<Var> {
        if self.shape(a) != c.dim() {
            return Err(Error::Shape(format!("mul_const: {:?} vs {:?}", self.shape(a), c.dim())));
        }
        let value = self.value(a) * &c;
        Ok(self.push_owned(value, Op::MulConst(a, c)))
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let value = self.value(a) + c;
        self.push_owned(value, Op::AddConst(a))
    }

    /// Per-row normalisation to zero mean and unit (population) variance,
    /// followed by the affine map `gamma * x + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, d) = self.shape(x);
        if self.shape(gamma) != (1, d) || self.shape(beta) != (1, d) {
            return Err(Error::Shape(format!("layernorm affine for width {d}")));
        }
        let eps = S::of(LAYERNORM_EPS);
        let inv_d = S::of(1.0 / d as f64);
        let xv = self.value(x);
        let mut xhat = Array2::zeros((rows, d));
        let mut inv_std = Vec::with_capacity(rows);
        for (row, mut out) in xv.outer_iter().zip(xhat.outer_iter_mut()) {
            let mean = row.sum() * inv_d;
            let var = row.fold(S::zero(), |acc, &v| acc + (v - mean) * (v - mean)) * inv_d;
            let is = S::one() / (var + eps).sqrt();
            Zip::from(&mut out).and(&row).for_each(|o, &v| *o = (v - mean) * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        Ok(self.push_owned(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v * sigmoid(v));
        self.push_owned(value, Op::Silu(x))
    }

    /// Length-preserving convolution along time with zero padding.
    ///
    /// `x` holds stacked windows of `seq_len` rows; `w` is
    /// `(kernel * d_in) x d_out` where row block `j` multiplies the input at
    /// time `t + (kernel - 1) / 2 - j`, so an impulse reproduces the kernel.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, seq_len: usize) -> Result<Var> {
        let (rows, d_in) = self.shape(x);
        let (wr, d_out) = self.shape(w);
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::Shape(format!(
                "conv1d: {rows} rows is not a multiple of window length {seq_len}"
            )));
        }
        if d_in == 0 || wr % d_in != 0 || (wr / d_in) % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv1d kernel {wr}x{d_out} for {d_in} input channels (odd width required)"
            )));
        }
        if self.shape(b) != (1, d_out) {
            return Err(Error::Shape(format!("conv1d bias {:?}", self.shape(b))));
        }
        let kernel = wr / d_in;
        let cols = im2col(self.value(x), seq_len, kernel);
        self.macs += (rows * kernel * d_in * d_out) as u64;
        let value = cols.dot(self.value(w)) + self.value(b);
        Ok(self.push_owned(
            value,
            Op::Conv1d {
                x,
                w,
                b,
                seq_len,
                kernel,
                cols,
            },
        ))
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(Error::Shape(format!("concat rows {ra} vs {rb}")));
        }
        let mut value = Array2::zeros((ra, ca + cb));
        value.slice_mut(s![.., ..ca]).assign(self.value(a));
        value.slice_mut(s![.., ca..]).assign(self.value(b));
        Ok(self.push_owned(value, Op::Concat(a, b)))
    }

    /// Repeats every row `times` times consecutively: `B x d -> (B*times) x d`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let (rows, d) = self.shape(x);
        let xv = self.value(x);
        let mut value = Array2::zeros((rows * times, d));
        for (r, row) in xv.outer_iter().enumerate() {
            for t in 0..times {
                value.row_mut(r * times + t).assign(&row);
            }
        }
        self.push_owned(value, Op::RepeatRows(x, times))
    }

    /// Mean over each window of `seq_len` rows: `(B*T) x d -> B x d`.
    pub fn mean_pool(&mut self, x: Var, seq_len: usize) -> Result<Var> {
        let (rows, d) = self.shape(x);
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::Shape(format!("mean_pool {rows} rows by {seq_len}")));
        }
        let b = rows / seq_len;
        let xv = self.value(x);
        let inv = S::of(1.0 / seq_len as f64);
        let mut value = Array2::zeros((b, d));
        for i in 0..b {
            let block = xv.slice(s![i * seq_len..(i + 1) * seq_len, ..]);
            value.row_mut(i).assign(&(block.sum_axis(Axis(0)) * inv));
        }
        Ok(self.push_owned(value, Op::MeanPool(x, seq_len)))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, shape: (usize, usize)) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != shape.0 * shape.1 {
            return Err(Error::Shape(format!("reshape {:?} to {shape:?}", xv.dim())));
        }
        let value = xv
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(shape)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.push_owned(value, Op::Reshape(x)))
    }

    /// Frame differences `x[t+1] - x[t]` inside every window:
    /// `(B*T) x d -> (B*(T-1)) x d`.
    pub fn time_diff(&mut self, x: Var, seq_len: usize) -> Result<Var> {
        let (rows, d) = self.shape(x);
        if seq_len < 2 || rows % seq_len != 0 {
            return Err(Error::Shape(format!(
                "time_diff needs windows of at least 2 frames ({rows} rows, T={seq_len})"
            )));
        }
        let b = rows / seq_len;
        let xv = self.value(x);
        let mut value = Array2::zeros((b * (seq_len - 1), d));
        for i in 0..b {
            let hi = xv.slice(s![i * seq_len + 1..(i + 1) * seq_len, ..]);
            let lo = xv.slice(s![i * seq_len..(i + 1) * seq_len - 1, ..]);
            value
                .slice_mut(s![i * (seq_len - 1)..(i + 1) * (seq_len - 1), ..])
                .assign(&(&hi - &lo));
        }
        Ok(self.push_owned(value, Op::TimeDiff(x, seq_len)))
    }

    pub fn select_cols(&mut self, x: Var, cols: Vec<usize>) -> Result<Var> {
        let (rows, c) = self.shape(x);
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::Range(format!("column {bad} of {c}")));
        }
        let xv = self.value(x);
        let mut value = Array2::zeros((rows, cols.len()));
        for (k, &j) in cols.iter().enumerate() {
            value.column_mut(k).assign(&xv.column(j));
        }
        Ok(self.push_owned(value, Op::SelectCols(x, cols)))
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Range(format!("row {bad} of {r}")));
        }
        let xv = self.value(x);
        let mut value = Array2::zeros((rows.len(), c));
        for (k, &i) in rows.iter().enumerate() {
            value.row_mut(k).assign(&xv.row(i));
        }
        Ok(self.push_owned(value, Op::GatherRows(x, rows)))
    }

    /// `sum |x|` as a `1 x 1` tensor.
    pub fn sum_abs(&mut self, x: Var) -> Var {
        let v = self.value(x).fold(S::zero(), |acc, &v| acc + v.abs());
        self.push_owned(Array2::from_elem((1, 1), v), Op::SumAbs(x))
    }

    /// `sum x^2` as a `1 x 1` tensor.
    pub fn sum_sq(&mut self, x: Var) -> Var {
        let v = self.value(x).fold(S::zero(), |acc, &v| acc + v * v);
        self.push_owned(Array2::from_elem((1, 1), v), Op::SumSq(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        self.push_owned(Array2::from_elem((1, 1), v), Op::Sum(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.exp());
        self.push_owned(value, Op::Exp(x))
    }

    /// Gram-Schmidt map from a `1 x 6` row to a `3 x 3` rotation whose
    /// columns are `b1, b2, b1 x b2`.
    pub fn sixd_to_matrix(&mut self, x: Var) -> Result<Var> {
        if self.shape(x) != (1, 6) {
            return Err(Error::Shape(format!("6D rotation {:?}", self.shape(x))));
        }
        let r = self.value(x);
        let (a, c) = split6(r);
        let gs = gram_schmidt(a, c).ok_or_else(|| Error::DegenerateRotation("degenerate 6D input".into()))?;
        let mut value = Array2::zeros((3, 3));
        for k in 0..3 {
            value[[k, 0]] = gs.b1[k];
            value[[k, 1]] = gs.b2[k];
            value[[k, 2]] = gs.b3[k];
        }
        Ok(self.push_owned(value, Op::SixdToMatrix(x)))
    }

    /// Reverse sweep from a scalar `loss`, returning the gradient of every
    /// parameter leaf reached. Parameters used several times accumulate.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut param_grads: Vec<(ParamId, Array2<S>)> = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => match param_grads.iter_mut().find(|(pid, _)| pid == id) {
                    Some((_, acc)) => *acc += &g,
                    None => param_grads.push((*id, g)),
                },
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(x, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.mapv(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g * *c),
                Op::MulConst(a, c) => accumulate(&mut grads, *a, g * c),
                Op::AddConst(a) => accumulate(&mut grads, *a, g),
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let ggamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gxhat = &g * self.value(*gamma);
                    let d = xhat.ncols();
                    let inv_d = S::of(1.0 / d as f64);
                    let mut gx = Array2::zeros(xhat.raw_dim());
                    for r in 0..xhat.nrows() {
                        let gh = gxhat.row(r);
                        let xh = xhat.row(r);
                        let mean_g = gh.sum() * inv_d;
                        let mean_gx = gh.dot(&xh) * inv_d;
                        let is = inv_std[r];
                        Zip::from(gx.row_mut(r))
                            .and(&gh)
                            .and(&xh)
                            .for_each(|o, &gv, &xv| *o = is * (gv - mean_g - xv * mean_gx));
                    }
                    accumulate(&mut grads, *gamma, ggamma);
                    accumulate(&mut grads, *beta, gbeta);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Silu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|gv, &xv| {
                        let sg = sigmoid(xv);
                        *gv *= sg + xv * sg * (S::one() - sg);
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Conv1d {
                    x,
                    w,
                    b,
                    seq_len,
                    kernel,
                    cols,
                } => {
                    let gw = cols.t().dot(&g);
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gcols = g.dot(&self.value(*w).t());
                    let gx = col2im(&gcols, *seq_len, *kernel);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Concat(a, b) => {
                    let ca = self.shape(*a).1;
                    accumulate(&mut grads, *a, g.slice(s![.., ..ca]).to_owned());
                    accumulate(&mut grads, *b, g.slice(s![.., ca..]).to_owned());
                }
                Op::RepeatRows(x, times) => {
                    let (rows, d) = self.shape(*x);
                    let mut gx = Array2::zeros((rows, d));
                    for r in 0..rows {
                        let block = g.slice(s![r * times..(r + 1) * times, ..]);
                        gx.row_mut(r).assign(&block.sum_axis(Axis(0)));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::MeanPool(x, seq_len) => {
                    let (rows, _) = self.shape(*x);
                    let inv = S::of(1.0 / *seq_len as f64);
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    for r in 0..rows {
                        gx.row_mut(r).assign(&(&g.row(r / seq_len) * inv));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Reshape(x) => {
                    let shape = self.shape(*x);
                    let gx = g
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(shape)
                        .expect("reshape gradient has matching size");
                    accumulate(&mut grads, *x, gx);
                }
                Op::TimeDiff(x, seq_len) => {
                    let t = *seq_len;
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    let b = gx.nrows() / t;
                    for i in 0..b {
                        for k in 0..t - 1 {
                            let gr = g.row(i * (t - 1) + k);
                            let mut hi = gx.row_mut(i * t + k + 1);
                            hi += &gr;
                            let mut lo = gx.row_mut(i * t + k);
                            lo -= &gr;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SelectCols(x, cols) => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    for (k, &j) in cols.iter().enumerate() {
                        let mut c = gx.column_mut(j);
                        c += &g.column(k);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::GatherRows(x, rows) => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut row = gx.row_mut(r);
                        row += &g.row(k);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SumAbs(x) => {
                    let gv = g[[0, 0]];
                    let gx = self.value(*x).mapv(|v| {
                        if v > S::zero() {
                            gv
                        } else if v < S::zero() {
                            -gv
                        } else {
                            S::zero()
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::SumSq(x) => {
                    let gv = g[[0, 0]] * S::of(2.0);
                    accumulate(&mut grads, *x, self.value(*x) * gv);
                }
                Op::Sum(x) => {
                    let gx = Array2::from_elem(self.value(*x).raw_dim(), g[[0, 0]]);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Exp(x) => accumulate(&mut grads, *x, g * &*node.value),
                Op::SixdToMatrix(x) => {
                    let gx = sixd_backward(self.value(*x), &g);
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
        param_grads.sort_by_key(|(id, _)| *id);
        Ok(Gradients { grads: param_grads })
    }
}

fn accumulate<S: Real>(grads: &mut [Option<Array2<S>>], v: Var, delta: Array2<S>) {
    match &mut grads[v.0] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn sigmoid<S: Real>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// Unfolds `k` time-shifted copies of each row side by side.
fn im2col<S: Real>(x: &Array2<S>, seq_len: usize, kernel: usize) -> Array2<S> {
    let (rows, d) = x.dim();
    let pad = (kernel - 1) / 2;
    let mut cols = Array2::zeros((rows, kernel * d));
    for r in 0..rows {
        let t = r % seq_len;
        let base = r - t;
        for j in 0..kernel {
            let src = t as isize + pad as isize - j as isize;
            if src < 0 || src >= seq_len as isize {
                continue;
            }
            cols.slice_mut(s![r, j * d..(j + 1) * d])
                .assign(&x.row(base + src as usize));
        }
    }
    cols
}

fn col2im<S: Real>(gcols: &Array2<S>, seq_len: usize, kernel: usize) -> Array2<S> {
    let rows = gcols.nrows();
    let d = gcols.ncols() / kernel;
    let pad = (kernel - 1) / 2;
    let mut gx = Array2::zeros((rows, d));
    for r in 0..rows {
        let t = r % seq_len;
        let base = r - t;
        for j in 0..kernel {
            let src = t as isize + pad as isize - j as isize;
            if src < 0 || src >= seq_len as isize {
                continue;
            }
            let mut dst = gx.row_mut(base + src as usize);
            dst += &gcols.slice(s![r, j * d..(j + 1) * d]);
        }
    }
    gx
}

type V3<S> = [S; 3];

fn split6<S: Real>(r: &Array2<S>) -> (V3<S>, V3<S>) {
    ([r[[0, 0]], r[[0, 1]], r[[0, 2]]], [r[[0, 3]], r[[0, 4]], r[[0, 5]]])
}

fn dot3<S: Real>(a: &V3<S>, b: &V3<S>) -> S {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3<S: Real>(a: &V3<S>, b: &V3<S>) -> V3<S> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn axpy3<S: Real>(a: S, x: &V3<S>, y: &V3<S>) -> V3<S> {
    [a * x[0] + y[0], a * x[1] + y[1], a * x[2] + y[2]]
}

fn scale3<S: Real>(a: S, x: &V3<S>) -> V3<S> {
    [a * x[0], a * x[1], a * x[2]]
}

struct GramSchmidt<S> {
    b1: V3<S>,
    b2: V3<S>,
    b3: V3<S>,
    norm_a: S,
    norm_u: S,
}

fn gram_schmidt<S: Real>(a: V3<S>, c: V3<S>) -> Option<GramSchmidt<S>> {
    let norm_a = dot3(&a, &a).sqrt();
    if norm_a.as_f64() < 1e-12 {
        return None;
    }
    let b1 = scale3(S::one() / norm_a, &a);
    let u = axpy3(-dot3(&b1, &c), &b1, &c);
    let norm_u = dot3(&u, &u).sqrt();
    if norm_u.as_f64() < 1e-12 {
        return None;
    }
    let b2 = scale3(S::one() / norm_u, &u);
    let b3 = cross3(&b1, &b2);
    Some(GramSchmidt {
        b1,
        b2,
        b3,
        norm_a,
        norm_u,
    })
}

fn sixd_backward<S: Real>(r: &Array2<S>, g: &Array2<S>) -> Array2<S> {
    let (a, c) = split6(r);
    let gs = gram_schmidt(a, c).expect("forward succeeded on the same input");
    let col = |k: usize| [g[[0, k]], g[[1, k]], g[[2, k]]];
    let (g1, g2, g3) = (col(0), col(1), col(2));
    // b3 = b1 x b2
    let gb1 = axpy3(S::one(), &cross3(&gs.b2, &g3), &g1);
    let gb2 = axpy3(S::one(), &cross3(&g3, &gs.b1), &g2);
    // b2 = u / |u|
    let gu = scale3(S::one() / gs.norm_u, &axpy3(-dot3(&gs.b2, &gb2), &gs.b2, &gb2));
    // u = c - (b1 . c) b1
    let b1c = dot3(&gs.b1, &c);
    let b1gu = dot3(&gs.b1, &gu);
    let gc = axpy3(-b1gu, &gs.b1, &gu);
    let gb1 = [
        gb1[0] - b1c * gu[0] - c[0] * b1gu,
        gb1[1] - b1c * gu[1] - c[1] * b1gu,
        gb1[2] - b1c * gu[2] - c[2] * b1gu,
    ];
    // b1 = a / |a|
    let ga = scale3(S::one() / gs.norm_a, &axpy3(-dot3(&gs.b1, &gb1), &gs.b1, &gb1));
    let mut out = Array2::zeros((1, 6));
    for k in 0..3 {
        out[[0, k]] = ga[k];
        out[[0, k + 3]] = gc[k];
    }
    out
}
