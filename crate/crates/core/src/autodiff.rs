//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value; node inputs
//! always have smaller indices than the node itself, so a single reverse
//! sweep over the tape visits each node after all of its consumers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, T),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    CausalMask(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    Mean(Var),
    Sum(Var),
    LogSumExpRows(Var),
    PickPerRow {
        x: Var,
        idx: Vec<usize>,
    },
    RowDot(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Shape,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Attention probabilities recorded by one attention node, laid out as
/// `heads x len x len`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionProbe<'a, T> {
    pub heads: usize,
    pub len: usize,
    pub causal: bool,
    pub probs: &'a [T],
}

/// Rows with a denominator below this are divided by it instead.
pub const L2_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backpropagated: bool,
}

// ---------------------------------------------------------------------------
// raw kernels

/// c[m x n] = a[m x k] . b[k x n]
fn mm<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// Dot product with eight independent partial sums so the loop vectorizes.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::ZERO; 8];
    let (ac, ar) = a.split_at(a.len() / 8 * 8);
    let (bc, br) = b.split_at(ac.len());
    for (x, y) in ac.chunks_exact(8).zip(bc.chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

/// c[m x n] = a[m x k] . b[n x k]^T
fn mm_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

/// c[m x n] = a[k x m]^T . b[k x n]
fn mm_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + three * k * x * x)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backpropagated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Shape, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.numel(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape, n.value.clone()).expect("tape node shape is consistent")
    }

    /// Records a copy of `t` as a leaf. It is differentiated iff
    /// `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Records a non-differentiated leaf.
    pub fn constant(&mut self, shape: Shape, data: Vec<T>) -> Result<Var> {
        if data.len() != shape.numel() {
            return Err(Error::Contract(format!(
                "constant of shape {shape} given {} values",
                data.len()
            )));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    // -----------------------------------------------------------------------
    // forward ops

    /// Matrix product `a . b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, k2, n) = (sa.rows(), sa.cols(), sb.rows(), sb.cols());
        if sa.rank() != 2 || sb.rank() != 2 || k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let value = mm(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Shape::matrix(m, n), value, Op::MatMul(a, b), rg))
    }

    /// Product with the transpose of the right operand, `a . b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n, k2) = (sa.rows(), sa.cols(), sb.rows(), sb.cols());
        if sa.rank() != 2 || sb.rank() != 2 || k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: sa,
                rhs: sb,
            });
        }
        let value = mm_nt(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Shape::matrix(m, n), value, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let (r, c) = (s.rows(), s.cols());
        let src = self.value(x);
        let mut out = vec![T::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(x);
        self.push(Shape::matrix(c, r), out, Op::Transpose(x), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape { op, lhs: sa, rhs: sb });
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("add", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(s, value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("sub", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(s, value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("mul", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(s, value, Op::Mul(a, b), rg))
    }

    /// Adds the vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let c = sx.cols();
        if sb.numel() != c {
            return Err(Error::Shape {
                op: "add_row",
                lhs: sx,
                rhs: sb,
            });
        }
        let bias = self.value(b);
        let value = self
            .value(x)
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(bias).map(|(&v, &w)| v + w))
            .collect();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(sx, value, Op::AddRow(x, b), rg))
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).iter().map(|&v| v * s).collect();
        let rg = self.rg(x);
        self.push(self.shape(x), value, Op::MulScalar(x, s), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| gelu(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x), value, Op::Gelu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| v.exp()).collect();
        let rg = self.rg(x);
        self.push(self.shape(x), value, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).iter().find(|&&v| v <= T::ZERO) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let value = self.value(x).iter().map(|&v| v.ln()).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x), value, Op::Log(x), rg))
    }

    /// Row-wise softmax with max subtraction. Entries equal to negative
    /// infinity receive probability zero.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let c = s.cols();
        let mut value = self.value(x).to_vec();
        for row in value.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(s, value, Op::Softmax(x), rg)
    }

    /// Sets entries above the diagonal to negative infinity.
    pub fn causal_mask(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let c = s.cols();
        let mut value = self.value(x).to_vec();
        for (i, row) in value.chunks_exact_mut(c).enumerate() {
            for v in row.iter_mut().skip(i + 1) {
                *v = T::NEG_INFINITY;
            }
        }
        let rg = self.rg(x);
        self.push(s, value, Op::CausalMask(x), rg)
    }

    /// Per-row standardization followed by the affine map `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x);
        let c = sx.cols();
        for p in [gain, bias] {
            if self.shape(p).numel() != c {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: sx,
                    rhs: self.shape(p),
                });
            }
        }
        if eps <= T::ZERO {
            return Err(Error::Domain {
                op: "layer_norm",
                detail: format!("eps must be positive, got {eps}"),
            });
        }
        let n = T::from_f64(c as f64);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = Vec::with_capacity(sx.numel());
        let mut rstd = Vec::with_capacity(sx.rows());
        let mut value = Vec::with_capacity(sx.numel());
        for row in self.value(x).chunks_exact(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::ONE / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                value.push(h * g[j] + b[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            sx,
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let c = self.shape(first).cols();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.cols() != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.shape(first),
                    rhs: s,
                });
            }
            rows += s.rows();
        }
        let mut value = Vec::with_capacity(rows * c);
        for &p in parts {
            value.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Shape::matrix(rows, c), value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if len == 0 || start + len > s.rows() {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{} out of range for {s}",
                start + len
            )));
        }
        let c = s.cols();
        let value = self.value(x)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Shape::matrix(len, c), value, Op::SliceRows(x, start), rg))
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let r = self.shape(first).rows();
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.rows() != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first),
                    rhs: s,
                });
            }
            cols += s.cols();
        }
        let mut value = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                let c = self.shape(p).cols();
                value.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Shape::matrix(r, cols), value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if len == 0 || start + len > s.cols() {
            return Err(Error::Contract(format!(
                "slice_cols {start}..{} out of range for {s}",
                start + len
            )));
        }
        let c = s.cols();
        let value = self
            .value(x)
            .chunks_exact(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Shape::matrix(s.rows(), len), value, Op::SliceCols(x, start), rg))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if ids.is_empty() {
            return Err(Error::Contract("embedding_lookup with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s.rows()) {
            return Err(Error::Contract(format!(
                "embedding id {bad} out of range for table {s}"
            )));
        }
        let c = s.cols();
        let t = self.value(table);
        let mut value = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            value.extend_from_slice(&t[i * c..(i + 1) * c]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Shape::matrix(ids.len(), c),
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Divides each row by `max(||row||_2, 1e-12)`.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let c = s.cols();
        let floor = T::from_f64(L2_NORM_FLOOR);
        let mut norms = Vec::with_capacity(s.rows());
        let mut value = Vec::with_capacity(s.numel());
        for row in self.value(x).chunks_exact(c) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
            norms.push(n);
            value.extend(row.iter().map(|&v| v / n));
        }
        let rg = self.rg(x);
        self.push(s, value, Op::L2NormalizeRows { x, norms }, rg)
    }

    /// Mean of all entries, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().copied().sum::<T>() / T::from_f64(v.len() as f64);
        let rg = self.rg(x);
        self.push(Shape::scalar(), vec![m], Op::Mean(x), rg)
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let m = self.value(x).iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Shape::scalar(), vec![m], Op::Sum(x), rg)
    }

    /// `log(sum_j exp(x_ij))` per row, as an `m x 1` column.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let value = self
            .value(x)
            .chunks_exact(s.cols())
            .map(|row| {
                let mx = row.iter().copied().fold(T::NEG_INFINITY, T::max);
                mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln()
            })
            .collect();
        let rg = self.rg(x);
        self.push(Shape::matrix(s.rows(), 1), value, Op::LogSumExpRows(x), rg)
    }

    /// `x[i, idx[i]]` per row, as an `m x 1` column.
    pub fn pick_per_row(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if idx.len() != s.rows() || idx.iter().any(|&j| j >= s.cols()) {
            return Err(Error::Contract(format!(
                "pick_per_row: {} indices for {s}",
                idx.len()
            )));
        }
        let c = s.cols();
        let value = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| self.value(x)[i * c + j])
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Shape::matrix(s.rows(), 1),
            value,
            Op::PickPerRow {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Dot product of matching rows, as an `m x 1` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("row_dot", a, b)?;
        let c = s.cols();
        let value = self
            .value(a)
            .chunks_exact(c)
            .zip(self.value(b).chunks_exact(c))
            .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p * q).sum::<T>())
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Shape::matrix(s.rows(), 1), value, Op::RowDot(a, b), rg))
    }

    /// Multi-head scaled dot-product attention over already projected
    /// `q`, `k`, `v` (each `len x d`). With `causal`, position `i` attends
    /// to positions `0..=i` only.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let sq = self.shape(q);
        for other in [k, v] {
            if self.shape(other) != sq || sq.rank() != 2 {
                return Err(Error::Shape {
                    op: "attention",
                    lhs: sq,
                    rhs: self.shape(other),
                });
            }
        }
        let (len, d) = (sq.rows(), sq.cols());
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "width {d} not divisible into {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = T::ONE / T::from_f64(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::ZERO; heads * len * len];
        let mut out = vec![T::ZERO; len * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..len {
                let visible = if causal { i + 1 } else { len };
                let row = &mut probs[(h * len + i) * len..(h * len + i + 1) * len];
                let qi = &qv[i * d + off..i * d + off + dh];
                for (j, p) in row.iter_mut().enumerate().take(visible) {
                    let kj = &kv[j * d + off..j * d + off + dh];
                    *p = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                }
                for p in row.iter_mut().skip(visible) {
                    *p = T::NEG_INFINITY;
                }
                softmax_in_place(row);
                let oi = &mut out[i * d + off..i * d + off + dh];
                for (j, &p) in row.iter().enumerate().take(visible) {
                    let vj = &vv[j * d + off..j * d + off + dh];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            sq,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                probs,
            },
            rg,
        ))
    }

    /// Probabilities of every attention node recorded so far, in tape order.
    pub fn attention_probes(&self) -> impl Iterator<Item = AttentionProbe<'_, T>> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Attention {
                heads,
                causal,
                probs,
                ..
            } => Some(AttentionProbe {
                heads: *heads,
                len: n.shape.rows(),
                causal: *causal,
                probs,
            }),
            _ => None,
        })
    }

    // -----------------------------------------------------------------------
    // reverse sweep

    /// Back-propagates from a one-element `loss`. Calling it a second time
    /// without [`Tape::reset_grads`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let s = self.shape(loss);
        if s.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {s}"
            )));
        }
        self.backward_seeded(loss, &[T::ONE])
    }

    /// Back-propagates an arbitrary upstream gradient `seed` for `out`.
    pub fn backward_seeded(&mut self, out: Var, seed: &[T]) -> Result<()> {
        if self.backpropagated {
            return Err(Error::Contract(
                "gradients already accumulated on this tape; call reset_grads first".into(),
            ));
        }
        if seed.len() != self.shape(out).numel() {
            return Err(Error::Contract(format!(
                "seed of length {} for output {}",
                seed.len(),
                self.shape(out)
            )));
        }
        self.backpropagated = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(out) {
            return Ok(());
        }
        self.grads[out.0] = Some(seed.to_vec());
        for i in (0..=out.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backpropagated = false;
    }

    /// Gradient of the last backward pass with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        if !self.rg(v) {
            return None;
        }
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `t.grad`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<T>) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }

    fn acc(&mut self, v: Var, delta: &[T]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => add_into(g, delta),
            slot @ None => *slot = Some(delta.to_vec()),
        }
    }

    fn acc_with(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let g = self.grads[v.0].get_or_insert_with(|| vec![T::ZERO; n]);
        f(g);
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        // Temporarily move the op out so `self` can be borrowed mutably.
        let op = core::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let shape = self.nodes[i].shape;
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa.rows(), sa.cols(), sb.cols());
                if self.rg(*a) {
                    let da = mm_nt(g, self.value(*b), m, n, k);
                    self.acc(*a, &da);
                }
                if self.rg(*b) {
                    let db = mm_tn(self.value(*a), g, k, m, n);
                    self.acc(*b, &db);
                }
            }
            Op::MatMulNT(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa.rows(), sa.cols(), sb.rows());
                if self.rg(*a) {
                    let da = mm(g, self.value(*b), m, n, k);
                    self.acc(*a, &da);
                }
                if self.rg(*b) {
                    let db = mm_tn(g, self.value(*a), n, m, k);
                    self.acc(*b, &db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (shape.rows(), shape.cols());
                let mut dx = vec![T::ZERO; r * c];
                for a in 0..r {
                    for b in 0..c {
                        dx[b * r + a] = g[a * c + b];
                    }
                }
                self.acc(*x, &dx);
            }
            Op::Add(a, b) => {
                self.acc(*a, g);
                self.acc(*b, g);
            }
            Op::Sub(a, b) => {
                self.acc(*a, g);
                if self.rg(*b) {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    self.acc(*b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let da: Vec<T> = g.iter().zip(self.value(*b)).map(|(&d, &y)| d * y).collect();
                    self.acc(*a, &da);
                }
                if self.rg(*b) {
                    let db: Vec<T> = g.iter().zip(self.value(*a)).map(|(&d, &x)| d * x).collect();
                    self.acc(*b, &db);
                }
            }
            Op::AddRow(x, b) => {
                self.acc(*x, g);
                let c = shape.cols();
                self.acc_with(*b, |db| {
                    for row in g.chunks_exact(c) {
                        add_into(db, row);
                    }
                });
            }
            Op::MulScalar(x, s) => {
                let dx: Vec<T> = g.iter().map(|&d| d * *s).collect();
                self.acc(*x, &dx);
            }
            Op::Gelu(x) => {
                let dx: Vec<T> = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(&d, &v)| d * gelu_grad(v))
                    .collect();
                self.acc(*x, &dx);
            }
            Op::Exp(x) => {
                let dx: Vec<T> = g
                    .iter()
                    .zip(&self.nodes[i].value)
                    .map(|(&d, &y)| d * y)
                    .collect();
                self.acc(*x, &dx);
            }
            Op::Log(x) => {
                let dx: Vec<T> = g.iter().zip(self.value(*x)).map(|(&d, &v)| d / v).collect();
                self.acc(*x, &dx);
            }
            Op::Softmax(x) => {
                let c = shape.cols();
                let y = &self.nodes[i].value;
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks_exact(c).zip(g.chunks_exact(c)) {
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                }
                self.acc(*x, &dx);
            }
            Op::CausalMask(x) => {
                let c = shape.cols();
                let mut dx = g.to_vec();
                for (r, row) in dx.chunks_exact_mut(c).enumerate() {
                    for v in row.iter_mut().skip(r + 1) {
                        *v = T::ZERO;
                    }
                }
                self.acc(*x, &dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = shape.cols();
                let n = T::from_f64(c as f64);
                if self.rg(*x) {
                    let gv = self.value(*gain);
                    let mut dx = Vec::with_capacity(g.len());
                    for (r, (gr, hr)) in g.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate() {
                        let dh: Vec<T> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let m1 = dh.iter().copied().sum::<T>() / n;
                        let m2 = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / n;
                        dx.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(&d, &h)| rstd[r] * (d - m1 - h * m2)),
                        );
                    }
                    self.acc(*x, &dx);
                }
                self.acc_with(*gain, |dg| {
                    for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ((d, &a), &h) in dg.iter_mut().zip(gr).zip(hr) {
                            *d += a * h;
                        }
                    }
                });
                self.acc_with(*bias, |db| {
                    for gr in g.chunks_exact(c) {
                        add_into(db, gr);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.shape(p).numel();
                    self.acc(p, &g[off..off + n]);
                    off += n;
                }
            }
            Op::SliceRows(x, start) => {
                let c = shape.cols();
                let off = start * c;
                self.acc_with(*x, |dx| add_into(&mut dx[off..off + g.len()], g));
            }
            Op::ConcatCols(parts) => {
                let total = shape.cols();
                let mut col = 0;
                for &p in parts {
                    let c = self.shape(p).cols();
                    if self.rg(p) {
                        let dp: Vec<T> = g
                            .chunks_exact(total)
                            .flat_map(|row| row[col..col + c].iter().copied())
                            .collect();
                        self.acc(p, &dp);
                    }
                    col += c;
                }
            }
            Op::SliceCols(x, start) => {
                let len = shape.cols();
                let c = self.shape(*x).cols();
                self.acc_with(*x, |dx| {
                    for (drow, grow) in dx.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                        add_into(&mut drow[*start..*start + len], grow);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let c = shape.cols();
                self.acc_with(*table, |dt| {
                    for (row, &id) in g.chunks_exact(c).zip(ids) {
                        add_into(&mut dt[id * c..(id + 1) * c], row);
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let c = shape.cols();
                let floor = T::from_f64(L2_NORM_FLOOR);
                let y = &self.nodes[i].value;
                let mut dx = Vec::with_capacity(y.len());
                for ((yr, gr), &n) in y.chunks_exact(c).zip(g.chunks_exact(c)).zip(norms) {
                    if n > floor {
                        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                        dx.extend(yr.iter().zip(gr).map(|(&a, &b)| (b - a * dot) / n));
                    } else {
                        dx.extend(gr.iter().map(|&b| b / n));
                    }
                }
                self.acc(*x, &dx);
            }
            Op::Mean(x) => {
                let n = self.shape(*x).numel();
                let d = g[0] / T::from_f64(n as f64);
                self.acc_with(*x, |dx| dx.iter_mut().for_each(|v| *v += d));
            }
            Op::Sum(x) => {
                let d = g[0];
                self.acc_with(*x, |dx| dx.iter_mut().for_each(|v| *v += d));
            }
            Op::LogSumExpRows(x) => {
                let c = self.shape(*x).cols();
                let lse = &self.nodes[i].value;
                let dx: Vec<T> = self
                    .value(*x)
                    .chunks_exact(c)
                    .enumerate()
                    .flat_map(|(r, row)| row.iter().map(move |&v| g[r] * (v - lse[r]).exp()))
                    .collect();
                self.acc(*x, &dx);
            }
            Op::PickPerRow { x, idx } => {
                let c = self.shape(*x).cols();
                self.acc_with(*x, |dx| {
                    for (r, &j) in idx.iter().enumerate() {
                        dx[r * c + j] += g[r];
                    }
                });
            }
            Op::RowDot(a, b) => {
                let c = self.shape(*a).cols();
                for (dst, other) in [(*a, *b), (*b, *a)] {
                    if self.rg(dst) {
                        let d: Vec<T> = self
                            .value(other)
                            .chunks_exact(c)
                            .enumerate()
                            .flat_map(|(r, row)| row.iter().map(move |&v| g[r] * v))
                            .collect();
                        self.acc(dst, &d);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                probs,
            } => {
                let (len, d) = (shape.rows(), shape.cols());
                let dh = d / heads;
                let scale = T::ONE / T::from_f64(dh as f64).sqrt();
                let mut dq = vec![T::ZERO; len * d];
                let mut dk = vec![T::ZERO; len * d];
                let mut dv = vec![T::ZERO; len * d];
                {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let mut dp = vec![T::ZERO; len];
                    for h in 0..*heads {
                        let off = h * dh;
                        for i2 in 0..len {
                            let visible = if *causal { i2 + 1 } else { len };
                            let p = &probs[(h * len + i2) * len..(h * len + i2 + 1) * len];
                            let gi = &g[i2 * d + off..i2 * d + off + dh];
                            for j in 0..visible {
                                let vj = &vv[j * d + off..j * d + off + dh];
                                dp[j] = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>();
                                let dvj = &mut dv[j * d + off..j * d + off + dh];
                                for (o, &a) in dvj.iter_mut().zip(gi) {
                                    *o += p[j] * a;
                                }
                            }
                            let dot = (0..visible).map(|j| p[j] * dp[j]).sum::<T>();
                            for j in 0..visible {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == T::ZERO {
                                    continue;
                                }
                                for c in 0..dh {
                                    dq[i2 * d + off + c] += ds * kv[j * d + off + c];
                                    dk[j * d + off + c] += ds * qv[i2 * d + off + c];
                                }
                            }
                        }
                    }
                }
                self.acc(*q, &dq);
                self.acc(*k, &dk);
                self.acc(*v, &dv);
            }
        }
        self.nodes[i].op = op;
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::NEG_INFINITY, T::max);
    let mut total = T::ZERO;
    for v in row.iter_mut() {
        *v = if *v == T::NEG_INFINITY {
            T::ZERO
        } else {
            (*v - mx).exp()
        };
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
