//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass in creation order,
//! so node inputs always precede the node itself and a single reverse sweep
//! visits each node once. Tapes are single-use: after [`Tape::backward`] the
//! forward pass has to be rebuilt.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::param::ParamId;
use crate::real::Real;
use crate::rng::Xoshiro256pp;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Targets for [`Tape::cross_entropy`]: class ids or probability rows.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a, F> {
    Hard(&'a [usize]),
    Soft(&'a Tensor<F>),
}

/// Divergences usable as distillation or smoothness losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Divergence {
    Mse,
    Kl,
    SymmetricKl,
}

/// Lower bound applied to `q` inside `log(p / q)`.
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Param,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    AddConst(Var),
    MulConst(Var, Tensor<F>),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    GatherRows { x: Var, ids: Vec<usize> },
    Permute { x: Var, src: Vec<usize> },
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<F>,
        targets: Vec<F>,
    },
    Kl { p: Var, q: Var },
    Mse { a: Var, b: Var },
}

#[derive(Debug, Clone)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

#[derive(Debug, Clone)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    params: BTreeMap<ParamId, Var>,
    trainable_params: bool,
    kink_tolerance: Option<F>,
    near_kink: bool,
    consumed: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    params: BTreeMap<ParamId, Var>,
}

impl<F: Real> Gradients<F> {
    pub fn wrt(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }

    /// Parameter gradients keyed by id; parameters that took no part in the
    /// loss are absent.
    pub fn into_params(mut self) -> BTreeMap<ParamId, Tensor<F>> {
        let mut out = BTreeMap::new();
        for (id, var) in core::mem::take(&mut self.params) {
            if let Some(g) = self.grads[var.0].take() {
                out.insert(id, g);
            }
        }
        out
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

// c[m×n] = a[m×k]·b[k×n]
fn mm<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, c: &mut [F]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// c[m×n] += a[m×k]·b[n×k]ᵀ
fn mm_nt<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, c: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

// c[m×n] += a[k×m]ᵀ·b[k×n]
fn mm_tn<F: Real>(a: &[F], b: &[F], k: usize, m: usize, n: usize, c: &mut [F]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == F::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn gelu_parts<F: Real>(x: F) -> (F, F) {
    let c = F::lit(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = F::lit(0.044715);
    let half = F::lit(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (F::one() + t);
    let dy = half * (F::one() + t)
        + half * x * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * k * x * x);
    (y, dy)
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Row-sum tolerance for probability inputs; widened by the precision's
/// epsilon so 32-bit softmax outputs over many classes still qualify.
fn prob_tolerance<F: Real>(width: usize) -> f64 {
    1e-6 + width as f64 * F::epsilon().as_f64()
}

fn check_prob_rows<F: Real>(t: &Tensor<F>, what: &str) -> Result<()> {
    let tol = prob_tolerance::<F>(t.cols());
    for r in 0..t.rows() {
        let row = t.row(r);
        let s: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > tol || row.iter().any(|v| *v < F::zero()) {
            return Err(Error::contract(format!(
                "{what} row {r} is not a probability distribution (sum {s})"
            )));
        }
    }
    Ok(())
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            trainable_params: true,
            kink_tolerance: None,
            near_kink: false,
            consumed: false,
        }
    }

    /// A tape whose parameter leaves do not require gradients. Used for
    /// evaluation and for ascent on inputs with frozen weights.
    pub fn frozen() -> Self {
        Self {
            trainable_params: false,
            ..Self::new()
        }
    }

    /// Flags the tape whenever a relu input lands within `tol` of its kink.
    pub fn set_kink_tolerance(&mut self, tol: F) {
        self.kink_tolerance = Some(tol);
    }

    pub fn near_kink(&self) -> bool {
        self.near_kink
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite() || !value.data().iter().any(|v| v.is_nan()));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Registers a model parameter; repeated calls with the same id return
    /// the same node.
    pub fn param(&mut self, id: ParamId, value: &Tensor<F>) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let trainable = self.trainable_params;
        let v = self.push(value.clone(), Op::Param, trainable);
        self.params.insert(id, v);
        v
    }

    /// Stop-gradient: a constant copy of `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        mm(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched product over the leading axis: `[B,m,k]·[B,k,n]`, or
    /// `[B,m,k]·[B,n,k]ᵀ` when `transpose_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(shape_err("batch_matmul", &sa, &sb));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let mut out = vec![F::zero(); bs * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..bs {
                let ai = &ad[i * m * k..(i + 1) * m * k];
                let bi = &bd[i * k * n..(i + 1) * k * n];
                let ci = &mut out[i * m * n..(i + 1) * m * n];
                if transpose_b {
                    mm_nt(ai, bi, m, k, n, ci);
                } else {
                    mm(ai, bi, m, k, n, ci);
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_vec(&[bs, m, n], out)?,
            Op::BatchMatMul { a, b, transpose_b },
            rg,
        ))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data)
    }

    /// Elementwise sum. A rank-1 `b` matching the trailing axis of `a` is
    /// broadcast over rows (bias add).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb && sb.len() == 1 && sa.last() == sb.first() {
            return self.add_row(a, b);
        }
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rank() != 1 || tx.cols() != tb.len() {
            return Err(shape_err("add_row", tx.shape(), tb.shape()));
        }
        let c = tb.len();
        let mut out = tx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tb.data()[i % c];
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// Adds a constant tensor (no gradient flows into it).
    pub fn add_const(&mut self, x: Var, c: &Tensor<F>) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != c.shape() {
            return Err(shape_err("add_const", tx.shape(), c.shape()));
        }
        let mut out = tx.clone();
        out.add_assign(c);
        let rg = self.rg(x);
        Ok(self.push(out, Op::AddConst(x), rg))
    }

    /// Multiplies by a constant tensor (masks, dropout).
    pub fn mul_const(&mut self, x: Var, c: Tensor<F>) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != c.shape() {
            return Err(shape_err("mul_const", tx.shape(), c.shape()));
        }
        let data = tx.data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect();
        let out = Tensor::from_vec(tx.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MulConst(x, c), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        if let Some(tol) = self.kink_tolerance {
            if self.value(x).data().iter().any(|v| v.abs() < tol) {
                self.near_kink = true;
            }
        }
        let out = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu_parts(v).0);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Inverted dropout. Identity when `rng` is `None` or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: Option<&mut Xoshiro256pp>) -> Result<Var> {
        let Some(rng) = rng else { return Ok(x) };
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::contract("dropout probability must be below 1"));
        }
        let keep = F::lit(1.0 / (1.0 - p));
        let mut mask = Tensor::zeros(self.shape(x));
        for m in mask.data_mut() {
            if rng.next_f64() >= p {
                *m = keep;
            }
        }
        self.mul_const(x, mask)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(Error::contract(format!(
                "softmax axis {axis} invalid for rank {}",
                tx.rank()
            )));
        }
        let (outer, len, inner) = axis_split(tx.shape(), axis);
        let mut out = tx.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut mx = F::neg_infinity();
                for j in 0..len {
                    mx = mx.max(d[idx(j)]);
                }
                let mut s = F::zero();
                for j in 0..len {
                    let e = (d[idx(j)] - mx).exp();
                    d[idx(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    d[idx(j)] /= s;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes each row over the trailing axis, then applies `gain` and
    /// `bias`. Variance is the population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if d < 2 || tg.len() != d || tb.len() != d {
            return Err(shape_err("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.rows();
        let df = F::lit(d as f64);
        let mut xhat = vec![F::zero(); rows * d];
        let mut inv_std = vec![F::zero(); rows];
        let mut out = Tensor::zeros(tx.shape());
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let is = F::one() / (var + eps).sqrt();
            inv_std[r] = is;
            let orow = out.row_mut(r);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                orow[j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Gathers rows of `table` (viewed as `[rows × cols]`). Backward
    /// scatter-adds, so repeated ids accumulate.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (n, c) = (t.rows(), t.cols());
        if ids.is_empty() {
            return Err(Error::contract("gather_rows needs at least one id"));
        }
        let mut out = Vec::with_capacity(ids.len() * c);
        for (position, &id) in ids.iter().enumerate() {
            if id >= n {
                return Err(Error::Index {
                    position,
                    index: id,
                    bound: n,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        let rg = self.rg(table);
        let out = Tensor::from_vec(&[ids.len(), c], out)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                x: table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Embedding lookup: row `i` of the result is `table[ids[i]]`.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Element permutation: `out.flat[i] = x.flat[src[i]]`.
    pub fn permute(&mut self, x: Var, shape: &[usize], src: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        if src.len() != shape.iter().product::<usize>() || src.iter().any(|&s| s >= tx.len()) {
            return Err(shape_err("permute", tx.shape(), shape));
        }
        let data = src.iter().map(|&s| tx.data()[s]).collect();
        let out = Tensor::from_vec(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Permute { x, src }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// `[n×m]` → `[m×n]`.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::contract("transpose expects a matrix"));
        }
        let (n, m) = (s[0], s[1]);
        let src = (0..m * n).map(|i| (i % n) * m + i / n).collect();
        self.permute(x, &[m, n], src)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", self.shape(parts[0]), t.shape()));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let out = Tensor::from_vec(&[rows, total], out)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.shape(parts[0]), t.shape()));
            }
            out.extend_from_slice(t.data());
        }
        let rows = out.len() / cols;
        let rg = parts.iter().any(|&p| self.rg(p));
        let out = Tensor::from_vec(&[rows, cols], out)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, c) = (t.rows(), t.cols());
        if start >= end || end > c {
            return Err(shape_err("slice_cols", t.shape(), &[start, end]));
        }
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&t.row(r)[start..end]);
        }
        let rg = self.rg(x);
        let out = Tensor::from_vec(&[rows, end - start], out)?;
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / F::lit(t.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean over rows of `−Σ target · log_softmax(logits)`, with logits viewed
    /// as `[n × K]`. Hard and soft targets share one code path.
    pub fn cross_entropy(&mut self, logits: Var, targets: Targets<'_, F>) -> Result<Var> {
        let tl = self.value(logits);
        let (n, k) = (tl.rows(), tl.cols());
        let dense = match targets {
            Targets::Hard(ids) => {
                if ids.len() != n {
                    return Err(shape_err("cross_entropy", tl.shape(), &[ids.len()]));
                }
                let mut t = vec![F::zero(); n * k];
                for (position, &id) in ids.iter().enumerate() {
                    if id >= k {
                        return Err(Error::Index {
                            position,
                            index: id,
                            bound: k,
                        });
                    }
                    t[position * k + id] = F::one();
                }
                t
            }
            Targets::Soft(rows) => {
                if rows.rows() != n || rows.cols() != k {
                    return Err(shape_err("cross_entropy", tl.shape(), rows.shape()));
                }
                check_prob_rows(rows, "soft target")?;
                rows.data().to_vec()
            }
        };
        let mut probs = vec![F::zero(); n * k];
        let mut total = F::zero();
        for r in 0..n {
            let row = tl.row(r);
            let mx = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let s: F = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + s.ln();
            let mut loss = F::zero();
            for j in 0..k {
                let t = dense[r * k + j];
                probs[r * k + j] = (row[j] - lse).exp();
                if t != F::zero() {
                    loss -= t * (row[j] - lse);
                }
            }
            total += loss;
        }
        let value = total / F::lit(n as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                probs,
                targets: dense,
            },
            rg,
        ))
    }

    /// `KL(p ‖ q)` averaged over rows, with `0·log 0 = 0` and `q` floored at
    /// [`KL_FLOOR`].
    pub fn kl(&mut self, p: Var, q: Var) -> Result<Var> {
        let (tp, tq) = (self.value(p), self.value(q));
        if tp.shape() != tq.shape() {
            return Err(shape_err("kl", tp.shape(), tq.shape()));
        }
        check_prob_rows(tp, "kl p")?;
        check_prob_rows(tq, "kl q")?;
        let floor = F::lit(KL_FLOOR);
        let mut total = F::zero();
        for (&pv, &qv) in tp.data().iter().zip(tq.data()) {
            if pv > F::zero() {
                total += pv * (pv.ln() - qv.max(floor).ln());
            }
        }
        let value = total / F::lit(tp.rows() as f64);
        let rg = self.rg(p) || self.rg(q);
        Ok(self.push(Tensor::scalar(value), Op::Kl { p, q }, rg))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mse", ta.shape(), tb.shape()));
        }
        let s: F = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let value = s / F::lit(ta.len() as f64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(value), Op::Mse { a, b }, rg))
    }

    pub fn divergence(&mut self, kind: Divergence, p: Var, q: Var) -> Result<Var> {
        match kind {
            Divergence::Mse => self.mse(p, q),
            Divergence::Kl => self.kl(p, q),
            Divergence::SymmetricKl => {
                let a = self.kl(p, q)?;
                let b = self.kl(q, p)?;
                self.add(a, b)
            }
        }
    }

    /// Reverse sweep from a scalar `loss`. A tape supports one sweep.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        if self.consumed {
            return Err(Error::contract(
                "backward already ran on this tape; rebuild the forward pass",
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(F::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn zeros_like(&self, v: Var) -> Tensor<F> {
        Tensor::zeros(self.shape(v))
    }

    fn propagate(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.rg(*a) {
                    let mut da = vec![F::zero(); m * k];
                    mm_nt(g.data(), tb.data(), m, n, k, &mut da);
                    self.accumulate(grads, *a, Tensor::from_vec(ta.shape(), da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![F::zero(); k * n];
                    mm_tn(ta.data(), g.data(), m, k, n, &mut db);
                    self.accumulate(grads, *b, Tensor::from_vec(tb.shape(), db)?);
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = out.shape()[2];
                let mut da = vec![F::zero(); ta.len()];
                let mut db = vec![F::zero(); tb.len()];
                for s in 0..bs {
                    let gs = &g.data()[s * m * n..(s + 1) * m * n];
                    let as_ = &ta.data()[s * m * k..(s + 1) * m * k];
                    let bsl = &tb.data()[s * k * n..(s + 1) * k * n];
                    let das = &mut da[s * m * k..(s + 1) * m * k];
                    let dbs = &mut db[s * k * n..(s + 1) * k * n];
                    if *transpose_b {
                        // C = A·Bᵀ, B is [n×k]
                        mm(gs, bsl, m, n, k, das);
                        mm_tn(gs, as_, m, n, k, dbs);
                    } else {
                        mm_nt(gs, bsl, m, n, k, das);
                        mm_tn(as_, gs, m, k, n, dbs);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_vec(ta.shape(), da)?);
                self.accumulate(grads, *b, Tensor::from_vec(tb.shape(), db)?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_vec(ta.shape(), d)?);
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(tb.shape(), d)?);
                }
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*bias) {
                    let mut db = self.zeros_like(*bias);
                    let c = db.len();
                    for (j, &v) in g.data().iter().enumerate() {
                        db.data_mut()[j % c] += v;
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * *s)),
            Op::AddConst(x) => self.accumulate(grads, *x, g.clone()),
            Op::MulConst(x, c) => {
                let d = g.data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), d)?);
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(&gv, &xv)| if xv > F::zero() { gv } else { F::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), d)?);
            }
            Op::Tanh(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * (F::one() - y * y))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), d)?);
            }
            Op::Sigmoid(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (F::one() - y))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), d)?);
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(&gv, &xv)| gv * gelu_parts(xv).1)
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), d)?);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let (y, gy) = (out.data(), g.data());
                let mut d = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + ii;
                        let mut dot = F::zero();
                        for j in 0..len {
                            dot += gy[idx(j)] * y[idx(j)];
                        }
                        for j in 0..len {
                            d[idx(j)] = y[idx(j)] * (gy[idx(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(out.shape(), d)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let tg = self.value(*gain);
                let d = tg.len();
                let rows = out.rows();
                let df = F::lit(d as f64);
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = Tensor::zeros(tg.shape());
                    let mut dbias = Tensor::zeros(tg.shape());
                    for r in 0..rows {
                        for j in 0..d {
                            let gv = g.data()[r * d + j];
                            dg.data_mut()[j] += gv * xhat[r * d + j];
                            dbias.data_mut()[j] += gv;
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                    self.accumulate(grads, *bias, dbias);
                }
                if self.rg(*x) {
                    let mut dx = vec![F::zero(); rows * d];
                    for r in 0..rows {
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..d {
                            let dh = g.data()[r * d + j] * tg.data()[j];
                            s1 += dh;
                            s2 += dh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dh = g.data()[r * d + j] * tg.data()[j];
                            dx[r * d + j] =
                                inv_std[r] / df * (df * dh - s1 - xhat[r * d + j] * s2);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(out.shape(), dx)?);
                }
            }
            Op::GatherRows { x, ids } => {
                let mut dx = self.zeros_like(*x);
                for (r, &id) in ids.iter().enumerate() {
                    let src = g.row(r);
                    for (a, &b) in dx.row_mut(id).iter_mut().zip(src) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Permute { x, src } => {
                let mut dx = self.zeros_like(*x);
                for (i, &s) in src.iter().enumerate() {
                    dx.data_mut()[s] += g.data()[i];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let dx = g.clone().reshaped(self.shape(*x))?;
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut dp = self.zeros_like(p);
                        for r in 0..out.rows() {
                            dp.row_mut(r)
                                .copy_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        let dp = Tensor::from_vec(self.shape(p), g.data()[offset..offset + n].to_vec())?;
                        self.accumulate(grads, p, dp);
                    }
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let mut dx = self.zeros_like(*x);
                let w = out.cols();
                for r in 0..out.rows() {
                    dx.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mean(x) => {
                let n = F::lit(self.value(*x).len() as f64);
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g.item() / n));
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let tl = self.value(*logits);
                let n = F::lit(tl.rows() as f64);
                let scale = g.item() / n;
                // Soft rows sum to one, so d/dz = p·Σt − t reduces to p − t.
                let k = tl.cols();
                let mut d = vec![F::zero(); probs.len()];
                for r in 0..tl.rows() {
                    let tsum: F = targets[r * k..(r + 1) * k].iter().copied().sum();
                    for j in 0..k {
                        d[r * k + j] = (probs[r * k + j] * tsum - targets[r * k + j]) * scale;
                    }
                }
                self.accumulate(grads, *logits, Tensor::from_vec(tl.shape(), d)?);
            }
            Op::Kl { p, q } => {
                let (tp, tq) = (self.value(*p), self.value(*q));
                let floor = F::lit(KL_FLOOR);
                let scale = g.item() / F::lit(tp.rows() as f64);
                if self.rg(*p) {
                    let d = tp
                        .data()
                        .iter()
                        .zip(tq.data())
                        .map(|(&pv, &qv)| {
                            if pv > F::zero() {
                                (pv.ln() - qv.max(floor).ln() + F::one()) * scale
                            } else {
                                F::zero()
                            }
                        })
                        .collect();
                    self.accumulate(grads, *p, Tensor::from_vec(tp.shape(), d)?);
                }
                if self.rg(*q) {
                    let d = tp
                        .data()
                        .iter()
                        .zip(tq.data())
                        .map(|(&pv, &qv)| if qv >= floor { -pv / qv * scale } else { F::zero() })
                        .collect();
                    self.accumulate(grads, *q, Tensor::from_vec(tq.shape(), d)?);
                }
            }
            Op::Mse { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let scale = F::lit(2.0) * g.item() / F::lit(ta.len() as f64);
                let diff: Vec<F> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| (x - y) * scale)
                    .collect();
                if self.rg(*a) {
                    self.accumulate(grads, *a, Tensor::from_vec(ta.shape(), diff.clone())?);
                }
                if self.rg(*b) {
                    let neg = diff.iter().map(|&v| -v).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(tb.shape(), neg)?);
                }
            }
        }
        Ok(())
    }
}
