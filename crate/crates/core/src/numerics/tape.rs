//! Define-by-run reverse-mode autodiff over 2-D buffers.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! sweeps the record in reverse and accumulates gradients onto the parameter
//! leaves, which are then summed into the persistent [`Params`] store with
//! [`Tape::apply_param_grads`]. Nodes are plain (rows, cols) matrices; row
//! vectors, column vectors and scalars are degenerate cases.
//!
//! The tape is generic over the scalar type: training instantiates
//! `Tape<f32>`, while finite-difference gradient verification runs the same
//! graph code at `Tape<f64>` so the numeric oracle is not drowned by single
//! precision rounding noise.

use std::collections::BTreeMap;

use super::scalar::Scalar;
use super::tensor::{Params, Tensor};
use crate::{LensError, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

/// Attention masking rule for [`Tape::masked_softmax`].
///
/// `Causal` is plain lower-triangular attention. `PrefixQuery` keeps rows
/// below `prefix` causal, while rows at and above `prefix` (the appended
/// context-query slots) attend to the whole prefix plus themselves only —
/// never to other query slots, which makes the extracted query states
/// permutation-equivariant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMask {
    Causal,
    PrefixQuery { prefix: usize },
    /// Rectangular scores [M, prefix+M] where row i is the i-th query
    /// attending to the whole prefix plus itself at column prefix+i.
    QueryRows { prefix: usize },
}

impl AttnMask {
    /// Allowed columns for `row`: a contiguous `0..end` range plus an
    /// optional extra column.
    #[inline]
    fn cols(&self, row: usize) -> (usize, Option<usize>) {
        match *self {
            AttnMask::Causal => (row + 1, None),
            AttnMask::PrefixQuery { prefix } => {
                if row < prefix {
                    (row + 1, None)
                } else {
                    (prefix, Some(row))
                }
            }
            AttnMask::QueryRows { prefix } => (prefix, Some(prefix + row)),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;
const LN_EPS: f64 = 1e-5;

enum Op {
    Const,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    AddRow(Var, Var),
    Gelu(Var),
    HardSwish(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    RowSoftmax(Var),
    RowLogSoftmax(Var),
    MaskedSoftmax(Var, AttnMask),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    RowSlice(Var, usize),
    ColSlice(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<u32>),
    PickPerRow(Var, Vec<u32>),
    Sum(Var),
    Mean(Var),
    Reindex(Var, Vec<u32>),
}

struct Node<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    op: Op,
    needs: bool,
}

/// One forward computation record.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    param_leaves: Vec<(String, Var)>,
    param_memo: BTreeMap<String, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            param_leaves: Vec::new(),
            param_memo: BTreeMap::new(),
        }
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<T>, op: Op, needs: bool) -> Var {
        debug_assert_eq!(rows * cols, data.len());
        debug_assert!(
            data.iter().all(|x| x.is_finite()),
            "non-finite value produced by a forward op"
        );
        let grad = if needs {
            Some(vec![T::ZERO; data.len()])
        } else {
            None
        };
        self.nodes.push(Node {
            rows,
            cols,
            data,
            grad,
            op,
            needs,
        });
        Var(self.nodes.len() as u32 - 1)
    }

    #[inline]
    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0 as usize]
    }

    pub fn rows(&self, v: Var) -> usize {
        self.node(v).rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.node(v).cols
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).data
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        let n = self.node(v);
        assert!(n.rows == 1 && n.cols == 1, "scalar() on a non-scalar node");
        n.data[0]
    }

    pub fn grad_of(&self, v: Var) -> Option<&[T]> {
        self.node(v).grad.as_deref()
    }

    /// Gradient recorded for a named parameter leaf, if it was registered
    /// and participates in backward.
    pub fn param_grad(&self, name: &str) -> Option<&[T]> {
        self.param_memo
            .get(name)
            .and_then(|&v| self.node(v).grad.as_deref())
    }

    // ---- leaves ------------------------------------------------------

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Var {
        self.push(rows, cols, data, Op::Const, false)
    }

    pub fn constant_f32(&mut self, rows: usize, cols: usize, data: &[f32]) -> Var {
        let conv = data.iter().map(|&x| T::from_f32(x)).collect();
        self.push(rows, cols, conv, Op::Const, false)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.constant(1, 1, vec![T::from_f64(x)])
    }

    /// Register a parameter leaf. The tensor's data is copied onto the tape;
    /// repeated registration of the same name returns the same node. The
    /// leaf participates in backward iff `t.requires_grad()`.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.param_memo.get(name) {
            return v;
        }
        let (rows, cols) = match *t.shape() {
            [r, c] => (r, c),
            [n] => (1, n),
            _ => panic!("tape parameters must be rank 1 or 2, got {:?}", t.shape()),
        };
        let needs = t.requires_grad();
        let data = t.data().iter().map(|&x| T::from_f32(x)).collect();
        let v = self.push(rows, cols, data, Op::Param, needs);
        self.param_leaves.push((name.to_string(), v));
        self.param_memo.insert(name.to_string(), v);
        v
    }

    // ---- elementwise -------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, context: &'static str) {
        let (na, nb) = (self.node(a), self.node(b));
        assert!(
            na.rows == nb.rows && na.cols == nb.cols,
            "{context}: shape mismatch {}x{} vs {}x{}",
            na.rows,
            na.cols,
            nb.rows,
            nb.cols
        );
    }

    fn zip_op(&mut self, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Var {
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.node(a).needs || self.node(b).needs;
        let (r, c) = (self.rows(a), self.cols(a));
        self.push(r, c, data, op, needs)
    }

    fn map_op(&mut self, a: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let data = self.value(a).iter().map(|&x| f(x)).collect();
        let needs = self.node(a).needs;
        let (r, c) = (self.rows(a), self.cols(a));
        self.push(r, c, data, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        self.zip_op(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        self.zip_op(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        self.zip_op(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise min; gradient follows the smaller input (ties go to `a`).
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "min");
        self.zip_op(a, b, Op::Min(a, b), |x, y| x.minimum(y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cc = T::from_f64(c);
        self.map_op(a, Op::Scale(a, c), |x| x * cc)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let cc = T::from_f64(c);
        self.map_op(a, Op::AddScalar(a), |x| x + cc)
    }

    /// Clamp into [lo, hi]; gradient passes where the input is inside the
    /// closed interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        self.map_op(a, Op::Clamp(a, lo, hi), |x| x.clamp_to(l, h))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, ga) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
        let half = T::from_f64(0.5);
        self.map_op(a, Op::Gelu(a), |x| {
            let u = c * (x + ga * x * x * x);
            half * x * (T::ONE + u.tanh())
        })
    }

    /// x · clamp((x+3)/6, 0, 1): a gelu-class gate built from arithmetic
    /// only, an order of magnitude cheaper than the tanh form on hot paths.
    pub fn hard_swish(&mut self, a: Var) -> Var {
        let (three, sixth) = (T::from_f64(3.0), T::from_f64(1.0 / 6.0));
        self.map_op(a, Op::HardSwish(a), |x| {
            x * ((x + three) * sixth).clamp_to(T::ZERO, T::ONE)
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Sigmoid(a), stable_sigmoid)
    }

    /// ln(1 + e^x), evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Softplus(a), |x| {
            x.maximum(T::ZERO) + (-x.abs()).exp().ln_1p()
        })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Exp(a), |x| x.exp())
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Ln(a), |x| x.ln())
    }

    // ---- linear algebra ----------------------------------------------

    /// `a[m,k] @ b[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.rows(a), self.cols(a));
        let (k2, n) = (self.rows(b), self.cols(b));
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![T::ZERO; m * n];
        matmul_into(self.value(a), self.value(b), m, k, n, &mut out);
        let needs = self.node(a).needs || self.node(b).needs;
        self.push(m, n, out, Op::MatMul(a, b), needs)
    }

    /// `a[m,k] @ b[n,k]^T -> [m,n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.rows(a), self.cols(a));
        let (n, k2) = (self.rows(b), self.cols(b));
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let mut out = vec![T::ZERO; m * n];
        matmul_nt_into(self.value(a), self.value(b), m, k, n, &mut out);
        let needs = self.node(a).needs || self.node(b).needs;
        self.push(m, n, out, Op::MatMulNT(a, b), needs)
    }

    /// Broadcast-add a 1×n bias row to every row of x[m,n].
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (m, n) = (self.rows(x), self.cols(x));
        assert_eq!(self.rows(bias), 1, "add_row bias must be 1xN");
        assert_eq!(self.cols(bias), n, "add_row bias width");
        let b = self.value(bias);
        let mut data = Vec::with_capacity(m * n);
        for row in self.value(x).chunks_exact(n) {
            data.extend(row.iter().zip(b).map(|(&v, &bb)| v + bb));
        }
        let needs = self.node(x).needs || self.node(bias).needs;
        self.push(m, n, data, Op::AddRow(x, bias), needs)
    }

    // ---- row-wise nonlinearities ---------------------------------------

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let (m, n) = (self.rows(a), self.cols(a));
        let mut data = vec![T::ZERO; m * n];
        for (orow, irow) in data.chunks_exact_mut(n).zip(self.value(a).chunks_exact(n)) {
            softmax_row(irow, orow);
        }
        let needs = self.node(a).needs;
        self.push(m, n, data, Op::RowSoftmax(a), needs)
    }

    pub fn row_log_softmax(&mut self, a: Var) -> Var {
        let (m, n) = (self.rows(a), self.cols(a));
        let mut data = vec![T::ZERO; m * n];
        for (orow, irow) in data.chunks_exact_mut(n).zip(self.value(a).chunks_exact(n)) {
            let mut mx = T::neg_infinity();
            for &x in irow {
                mx = mx.maximum(x);
            }
            let mut sum = T::ZERO;
            for &x in irow {
                sum += (x - mx).exp();
            }
            let lse = mx + sum.ln();
            for (o, &x) in orow.iter_mut().zip(irow) {
                *o = x - lse;
            }
        }
        let needs = self.node(a).needs;
        self.push(m, n, data, Op::RowLogSoftmax(a), needs)
    }

    /// Softmax per row restricted to the columns allowed by `mask`;
    /// disallowed entries are exactly zero.
    pub fn masked_softmax(&mut self, a: Var, mask: AttnMask) -> Var {
        let (m, n) = (self.rows(a), self.cols(a));
        let src = self.value(a);
        let mut data = vec![T::ZERO; m * n];
        for r in 0..m {
            let (end, extra) = mask.cols(r);
            let irow = &src[r * n..(r + 1) * n];
            let orow = &mut data[r * n..(r + 1) * n];
            let mut mx = T::neg_infinity();
            for &x in &irow[..end] {
                mx = mx.maximum(x);
            }
            if let Some(e) = extra {
                mx = mx.maximum(irow[e]);
            }
            let mut sum = T::ZERO;
            for j in 0..end {
                let v = (irow[j] - mx).exp();
                orow[j] = v;
                sum += v;
            }
            if let Some(e) = extra {
                let v = (irow[e] - mx).exp();
                orow[e] = v;
                sum += v;
            }
            let inv = T::ONE / sum;
            for j in 0..end {
                orow[j] *= inv;
            }
            if let Some(e) = extra {
                orow[e] *= inv;
            }
        }
        let needs = self.node(a).needs;
        self.push(m, n, data, Op::MaskedSoftmax(a, mask), needs)
    }

    /// Per-row layer norm with affine params gamma, beta (both 1×n).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (m, n) = (self.rows(x), self.cols(x));
        assert_eq!(self.cols(gamma), n);
        assert_eq!(self.cols(beta), n);
        let g = self.value(gamma);
        let b = self.value(beta);
        let inv_n = T::ONE / T::from_usize(n);
        let eps = T::from_f64(LN_EPS);
        let mut data = Vec::with_capacity(m * n);
        for row in self.value(x).chunks_exact(n) {
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_n;
            let mut var = T::ZERO;
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var *= inv_n;
            let inv = T::ONE / (var + eps).sqrt();
            for j in 0..n {
                data.push((row[j] - mean) * inv * g[j] + b[j]);
            }
        }
        let needs = self.node(x).needs || self.node(gamma).needs || self.node(beta).needs;
        self.push(m, n, data, Op::LayerNorm { x, gamma, beta }, needs)
    }

    // ---- shape ops -----------------------------------------------------

    pub fn row_slice(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let (m, n) = (self.rows(a), self.cols(a));
        assert!(r0 < r1 && r1 <= m, "row_slice {r0}..{r1} of {m}");
        let data = self.value(a)[r0 * n..r1 * n].to_vec();
        let needs = self.node(a).needs;
        self.push(r1 - r0, n, data, Op::RowSlice(a, r0), needs)
    }

    pub fn col_slice(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let (m, n) = (self.rows(a), self.cols(a));
        assert!(c0 < c1 && c1 <= n, "col_slice {c0}..{c1} of {n}");
        let w = c1 - c0;
        let src = self.value(a);
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + c0..r * n + c1]);
        }
        let needs = self.node(a).needs;
        self.push(m, w, data, Op::ColSlice(a, c0), needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.cols(parts[0]);
        let mut data = Vec::new();
        let mut rows = 0;
        let mut needs = false;
        for &p in parts {
            assert_eq!(self.cols(p), n, "concat_rows width mismatch");
            data.extend_from_slice(self.value(p));
            rows += self.rows(p);
            needs |= self.node(p).needs;
        }
        self.push(rows, n, data, Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.rows(parts[0]);
        let total: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut data = vec![T::ZERO; m * total];
        let mut off = 0;
        let mut needs = false;
        for &p in parts {
            assert_eq!(self.rows(p), m, "concat_cols height mismatch");
            let w = self.cols(p);
            let src = self.value(p);
            for r in 0..m {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
            needs |= self.node(p).needs;
        }
        self.push(m, total, data, Op::ConcatCols(parts.to_vec()), needs)
    }

    /// out[i, :] = table[ids[i], :].
    pub fn gather_rows(&mut self, table: Var, ids: &[u32]) -> Var {
        let (m, n) = (self.rows(table), self.cols(table));
        let src = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            let id = id as usize;
            assert!(id < m, "gather_rows id {id} out of {m}");
            data.extend_from_slice(&src[id * n..(id + 1) * n]);
        }
        let needs = self.node(table).needs;
        self.push(ids.len(), n, data, Op::GatherRows(table, ids.to_vec()), needs)
    }

    /// out[i, 0] = a[i, ids[i]].
    pub fn pick_per_row(&mut self, a: Var, ids: &[u32]) -> Var {
        let (m, n) = (self.rows(a), self.cols(a));
        assert_eq!(ids.len(), m, "pick_per_row needs one id per row");
        let src = self.value(a);
        let data = ids
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!((j as usize) < n);
                src[i * n + j as usize]
            })
            .collect();
        let needs = self.node(a).needs;
        self.push(m, 1, data, Op::PickPerRow(a, ids.to_vec()), needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let mut s = T::ZERO;
        for &x in self.value(a) {
            s += x;
        }
        let needs = self.node(a).needs;
        self.push(1, 1, vec![s], Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let mut s = T::ZERO;
        for &x in self.value(a) {
            s += x;
        }
        s *= T::ONE / T::from_usize(n);
        let needs = self.node(a).needs;
        self.push(1, 1, vec![s], Op::Mean(a), needs)
    }

    /// Arbitrary gather: out.data[i] = a.data[map[i]], reshaped to rows×cols.
    pub fn reindex(&mut self, a: Var, map: &[u32], rows: usize, cols: usize) -> Var {
        assert_eq!(map.len(), rows * cols);
        let src = self.value(a);
        let data = map.iter().map(|&i| src[i as usize]).collect();
        let needs = self.node(a).needs;
        self.push(rows, cols, data, Op::Reindex(a, map.to_vec()), needs)
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar loss. Populates gradients on every
    /// parameter leaf on the computation path (others keep zero).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        {
            let n = self.node(loss);
            if n.rows != 1 || n.cols != 1 {
                return Err(LensError::Shape {
                    context: "backward",
                    expected: "scalar loss (1x1)".into(),
                    got: format!("{}x{}", n.rows, n.cols),
                });
            }
            if !n.data[0].is_finite() {
                return Err(LensError::NonFinite("loss".into()));
            }
        }
        if !self.node(loss).needs {
            // No trainable parameter reaches the loss; nothing to do.
            return Ok(());
        }
        if let Some(g) = self.nodes[loss.0 as usize].grad.as_mut() {
            g[0] += T::ONE;
        }
        for i in (0..=loss.0 as usize).rev() {
            if !self.nodes[i].needs {
                continue;
            }
            self.step_backward(i);
        }
        // NaN in any parameter gradient is an error, always checked.
        for (name, v) in &self.param_leaves {
            if let Some(g) = self.nodes[v.0 as usize].grad.as_deref() {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(LensError::NonFinite(format!("gradient of {name}")));
                }
            }
        }
        Ok(())
    }

    /// Sum the tape's parameter gradients into the persistent store.
    pub fn apply_param_grads(&self, params: &mut Params) {
        for (name, v) in &self.param_leaves {
            let node = self.node(*v);
            if !node.needs {
                continue;
            }
            if let Some(g) = node.grad.as_deref() {
                let g32: Vec<f32> = g.iter().map(|x| x.to_f32()).collect();
                params.get_mut(name).accumulate_grad(&g32);
            }
        }
    }

    /// Parameter gradients recorded on this tape, in registration order.
    pub fn param_grads(&self) -> Vec<(String, Vec<f32>)> {
        self.param_leaves
            .iter()
            .filter(|(_, v)| self.node(*v).needs)
            .map(|(name, v)| {
                let g = self.node(*v).grad.as_deref().unwrap();
                (name.clone(), g.iter().map(|x| x.to_f32()).collect())
            })
            .collect()
    }

    fn grad_buf(&mut self, v: Var) -> Option<*mut [T]> {
        let node = &mut self.nodes[v.0 as usize];
        if !node.needs {
            return None;
        }
        node.grad.as_mut().map(|g| g.as_mut_slice() as *mut [T])
    }

    /// Const view of a node's data for backward formulas. The pointer stays
    /// valid through the sweep (no nodes are added or removed), and grad
    /// buffers are disjoint allocations from data buffers.
    fn data_ptr(&self, v: Var) -> *const [T] {
        self.node(v).data.as_slice() as *const [T]
    }

    fn step_backward(&mut self, i: usize) {
        // Take the node's grad out to avoid aliasing with input grads.
        let gout = match self.nodes[i].grad.take() {
            Some(g) => g,
            None => return,
        };
        let (rows, cols) = (self.nodes[i].rows, self.nodes[i].cols);
        // SAFETY of the pattern below: `gout` is owned, and every `grad_buf`
        // pointer refers to a distinct earlier node's buffer which is not
        // otherwise borrowed while the closure body runs.
        macro_rules! with_grad {
            ($v:expr, |$g:ident| $body:block) => {
                if let Some(p) = self.grad_buf($v) {
                    let $g: &mut [T] = unsafe { &mut *p };
                    $body
                }
            };
        }
        match &self.nodes[i].op {
            Op::Const | Op::Param => {
                self.nodes[i].grad = Some(gout);
                return;
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                with_grad!(a, |g| {
                    for (x, &d) in g.iter_mut().zip(&gout) {
                        *x += d;
                    }
                });
                with_grad!(b, |g| {
                    for (x, &d) in g.iter_mut().zip(&gout) {
                        *x += d;
                    }
                });
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                with_grad!(a, |g| {
                    for (x, &d) in g.iter_mut().zip(&gout) {
                        *x += d;
                    }
                });
                with_grad!(b, |g| {
                    for (x, &d) in g.iter_mut().zip(&gout) {
                        *x -= d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let bd = self.data_ptr(b);
                let ad = self.data_ptr(a);
                with_grad!(a, |g| {
                    let bd: &[T] = unsafe { &*bd };
                    for ((x, &d), &bv) in g.iter_mut().zip(&gout).zip(bd) {
                        *x += d * bv;
                    }
                });
                with_grad!(b, |g| {
                    let ad: &[T] = unsafe { &*ad };
                    for ((x, &d), &av) in g.iter_mut().zip(&gout).zip(ad) {
                        *x += d * av;
                    }
                });
            }
            Op::Min(a, b) => {
                let (a, b) = (*a, *b);
                let ad = self.data_ptr(a);
                let bd = self.data_ptr(b);
                with_grad!(a, |g| {
                    let (ad, bd): (&[T], &[T]) = unsafe { (&*ad, &*bd) };
                    for j in 0..gout.len() {
                        if ad[j] <= bd[j] {
                            g[j] += gout[j];
                        }
                    }
                });
                with_grad!(b, |g| {
                    let (ad, bd): (&[T], &[T]) = unsafe { (&*ad, &*bd) };
                    for j in 0..gout.len() {
                        if ad[j] > bd[j] {
                            g[j] += gout[j];
                        }
                    }
                });
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, T::from_f64(*c));
                with_grad!(a, |g| {
                    for (x, &d) in g.iter_mut().zip(&gout) {
                        *x += d * c;
                    }
                });
            }
            Op::AddScalar(a) => {
                let a = *a;
                with_grad!(a, |g| {
                    for (x, &d) in g.iter_mut().zip(&gout) {
                        *x += d;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let (a, lo, hi) = (*a, T::from_f64(*lo), T::from_f64(*hi));
                let ad = self.data_ptr(a);
                with_grad!(a, |g| {
                    let ad: &[T] = unsafe { &*ad };
                    for j in 0..gout.len() {
                        if ad[j] >= lo && ad[j] <= hi {
                            g[j] += gout[j];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.rows(a), self.cols(a));
                let n = cols;
                debug_assert_eq!(rows, m);
                let ad = self.data_ptr(a);
                let bd = self.data_ptr(b);
                with_grad!(a, |g| {
                    // dA += dC @ B^T
                    matmul_nt_acc(&gout, unsafe { &*bd }, m, n, k, g);
                });
                with_grad!(b, |g| {
                    // dB += A^T @ dC
                    matmul_tn_acc(unsafe { &*ad }, &gout, m, k, n, g);
                });
            }
            Op::MatMulNT(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.rows(a), self.cols(a));
                let n = cols;
                debug_assert_eq!(rows, m);
                let ad = self.data_ptr(a);
                let bd = self.data_ptr(b);
                with_grad!(a, |g| {
                    // dA += dC @ B
                    matmul_acc(&gout, unsafe { &*bd }, m, n, k, g);
                });
                with_grad!(b, |g| {
                    // dB += dC^T @ A
                    matmul_tn_acc(&gout, unsafe { &*ad }, m, n, k, g);
                });
            }
            Op::AddRow(x, bias) => {
                let (x, bias) = (*x, *bias);
                let n = cols;
                with_grad!(x, |g| {
                    for (gx, &d) in g.iter_mut().zip(&gout) {
                        *gx += d;
                    }
                });
                with_grad!(bias, |g| {
                    for row in gout.chunks_exact(n) {
                        for (gb, &d) in g.iter_mut().zip(row) {
                            *gb += d;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let a = *a;
                let ad = self.data_ptr(a);
                let (c, ga) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                with_grad!(a, |g| {
                    let ad: &[T] = unsafe { &*ad };
                    for j in 0..gout.len() {
                        let x = ad[j];
                        let u = c * (x + ga * x * x * x);
                        let t = u.tanh();
                        let du = c * (T::ONE + three * ga * x * x);
                        let d = half * (T::ONE + t) + half * x * (T::ONE - t * t) * du;
                        g[j] += gout[j] * d;
                    }
                });
            }
            Op::HardSwish(a) => {
                let a = *a;
                let ad = self.data_ptr(a);
                let (three, sixth) = (T::from_f64(3.0), T::from_f64(1.0 / 6.0));
                with_grad!(a, |g| {
                    let ad: &[T] = unsafe { &*ad };
                    for j in 0..gout.len() {
                        let x = ad[j];
                        let d = if x <= -three {
                            T::ZERO
                        } else if x >= three {
                            T::ONE
                        } else {
                            (x + x + three) * sixth
                        };
                        g[j] += gout[j] * d;
                    }
                });
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let y = self.data_ptr(Var(i as u32));
                with_grad!(a, |g| {
                    let y: &[T] = unsafe { &*y };
                    for j in 0..gout.len() {
                        g[j] += gout[j] * y[j] * (T::ONE - y[j]);
                    }
                });
            }
            Op::Softplus(a) => {
                let a = *a;
                let ad = self.data_ptr(a);
                with_grad!(a, |g| {
                    let ad: &[T] = unsafe { &*ad };
                    for j in 0..gout.len() {
                        g[j] += gout[j] * stable_sigmoid(ad[j]);
                    }
                });
            }
            Op::Exp(a) => {
                let a = *a;
                let y = self.data_ptr(Var(i as u32));
                with_grad!(a, |g| {
                    let y: &[T] = unsafe { &*y };
                    for j in 0..gout.len() {
                        g[j] += gout[j] * y[j];
                    }
                });
            }
            Op::Ln(a) => {
                let a = *a;
                let ad = self.data_ptr(a);
                with_grad!(a, |g| {
                    let ad: &[T] = unsafe { &*ad };
                    for j in 0..gout.len() {
                        g[j] += gout[j] / ad[j];
                    }
                });
            }
            Op::RowSoftmax(a) => {
                let a = *a;
                let y = self.data_ptr(Var(i as u32));
                let n = cols;
                with_grad!(a, |g| {
                    let y: &[T] = unsafe { &*y };
                    for r in 0..rows {
                        let yr = &y[r * n..(r + 1) * n];
                        let dr = &gout[r * n..(r + 1) * n];
                        let mut dot = T::ZERO;
                        for j in 0..n {
                            dot += yr[j] * dr[j];
                        }
                        let gr = &mut g[r * n..(r + 1) * n];
                        for j in 0..n {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::RowLogSoftmax(a) => {
                let a = *a;
                let y = self.data_ptr(Var(i as u32));
                let n = cols;
                with_grad!(a, |g| {
                    let y: &[T] = unsafe { &*y };
                    for r in 0..rows {
                        let yr = &y[r * n..(r + 1) * n];
                        let dr = &gout[r * n..(r + 1) * n];
                        let mut s = T::ZERO;
                        for &d in dr {
                            s += d;
                        }
                        let gr = &mut g[r * n..(r + 1) * n];
                        for j in 0..n {
                            gr[j] += dr[j] - yr[j].exp() * s;
                        }
                    }
                });
            }
            Op::MaskedSoftmax(a, mask) => {
                let (a, mask) = (*a, *mask);
                let y = self.data_ptr(Var(i as u32));
                let n = cols;
                with_grad!(a, |g| {
                    let y: &[T] = unsafe { &*y };
                    for r in 0..rows {
                        let (end, extra) = mask.cols(r);
                        let yr = &y[r * n..(r + 1) * n];
                        let dr = &gout[r * n..(r + 1) * n];
                        let mut dot = T::ZERO;
                        for j in 0..end {
                            dot += yr[j] * dr[j];
                        }
                        if let Some(e) = extra {
                            dot += yr[e] * dr[e];
                        }
                        let gr = &mut g[r * n..(r + 1) * n];
                        for j in 0..end {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                        if let Some(e) = extra {
                            gr[e] += yr[e] * (dr[e] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let n = cols;
                let xd = self.data_ptr(x);
                let gd = self.data_ptr(gamma);
                let inv_n = T::ONE / T::from_usize(n);
                let eps = T::from_f64(LN_EPS);
                with_grad!(x, |g| {
                    let (xd, gd): (&[T], &[T]) = unsafe { (&*xd, &*gd) };
                    for r in 0..rows {
                        let xr = &xd[r * n..(r + 1) * n];
                        let dr = &gout[r * n..(r + 1) * n];
                        let mut mean = T::ZERO;
                        for &v in xr {
                            mean += v;
                        }
                        mean *= inv_n;
                        let mut var = T::ZERO;
                        for &v in xr {
                            var += (v - mean) * (v - mean);
                        }
                        var *= inv_n;
                        let inv = T::ONE / (var + eps).sqrt();
                        let mut sum_d = T::ZERO;
                        let mut sum_dx = T::ZERO;
                        for j in 0..n {
                            let dn = dr[j] * gd[j];
                            let xh = (xr[j] - mean) * inv;
                            sum_d += dn;
                            sum_dx += dn * xh;
                        }
                        let gr = &mut g[r * n..(r + 1) * n];
                        for j in 0..n {
                            let dn = dr[j] * gd[j];
                            let xh = (xr[j] - mean) * inv;
                            gr[j] += inv * (dn - sum_d * inv_n - xh * sum_dx * inv_n);
                        }
                    }
                });
                with_grad!(gamma, |g| {
                    let xd: &[T] = unsafe { &*xd };
                    for r in 0..rows {
                        let xr = &xd[r * n..(r + 1) * n];
                        let dr = &gout[r * n..(r + 1) * n];
                        let mut mean = T::ZERO;
                        for &v in xr {
                            mean += v;
                        }
                        mean *= inv_n;
                        let mut var = T::ZERO;
                        for &v in xr {
                            var += (v - mean) * (v - mean);
                        }
                        var *= inv_n;
                        let inv = T::ONE / (var + eps).sqrt();
                        for j in 0..n {
                            g[j] += dr[j] * (xr[j] - mean) * inv;
                        }
                    }
                });
                with_grad!(beta, |g| {
                    for r in 0..rows {
                        let dr = &gout[r * n..(r + 1) * n];
                        for j in 0..n {
                            g[j] += dr[j];
                        }
                    }
                });
            }
            Op::RowSlice(a, r0) => {
                let (a, r0) = (*a, *r0);
                let n = cols;
                with_grad!(a, |g| {
                    let base = r0 * n;
                    for (x, &d) in g[base..base + gout.len()].iter_mut().zip(&gout) {
                        *x += d;
                    }
                });
            }
            Op::ColSlice(a, c0) => {
                let (a, c0) = (*a, *c0);
                let w = cols;
                let an = self.cols(a);
                with_grad!(a, |g| {
                    for r in 0..rows {
                        for j in 0..w {
                            g[r * an + c0 + j] += gout[r * w + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let n = cols;
                let mut off = 0;
                for p in parts {
                    let pr = self.rows(p);
                    with_grad!(p, |g| {
                        for (x, &d) in g.iter_mut().zip(&gout[off * n..(off + pr) * n]) {
                            *x += d;
                        }
                    });
                    off += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let total = cols;
                let mut off = 0;
                for p in parts {
                    let w = self.cols(p);
                    with_grad!(p, |g| {
                        for r in 0..rows {
                            for j in 0..w {
                                g[r * w + j] += gout[r * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::GatherRows(table, ids) => {
                let (table, ids) = (*table, ids.clone());
                let n = cols;
                with_grad!(table, |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut g[id as usize * n..(id as usize + 1) * n];
                        for (x, &d) in dst.iter_mut().zip(&gout[r * n..(r + 1) * n]) {
                            *x += d;
                        }
                    }
                });
            }
            Op::PickPerRow(a, ids) => {
                let (a, ids) = (*a, ids.clone());
                let an = self.cols(a);
                with_grad!(a, |g| {
                    for (r, &j) in ids.iter().enumerate() {
                        g[r * an + j as usize] += gout[r];
                    }
                });
            }
            Op::Sum(a) => {
                let a = *a;
                with_grad!(a, |g| {
                    for x in g.iter_mut() {
                        *x += gout[0];
                    }
                });
            }
            Op::Mean(a) => {
                let a = *a;
                let len = self.node(a).data.len();
                let d = gout[0] * (T::ONE / T::from_usize(len));
                with_grad!(a, |g| {
                    for x in g.iter_mut() {
                        *x += d;
                    }
                });
            }
            Op::Reindex(a, map) => {
                let (a, map) = (*a, map.clone());
                with_grad!(a, |g| {
                    for (j, &src) in map.iter().enumerate() {
                        g[src as usize] += gout[j];
                    }
                });
            }
        }
        self.nodes[i].grad = Some(gout);
    }
}

#[inline]
fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let mut mx = T::neg_infinity();
    for &x in row {
        mx = mx.maximum(x);
    }
    let mut sum = T::ZERO;
    for (o, &x) in out.iter_mut().zip(row) {
        let v = (x - mx).exp();
        *o = v;
        sum += v;
    }
    let inv = T::ONE / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// out = a[m,k] @ b[k,n] (overwrites out).
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    out.iter_mut().for_each(|x| *x = T::ZERO);
    matmul_acc(a, b, m, k, n, out);
}

/// out += a[m,k] @ b[k,n]. Zero entries of `a` are skipped, which pays off
/// on masked attention rows where half the probabilities are exact zeros.
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::ZERO {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out = a[m,k] @ b[n,k]^T (overwrites out).
pub(crate) fn matmul_nt_into<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    out.iter_mut().for_each(|x| *x = T::ZERO);
    matmul_nt_acc(a, b, m, k, n, out);
}

/// out += a[m,k] @ b[n,k]^T.
///
/// Transposes b once so the inner loop is the vector-friendly broadcast
/// kernel; the row-of-dots form is ~3x slower.
fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    if m < 4 {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (j, o) in orow.iter_mut().enumerate() {
                let brow = &b[j * k..(j + 1) * k];
                *o += dot(arow, brow);
            }
        }
        return;
    }
    let mut bt = vec![T::ZERO; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    matmul_acc(a, &bt, m, k, n, out);
}

/// out += a[m,k]^T @ b[m,n]; out is [k,n].
fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    // Four accumulators so LLVM can keep independent vector chains.
    let mut s0 = T::ZERO;
    let mut s1 = T::ZERO;
    let mut s2 = T::ZERO;
    let mut s3 = T::ZERO;
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn param(tape: &mut Tape<f32>, name: &str, shape: &[usize], data: Vec<f32>) -> (Tensor, Var) {
        let mut t = Tensor::from_vec(shape, data).unwrap();
        t.set_requires_grad(true);
        let v = tape.param(name, &t);
        (t, v)
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f32>::new();
        let (_, p) = param(&mut tape, "p", &[3], vec![1.0, 2.0, 3.0]);
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad_of(p).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_quadratic() {
        let mut tape = Tape::<f32>::new();
        let (_, p) = param(&mut tape, "p", &[3], vec![1.0, 2.0, 3.0]);
        let sq = tape.mul(p, p);
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad_of(p).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let (_, p) = param(&mut tape, "p", &[3], vec![1.0, 2.0, 3.0]);
        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn matmul_matches_manual() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = tape.constant(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_nt_equals_matmul_with_transpose() {
        let mut rng = Rng::new(3);
        let a: Vec<f32> = (0..6).map(|_| rng.normal_f32()).collect();
        let b: Vec<f32> = (0..6).map(|_| rng.normal_f32()).collect();
        let mut tape = Tape::<f32>::new();
        let av = tape.constant(2, 3, a.clone());
        let bv = tape.constant(2, 3, b.clone());
        let c = tape.matmul_nt(av, bv);
        let mut bt = vec![0.0; 6];
        for r in 0..2 {
            for c2 in 0..3 {
                bt[c2 * 2 + r] = b[r * 3 + c2];
            }
        }
        let btv = tape.constant(3, 2, bt);
        let c2 = tape.matmul(av, btv);
        let (x, y) = (tape.value(c).to_vec(), tape.value(c2).to_vec());
        for (u, w) in x.iter().zip(&y) {
            assert!((u - w).abs() < 1e-6);
        }
    }

    #[test]
    fn unreached_param_keeps_zero_grad() {
        let mut tape = Tape::<f32>::new();
        let (_, p) = param(&mut tape, "p", &[2], vec![1.0, 2.0]);
        let (_, q) = param(&mut tape, "q", &[2], vec![1.0, 2.0]);
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad_of(q).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_on_allowed_cols() {
        let mut rng = Rng::new(7);
        let mut tape = Tape::<f32>::new();
        let data: Vec<f32> = (0..25).map(|_| rng.normal_f32()).collect();
        let a = tape.constant(5, 5, data);
        let y = tape.masked_softmax(a, AttnMask::PrefixQuery { prefix: 3 });
        let v = tape.value(y);
        for r in 0..5 {
            let row = &v[r * 5..(r + 1) * 5];
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5, "row {r} sums to {s}");
            if r >= 3 {
                // query rows: prefix columns allowed, other query columns not
                for (j, &x) in row.iter().enumerate() {
                    if j >= 3 && j != r {
                        assert_eq!(x, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn pick_and_gather_roundtrip_grads() {
        let mut tape = Tape::<f32>::new();
        let (_, table) = param(&mut tape, "t", &[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let g = tape.gather_rows(table, &[2, 0, 2]);
        let s = tape.sum(g);
        tape.backward(s).unwrap();
        // row 2 gathered twice, row 0 once, row 1 never
        assert_eq!(tape.grad_of(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn f64_tape_runs_same_graph() {
        let mut tape = Tape::<f64>::new();
        let mut t = Tensor::from_vec(&[2], vec![0.5, -0.25]).unwrap();
        t.set_requires_grad(true);
        let p = tape.param("p", &t);
        let e = tape.exp(p);
        let loss = tape.sum(e);
        tape.backward(loss).unwrap();
        let g = tape.grad_of(p).unwrap();
        assert!((g[0] - 0.5f64.exp()).abs() < 1e-12);
        assert!((g[1] - (-0.25f64).exp()).abs() < 1e-12);
    }
}
