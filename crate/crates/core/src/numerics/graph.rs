//! Tape-based reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Graph`] records every operation applied during a forward pass. Nodes
//! are appended in evaluation order, so walking the tape backwards visits
//! each node after all of its consumers. Parameters are read from a borrowed
//! [`ParamStore`]; gradients for them are returned as [`Gradients`].

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{mm, mm_nt, mm_tn, Tensor};

/// Logit value written into masked entries before normalisation.
pub const MASKED_LOGIT: f64 = -1e9;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    MaskFill(Var, Vec<bool>),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    SelectRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    SumRows(Var),
    SumAll(Var),
    MeanAll(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    /// Each parameter enters the tape once, however often it is read.
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&a| f(a)).collect();
        let value = Tensor::from_rows(xv.rows(), xv.cols(), data);
        self.push(value, op)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(
            av.same_shape(bv),
            "elementwise op on [{}x{}] and [{}x{}]",
            av.rows(),
            av.cols(),
            bv.rows(),
            bv.cols()
        );
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_rows(av.rows(), av.cols(), data);
        self.push(value, op)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = self.push(value, Op::Param(id));
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// `a[m,k] * b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        assert_eq!(k, k2, "matmul inner dims");
        let out = mm(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), m, k, n);
        self.push(Tensor::from_rows(m, n, out), Op::MatMul(a, b))
    }

    /// `a[m,k] * b[n,k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let ((m, k), (n, k2)) = (self.dims(a), self.dims(b));
        assert_eq!(k, k2, "matmul_nt inner dims");
        let out = mm_nt(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), m, k, n);
        self.push(Tensor::from_rows(m, n, out), Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Min(a, b), |x, y| if x <= y { x } else { y })
    }

    /// Adds the `[1,n]` row `b` to every row of `a[m,n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let ((m, n), (one, n2)) = (self.dims(a), self.dims(b));
        assert!(one == 1 && n == n2, "add_row expects a [1x{n}] bias");
        let bias = self.nodes[b.0].value.data().to_vec();
        let mut out = self.nodes[a.0].value.clone();
        for r in 0..m {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRow(a, b))
    }

    /// Multiplies row `r` of `a[m,n]` by `c[r,0]` for a `[m,1]` column `c`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let ((m, _), (m2, one)) = (self.dims(a), self.dims(c));
        assert!(m == m2 && one == 1, "mul_col expects a [{m}x1] column");
        let col = self.nodes[c.0].value.data().to_vec();
        let mut out = self.nodes[a.0].value.clone();
        for (r, s) in col.iter().enumerate() {
            for o in out.row_mut(r) {
                *o *= s;
            }
        }
        self.push(out, Op::MulCol(a, c))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |a| a * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |a| a + s)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |a| a.max(0.0))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), |a| {
            0.5 * a * (1.0 + (GELU_C * (a + 0.044715 * a * a * a)).tanh())
        })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// Replaces entries where `mask` is `false` with [`MASKED_LOGIT`].
    ///
    /// `mask` holds either one flag per column (shared by all rows) or one
    /// flag per element.
    pub fn mask_fill(&mut self, x: Var, mask: Vec<bool>) -> Var {
        let (m, n) = self.dims(x);
        assert!(
            mask.len() == n || mask.len() == m * n,
            "mask length {} for [{m}x{n}]",
            mask.len()
        );
        let mut out = self.nodes[x.0].value.clone();
        for r in 0..m {
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                if !mask_at(&mask, n, r, c) {
                    *o = MASKED_LOGIT;
                }
            }
        }
        self.push(out, Op::MaskFill(x, mask))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::Softmax(x))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            let row = out.row_mut(r);
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(out, Op::LogSoftmax(x))
    }

    /// Row-wise layer normalisation with affine `[1,n]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (m, n) = self.dims(x);
        assert_eq!(self.dims(gamma), (1, n));
        assert_eq!(self.dims(beta), (1, n));
        let xv = self.nodes[x.0].value.data();
        let g = self.nodes[gamma.0].value.data();
        let b = self.nodes[beta.0].value.data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::from_rows(m, n, out);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Gathers rows of `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let t = &self.nodes[table.0].value;
        let n = t.cols();
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in &ids {
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::from_rows(ids.len(), n, out);
        self.push(value, Op::Gather(table, ids))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.dims(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Tensor::zeros(m, total);
        let mut off = 0;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            assert_eq!(pv.rows(), m, "concat_cols row count");
            let w = pv.cols();
            for r in 0..m {
                out.row_mut(r)[off..off + w].copy_from_slice(pv.row(r));
            }
            off += w;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let (m, n) = self.dims(x);
        assert!(start < end && end <= n);
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            out.extend_from_slice(&xv.row(r)[start..end]);
        }
        self.push(Tensor::from_rows(m, end - start, out), Op::SliceCols(x, start, end))
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let xv = &self.nodes[x.0].value;
        let n = xv.cols();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in &rows {
            out.extend_from_slice(xv.row(r));
        }
        let value = Tensor::from_rows(rows.len(), n, out);
        self.push(value, Op::SelectRows(x, rows))
    }

    /// Picks `x[r, cols[r]]` for every row, producing a `[m,1]` column.
    pub fn pick(&mut self, x: Var, cols: Vec<usize>) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(cols.len(), xv.rows(), "pick needs one column per row");
        let out: Vec<f64> = cols.iter().enumerate().map(|(r, &c)| xv.get(r, c)).collect();
        let value = Tensor::from_rows(cols.len(), 1, out);
        self.push(value, Op::Pick(x, cols))
    }

    /// Sums each row, producing a `[m,1]` column.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let out: Vec<f64> = (0..xv.rows()).map(|r| xv.row(r).iter().sum()).collect();
        let value = Tensor::from_rows(xv.rows(), 1, out);
        self.push(value, Op::SumRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let s = xv.data().iter().sum::<f64>() / xv.len() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(x))
    }

    /// Reverse pass from a scalar node. Returns parameter gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::empty(self.params.len());

        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => out.accumulate_param(*id, &gy),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let ga = mm_nt(gy.data(), bv.data(), m, n, k);
                    let gb = mm_tn(av.data(), gy.data(), k, m, n);
                    add_grad(&mut grads, *a, Tensor::from_rows(m, k, ga));
                    add_grad(&mut grads, *b, Tensor::from_rows(k, n, gb));
                }
                Op::MatMulNT(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                    let ga = mm(gy.data(), bv.data(), m, n, k);
                    let gb = mm_tn(gy.data(), av.data(), n, m, k);
                    add_grad(&mut grads, *a, Tensor::from_rows(m, k, ga));
                    add_grad(&mut grads, *b, Tensor::from_rows(n, k, gb));
                }
                Op::Add(a, b) => {
                    add_grad(&mut grads, *a, gy.clone());
                    add_grad(&mut grads, *b, gy);
                }
                Op::Sub(a, b) => {
                    add_grad(&mut grads, *a, gy.clone());
                    let mut neg = gy;
                    neg.scale_assign(-1.0);
                    add_grad(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = zip_map(&gy, bv, |g, y| g * y);
                    let gb = zip_map(&gy, av, |g, x| g * x);
                    add_grad(&mut grads, *a, ga);
                    add_grad(&mut grads, *b, gb);
                }
                Op::Min(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let mut ga = gy.clone();
                    let mut gb = gy;
                    for ((x, y), (pa, pb)) in av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .zip(ga.data_mut().iter_mut().zip(gb.data_mut().iter_mut()))
                    {
                        if x <= y {
                            *pb = 0.0;
                        } else {
                            *pa = 0.0;
                        }
                    }
                    add_grad(&mut grads, *a, ga);
                    add_grad(&mut grads, *b, gb);
                }
                Op::AddRow(a, b) => {
                    let n = gy.cols();
                    let mut gb = vec![0.0; n];
                    for r in 0..gy.rows() {
                        for (s, g) in gb.iter_mut().zip(gy.row(r)) {
                            *s += g;
                        }
                    }
                    add_grad(&mut grads, *b, Tensor::from_rows(1, n, gb));
                    add_grad(&mut grads, *a, gy);
                }
                Op::MulCol(a, c) => {
                    let (av, cv) = (&self.nodes[a.0].value, &self.nodes[c.0].value);
                    let mut ga = gy.clone();
                    let mut gc = vec![0.0; gy.rows()];
                    for r in 0..gy.rows() {
                        let s = cv.data()[r];
                        let mut acc = 0.0;
                        for (g, x) in gy.row(r).iter().zip(av.row(r)) {
                            acc += g * x;
                        }
                        gc[r] = acc;
                        for g in ga.row_mut(r) {
                            *g *= s;
                        }
                    }
                    add_grad(&mut grads, *a, ga);
                    add_grad(&mut grads, *c, Tensor::from_rows(gy.rows(), 1, gc));
                }
                Op::Scale(x, s) => {
                    let mut g = gy;
                    g.scale_assign(*s);
                    add_grad(&mut grads, *x, g);
                }
                Op::AddScalar(x) => add_grad(&mut grads, *x, gy),
                Op::Sigmoid(x) => {
                    let g = zip_map(&gy, &node.value, |g, y| g * y * (1.0 - y));
                    add_grad(&mut grads, *x, g);
                }
                Op::Tanh(x) => {
                    let g = zip_map(&gy, &node.value, |g, y| g * (1.0 - y * y));
                    add_grad(&mut grads, *x, g);
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let g = zip_map(&gy, xv, |g, a| if a > 0.0 { g } else { 0.0 });
                    add_grad(&mut grads, *x, g);
                }
                Op::Gelu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let g = zip_map(&gy, xv, |g, a| g * gelu_grad(a));
                    add_grad(&mut grads, *x, g);
                }
                Op::Exp(x) => {
                    let g = zip_map(&gy, &node.value, |g, y| g * y);
                    add_grad(&mut grads, *x, g);
                }
                Op::MaskFill(x, mask) => {
                    let n = gy.cols();
                    let mut g = gy;
                    for r in 0..g.rows() {
                        for (c, v) in g.row_mut(r).iter_mut().enumerate() {
                            if !mask_at(mask, n, r, c) {
                                *v = 0.0;
                            }
                        }
                    }
                    add_grad(&mut grads, *x, g);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut g = gy;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let dot: f64 = g.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (gv, yv) in g.row_mut(r).iter_mut().zip(yr) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    add_grad(&mut grads, *x, g);
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    let mut g = gy;
                    for r in 0..y.rows() {
                        let total: f64 = g.row(r).iter().sum();
                        for (gv, lp) in g.row_mut(r).iter_mut().zip(y.row(r)) {
                            *gv -= lp.exp() * total;
                        }
                    }
                    add_grad(&mut grads, *x, g);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (m, n) = (gy.rows(), gy.cols());
                    let gv = self.nodes[gamma.0].value.data();
                    let mut gx = vec![0.0; m * n];
                    let mut gg = vec![0.0; n];
                    let mut gb = vec![0.0; n];
                    for r in 0..m {
                        let dy = gy.row(r);
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..n {
                            let d = dy[c] * gv[c];
                            sum_d += d;
                            sum_dx += d * xh[c];
                            gg[c] += dy[c] * xh[c];
                            gb[c] += dy[c];
                        }
                        let nf = n as f64;
                        for c in 0..n {
                            let d = dy[c] * gv[c];
                            gx[r * n + c] = inv_std[r] / nf * (nf * d - sum_d - xh[c] * sum_dx);
                        }
                    }
                    add_grad(&mut grads, *x, Tensor::from_rows(m, n, gx));
                    add_grad(&mut grads, *gamma, Tensor::from_rows(1, n, gg));
                    add_grad(&mut grads, *beta, Tensor::from_rows(1, n, gb));
                }
                Op::Gather(table, ids) => {
                    let tv = &self.nodes[table.0].value;
                    let mut gt = Tensor::zeros(tv.rows(), tv.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, s) in gt.row_mut(id).iter_mut().zip(gy.row(r)) {
                            *d += s;
                        }
                    }
                    add_grad(&mut grads, *table, gt);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (m, w) = self.dims(p);
                        let mut gp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            gp.extend_from_slice(&gy.row(r)[off..off + w]);
                        }
                        add_grad(&mut grads, p, Tensor::from_rows(m, w, gp));
                        off += w;
                    }
                }
                Op::SliceCols(x, start, _end) => {
                    let (m, n) = self.dims(*x);
                    let mut gx = Tensor::zeros(m, n);
                    let w = gy.cols();
                    for r in 0..m {
                        gx.row_mut(r)[*start..*start + w].copy_from_slice(gy.row(r));
                    }
                    add_grad(&mut grads, *x, gx);
                }
                Op::SelectRows(x, rows) => {
                    let (m, n) = self.dims(*x);
                    let mut gx = Tensor::zeros(m, n);
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, s) in gx.row_mut(r).iter_mut().zip(gy.row(i)) {
                            *d += s;
                        }
                    }
                    add_grad(&mut grads, *x, gx);
                }
                Op::Pick(x, cols) => {
                    let (m, n) = self.dims(*x);
                    let mut gx = Tensor::zeros(m, n);
                    for (r, &c) in cols.iter().enumerate() {
                        gx.set(r, c, gy.data()[r]);
                    }
                    add_grad(&mut grads, *x, gx);
                }
                Op::SumRows(x) => {
                    let (m, n) = self.dims(*x);
                    let mut gx = Tensor::zeros(m, n);
                    for r in 0..m {
                        let g = gy.data()[r];
                        gx.row_mut(r).iter_mut().for_each(|v| *v = g);
                    }
                    add_grad(&mut grads, *x, gx);
                }
                Op::SumAll(x) => {
                    let (m, n) = self.dims(*x);
                    add_grad(&mut grads, *x, Tensor::full(m, n, gy.item()));
                }
                Op::MeanAll(x) => {
                    let (m, n) = self.dims(*x);
                    let g = gy.item() / (m * n) as f64;
                    add_grad(&mut grads, *x, Tensor::full(m, n, g));
                }
            }
        }
        out
    }
}

fn mask_at(mask: &[bool], cols: usize, r: usize, c: usize) -> bool {
    if mask.len() == cols {
        mask[c]
    } else {
        mask[r * cols + c]
    }
}

fn add_grad(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_rows(a.rows(), a.cols(), data)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu_grad(a: f64) -> f64 {
    let inner = GELU_C * (a + 0.044715 * a * a * a);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * a * a);
    0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * dinner
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::from_rows(2, 3, vec![1.0, 2.0, 3.0, -1e3, 0.0, 1e3]));
        let y = g.softmax(x);
        for r in 0..2 {
            let s: f64 = g.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(g.value(y).row(r).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn masked_entries_get_zero_probability() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::from_rows(1, 3, vec![5.0, 1.0, 2.0]));
        let m = g.mask_fill(x, vec![false, true, true]);
        let y = g.softmax(m);
        assert_eq!(g.value(y).get(0, 0), 0.0);
    }

    #[test]
    fn backward_through_matmul_and_sum() {
        let mut store = ParamStore::new();
        let w = store
            .add("w", Tensor::from_rows(2, 1, vec![3.0, -1.0]))
            .unwrap();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::from_rows(1, 2, vec![2.0, 5.0]));
        let wv = g.param(w);
        let y = g.matmul(x, wv);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 5.0]);
    }
}
