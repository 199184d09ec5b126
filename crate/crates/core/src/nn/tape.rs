//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order and every node is visited once. Values are `f64`
//! row-major buffers; most ops work on 2D `[rows, cols]` tensors.

use std::rc::Rc;

use super::params::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
    Exp,
    Abs,
    Square,
    LogSigmoid,
}

/// Gather/scatter pairs for one kernel tap.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TapPairs {
    pub out: Vec<u32>,
    pub inp: Vec<u32>,
}

/// Sparse kernel map: for each of `taps` kernel offsets, the output rows
/// that read the given input rows through that offset's weight slice.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMap {
    pub n_in: usize,
    pub n_out: usize,
    pub taps: Vec<TapPairs>,
}

/// Sparse `rows x cols` matrix in triplet form, used to apply fixed linear
/// maps such as rendering stencils.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows {
    pub rows: usize,
    pub cols: usize,
    pub triplets: Vec<(u32, u32, f64)>,
}

/// Row groups for attention: queries in group `g` attend only to keys in
/// group `g`. With shared query/key rows this is block-local attention.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnGroups {
    pub queries: Vec<Vec<u32>>,
    pub keys: Vec<Vec<u32>>,
}

impl AttnGroups {
    pub fn full(nq: usize, nk: usize) -> Self {
        Self { queries: vec![(0..nq as u32).collect()], keys: vec![(0..nk as u32).collect()] }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Unary(Var, Unary),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Rc<Vec<u32>> },
    KernelConv { x: Var, w: Var, map: Rc<KernelMap> },
    SpMM { x: Var, m: Rc<SparseRows> },
    Attention { q: Var, k: Var, v: Var, heads: usize, groups: Rc<AttnGroups>, probs: Vec<Vec<f64>> },
    BceLogits { s: Var, labels: Rc<Vec<f64>> },
}

struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient for a parameter, zeros if it did not take part.
    pub fn param(&self, tape: &Tape, id: ParamId) -> Vec<f64> {
        match tape.param_vars.get(id.0).copied().flatten() {
            Some(v) => self.grads[v.0].clone().unwrap_or_else(|| vec![0.0; tape.store.get(id).len()]),
            None => vec![0.0; tape.store.get(id).len()],
        }
    }

    /// Gradients for every parameter in the store, in store order.
    pub fn all_params(&self, tape: &Tape) -> Vec<Vec<f64>> {
        tape.store.ids().map(|id| self.param(tape, id)).collect()
    }

    /// Like [`Gradients::all_params`] but moves the buffers out.
    pub fn into_params(mut self, tape: &Tape) -> Vec<Vec<f64>> {
        tape.store
            .ids()
            .map(|id| {
                let slot = tape.param_vars.get(id.0).copied().flatten().and_then(|v| self.grads[v.0].take());
                slot.unwrap_or_else(|| vec![0.0; tape.store.get(id).len()])
            })
            .collect()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

/// `c = a @ b + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: slice lengths cover the strided extents checked by callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    crate::pruning::log_sigmoid(x)
}

fn softmax_row(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_vars: vec![None; store.len()] }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value, shape, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(id) => self.store.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        rows_cols(&self.nodes[v.0].shape)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Constant input (no gradient flows out of the tape through it).
    pub fn constant(&mut self, value: Vec<f64>, shape: &[usize]) -> Var {
        assert_eq!(value.len(), shape.iter().product::<usize>(), "constant shape mismatch");
        self.push(value, shape.to_vec(), Op::Leaf)
    }

    /// Leaf bound to a stored parameter; repeated calls reuse one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        // parameter values are read from the store, not copied
        self.nodes.push(Node { value: Vec::new(), shape: self.store.shape(id).to_vec(), op: Op::Param(id) });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(v, self.shape(a).to_vec(), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        self.push(v, self.shape(a).to_vec(), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push(v, self.shape(a).to_vec(), Op::Mul(a, b))
    }

    /// `x[r, c] + row[c]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (n, m) = self.dims(x);
        assert_eq!(self.value(row).len(), m, "add_row: width mismatch");
        let r = self.value(row);
        let mut v = self.value(x).to_vec();
        for i in 0..n {
            for (o, b) in v[i * m..(i + 1) * m].iter_mut().zip(r) {
                *o += b;
            }
        }
        self.push(v, self.shape(x).to_vec(), Op::AddRow(x, row))
    }

    /// `x[r, c] * row[c]`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (n, m) = self.dims(x);
        assert_eq!(self.value(row).len(), m, "mul_row: width mismatch");
        let r = self.value(row);
        let mut v = self.value(x).to_vec();
        for i in 0..n {
            for (o, b) in v[i * m..(i + 1) * m].iter_mut().zip(r) {
                *o *= b;
            }
        }
        self.push(v, self.shape(x).to_vec(), Op::MulRow(x, row))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).iter().map(|a| a * s).collect();
        self.push(v, self.shape(x).to_vec(), Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).iter().map(|a| a + s).collect();
        self.push(v, self.shape(x).to_vec(), Op::AddScalar(x))
    }

    /// `[n, k] @ [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        assert_eq!(k, k2, "matmul: inner dimension mismatch");
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a), k, 1, self.value(b), m, 1, 0.0, &mut out);
        self.push(out, vec![n, m], Op::MatMul(a, b))
    }

    /// `[n, k] @ [m, k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.dims(a);
        let (m, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul_nt: inner dimension mismatch");
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a), k, 1, self.value(b), 1, k, 0.0, &mut out);
        self.push(out, vec![n, m], Op::MatMulNT(a, b))
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let v = self
            .value(x)
            .iter()
            .map(|&a| match f {
                Unary::Relu => a.max(0.0),
                Unary::Gelu => gelu(a).0,
                Unary::Sigmoid => sigmoid(a),
                Unary::Tanh => a.tanh(),
                Unary::Exp => a.exp(),
                Unary::Abs => a.abs(),
                Unary::Square => a * a,
                Unary::LogSigmoid => log_sigmoid(a),
            })
            .collect();
        self.push(v, self.shape(x).to_vec(), Op::Unary(x, f))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let (n, m) = self.dims(x);
        let mut v = self.value(x).to_vec();
        let mut rstd = Vec::with_capacity(n);
        for i in 0..n {
            let row = &mut v[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + eps).sqrt();
            for a in row.iter_mut() {
                *a = (*a - mean) * r;
            }
            rstd.push(r);
        }
        self.push(v, self.shape(x).to_vec(), Op::LayerNorm { x, rstd })
    }

    /// Row softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (n, m) = self.dims(x);
        let mut v = self.value(x).to_vec();
        for i in 0..n {
            softmax_row(&mut v[i * m..(i + 1) * m]);
        }
        self.push(v, self.shape(x).to_vec(), Op::Softmax(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![s], vec![1], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.value(x).iter().sum::<f64>() / n as f64;
        self.push(vec![s], vec![1], Op::Mean(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, m) = self.dims(x);
        assert!(start + len <= m, "slice_cols out of range");
        let src = self.value(x);
        let mut v = Vec::with_capacity(n * len);
        for i in 0..n {
            v.extend_from_slice(&src[i * m + start..i * m + start + len]);
        }
        self.push(v, vec![n, len], Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let n = self.dims(xs[0]).0;
        let widths: Vec<usize> = xs.iter().map(|&x| self.dims(x).1).collect();
        assert!(xs.iter().all(|&x| self.dims(x).0 == n), "concat_cols: row mismatch");
        let total: usize = widths.iter().sum();
        let mut v = Vec::with_capacity(n * total);
        for i in 0..n {
            for (x, w) in xs.iter().zip(&widths) {
                v.extend_from_slice(&self.value(*x)[i * w..(i + 1) * w]);
            }
        }
        self.push(v, vec![n, total], Op::ConcatCols(xs.to_vec()))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let m = self.dims(xs[0]).1;
        assert!(xs.iter().all(|&x| self.dims(x).1 == m), "concat_rows: width mismatch");
        let mut v = Vec::new();
        let mut n = 0;
        for &x in xs {
            v.extend_from_slice(self.value(x));
            n += self.dims(x).0;
        }
        self.push(v, vec![n, m], Op::ConcatRows(xs.to_vec()))
    }

    /// Rows `x[idx[i]]`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<u32>>) -> Var {
        let (n, m) = self.dims(x);
        let src = self.value(x);
        let mut v = Vec::with_capacity(idx.len() * m);
        for &i in idx.iter() {
            assert!((i as usize) < n, "gather_rows index out of range");
            v.extend_from_slice(&src[i as usize * m..(i as usize + 1) * m]);
        }
        let rows = idx.len();
        self.push(v, vec![rows, m], Op::GatherRows { x, idx })
    }

    /// Sparse convolution: `out[o] = sum over taps t, pairs (o, i) of x[i] @ w[t]`
    /// where `w` has shape `[taps, d_in, d_out]`.
    pub fn kernel_conv(&mut self, x: Var, w: Var, map: Rc<KernelMap>) -> Var {
        let (n_in, d_in) = self.dims(x);
        let wshape = self.shape(w).to_vec();
        let d_out = *wshape.last().unwrap();
        let taps: usize = wshape[..wshape.len() - 2].iter().product();
        assert_eq!(wshape[wshape.len() - 2], d_in, "kernel_conv: channel mismatch");
        assert_eq!(taps, map.taps.len(), "kernel_conv: tap count mismatch");
        assert_eq!(n_in, map.n_in, "kernel_conv: input rows mismatch");
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![0.0; map.n_out * d_out];
        let mut gathered = Vec::new();
        let mut prod = Vec::new();
        for (t, pairs) in map.taps.iter().enumerate() {
            let p = pairs.out.len();
            if p == 0 {
                continue;
            }
            gathered.clear();
            for &i in &pairs.inp {
                gathered.extend_from_slice(&xv[i as usize * d_in..(i as usize + 1) * d_in]);
            }
            prod.resize(p * d_out, 0.0);
            let wt = &wv[t * d_in * d_out..(t + 1) * d_in * d_out];
            gemm(p, d_in, d_out, &gathered, d_in, 1, wt, d_out, 1, 0.0, &mut prod);
            for (r, &o) in pairs.out.iter().enumerate() {
                let dst = &mut out[o as usize * d_out..(o as usize + 1) * d_out];
                for (a, b) in dst.iter_mut().zip(&prod[r * d_out..(r + 1) * d_out]) {
                    *a += b;
                }
            }
        }
        self.push(out, vec![map.n_out, d_out], Op::KernelConv { x, w, map })
    }

    /// `m @ x` for a fixed sparse matrix.
    pub fn spmm(&mut self, m: Rc<SparseRows>, x: Var) -> Var {
        let (n, c) = self.dims(x);
        assert_eq!(n, m.cols, "spmm: inner dimension mismatch");
        let xv = self.value(x);
        let mut out = vec![0.0; m.rows * c];
        for &(r, e, w) in &m.triplets {
            let (r, e) = (r as usize, e as usize);
            for k in 0..c {
                out[r * c + k] += w * xv[e * c + k];
            }
        }
        let rows = m.rows;
        self.push(out, vec![rows, c], Op::SpMM { x, m })
    }

    /// Multi-head scaled dot-product attention over pre-projected `q`, `k`,
    /// `v`. Queries only see keys in their own group; query rows not listed
    /// in any group produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, groups: Rc<AttnGroups>) -> Var {
        let (nq, d) = self.dims(q);
        let (nk, dk) = self.dims(k);
        assert_eq!(d, dk, "attention: q/k width mismatch");
        assert_eq!(self.dims(v), (nk, d), "attention: v shape mismatch");
        assert!(heads > 0 && d % heads == 0, "attention: width not divisible by heads");
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0; nq * d];
        let mut probs = Vec::with_capacity(groups.queries.len() * heads);
        for (gq, gk) in groups.queries.iter().zip(&groups.keys) {
            for h in 0..heads {
                let off = h * hd;
                let mut p = vec![0.0; gq.len() * gk.len()];
                for (a, &qi) in gq.iter().enumerate() {
                    let qrow = &qv[qi as usize * d + off..qi as usize * d + off + hd];
                    let prow = &mut p[a * gk.len()..(a + 1) * gk.len()];
                    for (b, &ki) in gk.iter().enumerate() {
                        let krow = &kv[ki as usize * d + off..ki as usize * d + off + hd];
                        prow[b] = qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>() * scale;
                    }
                    if !gk.is_empty() {
                        softmax_row(prow);
                    }
                    let orow = &mut out[qi as usize * d + off..qi as usize * d + off + hd];
                    for (b, &ki) in gk.iter().enumerate() {
                        let w = prow[b];
                        let vrow = &vv[ki as usize * d + off..ki as usize * d + off + hd];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += w * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        self.push(out, vec![nq, d], Op::Attention { q, k, v, heads, groups, probs })
    }

    /// Mean binary cross-entropy with logits against fixed labels.
    pub fn bce_with_logits(&mut self, s: Var, labels: Rc<Vec<f64>>) -> Var {
        let sv = self.value(s);
        assert_eq!(sv.len(), labels.len(), "bce: length mismatch");
        let n = sv.len().max(1) as f64;
        let total: f64 = sv.iter().zip(labels.iter()).map(|(&x, &y)| (1.0 - y) * x - log_sigmoid(x)).sum();
        self.push(vec![total / n], vec![1], Op::BceLogits { s, labels })
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| -> &[f64] { self.value(v) };
        macro_rules! grad_of {
            ($v:expr) => {{
                let len = self.value($v).len();
                grads[$v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice()
            }};
        }
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                add_into(grad_of!(*a), g);
                add_into(grad_of!(*b), g);
            }
            Op::Sub(a, b) => {
                add_into(grad_of!(*a), g);
                let gb = grad_of!(*b);
                for (o, x) in gb.iter_mut().zip(g) {
                    *o -= x;
                }
            }
            Op::Mul(a, b) => {
                if a == b {
                    let ga = grad_of!(*a);
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(val(*a)) {
                        *o += 2.0 * x * y;
                    }
                } else {
                    let ga = grad_of!(*a);
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *o += x * y;
                    }
                    let gb = grad_of!(*b);
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *o += x * y;
                    }
                }
            }
            Op::AddRow(x, r) => {
                add_into(grad_of!(*x), g);
                let m = val(*r).len();
                let gr = grad_of!(*r);
                for (j, gv) in g.iter().enumerate() {
                    gr[j % m] += gv;
                }
            }
            Op::MulRow(x, r) => {
                let m = val(*r).len();
                let rv = val(*r);
                let gx = grad_of!(*x);
                for (j, (o, gv)) in gx.iter_mut().zip(g).enumerate() {
                    *o += gv * rv[j % m];
                }
                let xv = val(*x);
                let gr = grad_of!(*r);
                for (j, gv) in g.iter().enumerate() {
                    gr[j % m] += gv * xv[j];
                }
            }
            Op::Scale(x, s) => {
                let gx = grad_of!(*x);
                for (o, v) in gx.iter_mut().zip(g) {
                    *o += s * v;
                }
            }
            Op::AddScalar(x) => add_into(grad_of!(*x), g),
            Op::MatMul(a, b) => {
                let (n, k) = self.dims(*a);
                let m = self.dims(*b).1;
                // da += g @ b^T ; db += a^T @ g
                gemm(n, m, k, g, m, 1, val(*b), 1, m, 1.0, grad_of!(*a));
                gemm(k, n, m, val(*a), 1, k, g, m, 1, 1.0, grad_of!(*b));
            }
            Op::MatMulNT(a, b) => {
                let (n, k) = self.dims(*a);
                let m = self.dims(*b).0;
                // out = a b^T: da += g @ b ; db += g^T @ a
                gemm(n, m, k, g, m, 1, val(*b), k, 1, 1.0, grad_of!(*a));
                gemm(m, n, k, g, 1, m, val(*a), k, 1, 1.0, grad_of!(*b));
            }
            Op::Unary(x, f) => {
                let xv = val(*x);
                let y = &node.value;
                let gx = grad_of!(*x);
                for j in 0..gx.len() {
                    let d = match f {
                        Unary::Relu => {
                            if xv[j] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Gelu => gelu(xv[j]).1,
                        Unary::Sigmoid => y[j] * (1.0 - y[j]),
                        Unary::Tanh => 1.0 - y[j] * y[j],
                        Unary::Exp => y[j],
                        Unary::Abs => {
                            if xv[j] > 0.0 {
                                1.0
                            } else if xv[j] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Square => 2.0 * xv[j],
                        Unary::LogSigmoid => sigmoid(-xv[j]),
                    };
                    gx[j] += g[j] * d;
                }
            }
            Op::LayerNorm { x, rstd } => {
                let (n, m) = self.dims(*x);
                let y = &node.value;
                let gx = grad_of!(*x);
                for r in 0..n {
                    let gr = &g[r * m..(r + 1) * m];
                    let yr = &y[r * m..(r + 1) * m];
                    let mg = gr.iter().sum::<f64>() / m as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                    for c in 0..m {
                        gx[r * m + c] += rstd[r] * (gr[c] - mg - yr[c] * mgy);
                    }
                }
            }
            Op::Softmax(x) => {
                let (n, m) = self.dims(*x);
                let y = &node.value;
                let gx = grad_of!(*x);
                for r in 0..n {
                    let gr = &g[r * m..(r + 1) * m];
                    let yr = &y[r * m..(r + 1) * m];
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for c in 0..m {
                        gx[r * m + c] += yr[c] * (gr[c] - dot);
                    }
                }
            }
            Op::Sum(x) => {
                let gx = grad_of!(*x);
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Mean(x) => {
                let gx = grad_of!(*x);
                let n = gx.len().max(1) as f64;
                gx.iter_mut().for_each(|o| *o += g[0] / n);
            }
            Op::SliceCols { x, start } => {
                let (n, m) = self.dims(*x);
                let len = node.shape[1];
                let gx = grad_of!(*x);
                for r in 0..n {
                    for c in 0..len {
                        gx[r * m + start + c] += g[r * len + c];
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let n = node.shape[0];
                let total = node.shape[1];
                let mut off = 0;
                for &x in xs {
                    let w = self.dims(x).1;
                    let gx = grad_of!(x);
                    for r in 0..n {
                        for c in 0..w {
                            gx[r * w + c] += g[r * total + off + c];
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = val(x).len();
                    add_into(grad_of!(x), &g[off..off + len]);
                    off += len;
                }
            }
            Op::GatherRows { x, idx } => {
                let m = self.dims(*x).1;
                let gx = grad_of!(*x);
                for (r, &i) in idx.iter().enumerate() {
                    let i = i as usize;
                    for c in 0..m {
                        gx[i * m + c] += g[r * m + c];
                    }
                }
            }
            Op::KernelConv { x, w, map } => {
                let d_in = self.dims(*x).1;
                let d_out = node.shape[1];
                let xv = val(*x);
                let wv = val(*w);
                let mut gathered_x = Vec::new();
                let mut gathered_g = Vec::new();
                let mut dx_rows = Vec::new();
                let mut gw = grads[w.0].take().unwrap_or_else(|| vec![0.0; wv.len()]);
                let mut gx = grads[x.0].take().unwrap_or_else(|| vec![0.0; xv.len()]);
                for (t, pairs) in map.taps.iter().enumerate() {
                    let p = pairs.out.len();
                    if p == 0 {
                        continue;
                    }
                    gathered_x.clear();
                    gathered_g.clear();
                    for (&o, &i) in pairs.out.iter().zip(&pairs.inp) {
                        gathered_x.extend_from_slice(&xv[i as usize * d_in..(i as usize + 1) * d_in]);
                        gathered_g.extend_from_slice(&g[o as usize * d_out..(o as usize + 1) * d_out]);
                    }
                    let wt = &wv[t * d_in * d_out..(t + 1) * d_in * d_out];
                    // dW_t += X^T G
                    gemm(
                        d_in,
                        p,
                        d_out,
                        &gathered_x,
                        1,
                        d_in,
                        &gathered_g,
                        d_out,
                        1,
                        1.0,
                        &mut gw[t * d_in * d_out..(t + 1) * d_in * d_out],
                    );
                    // dX_rows = G W_t^T
                    dx_rows.resize(p * d_in, 0.0);
                    gemm(p, d_out, d_in, &gathered_g, d_out, 1, wt, 1, d_out, 0.0, &mut dx_rows);
                    for (r, &i) in pairs.inp.iter().enumerate() {
                        let dst = &mut gx[i as usize * d_in..(i as usize + 1) * d_in];
                        for (a, b) in dst.iter_mut().zip(&dx_rows[r * d_in..(r + 1) * d_in]) {
                            *a += b;
                        }
                    }
                }
                grads[w.0] = Some(gw);
                grads[x.0] = Some(gx);
            }
            Op::SpMM { x, m } => {
                let c = node.shape[1];
                let gx = grad_of!(*x);
                for &(r, e, w) in &m.triplets {
                    let (r, e) = (r as usize, e as usize);
                    for k in 0..c {
                        gx[e * c + k] += w * g[r * c + k];
                    }
                }
            }
            Op::Attention { q, k, v, heads, groups, probs } => {
                let d = self.dims(*q).1;
                let hd = d / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let nq_len = qv.len();
                let nk_len = kv.len();
                let mut dq = vec![0.0; nq_len];
                let mut dk = vec![0.0; nk_len];
                let mut dv = vec![0.0; nk_len];
                let mut pi = 0;
                for (gq, gk) in groups.queries.iter().zip(&groups.keys) {
                    for h in 0..*heads {
                        let off = h * hd;
                        let p = &probs[pi];
                        pi += 1;
                        let nk = gk.len();
                        let mut ds = vec![0.0; nk];
                        for (a, &qi) in gq.iter().enumerate() {
                            let grow = &g[qi as usize * d + off..qi as usize * d + off + hd];
                            let prow = &p[a * nk..(a + 1) * nk];
                            // dP = dO V^T ; dV += P^T dO
                            for (b, &ki) in gk.iter().enumerate() {
                                let vrow = &vv[ki as usize * d + off..ki as usize * d + off + hd];
                                ds[b] = grow.iter().zip(vrow).map(|(x, y)| x * y).sum();
                                let dvrow = &mut dv[ki as usize * d + off..ki as usize * d + off + hd];
                                for (o, x) in dvrow.iter_mut().zip(grow) {
                                    *o += prow[b] * x;
                                }
                            }
                            let dot: f64 = ds.iter().zip(prow).map(|(x, y)| x * y).sum();
                            for b in 0..nk {
                                ds[b] = prow[b] * (ds[b] - dot) * scale;
                            }
                            let qrow = &qv[qi as usize * d + off..qi as usize * d + off + hd];
                            for (b, &ki) in gk.iter().enumerate() {
                                let krow = &kv[ki as usize * d + off..ki as usize * d + off + hd];
                                let dqrow = &mut dq[qi as usize * d + off..qi as usize * d + off + hd];
                                for (o, x) in dqrow.iter_mut().zip(krow) {
                                    *o += ds[b] * x;
                                }
                                let dkrow = &mut dk[ki as usize * d + off..ki as usize * d + off + hd];
                                for (o, x) in dkrow.iter_mut().zip(qrow) {
                                    *o += ds[b] * x;
                                }
                            }
                        }
                    }
                }
                add_into(grad_of!(*q), &dq);
                add_into(grad_of!(*k), &dk);
                add_into(grad_of!(*v), &dv);
            }
            Op::BceLogits { s, labels } => {
                let sv = val(*s);
                let n = sv.len().max(1) as f64;
                let gs = grad_of!(*s);
                for j in 0..sv.len() {
                    gs[j] += g[0] * (sigmoid(sv[j]) - labels[j]) / n;
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
