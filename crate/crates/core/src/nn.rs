//! Minimal reverse-mode autodiff over row-major 2-D `f64` tensors.
//!
//! The operator set is exactly what the part encoders, the whole-body
//! decoder and the factorized transformers need: matmul, bias add, relu,
//! layer norm, strided 1-D convolution, nearest upsampling, column concat,
//! row slicing, embedding gather, grouped multi-head attention, L1 and
//! cross-entropy losses. Every op records what its backward pass needs.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape/data mismatch");
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        gemm(self, false, other, false)
    }
}

/// `op(a) · op(b)` with optional transposes.
fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "matmul inner dimension mismatch");
    let mut c = Tensor::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides describe exactly the row-major buffers above, and the
    // output buffer is sized m*n with row stride n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        if let Some(&id) = self.index.get(&name) {
            self.values[id.0] = value;
            return id;
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(|id| &mut self.values[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| (ParamId(i), self.names[i].as_str(), v))
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|t| t.data.len()).sum()
    }

    /// All values flattened in insertion order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for t in &mut self.values {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len());
    }
}

/// Gradient per parameter, matching a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.values.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|t| t.data.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One attention neighbourhood: every row in `queries` attends to exactly
/// the rows in `keys`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnGroup {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
}

impl AttnGroup {
    /// Rows that all attend to one another.
    pub fn clique(rows: Vec<usize>) -> Self {
        Self {
            queries: rows.clone(),
            keys: rows,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
        cols: Tensor,
    },
    Upsample2(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: Arc<Vec<AttnGroup>>,
        probs: Vec<Vec<f64>>,
    },
    L1Loss(Var, Tensor),
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Vec<Vec<f64>>,
        scale: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Computation record for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
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

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to a stored parameter; repeated calls reuse the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf);
        self.params.insert(id, v);
        v
    }

    pub fn param_named(&mut self, store: &ParamStore, name: &str) -> Var {
        let id = store
            .id(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"));
        self.param(store, id)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = gemm(self.value(a), false, self.value(b), false);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let out = Tensor::from_vec(x.rows, x.cols, data);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (x, b) = (self.value(a), self.value(bias));
        assert_eq!((1, x.cols), b.shape(), "bias shape mismatch");
        let mut out = x.clone();
        for r in 0..out.rows {
            for (o, bb) in out.row_mut(r).iter_mut().zip(&b.data) {
                *o += bb;
            }
        }
        self.push(out, Op::AddBias(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let out = Tensor::from_vec(x.rows, x.cols, x.data.iter().map(|v| v * s).collect());
        self.push(out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::from_vec(x.rows, x.cols, x.data.iter().map(|v| v.max(0.0)).collect());
        self.push(out, Op::Relu(a))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_bias(y, b),
            None => y,
        }
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xt = self.value(x);
        let (rows, cols) = xt.shape();
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut out = Tensor::zeros(rows, cols);
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xt.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = h * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// 1-D convolution over rows (time) of `x: T × Cin` with weights laid out
    /// as `(kernel·Cin) × Cout`, zero padding `pad` on both ends.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xt = self.value(x);
        let (t_in, c_in) = xt.shape();
        assert_eq!(self.value(w).rows, kernel * c_in, "conv weight shape mismatch");
        let t_out = (t_in + 2 * pad - kernel) / stride + 1;
        let mut cols = Tensor::zeros(t_out, kernel * c_in);
        for to in 0..t_out {
            for tap in 0..kernel {
                let ti = (to * stride + tap) as isize - pad as isize;
                if ti < 0 || ti >= t_in as isize {
                    continue;
                }
                let src = xt.row(ti as usize);
                cols.row_mut(to)[tap * c_in..(tap + 1) * c_in].copy_from_slice(src);
            }
        }
        let mut out = gemm(&cols, false, self.value(w), false);
        let bias = &self.value(b).data;
        for r in 0..out.rows {
            for (o, bb) in out.row_mut(r).iter_mut().zip(bias) {
                *o += bb;
            }
        }
        self.push(
            out,
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
                pad,
                cols,
            },
        )
    }

    /// Nearest-neighbour ×2 upsampling along rows.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let mut out = Tensor::zeros(xt.rows * 2, xt.cols);
        for r in 0..xt.rows {
            out.row_mut(2 * r).copy_from_slice(xt.row(r));
            out.row_mut(2 * r + 1).copy_from_slice(xt.row(r));
        }
        self.push(out, Op::Upsample2(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows, rows, "concat row mismatch");
                out.row_mut(r)[off..off + t.cols].copy_from_slice(t.row(r));
                off += t.cols;
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat column mismatch");
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// First `len` rows of `x`.
    pub fn take_rows(&mut self, x: Var, len: usize) -> Var {
        let xt = self.value(x);
        assert!(len <= xt.rows);
        let out = Tensor::from_vec(len, xt.cols, xt.data[..len * xt.cols].to_vec());
        self.push(out, Op::SliceRows(x, len))
    }

    /// Row lookup into an embedding table.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Tensor::zeros(idx.len(), t.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        self.push(out, Op::Gather(table, idx.to_vec()))
    }

    /// Multi-head softmax attention restricted to groups. Each row should be
    /// a query in at most one group; rows that are never queries produce
    /// zeros.
    pub fn grouped_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: Arc<Vec<AttnGroup>>,
    ) -> Var {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let (n, dm) = qt.shape();
        assert_eq!(dm % heads, 0);
        let dh = dm / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(n, dm);
        let mut probs = Vec::with_capacity(groups.len() * heads);
        for g in groups.iter() {
            let (nq, nk) = (g.queries.len(), g.keys.len());
            for h in 0..heads {
                let off = h * dh;
                let mut p = vec![0.0; nq * nk];
                for (a, &ia) in g.queries.iter().enumerate() {
                    let qa = &qt.row(ia)[off..off + dh];
                    let pr = &mut p[a * nk..(a + 1) * nk];
                    let mut mx = f64::NEG_INFINITY;
                    for (b, &ib) in g.keys.iter().enumerate() {
                        let kb = &kt.row(ib)[off..off + dh];
                        pr[b] = qa.iter().zip(kb).map(|(x, y)| x * y).sum::<f64>() * scale;
                        mx = mx.max(pr[b]);
                    }
                    let mut z = 0.0;
                    for e in pr.iter_mut() {
                        *e = (*e - mx).exp();
                        z += *e;
                    }
                    pr.iter_mut().for_each(|e| *e /= z);
                    let orow = &mut out.data[ia * dm + off..ia * dm + off + dh];
                    for (b, &ib) in g.keys.iter().enumerate() {
                        let vb = &vt.row(ib)[off..off + dh];
                        for (o, x) in orow.iter_mut().zip(vb) {
                            *o += pr[b] * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            },
        )
    }

    /// Mean absolute error against a constant target (scalar output).
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "l1 target shape mismatch");
        let n = p.data.len().max(1) as f64;
        let s: f64 = p.data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).sum();
        self.push(Tensor::scalar(s / n), Op::L1Loss(pred, target.clone()))
    }

    /// `scale · Σ −log softmax(logits[row])[class]` over `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)], scale: f64) -> Var {
        let l = self.value(logits);
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(targets.len());
        for &(r, c) in targets {
            let row = l.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            total += lse - row[c];
            probs.push(row.iter().map(|v| (v - lse).exp()).collect());
        }
        self.push(
            Tensor::scalar(total * scale),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                scale,
            },
        )
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, loss: Var) -> Gradients {
        self.backward_from(&[(loss, Tensor::scalar(1.0))])
    }

    /// Reverse pass from arbitrary seed gradients.
    pub fn backward_from(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed shape mismatch");
            accumulate(&mut grads[v.0], g.clone());
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = gemm(g, false, self.value(*b), true);
                let gb = gemm(self.value(*a), true, g, false);
                accumulate(&mut grads[a.0], ga);
                accumulate(&mut grads[b.0], gb);
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.clone());
            }
            Op::AddBias(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], column_sums(g));
            }
            Op::Scale(a, s) => {
                let t = Tensor::from_vec(g.rows, g.cols, g.data.iter().map(|v| v * s).collect());
                accumulate(&mut grads[a.0], t);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let data = g
                    .data
                    .iter()
                    .zip(&x.data)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(&mut grads[a.0], Tensor::from_vec(g.rows, g.cols, data));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = g.shape();
                let gm = &self.value(*gamma).data;
                let mut dgamma = Tensor::zeros(1, cols);
                let mut dbeta = Tensor::zeros(1, cols);
                let mut dx = Tensor::zeros(rows, cols);
                let nf = cols as f64;
                for r in 0..rows {
                    let gr = g.row(r);
                    let hr = &xhat[r * cols..(r + 1) * cols];
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for c in 0..cols {
                        dgamma.data[c] += gr[c] * hr[c];
                        dbeta.data[c] += gr[c];
                        let d = gr[c] * gm[c];
                        sum_d += d;
                        sum_dh += d * hr[c];
                    }
                    let dxr = dx.row_mut(r);
                    for c in 0..cols {
                        let d = gr[c] * gm[c];
                        dxr[c] = inv_std[r] / nf * (nf * d - sum_d - hr[c] * sum_dh);
                    }
                }
                accumulate(&mut grads[x.0], dx);
                accumulate(&mut grads[gamma.0], dgamma);
                accumulate(&mut grads[beta.0], dbeta);
            }
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
                pad,
                cols,
            } => {
                let gw = gemm(cols, true, g, false);
                let gb = column_sums(g);
                let gcols = gemm(g, false, self.value(*w), true);
                let (t_in, c_in) = self.value(*x).shape();
                let mut dx = Tensor::zeros(t_in, c_in);
                for to in 0..gcols.rows {
                    for tap in 0..*kernel {
                        let ti = (to * stride + tap) as isize - *pad as isize;
                        if ti < 0 || ti >= t_in as isize {
                            continue;
                        }
                        let src = &gcols.row(to)[tap * c_in..(tap + 1) * c_in];
                        for (d, s) in dx.row_mut(ti as usize).iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx);
                accumulate(&mut grads[w.0], gw);
                accumulate(&mut grads[b.0], gb);
            }
            Op::Upsample2(x) => {
                let (rows, cols) = self.value(*x).shape();
                let mut dx = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let (a, b) = (g.row(2 * r), g.row(2 * r + 1));
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = a[c] + b[c];
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (rows, cols) = self.value(*p).shape();
                    let mut d = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        d.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                    }
                    off += cols;
                    accumulate(&mut grads[p.0], d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let (rows, cols) = self.value(*p).shape();
                    let d = Tensor::from_vec(rows, cols, g.data[off..off + rows * cols].to_vec());
                    off += rows * cols;
                    accumulate(&mut grads[p.0], d);
                }
            }
            Op::SliceRows(x, len) => {
                let (rows, cols) = self.value(*x).shape();
                let mut d = Tensor::zeros(rows, cols);
                d.data[..len * cols].copy_from_slice(&g.data);
                accumulate(&mut grads[x.0], d);
            }
            Op::Gather(table, idx) => {
                let (rows, cols) = self.value(*table).shape();
                let mut d = Tensor::zeros(rows, cols);
                for (r, &i) in idx.iter().enumerate() {
                    for (a, b) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *a += b;
                    }
                }
                accumulate(&mut grads[table.0], d);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            } => {
                let (qt, kt, vt) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, dm) = qt.shape();
                let dh = dm / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Tensor::zeros(n, dm);
                let mut dk = Tensor::zeros(n, dm);
                let mut dv = Tensor::zeros(n, dm);
                let mut pi = 0;
                for grp in groups.iter() {
                    let nk = grp.keys.len();
                    for h in 0..*heads {
                        let off = h * dh;
                        let p = &probs[pi];
                        pi += 1;
                        for (a, &ia) in grp.queries.iter().enumerate() {
                            let go = &g.row(ia)[off..off + dh];
                            let pr = &p[a * nk..(a + 1) * nk];
                            // dP[a,b] = dO_a · V_b
                            let mut dp = vec![0.0; nk];
                            for (b, &ib) in grp.keys.iter().enumerate() {
                                let vb = &vt.row(ib)[off..off + dh];
                                dp[b] = go.iter().zip(vb).map(|(x, y)| x * y).sum();
                                let dvr = &mut dv.data[ib * dm + off..ib * dm + off + dh];
                                for (d, x) in dvr.iter_mut().zip(go) {
                                    *d += pr[b] * x;
                                }
                            }
                            let dot: f64 = dp.iter().zip(pr).map(|(x, y)| x * y).sum();
                            for (b, &ib) in grp.keys.iter().enumerate() {
                                let ds = pr[b] * (dp[b] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for c in 0..dh {
                                    dq.data[ia * dm + off + c] += ds * kt.data[ib * dm + off + c];
                                    dk.data[ib * dm + off + c] += ds * qt.data[ia * dm + off + c];
                                }
                            }
                        }
                    }
                }
                accumulate(&mut grads[q.0], dq);
                accumulate(&mut grads[k.0], dk);
                accumulate(&mut grads[v.0], dv);
            }
            Op::L1Loss(pred, target) => {
                let p = self.value(*pred);
                let n = p.data.len().max(1) as f64;
                let s = g.data[0] / n;
                let data = p
                    .data
                    .iter()
                    .zip(&target.data)
                    .map(|(a, b)| {
                        let d = a - b;
                        if d > 0.0 {
                            s
                        } else if d < 0.0 {
                            -s
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(&mut grads[pred.0], Tensor::from_vec(p.rows, p.cols, data));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                scale,
            } => {
                let (rows, cols) = self.value(*logits).shape();
                let s = g.data[0] * scale;
                let mut d = Tensor::zeros(rows, cols);
                for ((r, c), p) in targets.iter().zip(probs) {
                    let dr = d.row_mut(*r);
                    for (x, pv) in dr.iter_mut().zip(p) {
                        *x += s * pv;
                    }
                    dr[*c] -= s;
                }
                accumulate(&mut grads[logits.0], d);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols);
    for r in 0..g.rows {
        for (o, v) in out.data.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Collect gradients of every parameter leaf into store order.
    pub fn param_grads(&self, tape: &Tape, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(store);
        for (id, v) in &tape.params {
            if let Some(g) = &self.grads[v.0] {
                out.grads[id.0].add_assign(g);
            }
        }
        out
    }
}

/// Adam with linear learning-rate warm-up.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: usize,
    pub step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, warmup: usize) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.data.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            warmup,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn current_lr(&self) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * ((self.step + 1) as f64 / self.warmup as f64).min(1.0)
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        let lr = self.current_lr();
        self.step += 1;
        let b1c = 1.0 - self.beta1.powi(self.step as i32);
        let b2c = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.grads.iter().enumerate() {
            let p = &mut store.values[i].data;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g.data[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / b1c;
                let vh = v[j] / b2c;
                p[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Checkpoint file magic.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CMK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("truncated checkpoint at byte {0}")]
    Truncated(usize),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("checkpoint tensor `{name}` has {ndims} dims, expected 1 or 2")]
    BadRank { name: String, ndims: usize },
    #[error("checkpoint is missing tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has shape {actual:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("checkpoint i/o failed")]
    Io(#[from] std::io::Error),
}

/// Serialize named tensors: magic, version, count, then per entry
/// `(u32 name_len, name, u32 ndims, u32 dims...)`, then all payloads as
/// little-endian `f32` in manifest order.
pub fn encode_checkpoint(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(t.rows as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols as u32).to_le_bytes());
    }
    for (_, t) in entries {
        for v in &t.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], CheckpointError> {
        let s = bytes.get(pos..pos + n).ok_or(CheckpointError::Truncated(pos))?;
        pos += n;
        Ok(s)
    };
    let magic: [u8; 4] = take(4)?.try_into().unwrap();
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
    let version = u32_at(take(4)?);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = u32_at(take(4)?) as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u32_at(take(4)?) as usize;
        let name = std::str::from_utf8(take(len)?)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        let ndims = u32_at(take(4)?) as usize;
        let mut dims = Vec::with_capacity(ndims.min(8));
        for _ in 0..ndims {
            dims.push(u32_at(take(4)?) as usize);
        }
        let (rows, cols) = match dims.as_slice() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            _ => return Err(CheckpointError::BadRank { name, ndims }),
        };
        manifest.push((name, rows, cols));
    }
    let mut out = Vec::with_capacity(manifest.len());
    for (name, rows, cols) in manifest {
        let raw = take(rows * cols * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push((name, Tensor::from_vec(rows, cols, data)));
    }
    Ok(out)
}

pub fn write_checkpoint(path: &std::path::Path, entries: &[(String, Tensor)]) -> Result<(), CheckpointError> {
    std::fs::write(path, encode_checkpoint(entries))?;
    Ok(())
}

pub fn read_checkpoint(path: &std::path::Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Name-indexed view over decoded checkpoint entries.
pub struct CheckpointMap(HashMap<String, Tensor>);

impl CheckpointMap {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self(entries.into_iter().collect())
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor, CheckpointError> {
        self.0
            .remove(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn take_shaped(&mut self, name: &str, rows: usize, cols: usize) -> Result<Tensor, CheckpointError> {
        let t = self.take(name)?;
        if t.shape() != (rows, cols) {
            return Err(CheckpointError::Shape {
                name: name.to_string(),
                expected: (rows, cols),
                actual: t.shape(),
            });
        }
        Ok(t)
    }

    pub fn scalar(&mut self, name: &str) -> Result<f64, CheckpointError> {
        Ok(self.take_shaped(name, 1, 1)?.data[0])
    }
}
