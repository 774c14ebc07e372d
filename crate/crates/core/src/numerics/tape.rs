//! Dynamic reverse-mode differentiation tape.
//!
//! Every primitive appends a node holding its forward value and enough
//! cached state to run its adjoint. The tape is rebuilt for every forward
//! pass; there is no graph reuse. Leaves created with [`Tape::param`] are
//! keyed by [`ParamId`] so that [`Tape::backward`] can hand gradients back
//! to the owning [`Parameter`].

use std::collections::HashMap;

use super::{DenseArray, NumericsError, ParamId, Parameter};

/// Layer-norm variance stabilizer.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, f64),
    Gelu(Var),
    Elu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Attention(Box<AttentionCache>),
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    seq_len: usize,
    heads: usize,
    scale: f64,
    /// Softmax weights, laid out `[sequence][head][query][key]`.
    probs: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: DenseArray,
    op: Op,
}

/// Gradients of a scalar loss with respect to the parameters bound on a tape.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: HashMap<ParamId, DenseArray>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&DenseArray> {
        self.by_param.get(&id)
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn mismatch(op: &'static str, a: &DenseArray, b: &DenseArray) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * A * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
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

/// `c = a · b` for row-major `a: [m, k]`, `b: [k, n]`, with optional transposes
/// expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    // Stored shapes: a is [m,k] (or [k,m] when transposed), b is [k,n] (or [n,k]).
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths cover the strided extents checked by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
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

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: DenseArray, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a parameter; binding the same parameter twice returns the same leaf.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&v) = self.params.get(&p.id()) {
            return v;
        }
        let v = self.push(p.value().clone(), Op::Leaf);
        self.params.insert(p.id(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(mismatch("matmul", av, bv));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let value = DenseArray::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    fn zip(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(op_name, av, bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = DenseArray::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    fn row_broadcast(
        &mut self,
        op_name: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        let (av, rv) = (self.value(a), self.value(row));
        if av.rank() == 0 || rv.len() != av.cols() {
            return Err(mismatch(op_name, av, rv));
        }
        let cols = av.cols();
        let r = rv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, r[i % cols]))
            .collect();
        let value = DenseArray::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, op))
    }

    /// Adds a length-`cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        self.row_broadcast("add_row", a, row, |x, y| x + y, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a length-`cols` row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        self.row_broadcast("mul_row", a, row, |x, y| x * y, Op::MulRow(a, row))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let value = DenseArray::new(av.shape().to_vec(), data).expect("same shape");
        self.push(value, op)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.map(a, |x| scale * x + shift, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, |x| gelu_parts(x).0, Op::Gelu(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { x.exp_m1() }, Op::Elu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let cols = av.cols().max(1);
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let value = DenseArray::new(av.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Softmax(a))
    }

    /// Normalizes each row to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let cols = av.cols().max(1);
        let mut data = av.data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / cols);
        for row in data.chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = DenseArray::new(av.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::LayerNorm { x: a, inv_std })
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[sequences * seq_len, width]`; each consecutive block
    /// of `seq_len` rows is one independent sequence. With `causal`, query `i`
    /// attends to keys `0..=i` only.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Var, NumericsError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.rank() != 2 || qv.shape() != kv.shape() {
            return Err(mismatch("attention", qv, kv));
        }
        if qv.shape() != vv.shape() {
            return Err(mismatch("attention", qv, vv));
        }
        let (rows, width) = (qv.shape()[0], qv.shape()[1]);
        if seq_len == 0 || rows % seq_len != 0 || heads == 0 || width % heads != 0 {
            return Err(NumericsError::InvalidArgument(format!(
                "attention over {rows}x{width} with seq_len {seq_len} and {heads} heads"
            )));
        }
        let n_seq = rows / seq_len;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut probs = vec![0.0; n_seq * heads * seq_len * seq_len];
        let mut out = vec![0.0; rows * width];
        let mut scores = vec![0.0; seq_len];
        for s in 0..n_seq {
            let base = s * seq_len;
            for h in 0..heads {
                let col = h * dh;
                for i in 0..seq_len {
                    let limit = if causal { i + 1 } else { seq_len };
                    let qi = &qd[(base + i) * width + col..(base + i) * width + col + dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, score) in scores.iter_mut().enumerate().take(limit) {
                        let kj = &kd[(base + j) * width + col..(base + j) * width + col + dh];
                        let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                        *score = dot * scale;
                        max = max.max(*score);
                    }
                    let mut total = 0.0;
                    for score in scores.iter_mut().take(limit) {
                        *score = (*score - max).exp();
                        total += *score;
                    }
                    let p_off = ((s * heads + h) * seq_len + i) * seq_len;
                    let orow = (base + i) * width + col;
                    for j in 0..limit {
                        let p = scores[j] / total;
                        probs[p_off + j] = p;
                        let vj = &vd[(base + j) * width + col..(base + j) * width + col + dh];
                        for (o, &x) in out[orow..orow + dh].iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let value = DenseArray::new(vec![rows, width], out)?;
        Ok(self.push(
            value,
            Op::Attention(Box::new(AttentionCache {
                q,
                k,
                v,
                seq_len,
                heads,
                scale,
                probs,
            })),
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(DenseArray::scalar(s), Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.len().max(1) as f64;
        self.push(DenseArray::scalar(s), Op::MeanAll(a))
    }

    /// Sums over the last axis: `[.., n] -> [..]`.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let cols = av.cols().max(1);
        let data: Vec<f64> = av.data().chunks(cols).map(|r| r.iter().sum()).collect();
        let mut shape = av.shape().to_vec();
        shape.pop();
        let value = DenseArray::new(shape, data).expect("reduced shape");
        self.push(value, Op::SumLast(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, NumericsError> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Selects rows of a matrix (rows may repeat).
    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(NumericsError::InvalidArgument(format!(
                "gather_rows needs a matrix, got {:?}",
                av.shape()
            )));
        }
        let (n, cols) = (av.shape()[0], av.shape()[1]);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in &rows {
            if r >= n {
                return Err(NumericsError::InvalidArgument(format!(
                    "row {r} out of range for {:?}",
                    av.shape()
                )));
            }
            data.extend_from_slice(av.row(r));
        }
        let value = DenseArray::new(vec![rows.len(), cols], data)?;
        Ok(self.push(value, Op::GatherRows(a, rows)))
    }

    /// Propagates d(loss)/d(node) back through the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out = node.value.data();
            let len_of = |v: Var| self.nodes[v.0].value.len();
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    let ga = acc(&mut grads, *a, m * k);
                    // dA[m,k] = dC[m,n] · Bᵀ
                    gemm(m, n, k, &g, false, bv.data(), true, ga, true);
                    let gb = acc(&mut grads, *b, k * n);
                    // dB[k,n] = Aᵀ · dC
                    gemm(k, m, n, av.data(), true, &g, false, gb, true);
                }
                Op::Add(a, b) => {
                    for (d, x) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *d += x;
                    }
                    for (d, x) in acc(&mut grads, *b, g.len()).iter_mut().zip(&g) {
                        *d += x;
                    }
                }
                Op::Sub(a, b) => {
                    for (d, x) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *d += x;
                    }
                    for (d, x) in acc(&mut grads, *b, g.len()).iter_mut().zip(&g) {
                        *d -= x;
                    }
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                    let gb = acc(&mut grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                }
                Op::Minimum(a, b) => {
                    let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        if ad[i] <= bd[i] {
                            ga[i] += g[i];
                        }
                    }
                    let gb = acc(&mut grads, *b, g.len());
                    for i in 0..g.len() {
                        if ad[i] > bd[i] {
                            gb[i] += g[i];
                        }
                    }
                }
                Op::AddRow(a, r) => {
                    let cols = self.value(*a).cols();
                    for (d, x) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *d += x;
                    }
                    let gr = acc(&mut grads, *r, cols);
                    for row in g.chunks(cols) {
                        for (d, x) in gr.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                }
                Op::MulRow(a, r) => {
                    let av = self.value(*a);
                    let cols = av.cols();
                    let rd = self.value(*r).data();
                    let ga = acc(&mut grads, *a, g.len());
                    for (i, d) in ga.iter_mut().enumerate() {
                        *d += g[i] * rd[i % cols];
                    }
                    let gr = acc(&mut grads, *r, cols);
                    for (i, &x) in av.data().iter().enumerate() {
                        gr[i % cols] += g[i] * x;
                    }
                }
                Op::Affine(a, scale) => {
                    for (d, x) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *d += scale * x;
                    }
                }
                Op::Gelu(a) => {
                    let ad = self.value(*a).data();
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu_parts(ad[i]).1;
                    }
                }
                Op::Elu(a) => {
                    let ad = self.value(*a).data();
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        let d = if ad[i] > 0.0 { 1.0 } else { out[i] + 1.0 };
                        ga[i] += g[i] * d;
                    }
                }
                Op::Tanh(a) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - out[i] * out[i]);
                    }
                }
                Op::Sigmoid(a) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                }
                Op::Exp(a) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * out[i];
                    }
                }
                Op::Log(a) => {
                    let ad = self.value(*a).data();
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] / ad[i];
                    }
                }
                Op::Square(a) => {
                    let ad = self.value(*a).data();
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += 2.0 * g[i] * ad[i];
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let ad = self.value(*a).data();
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        if ad[i] >= *lo && ad[i] <= *hi {
                            ga[i] += g[i];
                        }
                    }
                }
                Op::Softmax(a) => {
                    let cols = node.value.cols().max(1);
                    let ga = acc(&mut grads, *a, g.len());
                    for (r, (yr, gr)) in out.chunks(cols).zip(g.chunks(cols)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, d)| y * d).sum();
                        for c in 0..cols {
                            ga[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
                Op::LayerNorm { x, inv_std } => {
                    let cols = node.value.cols().max(1);
                    let n = cols as f64;
                    let ga = acc(&mut grads, *x, g.len());
                    for (r, (yr, gr)) in out.chunks(cols).zip(g.chunks(cols)).enumerate() {
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = yr.iter().zip(gr).map(|(y, d)| y * d).sum::<f64>() / n;
                        for c in 0..cols {
                            ga[r * cols + c] += inv_std[r] * (gr[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                }
                Op::Attention(cache) => {
                    self.attention_backward(cache, &g, &mut grads);
                }
                Op::SumAll(a) => {
                    let n = len_of(*a);
                    for d in acc(&mut grads, *a, n).iter_mut() {
                        *d += g[0];
                    }
                }
                Op::MeanAll(a) => {
                    let n = len_of(*a);
                    let share = g[0] / n.max(1) as f64;
                    for d in acc(&mut grads, *a, n).iter_mut() {
                        *d += share;
                    }
                }
                Op::SumLast(a) => {
                    let av = self.value(*a);
                    let cols = av.cols().max(1);
                    let ga = acc(&mut grads, *a, av.len());
                    for (i, d) in ga.iter_mut().enumerate() {
                        *d += g[i / cols];
                    }
                }
                Op::Reshape(a) => {
                    for (d, x) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *d += x;
                    }
                }
                Op::GatherRows(a, rows) => {
                    let av = self.value(*a);
                    let cols = av.cols();
                    let ga = acc(&mut grads, *a, av.len());
                    for (out_r, &src) in rows.iter().enumerate() {
                        for c in 0..cols {
                            ga[src * cols + c] += g[out_r * cols + c];
                        }
                    }
                }
            }
        }

        let mut by_param = HashMap::with_capacity(self.params.len());
        for (&id, &var) in &self.params {
            let shape = self.value(var).shape().to_vec();
            let data = grads[var.0]
                .take()
                .unwrap_or_else(|| vec![0.0; self.value(var).len()]);
            by_param.insert(id, DenseArray::new(shape, data)?);
        }
        Ok(Gradients { by_param })
    }

    fn attention_backward(
        &self,
        cache: &AttentionCache,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let qv = self.value(cache.q);
        let (rows, width) = (qv.shape()[0], qv.shape()[1]);
        let (seq_len, heads) = (cache.seq_len, cache.heads);
        let dh = width / heads;
        let n_seq = rows / seq_len;
        let qd = qv.data();
        let kd = self.value(cache.k).data();
        let vd = self.value(cache.v).data();
        let mut dq = vec![0.0; rows * width];
        let mut dk = vec![0.0; rows * width];
        let mut dv = vec![0.0; rows * width];
        let mut dp = vec![0.0; seq_len];
        for s in 0..n_seq {
            let base = s * seq_len;
            for h in 0..heads {
                let col = h * dh;
                for i in 0..seq_len {
                    let p_off = ((s * heads + h) * seq_len + i) * seq_len;
                    let probs = &cache.probs[p_off..p_off + seq_len];
                    let gi = &g[(base + i) * width + col..(base + i) * width + col + dh];
                    let mut dot = 0.0;
                    for j in 0..seq_len {
                        let vj = (base + j) * width + col;
                        dp[j] = gi.iter().zip(&vd[vj..vj + dh]).map(|(a, b)| a * b).sum();
                        dot += probs[j] * dp[j];
                        for c in 0..dh {
                            dv[vj + c] += probs[j] * gi[c];
                        }
                    }
                    let qi = (base + i) * width + col;
                    for j in 0..seq_len {
                        let ds = probs[j] * (dp[j] - dot) * cache.scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = (base + j) * width + col;
                        for c in 0..dh {
                            dq[qi + c] += ds * kd[kj + c];
                            dk[kj + c] += ds * qd[qi + c];
                        }
                    }
                }
            }
        }
        for (var, d) in [(cache.q, dq), (cache.k, dk), (cache.v, dv)] {
            let slot = grads[var.0].get_or_insert_with(|| vec![0.0; d.len()]);
            for (x, y) in slot.iter_mut().zip(d) {
                *x += y;
            }
        }
    }
}

/// Sinusoidal positional encoding table `[len, width]`.
pub fn sinusoidal_encoding(len: usize, width: usize) -> DenseArray {
    let mut data = vec![0.0; len * width];
    for pos in 0..len {
        for i in (0..width).step_by(2) {
            let freq = 1.0 / 10_000f64.powf(i as f64 / width as f64);
            let angle = pos as f64 * freq;
            data[pos * width + i] = angle.sin();
            if i + 1 < width {
                data[pos * width + i + 1] = angle.cos();
            }
        }
    }
    DenseArray::new(vec![len, width], data).expect("table shape")
}
