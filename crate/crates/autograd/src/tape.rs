//! Reverse-mode tape.
//!
//! Every op appends a node holding its forward value; [`Tape::backward`] walks
//! the nodes in reverse and accumulates gradients only along paths that reach a
//! trainable parameter. Frozen parameters and constants never get a gradient
//! buffer.

use std::collections::HashMap;
use std::sync::Arc;

use crate::tensor::numel;
use crate::{AutogradError, Float, ParamId, ParamStore, Result, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
struct ResizePlan<T> {
    in_w: usize,
    out_h: usize,
    out_w: usize,
    ys: Vec<(usize, usize, T)>,
    xs: Vec<(usize, usize, T)>,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Reshape(Var),
    Permute { x: Var, offsets: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    GatherRows { table: Var, idx: Vec<usize> },
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    SoftDice { logits: Var, target: Vec<T>, fg: Vec<T>, inter: T, denom: T },
    Resize { x: Var, plan: ResizePlan<T> },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to trainable parameters.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    by_param: HashMap<ParamId, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    /// Global L2 norm over all parameter gradients.
    pub fn norm(&self) -> f64 {
        self.by_param
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.by_param.values_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }
}

/// Matrix layout for strided GEMM.
#[derive(Clone, Copy)]
struct View {
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl View {
    fn stored(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    fn maybe_t(self, t: bool) -> Self {
        if t {
            self.t()
        } else {
            self
        }
    }

    fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

fn gemm<T: Float>(a: &[T], av: View, b: &[T], bv: View, c: &mut [T], cv: View, beta: T) {
    debug_assert_eq!(av.cols, bv.rows);
    debug_assert_eq!(av.rows, cv.rows);
    debug_assert_eq!(bv.cols, cv.cols);
    debug_assert!(a.len() >= av.rows * av.cols);
    debug_assert!(b.len() >= bv.rows * bv.cols);
    debug_assert!(c.len() >= cv.rows * cv.cols);
    // SAFETY: the views were built from the exact slice lengths checked above.
    unsafe {
        T::gemm(
            av.rows,
            av.cols,
            bv.cols,
            T::one(),
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr(),
            cv.rs,
            cv.cs,
        );
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu<T: Float>(x: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}

fn permute_offsets(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let total = numel(shape);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += out_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= out_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    offsets
}

/// Half-pixel-centre bilinear sampling positions along one axis.
fn resize_axis<T: Float>(n_in: usize, n_out: usize) -> Vec<(usize, usize, T)> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let w1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, T::of(w1))
        })
        .collect()
}

fn grad_slot<'a, T: Float>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]))
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AutogradError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf backed by a stored parameter; gradients flow only if it is trainable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.shared(id),
            op: Op::Param(id),
            requires_grad: store.is_trainable(id),
        });
        Var(self.nodes.len() - 1)
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x[.., C] + bias[C]` broadcast over leading dimensions.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.value(bias).len() != c || c == 0 {
            return Err(AutogradError::Shape(format!(
                "add_bias: {:?} + {:?}",
                self.shape(x),
                self.shape(bias)
            )));
        }
        let vb = self.value(bias).data().to_vec();
        let vx = self.value(x);
        let data = vx
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(&vb).map(|(&a, &b)| a + b))
            .collect();
        let out = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let vx = self.value(x);
        let out = Tensor::new(vx.shape(), vx.data().iter().map(|&v| v * s).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) @ op(b)` where `op` optionally transposes the last two axes.
    /// Operands are rank 2, or rank 3 with a shared leading batch axis.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || {
            AutogradError::Shape(format!(
                "matmul: {sa:?}{} x {sb:?}{}",
                if ta { "^T" } else { "" },
                if tb { "^T" } else { "" }
            ))
        };
        if sa.len() != sb.len() || !(2..=3).contains(&sa.len()) {
            return Err(err());
        }
        let batch = if sa.len() == 3 {
            if sa[0] != sb[0] {
                return Err(err());
            }
            sa[0]
        } else {
            1
        };
        let r = sa.len();
        let av = View::stored(sa[r - 2], sa[r - 1]).maybe_t(ta);
        let bv = View::stored(sb[r - 2], sb[r - 1]).maybe_t(tb);
        if av.cols != bv.rows {
            return Err(err());
        }
        let (m, n) = (av.rows, bv.cols);
        let mut out = vec![T::zero(); batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let (sza, szb, szc) = (av.rows * av.cols, bv.rows * bv.cols, m * n);
        for i in 0..batch {
            gemm(
                &va[i * sza..(i + 1) * sza],
                av,
                &vb[i * szb..(i + 1) * szb],
                bv,
                &mut out[i * szc..(i + 1) * szc],
                View::stored(m, n),
                T::zero(),
            );
        }
        let shape = if r == 3 { vec![batch, m, n] } else { vec![m, n] };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    /// `x @ w + b` for `x[N, I]`, `w[I, O]`, `b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let vx = self.value(x);
        let out = Tensor::new(vx.shape(), vx.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let c = *vx.shape().last().ok_or_else(|| AutogradError::Shape("softmax of scalar".into()))?;
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(c) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Softmax over the last axis of `[.., T, T]` scores where row `i` only
    /// sees columns `0..=i`. Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(AutogradError::Shape(format!("causal_softmax: {s:?}")));
        }
        let t = s[s.len() - 1];
        let mut out = vx.data().to_vec();
        for (r, row) in out.chunks_mut(t).enumerate() {
            let i = r % t;
            let mx = row[..=i].iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for v in row[..=i].iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row[..=i].iter_mut() {
                *v = *v / sum;
            }
            for v in row[i + 1..].iter_mut() {
                *v = T::zero();
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Layer normalisation over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let c = *vx.shape().last().unwrap_or(&0);
        if c == 0 || self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(AutogradError::Shape(format!(
                "layer_norm: {:?} with gain {:?} bias {:?}",
                vx.shape(),
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = vx.len() / c;
        let mut xhat = Vec::with_capacity(vx.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(vx.len());
        let cf = T::of(c as f64);
        for row in vx.data().chunks(c) {
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let rs = T::one() / (var + T::of(eps)).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = (*self.value(x)).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(AutogradError::Shape(format!("permute {perm:?} of {s:?}")));
        }
        let offsets = permute_offsets(&s, perm);
        let src = self.value(x).data();
        let data = offsets.iter().map(|&o| src[o]).collect();
        let shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Permute { x, offsets }, rg))
    }

    /// Concatenates along axis 0; trailing axes must agree.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| AutogradError::Shape("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in xs {
            let s = self.shape(v);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(AutogradError::Shape(format!(
                    "concat_rows: {:?} vs trailing {tail:?}",
                    s
                )));
            }
            rows += s[0];
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(xs);
        Ok(self.push(out, Op::ConcatRows(xs.to_vec()), rg))
    }

    /// Rows `start..start + len` of axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || start + len > s[0] {
            return Err(AutogradError::Shape(format!(
                "slice_rows {start}..{} of {s:?}",
                start + len
            )));
        }
        let inner = numel(&s[1..]);
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    /// Selects rows of a `[R, D]` table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(AutogradError::Shape(format!("gather_rows from {s:?}")));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(AutogradError::Index { index: bad, len: s[0] });
        }
        let d = s[1];
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[idx.len(), d], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(out, Op::GatherRows { table, idx: idx.to_vec() }, rg))
    }

    /// Mean over axis 0 of `[N, D]`, giving `[1, D]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(AutogradError::Shape(format!("mean_rows of {s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        let mut acc = vec![T::zero(); d];
        for row in self.value(x).data().chunks(d) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        let nf = T::of(n as f64);
        acc.iter_mut().for_each(|v| *v = *v / nf);
        let out = Tensor::new(&[1, d], acc)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MeanRows(x), rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[1], vec![s]).expect("scalar"), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.len().max(1) as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[1], vec![s]).expect("scalar"), Op::MeanAll(x), rg)
    }

    /// Mean negative log-likelihood of `targets` under a softmax over the last
    /// axis of `logits[R, C]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(AutogradError::Shape(format!(
                "cross_entropy: logits {s:?}, {} targets",
                targets.len()
            )));
        }
        let c = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(AutogradError::Index { index: bad, len: c });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0f64;
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
            loss -= row[t].as_f64().max(f64::MIN_POSITIVE).ln();
        }
        loss /= targets.len().max(1) as f64;
        let out = Tensor::new(&[1], vec![T::of(loss)])?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// `1 - (2 sum(p*g) + 1) / (sum(p) + sum(g) + 1)` with `p` the channel-1
    /// softmax probability of two-channel `logits[R, 2]`.
    pub fn soft_dice_loss(&mut self, logits: Var, target: &[bool]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[1] != 2 || s[0] != target.len() {
            return Err(AutogradError::Shape(format!(
                "soft_dice_loss: logits {s:?}, {} targets",
                target.len()
            )));
        }
        let fg: Vec<T> = self
            .value(logits)
            .data()
            .chunks(2)
            .map(|r| T::one() / (T::one() + (r[0] - r[1]).exp()))
            .collect();
        let g: Vec<T> = target.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        let inter = fg.iter().zip(&g).map(|(&p, &q)| p * q).sum::<T>();
        let denom = fg.iter().copied().sum::<T>() + g.iter().copied().sum::<T>() + T::one();
        let loss = T::one() - (T::of(2.0) * inter + T::one()) / denom;
        let out = Tensor::new(&[1], vec![loss])?;
        let rg = self.rg(&[logits]);
        Ok(self.push(out, Op::SoftDice { logits, target: g, fg, inter, denom }, rg))
    }

    /// Bilinear resize of a channel-last grid `x[in_h * in_w, C]` to
    /// `[out_h * out_w, C]` using half-pixel centres.
    pub fn resize_bilinear(
        &mut self,
        x: Var,
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != in_h * in_w || in_h == 0 || in_w == 0 {
            return Err(AutogradError::Shape(format!(
                "resize_bilinear: {s:?} as {in_h}x{in_w}"
            )));
        }
        let c = s[1];
        let plan = ResizePlan {
            in_w,
            out_h,
            out_w,
            ys: resize_axis(in_h, out_h),
            xs: resize_axis(in_w, out_w),
        };
        let src = self.value(x).data();
        let mut out = vec![T::zero(); out_h * out_w * c];
        for (oy, &(y0, y1, wy)) in plan.ys.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in plan.xs.iter().enumerate() {
                let o = (oy * out_w + ox) * c;
                for (iy, fy) in [(y0, T::one() - wy), (y1, wy)] {
                    for (ix, fx) in [(x0, T::one() - wx), (x1, wx)] {
                        let f = fy * fx;
                        if f == T::zero() {
                            continue;
                        }
                        let i = (iy * in_w + ix) * c;
                        for ch in 0..c {
                            out[o + ch] += f * src[i + ch];
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[out_h * out_w, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Resize { x, plan }, rg))
    }

    /// Gradients of scalar `loss` with respect to every trainable parameter
    /// that contributed to it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(AutogradError::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut by_param: HashMap<ParamId, Tensor<T>> = HashMap::new();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { by_param });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads, &mut by_param)?;
        }
        Ok(Gradients { by_param })
    }

    fn backward_node(
        &self,
        i: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        by_param: &mut HashMap<ParamId, Tensor<T>>,
    ) -> Result<()> {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$b:ident| $body:expr) => {
                if let Some($b) = grad_slot(nodes, grads, $v) {
                    $body;
                }
            };
        }
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let entry = by_param
                    .entry(*id)
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
                for (a, &v) in entry.data_mut().iter_mut().zip(g) {
                    *a += v;
                }
            }
            Op::Add(a, b) => {
                with_grad!(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                with_grad!(*b, |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                with_grad!(*b, |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                with_grad!(*a, |ga| {
                    for ((x, &y), &w) in ga.iter_mut().zip(g).zip(vb) {
                        *x += y * w;
                    }
                });
                with_grad!(*b, |gb| {
                    for ((x, &y), &w) in gb.iter_mut().zip(g).zip(va) {
                        *x += y * w;
                    }
                });
            }
            Op::AddBias(x, bias) => {
                let c = self.value(*bias).len();
                with_grad!(*x, |gx| gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b));
                with_grad!(*bias, |gb| {
                    for row in g.chunks(c) {
                        for (a, &b) in gb.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                });
            }
            Op::Scale(x, s) => {
                with_grad!(*x, |gx| gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *s));
            }
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let r = sa.len();
                let batch = if r == 3 { sa[0] } else { 1 };
                let a_st = View::stored(sa[r - 2], sa[r - 1]);
                let b_st = View::stored(sb[r - 2], sb[r - 1]);
                let (opa, opb) = (a_st.maybe_t(*ta), b_st.maybe_t(*tb));
                let gv = View::stored(opa.rows, opb.cols);
                let (sza, szb, szc) = (a_st.rows * a_st.cols, b_st.rows * b_st.cols, gv.rows * gv.cols);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                with_grad!(*a, |ga| {
                    // d op(A) = dC op(B)^T, written through op's layout.
                    for k in 0..batch {
                        gemm(
                            &g[k * szc..(k + 1) * szc],
                            gv,
                            &vb[k * szb..(k + 1) * szb],
                            opb.t(),
                            &mut ga[k * sza..(k + 1) * sza],
                            a_st.maybe_t(*ta),
                            T::one(),
                        );
                    }
                });
                with_grad!(*b, |gb| {
                    for k in 0..batch {
                        gemm(
                            &va[k * sza..(k + 1) * sza],
                            opa.t(),
                            &g[k * szc..(k + 1) * szc],
                            gv,
                            &mut gb[k * szb..(k + 1) * szb],
                            b_st.maybe_t(*tb),
                            T::one(),
                        );
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                with_grad!(*x, |gx| {
                    for ((a, &d), &v) in gx.iter_mut().zip(g).zip(vx) {
                        *a += d * gelu_grad(v);
                    }
                });
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                with_grad!(*x, |gx| {
                    for ((a, &d), &v) in gx.iter_mut().zip(g).zip(vx) {
                        if v > T::zero() {
                            *a += d;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = *node.value.shape().last().unwrap_or(&1);
                with_grad!(*x, |gx| {
                    for ((gr, yr), dr) in gx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dot = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum::<T>();
                        for ((a, &yv), &dv) in gr.iter_mut().zip(yr).zip(dr) {
                            *a += yv * (dv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = self.value(*gain).len();
                let gv = self.value(*gain).data();
                with_grad!(*gain, |gg| {
                    for (dr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((a, &d), &h) in gg.iter_mut().zip(dr).zip(hr) {
                            *a += d * h;
                        }
                    }
                });
                with_grad!(*bias, |gb| {
                    for dr in g.chunks(c) {
                        for (a, &d) in gb.iter_mut().zip(dr) {
                            *a += d;
                        }
                    }
                });
                with_grad!(*x, |gx| {
                    let cf = T::of(c as f64);
                    for (((gr, dr), hr), &rs) in gx
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(xhat.chunks(c))
                        .zip(rstd.iter())
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let dh = dr[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 = m1 / cf;
                        m2 = m2 / cf;
                        for j in 0..c {
                            let dh = dr[j] * gv[j];
                            gr[j] += rs * (dh - m1 - hr[j] * m2);
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                with_grad!(*x, |gx| gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b));
            }
            Op::Permute { x, offsets } => {
                with_grad!(*x, |gx| {
                    for (&o, &d) in offsets.iter().zip(g) {
                        gx[o] += d;
                    }
                });
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &v in xs {
                    let n = self.value(v).len();
                    with_grad!(v, |gv| gv.iter_mut().zip(&g[off..off + n]).for_each(|(a, &b)| *a += b));
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let inner = numel(&self.shape(*x)[1..]);
                with_grad!(*x, |gx| {
                    gx[start * inner..start * inner + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, &b)| *a += b)
                });
            }
            Op::GatherRows { table, idx } => {
                let d = self.shape(*table)[1];
                with_grad!(*table, |gt| {
                    for (r, &row) in idx.iter().enumerate() {
                        for j in 0..d {
                            gt[row * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let s = self.shape(*x);
                let (n, d) = (s[0], s[1]);
                let nf = T::of(n as f64);
                with_grad!(*x, |gx| {
                    for row in gx.chunks_mut(d) {
                        for (a, &b) in row.iter_mut().zip(g) {
                            *a += b / nf;
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                with_grad!(*x, |gx| gx.iter_mut().for_each(|a| *a += g[0]));
            }
            Op::MeanAll(x) => {
                let n = T::of(self.value(*x).len().max(1) as f64);
                with_grad!(*x, |gx| gx.iter_mut().for_each(|a| *a += g[0] / n));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / T::of(targets.len().max(1) as f64);
                with_grad!(*logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::SoftDice { logits, target, fg, inter, denom } => {
                let two = T::of(2.0);
                let num = two * *inter + T::one();
                with_grad!(*logits, |gl| {
                    for (r, (&p, &q)) in fg.iter().zip(target).enumerate() {
                        let dl_dp = -(two * q * *denom - num) / (*denom * *denom);
                        let dp = p * (T::one() - p);
                        gl[2 * r] += g[0] * dl_dp * (-dp);
                        gl[2 * r + 1] += g[0] * dl_dp * dp;
                    }
                });
            }
            Op::Resize { x, plan } => {
                let c = self.shape(*x)[1];
                debug_assert_eq!(g.len(), plan.out_h * plan.out_w * c);
                with_grad!(*x, |gx| {
                    for (oy, &(y0, y1, wy)) in plan.ys.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in plan.xs.iter().enumerate() {
                            let o = (oy * plan.out_w + ox) * c;
                            for (iy, fy) in [(y0, T::one() - wy), (y1, wy)] {
                                for (ix, fx) in [(x0, T::one() - wx), (x1, wx)] {
                                    let f = fy * fx;
                                    if f == T::zero() {
                                        continue;
                                    }
                                    let ii = (iy * plan.in_w + ix) * c;
                                    for ch in 0..c {
                                        gx[ii + ch] += f * g[o + ch];
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }
}
