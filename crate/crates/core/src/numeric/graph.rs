//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation on a [`Graph`] appends a node holding its output value and
//! enough information to replay its adjoint. Nodes are appended in evaluation
//! order, so reverse index order is a valid topological order for
//! [`Graph::backward`].
//!
//! Leaves come in three flavors: parameters (`requires_grad`), constants, and
//! detached copies of existing nodes. A detached copy carries the value but no
//! parents, which is how the regularization terms keep decoder parameters out
//! of their gradient.

use super::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use super::{Real, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction applied by the pointwise losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    SplitHeads {
        x: Var,
        dims: HeadDims,
    },
    MergeHeads {
        x: Var,
        dims: HeadDims,
    },
    Sum(Var),
    Mse {
        a: Var,
        b: Var,
        row_w: Vec<T>,
    },
    KlDiv {
        p: Var,
        q: Var,
        row_w: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        row_w: Vec<T>,
        probs: Vec<T>,
    },
}

#[derive(Clone, Copy, Debug)]
struct HeadDims {
    batch: usize,
    len: usize,
    heads: usize,
    dh: usize,
}

impl HeadDims {
    /// Position in the `[batch*heads, len, dh]` layout of element
    /// `(b, t, h, d)` stored at `(b*len + t)*heads*dh + h*dh + d`.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let width = self.heads * self.dh;
        for b in 0..self.batch {
            for t in 0..self.len {
                for h in 0..self.heads {
                    let src = (b * self.len + t) * width + h * self.dh;
                    let dst = ((b * self.heads + h) * self.len + t) * self.dh;
                    for d in 0..self.dh {
                        f(src + d, dst + d);
                    }
                }
            }
        }
    }
}

/// Probability clamp applied before logarithms in [`Graph::kl_div`].
pub const KL_CLAMP: f64 = 1e-9;
/// Tolerance on row sums accepted as a probability distribution.
pub const DISTRIBUTION_TOL: f64 = 1e-5;

/// A recorded computation. One recording supports exactly one backward pass.
pub struct Graph<T: Real = f32> {
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<T>>,
    grads: Vec<Option<Vec<T>>>,
    requires: Vec<bool>,
    ops: Vec<Op<T>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn grad_buf<'a, T: Real>(
    grads: &'a mut [Option<Vec<T>>],
    values: &[Vec<T>],
    v: Var,
) -> &'a mut Vec<T> {
    let len = values[v.0].len();
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            shapes: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            ops: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Forgets every node recorded after the first `len`, so a shared prefix
    /// (an encoder run, say) can be reused by several continuations. Handles
    /// to the forgotten nodes must not be used afterwards.
    pub fn truncate(&mut self, len: usize) {
        self.shapes.truncate(len);
        self.values.truncate(len);
        self.grads.truncate(len);
        self.requires.truncate(len);
        self.ops.truncate(len);
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.shapes.push(shape);
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(op);
        Var(self.ops.len() - 1)
    }

    fn req(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    // ---- leaves ----

    /// Records `t` as a leaf; it participates in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let req = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), req, Op::Leaf)
    }

    /// Records a copy of `t` as a differentiable leaf.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), false, Op::Leaf)
    }

    /// Copy of `v`'s value with no parents: adjoints stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let shape = self.shapes[v.0].clone();
        let value = self.values[v.0].clone();
        self.push(shape, value, false, Op::Leaf)
    }

    // ---- accessors ----

    pub fn value(&self, v: Var) -> &[T] {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.shapes[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        assert_eq!(self.values[v.0].len(), 1, "item() on non-scalar");
        self.values[v.0][0]
    }

    /// Value (and gradient, when populated) of `v` as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let mut t = Tensor::new(&self.shapes[v.0], self.values[v.0].clone())
            .unwrap()
            .with_requires_grad(self.requires[v.0]);
        if let Some(g) = &self.grads[v.0] {
            t.set_grad(g.clone()).unwrap();
        }
        t
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shapes[a.0] != self.shapes[b.0] {
            return Err(shape_err(op, &self.shapes[a.0], &self.shapes[b.0]));
        }
        Ok(())
    }

    fn last_dim(&self, v: Var) -> usize {
        *self.shapes[v.0].last().unwrap()
    }

    fn row_weights(
        &self,
        rows: usize,
        row_valid: Option<&[bool]>,
        cols: usize,
        reduction: Reduction,
    ) -> Result<Vec<T>, TensorError> {
        let valid: Vec<bool> = match row_valid {
            Some(m) if m.len() != rows => {
                return Err(TensorError::InvalidArgument(format!(
                    "row mask has {} entries for {rows} rows",
                    m.len()
                )))
            }
            Some(m) => m.to_vec(),
            None => vec![true; rows],
        };
        let n_valid = valid.iter().filter(|&&v| v).count();
        if n_valid == 0 {
            return Err(TensorError::AllMasked);
        }
        let w = match reduction {
            Reduction::Mean => T::one() / T::from_f64((n_valid * cols) as f64),
            Reduction::Sum => T::one(),
        };
        Ok(valid
            .into_iter()
            .map(|v| if v { w } else { T::zero() })
            .collect())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let value = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(x, y)| *x + *y)
            .collect();
        let req = self.req(&[a, b]);
        Ok(self.push(self.shapes[a.0].clone(), value, req, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let value = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(x, y)| *x - *y)
            .collect();
        let req = self.req(&[a, b]);
        Ok(self.push(self.shapes[a.0].clone(), value, req, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let value = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(x, y)| *x * *y)
            .collect();
        let req = self.req(&[a, b]);
        Ok(self.push(self.shapes[a.0].clone(), value, req, Op::Mul(a, b)))
    }

    /// Adds a `[n]` vector to every row of a `[.., n]` tensor.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        let n = self.last_dim(x);
        if self.shapes[row.0] != [n] {
            return Err(shape_err("add_row", &self.shapes[x.0], &self.shapes[row.0]));
        }
        let r = &self.values[row.0];
        let value = self.values[x.0]
            .chunks(n)
            .flat_map(|xs| xs.iter().zip(r).map(|(a, b)| *a + *b))
            .collect();
        let req = self.req(&[x, row]);
        Ok(self.push(self.shapes[x.0].clone(), value, req, Op::AddRow { x, row }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.values[x.0].iter().map(|v| *v * c).collect();
        let req = self.req(&[x]);
        self.push(self.shapes[x.0].clone(), value, req, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.values[x.0].iter().map(|v| v.max(T::zero())).collect();
        let req = self.req(&[x]);
        self.push(self.shapes[x.0].clone(), value, req, Op::Relu(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        if shape.iter().product::<usize>() != self.values[x.0].len() || shape.contains(&0) {
            return Err(shape_err("reshape", &self.shapes[x.0], shape));
        }
        let value = self.values[x.0].clone();
        let req = self.req(&[x]);
        Ok(self.push(shape.to_vec(), value, req, Op::Reshape(x)))
    }

    // ---- linear algebra ----

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let name = if trans_b { "matmul_nt" } else { "matmul" };
        let (sa, sb) = (&self.shapes[a.0], &self.shapes[b.0]);
        let (batch, m, k, bk, n) = match (sa.as_slice(), sb.as_slice()) {
            (&[m, k], &[r, c]) => {
                let (bk, n) = if trans_b { (c, r) } else { (r, c) };
                (1, m, k, bk, n)
            }
            (&[g, m, k], &[g2, r, c]) if g == g2 => {
                let (bk, n) = if trans_b { (c, r) } else { (r, c) };
                (g, m, k, bk, n)
            }
            _ => return Err(shape_err(name, sa, sb)),
        };
        if k != bk {
            return Err(shape_err(name, sa, sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        for g in 0..batch {
            let ab = &va[g * m * k..(g + 1) * m * k];
            let bb = &vb[g * k * n..(g + 1) * k * n];
            let cb = &mut out[g * m * n..(g + 1) * m * n];
            if trans_b {
                gemm_nt(ab, bb, cb, m, k, n);
            } else {
                gemm_nn(ab, bb, cb, m, k, n);
            }
        }
        let shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let req = self.req(&[a, b]);
        Ok(self.push(
            shape,
            out,
            req,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
        ))
    }

    /// `[m×k]·[k×n]`, or the batched `[g×m×k]·[g×k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `b` of shape `[n×k]` (or `[g×n×k]`).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    /// `[batch*len, heads*dh]` → `[batch*heads, len, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var, TensorError> {
        let s = self.shapes[x.0].clone();
        if s.len() != 2 || !s[0].is_multiple_of(batch) || !s[1].is_multiple_of(heads) {
            return Err(shape_err("split_heads", &s, &[batch, heads]));
        }
        let dims = HeadDims {
            batch,
            len: s[0] / batch,
            heads,
            dh: s[1] / heads,
        };
        let src = &self.values[x.0];
        let mut out = vec![T::zero(); src.len()];
        dims.for_each(|i, o| out[o] = src[i]);
        let req = self.req(&[x]);
        Ok(self.push(
            vec![batch * heads, dims.len, dims.dh],
            out,
            req,
            Op::SplitHeads { x, dims },
        ))
    }

    /// Inverse of [`Graph::split_heads`]: `[batch*heads, len, dh]` →
    /// `[batch*len, heads*dh]`.
    pub fn merge_heads(&mut self, x: Var, batch: usize) -> Result<Var, TensorError> {
        let s = self.shapes[x.0].clone();
        if s.len() != 3 || !s[0].is_multiple_of(batch) {
            return Err(shape_err("merge_heads", &s, &[batch]));
        }
        let dims = HeadDims {
            batch,
            len: s[1],
            heads: s[0] / batch,
            dh: s[2],
        };
        let src = &self.values[x.0];
        let mut out = vec![T::zero(); src.len()];
        dims.for_each(|i, o| out[i] = src[o]);
        let req = self.req(&[x]);
        Ok(self.push(
            vec![batch * dims.len, dims.heads * dims.dh],
            out,
            req,
            Op::MergeHeads { x, dims },
        ))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let s = &self.shapes[table.0];
        if s.len() != 2 {
            return Err(shape_err("gather", s, &[ids.len()]));
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfRange { index: bad, len: rows });
        }
        if ids.is_empty() {
            return Err(TensorError::InvalidArgument("gather with no ids".into()));
        }
        let t = &self.values[table.0];
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&t[i * cols..(i + 1) * cols]);
        }
        let req = self.req(&[table]);
        Ok(self.push(
            vec![ids.len(), cols],
            out,
            req,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    // ---- normalization ----

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let s = self.shapes[x.0].clone();
        if axis >= s.len() {
            return Err(TensorError::InvalidAxis { axis, rank: s.len() });
        }
        let len = s[axis];
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let v = &self.values[x.0];
        let mut out = vec![T::zero(); v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let mx = (0..len).map(|a| v[idx(a)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for a in 0..len {
                    let e = (v[idx(a)] - mx).exp();
                    out[idx(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    out[idx(a)] = out[idx(a)] / z;
                }
            }
        }
        let req = self.req(&[x]);
        Ok(self.push(s, out, req, Op::Softmax { x, outer, len, inner }))
    }

    /// Softmax over the last axis where `keep[i] == false` forces weight
    /// exactly zero. A row with nothing kept is an error.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var, TensorError> {
        let s = self.shapes[x.0].clone();
        let v = &self.values[x.0];
        if keep.len() != v.len() {
            return Err(TensorError::InvalidArgument(format!(
                "mask has {} entries for {} values",
                keep.len(),
                v.len()
            )));
        }
        let len = *s.last().unwrap();
        let mut out = vec![T::zero(); v.len()];
        for ((xs, ks), os) in v.chunks(len).zip(keep.chunks(len)).zip(out.chunks_mut(len)) {
            let mx = xs
                .iter()
                .zip(ks)
                .filter(|(_, &k)| k)
                .map(|(x, _)| *x)
                .fold(T::neg_infinity(), T::max);
            if mx == T::neg_infinity() {
                return Err(TensorError::AllMasked);
            }
            let mut z = T::zero();
            for ((x, &k), o) in xs.iter().zip(ks).zip(os.iter_mut()) {
                if k {
                    *o = (*x - mx).exp();
                    z += *o;
                }
            }
            for o in os.iter_mut() {
                *o = *o / z;
            }
        }
        let outer = v.len() / len;
        let req = self.req(&[x]);
        Ok(self.push(
            s,
            out,
            req,
            Op::Softmax {
                x,
                outer,
                len,
                inner: 1,
            },
        ))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var, TensorError> {
        let c = self.last_dim(x);
        if self.shapes[gain.0] != [c] {
            return Err(shape_err("layer_norm", &self.shapes[x.0], &self.shapes[gain.0]));
        }
        if self.shapes[bias.0] != [c] {
            return Err(shape_err("layer_norm", &self.shapes[x.0], &self.shapes[bias.0]));
        }
        if eps <= T::zero() {
            return Err(TensorError::InvalidArgument("layer_norm epsilon must be > 0".into()));
        }
        let v = &self.values[x.0];
        let (g, b) = (&self.values[gain.0], &self.values[bias.0]);
        let rows = v.len() / c;
        let cf = T::from_f64(c as f64);
        let mut xhat = vec![T::zero(); v.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); v.len()];
        for r in 0..rows {
            let xs = &v[r * c..(r + 1) * c];
            let mean = xs.iter().copied().sum::<T>() / cf;
            let var = xs.iter().map(|x| (*x - mean) * (*x - mean)).sum::<T>() / cf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (xs[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let req = self.req(&[x, gain, bias]);
        Ok(self.push(
            self.shapes[x.0].clone(),
            out,
            req,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    // ---- reductions and losses ----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values[x.0].iter().copied().sum();
        let req = self.req(&[x]);
        self.push(vec![1], vec![s], req, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.values[x.0].len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    /// Squared error between equal-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var, reduction: Reduction) -> Result<Var, TensorError> {
        self.mse_rows(a, b, None, reduction)
    }

    /// Squared error restricted to the rows (last-axis vectors) marked valid.
    /// `Mean` divides by the number of valid elements.
    pub fn mse_rows(
        &mut self,
        a: Var,
        b: Var,
        row_valid: Option<&[bool]>,
        reduction: Reduction,
    ) -> Result<Var, TensorError> {
        self.same_shape("mse", a, b)?;
        let cols = self.last_dim(a);
        let rows = self.values[a.0].len() / cols;
        let row_w = self.row_weights(rows, row_valid, cols, reduction)?;
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        let mut total = T::zero();
        for r in 0..rows {
            if row_w[r] == T::zero() {
                continue;
            }
            let mut s = T::zero();
            for j in r * cols..(r + 1) * cols {
                let d = va[j] - vb[j];
                s += d * d;
            }
            total += s * row_w[r];
        }
        let req = self.req(&[a, b]);
        Ok(self.push(vec![1], vec![total], req, Op::Mse { a, b, row_w }))
    }

    fn check_distribution(&self, v: Var) -> Result<(), TensorError> {
        let c = self.last_dim(v);
        for row in self.values[v.0].chunks(c) {
            let s: T = row.iter().copied().sum();
            if (s.as_f64() - 1.0).abs() > DISTRIBUTION_TOL || row.iter().any(|p| *p < T::zero()) {
                return Err(TensorError::NotADistribution { sum: s.as_f64() });
            }
        }
        Ok(())
    }

    /// `KL(p ‖ q)` per row in nats, averaged over rows.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var, TensorError> {
        self.kl_div_rows(p, q, None)
    }

    /// `KL(p ‖ q)` per row, averaged over the rows marked valid. Both
    /// arguments are clamped below at [`KL_CLAMP`] before the logarithms.
    pub fn kl_div_rows(
        &mut self,
        p: Var,
        q: Var,
        row_valid: Option<&[bool]>,
    ) -> Result<Var, TensorError> {
        self.same_shape("kl_div", p, q)?;
        self.check_distribution(p)?;
        self.check_distribution(q)?;
        let cols = self.last_dim(p);
        let rows = self.values[p.0].len() / cols;
        let row_w = self.row_weights(rows, row_valid, 1, Reduction::Mean)?;
        let eps = T::from_f64(KL_CLAMP);
        let (vp, vq) = (&self.values[p.0], &self.values[q.0]);
        let mut total = T::zero();
        for r in 0..rows {
            if row_w[r] == T::zero() {
                continue;
            }
            let mut s = T::zero();
            for j in r * cols..(r + 1) * cols {
                if vp[j] > T::zero() {
                    s += vp[j] * (vp[j].max(eps).ln() - vq[j].max(eps).ln());
                }
            }
            total += s * row_w[r];
        }
        let req = self.req(&[p, q]);
        Ok(self.push(vec![1], vec![total], req, Op::KlDiv { p, q, row_w }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, over rows marked valid.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        row_valid: Option<&[bool]>,
    ) -> Result<Var, TensorError> {
        let s = &self.shapes[logits.0];
        if s.len() != 2 || s[0] != targets.len() {
            return Err(shape_err("cross_entropy", s, &[targets.len()]));
        }
        let (rows, v) = (s[0], s[1]);
        let row_w = self.row_weights(rows, row_valid, 1, Reduction::Mean)?;
        let x = &self.values[logits.0];
        let mut probs = vec![T::zero(); x.len()];
        let mut total = T::zero();
        for r in 0..rows {
            let xs = &x[r * v..(r + 1) * v];
            let mx = xs.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, xv) in xs.iter().enumerate() {
                let e = (*xv - mx).exp();
                probs[r * v + j] = e;
                z += e;
            }
            for pv in &mut probs[r * v..(r + 1) * v] {
                *pv = *pv / z;
            }
            if row_w[r] != T::zero() {
                let t = targets[r];
                if t >= v {
                    return Err(TensorError::IndexOutOfRange { index: t, len: v });
                }
                let logp = xs[t] - mx - z.ln();
                total -= logp * row_w[r];
            }
        }
        let req = self.req(&[logits]);
        Ok(self.push(
            vec![1],
            vec![total],
            req,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                row_w,
                probs,
            },
        ))
    }

    // ---- backward ----

    /// Propagates adjoints from the scalar `loss` to every node that requires
    /// a gradient. Afterwards every such node has a (possibly zero) gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.values[loss.0].len() != 1 {
            return Err(TensorError::NonScalarBackward(self.shapes[loss.0].clone()));
        }
        self.backward_done = true;
        let Graph {
            shapes: _,
            values,
            grads,
            requires,
            ops,
            ..
        } = self;
        if requires[loss.0] {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            if !requires[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_node(&ops[i], i, &g, values, grads, requires);
            grads[i] = Some(g);
        }
        for i in 0..ops.len() {
            if requires[i] && grads[i].is_none() {
                grads[i] = Some(vec![T::zero(); values[i].len()]);
            }
        }
        Ok(())
    }
}

fn backward_node<T: Real>(
    op: &Op<T>,
    out: usize,
    g: &[T],
    values: &[Vec<T>],
    grads: &mut [Option<Vec<T>>],
    requires: &[bool],
) {
    let need = |v: &Var| requires[v.0];
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for (v, sign) in [(a, T::one()), (b, T::one())] {
                if need(v) {
                    axpy(grad_buf(grads, values, *v), sign, g);
                }
            }
        }
        Op::Sub(a, b) => {
            for (v, sign) in [(a, T::one()), (b, -T::one())] {
                if need(v) {
                    axpy(grad_buf(grads, values, *v), sign, g);
                }
            }
        }
        Op::Mul(a, b) => {
            if need(a) {
                let vb = &values[b.0];
                let ga = grad_buf(grads, values, *a);
                for i in 0..g.len() {
                    ga[i] += g[i] * vb[i];
                }
            }
            if need(b) {
                let va = &values[a.0];
                let gb = grad_buf(grads, values, *b);
                for i in 0..g.len() {
                    gb[i] += g[i] * va[i];
                }
            }
        }
        Op::AddRow { x, row } => {
            if need(x) {
                axpy(grad_buf(grads, values, *x), T::one(), g);
            }
            if need(row) {
                let gr = grad_buf(grads, values, *row);
                let n = gr.len();
                for chunk in g.chunks(n) {
                    axpy(gr, T::one(), chunk);
                }
            }
        }
        Op::Scale(x, c) => {
            if need(x) {
                axpy(grad_buf(grads, values, *x), *c, g);
            }
        }
        Op::Relu(x) => {
            if need(x) {
                let y = &values[out];
                let gx = grad_buf(grads, values, *x);
                for i in 0..g.len() {
                    if y[i] > T::zero() {
                        gx[i] += g[i];
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if need(x) {
                axpy(grad_buf(grads, values, *x), T::one(), g);
            }
        }
        Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        } => {
            let (m, k, n) = (*m, *k, *n);
            if need(a) {
                let vb = &values[b.0];
                let ga = grad_buf(grads, values, *a);
                for bi in 0..*batch {
                    let gc = &g[bi * m * n..(bi + 1) * m * n];
                    let bb = &vb[bi * k * n..(bi + 1) * k * n];
                    let gab = &mut ga[bi * m * k..(bi + 1) * m * k];
                    if *trans_b {
                        // C = A·Bᵀ, B is [n×k]: dA = dC·B
                        gemm_nn(gc, bb, gab, m, n, k);
                    } else {
                        // dA = dC·Bᵀ
                        gemm_nt(gc, bb, gab, m, n, k);
                    }
                }
            }
            if need(b) {
                let va = &values[a.0];
                let gb = grad_buf(grads, values, *b);
                for bi in 0..*batch {
                    let gc = &g[bi * m * n..(bi + 1) * m * n];
                    let ab = &va[bi * m * k..(bi + 1) * m * k];
                    let gbb = &mut gb[bi * k * n..(bi + 1) * k * n];
                    if *trans_b {
                        // dB = dCᵀ·A
                        gemm_tn(gc, ab, gbb, m, n, k);
                    } else {
                        // dB = Aᵀ·dC
                        gemm_tn(ab, gc, gbb, m, k, n);
                    }
                }
            }
        }
        Op::SplitHeads { x, dims } => {
            if need(x) {
                let gx = grad_buf(grads, values, *x);
                dims.for_each(|i, o| gx[i] += g[o]);
            }
        }
        Op::MergeHeads { x, dims } => {
            if need(x) {
                let gx = grad_buf(grads, values, *x);
                dims.for_each(|i, o| gx[o] += g[i]);
            }
        }
        Op::Gather { table, ids } => {
            if need(table) {
                let gt = grad_buf(grads, values, *table);
                let cols = g.len() / ids.len();
                for (r, &id) in ids.iter().enumerate() {
                    axpy(
                        &mut gt[id * cols..(id + 1) * cols],
                        T::one(),
                        &g[r * cols..(r + 1) * cols],
                    );
                }
            }
        }
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            if need(x) {
                let y = &values[out];
                let gx = grad_buf(grads, values, *x);
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |a: usize| (o * len + a) * inner + i;
                        let s: T = (0..*len).map(|a| g[idx(a)] * y[idx(a)]).sum();
                        for a in 0..*len {
                            gx[idx(a)] += y[idx(a)] * (g[idx(a)] - s);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let c = values[gain.0].len();
            let rows = g.len() / c;
            let cf = T::from_f64(c as f64);
            if need(x) {
                let gv = &values[gain.0];
                let gx = grad_buf(grads, values, *x);
                let mut dxhat = vec![T::zero(); c];
                for r in 0..rows {
                    let gr = &g[r * c..(r + 1) * c];
                    let xr = &xhat[r * c..(r + 1) * c];
                    for j in 0..c {
                        dxhat[j] = gr[j] * gv[j];
                    }
                    let mean_d = dxhat.iter().copied().sum::<T>() / cf;
                    let mean_dx = dot(&dxhat, xr) / cf;
                    for j in 0..c {
                        gx[r * c + j] += inv_std[r] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                    }
                }
            }
            if need(gain) {
                let gg = grad_buf(grads, values, *gain);
                for r in 0..rows {
                    for j in 0..c {
                        gg[j] += g[r * c + j] * xhat[r * c + j];
                    }
                }
            }
            if need(bias) {
                let gb = grad_buf(grads, values, *bias);
                for chunk in g.chunks(c) {
                    axpy(gb, T::one(), chunk);
                }
            }
        }
        Op::Sum(x) => {
            if need(x) {
                let gx = grad_buf(grads, values, *x);
                for v in gx.iter_mut() {
                    *v += g[0];
                }
            }
        }
        Op::Mse { a, b, row_w } => {
            let (va, vb) = (&values[a.0], &values[b.0]);
            let cols = va.len() / row_w.len();
            let two = T::from_f64(2.0);
            let diff = |j: usize| two * (va[j] - vb[j]) * row_w[j / cols] * g[0];
            if need(a) {
                let ga = grad_buf(grads, values, *a);
                for (j, v) in ga.iter_mut().enumerate() {
                    *v += diff(j);
                }
            }
            if need(b) {
                let gb = grad_buf(grads, values, *b);
                for (j, v) in gb.iter_mut().enumerate() {
                    *v -= diff(j);
                }
            }
        }
        Op::KlDiv { p, q, row_w } => {
            let (vp, vq) = (&values[p.0], &values[q.0]);
            let cols = vp.len() / row_w.len();
            let eps = T::from_f64(KL_CLAMP);
            if need(p) {
                let gp = grad_buf(grads, values, *p);
                for (j, v) in gp.iter_mut().enumerate() {
                    let w = row_w[j / cols] * g[0];
                    if w == T::zero() || vp[j] <= T::zero() {
                        continue;
                    }
                    let mut d = vp[j].max(eps).ln() - vq[j].max(eps).ln();
                    if vp[j] > eps {
                        d += T::one();
                    }
                    *v += w * d;
                }
            }
            if need(q) {
                let gq = grad_buf(grads, values, *q);
                for (j, v) in gq.iter_mut().enumerate() {
                    let w = row_w[j / cols] * g[0];
                    if w != T::zero() && vq[j] > eps {
                        *v -= w * vp[j] / vq[j];
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            row_w,
            probs,
        } => {
            if need(logits) {
                let v = probs.len() / targets.len();
                let gl = grad_buf(grads, values, *logits);
                for (r, &t) in targets.iter().enumerate() {
                    let w = row_w[r] * g[0];
                    if w == T::zero() {
                        continue;
                    }
                    for j in 0..v {
                        gl[r * v + j] += w * probs[r * v + j];
                    }
                    gl[r * v + t] -= w;
                }
            }
        }
    }
}
