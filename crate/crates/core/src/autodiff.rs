//! Reverse-mode automatic differentiation on a per-pass tape.
//!
//! A [`Graph`] records every kernel application in execution order, so the
//! node list is already topologically sorted. [`Graph::backward`] walks it
//! once in reverse and accumulates gradients additively.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Key-visibility mask for attention scores.
///
/// Scores are laid out as `[groups * heads, rows, cols]`; one mask slice of
/// `rows × cols` is shared by the `heads` consecutive score slices of a group.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask {
    pub groups: usize,
    pub heads: usize,
    pub rows: usize,
    pub cols: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn new(groups: usize, rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != groups * rows * cols {
            return Err(Error::Shape(format!(
                "mask expects {}x{}x{} entries, got {}",
                groups,
                rows,
                cols,
                allowed.len()
            )));
        }
        Ok(AttnMask { groups, heads: 1, rows, cols, allowed })
    }

    pub fn all_visible(groups: usize, rows: usize, cols: usize) -> Self {
        AttnMask { groups, heads: 1, rows, cols, allowed: vec![true; groups * rows * cols] }
    }

    /// Lower-triangular visibility for each group.
    pub fn causal(groups: usize, n: usize) -> Self {
        let mut allowed = vec![false; groups * n * n];
        for g in 0..groups {
            for r in 0..n {
                for c in 0..=r {
                    allowed[(g * n + r) * n + c] = true;
                }
            }
        }
        AttnMask { groups, heads: 1, rows: n, cols: n, allowed }
    }

    pub fn with_heads(mut self, heads: usize) -> Self {
        self.heads = heads.max(1);
        self
    }

    pub fn allowed(&self, group: usize, row: usize, col: usize) -> bool {
        self.allowed[(group * self.rows + row) * self.cols + col]
    }

    /// Hides key `col` of `group` from every query row.
    pub fn hide_key(&mut self, group: usize, col: usize) {
        for r in 0..self.rows {
            self.allowed[(group * self.rows + r) * self.cols + col] = false;
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(usize),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulConst { a: Var, factor: Vec<T> },
    Scale { a: Var, s: T },
    AddRow { a: Var, bias: Var },
    Relu { a: Var },
    Tanh { a: Var },
    Sigmoid { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<T> },
    Gather { a: Var, idx: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    Reshape { a: Var },
    Sum { a: Var },
}

struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
}

/// Tape for one forward/backward pass.
pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Option<&'p ParamStore<T>>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    node_grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    param_nodes: Vec<Option<Var>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a node; zeros if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.node_grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Gradient for parameter `id` of the store used by the graph.
    pub fn param(&self, id: usize) -> Option<Tensor<T>> {
        self.param_nodes.get(id).copied().flatten().map(|v| self.wrt(v))
    }

    /// Per-parameter gradients in store order; unused parameters get zeros.
    pub fn into_param_grads(self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        (0..store.len())
            .map(|id| self.param(id).unwrap_or_else(|| Tensor::zeros(store.get(id).shape())))
            .collect()
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Shape(msg()))
    }
}

impl<'p, T: Scalar> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: None, param_vars: Vec::new() }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Graph { nodes: Vec::new(), params: Some(params), param_vars: vec![None; params.len()] }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        debug_assert!(value.all_finite(), "non-finite output from {:?}", std::mem::discriminant(&op));
        self.nodes.push(Node { op, value: Some(value) });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match (&self.nodes[v.0].value, &self.nodes[v.0].op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.expect("param graph").get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Records a tensor input (constant or differentiable leaf).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t)
    }

    /// Leaf for parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        self.nodes.push(Node { op: Op::Param(id), value: None });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id] = Some(v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self
            .params
            .and_then(|p| p.id(name))
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))?;
        Ok(self.param(id))
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        check(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], || {
            format!("matmul {sa:?} x {sb:?}")
        })?;
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(false, false, m, k, n, self.value(a).data(), self.value(b).data(), T::zero(), &mut out);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(Op::MatMul { a, b, m, k, n }, t))
    }

    /// Batched product over the leading axis: `[B×m×k]·[B×k×n]`, or
    /// `[B×m×k]·[B×n×k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        check(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], || {
            format!("batch_matmul {sa:?} x {sb:?}")
        })?;
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        check(k == kb, || format!("batch_matmul inner dims {sa:?} x {sb:?} (trans_b={trans_b})"))?;
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                T::gemm(
                    false,
                    trans_b,
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let t = Tensor::new(&[batch, m, n], out)?;
        Ok(self.push(Op::BatchMatMul { a, b, batch, m, k, n, trans_b }, t))
    }

    fn zip_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check(sa == sb, || format!("{what} {sa:?} vs {sb:?}"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(Op::Add { a, b }, t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(Op::Mul { a, b }, t))
    }

    /// Elementwise product with a constant (dropout masks, gating masks).
    pub fn mul_const(&mut self, a: Var, factor: Vec<T>) -> Result<Var> {
        check(factor.len() == self.value(a).len(), || {
            format!("mul_const factor of {} for {:?}", factor.len(), self.shape(a))
        })?;
        let data = self.value(a).data().iter().zip(&factor).map(|(&x, &f)| x * f).collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(Op::MulConst { a, factor }, t))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let data = self.value(a).data().iter().map(|&x| x * s).collect();
        let t = Tensor::new(self.shape(a), data).expect("same shape");
        self.push(Op::Scale { a, s }, t)
    }

    /// Adds a `[n]` bias to every row of `[..., n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).cols();
        check(self.shape(bias) == [n], || {
            format!("bias {:?} for rows of {:?}", self.shape(bias), self.shape(a))
        })?;
        let bd = self.value(bias).data();
        let data = self.value(a).data().iter().enumerate().map(|(i, &x)| x + bd[i % n]).collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(Op::AddRow { a, bias }, t))
    }

    /// `x · W + b` for `x: [.., in]`, `W: [in×out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(self.shape(a), data).expect("same shape");
        self.push(op, t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu { a }, |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh { a }, |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid { a }, |x| T::one() / (T::one() + (-x).exp()))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.masked_softmax(a, None).expect("unmasked softmax")
    }

    /// Softmax over the last axis where masked entries get probability
    /// exactly zero, equivalent to a −∞ score. A fully masked row yields zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&AttnMask>) -> Result<Var> {
        let x = self.value(a);
        let cols = x.cols();
        let rows = x.rows();
        if let Some(m) = mask {
            let s = x.shape();
            check(
                s.len() == 3 && s[0] == m.groups * m.heads && s[1] == m.rows && s[2] == m.cols,
                || format!("mask {}x{}x{}x{} for scores {s:?}", m.groups, m.heads, m.rows, m.cols),
            )?;
        }
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let visible = |c: usize| match mask {
                None => true,
                Some(m) => {
                    let slice = r / m.rows;
                    m.allowed(slice / m.heads, r % m.rows, c)
                }
            };
            let row = x.row(r);
            let mut max = T::neg_infinity();
            for (c, &v) in row.iter().enumerate() {
                if visible(c) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut z = T::zero();
            for c in 0..cols {
                if visible(c) {
                    let e = (row[c] - max).exp();
                    o[c] = e;
                    z += e;
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        let t = Tensor::new(x.shape(), out)?;
        Ok(self.push(Op::Softmax { a }, t))
    }

    /// Per-row normalisation over the last axis followed by `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        check(d >= 2, || format!("layer_norm needs last axis >= 2, got {:?}", xv.shape()))?;
        check(self.shape(gamma) == [d] && self.shape(beta) == [d], || {
            format!("layer_norm affine params {:?}/{:?} for width {d}", self.shape(gamma), self.shape(beta))
        })?;
        let rows = xv.rows();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let dn = T::lit(d as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + T::lit(eps)).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        Ok(self.push(Op::LayerNorm { x, gamma, beta, xhat, rstd }, t))
    }

    /// Row gather from a `[V×d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        check(tv.rank() == 2, || format!("embedding table must be 2-d, got {:?}", tv.shape()))?;
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!("token id {bad} outside table of {v} rows")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let t = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(Op::Embedding { table, ids: ids.to_vec() }, t))
    }

    /// Summed negative log-likelihood of `targets` over rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        check(lv.rank() == 2, || format!("cross_entropy logits must be 2-d, got {:?}", lv.shape()))?;
        let (n, v) = (lv.shape()[0], lv.shape()[1]);
        check(targets.len() == n && mask.len() == n, || {
            format!("cross_entropy {n} rows, {} targets, {} mask", targets.len(), mask.len())
        })?;
        let mut probs = vec![T::zero(); n * v];
        let mut total = T::zero();
        for r in 0..n {
            if !mask[r] {
                continue;
            }
            if targets[r] >= v {
                return Err(Error::Index(format!("target id {} outside {v} classes", targets[r])));
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..v {
                let e = (row[c] - max).exp();
                probs[r * v + c] = e;
                z += e;
            }
            for c in 0..v {
                probs[r * v + c] /= z;
            }
            total += max + z.ln() - row[targets[r]];
        }
        let t = Tensor::scalar(total);
        Ok(self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs },
            t,
        ))
    }

    /// `out[i] = a[idx[i]]` over the flattened data, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        check(shape.iter().product::<usize>() == idx.len(), || {
            format!("gather of {} indices into {shape:?}", idx.len())
        })?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.len()) {
            return Err(Error::Index(format!("gather index {bad} outside {} values", av.len())));
        }
        let data = idx.iter().map(|&i| av.data()[i]).collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(Op::Gather { a, idx }, t))
    }

    /// Columns `[start, start+width)` of a `[.., n]` tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = (self.value(a).rows(), self.value(a).cols());
        check(start + width <= cols, || format!("slice {start}+{width} of {cols} columns"))?;
        let idx = (0..rows).flat_map(|r| (start..start + width).map(move |c| r * cols + c)).collect();
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().expect("rank >= 1") = width;
        self.gather(a, idx, &shape)
    }

    /// Concatenation along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        check(!parts.is_empty(), || "concat of zero tensors".into())?;
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            check(s.len() == tail.len() + 1 && s[1..] == tail[..], || {
                format!("concat_rows {s:?} with trailing {tail:?}")
            })?;
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(Op::ConcatRows { parts: parts.to_vec() }, t))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape { a }, t))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Op::Sum { a }, Tensor::scalar(s))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    // dA = dC · Bᵀ ; dB = Aᵀ · dC
                    let ga = acc(&mut grads, *a, m * k);
                    T::gemm(false, true, m, n, k, &g, bv, T::one(), ga);
                    let gb = acc(&mut grads, *b, k * n);
                    T::gemm(true, false, k, m, n, av, &g, T::one(), gb);
                }
                Op::BatchMatMul { a, b, batch, m, k, n, trans_b } => {
                    let (batch, m, k, n) = (*batch, *m, *k, *n);
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    {
                        let ga = acc(&mut grads, *a, batch * m * k);
                        for j in 0..batch {
                            let gs = &g[j * m * n..(j + 1) * m * n];
                            let bs = &bv[j * k * n..(j + 1) * k * n];
                            // dA = dC · B'ᵀ; B' is bs (k×n) or bsᵀ when trans_b
                            T::gemm(false, !*trans_b, m, n, k, gs, bs, T::one(), &mut ga[j * m * k..(j + 1) * m * k]);
                        }
                    }
                    let gb = acc(&mut grads, *b, batch * k * n);
                    for j in 0..batch {
                        let gs = &g[j * m * n..(j + 1) * m * n];
                        let as_ = &av[j * m * k..(j + 1) * m * k];
                        let out = &mut gb[j * k * n..(j + 1) * k * n];
                        if *trans_b {
                            // B stored n×k: dB = dCᵀ · A
                            T::gemm(true, false, n, m, k, gs, as_, T::one(), out);
                        } else {
                            T::gemm(true, false, k, m, n, as_, gs, T::one(), out);
                        }
                    }
                }
                Op::Add { a, b } => {
                    for v in [*a, *b] {
                        let ga = acc(&mut grads, v, g.len());
                        for (x, &y) in ga.iter_mut().zip(&g) {
                            *x += y;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let bv = self.value(*b).data().to_vec();
                    let av = self.value(*a).data();
                    {
                        let gb = acc(&mut grads, *b, g.len());
                        for ((x, &y), &p) in gb.iter_mut().zip(&g).zip(av) {
                            *x += y * p;
                        }
                    }
                    let ga = acc(&mut grads, *a, g.len());
                    for ((x, &y), &q) in ga.iter_mut().zip(&g).zip(&bv) {
                        *x += y * q;
                    }
                }
                Op::MulConst { a, factor } => {
                    let ga = acc(&mut grads, *a, g.len());
                    for ((x, &y), &f) in ga.iter_mut().zip(&g).zip(factor) {
                        *x += y * f;
                    }
                }
                Op::Scale { a, s } => {
                    let ga = acc(&mut grads, *a, g.len());
                    for (x, &y) in ga.iter_mut().zip(&g) {
                        *x += y * *s;
                    }
                }
                Op::AddRow { a, bias } => {
                    let n = self.value(*bias).len();
                    {
                        let ga = acc(&mut grads, *a, g.len());
                        for (x, &y) in ga.iter_mut().zip(&g) {
                            *x += y;
                        }
                    }
                    let gb = acc(&mut grads, *bias, n);
                    for (i, &y) in g.iter().enumerate() {
                        gb[i % n] += y;
                    }
                }
                Op::Relu { a } => {
                    let y = self.nodes[i].value.as_ref().expect("value").data();
                    let ga = acc(&mut grads, *a, g.len());
                    for ((x, &d), &o) in ga.iter_mut().zip(&g).zip(y) {
                        if o > T::zero() {
                            *x += d;
                        }
                    }
                }
                Op::Tanh { a } => {
                    let y = self.nodes[i].value.as_ref().expect("value").data();
                    let ga = acc(&mut grads, *a, g.len());
                    for ((x, &d), &o) in ga.iter_mut().zip(&g).zip(y) {
                        *x += d * (T::one() - o * o);
                    }
                }
                Op::Sigmoid { a } => {
                    let y = self.nodes[i].value.as_ref().expect("value").data();
                    let ga = acc(&mut grads, *a, g.len());
                    for ((x, &d), &o) in ga.iter_mut().zip(&g).zip(y) {
                        *x += d * o * (T::one() - o);
                    }
                }
                Op::Softmax { a } => {
                    let yv = self.nodes[i].value.as_ref().expect("value");
                    let cols = yv.cols();
                    let ga = acc(&mut grads, *a, g.len());
                    for r in 0..yv.rows() {
                        let y = yv.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: T = y.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for c in 0..cols {
                            ga[r * cols + c] += y[c] * (gr[c] - dot);
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let d = self.value(*gamma).len();
                    let gam = self.value(*gamma).data();
                    let rows = rstd.len();
                    let dn = T::lit(d as f64);
                    {
                        let gg = acc(&mut grads, *gamma, d);
                        for r in 0..rows {
                            for c in 0..d {
                                gg[c] += g[r * d + c] * xhat[r * d + c];
                            }
                        }
                    }
                    {
                        let gb = acc(&mut grads, *beta, d);
                        for r in 0..rows {
                            for c in 0..d {
                                gb[c] += g[r * d + c];
                            }
                        }
                    }
                    let gx = acc(&mut grads, *x, rows * d);
                    for r in 0..rows {
                        let mut mean_dy = T::zero();
                        let mut mean_dyx = T::zero();
                        for c in 0..d {
                            let dy = g[r * d + c] * gam[c];
                            mean_dy += dy;
                            mean_dyx += dy * xhat[r * d + c];
                        }
                        mean_dy /= dn;
                        mean_dyx /= dn;
                        for c in 0..d {
                            let dy = g[r * d + c] * gam[c];
                            gx[r * d + c] += rstd[r] * (dy - mean_dy - xhat[r * d + c] * mean_dyx);
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    let tv = self.value(*table);
                    let d = tv.cols();
                    let gt = acc(&mut grads, *table, tv.len());
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[id * d + c] += g[r * d + c];
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, mask, probs } => {
                    let v = self.value(*logits).cols();
                    let up = g[0];
                    let gl = acc(&mut grads, *logits, probs.len());
                    for (r, (&t, &on)) in targets.iter().zip(mask).enumerate() {
                        if !on {
                            continue;
                        }
                        for c in 0..v {
                            gl[r * v + c] += up * probs[r * v + c];
                        }
                        gl[r * v + t] -= up;
                    }
                }
                Op::Gather { a, idx } => {
                    let n = self.value(*a).len();
                    let ga = acc(&mut grads, *a, n);
                    for (o, &src) in idx.iter().enumerate() {
                        ga[src] += g[o];
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        let gp = acc(&mut grads, p, n);
                        for (x, &y) in gp.iter_mut().zip(&g[off..off + n]) {
                            *x += y;
                        }
                        off += n;
                    }
                }
                Op::Reshape { a } => {
                    let ga = acc(&mut grads, *a, g.len());
                    for (x, &y) in ga.iter_mut().zip(&g) {
                        *x += y;
                    }
                }
                Op::Sum { a } => {
                    let n = self.value(*a).len();
                    let ga = acc(&mut grads, *a, n);
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            grads[i] = Some(g);
        }

        Ok(Gradients {
            node_grads: grads,
            shapes: (0..self.nodes.len()).map(|i| self.value(Var(i)).shape().to_vec()).collect(),
            param_nodes: self.param_vars.clone(),
        })
    }
}
