//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Each differentiable operation appends a node holding its output value and
//! enough saved context to produce input gradients. `backward` replays the
//! tape in reverse and accumulates `d(loss)/d(node)` for every node, so any
//! leaf bound from a parameter tensor gets its full gradient in one pass.
//!
//! The op set is deliberately fused at the level the models need (layer
//! norm, multi-head attention, softmax cross-entropy) rather than elementwise
//! primitives; every backward rule is covered by finite-difference tests.

use crate::error::{Error, Result};
use crate::numerics::tensor::{gelu, gelu_grad, mm_nn, mm_nt, mm_tn, softmax_slice, Element, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<E: Element> {
    Leaf,
    /// Forward identity, backward barrier: no gradient flows past it.
    Detach,
    /// `[m,k] . [k,n]`
    MatMul { a: Var, b: Var },
    /// `[m,k] . [n,k]^T` — rows-against-rows; used for logit heads and scores.
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    /// `[m,n] + [n]`, bias broadcast over rows.
    AddBias { x: Var, b: Var },
    Scale { x: Var, c: E },
    /// `[m,n] + const [n]` broadcast over rows; the constant gets no gradient.
    AddRowConst { x: Var },
    Gelu { x: Var },
    /// Row-wise layer norm with learned gain/shift; saves (mean, rstd) per row.
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(E, E)>,
    },
    /// Multi-head scaled dot-product attention over already-projected q/k/v.
    /// Saves the post-softmax attention probabilities for the backward pass;
    /// causally masked entries are exactly zero there, so the backward pass
    /// needs no mask of its own.
    Mha {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<E>,
    },
    /// Select rows by index from a rank-2 tensor (embedding lookup, masked
    /// position gather). Backward scatter-adds into the source rows.
    GatherRows { x: Var, rows: Vec<usize> },
    SelectRow { x: Var, row: usize },
    Reshape { x: Var },
    /// Cosine similarity of two same-shape tensors, flattened.
    Cosine { u: Var, v: Var },
    /// Build a rank-1 tensor out of scalar nodes.
    StackScalars { xs: Vec<Var> },
    /// `log sum exp` of a rank-1 tensor, max-subtracted.
    LogSumExp { x: Var },
    /// Mean cross-entropy of row-wise softmax against integer targets.
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<E>,
    },
    /// Sum of scalar nodes.
    AddN { xs: Vec<Var> },
}

struct Node<E: Element> {
    value: Tensor<E>,
    op: Op<E>,
}

/// Recorded computation graph for one forward pass.
///
/// The tape is cleared between training steps by dropping it; leaves are
/// re-bound from the parameter tensors on the next pass.
pub struct GradTape<E: Element> {
    nodes: Vec<Node<E>>,
}

/// Per-node gradients produced by [`GradTape::backward`].
pub struct Gradients<E: Element> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of the loss w.r.t. `v`, if any gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<E>> {
        self.grads[v.0].take()
    }
}

impl<E: Element> Default for GradTape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> GradTape<E> {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value computed at `v` during the forward pass.
    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Bind a tensor as a differentiable leaf.
    pub fn leaf(&mut self, t: Tensor<E>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Forward the value of `x`, blocking gradients from flowing into it.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, Op::Detach)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ad, bd) = (self.dims2(a, "matmul lhs"), self.dims2(b, "matmul rhs"));
        assert_eq!(ad.1, bd.0, "matmul: inner dims {} vs {}", ad.1, bd.0);
        let data = mm_nn(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            ad.0,
            ad.1,
            bd.1,
        );
        let value = Tensor::from_vec(vec![ad.0, bd.1], data).expect("matmul shape");
        self.push(value, Op::MatMul { a, b })
    }

    /// `a[m,k] . b[n,k]^T -> [m,n]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ad, bd) = (self.dims2(a, "matmul_nt lhs"), self.dims2(b, "matmul_nt rhs"));
        assert_eq!(ad.1, bd.1, "matmul_nt: inner dims {} vs {}", ad.1, bd.1);
        let data = mm_nt(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            ad.0,
            ad.1,
            bd.0,
        );
        let value = Tensor::from_vec(vec![ad.0, bd.0], data).expect("matmul_nt shape");
        self.push(value, Op::MatMulNt { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_dims(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_dims(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_dims(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xd = self.dims2(x, "add_bias input");
        let bv = &self.nodes[b.0].value;
        assert_eq!(bv.dims(), &[xd.1], "add_bias: bias dims {:?}", bv.dims());
        let mut data = self.nodes[x.0].value.data().to_vec();
        let bias = self.nodes[b.0].value.data().to_vec();
        for row in data.chunks_mut(xd.1) {
            for (o, &bj) in row.iter_mut().zip(&bias) {
                *o = *o + bj;
            }
        }
        let value = Tensor::from_vec(vec![xd.0, xd.1], data).expect("add_bias shape");
        self.push(value, Op::AddBias { x, b })
    }

    pub fn scale(&mut self, x: Var, c: E) -> Var {
        let value = self.nodes[x.0].value.map(|v| v * c);
        self.push(value, Op::Scale { x, c })
    }

    /// Add a constant row vector to every row of `x`. The constant may
    /// contain `-inf` sentinels; it receives no gradient.
    pub fn add_row_const(&mut self, x: Var, row: &[E]) -> Var {
        let xd = self.dims2(x, "add_row_const input");
        assert_eq!(row.len(), xd.1, "add_row_const: row width {}", row.len());
        let mut data = self.nodes[x.0].value.data().to_vec();
        for r in data.chunks_mut(xd.1) {
            for (o, &c) in r.iter_mut().zip(row) {
                *o = *o + c;
            }
        }
        let value = Tensor::from_vec(vec![xd.0, xd.1], data).expect("add_row_const shape");
        self.push(value, Op::AddRowConst { x })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(gelu);
        self.push(value, Op::Gelu { x })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: E) -> Var {
        let (rows, cols) = self.dims2(x, "layer_norm input");
        assert_eq!(self.nodes[gamma.0].value.dims(), &[cols]);
        assert_eq!(self.nodes[beta.0].value.dims(), &[cols]);
        let xv = self.nodes[x.0].value.data();
        let g = self.nodes[gamma.0].value.data();
        let b = self.nodes[beta.0].value.data();
        let inv_n = E::one() / E::from_f64(cols as f64);
        let mut out = vec![E::zero(); rows * cols];
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().fold(E::zero(), |a, &v| a + v) * inv_n;
            let var = row
                .iter()
                .fold(E::zero(), |a, &v| a + (v - mean) * (v - mean))
                * inv_n;
            let rstd = E::one() / (var + eps).sqrt();
            stats.push((mean, rstd));
            let orow = &mut out[r * cols..(r + 1) * cols];
            for j in 0..cols {
                orow[j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        let value = Tensor::from_vec(vec![rows, cols], out).expect("layer_norm shape");
        self.push(value, Op::LayerNorm { x, gamma, beta, stats })
    }

    /// Multi-head attention over projected inputs: `q [Lq,H]`, `k/v [Lk,H]`.
    /// `causal` masks key positions `j > i` (requires `Lq == Lk`).
    pub fn mha(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (lq, h) = self.dims2(q, "mha q");
        let (lk, hk) = self.dims2(k, "mha k");
        let (lv, hv) = self.dims2(v, "mha v");
        assert!(h == hk && h == hv, "mha: hidden dims differ");
        assert_eq!(lk, lv, "mha: key/value lengths differ");
        assert_eq!(h % heads, 0, "mha: hidden {} not divisible by heads {}", h, heads);
        if causal {
            assert_eq!(lq, lk, "mha: causal mask needs square attention");
        }
        let dh = h / heads;
        let scale = E::one() / E::from_f64((dh as f64).sqrt());
        let qv = self.nodes[q.0].value.data();
        let kv = self.nodes[k.0].value.data();
        let vv = self.nodes[v.0].value.data();
        let mut probs = vec![E::zero(); heads * lq * lk];
        let mut out = vec![E::zero(); lq * h];
        let mut scores = vec![E::zero(); lk];
        for head in 0..heads {
            let off = head * dh;
            for i in 0..lq {
                let q_row = &qv[i * h + off..i * h + off + dh];
                for j in 0..lk {
                    if causal && j > i {
                        scores[j] = E::neg_infinity();
                        continue;
                    }
                    let k_row = &kv[j * h + off..j * h + off + dh];
                    let mut s = E::zero();
                    for d in 0..dh {
                        s = s + q_row[d] * k_row[d];
                    }
                    scores[j] = s * scale;
                }
                let p = softmax_slice(&scores);
                let orow = &mut out[i * h + off..i * h + off + dh];
                for j in 0..lk {
                    if p[j] == E::zero() {
                        continue;
                    }
                    let v_row = &vv[j * h + off..j * h + off + dh];
                    for d in 0..dh {
                        orow[d] = orow[d] + p[j] * v_row[d];
                    }
                }
                probs[(head * lq + i) * lk..(head * lq + i + 1) * lk].copy_from_slice(&p);
            }
        }
        let value = Tensor::from_vec(vec![lq, h], out).expect("mha shape");
        self.push(value, Op::Mha { q, k, v, heads, probs })
    }

    /// Gather rows of a rank-2 tensor by index.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let (n, cols) = self.dims2(x, "gather_rows input");
        let xv = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            assert!(r < n, "gather_rows: row {} out of {}", r, n);
            data.extend_from_slice(&xv[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::from_vec(vec![rows.len(), cols], data).expect("gather shape");
        self.push(value, Op::GatherRows { x, rows: rows.to_vec() })
    }

    /// Row `row` of a rank-2 tensor as a rank-1 vector.
    pub fn select_row(&mut self, x: Var, row: usize) -> Var {
        let (n, _) = self.dims2(x, "select_row input");
        assert!(row < n, "select_row: row {} out of {}", row, n);
        let data = self.nodes[x.0].value.row(row).to_vec();
        let value = Tensor::vector(data);
        self.push(value, Op::SelectRow { x, row })
    }

    pub fn reshape(&mut self, x: Var, dims: Vec<usize>) -> Var {
        let value = self.nodes[x.0]
            .value
            .reshaped(dims)
            .expect("reshape: element count mismatch");
        self.push(value, Op::Reshape { x })
    }

    /// `v [d] . w [d,n] -> [n]` convenience built from reshape + matmul.
    pub fn vec_mat(&mut self, v: Var, w: Var) -> Var {
        let d = self.nodes[v.0].value.len();
        let row = self.reshape(v, vec![1, d]);
        let prod = self.matmul(row, w);
        let n = self.nodes[prod.0].value.dims()[1];
        self.reshape(prod, vec![n])
    }

    /// Cosine similarity of two same-shape tensors (flattened).
    /// Zero-norm inputs are a numeric error.
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        let (uv, vv) = (&self.nodes[u.0].value, &self.nodes[v.0].value);
        if uv.dims() != vv.dims() {
            return Err(Error::shape(format!(
                "cosine: dims {:?} vs {:?}",
                uv.dims(),
                vv.dims()
            )));
        }
        let nu = uv.norm();
        let nv = vv.norm();
        if nu == E::zero() || nv == E::zero() {
            return Err(Error::numeric("cosine: zero-norm input"));
        }
        let dot = uv
            .data()
            .iter()
            .zip(vv.data())
            .fold(E::zero(), |acc, (&a, &b)| acc + a * b);
        let value = Tensor::scalar(dot / (nu * nv));
        Ok(self.push(value, Op::Cosine { u, v }))
    }

    pub fn stack_scalars(&mut self, xs: &[Var]) -> Var {
        let data: Vec<E> = xs
            .iter()
            .map(|v| {
                debug_assert_eq!(self.nodes[v.0].value.len(), 1, "stack_scalars: non-scalar input");
                self.nodes[v.0].value.item()
            })
            .collect();
        let value = Tensor::vector(data);
        self.push(value, Op::StackScalars { xs: xs.to_vec() })
    }

    pub fn logsumexp(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.data();
        assert!(!xv.is_empty(), "logsumexp: empty input");
        let max = xv.iter().cloned().fold(E::neg_infinity(), E::max);
        let sum = xv.iter().fold(E::zero(), |a, &v| a + (v - max).exp());
        let value = Tensor::scalar(max + sum.ln());
        self.push(value, Op::LogSumExp { x })
    }

    /// Mean softmax cross-entropy of `logits [n, v]` against `targets [n]`.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (rows, v) = self.dims2(logits, "softmax_xent logits");
        assert_eq!(rows, targets.len(), "softmax_xent: target count");
        assert!(rows > 0, "softmax_xent: empty batch");
        let lv = self.nodes[logits.0].value.data();
        let mut probs = vec![E::zero(); rows * v];
        let mut total = E::zero();
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < v, "softmax_xent: target {} out of {}", t, v);
            let row = &lv[r * v..(r + 1) * v];
            let p = softmax_slice(row);
            total = total - p[t].ln();
            probs[r * v..(r + 1) * v].copy_from_slice(&p);
        }
        let value = Tensor::scalar(total / E::from_f64(rows as f64));
        self.push(
            value,
            Op::SoftmaxXent { logits, targets: targets.to_vec(), probs },
        )
    }

    /// Sum of scalar nodes.
    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "add_n: empty input");
        let total = xs
            .iter()
            .fold(E::zero(), |a, v| a + self.nodes[v.0].value.item());
        let value = Tensor::scalar(total);
        self.push(value, Op::AddN { xs: xs.to_vec() })
    }

    /// Reverse pass from a scalar loss node. Returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::shape("backward: loss must be scalar"));
        }
        if !lv.all_finite() {
            return Err(Error::numeric("backward: non-finite loss"));
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(lv.dims().to_vec(), vec![E::one()]).unwrap());

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::Detach => {
                if let Op::Leaf = self.nodes[i].op {
                    // keep the leaf gradient for the caller
                    grads[i] = Some(g.clone());
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = self.dims2(*a, "");
                let n = self.nodes[b.0].value.dims()[1];
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                // dA = g . B^T ; dB = A^T . g
                let da = mm_nt(g.data(), bv, m, n, k);
                let db = mm_tn(av, g.data(), m, k, n);
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = self.dims2(*a, "");
                let n = self.nodes[b.0].value.dims()[0];
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                // c = A . B^T: dA = g . B ; dB = g^T . A
                let da = mm_nn(g.data(), bv, m, n, k);
                let db = mm_tn(g.data(), av, m, n, k);
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.data());
                self.accumulate(grads, *b, g.data());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.data());
                let neg: Vec<E> = g.data().iter().map(|&x| -x).collect();
                self.accumulate(grads, *b, &neg);
            }
            Op::Mul { a, b } => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let da: Vec<E> = g.data().iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect();
                let db: Vec<E> = g.data().iter().zip(av).map(|(&gi, &ai)| gi * ai).collect();
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::AddBias { x, b } => {
                self.accumulate(grads, *x, g.data());
                let cols = self.nodes[b.0].value.len();
                let mut db = vec![E::zero(); cols];
                for row in g.data().chunks(cols) {
                    for (d, &gi) in db.iter_mut().zip(row) {
                        *d = *d + gi;
                    }
                }
                self.accumulate(grads, *b, &db);
            }
            Op::Scale { x, c } => {
                let dx: Vec<E> = g.data().iter().map(|&gi| gi * *c).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::AddRowConst { x } => {
                self.accumulate(grads, *x, g.data());
            }
            Op::Gelu { x } => {
                let xv = self.nodes[x.0].value.data();
                let dx: Vec<E> = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &xi)| gi * gelu_grad(xi))
                    .collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let (rows, cols) = self.dims2(*x, "");
                let xv = self.nodes[x.0].value.data();
                let gam = self.nodes[gamma.0].value.data();
                let inv_n = E::one() / E::from_f64(cols as f64);
                let mut dx = vec![E::zero(); rows * cols];
                let mut dgamma = vec![E::zero(); cols];
                let mut dbeta = vec![E::zero(); cols];
                for r in 0..rows {
                    let (mean, rstd) = stats[r];
                    let xrow = &xv[r * cols..(r + 1) * cols];
                    let grow = &g.data()[r * cols..(r + 1) * cols];
                    let mut sum_dxhat = E::zero();
                    let mut sum_dxhat_xhat = E::zero();
                    for j in 0..cols {
                        let xhat = (xrow[j] - mean) * rstd;
                        let dxhat = grow[j] * gam[j];
                        dgamma[j] = dgamma[j] + grow[j] * xhat;
                        dbeta[j] = dbeta[j] + grow[j];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                    }
                    let mean_dxhat = sum_dxhat * inv_n;
                    let mean_dxhat_xhat = sum_dxhat_xhat * inv_n;
                    let dxrow = &mut dx[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        let xhat = (xrow[j] - mean) * rstd;
                        let dxhat = grow[j] * gam[j];
                        dxrow[j] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                self.accumulate(grads, *x, &dx);
                self.accumulate(grads, *gamma, &dgamma);
                self.accumulate(grads, *beta, &dbeta);
            }
            Op::Mha { q, k, v, heads, probs } => {
                let (lq, h) = self.dims2(*q, "");
                let lk = self.nodes[k.0].value.dims()[0];
                let dh = h / heads;
                let scale = E::one() / E::from_f64((dh as f64).sqrt());
                let qv = self.nodes[q.0].value.data();
                let kv = self.nodes[k.0].value.data();
                let vv = self.nodes[v.0].value.data();
                let mut dq = vec![E::zero(); lq * h];
                let mut dk = vec![E::zero(); lk * h];
                let mut dv = vec![E::zero(); lk * h];
                let mut dp = vec![E::zero(); lk];
                for head in 0..*heads {
                    let off = head * dh;
                    for i in 0..lq {
                        let p = &probs[(head * lq + i) * lk..(head * lq + i + 1) * lk];
                        let dctx = &g.data()[i * h + off..i * h + off + dh];
                        let mut dot_sum = E::zero();
                        for j in 0..lk {
                            let v_row = &vv[j * h + off..j * h + off + dh];
                            let mut s = E::zero();
                            for d in 0..dh {
                                s = s + dctx[d] * v_row[d];
                            }
                            dp[j] = s;
                            dot_sum = dot_sum + p[j] * s;
                        }
                        let q_row = &qv[i * h + off..i * h + off + dh];
                        for j in 0..lk {
                            if p[j] == E::zero() {
                                continue;
                            }
                            let ds = p[j] * (dp[j] - dot_sum) * scale;
                            let k_row = &kv[j * h + off..j * h + off + dh];
                            let dq_row = &mut dq[i * h + off..i * h + off + dh];
                            for d in 0..dh {
                                dq_row[d] = dq_row[d] + ds * k_row[d];
                            }
                            let dk_row = &mut dk[j * h + off..j * h + off + dh];
                            for d in 0..dh {
                                dk_row[d] = dk_row[d] + ds * q_row[d];
                            }
                            let dv_row = &mut dv[j * h + off..j * h + off + dh];
                            for d in 0..dh {
                                dv_row[d] = dv_row[d] + p[j] * dctx[d];
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, &dq);
                self.accumulate(grads, *k, &dk);
                self.accumulate(grads, *v, &dv);
            }
            Op::GatherRows { x, rows } => {
                let cols = self.nodes[x.0].value.dims()[1];
                let n = self.nodes[x.0].value.dims()[0];
                let mut dx = vec![E::zero(); n * cols];
                for (out_r, &src_r) in rows.iter().enumerate() {
                    let grow = &g.data()[out_r * cols..(out_r + 1) * cols];
                    let drow = &mut dx[src_r * cols..(src_r + 1) * cols];
                    for j in 0..cols {
                        drow[j] = drow[j] + grow[j];
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::SelectRow { x, row } => {
                let (n, cols) = self.dims2(*x, "");
                let mut dx = vec![E::zero(); n * cols];
                dx[row * cols..(row + 1) * cols].copy_from_slice(g.data());
                self.accumulate(grads, *x, &dx);
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, g.data());
            }
            Op::Cosine { u, v } => {
                let gs = g.item();
                let uv = self.nodes[u.0].value.data();
                let vv = self.nodes[v.0].value.data();
                let nu = self.nodes[u.0].value.norm();
                let nv = self.nodes[v.0].value.norm();
                let cos = self.nodes[i].value.item();
                let inv = E::one() / (nu * nv);
                let du: Vec<E> = uv
                    .iter()
                    .zip(vv)
                    .map(|(&ui, &vi)| gs * (vi * inv - cos * ui / (nu * nu)))
                    .collect();
                let dv: Vec<E> = uv
                    .iter()
                    .zip(vv)
                    .map(|(&ui, &vi)| gs * (ui * inv - cos * vi / (nv * nv)))
                    .collect();
                self.accumulate(grads, *u, &du);
                self.accumulate(grads, *v, &dv);
            }
            Op::StackScalars { xs } => {
                for (j, x) in xs.iter().enumerate() {
                    self.accumulate(grads, *x, &[g.data()[j]]);
                }
            }
            Op::LogSumExp { x } => {
                let gs = g.item();
                let out = self.nodes[i].value.item();
                let xv = self.nodes[x.0].value.data();
                let dx: Vec<E> = xv.iter().map(|&v| gs * (v - out).exp()).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::SoftmaxXent { logits, targets, probs } => {
                let gs = g.item();
                let rows = targets.len();
                let v = self.nodes[logits.0].value.dims()[1];
                let inv_n = E::one() / E::from_f64(rows as f64);
                let mut dl = vec![E::zero(); rows * v];
                for (r, &t) in targets.iter().enumerate() {
                    let prow = &probs[r * v..(r + 1) * v];
                    let drow = &mut dl[r * v..(r + 1) * v];
                    for j in 0..v {
                        let indicator = if j == t { E::one() } else { E::zero() };
                        drow[j] = gs * (prow[j] - indicator) * inv_n;
                    }
                }
                self.accumulate(grads, *logits, &dl);
            }
            Op::AddN { xs } => {
                for x in xs {
                    self.accumulate(grads, *x, g.data());
                }
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<E>>], v: Var, delta: &[E]) {
        let slot = &mut grads[v.0];
        match slot {
            Some(t) => {
                for (o, &d) in t.data_mut().iter_mut().zip(delta) {
                    *o = *o + d;
                }
            }
            None => {
                let dims = self.nodes[v.0].value.dims().to_vec();
                debug_assert_eq!(dims.iter().product::<usize>(), delta.len());
                *slot = Some(Tensor::from_vec(dims, delta.to_vec()).expect("grad shape"));
            }
        }
    }

    fn dims2(&self, v: Var, what: &str) -> (usize, usize) {
        let d = self.nodes[v.0].value.dims();
        assert_eq!(d.len(), 2, "{}: expected rank 2, got {:?}", what, d);
        (d[0], d[1])
    }

    fn binary_same_dims(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(E, E) -> E,
        op: Op<E>,
    ) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.dims(), bv.dims(), "{}: dims {:?} vs {:?}", what, av.dims(), bv.dims());
        let data: Vec<E> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_vec(av.dims().to_vec(), data).expect("binary shape");
        self.push(value, op)
    }
}
