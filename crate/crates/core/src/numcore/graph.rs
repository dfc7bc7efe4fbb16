//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive applied to its nodes in creation
//! order, which is already a topological order. [`Graph::backward`] walks the
//! list in reverse and accumulates adjoints into every node that requires a
//! gradient. Graphs are cheap to build and are meant to be thrown away after
//! each batch.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::scalar::{gemm, Scalar};
use crate::numcore::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Affine {
        a: Var,
        scale: S,
    },
    Sigmoid {
        a: Var,
    },
    Log {
        a: Var,
    },
    Exp {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Clamp {
        a: Var,
        lo: S,
        hi: S,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    MaskFill {
        a: Var,
        keep: Vec<bool>,
    },
    Dropout {
        a: Var,
        scale: Vec<S>,
    },
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    GatherRows {
        a: Var,
        rows: Vec<usize>,
    },
    SumLast {
        a: Var,
    },
    ScaleRows {
        a: Var,
        weights: Vec<S>,
    },
    WeightedSum {
        a: Var,
        weights: Vec<S>,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Accumulated adjoints of one backward pass.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to `var`, if it required one.
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::dim(op, format!("incompatible shapes {a:?} and {b:?}"))
}

/// True when `b` equals `a` or is a trailing suffix of it (row broadcast).
fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
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

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a trainable parameter.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    /// Records a constant.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `a[..., k] · b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k.max(1);
        let mut out = vec![S::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let mut shape = sa.clone();
        *shape.last_mut().expect("non-empty") = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Batched product `a[G, m, k] · b[G, k, n]`, or `a · bᵀ` with
    /// `b[G, n, k]` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let (groups, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let mut out = vec![S::zero(); groups * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for g in 0..groups {
                gemm(
                    m,
                    k,
                    n,
                    &av[g * m * k..(g + 1) * m * k],
                    false,
                    &bv[g * k * n..(g + 1) * k * n],
                    trans_b,
                    &mut out[g * m * n..(g + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![groups, m, n], out)?,
            Op::BatchMatMul {
                a,
                b,
                groups,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (va, vb) = (self.value(a), self.value(b));
        if !broadcastable(va.shape(), vb.shape()) {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        let w = vb.len().max(1);
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb.data()[i % w]))
            .collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    /// Elementwise sum; `b` may be a trailing-suffix broadcast of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Elementwise product; `b` may be a trailing-suffix broadcast of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: S, shift: S) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| scale * x + shift).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Affine { a, scale }, rg)
    }

    pub fn scale(&mut self, a: Var, scale: S) -> Var {
        self.affine(a, scale, S::zero())
    }

    fn unary(&self, a: Var, f: impl Fn(S) -> S) -> Tensor<S> {
        let v = self.value(a);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.unary(a, |x| {
            if x >= S::zero() {
                S::one() / (S::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (S::one() + e)
            }
        });
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid { a }, rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|x| !(**x > S::zero())) {
            return Err(Error::numeric("log", format!("argument {bad} outside (0, inf)")));
        }
        let out = self.unary(a, |x| x.ln());
        let rg = self.rg(a);
        Ok(self.push(out, Op::Log { a }, rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, |x| x.exp());
        if !out.all_finite() {
            return Err(Error::numeric("exp", "result overflowed"));
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::Exp { a }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.unary(a, |x| if x > S::zero() { x } else { S::zero() });
        let rg = self.rg(a);
        self.push(out, Op::Relu { a }, rg)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    /// NaN passes through unchanged.
    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Var {
        let out = self.unary(a, |x| if x < lo { lo } else if x > hi { hi } else { x });
        let rg = self.rg(a);
        self.push(out, Op::Clamp { a, lo, hi }, rg)
    }

    /// Softmax over the last axis. Entries equal to `-inf` get probability
    /// zero; a row that is entirely `-inf` maps to all zeros.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let w = v.last_dim();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(w.max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Softmax { a }, rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.last_dim();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err("layer_norm", vx.shape(), self.shape(gamma)));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = vx.rows();
        let nf = S::from_usize(n).expect("usize");
        let mut out = vec![S::zero(); vx.len()];
        let mut xhat = vec![S::zero(); vx.len()];
        let mut inv_std = vec![S::zero(); rows];
        for r in 0..rows {
            let row = &vx.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<S>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
            let is = S::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = g[j] * h + b[j];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row lookup into a `[rows, d]` table; output shape is
    /// `prefix ++ [d]` where `prefix` multiplies out to `indices.len()`.
    pub fn embedding(&mut self, table: Var, indices: &[usize], prefix: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || prefix.iter().product::<usize>() != indices.len() {
            return Err(Error::dim(
                "embedding",
                format!("table {st:?}, {} indices, prefix {prefix:?}", indices.len()),
            ));
        }
        let (rows, d) = (st[0], st[1]);
        if let Some(bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::dim(
                "embedding",
                format!("index {bad} out of range for {rows} rows"),
            ));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Replaces every entry whose `keep` flag is false by `fill`.
    pub fn masked_fill(&mut self, a: Var, keep: Vec<bool>, fill: S) -> Result<Var> {
        let v = self.value(a);
        if keep.len() != v.len() {
            return Err(Error::dim(
                "masked_fill",
                format!("mask of {} for tensor of {}", keep.len(), v.len()),
            ));
        }
        let data = v
            .data()
            .iter()
            .zip(&keep)
            .map(|(&x, &k)| if k { x } else { fill })
            .collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::MaskFill { a, keep }, rg))
    }

    /// Causal attention mask on scores `[G, T, T]`: query `i` may attend to
    /// key `j` only when `j <= i` and `key_valid[g * T + j]` holds. Masked
    /// scores become `-inf`.
    pub fn causal_mask(&mut self, scores: Var, key_valid: &[bool]) -> Result<Var> {
        let s = self.shape(scores).to_vec();
        if s.len() != 3 || s[1] != s[2] || key_valid.len() != s[0] * s[1] {
            return Err(Error::dim(
                "causal_mask",
                format!("scores {s:?} with {} key flags", key_valid.len()),
            ));
        }
        let (groups, t) = (s[0], s[1]);
        let mut keep = vec![false; groups * t * t];
        for g in 0..groups {
            for i in 0..t {
                for j in 0..=i {
                    keep[(g * t + i) * t + j] = key_valid[g * t + j];
                }
            }
        }
        self.masked_fill(scores, keep, S::neg_infinity())
    }

    /// Inverted dropout. Identity when `train` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Usage(format!("dropout rate {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep_scale = S::lit(1.0 / (1.0 - p));
        let v = self.value(a);
        let scale: Vec<S> = (0..v.len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    S::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = v.data().iter().zip(&scale).map(|(&x, &s)| x * s).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Dropout { a, scale }, rg))
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&x| x >= s.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::dim("permute", format!("axes {axes:?} for shape {s:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&x| s[x]).collect();
        let data = permute_data(self.value(a).data(), &s, axes);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape { a }, rg))
    }

    /// Selects rows (over the flattened leading axes) of `a`.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let (w, n) = (v.last_dim(), v.rows());
        if let Some(bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::dim("gather_rows", format!("row {bad} of {n}")));
        }
        let mut out = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            out.extend_from_slice(v.row(r));
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![rows.len(), w], out)?,
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let w = v.last_dim();
        let data = v.data().chunks(w.max(1)).map(|r| r.iter().copied().sum()).collect();
        let mut shape = v.shape().to_vec();
        shape.pop();
        let out = Tensor::new(shape, data).expect("consistent");
        let rg = self.rg(a);
        self.push(out, Op::SumLast { a }, rg)
    }

    /// Multiplies each row (over flattened leading axes) by a constant weight.
    pub fn scale_rows(&mut self, a: Var, weights: &[S]) -> Result<Var> {
        let v = self.value(a);
        let w = v.last_dim();
        if weights.len() != v.rows() {
            return Err(Error::dim(
                "scale_rows",
                format!("{} weights for {} rows", weights.len(), v.rows()),
            ));
        }
        let data = v
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * weights[i / w.max(1)])
            .collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::ScaleRows {
                a,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Scalar `Σ weights[i] * a[i]` over all elements.
    pub fn weighted_sum(&mut self, a: Var, weights: &[S]) -> Result<Var> {
        let v = self.value(a);
        if weights.len() != v.len() {
            return Err(Error::dim(
                "weighted_sum",
                format!("{} weights for {} values", weights.len(), v.len()),
            ));
        }
        let total = v.data().iter().zip(weights).map(|(&x, &w)| x * w).sum();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                a,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        self.weighted_sum(a, &vec![S::one(); n]).expect("matching length")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let w = S::one() / S::from_usize(n.max(1)).expect("usize");
        self.weighted_sum(a, &vec![w; n]).expect("matching length")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (&node.op, g) {
                    (Op::Leaf, Some(g)) if node.requires_grad => {
                        Some(Tensor::new(node.value.shape().to_vec(), g).expect("shape"))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    let slot = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, bv, true, slot, true);
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    let slot = slot(grads, *b, k * n);
                    gemm(k, m, n, av, true, g, false, slot, true);
                }
            }
            Op::BatchMatMul {
                a,
                b,
                groups,
                m,
                k,
                n,
                trans_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let slot = slot(grads, *a, groups * m * k);
                    for gi in 0..*groups {
                        let dc = &g[gi * m * n..(gi + 1) * m * n];
                        let bg = &bv[gi * k * n..(gi + 1) * k * n];
                        let da = &mut slot[gi * m * k..(gi + 1) * m * k];
                        // C = A·B  => dA = dC·Bᵀ ; C = A·Bᵀ => dA = dC·B
                        gemm(m, n, k, dc, false, bg, !*trans_b, da, true);
                    }
                }
                if self.rg(*b) {
                    let slot = slot(grads, *b, groups * k * n);
                    for gi in 0..*groups {
                        let dc = &g[gi * m * n..(gi + 1) * m * n];
                        let ag = &av[gi * m * k..(gi + 1) * m * k];
                        let db = &mut slot[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, dc, true, ag, false, db, true);
                        } else {
                            gemm(k, m, n, ag, true, dc, false, db, true);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if self.rg(*b) {
                    let w = self.value(*b).len();
                    let slot = slot(grads, *b, w);
                    for (i, &gv) in g.iter().enumerate() {
                        slot[i % w] += gv;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let w = bv.len();
                if self.rg(*a) {
                    let slot = slot(grads, *a, g.len());
                    for (i, &gv) in g.iter().enumerate() {
                        slot[i] += gv * bv[i % w];
                    }
                }
                if self.rg(*b) {
                    let slot = slot(grads, *b, w);
                    for (i, &gv) in g.iter().enumerate() {
                        slot[i % w] += gv * av[i];
                    }
                }
            }
            Op::Affine { a, scale } => {
                let slot = slot(grads, *a, g.len());
                for (s, &gv) in slot.iter_mut().zip(g) {
                    *s += gv * *scale;
                }
            }
            Op::Sigmoid { a } => {
                let slot = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    slot[i] += g[i] * y[i] * (S::one() - y[i]);
                }
            }
            Op::Log { a } => {
                let x = self.value(*a).data();
                let slot = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    slot[i] += g[i] / x[i];
                }
            }
            Op::Exp { a } => {
                let slot = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    slot[i] += g[i] * y[i];
                }
            }
            Op::Relu { a } => {
                let x = self.value(*a).data();
                let slot = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    if x[i] > S::zero() {
                        slot[i] += g[i];
                    }
                }
            }
            Op::Clamp { a, lo, hi } => {
                let x = self.value(*a).data();
                let slot = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    if x[i] >= *lo && x[i] <= *hi {
                        slot[i] += g[i];
                    }
                }
            }
            Op::Softmax { a } => {
                let w = node.value.last_dim().max(1);
                let slot = slot(grads, *a, g.len());
                for ((yr, gr), sr) in y.chunks(w).zip(g.chunks(w)).zip(slot.chunks_mut(w)) {
                    let inner: S = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..w {
                        sr[j] += yr[j] * (gr[j] - inner);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = node.value.last_dim();
                let rows = inv_std.len();
                let gv = self.value(*gamma).data();
                if self.rg(*beta) {
                    let slot = slot(grads, *beta, n);
                    for r in 0..rows {
                        for j in 0..n {
                            slot[j] += g[r * n + j];
                        }
                    }
                }
                if self.rg(*gamma) {
                    let slot = slot(grads, *gamma, n);
                    for r in 0..rows {
                        for j in 0..n {
                            slot[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if self.rg(*x) {
                    let nf = S::from_usize(n).expect("usize");
                    let slot = slot(grads, *x, rows * n);
                    let mut dxhat = vec![S::zero(); n];
                    for r in 0..rows {
                        let mut s1 = S::zero();
                        let mut s2 = S::zero();
                        for j in 0..n {
                            let d = g[r * n + j] * gv[j];
                            dxhat[j] = d;
                            s1 += d;
                            s2 += d * xhat[r * n + j];
                        }
                        let c = inv_std[r] / nf;
                        for j in 0..n {
                            slot[r * n + j] += c * (nf * dxhat[j] - s1 - xhat[r * n + j] * s2);
                        }
                    }
                }
            }
            Op::Embedding { table, indices } => {
                let d = self.value(*table).last_dim();
                let rows = self.value(*table).rows();
                let slot = slot(grads, *table, rows * d);
                for (p, &i) in indices.iter().enumerate() {
                    add_into(&mut slot[i * d..(i + 1) * d], &g[p * d..(p + 1) * d]);
                }
            }
            Op::MaskFill { a, keep } => {
                let slot = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    if keep[i] {
                        slot[i] += g[i];
                    }
                }
            }
            Op::Dropout { a, scale } => {
                let slot = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    slot[i] += g[i] * scale[i];
                }
            }
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let back = permute_data(g, node.value.shape(), &inverse);
                add_into(slot(grads, *a, g.len()), &back);
            }
            Op::Reshape { a } => {
                add_into(slot(grads, *a, g.len()), g);
            }
            Op::GatherRows { a, rows } => {
                let w = node.value.last_dim();
                let n = self.value(*a).len();
                let slot = slot(grads, *a, n);
                for (p, &r) in rows.iter().enumerate() {
                    add_into(&mut slot[r * w..(r + 1) * w], &g[p * w..(p + 1) * w]);
                }
            }
            Op::SumLast { a } => {
                let w = self.value(*a).last_dim().max(1);
                let slot = slot(grads, *a, g.len() * w);
                for (i, s) in slot.iter_mut().enumerate() {
                    *s += g[i / w];
                }
            }
            Op::ScaleRows { a, weights } => {
                let w = node.value.last_dim().max(1);
                let slot = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    slot[i] += g[i] * weights[i / w];
                }
            }
            Op::WeightedSum { a, weights } => {
                let slot = slot(grads, *a, weights.len());
                for (s, &w) in slot.iter_mut().zip(weights) {
                    *s += g[0] * w;
                }
            }
        }
    }
}

fn slot<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, len: usize) -> &mut Vec<S> {
    grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable softmax with max subtraction. `-inf` entries get
/// zero mass; an all-`-inf` row becomes zeros.
pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() {
        row.iter_mut().for_each(|v| *v = S::zero());
        return;
    }
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn permute_data<S: Scalar>(data: &[S], shape: &[usize], axes: &[usize]) -> Vec<S> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}
