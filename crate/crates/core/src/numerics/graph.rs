//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and `backward` walks it once in reverse. Most ops work
//! on matrices (`rows × cols`, leading dims collapsed). Sequence batches are
//! stored as stacked rows with [`Segment`] ranges marking each sequence, which
//! keeps projections as one large GEMM while attention stays per sequence.

use rand::Rng;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a parameter in whatever store the caller keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A contiguous run of rows belonging to one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    /// Packs consecutive lengths into segments.
    pub fn from_lengths(lengths: &[usize]) -> Vec<Segment> {
        let mut start = 0;
        lengths
            .iter()
            .map(|&len| {
                let s = Segment { start, len };
                start += len;
                s
            })
            .collect()
    }
}

/// How a cross-entropy loss is reduced over counted positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<f32>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    ReplaceRows {
        x: Var,
        fill: Var,
        rows: Vec<usize>,
    },
    Dropout {
        x: Var,
        keep: Vec<f32>,
    },
    Attention(Box<AttentionCache>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        smoothing: f32,
        scale: f32,
        probs: Vec<f32>,
    },
    Sum(Var),
    SegmentMean {
        x: Var,
        segments: Vec<Segment>,
    },
}

struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    q_segments: Vec<Segment>,
    kv_segments: Vec<Segment>,
    heads: usize,
    /// Softmax weights per (segment, head) block, each `lq × lk`, concatenated.
    probs: Vec<f32>,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::ReplaceRows { .. } => "replace_rows",
            Op::Dropout { .. } => "dropout",
            Op::Attention(_) => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::SegmentMean { .. } => "segment_mean",
        }
    }
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    needs_grad: bool,
}

/// Computation tape. Parameters are borrowed, not copied.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to an arbitrary node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    /// Per-parameter gradients (summed over every binding of the same id).
    pub fn into_params(mut self, n_params: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();
        for (pid, node) in std::mem::take(&mut self.params) {
            if let Some(g) = self.by_node[node].take() {
                match &mut out[pid.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        out
    }
}

fn mat_dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input that receives a gradient (used by gradient checks).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a trainable parameter by reference.
    pub fn param(&mut self, id: ParamId, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter that is read but not trained.
    pub fn frozen(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = mat_dims(self.value(a));
        let bt = self.value(b);
        assert_eq!(bt.shape().len(), 2, "matmul rhs must be 2-D");
        assert_eq!(bt.shape()[0], k, "matmul inner dims {k} vs {}", bt.shape()[0]);
        let n = bt.shape()[1];
        let mut out = Tensor::zeros([m, n]);
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            bt.data(),
            false,
            out.data_mut(),
            false,
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `x + b` with `b` broadcast across rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        assert_eq!(bv.len(), xv.cols(), "bias length");
        let mut out = xv.clone();
        let c = out.cols();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(out, Op::AddBias(x, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "add shapes");
        let mut out = av.clone();
        out.add_assign(bv);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "mul shapes");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x.max(0.0)).collect();
        let out = Tensor::new(av.shape().to_vec(), data);
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x.tanh()).collect();
        let out = Tensor::new(av.shape().to_vec(), data);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f32 = 1e-5;
        let xv = self.value(x);
        let (r, c) = mat_dims(xv);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert_eq!(g.len(), c);
        assert_eq!(b.len(), c);
        let mut out = Tensor::zeros(xv.shape().to_vec());
        let mut rstd = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd.push(rs);
            let o = out.row_mut(i);
            for j in 0..c {
                o[j] = (row[j] - mean) * rs * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
            },
            ng,
        )
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let (n, c) = mat_dims(tv);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            assert!(id < n, "gather index {id} out of range {n}");
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new([ids.len(), c], data);
        let ng = self.ng(table);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (r, ca) = mat_dims(av);
        let (rb, cb) = mat_dims(bv);
        assert_eq!(r, rb, "concat_cols row count");
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let out = Tensor::new([r, ca + cb], data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::ConcatCols(a, b), ng)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        if parts.len() == 1 {
            return parts[0];
        }
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), c, "concat_rows column count");
            data.extend_from_slice(pv.data());
        }
        let r = data.len() / c;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new([r, c], data), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Replaces the listed rows of `x` with the single row `fill`.
    pub fn replace_rows(&mut self, x: Var, fill: Var, rows: &[usize]) -> Var {
        let mut rows = rows.to_vec();
        rows.sort_unstable();
        rows.dedup();
        let mut out = self.value(x).clone();
        let fv = self.value(fill);
        assert_eq!(fv.len(), out.cols(), "fill width");
        for &r in &rows {
            out.row_mut(r).copy_from_slice(fv.data());
        }
        let ng = self.ng(x) || self.ng(fill);
        self.push(
            out,
            Op::ReplaceRows { x, fill, rows },
            ng,
        )
    }

    /// Inverted dropout. `rate == 0` returns `x` unchanged.
    pub fn dropout(&mut self, x: Var, rate: f32, rng: &mut impl Rng) -> Var {
        if rate <= 0.0 {
            return x;
        }
        assert!(rate < 1.0, "dropout rate must be < 1");
        let xv = self.value(x);
        let s = 1.0 / (1.0 - rate);
        let keep: Vec<f32> = (0..xv.len())
            .map(|_| if rng.random::<f32>() < rate { 0.0 } else { s })
            .collect();
        let data = xv.data().iter().zip(&keep).map(|(a, k)| a * k).collect();
        let out = Tensor::new(xv.shape().to_vec(), data);
        let ng = self.ng(x);
        self.push(out, Op::Dropout { x, keep }, ng)
    }

    /// Multi-head scaled dot-product attention over segmented sequences.
    ///
    /// `q` is `Nq × d`, `k`/`v` are `Nk × d`; segment `i` of `q` attends only
    /// to segment `i` of `k`/`v`. With `causal`, query `t` sees keys `≤ t`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        q_segments: &[Segment],
        kv_segments: &[Segment],
        heads: usize,
        causal: bool,
    ) -> Var {
        assert_eq!(q_segments.len(), kv_segments.len(), "segment counts");
        let (nq, d) = mat_dims(self.value(q));
        let (nk, dk) = mat_dims(self.value(k));
        assert_eq!(d, dk, "q/k width");
        assert_eq!(mat_dims(self.value(v)), (nk, d), "v shape");
        assert!(heads > 0 && d % heads == 0, "d={d} not divisible by heads={heads}");
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();

        let block_total: usize = q_segments
            .iter()
            .zip(kv_segments)
            .map(|(a, b)| a.len * b.len)
            .sum::<usize>()
            * heads;
        let mut probs = vec![0.0f32; block_total];
        let mut out = Tensor::zeros([nq, d]);
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut off = 0;
        for (qs, ks) in q_segments.iter().zip(kv_segments) {
            let (lq, lk) = (qs.len, ks.len);
            assert!(qs.start + lq <= nq && ks.start + lk <= nk, "segment out of range");
            if causal {
                assert_eq!(lq, lk, "causal attention needs square segments");
            }
            for h in 0..heads {
                let p = &mut probs[off..off + lq * lk];
                off += lq * lk;
                if lq == 0 || lk == 0 {
                    continue;
                }
                // scores = Q_h K_h^T
                unsafe {
                    matrixmultiply::sgemm(
                        lq,
                        dh,
                        lk,
                        scale,
                        qd.as_ptr().add(qs.start * d + h * dh),
                        d as isize,
                        1,
                        kd.as_ptr().add(ks.start * d + h * dh),
                        1,
                        d as isize,
                        0.0,
                        p.as_mut_ptr(),
                        lk as isize,
                        1,
                    );
                }
                for i in 0..lq {
                    let row = &mut p[i * lk..(i + 1) * lk];
                    let visible = if causal { i + 1 } else { lk };
                    let mx = row[..visible].iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let mut z = 0.0;
                    for x in &mut row[..visible] {
                        *x = (*x - mx).exp();
                        z += *x;
                    }
                    let inv = 1.0 / z;
                    for x in &mut row[..visible] {
                        *x *= inv;
                    }
                    row[visible..].fill(0.0);
                }
                // out_h = P V_h
                let od = out.data_mut();
                unsafe {
                    matrixmultiply::sgemm(
                        lq,
                        lk,
                        dh,
                        1.0,
                        p.as_ptr(),
                        lk as isize,
                        1,
                        vd.as_ptr().add(ks.start * d + h * dh),
                        d as isize,
                        1,
                        0.0,
                        od.as_mut_ptr().add(qs.start * d + h * dh),
                        d as isize,
                        1,
                    );
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention(Box::new(AttentionCache {
                q,
                k,
                v,
                q_segments: q_segments.to_vec(),
                kv_segments: kv_segments.to_vec(),
                heads,
                probs,
            })),
            ng,
        )
    }

    /// Softmax cross-entropy against integer targets; `None` targets are skipped.
    ///
    /// With label smoothing `eps` the target distribution is
    /// `(1-eps)·onehot + eps/V`. Returns a scalar.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        smoothing: f32,
        reduction: Reduction,
    ) -> Var {
        let lv = self.value(logits);
        let (n, vocab) = mat_dims(lv);
        assert_eq!(targets.len(), n, "one target per logit row");
        let counted = targets.iter().filter(|t| t.is_some()).count();
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / counted.max(1) as f32,
        };
        let mut probs = vec![0.0f32; n * vocab];
        let mut total = 0.0f64;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            assert!(t < vocab, "target {t} out of range {vocab}");
            let row = lv.row(i);
            let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f32>().ln();
            let p = &mut probs[i * vocab..(i + 1) * vocab];
            let mut smooth_term = 0.0f32;
            for j in 0..vocab {
                let lp = row[j] - lse;
                p[j] = lp.exp();
                smooth_term += lp;
            }
            let nll = -(row[t] - lse);
            let loss = (1.0 - smoothing) * nll - smoothing * smooth_term / vocab as f32;
            total += f64::from(loss);
        }
        let out = Tensor::scalar(total as f32 * scale);
        let ng = self.ng(logits);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                scale,
                probs,
            },
            ng,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|&x| f64::from(x)).sum::<f64>();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s as f32), Op::Sum(a), ng)
    }

    /// Mean over the rows of each segment: `S × cols`.
    pub fn segment_mean(&mut self, x: Var, segments: &[Segment]) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Tensor::zeros([segments.len(), c]);
        for (si, s) in segments.iter().enumerate() {
            assert!(s.len > 0, "empty segment");
            let inv = 1.0 / s.len as f32;
            let o = out.row_mut(si);
            for r in s.start..s.start + s.len {
                for (a, b) in o.iter_mut().zip(xv.row(r)) {
                    *a += b * inv;
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            out,
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
            ng,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                lv.shape()
            )));
        }
        for (i, node) in self.nodes[..=loss.0].iter().enumerate() {
            if node.needs_grad {
                let v = match &node.value {
                    Value::Owned(t) => t,
                    Value::Borrowed(t) => t,
                };
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        node: i,
                        op: node.op.name(),
                        detail: "forward value".into(),
                    });
                }
            }
        }

        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));
        let mut params = Vec::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            if !gy.is_finite() {
                return Err(Error::NonFinite {
                    node: idx,
                    op: node.op.name(),
                    detail: "gradient".into(),
                });
            }
            self.backward_node(idx, &gy, &mut grads);
            if let Op::Param(pid) = node.op {
                params.push((pid, idx));
            }
            grads[idx] = Some(gy);
        }
        Ok(Gradients {
            by_node: grads,
            params,
        })
    }

    fn backward_node(&self, idx: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let g = gy.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = mat_dims(self.value(*a));
                let n = self.value(*b).shape()[1];
                if self.ng(*a) {
                    let bd = self.value(*b).data();
                    let ga = grad_slot(grads, *a, self.value(*a));
                    gemm(m, n, k, g, false, bd, true, ga, true);
                }
                if self.ng(*b) {
                    let ad = self.value(*a).data();
                    let gb = grad_slot(grads, *b, self.value(*b));
                    gemm(k, m, n, ad, true, g, false, gb, true);
                }
            }
            Op::AddBias(x, b) => {
                if self.ng(*x) {
                    add_into(grad_slot(grads, *x, self.value(*x)), g);
                }
                if self.ng(*b) {
                    let c = self.value(*b).len();
                    let gb = grad_slot(grads, *b, self.value(*b));
                    for row in g.chunks_exact(c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.ng(v) {
                        add_into(grad_slot(grads, v, self.value(v)), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let bd = self.value(*b).data();
                    let ga = grad_slot(grads, *a, self.value(*a));
                    for ((o, gy), y) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gy * y;
                    }
                }
                if self.ng(*b) {
                    let ad = self.value(*a).data();
                    let gb = grad_slot(grads, *b, self.value(*b));
                    for ((o, gy), x) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gy * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                let ga = grad_slot(grads, *a, self.value(*a));
                for (o, gy) in ga.iter_mut().zip(g) {
                    *o += gy * s;
                }
            }
            Op::Relu(a) => {
                let xd = self.value(*a).data();
                let ga = grad_slot(grads, *a, self.value(*a));
                for ((o, gy), x) in ga.iter_mut().zip(g).zip(xd) {
                    if *x > 0.0 {
                        *o += gy;
                    }
                }
            }
            Op::Tanh(a) => {
                let yd = self.value(Var(idx)).data();
                let ga = grad_slot(grads, *a, self.value(*a));
                for ((o, gy), y) in ga.iter_mut().zip(g).zip(yd) {
                    *o += gy * (1.0 - y * y);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
            } => self.layer_norm_backward(*x, *gamma, *beta, rstd, g, grads),
            Op::Gather { table, ids } => {
                let c = self.value(*table).cols();
                let gt = grad_slot(grads, *table, self.value(*table));
                for (i, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * c..(id + 1) * c], &g[i * c..(i + 1) * c]);
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let w = ca + cb;
                if self.ng(*a) {
                    let ga = grad_slot(grads, *a, self.value(*a));
                    for (dst, src) in ga.chunks_exact_mut(ca).zip(g.chunks_exact(w)) {
                        add_into(dst, &src[..ca]);
                    }
                }
                if self.ng(*b) {
                    let gb = grad_slot(grads, *b, self.value(*b));
                    for (dst, src) in gb.chunks_exact_mut(cb).zip(g.chunks_exact(w)) {
                        add_into(dst, &src[ca..]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.ng(p) {
                        let gp = grad_slot(grads, p, self.value(p));
                        add_into(gp, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::ReplaceRows { x, fill, rows } => {
                let c = self.value(*x).cols();
                if self.ng(*x) {
                    let gx = grad_slot(grads, *x, self.value(*x));
                    add_into(gx, g);
                    for &r in rows {
                        // replaced rows do not depend on x
                        for (o, gy) in gx[r * c..(r + 1) * c].iter_mut().zip(&g[r * c..]) {
                            *o -= gy;
                        }
                    }
                }
                if self.ng(*fill) {
                    let gf = grad_slot(grads, *fill, self.value(*fill));
                    for &r in rows {
                        add_into(gf, &g[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::Dropout { x, keep } => {
                let gx = grad_slot(grads, *x, self.value(*x));
                for ((o, gy), k) in gx.iter_mut().zip(g).zip(keep) {
                    *o += gy * k;
                }
            }
            Op::Attention(cache) => self.attention_backward(cache, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                scale,
                probs,
            } => {
                let vocab = self.value(*logits).cols();
                let upstream = g[0] * scale;
                let gl = grad_slot(grads, *logits, self.value(*logits));
                let uniform = smoothing / vocab as f32;
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let p = &probs[i * vocab..(i + 1) * vocab];
                    let row = &mut gl[i * vocab..(i + 1) * vocab];
                    for j in 0..vocab {
                        let target = if j == t { 1.0 - smoothing } else { 0.0 } + uniform;
                        row[j] += upstream * (p[j] - target);
                    }
                }
            }
            Op::Sum(a) => {
                let ga = grad_slot(grads, *a, self.value(*a));
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }
            Op::SegmentMean { x, segments } => {
                let c = self.value(*x).cols();
                let gx = grad_slot(grads, *x, self.value(*x));
                for (si, s) in segments.iter().enumerate() {
                    let inv = 1.0 / s.len as f32;
                    let src = &g[si * c..(si + 1) * c];
                    for r in s.start..s.start + s.len {
                        for (o, gy) in gx[r * c..(r + 1) * c].iter_mut().zip(src) {
                            *o += gy * inv;
                        }
                    }
                }
            }
        }
    }

    fn layer_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: &[f32],
        g: &[f32],
        grads: &mut [Option<Tensor>],
    ) {
        let xv = self.value(x);
        let (r, c) = mat_dims(xv);
        let gam = self.value(gamma).data();
        let mut xhat = vec![0.0f32; c];
        let mut dgamma = vec![0.0f32; c];
        let mut dbeta = vec![0.0f32; c];
        let mut dx_all = if self.ng(x) { vec![0.0f32; r * c] } else { Vec::new() };
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f32>() / c as f32;
            for j in 0..c {
                xhat[j] = (row[j] - mean) * rstd[i];
            }
            let gy = &g[i * c..(i + 1) * c];
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for j in 0..c {
                dgamma[j] += gy[j] * xhat[j];
                dbeta[j] += gy[j];
                let dxh = gy[j] * gam[j];
                mean_dxhat += dxh;
                mean_dxhat_xhat += dxh * xhat[j];
            }
            mean_dxhat /= c as f32;
            mean_dxhat_xhat /= c as f32;
            if self.ng(x) {
                let dx = &mut dx_all[i * c..(i + 1) * c];
                for j in 0..c {
                    let dxh = gy[j] * gam[j];
                    dx[j] = rstd[i] * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                }
            }
        }
        if self.ng(x) {
            add_into(grad_slot(grads, x, xv), &dx_all);
        }
        if self.ng(gamma) {
            add_into(grad_slot(grads, gamma, self.value(gamma)), &dgamma);
        }
        if self.ng(beta) {
            add_into(grad_slot(grads, beta, self.value(beta)), &dbeta);
        }
    }

    fn attention_backward(&self, c: &AttentionCache, g: &[f32], grads: &mut [Option<Tensor>]) {
        let d = self.value(c.q).cols();
        let dh = d / c.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qd, kd, vd) = (
            self.value(c.q).data(),
            self.value(c.k).data(),
            self.value(c.v).data(),
        );
        let mut dq = vec![0.0f32; qd.len()];
        let mut dk = vec![0.0f32; kd.len()];
        let mut dv = vec![0.0f32; vd.len()];
        let mut dp = Vec::new();
        let mut off = 0;
        for (qs, ks) in c.q_segments.iter().zip(&c.kv_segments) {
            let (lq, lk) = (qs.len, ks.len);
            for h in 0..c.heads {
                let p = &c.probs[off..off + lq * lk];
                off += lq * lk;
                if lq == 0 || lk == 0 {
                    continue;
                }
                dp.clear();
                dp.resize(lq * lk, 0.0);
                let go = qs.start * d + h * dh;
                let ko = ks.start * d + h * dh;
                unsafe {
                    // dP = dO V^T
                    matrixmultiply::sgemm(
                        lq,
                        dh,
                        lk,
                        1.0,
                        g.as_ptr().add(go),
                        d as isize,
                        1,
                        vd.as_ptr().add(ko),
                        1,
                        d as isize,
                        0.0,
                        dp.as_mut_ptr(),
                        lk as isize,
                        1,
                    );
                    // dV += P^T dO
                    matrixmultiply::sgemm(
                        lk,
                        lq,
                        dh,
                        1.0,
                        p.as_ptr(),
                        1,
                        lk as isize,
                        g.as_ptr().add(go),
                        d as isize,
                        1,
                        1.0,
                        dv.as_mut_ptr().add(ko),
                        d as isize,
                        1,
                    );
                }
                // dS = P * (dP - rowsum(dP * P))
                for i in 0..lq {
                    let pr = &p[i * lk..(i + 1) * lk];
                    let dr = &mut dp[i * lk..(i + 1) * lk];
                    let dot: f32 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for (x, pp) in dr.iter_mut().zip(pr) {
                        *x = pp * (*x - dot);
                    }
                }
                unsafe {
                    // dQ += dS K * scale
                    matrixmultiply::sgemm(
                        lq,
                        lk,
                        dh,
                        scale,
                        dp.as_ptr(),
                        lk as isize,
                        1,
                        kd.as_ptr().add(ko),
                        d as isize,
                        1,
                        1.0,
                        dq.as_mut_ptr().add(go),
                        d as isize,
                        1,
                    );
                    // dK += dS^T Q * scale
                    matrixmultiply::sgemm(
                        lk,
                        lq,
                        dh,
                        scale,
                        dp.as_ptr(),
                        1,
                        lk as isize,
                        qd.as_ptr().add(go),
                        d as isize,
                        1,
                        1.0,
                        dk.as_mut_ptr().add(ko),
                        d as isize,
                        1,
                    );
                }
            }
        }
        for (var, buf) in [(c.q, dq), (c.k, dk), (c.v, dv)] {
            if self.ng(var) {
                add_into(grad_slot(grads, var, self.value(var)), &buf);
            }
        }
    }
}

fn grad_slot<'g>(grads: &'g mut [Option<Tensor>], v: Var, like: &Tensor) -> &'g mut [f32] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(like.shape().to_vec()))
        .data_mut()
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
