use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::optim::ParamStore;
use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, shared_rhs: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Reshape(Var),
    Permute { a: Var, axes: Vec<usize> },
    SliceLast { a: Var, start: usize },
    GatherRows { a: Var, index: Vec<usize> },
    ConcatRows { a: Var, b: Var },
    Sum(Var),
    Mean(Var),
    MeanAxis { a: Var, axis: usize },
    SumSquares(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Parameter handles bound onto a graph, indexed by [`super::ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: super::ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Dynamic reverse-mode tape. Nodes are appended in evaluation order, so the
/// node list is already a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// Split `shape` into (outer, last).
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let total: usize = shape.iter().product();
    if cols == 0 {
        (0, 0)
    } else {
        (total / cols, cols)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &value)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        check_finite("leaf", &value)?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Copy of `a` that is cut off from the tape.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.clone();
        self.push(value, Op::Leaf, false)
    }

    /// Bind every parameter of `store` as a leaf.
    pub fn bind(&mut self, store: &ParamStore, trainable: bool) -> Result<Bound> {
        let vars = store
            .iter()
            .map(|p| self.leaf(p.value.clone(), trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Gradients for every bound parameter (zeros where none flowed).
    pub fn param_grads(&self, bound: &Bound) -> Vec<Vec<f64>> {
        bound
            .vars
            .iter()
            .map(|&v| {
                self.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; self.value(v).len()])
            })
            .collect()
    }

    // ----------------------------------------------------------------------
    // forward primitives
    // ----------------------------------------------------------------------

    /// `[..., m, k] x [k, n]` (shared right operand) or
    /// `[..., m, k] x [..., k, n]` (matching batch dims).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let shared_rhs = sb.len() == 2;
        let batch: usize = sa[..sa.len() - 2].iter().product();
        if !shared_rhs && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if shared_rhs {
                gemm_nn(batch * m, k, n, av, bv, &mut out);
            } else {
                for bi in 0..batch {
                    gemm_nn(
                        m,
                        k,
                        n,
                        &av[bi * m * k..(bi + 1) * m * k],
                        &bv[bi * k * n..(bi + 1) * k * n],
                        &mut out[bi * m * n..(bi + 1) * m * n],
                    );
                }
            }
        }
        let t = Tensor::new(out_shape, out)?;
        self.push_checked("matmul", t, Op::MatMul { a, b, shared_rhs }, &[a, b])
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.broadcast_check(op, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len().max(1);
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % nb]))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    /// Elementwise `a + b`; `b` may be a trailing-suffix broadcast of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        self.push_checked("add", t, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        self.push_checked("sub", t, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        self.push_checked("mul", t, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * s).collect())?;
        self.push_checked("scale", t, Op::Scale { a, s }, &[a])
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let av = self.value(a);
        Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| f(x)).collect())
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.unary(a, |x| x.max(0.0))?;
        self.push_checked("relu", t, Op::Relu(a), &[a])
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.unary(a, |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))?;
        self.push_checked("gelu", t, Op::Gelu(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = rows_cols(av.shape());
        let mut out = av.data().to_vec();
        for r in 0..rows {
            softmax_row(&mut out[r * cols..(r + 1) * cols]);
        }
        let t = Tensor::new(av.shape().to_vec(), out)?;
        self.push_checked("softmax", t, Op::Softmax(a), &[a])
    }

    /// Layer norm over the last axis with learned affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (rows, cols) = rows_cols(&xs);
        for p in [gamma, beta] {
            if self.shape(p) != [cols] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: xs.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv[c] + bv[c];
            }
        }
        let t = Tensor::new(xs, out)?;
        self.push_checked(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        self.push_checked("reshape", t, Op::Reshape(a), &[a])
    }

    /// General axis permutation; output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if axes.len() != sa.len() || axes.iter().any(|&ax| ax >= sa.len() || std::mem::replace(&mut seen[ax], true)) {
            return Err(TensorError::InvalidShape {
                op: "permute",
                shape: sa,
                reason: format!("bad axes {axes:?}"),
            });
        }
        let data = permute_data(self.value(a).data(), &sa, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&i| sa[i]).collect();
        let t = Tensor::new(out_shape, data)?;
        self.push_checked("permute", t, Op::Permute { a, axes: axes.to_vec() }, &[a])
    }

    /// Swap two axes.
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let rank = self.shape(a).len();
        if d0 >= rank || d1 >= rank {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: self.shape(a).to_vec(),
                reason: format!("axes ({d0}, {d1}) out of range"),
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(d0, d1);
        self.permute(a, &axes)
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let (rows, cols) = rows_cols(&sa);
        if sa.is_empty() || start + len > cols {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape: sa,
                reason: format!("range {start}..{} out of bounds", start + len),
            });
        }
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&av[r * cols + start..r * cols + start + len]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, out)?;
        self.push_checked("slice", t, Op::SliceLast { a, start }, &[a])
    }

    /// Gather along axis 1 of a `[B, T, K]` tensor; `index[b]` lists the
    /// rows kept for batch element `b` (all lists must share a length).
    pub fn gather_rows(&mut self, a: Var, index: &[Vec<usize>]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 || index.len() != sa[0] {
            return Err(TensorError::InvalidShape {
                op: "gather",
                shape: sa,
                reason: format!("expected [B, T, K] with B = {}", index.len()),
            });
        }
        let (bsz, t, k) = (sa[0], sa[1], sa[2]);
        let tp = index.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(bsz * tp);
        for (b, rows) in index.iter().enumerate() {
            if rows.len() != tp || rows.iter().any(|&r| r >= t) {
                return Err(TensorError::InvalidShape {
                    op: "gather",
                    shape: sa.clone(),
                    reason: format!("bad index list for batch element {b}"),
                });
            }
            flat.extend(rows.iter().map(|&r| b * t + r));
        }
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(bsz * tp * k);
        for &src in &flat {
            out.extend_from_slice(&av[src * k..(src + 1) * k]);
        }
        let tn = Tensor::new(vec![bsz, tp, k], out)?;
        self.push_checked("gather", tn, Op::GatherRows { a, index: flat }, &[a])
    }

    /// Concatenate `[B, T1, K]` and `[B, T2, K]` along axis 1.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: sa,
                rhs: sb,
            });
        }
        let (bsz, t1, t2, k) = (sa[0], sa[1], sb[1], sa[2]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(bsz * (t1 + t2) * k);
        for i in 0..bsz {
            out.extend_from_slice(&av[i * t1 * k..(i + 1) * t1 * k]);
            out.extend_from_slice(&bv[i * t2 * k..(i + 1) * t2 * k]);
        }
        let t = Tensor::new(vec![bsz, t1 + t2, k], out)?;
        self.push_checked("concat", t, Op::ConcatRows { a, b }, &[a, b])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean of all elements; an empty tensor has mean 0.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a).data();
        let m = if av.is_empty() {
            0.0
        } else {
            av.iter().sum::<f64>() / av.len() as f64
        };
        self.push_checked("mean", Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || sa[axis] == 0 {
            return Err(TensorError::InvalidShape {
                op: "mean_axis",
                shape: sa,
                reason: format!("cannot reduce axis {axis}"),
            });
        }
        let pre: usize = sa[..axis].iter().product();
        let n = sa[axis];
        let post: usize = sa[axis + 1..].iter().product();
        let av = self.value(a).data();
        let mut out = vec![0.0; pre * post];
        for p in 0..pre {
            for i in 0..n {
                let src = &av[(p * n + i) * post..(p * n + i + 1) * post];
                for (o, &v) in out[p * post..(p + 1) * post].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = sa;
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        self.push_checked("mean_axis", t, Op::MeanAxis { a, axis }, &[a])
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|v| v * v).sum();
        self.push_checked("sum_squares", Tensor::scalar(s), Op::SumSquares(a), &[a])
    }

    /// Mean softmax cross-entropy of `[N, L]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() || labels.iter().any(|&y| y >= sl[1]) {
            return Err(TensorError::InvalidShape {
                op: "cross_entropy",
                shape: sl,
                reason: format!("{} labels", labels.len()),
            });
        }
        let (n, l) = (sl[0], sl[1]);
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &mut probs[r * l..(r + 1) * l];
            softmax_row(row);
            loss -= row[y].max(f64::MIN_POSITIVE).ln();
        }
        if n > 0 {
            loss /= n as f64;
        }
        self.push_checked(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    // ----------------------------------------------------------------------
    // backward
    // ----------------------------------------------------------------------

    /// Accumulate `d loss / d leaf` into every tracked leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let slot = &mut self.nodes[id].grad;
                match slot {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, shared_rhs } => {
                let sa = self.shape(a);
                let sb = self.shape(b);
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if shared_rhs {
                    self.accumulate_with(grads, a, |ga| gemm_nt(batch * m, n, k, g, bv, ga));
                    self.accumulate_with(grads, b, |gb| gemm_tn(batch * m, k, n, av, g, gb));
                } else {
                    self.accumulate_with(grads, a, |ga| {
                        for bi in 0..batch {
                            gemm_nt(
                                m,
                                n,
                                k,
                                &g[bi * m * n..(bi + 1) * m * n],
                                &bv[bi * k * n..(bi + 1) * k * n],
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                            );
                        }
                    });
                    self.accumulate_with(grads, b, |gb| {
                        for bi in 0..batch {
                            gemm_tn(
                                m,
                                k,
                                n,
                                &av[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                            );
                        }
                    });
                }
            }
            &Op::Add { a, b } => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate_with(grads, b, |gb| reduce_broadcast(g, gb, 1.0));
            }
            &Op::Sub { a, b } => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate_with(grads, b, |gb| reduce_broadcast(g, gb, -1.0));
            }
            &Op::Mul { a, b } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let nb = bv.len().max(1);
                self.accumulate(grads, a, g.iter().enumerate().map(|(i, gi)| gi * bv[i % nb]).collect());
                self.accumulate_with(grads, b, |gb| {
                    for (i, (gi, ai)) in g.iter().zip(av).enumerate() {
                        gb[i % nb] += gi * ai;
                    }
                });
            }
            &Op::Scale { a, s } => {
                self.accumulate(grads, a, g.iter().map(|v| v * s).collect());
            }
            &Op::Relu(a) => {
                let av = self.value(a).data();
                self.accumulate(grads, a, g.iter().zip(av).map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 }).collect());
            }
            &Op::Gelu(a) => {
                let av = self.value(a).data();
                self.accumulate(
                    grads,
                    a,
                    g.iter()
                        .zip(av)
                        .map(|(gi, &x)| {
                            let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                            let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                            gi * (0.5 * (1.0 + t) + 0.5 * x * dt)
                        })
                        .collect(),
                );
            }
            &Op::Softmax(a) => {
                let y = node.value.data();
                let (rows, cols) = rows_cols(node.value.shape());
                self.accumulate_with(grads, a, |ga| {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            ga[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = rows_cols(node.value.shape());
                let gv = self.value(*gamma).data();
                self.accumulate_with(grads, *x, |gx| {
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            dxhat[c] = gr[c] * gv[c];
                            m1 += dxhat[c];
                            m2 += dxhat[c] * hr[c];
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for c in 0..cols {
                            gx[r * cols + c] += rstd[r] * (dxhat[c] - m1 - hr[c] * m2);
                        }
                    }
                });
                self.accumulate_with(grads, *gamma, |gg| {
                    for (i, (gi, hi)) in g.iter().zip(xhat.iter()).enumerate() {
                        gg[i % cols] += gi * hi;
                    }
                });
                self.accumulate_with(grads, *beta, |gb| reduce_broadcast(g, gb, 1.0));
            }
            &Op::Reshape(a) => self.accumulate(grads, a, g.to_vec()),
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let back = permute_data(g, node.value.shape(), &inverse);
                self.accumulate(grads, *a, back);
            }
            &Op::SliceLast { a, start } => {
                let (rows, cols) = rows_cols(self.shape(a));
                let len = *node.value.shape().last().unwrap();
                self.accumulate_with(grads, a, |ga| {
                    for r in 0..rows {
                        for c in 0..len {
                            ga[r * cols + start + c] += g[r * len + c];
                        }
                    }
                });
            }
            Op::GatherRows { a, index } => {
                let k = *self.shape(*a).last().unwrap();
                self.accumulate_with(grads, *a, |ga| {
                    for (i, &src) in index.iter().enumerate() {
                        for c in 0..k {
                            ga[src * k + c] += g[i * k + c];
                        }
                    }
                });
            }
            &Op::ConcatRows { a, b } => {
                let sa = self.shape(a);
                let sb = self.shape(b);
                let (bsz, t1, t2, k) = (sa[0], sa[1], sb[1], sa[2]);
                let mut ga = Vec::with_capacity(bsz * t1 * k);
                let mut gb = Vec::with_capacity(bsz * t2 * k);
                for i in 0..bsz {
                    let base = i * (t1 + t2) * k;
                    ga.extend_from_slice(&g[base..base + t1 * k]);
                    gb.extend_from_slice(&g[base + t1 * k..base + (t1 + t2) * k]);
                }
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, gb);
            }
            &Op::Sum(a) => {
                let n = self.value(a).len();
                self.accumulate(grads, a, vec![g[0]; n]);
            }
            &Op::Mean(a) => {
                let n = self.value(a).len();
                if n > 0 {
                    self.accumulate(grads, a, vec![g[0] / n as f64; n]);
                }
            }
            &Op::MeanAxis { a, axis } => {
                let sa = self.shape(a);
                let pre: usize = sa[..axis].iter().product();
                let n = sa[axis];
                let post: usize = sa[axis + 1..].iter().product();
                let inv = 1.0 / n as f64;
                self.accumulate_with(grads, a, |ga| {
                    for p in 0..pre {
                        for i in 0..n {
                            for q in 0..post {
                                ga[(p * n + i) * post + q] += g[p * post + q] * inv;
                            }
                        }
                    }
                });
            }
            &Op::SumSquares(a) => {
                let av = self.value(a).data();
                self.accumulate(grads, a, av.iter().map(|x| 2.0 * x * g[0]).collect());
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                if n == 0 {
                    return;
                }
                let l = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    d[r * l + y] -= scale;
                }
                self.accumulate(grads, *logits, d);
            }
        }
    }
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Sum `g` (shape of the broadcast output) back into the suffix-shaped `out`.
fn reduce_broadcast(g: &[f64], out: &mut [f64], sign: f64) {
    let n = out.len().max(1);
    for (i, gi) in g.iter().enumerate() {
        out[i % n] += sign * gi;
    }
}

fn permute_data(src: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
