use std::collections::HashMap;
use std::rc::Rc;

use super::attention::{self, AttnLayout, Heads};
use super::gemm::gemm;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, b_t: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    RmsNorm { x: Var, w: Var, inv_rms: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Rope { x: Var, positions: Vec<usize>, d_head: usize, base: f64 },
    Attention { q: Var, k: Var, v: Var, layout: Rc<AttnLayout>, heads: Heads, probs: Vec<f64> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    IndexAddRows { base: Var, src: Var, idx: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Bce { p: Var, targets: Vec<f64>, eps: f64 },
    LogSumExpRows { x: Var, probs: Vec<f64> },
    SumAll(Var),
    MeanAll(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass. Ops validate shapes and reject non-finite
/// results at the op that produced them.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter loaded onto the tape that received one.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.get(v).map(|g| (id, g)))
    }
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn rope_angles(pos: usize, d_head: usize, base: f64) -> impl Iterator<Item = (f64, f64)> {
    let half = d_head / 2;
    (0..half).map(move |i| {
        let theta = pos as f64 * base.powf(-2.0 * i as f64 / d_head as f64);
        theta.sin_cos()
    })
}

fn rotate(row: &mut [f64], d_head: usize, pos: usize, base: f64, inverse: bool) {
    let half = d_head / 2;
    for head in row.chunks_mut(d_head) {
        for (i, (sin, cos)) in rope_angles(pos, d_head, base).enumerate() {
            let sin = if inverse { -sin } else { sin };
            let (a, b) = (head[i], head[i + half]);
            head[i] = a * cos - b * sin;
            head[i + half] = b * cos + a * sin;
        }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name, node });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(node))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A free input that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Loads a parameter once per tape; later calls return the same handle.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    /// Copy of `x` cut off from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (m, k) = rows_cols(self.value(a));
        let (br, bc) = rows_cols(self.value(b));
        let (kb, n) = if b_t { (bc, br) } else { (br, bc) };
        if self.value(a).rank() != 2 || self.value(b).rank() != 2 || k != kb {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}{}", self.value(a).shape(), self.value(b).shape(), if b_t { "ᵀ" } else { "" }),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), b_t, 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, b_t }, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(name, t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push("scale", t, Op::Scale(a, s), rg)
    }

    /// Multiplies row `i` of `x` (`n×d`) by `s[i]` (`s` is `n×1`).
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, d) = rows_cols(self.value(x));
        if self.value(s).numel() != n {
            return Err(Error::shape(
                "scale_rows",
                format!("{n} rows vs {} scales", self.value(s).numel()),
            ));
        }
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks(d.max(1))
            .zip(sv)
            .flat_map(|(row, &g)| row.iter().map(move |v| v * g))
            .collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(&[x, s]);
        self.push("scale_rows", t, Op::ScaleRows(x, s), rg)
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(name, t, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, Op::Tanh(a), f64::tanh)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary("silu", a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, Op::Gelu(a), gelu)
    }

    /// Row-wise softmax over the last axis, stabilised by max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, c) = rows_cols(self.value(a));
        let mut t = self.value(a).clone();
        for row in t.data_mut().chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        self.push("softmax", t, Op::SoftmaxRows(a), rg)
    }

    /// `x / sqrt(mean(x²) + eps) * w`, per row.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let (n, d) = rows_cols(self.value(x));
        if self.value(w).numel() != d {
            return Err(Error::shape("rms_norm", format!("width {d} vs weight {:?}", self.value(w).shape())));
        }
        let wv = self.value(w).data().to_vec();
        let mut out = self.value(x).clone();
        let mut inv_rms = Vec::with_capacity(n);
        for row in out.data_mut().chunks_mut(d) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            for (v, g) in row.iter_mut().zip(&wv) {
                *v *= r * g;
            }
        }
        let rg = self.rg(&[x, w]);
        self.push("rms_norm", out, Op::RmsNorm { x, w, inv_rms }, rg)
    }

    /// Gathers rows of `table` (`V×d`) by token id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = rows_cols(self.value(table));
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding",
                    index: id,
                    limit: v,
                });
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(&[table]);
        self.push("embedding", t, Op::Embedding { table, ids: ids.to_vec() }, rg)
    }

    /// Rotary position encoding on `x` (`n × heads·d_head`) using rotate-half
    /// pairing, one absolute position per row.
    pub fn rope(&mut self, x: Var, positions: &[usize], d_head: usize, base: f64) -> Result<Var> {
        let (n, w) = rows_cols(self.value(x));
        if positions.len() != n || d_head == 0 || d_head % 2 != 0 || w % d_head != 0 {
            return Err(Error::shape(
                "rope",
                format!("{n} rows, width {w}, d_head {d_head}, {} positions", positions.len()),
            ));
        }
        let mut out = self.value(x).clone();
        for (row, &pos) in out.data_mut().chunks_mut(w).zip(positions) {
            rotate(row, d_head, pos, base, false);
        }
        let rg = self.rg(&[x]);
        self.push(
            "rope",
            out,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                d_head,
                base,
            },
            rg,
        )
    }

    /// Scaled dot-product attention with grouped key/value heads. `layout`
    /// decides which keys each query sees (causal, masked, or both).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: Rc<AttnLayout>,
        n_heads: usize,
        n_kv_heads: usize,
    ) -> Result<Var> {
        let (nq, wq) = rows_cols(self.value(q));
        let (nk, wk) = rows_cols(self.value(k));
        if n_heads == 0 || n_kv_heads == 0 || n_heads % n_kv_heads != 0 || wq % n_heads != 0 {
            return Err(Error::shape("attention", format!("{n_heads} heads / {n_kv_heads} kv heads, width {wq}")));
        }
        let d_head = wq / n_heads;
        if wk != n_kv_heads * d_head
            || self.value(v).shape() != self.value(k).shape()
            || layout.n_queries() != nq
            || layout.n_keys() != nk
        {
            return Err(Error::shape(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?}, layout {}x{}",
                    self.value(q).shape(),
                    self.value(k).shape(),
                    self.value(v).shape(),
                    layout.n_queries(),
                    layout.n_keys()
                ),
            ));
        }
        let heads = Heads {
            n_heads,
            n_kv_heads,
            d_head,
        };
        let (out, probs) = attention::forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            &layout,
            &heads,
        );
        let t = Tensor::new(vec![nq, wq], out)?;
        let rg = self.rg(&[q, k, v]);
        self.push(
            "attention",
            t,
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            },
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let d = self.value(first).cols();
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != d || t.rank() != 2 {
                return Err(Error::shape("concat_rows", format!("{:?} vs width {d}", t.shape())));
            }
            n += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(parts);
        self.push("concat_rows", Tensor::new(vec![n, d], data)?, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, d) = rows_cols(self.value(x));
        if start > end || end > n {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {n}")));
        }
        let data = self.value(x).data()[start * d..end * d].to_vec();
        let rg = self.rg(&[x]);
        self.push("slice_rows", Tensor::new(vec![end - start, d], data)?, Op::SliceRows { x, start }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, d) = rows_cols(self.value(x));
        if start > end || end > d {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {d}")));
        }
        let src = self.value(x).data();
        let data = (0..n).flat_map(|r| src[r * d + start..r * d + end].iter().copied()).collect();
        let rg = self.rg(&[x]);
        self.push("slice_cols", Tensor::new(vec![n, end - start], data)?, Op::SliceCols { x, start }, rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = rows_cols(self.value(x));
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: i,
                    limit: n,
                });
            }
            data.extend_from_slice(self.value(x).row(i));
        }
        let rg = self.rg(&[x]);
        self.push(
            "gather_rows",
            Tensor::new(vec![idx.len(), d], data)?,
            Op::GatherRows { x, idx: idx.to_vec() },
            rg,
        )
    }

    /// `base` with `src[r]` added onto row `idx[r]`.
    pub fn index_add_rows(&mut self, base: Var, src: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = rows_cols(self.value(base));
        let (ns, ds) = rows_cols(self.value(src));
        if ds != d || ns != idx.len() {
            return Err(Error::shape("index_add_rows", format!("base {n}x{d}, src {ns}x{ds}, {} indices", idx.len())));
        }
        let mut out = self.value(base).clone();
        for (r, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(Error::Index {
                    what: "index_add_rows",
                    index: i,
                    limit: n,
                });
            }
            let srow = &self.value(src).data()[r * d..(r + 1) * d];
            for (o, s) in out.data_mut()[i * d..(i + 1) * d].iter_mut().zip(srow) {
                *o += s;
            }
        }
        let rg = self.rg(&[base, src]);
        self.push("index_add_rows", out, Op::IndexAddRows { base, src, idx: idx.to_vec() }, rg)
    }

    /// Mean over rows of `−log softmax(logits)[t, target_t]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = rows_cols(self.value(logits));
        if targets.len() != n || n == 0 {
            return Err(Error::shape("cross_entropy", format!("{n} rows vs {} targets", targets.len())));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            if t >= v {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t,
                    limit: v,
                });
            }
            let lse = log_sum_exp(row);
            loss += lse - row[t];
            softmax_in_place(row);
        }
        let rg = self.rg(&[logits]);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 targets,
    /// with `p` clamped to `[eps, 1 − eps]`.
    pub fn bce(&mut self, p: Var, targets: &[f64], eps: f64) -> Result<Var> {
        let n = self.value(p).numel();
        if targets.len() != n || n == 0 {
            return Err(Error::shape("bce", format!("{n} scores vs {} targets", targets.len())));
        }
        let loss = bce_value(self.value(p).data(), targets, eps);
        let rg = self.rg(&[p]);
        self.push(
            "bce",
            Tensor::scalar(loss),
            Op::Bce {
                p,
                targets: targets.to_vec(),
                eps,
            },
            rg,
        )
    }

    /// Row-wise stabilised log-sum-exp, `n×m → n×1`.
    pub fn log_sum_exp_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = rows_cols(self.value(x));
        let mut probs = self.value(x).data().to_vec();
        let mut out = Vec::with_capacity(n);
        for row in probs.chunks_mut(m.max(1)) {
            out.push(log_sum_exp(row));
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push("log_sum_exp", Tensor::new(vec![n, 1], out)?, Op::LogSumExpRows { x, probs }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = self.value(x).sum() / n as f64;
        let rg = self.rg(&[x]);
        self.push("mean", Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads)?;
        }
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        params.sort();
        Ok(Gradients { grads, params })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn acc_data(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) -> Result<()> {
        if self.nodes[v.0].requires_grad {
            let t = Tensor::new(self.value(v).shape().to_vec(), data)?;
            self.acc(grads, v, t);
        }
        Ok(())
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &self.nodes[i].value;
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, b_t } => {
                let (m, k) = rows_cols(self.value(a));
                let n = out.cols();
                if self.requires_grad(a) {
                    let mut da = vec![0.0; m * k];
                    // da = g · op(b)ᵀ
                    gemm(m, n, k, gd, false, self.value(b).data(), !b_t, 0.0, &mut da);
                    self.acc_data(grads, a, da)?;
                }
                if self.requires_grad(b) {
                    let mut db = vec![0.0; k * n];
                    if b_t {
                        // b is n×k: db = gᵀ · a
                        gemm(n, m, k, gd, true, self.value(a).data(), false, 0.0, &mut db);
                    } else {
                        gemm(k, m, n, self.value(a).data(), true, gd, false, 0.0, &mut db);
                    }
                    self.acc_data(grads, b, db)?;
                }
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, g.clone());
                self.acc(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, g.clone());
                self.acc(grads, b, g.map(|x| -x));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                self.acc_data(grads, a, gd.iter().zip(vb).map(|(x, y)| x * y).collect())?;
                self.acc_data(grads, b, gd.iter().zip(va).map(|(x, y)| x * y).collect())?;
            }
            &Op::Scale(a, s) => self.acc(grads, a, g.map(|x| x * s)),
            &Op::ScaleRows(x, s) => {
                let d = out.cols().max(1);
                let (xv, sv) = (self.value(x).data(), self.value(s).data());
                let dx = gd
                    .chunks(d)
                    .zip(sv)
                    .flat_map(|(row, &k)| row.iter().map(move |v| v * k))
                    .collect();
                let ds = gd
                    .chunks(d)
                    .zip(xv.chunks(d))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                    .collect();
                self.acc_data(grads, x, dx)?;
                self.acc_data(grads, s, ds)?;
            }
            &Op::Sigmoid(a) => {
                let d = gd.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.acc_data(grads, a, d)?;
            }
            &Op::Tanh(a) => {
                let d = gd.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.acc_data(grads, a, d)?;
            }
            &Op::Silu(a) => {
                let d = gd
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.acc_data(grads, a, d)?;
            }
            &Op::Gelu(a) => {
                let d = gd.iter().zip(self.value(a).data()).map(|(g, &x)| g * gelu_grad(x)).collect();
                self.acc_data(grads, a, d)?;
            }
            &Op::SoftmaxRows(a) => {
                let c = out.cols().max(1);
                let mut d = Vec::with_capacity(gd.len());
                for (gr, yr) in gd.chunks(c).zip(out.data().chunks(c)) {
                    let dotp: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    d.extend(gr.iter().zip(yr).map(|(g, y)| y * (g - dotp)));
                }
                self.acc_data(grads, a, d)?;
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let (x, w) = (*x, *w);
                let d = out.cols();
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; d];
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let mut proj = 0.0;
                    for j in 0..d {
                        let xhat = xr[j] * inv;
                        dw[j] += gr[j] * xhat;
                        proj += gr[j] * wv[j] * xhat;
                    }
                    proj /= d as f64;
                    for j in 0..d {
                        let xhat = xr[j] * inv;
                        dx[r * d + j] = inv * (gr[j] * wv[j] - xhat * proj);
                    }
                }
                self.acc_data(grads, x, dx)?;
                self.acc_data(grads, w, dw)?;
            }
            Op::Embedding { table, ids } => {
                if self.requires_grad(*table) {
                    let d = out.cols();
                    let mut dt = vec![0.0; self.value(*table).numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, x) in dt[id * d..(id + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                            *o += x;
                        }
                    }
                    self.acc_data(grads, *table, dt)?;
                }
            }
            Op::Rope {
                x,
                positions,
                d_head,
                base,
            } => {
                let w = out.cols();
                let mut dx = gd.to_vec();
                for (row, &pos) in dx.chunks_mut(w).zip(positions) {
                    rotate(row, *d_head, pos, *base, true);
                }
                self.acc_data(grads, *x, dx)?;
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            } => {
                let (dq, dk, dv) = attention::backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    gd,
                    layout,
                    heads,
                );
                self.acc_data(grads, *q, dq)?;
                self.acc_data(grads, *k, dk)?;
                self.acc_data(grads, *v, dv)?;
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.acc_data(grads, p, gd[offset..offset + n].to_vec())?;
                    offset += n;
                }
            }
            &Op::SliceRows { x, start } => {
                if self.requires_grad(x) {
                    let d = out.cols();
                    let mut dx = vec![0.0; self.value(x).numel()];
                    dx[start * d..start * d + gd.len()].copy_from_slice(gd);
                    self.acc_data(grads, x, dx)?;
                }
            }
            &Op::SliceCols { x, start } => {
                if self.requires_grad(x) {
                    let d = self.value(x).cols();
                    let w = out.cols();
                    let mut dx = vec![0.0; self.value(x).numel()];
                    for (r, gr) in gd.chunks(w.max(1)).enumerate() {
                        dx[r * d + start..r * d + start + w].copy_from_slice(gr);
                    }
                    self.acc_data(grads, x, dx)?;
                }
            }
            Op::GatherRows { x, idx } => {
                if self.requires_grad(*x) {
                    let d = out.cols();
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, v) in dx[i * d..(i + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                            *o += v;
                        }
                    }
                    self.acc_data(grads, *x, dx)?;
                }
            }
            Op::IndexAddRows { base, src, idx } => {
                self.acc(grads, *base, g.clone());
                if self.requires_grad(*src) {
                    let d = out.cols();
                    let ds = idx.iter().flat_map(|&i| gd[i * d..(i + 1) * d].iter().copied()).collect();
                    self.acc_data(grads, *src, ds)?;
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.value(*logits).cols();
                let scale = gd[0] / targets.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * v + t] -= scale;
                }
                self.acc_data(grads, *logits, d)?;
            }
            Op::Bce { p, targets, eps } => {
                let n = targets.len() as f64;
                let d = self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&x, &y)| {
                        let x = x.clamp(*eps, 1.0 - eps);
                        gd[0] * (-y / x + (1.0 - y) / (1.0 - x)) / n
                    })
                    .collect();
                self.acc_data(grads, *p, d)?;
            }
            Op::LogSumExpRows { x, probs } => {
                let m = self.value(*x).cols().max(1);
                let d = probs
                    .chunks(m)
                    .zip(gd)
                    .flat_map(|(row, &g)| row.iter().map(move |p| p * g))
                    .collect();
                self.acc_data(grads, *x, d)?;
            }
            &Op::SumAll(x) => {
                let t = Tensor::full(self.value(x).shape(), gd[0]);
                self.acc(grads, x, t);
            }
            &Op::MeanAll(x) => {
                let n = self.value(x).numel() as f64;
                let t = Tensor::full(self.value(x).shape(), gd[0] / n);
                self.acc(grads, x, t);
            }
        }
        Ok(())
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

pub(crate) fn bce_value(p: &[f64], targets: &[f64], eps: f64) -> f64 {
    let n = p.len() as f64;
    -p.iter()
        .zip(targets)
        .map(|(&x, &y)| {
            let x = x.clamp(eps, 1.0 - eps);
            y * x.ln() + (1.0 - y) * (1.0 - x).ln()
        })
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let x = tape.constant(t(&[vec![1.5, -2.0], vec![0.25, 4.0]]));
        let y = tape.matmul(i2, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let a = tape.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.constant(t(&[vec![1.0], vec![1.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_extent() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(&[1, 4]));
        let l = tape.cross_entropy(uniform, &[2]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let sharp = tape.constant(t(&[vec![20.0, 0.0, 0.0, 0.0]]));
        let l = tape.cross_entropy(sharp, &[0]).unwrap();
        assert!(tape.value(l).item() < 1e-8);

        assert!(matches!(
            tape.cross_entropy(sharp, &[4]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[vec![1000.0, 999.0, -5.0], vec![0.1, 0.2, 0.3]]));
        let y = tape.softmax(x).unwrap();
        for r in 0..2 {
            let s: f64 = tape.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_results_are_reported_at_the_producing_op() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1], 1e300));
        let err = tape.scale(x, 1e300).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "scale", .. }));
    }

    #[test]
    fn rope_preserves_row_norm_and_is_identity_at_position_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 2.0, 3.0, 4.0]]));
        let y = tape.rope(x, &[0, 7], 4, 10000.0).unwrap();
        assert_eq!(tape.value(y).row(0), tape.value(x).row(0));
        let n0: f64 = tape.value(x).row(1).iter().map(|v| v * v).sum();
        let n1: f64 = tape.value(y).row(1).iter().map(|v| v * v).sum();
        assert!((n0 - n1).abs() < 1e-12);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 1], 3.0));
        let d = tape.detach(x);
        let y = tape.mul(x, d).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        // d(x·stop(x))/dx = stop(x)
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
        assert!(g.get(d).is_none());
    }
}
