//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] replays the tape in reverse and accumulates gradients
//! into graph leaves and into the [`ParamStore`] the parameters came from.
//! Gradients accumulate across calls until [`ParamStore::zero_grads`] /
//! [`Graph::zero_grads`] is called.
//!
//! Operations act on the last axis; leading axes are flattened into rows
//! unless an operation says otherwise.

use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        let grad = vec![0.0; value.numel()];
        self.params.push(Param { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Scale { a: Var, factor: f64 },
    Relu { a: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Concat { inputs: Vec<Var>, widths: Vec<usize> },
    Slice { a: Var, start: usize, width: usize },
    Reshape { a: Var },
    Softmax { a: Var },
    LayerNorm { a: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { a: Var, index: Vec<Option<usize>> },
    SelectRows { new: Var, old: Var, mask: Vec<bool> },
    LstmPointwise { pre: Var, c: Var, gates: Vec<f64>, tanh_c: Vec<f64> },
    Dropout { a: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, smoothing: f64, probs: Vec<f64>, count: usize },
    Sum { a: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records a forward computation for later differentiation.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    training: bool,
    rng: ChaCha8Rng,
}

/// Attention mask shared between several softmax calls. `true` = allowed.
pub type Mask = Rc<Vec<bool>>;

impl Graph {
    /// Inference graph: dropout disabled.
    pub fn new() -> Self {
        Self::with_mode(false, 0)
    }

    /// Training graph: dropout active, driven by `seed`.
    pub fn training(seed: u64) -> Self {
        Self::with_mode(true, seed)
    }

    fn with_mode(training: bool, seed: u64) -> Self {
        Graph { nodes: Vec::new(), param_vars: HashMap::new(), training, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf created with [`Graph::leaf`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Differentiable leaf owned by the graph.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Brings a parameter into the graph. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[.., k] · b[k, n] -> [.., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 {
            return Err(Error::shape("matmul", "rhs", format!("{sb:?}"), "a 2-D matrix"));
        }
        let k = *sa.last().unwrap();
        if k != sb[0] {
            return Err(Error::shape("matmul", "rhs", format!("{sb:?}"), format!("[{k}, _] to match lhs {sa:?}")));
        }
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_raw(shape, out), Op::MatMul { a, b }, rg))
    }

    /// Batched `a[B, m, k] · b[B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.batch_matmul(a, b, false)
    }

    /// Batched `a[B, m, k] · b[B, n, k]ᵀ`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.batch_matmul(a, b, true)
    }

    fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", "rhs", format!("{sb:?}"), format!("3-D with batch matching {sa:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape("bmm", "rhs", format!("{sb:?}"), format!("inner dim {k}")));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    false,
                    &db[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_raw(vec![batch, m, n], out), Op::BatchMatMul { a, b, trans_b }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("transpose", "input", format!("{s:?}"), "a 2-D matrix"));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_raw(vec![c, r], out), Op::Transpose { a }, rg))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, "rhs", format!("{:?}", self.shape(b)), format!("{:?}", self.shape(a))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_raw(shape, out), Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_raw(shape, out), Op::Mul { a, b }, rg))
    }

    /// Adds a `[d]` vector to every row of `a[.., d]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let d = self.value(a).last_dim();
        if self.shape(bias) != [d] {
            return Err(Error::shape("add_bias", "bias", format!("{:?}", self.shape(bias)), format!("[{d}]")));
        }
        let bv = self.value(bias).data();
        let out: Vec<f64> = self.value(a).data().iter().enumerate().map(|(i, x)| x + bv[i % d]).collect();
        let rg = self.rg(a) || self.rg(bias);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_raw(shape, out), Op::AddBias { a, bias }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * factor).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_raw(shape, out), Op::Scale { a, factor }, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.value(a).data().iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_raw(shape, out), op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh { a })
    }

    // ---- structural -----------------------------------------------------

    /// Concatenates along the last axis. Leading axes must agree.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", "input", format!("{s:?}"), format!("leading dims {lead:?}")));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows = self.value(first).rows();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in inputs {
                out.extend_from_slice(self.value(v).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::from_raw(shape, out), Op::Concat { inputs: inputs.to_vec(), widths }, rg))
    }

    /// Columns `[start, start + width)` of the last axis.
    pub fn slice(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let d = self.value(a).last_dim();
        if width == 0 || start + width > d {
            return Err(Error::shape(
                "slice",
                "range",
                format!("{start}..{}", start + width),
                format!("within 0..{d}"),
            ));
        }
        let rows = self.value(a).rows();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&self.value(a).row(r)[start..start + width]);
        }
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = width;
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_raw(shape, out), Op::Slice { a, start, width }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    /// Row-wise softmax over the last axis. Masked entries (`false`) are exactly zero.
    pub fn softmax(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let t = self.value(a);
        if let Some(m) = mask {
            if m.len() != t.numel() {
                return Err(Error::shape("softmax", "mask", format!("{} entries", m.len()), format!("{}", t.numel())));
            }
        }
        let d = t.last_dim();
        let mut out = vec![0.0; t.numel()];
        for r in 0..t.rows() {
            let row = t.row(r);
            let allowed = |j: usize| mask.is_none_or(|m| m[r * d + j]);
            let max = (0..d).filter(|&j| allowed(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::EmptyAttention(r));
            }
            let o = &mut out[r * d..(r + 1) * d];
            let mut z = 0.0;
            for j in 0..d {
                if allowed(j) {
                    o[j] = (row[j] - max).exp();
                    z += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        let rg = self.rg(a);
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_raw(shape, out), Op::Softmax { a }, rg))
    }

    /// `(x - mean) / sqrt(var + eps) * gain + bias` over the last axis, population variance.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(a).last_dim();
        for (operand, v) in [("gain", gain), ("bias", bias)] {
            if self.shape(v) != [d] {
                return Err(Error::shape("layer_norm", operand, format!("{:?}", self.shape(v)), format!("[{d}]")));
            }
        }
        if eps <= 0.0 {
            return Err(Error::Invalid("layer_norm eps must be positive".into()));
        }
        let t = self.value(a);
        let rows = t.rows();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; t.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(a) || self.rg(gain) || self.rg(bias);
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_raw(shape, out), Op::LayerNorm { a, gain, bias, xhat, inv_std }, rg))
    }

    /// Row lookup `table[ids[i]]`, output `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("embedding", "table", format!("{s:?}"), "[vocab, d]"));
        }
        let (vocab, d) = (s[0], s[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::OutOfVocab { id, size: vocab });
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(Tensor::from_raw(vec![ids.len(), d], out), Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Picks rows of `a[R, d]`; `None` yields a zero row. Output `[index.len(), d]`.
    pub fn gather_rows(&mut self, a: Var, index: &[Option<usize>]) -> Result<Var> {
        let t = self.value(a);
        let (rows, d) = (t.rows(), t.last_dim());
        let mut out = vec![0.0; index.len() * d];
        for (i, ix) in index.iter().enumerate() {
            if let Some(r) = *ix {
                if r >= rows {
                    return Err(Error::shape("gather_rows", "index", format!("{r}"), format!("< {rows}")));
                }
                out[i * d..(i + 1) * d].copy_from_slice(t.row(r));
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_raw(vec![index.len(), d], out), Op::GatherRows { a, index: index.to_vec() }, rg))
    }

    /// Row `r` of the output is row `r` of `new` where `mask[r]`, else of `old`.
    pub fn select_rows(&mut self, new: Var, old: Var, mask: &[bool]) -> Result<Var> {
        self.same_shape("select_rows", new, old)?;
        let (tn, to) = (self.value(new), self.value(old));
        if mask.len() != tn.rows() {
            return Err(Error::shape("select_rows", "mask", format!("{}", mask.len()), format!("{}", tn.rows())));
        }
        let d = tn.last_dim();
        let mut out = Vec::with_capacity(tn.numel());
        for (r, &m) in mask.iter().enumerate() {
            out.extend_from_slice(if m { tn.row(r) } else { to.row(r) });
            debug_assert_eq!(out.len(), (r + 1) * d);
        }
        let rg = self.rg(new) || self.rg(old);
        let shape = tn.shape().to_vec();
        Ok(self.push(Tensor::from_raw(shape, out), Op::SelectRows { new, old, mask: mask.to_vec() }, rg))
    }

    /// LSTM gate nonlinearities. `pre[R, 4h]` holds pre-activations in gate
    /// order input, forget, output, candidate; `c[R, h]` is the previous cell.
    /// Returns `[R, 2h]` = `(h', c')`.
    pub fn lstm_pointwise(&mut self, pre: Var, c: Var) -> Result<Var> {
        let (tp, tc) = (self.value(pre), self.value(c));
        let h = tc.last_dim();
        if tp.last_dim() != 4 * h || tp.rows() != tc.rows() {
            return Err(Error::shape(
                "lstm_pointwise",
                "pre",
                format!("{:?}", tp.shape()),
                format!("[{}, {}]", tc.rows(), 4 * h),
            ));
        }
        let rows = tc.rows();
        let mut gates = vec![0.0; rows * 4 * h];
        let mut tanh_c = vec![0.0; rows * h];
        let mut out = vec![0.0; rows * 2 * h];
        for r in 0..rows {
            let p = tp.row(r);
            let cp = tc.row(r);
            let gr = &mut gates[r * 4 * h..(r + 1) * 4 * h];
            for j in 0..h {
                let i = sigmoid(p[j]);
                let f = sigmoid(p[h + j]);
                let o = sigmoid(p[2 * h + j]);
                let g = p[3 * h + j].tanh();
                gr[j] = i;
                gr[h + j] = f;
                gr[2 * h + j] = o;
                gr[3 * h + j] = g;
                let c2 = f * cp[j] + i * g;
                let tc2 = c2.tanh();
                tanh_c[r * h + j] = tc2;
                out[r * 2 * h + j] = o * tc2;
                out[r * 2 * h + h + j] = c2;
            }
        }
        let rg = self.rg(pre) || self.rg(c);
        Ok(self.push(Tensor::from_raw(vec![rows, 2 * h], out), Op::LstmPointwise { pre, c, gates, tanh_c }, rg))
    }

    /// Inverted dropout; identity on inference graphs or when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let n = self.value(a).numel();
        let mask: Vec<f64> = (0..n).map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let out: Vec<f64> = self.value(a).data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_raw(shape, out), Op::Dropout { a, mask }, rg))
    }

    /// Label-smoothed negative log-likelihood, averaged over rows whose target is `Some`.
    ///
    /// Per row: `(1 - eps) * -log p[target] + eps * mean_v(-log p[v])`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], smoothing: f64) -> Result<Var> {
        let t = self.value(logits);
        let (rows, v) = (t.rows(), t.last_dim());
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", "targets", format!("{}", targets.len()), format!("{rows}")));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Config(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Invalid("cross_entropy: every position is padding".into()));
        }
        let mut probs = vec![0.0; rows * v];
        let mut total = 0.0;
        for (r, tgt) in targets.iter().enumerate() {
            let Some(tgt) = *tgt else { continue };
            if tgt >= v {
                return Err(Error::OutOfVocab { id: tgt, size: v });
            }
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            let nll = lse - row[tgt];
            let mean_nll = lse - row.iter().sum::<f64>() / v as f64;
            total += (1.0 - smoothing) * nll + smoothing * mean_nll;
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / count as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("cross_entropy loss {loss}")));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), smoothing, probs, count },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    // ---- backward -------------------------------------------------------

    /// Differentiates the scalar `loss`, accumulating into graph leaves and `store`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape("backward", "loss", format!("{:?}", lv.shape()), "a scalar"));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("loss is {}", lv.data()[0])));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Leaf => {
                    accumulate(&mut self.nodes[i].grad, &g);
                }
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    if p.grad.len() != g.len() {
                        return Err(Error::shape("backward", "param", p.name.clone(), "matching store"));
                    }
                    p.grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                _ => self.propagate(i, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut send = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Input | Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul { a, b } => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(*a).numel() / k;
                send(*a, &|ga| gemm(m, n, k, g, false, val(*b), true, ga, 1.0));
                send(*b, &|gb| gemm(k, m, n, val(*a), true, g, false, gb, 1.0));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (av, bv) = (val(*a), val(*b));
                send(*a, &|ga| {
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let bs = &bv[bi * k * n..(bi + 1) * k * n];
                        // dA = dC · Bᵀ, where B is stored [k, n] or [n, k]
                        gemm(m, n, k, gs, false, bs, !*trans_b, &mut ga[bi * m * k..(bi + 1) * m * k], 1.0);
                    }
                });
                send(*b, &|gb| {
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let as_ = &av[bi * m * k..(bi + 1) * m * k];
                        let out = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            // d(Bᵀ)[n, k] = dCᵀ · A
                            gemm(n, m, k, gs, true, as_, false, out, 1.0);
                        } else {
                            gemm(k, m, n, as_, true, gs, false, out, 1.0);
                        }
                    }
                });
            }
            Op::Transpose { a } => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                send(*a, &|ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                send(*a, &|ga| add_into(ga, g));
                send(*b, &|gb| add_into(gb, g));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                send(*a, &|ga| ga.iter_mut().zip(g).zip(bv).for_each(|((x, gi), y)| *x += gi * y));
                send(*b, &|gb| gb.iter_mut().zip(g).zip(av).for_each(|((x, gi), y)| *x += gi * y));
            }
            Op::AddBias { a, bias } => {
                send(*a, &|ga| add_into(ga, g));
                let d = self.value(*bias).numel();
                send(*bias, &|gb| {
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % d] += gi;
                    }
                });
            }
            Op::Scale { a, factor } => {
                send(*a, &|ga| ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi * factor));
            }
            Op::Relu { a } => {
                let av = val(*a);
                send(*a, &|ga| {
                    for j in 0..ga.len() {
                        if av[j] > 0.0 {
                            ga[j] += g[j];
                        }
                    }
                });
            }
            Op::Sigmoid { a } => {
                let y = node.value.data();
                send(*a, &|ga| ga.iter_mut().zip(g).zip(y).for_each(|((x, gi), s)| *x += gi * s * (1.0 - s)));
            }
            Op::Tanh { a } => {
                let y = node.value.data();
                send(*a, &|ga| ga.iter_mut().zip(g).zip(y).for_each(|((x, gi), t)| *x += gi * (1.0 - t * t)));
            }
            Op::Concat { inputs, widths } => {
                let total: usize = widths.iter().sum();
                let rows = node.value.rows();
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    send(v, &|gv| {
                        for r in 0..rows {
                            add_into(&mut gv[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice { a, start, width } => {
                let d = self.value(*a).last_dim();
                let rows = node.value.rows();
                send(*a, &|ga| {
                    for r in 0..rows {
                        add_into(&mut ga[r * d + start..r * d + start + width], &g[r * width..(r + 1) * width]);
                    }
                });
            }
            Op::Reshape { a } => send(*a, &|ga| add_into(ga, g)),
            Op::Softmax { a } => {
                let y = &node.value;
                let d = y.last_dim();
                send(*a, &|ga| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            ga[r * d + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { a, gain, bias, xhat, inv_std } => {
                let d = self.value(*a).last_dim();
                let rows = inv_std.len();
                let gv = val(*gain);
                send(*a, &|ga| {
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            ga[r * d + j] += inv_std[r] * (gr[j] * gv[j] - m1 - xr[j] * m2);
                        }
                    }
                });
                send(*gain, &|gg| {
                    for (i, gi) in g.iter().enumerate() {
                        gg[i % d] += gi * xhat[i];
                    }
                });
                send(*bias, &|gb| {
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % d] += gi;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).last_dim();
                send(*table, &|gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::GatherRows { a, index } => {
                let d = self.value(*a).last_dim();
                send(*a, &|ga| {
                    for (i, ix) in index.iter().enumerate() {
                        if let Some(r) = *ix {
                            add_into(&mut ga[r * d..(r + 1) * d], &g[i * d..(i + 1) * d]);
                        }
                    }
                });
            }
            Op::SelectRows { new, old, mask } => {
                let d = node.value.last_dim();
                for (v, want) in [(*new, true), (*old, false)] {
                    send(v, &|gv| {
                        for (r, &m) in mask.iter().enumerate() {
                            if m == want {
                                add_into(&mut gv[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                            }
                        }
                    });
                }
            }
            Op::LstmPointwise { pre, c, gates, tanh_c } => {
                let h = self.value(*c).last_dim();
                let rows = self.value(*c).rows();
                let cv = val(*c);
                // dc' including the path through h' = o * tanh(c')
                let mut dc2 = vec![0.0; rows * h];
                for r in 0..rows {
                    for j in 0..h {
                        let o = gates[r * 4 * h + 2 * h + j];
                        let tc = tanh_c[r * h + j];
                        dc2[r * h + j] = g[r * 2 * h + h + j] + g[r * 2 * h + j] * o * (1.0 - tc * tc);
                    }
                }
                send(*pre, &|gp| {
                    for r in 0..rows {
                        let gr = &gates[r * 4 * h..(r + 1) * 4 * h];
                        for j in 0..h {
                            let (i, f, o, gg) = (gr[j], gr[h + j], gr[2 * h + j], gr[3 * h + j]);
                            let dc = dc2[r * h + j];
                            let dh = g[r * 2 * h + j];
                            let base = r * 4 * h;
                            gp[base + j] += dc * gg * i * (1.0 - i);
                            gp[base + h + j] += dc * cv[r * h + j] * f * (1.0 - f);
                            gp[base + 2 * h + j] += dh * tanh_c[r * h + j] * o * (1.0 - o);
                            gp[base + 3 * h + j] += dc * i * (1.0 - gg * gg);
                        }
                    }
                });
                send(*c, &|gc| {
                    for r in 0..rows {
                        for j in 0..h {
                            gc[r * h + j] += dc2[r * h + j] * gates[r * 4 * h + h + j];
                        }
                    }
                });
            }
            Op::Dropout { a, mask } => {
                send(*a, &|ga| ga.iter_mut().zip(g).zip(mask).for_each(|((x, gi), m)| *x += gi * m));
            }
            Op::CrossEntropy { logits, targets, smoothing, probs, count } => {
                let v = self.value(*logits).last_dim();
                let scale = g[0] / *count as f64;
                send(*logits, &|gl| {
                    for (r, tgt) in targets.iter().enumerate() {
                        let Some(tgt) = *tgt else { continue };
                        for j in 0..v {
                            let q = smoothing / v as f64 + if j == tgt { 1.0 - smoothing } else { 0.0 };
                            gl[r * v + j] += scale * (probs[r * v + j] - q);
                        }
                    }
                });
            }
            Op::Sum { a } => send(*a, &|ga| ga.iter_mut().for_each(|x| *x += g[0])),
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => add_into(acc, g),
        None => *slot = Some(g.to_vec()),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c = op(a) · op(b) + beta * c` with `op(a)` of shape `[m, k]` and `op(b)` of shape `[k, n]`.
///
/// With `a_t`, `a` is stored `[k, m]`; with `b_t`, `b` is stored `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the m×k, k×n and m×n extents asserted above.
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
