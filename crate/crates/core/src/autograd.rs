//! Reverse-mode differentiation over row-major `f64` matrices.
//!
//! A [`Graph`] is a tape: every op evaluates eagerly and appends a node that
//! remembers its parents plus whatever it needs to run backwards. Vectors are
//! `1×n` matrices and scalars are `1×1`.
//!
//! Graphs built with [`Graph::inference`] skip the backward bookkeeping (no
//! attention probabilities or softmax caches are retained), which keeps the
//! paper-shape forward pass inside a few GB.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::params::ParamStore;

const LAYER_NORM_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Option<Array2<f64>>,
        inv_std: Option<Array1<f64>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Array2<f64>>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    NormalizeRows(Var, Option<Array1<f64>>),
    MaxRows(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        active: Vec<bool>,
        probs: Option<Array2<f64>>,
    },
    BceWithLogits {
        logits: Var,
        labels: Vec<f64>,
    },
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`; `None` when the loss does not depend on it.
    pub fn of(&self, var: Var) -> Option<&Array2<f64>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that supports [`Graph::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            record: true,
        }
    }

    /// A forward-only graph.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn records_gradients(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Array2<f64> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.dim()
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, var: Var) -> f64 {
        let v = self.value(var);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a named parameter of `store`. Requesting the same name twice
    /// returns the same node so shared weights accumulate a single gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&var) = self.params.get(name) {
            return Ok(var);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Internal(format!("unknown parameter `{name}`")))?
            .clone();
        let var = self.push(value, Op::Leaf);
        self.params.insert(name.to_string(), var);
        Ok(var)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Gradients of every parameter leaf touched by this graph.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Array2<f64>> {
        self.params
            .iter()
            .map(|(name, &var)| {
                let g = grads
                    .of(var)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(self.shape(var)));
                (name.clone(), g)
            })
            .collect()
    }

    fn check_shape(&self, what: &str, ok: bool, detail: impl FnOnce() -> String) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!("{what}: {}", detail())))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        self.check_shape("matmul", sa.1 == sb.0, || format!("{sa:?} · {sb:?}"))?;
        let value = self.value(a).dot(self.value(b));
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        self.check_shape("matmul_t", sa.1 == sb.1, || format!("{sa:?} · {sb:?}ᵀ"))?;
        let value = self.value(a).dot(&self.value(b).t());
        Ok(self.push(value, Op::MatMulT(a, b)))
    }

    /// Affine map `x · wᵀ + b` with `w` stored `out×in` and `b` a `1×out` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        self.check_shape("linear", sx.1 == sw.1, || {
            format!("input {sx:?} vs weight {sw:?}")
        })?;
        let mut value = self.value(x).dot(&self.value(w).t());
        if let Some(b) = b {
            let sb = self.shape(b);
            self.check_shape("linear bias", sb == (1, sw.0), || format!("{sb:?}"))?;
            value += self.value(b);
        }
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        self.check_shape("add", sa == sb, || format!("{sa:?} + {sb:?}"))?;
        let value = self.value(a) + self.value(b);
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds the `1×n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        self.check_shape("add_row", sr == (1, sa.1), || format!("{sa:?} + {sr:?}"))?;
        let value = self.value(a) + self.value(row);
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a, factor))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a))
    }

    /// Row-wise layer normalization with learned gain and bias (`1×n` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x);
        for (what, v) in [("gain", gain), ("bias", bias)] {
            let sv = self.shape(v);
            self.check_shape("layer_norm", sv == (1, sx.1), || format!("{what} {sv:?} for {sx:?}"))?;
        }
        let xv = self.value(x);
        let n = sx.1 as f64;
        let mean = xv.sum_axis(Axis(1)) / n;
        let centered = xv - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|c| c * c).sum_axis(Axis(1)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + LAYER_NORM_EPS).sqrt());
        let xhat = centered * &inv_std.view().insert_axis(Axis(1));
        let value = &xhat * self.value(gain) + self.value(bias);
        let (xhat, inv_std) = if self.record {
            (Some(xhat), Some(inv_std))
        } else {
            (None, None)
        };
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Multi-head scaled dot-product attention. `q` is `n×d`, `k` and `v` are
    /// `m×d`; `mask` is an optional `n×m` additive mask holding `0` or `-inf`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&Array2<f64>>,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        self.check_shape("attention", sq.1 == sk.1 && sk == sv, || {
            format!("q {sq:?}, k {sk:?}, v {sv:?}")
        })?;
        if heads == 0 || sq.1 % heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible into {heads} heads",
                sq.1
            )));
        }
        if let Some(m) = mask {
            self.check_shape("attention mask", m.dim() == (sq.0, sk.0), || {
                format!("{:?} for {}×{}", m.dim(), sq.0, sk.0)
            })?;
        }
        let head_dim = sq.1 / heads;
        let mut out = Array2::zeros((sq.0, sq.1));
        let mut kept = Vec::new();
        for h in 0..heads {
            let cols = s![.., h * head_dim..(h + 1) * head_dim];
            // Contiguous copies keep the matrix kernels on their fast path.
            let kh = self.value(k).slice(cols).as_standard_layout().into_owned();
            let vh = self.value(v).slice(cols).as_standard_layout().into_owned();
            let probs = crate::attention::attention_weights(
                self.value(q).slice(cols),
                kh.view(),
                mask.map(|m| m.view()),
            );
            let head_out = probs.dot(&vh);
            out.slice_mut(cols).assign(&head_out);
            if self.record {
                kept.push(probs);
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs: kept,
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows of nothing".into()));
        }
        let cols = self.shape(parts[0]).1;
        for &p in parts {
            let sp = self.shape(p);
            self.check_shape("concat_rows", sp.1 == cols, || format!("{sp:?} vs width {cols}"))?;
        }
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Shape(format!("concat_rows: {e}")))?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let sa = self.shape(a);
        self.check_shape("slice_rows", start <= end && end <= sa.0, || {
            format!("{start}..{end} of {sa:?}")
        })?;
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        Ok(self.push(value, Op::SliceRows(a, start)))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= st.0) {
            return Err(Error::InputDomain(format!(
                "row id {bad} outside table of {} rows",
                st.0
            )));
        }
        let value = self.value(table).select(Axis(0), ids);
        Ok(self.push(value, Op::GatherRows(table, ids.to_vec())))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    /// Scales every row to unit L2 norm. Fails on a (near-)zero row, where the
    /// direction is undefined.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let norms = self
            .value(a)
            .map_axis(Axis(1), |row| row.dot(&row).sqrt());
        if let Some(i) = norms.iter().position(|&n| !(n > NORM_FLOOR) || !n.is_finite()) {
            return Err(Error::numeric(
                "normalize_rows",
                format!("row {i} has norm {}", norms[i]),
            ));
        }
        let value = self.value(a) / &norms.view().insert_axis(Axis(1));
        let kept = self.record.then_some(norms);
        Ok(self.push(value, Op::NormalizeRows(a, kept)))
    }

    /// Column-wise maximum, producing a `1×cols` row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        self.check_shape("max_rows", sa.0 > 0, || format!("{sa:?}"))?;
        let av = self.value(a);
        let mut argmax = vec![0usize; sa.1];
        let mut value = Array2::zeros((1, sa.1));
        for (c, col) in av.axis_iter(Axis(1)).enumerate() {
            let mut best = 0;
            for r in 1..sa.0 {
                if col[r] > col[best] {
                    best = r;
                }
            }
            argmax[c] = best;
            value[[0, c]] = col[best];
        }
        Ok(self.push(value, Op::MaxRows(a, argmax)))
    }

    /// Mean token cross-entropy of `logits` (rows = positions) against `targets`,
    /// averaged over rows where `active` is true. Inactive rows get exactly zero
    /// gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], active: &[bool]) -> Result<Var> {
        let (rows, vocab) = self.shape(logits);
        self.check_shape("cross_entropy", targets.len() == rows && active.len() == rows, || {
            format!("{rows} rows, {} targets, {} mask entries", targets.len(), active.len())
        })?;
        let count = active.iter().filter(|&&a| a).count();
        if count == 0 {
            return Err(Error::InputDomain("cross-entropy over zero unmasked positions".into()));
        }
        if let Some((i, &t)) = targets
            .iter()
            .enumerate()
            .find(|&(i, &t)| active[i] && t >= vocab)
        {
            return Err(Error::InputDomain(format!(
                "target {t} at position {i} outside vocabulary of {vocab}"
            )));
        }
        let probs = softmax_rows(self.value(logits).view());
        let mut total = 0.0;
        for (i, (&t, &a)) in targets.iter().zip(active).enumerate() {
            if a {
                total -= log_softmax_at(self.value(logits).row(i), t);
            }
        }
        let value = Array2::from_elem((1, 1), total / count as f64);
        let probs = self.record.then_some(probs);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                active: active.to_vec(),
                probs,
            },
        ))
    }

    /// Mean binary cross-entropy with logits; `logits` holds one logit per element.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        self.check_shape("bce_with_logits", lv.len() == labels.len() && !labels.is_empty(), || {
            format!("{:?} logits vs {} labels", lv.dim(), labels.len())
        })?;
        let total: f64 = lv
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Array2::from_elem((1, 1), total / labels.len() as f64);
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean of all entries, as a `1×1` node.
    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Array2::from_elem((1, 1), av.sum() / av.len() as f64);
        self.push(value, Op::Mean(a))
    }

    /// Weighted sum of `1×1` nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(t, w) in terms {
            let scaled = self.scale(t, w);
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        acc.ok_or_else(|| Error::Internal("weighted_sum of no terms".into()))
    }

    /// Backpropagates from the `1×1` node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.record {
            return Err(Error::Internal("backward on an inference graph".into()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.dot(&val(*b).t()));
                accumulate(grads, *b, val(*a).t().dot(g));
            }
            Op::MatMulT(a, b) => {
                accumulate(grads, *a, g.dot(val(*b)));
                accumulate(grads, *b, g.t().dot(val(*a)));
            }
            Op::Linear { x, w, b } => {
                accumulate(grads, *x, g.dot(val(*w)));
                accumulate(grads, *w, g.t().dot(val(*x)));
                if let Some(b) = b {
                    accumulate(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, f) => accumulate(grads, *a, g * *f),
            Op::Gelu(a) => {
                let mut d = val(*a).mapv(gelu_grad);
                d *= g;
                accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (xhat, inv_std) = (xhat.as_ref().unwrap(), inv_std.as_ref().unwrap());
                accumulate(grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                accumulate(grads, *gain, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                let dxhat = g * val(*gain);
                let n = xhat.ncols() as f64;
                let sum_d = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
                let sum_dx = (&dxhat * xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
                let mut dx = &dxhat * n - &sum_d - xhat * &sum_dx;
                dx *= &(inv_std / n).insert_axis(Axis(1));
                accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let head_dim = qv.ncols() / heads;
                let scale = 1.0 / (head_dim as f64).sqrt();
                let mut dq = Array2::zeros(qv.dim());
                let mut dk = Array2::zeros(kv.dim());
                let mut dv = Array2::zeros(vv.dim());
                for (h, p) in probs.iter().enumerate() {
                    let cols = s![.., h * head_dim..(h + 1) * head_dim];
                    let d_out = g.slice(cols);
                    let d_p = d_out.dot(&vv.slice(cols).t());
                    dv.slice_mut(cols).assign(&p.t().dot(&d_out));
                    let row_dot = (&d_p * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let d_s = p * &(d_p - &row_dot) * scale;
                    dq.slice_mut(cols).assign(&d_s.dot(&kv.slice(cols)));
                    dk.slice_mut(cols).assign(&d_s.t().dot(&qv.slice(cols)));
                }
                accumulate(grads, *q, dq);
                accumulate(grads, *k, dk);
                accumulate(grads, *v, dv);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = val(p).nrows();
                    accumulate(grads, p, g.slice(s![start..start + rows, ..]).to_owned());
                    start += rows;
                }
            }
            Op::SliceRows(a, start) => {
                let mut d = Array2::zeros(val(*a).dim());
                d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                accumulate(grads, *a, d);
            }
            Op::GatherRows(table, ids) => {
                let mut d = Array2::zeros(val(*table).dim());
                for (i, &id) in ids.iter().enumerate() {
                    let mut row = d.row_mut(id);
                    row += &g.row(i);
                }
                accumulate(grads, *table, d);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.t().to_owned()),
            Op::NormalizeRows(a, norms) => {
                let norms = norms.as_ref().unwrap();
                let y = &node.value;
                let proj = (g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                let d = (g - &(y * &proj)) / &norms.view().insert_axis(Axis(1));
                accumulate(grads, *a, d);
            }
            Op::MaxRows(a, argmax) => {
                let mut d = Array2::zeros(val(*a).dim());
                for (c, &r) in argmax.iter().enumerate() {
                    d[[r, c]] = g[[0, c]];
                }
                accumulate(grads, *a, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                active,
                probs,
            } => {
                let mut d = probs.clone().unwrap();
                let count = active.iter().filter(|&&a| a).count() as f64;
                let upstream = g[[0, 0]] / count;
                for (i, mut row) in d.axis_iter_mut(Axis(0)).enumerate() {
                    if active[i] {
                        row[targets[i]] -= 1.0;
                        row *= upstream;
                    } else {
                        row.fill(0.0);
                    }
                }
                accumulate(grads, *logits, d);
            }
            Op::BceWithLogits { logits, labels } => {
                let lv = val(*logits);
                let n = labels.len() as f64;
                let upstream = g[[0, 0]];
                let mut d = Array2::zeros(lv.dim());
                Zip::from(&mut d)
                    .and(lv)
                    .and(&Array2::from_shape_vec(lv.dim(), labels.clone()).unwrap())
                    .for_each(|d, &z, &y| *d = (sigmoid(z) - y) / n * upstream);
                accumulate(grads, *logits, d);
            }
            Op::Mean(a) => {
                let shape = val(*a).dim();
                let n = (shape.0 * shape.1) as f64;
                accumulate(grads, *a, Array2::from_elem(shape, g[[0, 0]] / n));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], var: Var, delta: Array2<f64>) {
    match &mut grads[var.0] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(delta),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable row-wise softmax; `-inf` entries map to exactly zero.
pub fn softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    softmax_rows_owned(x.to_owned())
}

/// [`softmax_rows`] reusing the input buffer.
pub fn softmax_rows_owned(mut out: Array2<f64>) -> Array2<f64> {
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

fn log_softmax_at(row: ndarray::ArrayView1<f64>, index: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row[index] - lse
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_backward_matches_hand_derivation() {
        let mut g = Graph::new();
        let a = g.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = g.constant(array![[0.5], [-1.0]]);
        let y = g.matmul(a, b).unwrap();
        let loss = g.mean(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.of(a).unwrap(), &array![[0.25, -0.5], [0.25, -0.5]]);
        assert_eq!(grads.of(b).unwrap(), &array![[2.0], [3.0]]);
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut store = ParamStore::default();
        store.insert("w", array![[2.0]]);
        let mut g = Graph::new();
        let w1 = g.param(&store, "w").unwrap();
        let w2 = g.param(&store, "w").unwrap();
        assert_eq!(w1, w2);
        let y = g.matmul(w1, w2).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(g.param_grads(&grads)["w"], array![[4.0]]);
    }

    #[test]
    fn inactive_cross_entropy_rows_get_zero_gradient() {
        let mut g = Graph::new();
        let logits = g.constant(array![[1.0, 2.0, 0.5], [0.3, -1.0, 2.0]]);
        let loss = g.cross_entropy(logits, &[1, 0], &[false, true]).unwrap();
        let grads = g.backward(loss).unwrap();
        let d = grads.of(logits).unwrap();
        assert!(d.row(0).iter().all(|&v| v == 0.0));
        assert!(d.row(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn inference_graph_refuses_backward() {
        let mut g = Graph::inference();
        let a = g.constant(array![[1.0]]);
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn normalize_rows_rejects_zero_row() {
        let mut g = Graph::new();
        let a = g.constant(array![[0.0, 0.0], [1.0, 0.0]]);
        assert!(matches!(g.normalize_rows(a), Err(Error::Numeric { .. })));
    }

    #[test]
    fn softmax_masks_neg_infinity_exactly() {
        let p = softmax_rows(array![[0.0, f64::NEG_INFINITY, 1.0]].view());
        assert_eq!(p[[0, 1]], 0.0);
        assert!((p.sum() - 1.0).abs() < 1e-15);
    }
}
