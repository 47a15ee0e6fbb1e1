use std::ops::Range;

use rand::Rng;

use super::ops;
use super::tensor::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Node operations. List operands live in `Tape::links`.
#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Row(ParamId, usize),
    MatVec(ParamId, Var),
    Add(Var, Var),
    Sum(Range<usize>),
    Mean(Range<usize>),
    Scale(Var, f64),
    Affine(Var, f64),
    Hadamard(Var, Var),
    Dot(Var, Var),
    ScaleBy(Var, Var),
    WeightedSum(Var, Range<usize>),
    Concat(Range<usize>),
    Softmax(Var),
    Sigmoid(Var),
    Relu(Var),
    Cosine(Var, Var),
    Mask(Var, Vec<f64>),
    Bce(Var, f64),
}

#[derive(Debug)]
struct Node {
    start: usize,
    len: usize,
    op: Op,
}

impl Node {
    fn span(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// Probability clamp applied before taking logarithms in the loss.
pub const BCE_CLAMP: f64 = 1e-12;

/// Records a forward computation over a read-only [`ParamStore`] so that it
/// can be differentiated in reverse.
///
/// Nodes are appended in evaluation order, so walking them backwards is a
/// valid (and deterministic) topological order. All node values share one
/// flat buffer; a node's operands always sit below it in that buffer.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    values: Vec<f64>,
    links: Vec<Var>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(1024),
            values: Vec::with_capacity(16 * 1024),
            links: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.values[self.nodes[v.0].span()]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.values[self.nodes[v.0].start]
    }

    fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0].len
    }

    /// Appends a node of `len` values filled in by `fill`, which sees the
    /// existing values (addressable through `At`) and the new slot.
    fn record(
        &mut self,
        len: usize,
        op: Op,
        fill: impl FnOnce(At<'_>, &mut [f64]),
    ) -> Result<Var> {
        let start = self.values.len();
        self.values.resize(start + len, 0.0);
        let (old, new) = self.values.split_at_mut(start);
        fill(
            At {
                values: old,
                nodes: &self.nodes,
            },
            new,
        );
        if let Some(bad) = new.iter().find(|x| !x.is_finite()) {
            let msg = format!("non-finite value {bad} produced by {}", op_name(&op));
            self.values.truncate(start);
            return Err(Error::Numeric(msg));
        }
        self.nodes.push(Node { start, len, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn link(&mut self, parts: &[Var]) -> Range<usize> {
        let start = self.links.len();
        self.links.extend_from_slice(parts);
        start..self.links.len()
    }

    fn same_len(&self, op: &str, parts: &[Var]) -> Result<usize> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract(format!("{op} of an empty list")))?;
        let n = self.len_of(*first);
        if let Some(p) = parts.iter().find(|p| self.len_of(**p) != n) {
            return Err(Error::Contract(format!(
                "{op}: length mismatch ({n} vs {})",
                self.len_of(*p)
            )));
        }
        Ok(n)
    }

    /// A constant leaf; gradients flow into it but are not stored anywhere.
    pub fn input(&mut self, value: Vec<f64>) -> Result<Var> {
        self.record(value.len(), Op::Input, |_, out| out.copy_from_slice(&value))
    }

    /// A whole parameter tensor, flattened.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let src = self.params.get(id).data();
        self.record(src.len(), Op::Param(id), |_, out| out.copy_from_slice(src))
    }

    /// One row of a parameter matrix (an embedding lookup).
    pub fn row(&mut self, id: ParamId, row: usize) -> Result<Var> {
        let t = self.params.get(id);
        if row >= t.rows() {
            return Err(Error::Contract(format!(
                "row {row} out of range for '{}' with {} rows",
                self.params.name(id),
                t.rows()
            )));
        }
        let src = t.row(row);
        self.record(src.len(), Op::Row(id, row), |_, out| out.copy_from_slice(src))
    }

    pub fn matvec(&mut self, matrix: ParamId, x: Var) -> Result<Var> {
        let t = self.params.get(matrix);
        let (rows, cols) = (t.rows(), t.cols());
        if cols != self.len_of(x) {
            return Err(Error::Contract(format!(
                "matvec: '{}' has {cols} columns, vector has {}",
                self.params.name(matrix),
                self.len_of(x)
            )));
        }
        let data = t.data();
        self.record(rows, Op::MatVec(matrix, x), |at, out| {
            let xv = at.get(x);
            for (i, o) in out.iter_mut().enumerate() {
                *o = data[i * cols..(i + 1) * cols]
                    .iter()
                    .zip(xv)
                    .map(|(w, v)| w * v)
                    .sum();
            }
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.same_len("add", &[a, b])?;
        self.record(n, Op::Add(a, b), |at, out| {
            for ((o, x), y) in out.iter_mut().zip(at.get(a)).zip(at.get(b)) {
                *o = x + y;
            }
        })
    }

    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.same_len("sum", parts)?;
        let range = self.link(parts);
        self.record(n, Op::Sum(range), |at, out| {
            for p in parts {
                for (o, x) in out.iter_mut().zip(at.get(*p)) {
                    *o += x;
                }
            }
        })
    }

    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.same_len("mean", parts)?;
        let range = self.link(parts);
        let inv = 1.0 / parts.len() as f64;
        self.record(n, Op::Mean(range), |at, out| {
            for p in parts {
                for (o, x) in out.iter_mut().zip(at.get(*p)) {
                    *o += x;
                }
            }
            out.iter_mut().for_each(|o| *o *= inv);
        })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(self.len_of(a), Op::Scale(a, c), |at, out| {
            for (o, x) in out.iter_mut().zip(at.get(a)) {
                *o = c * x;
            }
        })
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Result<Var> {
        self.record(self.len_of(a), Op::Affine(a, mul), |at, out| {
            for (o, x) in out.iter_mut().zip(at.get(a)) {
                *o = mul * x + add;
            }
        })
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.same_len("hadamard", &[a, b])?;
        self.record(n, Op::Hadamard(a, b), |at, out| {
            for ((o, x), y) in out.iter_mut().zip(at.get(a)).zip(at.get(b)) {
                *o = x * y;
            }
        })
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("dot", &[a, b])?;
        self.record(1, Op::Dot(a, b), |at, out| {
            out[0] = at.get(a).iter().zip(at.get(b)).map(|(x, y)| x * y).sum();
        })
    }

    /// Vector `v` times the single-element `s`.
    pub fn scale_by(&mut self, v: Var, s: Var) -> Result<Var> {
        if self.len_of(s) != 1 {
            return Err(Error::Contract("scale_by expects a scalar factor".into()));
        }
        self.record(self.len_of(v), Op::ScaleBy(v, s), |at, out| {
            let c = at.get(s)[0];
            for (o, x) in out.iter_mut().zip(at.get(v)) {
                *o = c * x;
            }
        })
    }

    /// `sum_i weights[i] * parts[i]`.
    pub fn weighted_sum(&mut self, weights: Var, parts: &[Var]) -> Result<Var> {
        if self.len_of(weights) != parts.len() || parts.is_empty() {
            return Err(Error::Contract(format!(
                "weighted_sum: {} weights for {} parts",
                self.len_of(weights),
                parts.len()
            )));
        }
        let n = self.same_len("weighted_sum", parts)?;
        let range = self.link(parts);
        self.record(n, Op::WeightedSum(weights, range), |at, out| {
            let w = at.get(weights);
            for (k, p) in parts.iter().enumerate() {
                for (o, x) in out.iter_mut().zip(at.get(*p)) {
                    *o += w[k] * x;
                }
            }
        })
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.iter().map(|p| self.len_of(*p)).sum();
        let range = self.link(parts);
        self.record(n, Op::Concat(range), |at, out| {
            let mut offset = 0;
            for p in parts {
                let v = at.get(*p);
                out[offset..offset + v.len()].copy_from_slice(v);
                offset += v.len();
            }
        })
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let value = ops::softmax(self.value(a))?;
        self.record(value.len(), Op::Softmax(a), |_, out| out.copy_from_slice(&value))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.record(self.len_of(a), Op::Sigmoid(a), |at, out| {
            for (o, &x) in out.iter_mut().zip(at.get(a)) {
                *o = ops::sigmoid(x);
            }
        })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(self.len_of(a), Op::Relu(a), |at, out| {
            for (o, &x) in out.iter_mut().zip(at.get(a)) {
                *o = x.max(0.0);
            }
        })
    }

    /// Errors with [`Error::Numeric`] when either input has zero norm.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::cosine(self.value(a), self.value(b))?;
        self.record(1, Op::Cosine(a, b), |_, out| out[0] = value)
    }

    /// Inverted dropout. Identity (no node recorded) outside training or at `p = 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout rate {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.len_of(a))
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let applied = ops::hadamard(self.value(a), &mask)?;
        self.record(mask.len(), Op::Mask(a, mask), |_, out| {
            out.copy_from_slice(&applied)
        })
    }

    /// Binary cross entropy of a probability against label `y`, with the
    /// probability clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn bce(&mut self, prob: Var, y: f64) -> Result<Var> {
        if self.len_of(prob) != 1 {
            return Err(Error::Contract("bce expects a scalar probability".into()));
        }
        let p = self.scalar(prob).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let value = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        self.record(1, Op::Bce(prob, y), |_, out| out[0] = value)
    }

    /// Reverse-mode sweep from the scalar `output`, seeded with `seed`.
    /// Parameter gradients are added into `grads`; the returned adjoints
    /// cover every recorded node.
    pub fn backward(&self, output: Var, seed: f64, grads: &mut Gradients) -> Result<Adjoints> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Contract(
                "backward called on a value that was not recorded on this tape".into(),
            ));
        }
        if self.len_of(output) != 1 {
            return Err(Error::Contract("backward requires a scalar output".into()));
        }
        if grads.len() != self.params.len() {
            return Err(Error::Contract(
                "gradient buffers do not match the parameter store".into(),
            ));
        }
        let top = &self.nodes[output.0];
        let mut adj = vec![0.0; top.start + 1];
        let mut live = vec![false; output.0 + 1];
        adj[top.start] = seed;
        live[output.0] = true;

        for idx in (0..=output.0).rev() {
            if !live[idx] {
                continue;
            }
            let node = &self.nodes[idx];
            let (below, here) = adj.split_at_mut(node.start);
            let g = &here[..node.len];
            if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {bad} reaching {}",
                    op_name(&node.op)
                )));
            }
            let mut acc = Acc {
                adj: below,
                live: &mut live,
                nodes: &self.nodes,
            };
            let val = |v: Var| &self.values[self.nodes[v.0].span()];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    for (a, b) in grads.get_mut(*id).iter_mut().zip(g) {
                        *a += b;
                    }
                }
                Op::Row(id, r) => {
                    let d = g.len();
                    let dst = &mut grads.get_mut(*id)[r * d..(r + 1) * d];
                    for (a, b) in dst.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                Op::MatVec(id, x) => {
                    let t = self.params.get(*id);
                    let cols = t.cols();
                    let xv = val(*x);
                    let dw = grads.get_mut(*id);
                    for (i, gi) in g.iter().enumerate() {
                        let row = &mut dw[i * cols..(i + 1) * cols];
                        for (w, xj) in row.iter_mut().zip(xv) {
                            *w += gi * xj;
                        }
                    }
                    let dx = acc.slot(*x);
                    for (i, gi) in g.iter().enumerate() {
                        for (dxj, w) in dx.iter_mut().zip(t.row(i)) {
                            *dxj += gi * w;
                        }
                    }
                }
                Op::Add(a, b) => {
                    acc.add(*a, g, 1.0);
                    acc.add(*b, g, 1.0);
                }
                Op::Sum(parts) => {
                    for p in &self.links[parts.clone()] {
                        acc.add(*p, g, 1.0);
                    }
                }
                Op::Mean(parts) => {
                    let c = 1.0 / parts.len() as f64;
                    for p in &self.links[parts.clone()] {
                        acc.add(*p, g, c);
                    }
                }
                Op::Scale(a, c) | Op::Affine(a, c) => acc.add(*a, g, *c),
                Op::Hadamard(a, b) => {
                    acc.add_product(*a, g, val(*b));
                    acc.add_product(*b, g, val(*a));
                }
                Op::Dot(a, b) => {
                    acc.add(*a, val(*b), g[0]);
                    acc.add(*b, val(*a), g[0]);
                }
                Op::ScaleBy(v, s) => {
                    let ds: f64 = g.iter().zip(val(*v)).map(|(x, y)| x * y).sum();
                    acc.add(*v, g, val(*s)[0]);
                    acc.slot(*s)[0] += ds;
                }
                Op::WeightedSum(w, parts) => {
                    let weights = val(*w);
                    for (k, p) in self.links[parts.clone()].iter().enumerate() {
                        let dw: f64 = g.iter().zip(val(*p)).map(|(x, y)| x * y).sum();
                        acc.add(*p, g, weights[k]);
                        acc.slot(*w)[k] += dw;
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in &self.links[parts.clone()] {
                        let n = self.len_of(*p);
                        acc.add(*p, &g[offset..offset + n], 1.0);
                        offset += n;
                    }
                }
                Op::Softmax(a) => {
                    let y = val(Var(idx));
                    let inner: f64 = g.iter().zip(y).map(|(x, s)| x * s).sum();
                    for ((d, x), s) in acc.slot(*a).iter_mut().zip(g).zip(y) {
                        *d += s * (x - inner);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = val(Var(idx));
                    for ((d, x), s) in acc.slot(*a).iter_mut().zip(g).zip(y) {
                        *d += x * s * (1.0 - s);
                    }
                }
                Op::Relu(a) => {
                    let inp = val(*a);
                    for ((d, x), i) in acc.slot(*a).iter_mut().zip(g).zip(inp) {
                        if *i > 0.0 {
                            *d += x;
                        }
                    }
                }
                Op::Cosine(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (na, nb) = (ops::norm(av), ops::norm(bv));
                    let c = self.scalar(Var(idx));
                    let s = g[0];
                    for ((d, x), y) in acc.slot(*a).iter_mut().zip(av).zip(bv) {
                        *d += s * (y / (na * nb) - c * x / (na * na));
                    }
                    for ((d, x), y) in acc.slot(*b).iter_mut().zip(av).zip(bv) {
                        *d += s * (x / (na * nb) - c * y / (nb * nb));
                    }
                }
                Op::Mask(a, mask) => acc.add_product(*a, g, mask),
                Op::Bce(prob, y) => {
                    let p = self.scalar(*prob);
                    let dp = if p < BCE_CLAMP || p > 1.0 - BCE_CLAMP {
                        0.0
                    } else {
                        -y / p + (1.0 - y) / (1.0 - p)
                    };
                    acc.slot(*prob)[0] += g[0] * dp;
                }
            }
        }
        Ok(Adjoints {
            spans: self.nodes[..=output.0].iter().map(Node::span).collect(),
            adj,
            live,
        })
    }
}

/// Read access to the values recorded so far.
struct At<'a> {
    values: &'a [f64],
    nodes: &'a [Node],
}

impl<'a> At<'a> {
    fn get(&self, v: Var) -> &'a [f64] {
        &self.values[self.nodes[v.0].span()]
    }
}

/// Adjoint accumulation into nodes below the one being processed.
struct Acc<'a> {
    adj: &'a mut [f64],
    live: &'a mut [bool],
    nodes: &'a [Node],
}

impl Acc<'_> {
    fn slot(&mut self, v: Var) -> &mut [f64] {
        self.live[v.0] = true;
        &mut self.adj[self.nodes[v.0].span()]
    }

    /// `adj[v] += c * g`.
    fn add(&mut self, v: Var, g: &[f64], c: f64) {
        for (a, b) in self.slot(v).iter_mut().zip(g) {
            *a += c * b;
        }
    }

    /// `adj[v] += g ∘ other`.
    fn add_product(&mut self, v: Var, g: &[f64], other: &[f64]) {
        for ((a, b), o) in self.slot(v).iter_mut().zip(g).zip(other) {
            *a += b * o;
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param(_) => "param",
        Op::Row(..) => "row",
        Op::MatVec(..) => "matvec",
        Op::Add(..) => "add",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::Scale(..) => "scale",
        Op::Affine(..) => "affine",
        Op::Hadamard(..) => "hadamard",
        Op::Dot(..) => "dot",
        Op::ScaleBy(..) => "scale_by",
        Op::WeightedSum(..) => "weighted_sum",
        Op::Concat(_) => "concat",
        Op::Softmax(_) => "softmax",
        Op::Sigmoid(_) => "sigmoid",
        Op::Relu(_) => "relu",
        Op::Cosine(..) => "cosine",
        Op::Mask(..) => "dropout",
        Op::Bce(..) => "bce",
    }
}

/// Per-node adjoints from one backward sweep.
pub struct Adjoints {
    spans: Vec<Range<usize>>,
    adj: Vec<f64>,
    live: Vec<bool>,
}

impl Adjoints {
    /// Gradient of the output with respect to `v`; empty when `v` did not
    /// influence the output.
    pub fn wrt(&self, v: Var) -> &[f64] {
        match self.live.get(v.0) {
            Some(true) => &self.adj[self.spans[v.0].clone()],
            _ => &[],
        }
    }
}
