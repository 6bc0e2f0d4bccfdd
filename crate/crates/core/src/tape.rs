//! Reverse-mode gradient tape over [`Tensor`] values.
//!
//! A [`GradTape`] records every forward operation as a node. Parameters are
//! pulled from a [`ParamStore`] with [`GradTape::param`]; after the forward
//! pass, [`GradTape::backward`] walks the nodes in reverse and returns the
//! adjoint of every registered parameter. A tape can be differentiated once.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scan;
use crate::tensor::{
    self, conv3d_depthwise, conv3d_depthwise_backward, matmul, matmul_nt, matmul_tn,
    sigmoid_scalar, softplus_scalar, Tensor, SOFTPLUS_LINEAR_ABOVE,
};

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NamedParam {
    name: String,
    value: Tensor,
}

/// Ordered registry of named learnable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<NamedParam>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(NamedParam {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_entries(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Parameter adjoints produced by [`GradTape::backward`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` entry by entry; parameters missing here are inserted.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in &other.grads {
            match self.grads.get_mut(id) {
                Some(mine) => mine.add_assign(g),
                None => {
                    self.grads.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::all_finite)
    }

    /// Euclidean norm over every entry.
    pub fn norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    /// `y[i,:] = x[i,:] + counts[i] * b`
    AddRowBias { x: usize, b: usize, counts: Option<Vec<f64>> },
    /// `y[i,c] = x[i,c] * s[c]`
    ScaleCols { x: usize, s: usize },
    Softplus(usize),
    Sigmoid(usize),
    Silu(usize),
    Softmax(usize),
    Narrow { x: usize, start: usize },
    Transpose(usize),
    Reshape(usize),
    GatherRows { x: usize, index: Vec<usize> },
    Conv3d { x: usize, k: usize },
    WeightedSum { xs: Vec<usize>, w: usize },
    MaskedMeanRows { x: usize, mask: Vec<bool> },
    RmsNorm { x: usize, g: usize, inv_rms: Vec<f64> },
    TimeAwareStep { delta: usize, gamma: Option<usize>, gaps: Vec<f64>, tau_min: f64 },
    SelectiveScan { u: usize, delta: usize, a_log: usize, b: usize, valid: Vec<bool>, states: Vec<f64> },
    Readout { x: usize, c: usize },
    AdditiveHazard(usize),
    WeightedBce { s: usize, targets: Vec<f64>, weights: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for one reverse sweep.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    registry: BTreeMap<ParamId, usize>,
    consumed: bool,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters registered so far.
    pub fn registered(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.registry.keys().copied()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers `id` on this tape, reusing the node if already registered.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&node) = self.registry.get(&id) {
            return Var(node);
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param,
            requires_grad: true,
        });
        let idx = self.nodes.len() - 1;
        self.registry.insert(id, idx);
        Var(idx)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        Ok(self.push(y, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let y = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(y, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let y = self.value(x).scale(factor);
        self.push(y, Op::Scale(x.0, factor), &[x.0])
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x.0), &[x.0])
    }

    /// Adds the row vector `b` to every row of the matrix `x`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.add_row_bias_impl(x, b, None)
    }

    /// Adds `counts[i] * b` to row `i` of `x`.
    pub fn add_counted_bias(&mut self, x: Var, b: Var, counts: Vec<f64>) -> Result<Var> {
        self.add_row_bias_impl(x, b, Some(counts))
    }

    fn add_row_bias_impl(&mut self, x: Var, b: Var, counts: Option<Vec<f64>>) -> Result<Var> {
        let [rows, cols] = self.value(x).dims2()?;
        if self.value(b).len() != cols {
            return Err(Error::Dimension(format!(
                "bias of length {} for {cols} columns",
                self.value(b).len()
            )));
        }
        if counts.as_ref().is_some_and(|c| c.len() != rows) {
            return Err(Error::Dimension("bias counts do not match row count".into()));
        }
        let mut y = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for (r, row) in y.data_mut().chunks_mut(cols).enumerate() {
            let m = counts.as_ref().map_or(1.0, |c| c[r]);
            if m == 0.0 {
                continue;
            }
            for (v, bv) in row.iter_mut().zip(&bias) {
                *v += m * bv;
            }
        }
        Ok(self.push(y, Op::AddRowBias { x: x.0, b: b.0, counts }, &[x.0, b.0]))
    }

    /// Multiplies column `c` of the matrix `x` by `s[c]`.
    pub fn scale_cols(&mut self, x: Var, s: Var) -> Result<Var> {
        let [_, cols] = self.value(x).dims2()?;
        if self.value(s).len() != cols {
            return Err(Error::Dimension("column scale length mismatch".into()));
        }
        let scale = self.value(s).data().to_vec();
        let mut y = self.value(x).clone();
        for row in y.data_mut().chunks_mut(cols) {
            for (v, sv) in row.iter_mut().zip(&scale) {
                *v *= sv;
            }
        }
        Ok(self.push(y, Op::ScaleCols { x: x.0, s: s.0 }, &[x.0, s.0]))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let y = tensor::softplus(self.value(x));
        self.push(y, Op::Softplus(x.0), &[x.0])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid_scalar);
        self.push(y, Op::Sigmoid(x.0), &[x.0])
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * sigmoid_scalar(v));
        self.push(y, Op::Silu(x.0), &[x.0])
    }

    /// Softmax over all entries of a vector.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::vector(tensor::softmax(self.value(x).data())?);
        Ok(self.push(y, Op::Softmax(x.0), &[x.0]))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [rows, cols] = self.value(x).dims2()?;
        if start + len > cols {
            return Err(Error::Dimension(format!(
                "column range {start}..{} exceeds {cols}",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let y = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(y, Op::Narrow { x: x.0, start }, &[x.0]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).transpose()?;
        Ok(self.push(y, Op::Transpose(x.0), &[x.0]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x.0), &[x.0]))
    }

    /// Row `i` of the output is row `index[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let [rows, cols] = self.value(x).dims2()?;
        if index.iter().any(|&i| i >= rows) {
            return Err(Error::Dimension("row index out of range".into()));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in &index {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let y = Tensor::new(vec![index.len(), cols], data)?;
        Ok(self.push(y, Op::GatherRows { x: x.0, index }, &[x.0]))
    }

    /// Depthwise same-padded 3D convolution, see [`tensor::conv3d_depthwise`].
    pub fn conv3d_depthwise(&mut self, x: Var, k: Var) -> Result<Var> {
        let y = conv3d_depthwise(self.value(x), self.value(k))?;
        Ok(self.push(y, Op::Conv3d { x: x.0, k: k.0 }, &[x.0, k.0]))
    }

    /// `Σ_s w[s] · xs[s]` for same-shaped `xs` and a weight vector `w`.
    pub fn weighted_sum(&mut self, xs: &[Var], w: Var) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Dimension("weighted sum of nothing".into()))?;
        if self.value(w).len() != xs.len() {
            return Err(Error::Dimension("one weight per summand required".into()));
        }
        for &x in &xs[1..] {
            self.same_shape(first, x, "weighted_sum")?;
        }
        let weights = self.value(w).data().to_vec();
        let mut y = Tensor::zeros(self.value(first).shape());
        for (x, wv) in xs.iter().zip(&weights) {
            for (o, v) in y.data_mut().iter_mut().zip(self.nodes[x.0].value.data()) {
                *o += wv * v;
            }
        }
        let mut inputs: Vec<usize> = xs.iter().map(|v| v.0).collect();
        inputs.push(w.0);
        let op = Op::WeightedSum {
            xs: xs.iter().map(|v| v.0).collect(),
            w: w.0,
        };
        Ok(self.push(y, op, &inputs))
    }

    /// Mean over the rows of a matrix selected by `mask`.
    pub fn masked_mean_rows(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let y = tensor::masked_mean(self.value(x), 0, &mask)?;
        Ok(self.push(y, Op::MaskedMeanRows { x: x.0, mask }, &[x.0]))
    }

    /// Per-row RMS normalization with a learned per-column gain.
    pub fn rms_norm(&mut self, x: Var, g: Var, eps: f64) -> Result<Var> {
        let [_, cols] = self.value(x).dims2()?;
        if self.value(g).len() != cols {
            return Err(Error::Dimension("rms gain length mismatch".into()));
        }
        let gain = self.value(g).data().to_vec();
        let mut y = self.value(x).clone();
        let mut inv_rms = Vec::with_capacity(y.len() / cols.max(1));
        for row in y.data_mut().chunks_mut(cols) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            for (v, gv) in row.iter_mut().zip(&gain) {
                *v *= r * gv;
            }
        }
        Ok(self.push(y, Op::RmsNorm { x: x.0, g: g.0, inv_rms }, &[x.0, g.0]))
    }

    /// Gap-stretched step `δ·(1 + γ·gap/τ_min)` applied row-wise, where
    /// `gaps[i]` is the gap attached to token `i`. `gamma` is a one-element
    /// variable; `None` means γ = 0.
    pub fn time_aware_step(
        &mut self,
        delta: Var,
        gamma: Option<Var>,
        gaps: Vec<f64>,
        tau_min: f64,
    ) -> Result<Var> {
        let [rows, cols] = self.value(delta).dims2()?;
        if gaps.len() != rows {
            return Err(Error::Dimension(format!(
                "{} gaps for {rows} tokens",
                gaps.len()
            )));
        }
        let g = gamma.map_or(0.0, |v| self.value(v).data()[0]);
        let y = scan::stretch_steps(self.value(delta).data(), cols, &gaps, g, tau_min)?;
        let y = Tensor::new(vec![rows, cols], y)?;
        let mut inputs = vec![delta.0];
        inputs.extend(gamma.map(|v| v.0));
        let op = Op::TimeAwareStep {
            delta: delta.0,
            gamma: gamma.map(|v| v.0),
            gaps,
            tau_min,
        };
        Ok(self.push(y, op, &inputs))
    }

    /// Diagonal ZOH selective scan. Shapes: `u`,`delta` `[L,d]`; `a_log`
    /// `[d,N]`; `b` `[L,N]`. Returns the per-token states `[L, d·N]`
    /// (channel-major within a row); invalid tokens emit zeros.
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a_log: Var,
        b: Var,
        valid: Vec<bool>,
    ) -> Result<Var> {
        let [len, d] = self.value(u).dims2()?;
        let [d2, n] = self.value(a_log).dims2()?;
        if self.value(delta).shape() != [len, d] || d2 != d || self.value(b).shape() != [len, n]
        {
            return Err(Error::Dimension(format!(
                "scan operands disagree: u {:?}, delta {:?}, a_log {:?}, b {:?}",
                self.value(u).shape(),
                self.value(delta).shape(),
                self.value(a_log).shape(),
                self.value(b).shape()
            )));
        }
        if valid.len() != len {
            return Err(Error::Dimension("validity mask length mismatch".into()));
        }
        let dims = scan::ScanDims { len, channels: d, state: n };
        let states = scan::scan_states(
            dims,
            self.value(u).data(),
            self.value(delta).data(),
            self.value(a_log).data(),
            self.value(b).data(),
            &valid,
        )?;
        let mut emitted = states.clone();
        for (i, ok) in valid.iter().enumerate() {
            if !ok {
                emitted[i * d * n..(i + 1) * d * n].fill(0.0);
            }
        }
        let y = Tensor::new(vec![len, d * n], emitted)?;
        let op = Op::SelectiveScan {
            u: u.0,
            delta: delta.0,
            a_log: a_log.0,
            b: b.0,
            valid,
            states,
        };
        Ok(self.push(y, op, &[u.0, delta.0, a_log.0, b.0]))
    }

    /// `y[i,c] = Σ_k c[i,k] · x[i, c·N + k]`.
    pub fn readout(&mut self, x: Var, c: Var) -> Result<Var> {
        let [len, dn] = self.value(x).dims2()?;
        let [len2, n] = self.value(c).dims2()?;
        if len != len2 || n == 0 || dn % n != 0 {
            return Err(Error::Dimension("readout operands disagree".into()));
        }
        let d = dn / n;
        let (xs, cs) = (self.value(x).data(), self.value(c).data());
        let mut y = vec![0.0; len * d];
        for i in 0..len {
            let crow = &cs[i * n..(i + 1) * n];
            for ch in 0..d {
                let xrow = &xs[(i * d + ch) * n..(i * d + ch + 1) * n];
                y[i * d + ch] = xrow.iter().zip(crow).map(|(a, b)| a * b).sum();
            }
        }
        let y = Tensor::new(vec![len, d], y)?;
        Ok(self.push(y, Op::Readout { x: x.0, c: c.0 }, &[x.0, c.0]))
    }

    /// Cumulative hazard logits `b + Σ_{i≤k} softplus(h_i)` from a vector
    /// `[b, h_1..h_K]`.
    pub fn additive_hazard(&mut self, logits: Var) -> Result<Var> {
        let l = self.value(logits).data();
        if l.len() < 2 {
            return Err(Error::Dimension("hazard head needs a baseline and ≥1 hazard".into()));
        }
        let mut acc = l[0];
        let y: Vec<f64> = l[1..]
            .iter()
            .map(|&h| {
                acc += softplus_scalar(h);
                acc
            })
            .collect();
        let y = Tensor::vector(y);
        Ok(self.push(y, Op::AdditiveHazard(logits.0), &[logits.0]))
    }

    /// `Σ_k w_k · BCE(σ(s_k), y_k)` evaluated in logit space.
    pub fn weighted_bce_with_logits(
        &mut self,
        s: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    ) -> Result<Var> {
        let logits = self.value(s).data();
        if targets.len() != logits.len() || weights.len() != logits.len() {
            return Err(Error::Dimension("bce operands disagree".into()));
        }
        let loss: f64 = logits
            .iter()
            .zip(&targets)
            .zip(&weights)
            .filter(|(_, &w)| w != 0.0)
            .map(|((&z, &y), &w)| w * (y * softplus_scalar(-z) + (1.0 - y) * softplus_scalar(z)))
            .sum();
        let op = Op::WeightedBce {
            s: s.0,
            targets,
            weights,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[s.0]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    /// Reverse sweep from the scalar `loss`. Fails if called twice.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Tape(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Param) {
                adj[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut adj)?;
        }

        let mut grads = BTreeMap::new();
        for (&id, &node) in &self.registry {
            let g = adj[node]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[node].value.shape()));
            if !g.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {id:?}")));
            }
            grads.insert(id, g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let val = |i: usize| &self.nodes[i].value;
        let wants = |i: usize| self.nodes[i].requires_grad;
        let mut send = |i: usize, t: Tensor| accumulate(adj, i, t);

        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    send(*a, matmul_nt(g, val(*b)));
                }
                if wants(*b) {
                    send(*b, matmul_tn(val(*a), g));
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    send(*a, g.clone());
                }
                if wants(*b) {
                    send(*b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(*a, zip_map(g, val(*b), |x, y| x * y));
                }
                if wants(*b) {
                    send(*b, zip_map(g, val(*a), |x, y| x * y));
                }
            }
            Op::Scale(x, f) => send(*x, g.scale(*f)),
            Op::Sum(x) => send(*x, Tensor::full(val(*x).shape(), g.data()[0])),
            Op::AddRowBias { x, b, counts } => {
                if wants(*x) {
                    send(*x, g.clone());
                }
                if wants(*b) {
                    let cols = val(*b).len();
                    let mut gb = vec![0.0; cols];
                    for (r, row) in g.data().chunks(cols).enumerate() {
                        let m = counts.as_ref().map_or(1.0, |c| c[r]);
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += m * v;
                        }
                    }
                    send(*b, Tensor::new(val(*b).shape().to_vec(), gb)?);
                }
            }
            Op::ScaleCols { x, s } => {
                let cols = val(*s).len();
                let scale = val(*s).data();
                if wants(*x) {
                    let mut gx = g.clone();
                    for row in gx.data_mut().chunks_mut(cols) {
                        for (v, sv) in row.iter_mut().zip(scale) {
                            *v *= sv;
                        }
                    }
                    send(*x, gx);
                }
                if wants(*s) {
                    let mut gs = vec![0.0; cols];
                    for (grow, xrow) in g.data().chunks(cols).zip(val(*x).data().chunks(cols)) {
                        for ((o, gv), xv) in gs.iter_mut().zip(grow).zip(xrow) {
                            *o += gv * xv;
                        }
                    }
                    send(*s, Tensor::new(val(*s).shape().to_vec(), gs)?);
                }
            }
            Op::Softplus(x) => send(
                *x,
                zip_map(g, val(*x), |gv, xv| {
                    if xv > SOFTPLUS_LINEAR_ABOVE {
                        gv
                    } else {
                        gv * sigmoid_scalar(xv)
                    }
                }),
            ),
            Op::Sigmoid(x) => send(
                *x,
                zip_map(g, &node.value, |gv, y| gv * y * (1.0 - y)),
            ),
            Op::Silu(x) => send(
                *x,
                zip_map(g, val(*x), |gv, xv| {
                    let s = sigmoid_scalar(xv);
                    gv * (s + xv * s * (1.0 - s))
                }),
            ),
            Op::Softmax(x) => {
                let y = &node.value;
                let dot: f64 = g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
                send(*x, zip_map(g, y, |gv, yv| yv * (gv - dot)));
            }
            Op::Narrow { x, start } => {
                let [rows, cols] = val(*x).dims2()?;
                let len = node.value.shape()[1];
                let mut gx = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    gx.data_mut()[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                send(*x, gx);
            }
            Op::Transpose(x) => send(*x, g.transpose()?),
            Op::Reshape(x) => send(*x, g.clone().reshape(val(*x).shape())?),
            Op::GatherRows { x, index } => {
                let [rows, cols] = val(*x).dims2()?;
                let mut gx = Tensor::zeros(&[rows, cols]);
                for (o, &i) in index.iter().enumerate() {
                    for c in 0..cols {
                        gx.data_mut()[i * cols + c] += g.data()[o * cols + c];
                    }
                }
                send(*x, gx);
            }
            Op::Conv3d { x, k } => {
                let (gx, gk) = conv3d_depthwise_backward(val(*x), val(*k), g)?;
                if wants(*x) {
                    send(*x, gx);
                }
                if wants(*k) {
                    send(*k, gk);
                }
            }
            Op::WeightedSum { xs, w } => {
                let weights = val(*w).data();
                let mut gw = vec![0.0; xs.len()];
                for (s, &x) in xs.iter().enumerate() {
                    gw[s] = g.data().iter().zip(val(x).data()).map(|(a, b)| a * b).sum();
                    if wants(x) {
                        send(x, g.scale(weights[s]));
                    }
                }
                if wants(*w) {
                    send(*w, Tensor::new(val(*w).shape().to_vec(), gw)?);
                }
            }
            Op::MaskedMeanRows { x, mask } => {
                let [rows, cols] = val(*x).dims2()?;
                let count = mask.iter().filter(|&&m| m).count() as f64;
                let mut gx = Tensor::zeros(&[rows, cols]);
                for r in (0..rows).filter(|&r| mask[r]) {
                    for c in 0..cols {
                        gx.data_mut()[r * cols + c] = g.data()[c] / count;
                    }
                }
                send(*x, gx);
            }
            Op::RmsNorm { x, g: gain, inv_rms } => {
                let cols = val(*gain).len();
                let gv = val(*gain).data();
                let xv = val(*x).data();
                let mut gx = vec![0.0; xv.len()];
                let mut gg = vec![0.0; cols];
                for (r, &ir) in inv_rms.iter().enumerate() {
                    let xrow = &xv[r * cols..(r + 1) * cols];
                    let grow = &g.data()[r * cols..(r + 1) * cols];
                    let mut dot = 0.0;
                    for c in 0..cols {
                        gg[c] += grow[c] * xrow[c] * ir;
                        dot += grow[c] * gv[c] * xrow[c];
                    }
                    let k = ir * ir * ir * dot / cols as f64;
                    for c in 0..cols {
                        gx[r * cols + c] = ir * grow[c] * gv[c] - k * xrow[c];
                    }
                }
                if wants(*x) {
                    send(*x, Tensor::new(val(*x).shape().to_vec(), gx)?);
                }
                if wants(*gain) {
                    send(*gain, Tensor::new(val(*gain).shape().to_vec(), gg)?);
                }
            }
            Op::TimeAwareStep { delta, gamma, gaps, tau_min } => {
                let cols = val(*delta).shape()[1];
                let gam = gamma.map_or(0.0, |v| val(v).data()[0]);
                if wants(*delta) {
                    let mut gd = g.clone();
                    for (row, gap) in gd.data_mut().chunks_mut(cols).zip(gaps) {
                        let f = 1.0 + gam * gap / tau_min;
                        row.iter_mut().for_each(|v| *v *= f);
                    }
                    send(*delta, gd);
                }
                if let Some(gm) = gamma.filter(|&v| wants(v)) {
                    let mut acc = 0.0;
                    for ((grow, drow), gap) in g
                        .data()
                        .chunks(cols)
                        .zip(val(*delta).data().chunks(cols))
                        .zip(gaps)
                    {
                        let dot: f64 = grow.iter().zip(drow).map(|(a, b)| a * b).sum();
                        acc += dot * gap / tau_min;
                    }
                    send(gm, Tensor::new(val(gm).shape().to_vec(), vec![acc])?);
                }
            }
            Op::SelectiveScan { u, delta, a_log, b, valid, states } => {
                let [len, d] = val(*u).dims2()?;
                let n = val(*a_log).shape()[1];
                let dims = scan::ScanDims { len, channels: d, state: n };
                let grads = scan::scan_backward(
                    dims,
                    val(*u).data(),
                    val(*delta).data(),
                    val(*a_log).data(),
                    val(*b).data(),
                    valid,
                    states,
                    g.data(),
                );
                if wants(*u) {
                    send(*u, Tensor::new(vec![len, d], grads.u)?);
                }
                if wants(*delta) {
                    send(*delta, Tensor::new(vec![len, d], grads.delta)?);
                }
                if wants(*a_log) {
                    send(*a_log, Tensor::new(vec![d, n], grads.a_log)?);
                }
                if wants(*b) {
                    send(*b, Tensor::new(vec![len, n], grads.b)?);
                }
            }
            Op::Readout { x, c } => {
                let [len, n] = val(*c).dims2()?;
                let d = val(*x).shape()[1] / n;
                let (xs, cs) = (val(*x).data(), val(*c).data());
                let mut gx = vec![0.0; xs.len()];
                let mut gc = vec![0.0; cs.len()];
                for i in 0..len {
                    for ch in 0..d {
                        let gy = g.data()[i * d + ch];
                        let base = (i * d + ch) * n;
                        for k in 0..n {
                            gx[base + k] = gy * cs[i * n + k];
                            gc[i * n + k] += gy * xs[base + k];
                        }
                    }
                }
                if wants(*x) {
                    send(*x, Tensor::new(val(*x).shape().to_vec(), gx)?);
                }
                if wants(*c) {
                    send(*c, Tensor::new(vec![len, n], gc)?);
                }
            }
            Op::AdditiveHazard(l) => {
                let logits = val(*l).data();
                let k = logits.len() - 1;
                let mut gl = vec![0.0; k + 1];
                // suffix sums: hazard i feeds every cumulative output j ≥ i
                let mut suffix = 0.0;
                for i in (0..k).rev() {
                    suffix += g.data()[i];
                    gl[i + 1] = suffix * sigmoid_scalar(logits[i + 1]);
                }
                gl[0] = suffix;
                send(*l, Tensor::new(val(*l).shape().to_vec(), gl)?);
            }
            Op::WeightedBce { s, targets, weights } => {
                let up = g.data()[0];
                let gs: Vec<f64> = val(*s)
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&z, &y), &w)| up * w * (sigmoid_scalar(z) - y))
                    .collect();
                send(*s, Tensor::new(val(*s).shape().to_vec(), gs)?);
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Tensor>], idx: usize, t: Tensor) {
    match &mut adj[idx] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map operands share a shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0));
        let mut tape = GradTape::new();
        let xv = tape.param(&store, x);
        let y = tape.mul(xv, xv).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(tape.value(y).data(), &[9.0]);
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(1.0));
        let mut tape = GradTape::new();
        let xv = tape.param(&store, x);
        let y = tape.sum(xv);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Tape(_))));
    }

    #[test]
    fn unused_params_get_zero_adjoints() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(2.0));
        let unused = store.add("w", Tensor::zeros(&[2, 3]));
        let mut tape = GradTape::new();
        let xv = tape.param(&store, x);
        tape.param(&store, unused);
        let y = tape.sum(xv);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(unused).unwrap().shape(), &[2, 3]);
        assert_eq!(grads.len(), 2);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::zeros(&[2]));
        let mut tape = GradTape::new();
        let xv = tape.param(&store, x);
        assert!(matches!(tape.backward(xv), Err(Error::Tape(_))));
    }

    #[test]
    fn param_registration_is_idempotent() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(2.0));
        let mut tape = GradTape::new();
        let a = tape.param(&store, x);
        let b = tape.param(&store, x);
        assert_eq!(a, b);
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.backward(y).unwrap().get(x).unwrap().data(), &[2.0]);
    }
}
