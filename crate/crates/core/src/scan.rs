//! Time-aware selective scan.
//!
//! Each token `u_i ∈ ℝ^d` is projected to a step logit `δ̂_i ∈ ℝ^d` and to
//! shared input/output vectors `B_i, C_i ∈ ℝ^N`. The step is stretched by the
//! calendar gap attached to the token, `δᵀᴬ = softplus(δ̂)·(1 + γ·Δt/τ_min)`,
//! and every (channel, state) pair evolves under the exact zero-order-hold
//! update of a diagonal system with eigenvalue `λ = −exp(a_log) < 0`:
//!
//! ```text
//! x_i = exp(λ δᵀᴬ) · x_{i−1} + λ⁻¹ (exp(λ δᵀᴬ) − 1) · B_i · u_i
//! ```

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softplus_scalar, sigmoid_scalar, Tensor};

/// Minimum inter-visit interval used to normalize gaps, in months.
pub const TAU_MIN_MONTHS: f64 = 12.0;

/// Below this `|λ·δ|` the ZOH input gain uses its Taylor series.
pub const ZOH_SERIES_BELOW: f64 = 1e-6;

/// Token ordering of a `T×H×W` grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanOrder {
    /// Visit outermost, then rows, then columns.
    #[default]
    VisitMajor,
    /// Spatial position outermost; the visits at one position are adjacent.
    InterSlice,
}

impl ScanOrder {
    /// `perm[p]` is the visit-major row index of the token scanned at
    /// position `p`.
    pub fn permutation(self, visits: usize, height: usize, width: usize) -> Vec<usize> {
        let plane = height * width;
        match self {
            ScanOrder::VisitMajor => (0..visits * plane).collect(),
            ScanOrder::InterSlice => (0..plane)
                .flat_map(|s| (0..visits).map(move |t| t * plane + s))
                .collect(),
        }
    }
}

/// Learnable parameters of one scan, as plain tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanParams {
    /// `[d, N]`; eigenvalues are `−exp(a_log)`.
    pub a_log: Tensor,
    /// `[d, d + 2N]`, applied as `u · w_proj`.
    pub w_proj: Tensor,
    /// `[d + 2N]`
    pub b_proj: Tensor,
    /// `[d]` skip weights.
    pub d_skip: Tensor,
    /// γ = sigmoid(gamma_logit).
    pub gamma_logit: f64,
    pub tau_min: f64,
}

impl ScanParams {
    /// Standard selective-scan initialization: `λ_{c,k} = −(k+1)`, step
    /// biases so that `softplus(b) ∈ [1e-3, 1e-1]` log-uniformly, small
    /// random projection weights, zero skip and γ = 0.5.
    pub fn init(channels: usize, state: usize, rng: &mut impl Rng) -> Self {
        let width = channels + 2 * state;
        let a_log = Tensor::from_fn(&[channels, state], |i| ((i % state) as f64 + 1.0).ln());
        let std = 1.0 / (channels as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let w_proj = Tensor::from_fn(&[channels, width], |_| normal.sample(rng));
        let b_proj = Tensor::from_fn(&[width], |i| {
            if i < channels {
                let dt = (rng.gen_range(1e-3f64.ln()..1e-1f64.ln())).exp();
                inverse_softplus(dt)
            } else {
                0.0
            }
        });
        Self {
            a_log,
            w_proj,
            b_proj,
            d_skip: Tensor::zeros(&[channels]),
            gamma_logit: 0.0,
            tau_min: TAU_MIN_MONTHS,
        }
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state_size(&self) -> usize {
        self.a_log.shape()[1]
    }

    pub fn gamma(&self) -> f64 {
        sigmoid_scalar(self.gamma_logit)
    }

    /// `λ_{c,k}`, row-major `[d, N]`.
    pub fn eigenvalues(&self) -> Vec<f64> {
        self.a_log.data().iter().map(|a| -a.exp()).collect()
    }
}

pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Token-level adaptive parameters of one token.
#[derive(Clone, Debug, PartialEq)]
pub struct Projected {
    /// `[d]`, strictly positive.
    pub delta: Vec<f64>,
    /// `[N]`
    pub b: Vec<f64>,
    /// `[N]`
    pub c: Vec<f64>,
}

/// `[δ̂, B, C] = u·W + b`, `δ = softplus(δ̂)`.
pub fn project_params(u: &[f64], params: &ScanParams) -> Result<Projected> {
    let d = params.channels();
    let n = params.state_size();
    let [rows, width] = params.w_proj.dims2()?;
    if width != d + 2 * n || params.b_proj.len() != width {
        return Err(Error::Config(format!(
            "projection width {width} (bias {}) but d + 2N = {}",
            params.b_proj.len(),
            d + 2 * n
        )));
    }
    if rows != u.len() || u.len() != d {
        return Err(Error::Dimension(format!(
            "token of width {} for a {rows}-row projection",
            u.len()
        )));
    }
    let mut out = params.b_proj.data().to_vec();
    for (p, &uv) in u.iter().enumerate() {
        let row = &params.w_proj.data()[p * width..(p + 1) * width];
        for (o, w) in out.iter_mut().zip(row) {
            *o += uv * w;
        }
    }
    Ok(Projected {
        delta: out[..d].iter().map(|&v| softplus_scalar(v)).collect(),
        b: out[d..d + n].to_vec(),
        c: out[d + n..].to_vec(),
    })
}

/// `δᵀᴬ = δ·(1 + γ·Δt/τ_min)`.
pub fn time_aware_step(delta: &[f64], gap: f64, gamma: f64, tau_min: f64) -> Result<Vec<f64>> {
    if gap < 0.0 || !gap.is_finite() {
        return Err(Error::Data(format!("gap must be a non-negative number, got {gap}")));
    }
    let factor = 1.0 + gamma * gap / tau_min;
    Ok(delta.iter().map(|v| v * factor).collect())
}

/// Exact ZOH pair `(Ā, B̄) = (e^{λδ}, (e^{λδ} − 1)/λ)` for one coordinate.
pub fn discretize(lambda: f64, step: f64) -> Result<(f64, f64)> {
    if lambda == 0.0 {
        return Err(Error::Singularity);
    }
    if lambda > 0.0 {
        return Err(Error::Config(format!("eigenvalue must be negative, got {lambda}")));
    }
    if step <= 0.0 {
        return Err(Error::Data(format!("step must be positive, got {step}")));
    }
    Ok(zoh(lambda, step))
}

#[inline]
fn zoh(lambda: f64, step: f64) -> (f64, f64) {
    let z = lambda * step;
    let a = z.exp();
    let b = if z.abs() < ZOH_SERIES_BELOW {
        step * (1.0 + 0.5 * z)
    } else {
        z.exp_m1() / lambda
    };
    (a, b)
}

/// `∂B̄/∂λ = (δ·e^{λδ} − B̄)/λ`, with a series near `λδ = 0`.
#[inline]
fn zoh_input_gain_dlambda(lambda: f64, step: f64, a: f64, b: f64) -> f64 {
    let z = lambda * step;
    if z.abs() < 1e-4 {
        step * step * (0.5 + z / 3.0 + z * z / 8.0)
    } else {
        (step * a - b) / lambda
    }
}

/// Flattened token sequence of one patient volume.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `[L, d]`, rows in scan order.
    pub tokens: Tensor,
    /// Gap (months) attached to each token.
    pub gaps: Vec<f64>,
    pub valid: Vec<bool>,
}

impl TokenSequence {
    /// Flattens `volume: [d,T,H,W]` in `order`. The gap of visit `t` is
    /// attached to the first scanned token of that visit; all others get 0.
    pub fn from_volume(
        volume: &Tensor,
        visit_gaps: &[f64],
        visit_valid: &[bool],
        order: ScanOrder,
    ) -> Result<Self> {
        let [d, t_len, h, w] = volume.dims4()?;
        let tokens = volume.clone().reshape(&[d, t_len * h * w])?.transpose()?;
        let perm = order.permutation(t_len, h, w);
        let (gaps, valid) = token_gaps(visit_gaps, visit_valid, h * w, &perm)?;
        let mut data = Vec::with_capacity(tokens.len());
        for &r in &perm {
            data.extend_from_slice(&tokens.data()[r * d..(r + 1) * d]);
        }
        let seq = Self {
            tokens: Tensor::new(vec![perm.len(), d], data)?,
            gaps,
            valid,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.tokens.shape()[0];
        if self.gaps.len() != len || self.valid.len() != len {
            return Err(Error::Dimension("token, gap and mask lengths differ".into()));
        }
        for (i, (&g, &ok)) in self.gaps.iter().zip(&self.valid).enumerate() {
            if g < 0.0 || !g.is_finite() {
                return Err(Error::Data(format!("token {i} has gap {g}")));
            }
            if !ok && g != 0.0 {
                return Err(Error::Data(format!("padded token {i} carries a gap")));
            }
        }
        if let Some(first) = self.valid.iter().position(|&v| v) {
            if self.gaps[first] != 0.0 {
                return Err(Error::Data("first valid token must have zero gap".into()));
            }
        }
        Ok(())
    }
}

/// Per-token gaps and validity for a grid scanned in `perm` order.
pub fn token_gaps(
    visit_gaps: &[f64],
    visit_valid: &[bool],
    plane: usize,
    perm: &[usize],
) -> Result<(Vec<f64>, Vec<bool>)> {
    let t_len = visit_gaps.len();
    if visit_valid.len() != t_len || perm.len() != t_len * plane {
        return Err(Error::Dimension(format!(
            "{t_len} gaps, {} masks for {} tokens",
            visit_valid.len(),
            perm.len()
        )));
    }
    if let Some(first) = visit_valid.iter().position(|&v| v) {
        if visit_gaps[first] != 0.0 {
            return Err(Error::Data("first valid visit must have zero gap".into()));
        }
    }
    for (t, (&g, &ok)) in visit_gaps.iter().zip(visit_valid).enumerate() {
        if g < 0.0 || !g.is_finite() || (!ok && g != 0.0) {
            return Err(Error::Data(format!("visit {t}: invalid gap {g} (valid: {ok})")));
        }
    }
    let mut seen = vec![false; t_len];
    let mut gaps = vec![0.0; perm.len()];
    let mut valid = vec![false; perm.len()];
    for (p, &r) in perm.iter().enumerate() {
        let t = r / plane;
        valid[p] = visit_valid[t];
        if !seen[t] {
            seen[t] = true;
            gaps[p] = visit_gaps[t];
        }
    }
    Ok((gaps, valid))
}

/// Readout `y_i = C_i·x_i` of [`selective_scan_states`]: `[L, d]`.
pub fn selective_scan(seq: &TokenSequence, params: &ScanParams) -> Result<Tensor> {
    let (states, c) = scan_with_readout_vectors(seq, params)?;
    let d = params.channels();
    let n = params.state_size();
    let len = seq.len();
    let mut y = vec![0.0; len * d];
    for i in 0..len {
        for ch in 0..d {
            let x = &states.data()[(i * d + ch) * n..(i * d + ch + 1) * n];
            y[i * d + ch] = x.iter().zip(&c[i * n..(i + 1) * n]).map(|(a, b)| a * b).sum();
        }
    }
    Tensor::new(vec![len, d], y)
}

/// Raw per-token states `[L, d, N]`; padded tokens emit zeros.
pub fn selective_scan_states(seq: &TokenSequence, params: &ScanParams) -> Result<Tensor> {
    Ok(scan_with_readout_vectors(seq, params)?.0)
}

fn scan_with_readout_vectors(seq: &TokenSequence, params: &ScanParams) -> Result<(Tensor, Vec<f64>)> {
    seq.validate()?;
    let d = params.channels();
    let n = params.state_size();
    let [len, width] = seq.tokens.dims2()?;
    if width != d {
        return Err(Error::Dimension(format!("tokens have width {width}, params {d}")));
    }
    let mut delta = Vec::with_capacity(len * d);
    let mut b = Vec::with_capacity(len * n);
    let mut c = Vec::with_capacity(len * n);
    for i in 0..len {
        let p = project_params(&seq.tokens.data()[i * d..(i + 1) * d], params)?;
        delta.extend(time_aware_step(&p.delta, seq.gaps[i], params.gamma(), params.tau_min)?);
        b.extend(p.b);
        c.extend(p.c);
    }
    let dims = ScanDims { len, channels: d, state: n };
    let mut states = scan_states(
        dims,
        seq.tokens.data(),
        &delta,
        params.a_log.data(),
        &b,
        &seq.valid,
    )?;
    for (i, ok) in seq.valid.iter().enumerate() {
        if !ok {
            states[i * d * n..(i + 1) * d * n].fill(0.0);
        }
    }
    Ok((Tensor::new(vec![len, d, n], states)?, c))
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ScanDims {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

pub(crate) fn stretch_steps(
    delta: &[f64],
    cols: usize,
    gaps: &[f64],
    gamma: f64,
    tau_min: f64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(delta.len());
    for (row, &gap) in delta.chunks(cols).zip(gaps) {
        out.extend(time_aware_step(row, gap, gamma, tau_min)?);
    }
    Ok(out)
}

/// Internal state after every token, `[L, d, N]`. Padded tokens carry the
/// previous state forward unchanged.
pub(crate) fn scan_states(
    dims: ScanDims,
    u: &[f64],
    delta: &[f64],
    a_log: &[f64],
    b: &[f64],
    valid: &[bool],
) -> Result<Vec<f64>> {
    let ScanDims { len, channels: d, state: n } = dims;
    let lambda: Vec<f64> = a_log.iter().map(|a| -a.exp()).collect();
    let mut s = vec![0.0; d * n];
    let mut states = vec![0.0; len * d * n];
    for i in 0..len {
        if valid[i] {
            let bi = &b[i * n..(i + 1) * n];
            for c in 0..d {
                let step = delta[i * d + c];
                let uc = u[i * d + c];
                let lam = &lambda[c * n..(c + 1) * n];
                let sc = &mut s[c * n..(c + 1) * n];
                for k in 0..n {
                    let (ab, bb) = zoh(lam[k], step);
                    sc[k] = ab * sc[k] + bb * bi[k] * uc;
                }
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite scan state at token {i}")));
            }
        }
        states[i * d * n..(i + 1) * d * n].copy_from_slice(&s);
    }
    Ok(states)
}

pub(crate) struct ScanGrads {
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    pub a_log: Vec<f64>,
    pub b: Vec<f64>,
}

/// Reverse sweep of [`scan_states`] given the adjoint of the emitted states.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_backward(
    dims: ScanDims,
    u: &[f64],
    delta: &[f64],
    a_log: &[f64],
    b: &[f64],
    valid: &[bool],
    states: &[f64],
    grad_out: &[f64],
) -> ScanGrads {
    let ScanDims { len, channels: d, state: n } = dims;
    let lambda: Vec<f64> = a_log.iter().map(|a| -a.exp()).collect();
    let mut gu = vec![0.0; len * d];
    let mut gdelta = vec![0.0; len * d];
    let mut glam = vec![0.0; d * n];
    let mut gb = vec![0.0; len * n];
    let mut carry = vec![0.0; d * n];
    let zeros = vec![0.0; d * n];
    for i in (0..len).rev() {
        if !valid[i] {
            continue;
        }
        let prev = if i == 0 {
            &zeros[..]
        } else {
            &states[(i - 1) * d * n..i * d * n]
        };
        let g = &grad_out[i * d * n..(i + 1) * d * n];
        let bi = &b[i * n..(i + 1) * n];
        for c in 0..d {
            let step = delta[i * d + c];
            let uc = u[i * d + c];
            let mut acc_u = 0.0;
            let mut acc_delta = 0.0;
            for k in 0..n {
                let j = c * n + k;
                let lam = lambda[j];
                let (ab, bb) = zoh(lam, step);
                let total = g[j] + carry[j];
                let d_ab = total * prev[j];
                let d_bb = total * bi[k] * uc;
                acc_u += total * bb * bi[k];
                gb[i * n + k] += total * bb * uc;
                acc_delta += d_ab * lam * ab + d_bb * ab;
                glam[j] += d_ab * step * ab + d_bb * zoh_input_gain_dlambda(lam, step, ab, bb);
                carry[j] = total * ab;
            }
            gu[i * d + c] += acc_u;
            gdelta[i * d + c] += acc_delta;
        }
    }
    let ga_log = glam.iter().zip(&lambda).map(|(g, l)| g * l).collect();
    ScanGrads {
        u: gu,
        delta: gdelta,
        a_log: ga_log,
        b: gb,
    }
}
