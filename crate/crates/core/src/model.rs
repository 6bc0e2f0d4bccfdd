//! Patient-level pipeline: patch encoder, view summation, block stack,
//! masked pooling and the hazard head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::block::{BlockConfig, BlockStack};
use crate::error::{Error, Result};
use crate::hazard::{self, ClassWeights, HazardParams, Outcome, RiskOutput, DEFAULT_HORIZONS};
use crate::tape::{GradTape, ParamId, ParamStore, Var};
use crate::tensor::{masked_mean, Tensor};

/// Views (projections) per visit.
pub const MAX_VIEWS: usize = 4;

/// Input image geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            height: 64,
            width: 64,
            patch: 8,
        }
    }
}

impl ImageConfig {
    /// Feature grid `(H₀, W₀)`.
    pub fn grid(&self) -> Result<(usize, usize)> {
        let p = self.patch;
        if p == 0 || self.channels == 0 || !self.height.is_multiple_of(p) || !self.width.is_multiple_of(p) || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "{}x{} image is not divisible into {p}x{p} patches",
                self.height, self.width
            )));
        }
        Ok((self.height / p, self.width / p))
    }

    /// Length of one flattened patch.
    pub fn patch_len(&self) -> usize {
        self.channels * self.patch * self.patch
    }
}

/// What was acquired at one visit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisitContent {
    /// Up to [`MAX_VIEWS`] images `[C, H, W]`; `None` marks an absent view.
    Views(Vec<Option<Tensor>>),
    /// Precomputed feature map `[d, H₀, W₀]`.
    Features(Tensor),
}

/// One screening visit at `time` months.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub time: f64,
    pub content: VisitContent,
}

/// Non-overlapping patches of `img: [C,H,W]` as rows `[H₀·W₀, C·p²]`,
/// raster order over the patch grid, columns ordered `(c, y, x)`.
pub fn patchify(img: &Tensor, patch: usize) -> Result<Tensor> {
    let shape = img.shape();
    if shape.len() != 3 {
        return Err(Error::Dimension(format!("image must be [C,H,W], got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (gh, gw) = ImageConfig {
        channels: c,
        height: h,
        width: w,
        patch,
    }
    .grid()?;
    let plen = c * patch * patch;
    let mut out = vec![0.0; gh * gw * plen];
    let data = img.data();
    for py in 0..gh {
        for px in 0..gw {
            let row = &mut out[(py * gw + px) * plen..][..plen];
            let mut k = 0;
            for ch in 0..c {
                for y in 0..patch {
                    let src = (ch * h + py * patch + y) * w + px * patch;
                    row[k..k + patch].copy_from_slice(&data[src..src + patch]);
                    k += patch;
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, plen], out)
}

/// Linear patch embedding `F = patches · W + b`, returned as `[d, H₀, W₀]`.
pub fn encode_view(img: &Tensor, weight: &Tensor, bias: &Tensor, patch: usize) -> Result<Tensor> {
    let [plen, d] = weight.dims2()?;
    let rows = patchify(img, patch)?;
    if rows.shape()[1] != plen || bias.len() != d {
        return Err(Error::Dimension(format!(
            "encoder {plen}x{d} for patches of length {}",
            rows.shape()[1]
        )));
    }
    let mut f = crate::tensor::matmul(&rows, weight)?;
    for row in f.data_mut().chunks_mut(d) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    let (_, h, w) = (img.shape()[0], img.shape()[1] / patch, img.shape()[2] / patch);
    f.transpose()?.reshape(&[d, h, w])
}

/// Elementwise sum of the present views' feature maps.
pub fn fuse_views(features: &[&Tensor]) -> Result<Tensor> {
    let (first, rest) = features
        .split_first()
        .ok_or_else(|| Error::Data("visit has no present view".into()))?;
    let mut out = (*first).clone();
    for f in rest {
        if f.shape() != out.shape() {
            return Err(Error::Dimension(format!(
                "view features {:?} and {:?} differ",
                f.shape(),
                out.shape()
            )));
        }
        out.add_assign(f);
    }
    Ok(out)
}

/// Spatial mean, then mean over the valid visits of `z: [d,T,H₀,W₀]`.
pub fn embed_patient(z: &Tensor, valid: &[bool]) -> Result<Vec<f64>> {
    let [d, t, h, w] = z.dims4()?;
    if valid.len() != t {
        return Err(Error::Dimension(format!("{} mask entries for {t} visits", valid.len())));
    }
    let plane = h * w;
    let spatial = Tensor::from_fn(&[t, d], |i| {
        let (ti, c) = (i / d, i % d);
        let start = (c * t + ti) * plane;
        z.data()[start..start + plane].iter().sum::<f64>() / plane as f64
    });
    Ok(masked_mean(&spatial, 0, valid)?.into_data())
}

fn default_horizons() -> usize {
    DEFAULT_HORIZONS
}

/// Full model shape. `block.grid` fixes `T_max` and must match the image grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub image: ImageConfig,
    pub block: BlockConfig,
    #[serde(default = "default_horizons")]
    pub horizons: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (h0, w0) = self.image.grid()?;
        self.block.validate()?;
        if (h0, w0) != (self.block.grid.height, self.block.grid.width) {
            return Err(Error::Config(format!(
                "image grid {h0}x{w0} does not match block grid {}x{}",
                self.block.grid.height, self.block.grid.width
            )));
        }
        if self.horizons == 0 {
            return Err(Error::Config("need at least one horizon".into()));
        }
        if self.block.layers == 0 {
            return Err(Error::Config("need at least one block".into()));
        }
        Ok(())
    }

    pub fn max_visits(&self) -> usize {
        self.block.grid.visits
    }

    /// Left-pads (or keeps the most recent) visits to `T_max`.
    pub fn prepare(&self, visits: &[Visit]) -> Result<PreparedInput> {
        self.prepare_padded(visits, self.max_visits())
    }

    /// Left-pads to `len` visits, keeping the most recent `len` if longer.
    pub fn prepare_padded(&self, visits: &[Visit], len: usize) -> Result<PreparedInput> {
        let (h0, w0) = self.image.grid()?;
        let d = self.block.channels;
        let plane = h0 * w0;
        let plen = self.image.patch_len();
        validate_visits(visits, &self.image, d)?;
        if len == 0 {
            return Err(Error::Config("padded length must be positive".into()));
        }
        let kept = &visits[visits.len().saturating_sub(len)..];
        let pad = len - kept.len();

        let mut patches = Tensor::zeros(&[len * plane, plen]);
        let mut view_counts = vec![0.0; len * plane];
        let mut features: Option<Tensor> = None;
        let mut visit_gaps = vec![0.0; len];
        let mut visit_valid = vec![false; len];
        for (i, v) in kept.iter().enumerate() {
            let t = pad + i;
            visit_valid[t] = true;
            if i > 0 {
                visit_gaps[t] = v.time - kept[i - 1].time;
            }
            let rows = t * plane..(t + 1) * plane;
            match &v.content {
                VisitContent::Views(views) => {
                    for img in views.iter().flatten() {
                        let p = patchify(img, self.image.patch)?;
                        let dst = &mut patches.data_mut()[rows.start * plen..rows.end * plen];
                        for (o, x) in dst.iter_mut().zip(p.data()) {
                            *o += x;
                        }
                        for c in &mut view_counts[rows.clone()] {
                            *c += 1.0;
                        }
                    }
                }
                VisitContent::Features(f) => {
                    let fr = features.get_or_insert_with(|| Tensor::zeros(&[len * plane, d]));
                    for (r, row) in rows.clone().enumerate() {
                        for c in 0..d {
                            fr.data_mut()[row * d + c] = f.data()[c * plane + r];
                        }
                    }
                }
            }
        }
        Ok(PreparedInput {
            patches,
            view_counts,
            features,
            visit_gaps,
            visit_valid,
        })
    }
}

/// Visit history flattened to token rows, left-padded to a fixed length.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedInput {
    /// Per-row sum of the present views' patches, `[L, C·p²]`.
    pub patches: Tensor,
    /// Number of present views behind each row.
    pub view_counts: Vec<f64>,
    /// Precomputed feature rows `[L, d]`, if any visit carries features.
    pub features: Option<Tensor>,
    pub visit_gaps: Vec<f64>,
    pub visit_valid: Vec<bool>,
}

impl PreparedInput {
    pub fn visits(&self) -> usize {
        self.visit_valid.len()
    }
}

/// Embedding and risk for one patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub embedding: Vec<f64>,
    pub risk: RiskOutput,
}

/// Parameter handles of the whole model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub enc_w: ParamId,
    pub enc_b: ParamId,
    pub stack: BlockStack,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl Model {
    pub fn new(config: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.block.channels;
        let plen = config.image.patch_len();
        let k = config.horizons;
        let es = 1.0 / (plen as f64).sqrt();
        let enc_w = store.add("encoder.w", Tensor::from_fn(&[plen, d], |_| rng.gen_range(-es..es)));
        let enc_b = store.add("encoder.b", Tensor::zeros(&[d]));
        let stack = BlockStack::new(&config.block, store, rng)?;
        let hs = 1.0 / (d as f64).sqrt();
        let head_w = store.add("head.w", Tensor::from_fn(&[d, 1 + k], |_| rng.gen_range(-hs..hs)));
        let head_b = store.add("head.b", Tensor::zeros(&[1 + k]));
        Ok(Self {
            config: config.clone(),
            enc_w,
            enc_b,
            stack,
            head_w,
            head_b,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.enc_w, self.enc_b];
        ids.extend(self.stack.param_ids());
        ids.extend([self.head_w, self.head_b]);
        ids
    }

    pub fn hazard_params(&self, store: &ParamStore) -> HazardParams {
        HazardParams {
            weight: store.get(self.head_w).clone(),
            bias: store.get(self.head_b).clone(),
        }
    }

    /// Left-pads (or keeps the most recent) visits to `T_max`.
    pub fn prepare(&self, visits: &[Visit]) -> Result<PreparedInput> {
        self.config.prepare(visits)
    }

    pub fn prepare_padded(&self, visits: &[Visit], len: usize) -> Result<PreparedInput> {
        self.config.prepare_padded(visits, len)
    }

    /// Records the model up to the embedding `z: [d]` and the cumulative
    /// risk logits `[K]`.
    pub fn forward_on_tape(&self, tape: &mut GradTape, store: &ParamStore, input: &PreparedInput) -> Result<(Var, Var)> {
        let w = tape.param(store, self.enc_w);
        let b = tape.param(store, self.enc_b);
        let p = tape.constant(input.patches.clone());
        let x = tape.matmul(p, w)?;
        let mut x = tape.add_counted_bias(x, b, input.view_counts.clone())?;
        if let Some(f) = &input.features {
            let f = tape.constant(f.clone());
            x = tape.add(x, f)?;
        }
        let z = self
            .stack
            .forward_on_tape(tape, store, x, &input.visit_gaps, &input.visit_valid)?;
        let plane = self.config.block.grid.plane();
        let row_valid: Vec<bool> = (0..tape.shape(z)[0]).map(|r| input.visit_valid[r / plane]).collect();
        let emb = tape.masked_mean_rows(z, row_valid)?;
        let hw = tape.param(store, self.head_w);
        let hb = tape.param(store, self.head_b);
        let logits = hazard::risk_logits_on_tape(tape, emb, hw, hb)?;
        Ok((emb, logits))
    }

    /// Weighted horizon loss; `None` when no horizon is determinable.
    pub fn loss_on_tape(
        &self,
        tape: &mut GradTape,
        store: &ParamStore,
        input: &PreparedInput,
        outcome: &Outcome,
        weights: &ClassWeights,
    ) -> Result<Option<Var>> {
        weights.validate()?;
        let (targets, w) = hazard::horizon_targets(outcome, self.config.horizons, weights);
        if w.iter().all(|&v| v == 0.0) {
            return Ok(None);
        }
        let (_, logits) = self.forward_on_tape(tape, store, input)?;
        tape.weighted_bce_with_logits(logits, targets, w).map(Some)
    }

    pub fn predict_prepared(&self, store: &ParamStore, input: &PreparedInput) -> Result<Prediction> {
        let mut tape = GradTape::new();
        let (emb, _) = self.forward_on_tape(&mut tape, store, input)?;
        let embedding = tape.value(emb).data().to_vec();
        let risk = hazard::risk_head(&embedding, &self.hazard_params(store))?;
        Ok(Prediction { embedding, risk })
    }

    pub fn predict(&self, store: &ParamStore, visits: &[Visit]) -> Result<Prediction> {
        self.predict_prepared(store, &self.prepare(visits)?)
    }
}

fn validate_visits(visits: &[Visit], image: &ImageConfig, d: usize) -> Result<()> {
    if visits.is_empty() {
        return Err(Error::Data("patient has no visits".into()));
    }
    let (h0, w0) = image.grid()?;
    for (i, v) in visits.iter().enumerate() {
        if !v.time.is_finite() {
            return Err(Error::Data(format!("visit {i}: time is not finite")));
        }
        if i > 0 && v.time <= visits[i - 1].time {
            return Err(Error::Data(format!("visit {i}: times must strictly increase")));
        }
        match &v.content {
            VisitContent::Views(views) => {
                if views.len() > MAX_VIEWS {
                    return Err(Error::Data(format!("visit {i}: {} views", views.len())));
                }
                let mut present = 0;
                for img in views.iter().flatten() {
                    present += 1;
                    if img.shape() != [image.channels, image.height, image.width] {
                        return Err(Error::Dimension(format!(
                            "visit {i}: image {:?}, expected {:?}",
                            img.shape(),
                            [image.channels, image.height, image.width]
                        )));
                    }
                    if !img.all_finite() {
                        return Err(Error::Data(format!("visit {i}: image is not finite")));
                    }
                }
                if present == 0 {
                    return Err(Error::Data(format!("visit {i}: no view present")));
                }
            }
            VisitContent::Features(f) => {
                if f.shape() != [d, h0, w0] {
                    return Err(Error::Dimension(format!(
                        "visit {i}: features {:?}, expected {:?}",
                        f.shape(),
                        [d, h0, w0]
                    )));
                }
                if !f.all_finite() {
                    return Err(Error::Data(format!("visit {i}: features are not finite")));
                }
            }
        }
    }
    Ok(())
}
