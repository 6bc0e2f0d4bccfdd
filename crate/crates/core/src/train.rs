//! Training configuration, Adam, per-epoch training with checkpoints, and
//! patient-level cross-validation.
//!
//! Per-patient gradients are computed in parallel and summed in sample
//! order, so results do not depend on the thread count.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::block::{BlockConfig, FusionMode, Grid};
use crate::error::{Error, Result};
use crate::hazard::{ClassWeights, Outcome, RiskOutput};
use crate::metrics::{self, CvSummary, MetricsReport};
use crate::model::{ImageConfig, Model, ModelConfig, PreparedInput};
use crate::scan::ScanOrder;
use crate::synth::PatientRecord;
use crate::tape::{GradTape, Gradients, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, one tensor per parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update of every parameter present in `grads`.
    pub fn update(&mut self, cfg: &AdamConfig, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (id, g) in grads.iter() {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id);
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + cfg.eps);
            }
        }
    }
}

/// Component switched off in an ablation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// γ held at 0: gaps have no effect.
    Dt,
    /// No neighborhood fusion.
    Fusion,
    /// Visits of one spatial location are scanned adjacently.
    Interslice,
}

impl Ablation {
    pub fn apply(self, cfg: &mut ModelConfig) {
        match self {
            Ablation::Dt => cfg.block.time_aware = false,
            Ablation::Fusion => cfg.block.fusion = FusionMode::Off,
            Ablation::Interslice => cfg.block.scan_order = ScanOrder::InterSlice,
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dt" => Ok(Ablation::Dt),
            "fusion" => Ok(Ablation::Fusion),
            "interslice" => Ok(Ablation::Interslice),
            other => Err(Error::Config(format!(
                "unknown ablation {other:?} (expected dt, fusion or interslice)"
            ))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Dt => "dt",
            Ablation::Fusion => "fusion",
            Ablation::Interslice => "interslice",
        })
    }
}

fn default_epochs() -> usize {
    30
}

fn default_batch() -> usize {
    8
}

fn default_lrs() -> Vec<f64> {
    vec![5e-5, 1e-5]
}

/// Everything that determines a training run besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Grid searched per fold; the best mean validation c-index wins.
    #[serde(default = "default_lrs")]
    pub learning_rates: Vec<f64>,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Global gradient-norm clip applied to each batch mean.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    /// Default settings for images of the given geometry.
    pub fn for_image(image: ImageConfig, max_visits: usize) -> Result<Self> {
        let (h, w) = image.grid()?;
        let block = BlockConfig::new(16, 16, Grid {
            visits: max_visits,
            height: h,
            width: w,
        });
        Ok(Self {
            model: ModelConfig {
                image,
                block,
                horizons: crate::hazard::DEFAULT_HORIZONS,
            },
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rates: default_lrs(),
            adam: AdamConfig::default(),
            clip_norm: None,
            seed: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.learning_rates.is_empty() || self.learning_rates.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config(format!("invalid learning rates {:?}", self.learning_rates)));
        }
        if self.clip_norm.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        Ok(())
    }

    pub fn with_ablation(mut self, ablation: Option<Ablation>) -> Self {
        if let Some(a) = ablation {
            a.apply(&mut self.model);
        }
        self
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A patient ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub fold: usize,
    pub input: PreparedInput,
    pub outcome: Outcome,
}

/// Flattens records to model inputs. Image buffers are not kept.
pub fn prepare_samples(cfg: &ModelConfig, records: &[PatientRecord]) -> Result<Vec<Sample>> {
    records
        .par_iter()
        .map(|r| {
            let input = cfg
                .prepare(&r.visits)
                .map_err(|e| Error::Data(format!("patient {}: {e}", r.id)))?;
            Ok(Sample {
                id: r.id.clone(),
                fold: r.fold,
                input,
                outcome: r.outcome,
            })
        })
        .collect()
}

/// Statistics of one finished epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss over samples with a determinable horizon.
    pub train_loss: f64,
    pub batches: usize,
    pub mean_grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<MetricsReport>,
}

/// Model, optimizer state and history after `epoch` completed epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub learning_rate: f64,
    /// Validation fold held out during training, if any.
    pub fold: Option<usize>,
    pub epoch: usize,
    pub class_weights: ClassWeights,
    pub model: Model,
    pub params: ParamStore,
    pub adam: AdamState,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json("checkpoint", e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Self = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {}", c.version)));
        }
        if c.params.len() != c.adam.m.len() || c.params.len() != c.adam.v.len() {
            return Err(Error::Data("optimizer state does not match the parameters".into()));
        }
        Ok(c)
    }
}

/// A training run in progress.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub state: Checkpoint,
}

fn sample_grad(
    model: &Model,
    store: &ParamStore,
    sample: &Sample,
    weights: &ClassWeights,
) -> Result<Option<(f64, Gradients)>> {
    let mut tape = GradTape::new();
    let Some(loss) = model.loss_on_tape(&mut tape, store, &sample.input, &sample.outcome, weights)? else {
        return Ok(None);
    };
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric(format!("patient {}: loss is {value}", sample.id)));
    }
    let grads = tape
        .backward(loss)
        .map_err(|e| Error::Numeric(format!("patient {}: {e}", sample.id)))?;
    Ok(Some((value, grads)))
}

impl Trainer {
    /// Fresh model initialized from `(config.seed, fold)`.
    pub fn new(config: &TrainConfig, lr: f64, fold: Option<usize>, class_weights: ClassWeights) -> Result<Self> {
        config.validate()?;
        class_weights.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(fold.map_or(0, |f| f as u64 + 1));
        let mut params = ParamStore::new();
        let model = Model::new(&config.model, &mut params, &mut rng)?;
        let adam = AdamState::new(&params);
        Ok(Self {
            state: Checkpoint {
                version: CHECKPOINT_VERSION,
                config: config.clone(),
                learning_rate: lr,
                fold,
                epoch: 0,
                class_weights,
                model,
                params,
                adam,
                history: Vec::new(),
            },
        })
    }

    pub fn resume(checkpoint: Checkpoint) -> Self {
        Self { state: checkpoint }
    }

    /// Visit order for `epoch`; a function of `(seed, fold, epoch)` only.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let s = &self.state;
        let mut rng = ChaCha8Rng::seed_from_u64(s.config.seed ^ 0x005e_ed0f_0a11);
        rng.set_stream(((s.fold.map_or(0, |f| f + 1) as u64) << 32) | epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// One pass over `train` in shuffled mini-batches.
    pub fn train_epoch(&mut self, train: &[Sample]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let epoch = self.state.epoch + 1;
        let order = self.epoch_order(epoch, train.len());
        let (mut loss_sum, mut loss_n, mut batches, mut norm_sum) = (0.0, 0usize, 0usize, 0.0);
        for (b, chunk) in order.chunks(self.state.config.batch_size).enumerate() {
            let s = &self.state;
            let results: Vec<Result<Option<(f64, Gradients)>>> = chunk
                .par_iter()
                .map(|&i| sample_grad(&s.model, &s.params, &train[i], &s.class_weights))
                .collect();
            let mut total = Gradients::default();
            let mut n = 0usize;
            for r in results {
                let r = r.map_err(|e| Error::Numeric(format!("epoch {epoch}, batch {b}: {e}")))?;
                if let Some((loss, g)) = r {
                    loss_sum += loss;
                    n += 1;
                    total.accumulate(&g);
                }
            }
            if n == 0 {
                continue;
            }
            loss_n += n;
            total.scale(1.0 / n as f64);
            let norm = total.norm();
            if !norm.is_finite() {
                return Err(Error::Numeric(format!("epoch {epoch}, batch {b}: gradient norm is {norm}")));
            }
            if let Some(c) = s.config.clip_norm {
                if norm > c {
                    total.scale(c / norm);
                }
            }
            norm_sum += norm;
            batches += 1;
            let (cfg, lr) = (s.config.adam, s.learning_rate);
            let st = &mut self.state;
            st.adam.update(&cfg, &mut st.params, &total, lr);
        }
        if loss_n == 0 {
            return Err(Error::Data("no training sample has a determinable horizon".into()));
        }
        self.state.epoch = epoch;
        Ok(EpochRecord {
            epoch,
            train_loss: loss_sum / loss_n as f64,
            batches,
            mean_grad_norm: norm_sum / batches.max(1) as f64,
            validation: None,
        })
    }

    pub fn predict(&self, samples: &[Sample]) -> Result<Vec<RiskOutput>> {
        predict(&self.state.model, &self.state.params, samples)
    }
}

/// Risk predictions in sample order.
pub fn predict(model: &Model, params: &ParamStore, samples: &[Sample]) -> Result<Vec<RiskOutput>> {
    samples
        .par_iter()
        .map(|s| model.predict_prepared(params, &s.input).map(|p| p.risk))
        .collect()
}

pub fn evaluate(model: &Model, params: &ParamStore, samples: &[Sample]) -> Result<MetricsReport> {
    let risks = predict(model, params, samples)?;
    let outcomes: Vec<Outcome> = samples.iter().map(|s| s.outcome).collect();
    metrics::evaluate(&risks, &outcomes)
}

/// Outcome of training on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRun {
    pub fold: Option<usize>,
    pub learning_rate: f64,
    pub history: Vec<EpochRecord>,
    pub validation: Option<MetricsReport>,
}

/// Trains until `config.epochs`, optionally resuming, writing
/// `checkpoint.json` and `metrics.json` to `out` after every epoch.
pub fn train_split(
    mut trainer: Trainer,
    train: &[Sample],
    valid: &[Sample],
    out: Option<&Path>,
) -> Result<(Trainer, FoldRun)> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    while trainer.state.epoch < trainer.state.config.epochs {
        let mut rec = trainer.train_epoch(train)?;
        if !valid.is_empty() {
            rec.validation = Some(evaluate(&trainer.state.model, &trainer.state.params, valid)?);
        }
        trainer.state.history.push(rec);
        if let Some(dir) = out {
            trainer.state.save(&dir.join("checkpoint.json"))?;
            write_json(&dir.join("metrics.json"), &trainer.state.history)?;
        }
    }
    let run = FoldRun {
        fold: trainer.state.fold,
        learning_rate: trainer.state.learning_rate,
        validation: trainer.state.history.last().and_then(|r| r.validation.clone()),
        history: trainer.state.history.clone(),
    };
    Ok((trainer, run))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Cross-validated result at one learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrResult {
    pub learning_rate: f64,
    pub summary: CvSummary,
    pub runs: Vec<FoldRun>,
}

/// Cross-validation over the learning-rate grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub ablation: Option<Ablation>,
    pub results: Vec<LrResult>,
    pub best_learning_rate: f64,
}

impl CvReport {
    pub fn best(&self) -> &LrResult {
        self.results
            .iter()
            .find(|r| r.learning_rate == self.best_learning_rate)
            .expect("best rate is one of the results")
    }

    /// Validation c-index per fold at the selected learning rate.
    pub fn fold_c_index(&self) -> Vec<Option<f64>> {
        self.best().summary.folds.iter().map(|f| f.c_index).collect()
    }
}

/// Trains one model per (learning rate, fold) with the fold held out.
pub fn cross_validate(
    config: &TrainConfig,
    ablation: Option<Ablation>,
    samples: &[Sample],
    folds: usize,
    out: Option<&Path>,
) -> Result<CvReport> {
    let config = config.clone().with_ablation(ablation);
    config.validate()?;
    let mut results = Vec::new();
    for &lr in &config.learning_rates {
        let mut runs = Vec::new();
        for k in 0..folds {
            let train: Vec<Sample> = samples.iter().filter(|s| s.fold != k).cloned().collect();
            let valid: Vec<Sample> = samples.iter().filter(|s| s.fold == k).cloned().collect();
            let weights = ClassWeights::from_outcomes(train.iter().map(|s| &s.outcome), config.model.horizons);
            let trainer = Trainer::new(&config, lr, Some(k), weights)?;
            let dir = out.map(|d| d.join(format!("lr{lr:e}")).join(format!("fold{k}")));
            let (_, run) = train_split(trainer, &train, &valid, dir.as_deref())?;
            runs.push(run);
        }
        let reports = runs
            .iter()
            .map(|r| r.validation.clone().ok_or_else(|| Error::Data("a fold has no validation patients".into())))
            .collect::<Result<Vec<_>>>()?;
        results.push(LrResult {
            learning_rate: lr,
            summary: metrics::summarize(reports),
            runs,
        });
    }
    let best_learning_rate = results
        .iter()
        .max_by(|a, b| {
            let key = |r: &LrResult| r.summary.c_index.map_or(f64::NEG_INFINITY, |m| m.mean);
            key(a).total_cmp(&key(b))
        })
        .map(|r| r.learning_rate)
        .expect("at least one learning rate");
    let report = CvReport {
        ablation,
        results,
        best_learning_rate,
    };
    if let Some(dir) = out {
        write_json(&dir.join("cv.json"), &report)?;
    }
    Ok(report)
}

/// Runs `f` on a pool of `threads` workers (all cores when `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("thread count must be positive".into()));
        }
        b = b.num_threads(n);
    }
    let pool = b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
