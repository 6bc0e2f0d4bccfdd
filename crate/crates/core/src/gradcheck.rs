//! Central-difference verification of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::block::{BlockConfig, Grid};
use crate::error::{Error, Result};
use crate::hazard::{ClassWeights, Outcome, DEFAULT_HORIZONS};
use crate::model::{ImageConfig, Model, ModelConfig, Visit, VisitContent};
use crate::tape::{GradTape, ParamId, ParamStore, Var};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Worst disagreement found by [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over all checked entries.
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub entries_checked: usize,
}

/// Compares the tape gradient of `loss` against central differences for
/// every entry of every parameter in `params`.
///
/// `loss` records a forward pass on the given tape and returns the scalar
/// output; it is called once with backward and twice per entry without.
pub fn grad_check<F>(store: &ParamStore, params: &[ParamId], loss: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut GradTape) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let out = loss(store, &mut tape)?;
    let grads = tape.backward(out)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = GradTape::new();
        let v = loss(s, &mut t)?;
        Ok(t.value(v).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: 0,
        entries_checked: 0,
    };
    let mut probe = store.clone();
    for &id in params {
        let analytic = grads
            .get(id)
            .ok_or_else(|| Error::Tape(format!("{} was not registered on the tape", store.name(id))))?
            .clone();
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + GRADCHECK_STEP;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - GRADCHECK_STEP;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * GRADCHECK_STEP);
            let a = analytic.data()[j];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for {}[{j}]: analytic {a}, numeric {numeric}",
                    store.name(id)
                )));
            }
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            report.entries_checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                if rel >= report.max_rel_error {
                    report.worst_param = Some(store.name(id).to_string());
                    report.worst_index = j;
                }
            }
        }
    }
    Ok(report)
}

/// Small end-to-end model whose every parameter is gradient-checked
/// through the weighted hazard loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelCheckConfig {
    pub channels: usize,
    pub state: usize,
    pub visits: usize,
    pub height: usize,
    pub width: usize,
    pub layers: usize,
    pub gate: bool,
    pub horizons: usize,
    pub seed: u64,
    /// Std of the noise added to every parameter after init, so that
    /// zero-initialized terms are exercised.
    pub perturb: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
}

impl Default for ModelCheckConfig {
    fn default() -> Self {
        Self {
            channels: 2,
            state: 2,
            visits: 2,
            height: 2,
            width: 2,
            layers: 2,
            gate: false,
            horizons: DEFAULT_HORIZONS,
            seed: 0,
            perturb: 0.1,
            tolerance: 1e-4,
        }
    }
}

impl ModelCheckConfig {
    pub fn model_config(&self) -> ModelConfig {
        let mut block = BlockConfig::new(self.channels, self.state, Grid {
            visits: self.visits,
            height: self.height,
            width: self.width,
        });
        block.layers = self.layers;
        block.gate = self.gate;
        ModelConfig {
            image: ImageConfig {
                channels: 1,
                height: self.height,
                width: self.width,
                patch: 1,
            },
            block,
            horizons: self.horizons,
        }
    }
}

/// Result of [`check_model`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheck {
    pub report: GradCheckReport,
    pub params: usize,
    pub passed: bool,
}

/// Builds a perturbed model with patch-1 images and one event patient
/// (a gap on every visit, one view absent) and checks all gradients.
pub fn check_model(cfg: &ModelCheckConfig) -> Result<ModelCheck> {
    if cfg.visits < 2 {
        return Err(Error::Config("the check needs at least two visits".into()));
    }
    if !(cfg.perturb >= 0.0 && cfg.tolerance > 0.0) {
        return Err(Error::Config("perturb must be non-negative and tolerance positive".into()));
    }
    let mc = cfg.model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let model = Model::new(&mc, &mut store, &mut rng)?;
    let noise = Normal::new(0.0, cfg.perturb).map_err(|e| Error::Config(e.to_string()))?;
    for id in model.param_ids() {
        for v in store.get_mut(id).data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    let pixel = Normal::new(0.0, 1.0).expect("unit normal");
    let gaps = [18.0, 30.0, 12.0, 24.0];
    let mut time = 0.0;
    let visits: Vec<Visit> = (0..cfg.visits)
        .map(|t| {
            if t > 0 {
                time += gaps[(t - 1) % gaps.len()];
            }
            let mut img = || Some(Tensor::from_fn(&[1, cfg.height, cfg.width], |_| pixel.sample(&mut rng)));
            Visit {
                time,
                content: VisitContent::Views(vec![img(), None, img()]),
            }
        })
        .collect();
    let input = model.prepare(&visits)?;
    let outcome = Outcome::Event { time: time + 14.0 };
    let weights = ClassWeights {
        positive: 1.5,
        negative: 0.75,
    };
    let ids = model.param_ids();
    let report = grad_check(&store, &ids, |s, t| {
        model
            .loss_on_tape(t, s, &input, &outcome, &weights)?
            .ok_or_else(|| Error::Data("no determinable horizon".into()))
    })?;
    Ok(ModelCheck {
        passed: report.max_rel_error <= cfg.tolerance,
        params: ids.len(),
        report,
    })
}
