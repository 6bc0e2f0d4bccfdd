//! Harrell's concordance index and per-horizon AUC under censoring.
//!
//! Both are rank statistics computed from integer pair counts, so the
//! results are identical to brute-force pair enumeration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hazard::{Outcome, RiskOutput};

/// A risk score paired with its observed outcome.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredOutcome {
    pub score: f64,
    pub outcome: Outcome,
}

fn check_scores(samples: &[ScoredOutcome]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        if !s.score.is_finite() {
            return Err(Error::Data(format!("sample {i}: score {} is not finite", s.score)));
        }
        s.outcome.validate()?;
    }
    Ok(())
}

/// Dense 0-based ranks of `values` (equal values share a rank).
fn dense_ranks(values: &[f64]) -> (Vec<usize>, usize) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0; values.len()];
    let mut r = 0;
    for (k, &i) in idx.iter().enumerate() {
        if k > 0 && values[i] != values[idx[k - 1]] {
            r += 1;
        }
        ranks[i] = r;
    }
    (ranks, if values.is_empty() { 0 } else { r + 1 })
}

struct Fenwick(Vec<u64>);

impl Fenwick {
    fn new(n: usize) -> Self {
        Self(vec![0; n + 1])
    }

    fn add(&mut self, i: usize) {
        let mut i = i + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< i`.
    fn below(&self, i: usize) -> u64 {
        let mut i = i;
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Harrell's c-index. A pair `(i, j)` is comparable when `i` has an event at
/// `t_i < t_j`; it is concordant when `score_i > score_j`, and score ties
/// count one half. `O(n log n)`.
pub fn c_index(samples: &[ScoredOutcome]) -> Result<f64> {
    check_scores(samples)?;
    let scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    let (ranks, n_ranks) = dense_ranks(&scores);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[b].outcome.time().total_cmp(&samples[a].outcome.time()));

    let mut tree = Fenwick::new(n_ranks);
    let mut inserted = 0u64;
    let (mut twice_concordant, mut comparable) = (0u64, 0u64);
    let mut k = 0;
    while k < order.len() {
        let t = samples[order[k]].outcome.time();
        let mut end = k;
        while end < order.len() && samples[order[end]].outcome.time() == t {
            end += 1;
        }
        for &i in &order[k..end] {
            if samples[i].outcome.is_event() {
                let below = tree.below(ranks[i]);
                let tied = tree.below(ranks[i] + 1) - below;
                twice_concordant += 2 * below + tied;
                comparable += inserted;
            }
        }
        for &i in &order[k..end] {
            tree.add(ranks[i]);
            inserted += 1;
        }
        k = end;
    }
    if comparable == 0 {
        return Err(Error::UndefinedMetric("c-index has no comparable pairs".into()));
    }
    Ok(twice_concordant as f64 / (2 * comparable) as f64)
}

/// Mann–Whitney AUC at `year` over samples whose label is determinable
/// there. `score` should be the predicted `P(year)`.
pub fn auc_at(samples: &[ScoredOutcome], year: usize) -> Result<f64> {
    check_scores(samples)?;
    let labelled: Vec<(f64, bool)> = samples
        .iter()
        .filter_map(|s| s.outcome.label_at(year).map(|y| (s.score, y)))
        .collect();
    let n_pos = labelled.iter().filter(|(_, y)| *y).count() as u64;
    let n_neg = labelled.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC at {year}y needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    let mut idx: Vec<usize> = (0..labelled.len()).collect();
    idx.sort_by(|&a, &b| labelled[a].0.total_cmp(&labelled[b].0));
    // Twice the midrank of a tie block spanning 1-based ranks lo..=hi is lo + hi.
    let mut twice_rank_sum = 0u64;
    let mut k = 0;
    while k < idx.len() {
        let mut end = k + 1;
        while end < idx.len() && labelled[idx[end]].0 == labelled[idx[k]].0 {
            end += 1;
        }
        let twice_mid = (k + 1 + end) as u64;
        let pos_in_block = idx[k..end].iter().filter(|&&i| labelled[i].1).count() as u64;
        twice_rank_sum += twice_mid * pos_in_block;
        k = end;
    }
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// AUC at one horizon together with its determinability counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonAuc {
    pub year: usize,
    /// `None` when only one class is determinable.
    pub auc: Option<f64>,
    pub determinable: usize,
    pub positives: usize,
}

/// Metrics for one evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    /// Ranked by the last-horizon risk; `None` without comparable pairs.
    pub c_index: Option<f64>,
    pub auc: Vec<HorizonAuc>,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// c-index on `P(K)` and AUC at every horizon `k` on `P(k)`.
///
/// Samples are ranked by the cumulative logits, which order them exactly as
/// the probabilities do but do not round to a tie once `P(k)` saturates.
pub fn evaluate(risks: &[RiskOutput], outcomes: &[Outcome]) -> Result<MetricsReport> {
    if risks.len() != outcomes.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} outcomes",
            risks.len(),
            outcomes.len()
        )));
    }
    let horizons = risks.first().map_or(0, |r| r.cumulative.len());
    if risks.iter().any(|r| r.cumulative.len() != horizons) {
        return Err(Error::Dimension("predictions disagree on the horizon count".into()));
    }
    let logits: Vec<Vec<f64>> = risks.iter().map(RiskOutput::cumulative_logits).collect();
    let at = |k: usize| -> Vec<ScoredOutcome> {
        logits
            .iter()
            .zip(outcomes)
            .map(|(l, &outcome)| ScoredOutcome { score: l[k], outcome })
            .collect()
    };
    let c = if horizons == 0 {
        None
    } else {
        defined(c_index(&at(horizons - 1)))?
    };
    let mut auc = Vec::with_capacity(horizons);
    for k in 0..horizons {
        let year = k + 1;
        let labels: Vec<bool> = outcomes.iter().filter_map(|o| o.label_at(year)).collect();
        auc.push(HorizonAuc {
            year,
            auc: defined(auc_at(&at(k), year))?,
            determinable: labels.len(),
            positives: labels.iter().filter(|&&y| y).count(),
        });
    }
    Ok(MetricsReport {
        samples: risks.len(),
        c_index: c,
        auc,
    })
}

/// Mean and sample standard deviation over the folds where a value exists.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

/// Cross-validation summary in the `mean ± std` form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub folds: Vec<MetricsReport>,
    pub c_index: Option<MeanStd>,
    pub auc: Vec<Option<MeanStd>>,
}

pub fn summarize(folds: Vec<MetricsReport>) -> CvSummary {
    let c_index = MeanStd::of(folds.iter().filter_map(|f| f.c_index));
    let horizons = folds.iter().map(|f| f.auc.len()).max().unwrap_or(0);
    let auc = (0..horizons)
        .map(|k| MeanStd::of(folds.iter().filter_map(|f| f.auc.get(k).and_then(|h| h.auc))))
        .collect();
    CvSummary { folds, c_index, auc }
}
