//! Direct loop implementations used as oracles by the integration tests.
#![allow(dead_code)]

use dtmamba::hazard::Outcome;
use dtmamba::metrics::ScoredOutcome;
use dtmamba::tensor::Tensor;
use dtmamba::{Block, FusionMode, ParamStore, ScanOrder};

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One ZOH update of a scalar state.
pub fn zoh_update(lambda: f64, step: f64, h: f64, u: f64) -> f64 {
    (lambda * step).exp() * h + ((lambda * step).exp() - 1.0) / lambda * u
}

/// Visit-major rows `(t, y, x)` listed in scan order.
pub fn scan_rows(order: ScanOrder, visits: usize, height: usize, width: usize) -> Vec<usize> {
    let plane = height * width;
    let mut rows = Vec::new();
    match order {
        ScanOrder::VisitMajor => {
            for t in 0..visits {
                for s in 0..plane {
                    rows.push(t * plane + s);
                }
            }
        }
        ScanOrder::InterSlice => {
            for s in 0..plane {
                for t in 0..visits {
                    rows.push(t * plane + s);
                }
            }
        }
    }
    rows
}

/// Parameters of one selective scan in plain nested form.
pub struct PlainScan {
    /// `[d][N]`
    pub a_log: Vec<Vec<f64>>,
    /// `[d][d + 2N]`
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub gamma: f64,
    pub tau_min: f64,
}

/// Readout `C_i·x_i` per visit-major row, `[rows][d]`; padded rows read 0
/// and hold the state.
pub fn scan_oracle(
    p: &PlainScan,
    u: &[Vec<f64>],
    order: ScanOrder,
    shape: (usize, usize, usize),
    visit_gaps: &[f64],
    visit_valid: &[bool],
) -> Vec<Vec<f64>> {
    let (visits, height, width) = shape;
    let plane = height * width;
    let d = p.a_log.len();
    let n = p.a_log[0].len();
    let mut state = vec![vec![0.0; n]; d];
    let mut seen = vec![false; visits];
    let mut y = vec![vec![0.0; d]; u.len()];
    for r in scan_rows(order, visits, height, width) {
        let t = r / plane;
        let gap = if seen[t] { 0.0 } else { visit_gaps[t] };
        seen[t] = true;
        if !visit_valid[t] {
            continue;
        }
        let mut proj = p.b.clone();
        for (i, &ui) in u[r].iter().enumerate() {
            for (o, wv) in proj.iter_mut().zip(&p.w[i]) {
                *o += ui * wv;
            }
        }
        let b_in = &proj[d..d + n];
        let c_out = &proj[d + n..];
        for c in 0..d {
            let step = softplus(proj[c]) * (1.0 + p.gamma * gap / p.tau_min);
            for k in 0..n {
                let lambda = -p.a_log[c][k].exp();
                state[c][k] = zoh_update(lambda, step, state[c][k], b_in[k] * u[r][c]);
            }
            y[r][c] = (0..n).map(|k| c_out[k] * state[c][k]).sum();
        }
    }
    y
}

/// Zero-padded depthwise cross-correlation of `x: [d][T][H][W]` with one
/// centered `[d][kt][kh][kw]` bank, written as a neighbor sum.
pub fn neighbor_sum(x: &Tensor, filter: &Tensor) -> Tensor {
    let s = x.shape();
    let (d, tn, hn, wn) = (s[0], s[1], s[2], s[3]);
    let k = filter.shape();
    let (kt, kh, kw) = (k[1], k[2], k[3]);
    let at = |c: usize, t: usize, i: usize, j: usize| x.data()[((c * tn + t) * hn + i) * wn + j];
    let tap = |c: usize, a: usize, b: usize, e: usize| filter.data()[((c * kt + a) * kh + b) * kw + e];
    let mut out = vec![0.0; x.len()];
    for c in 0..d {
        for t in 0..tn {
            for i in 0..hn {
                for j in 0..wn {
                    let mut acc = 0.0;
                    for a in 0..kt {
                        for b in 0..kh {
                            for e in 0..kw {
                                let tt = t as isize + a as isize - (kt / 2) as isize;
                                let ii = i as isize + b as isize - (kh / 2) as isize;
                                let jj = j as isize + e as isize - (kw / 2) as isize;
                                if tt < 0 || ii < 0 || jj < 0 || tt >= tn as isize || ii >= hn as isize || jj >= wn as isize
                                {
                                    continue;
                                }
                                acc += tap(c, a, b, e) * at(c, tt as usize, ii as usize, jj as usize);
                            }
                        }
                    }
                    out[((c * tn + t) * hn + i) * wn + j] = acc;
                }
            }
        }
    }
    Tensor::new(s.to_vec(), out).unwrap()
}

/// `Σ_s softmax(α)_s · neighbor_sum(x, filter_s)`.
pub fn fuse_oracle(x: &Tensor, filters: &[Tensor], alpha: &[f64]) -> Tensor {
    let m = alpha.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = alpha.iter().map(|a| (a - m).exp()).sum();
    let mut out = vec![0.0; x.len()];
    for (f, a) in filters.iter().zip(alpha) {
        let beta = (a - m).exp() / z;
        for (o, v) in out.iter_mut().zip(neighbor_sum(x, f).data()) {
            *o += beta * v;
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

fn rows_of(t: &Tensor, d: usize) -> Vec<Vec<f64>> {
    let len = t.len() / d;
    (0..len).map(|r| (0..d).map(|c| t.data()[c * len + r]).collect()).collect()
}

fn volume_of(rows: &[Vec<f64>], shape: &[usize]) -> Tensor {
    let len = rows.len();
    Tensor::from_fn(shape, |i| rows[i % len][i / len])
}

/// One block with readout fusion (or none) on `volume: [d,T,H,W]`.
pub fn block_oracle(
    block: &Block,
    store: &ParamStore,
    volume: &Tensor,
    visit_gaps: &[f64],
    visit_valid: &[bool],
) -> Tensor {
    let cfg = &block.config;
    let s = volume.shape().to_vec();
    let (d, n) = (cfg.channels, cfg.state);
    let plane = s[2] * s[3];
    let x = rows_of(volume, d);
    let gain = store.get(block.norm_gain).data();
    let u: Vec<Vec<f64>> = x
        .iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            row.iter().zip(gain).map(|(v, g)| v / (ms + cfg.norm_eps).sqrt() * g).collect()
        })
        .collect();
    let width = d + 2 * n;
    let a_log = store.get(block.a_log).data();
    let w = store.get(block.w_proj).data();
    let plain = PlainScan {
        a_log: (0..d).map(|c| a_log[c * n..(c + 1) * n].to_vec()).collect(),
        w: (0..d).map(|i| w[i * width..(i + 1) * width].to_vec()).collect(),
        b: store.get(block.b_proj).data().to_vec(),
        gamma: if cfg.time_aware {
            sigmoid(store.get(block.gamma_logit).data()[0])
        } else {
            0.0
        },
        tau_min: cfg.tau_min,
    };
    let y = scan_oracle(&plain, &u, cfg.scan_order, (s[1], s[2], s[3]), visit_gaps, visit_valid);
    let mixed = match cfg.fusion {
        FusionMode::Off => y,
        FusionMode::Readout => {
            let filters: Vec<Tensor> = block.filters.iter().map(|&f| store.get(f).clone()).collect();
            let alpha = store.get(block.alpha.unwrap()).data().to_vec();
            rows_of(&fuse_oracle(&volume_of(&y, &s), &filters, &alpha), d)
        }
        FusionMode::State => panic!("state fusion has no oracle here"),
    };
    let dskip = store.get(block.d_skip).data();
    let mut z = x.clone();
    for r in 0..x.len() {
        if !visit_valid[r / plane] {
            continue;
        }
        let gate: Vec<f64> = match block.gate {
            Some((gw, gb)) => {
                let (gw, gb) = (store.get(gw).data(), store.get(gb).data());
                (0..d)
                    .map(|c| {
                        let a = gb[c] + (0..d).map(|i| u[r][i] * gw[i * d + c]).sum::<f64>();
                        a * sigmoid(a)
                    })
                    .collect()
            }
            None => vec![1.0; d],
        };
        for c in 0..d {
            z[r][c] += (mixed[r][c] + dskip[c] * u[r][c]) * gate[c];
        }
    }
    volume_of(&z, &s)
}

/// Harrell's c-index by enumerating every ordered pair.
pub fn brute_c_index(samples: &[ScoredOutcome]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for a in samples {
        for b in samples {
            if a.outcome.is_event() && a.outcome.time() < b.outcome.time() {
                den += 1.0;
                if a.score > b.score {
                    num += 1.0;
                } else if a.score == b.score {
                    num += 0.5;
                }
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

/// AUC at `year` by enumerating every positive/negative pair.
pub fn brute_auc(samples: &[ScoredOutcome], year: usize) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for p in samples.iter().filter(|s| s.outcome.label_at(year) == Some(true)) {
        for q in samples.iter().filter(|s| s.outcome.label_at(year) == Some(false)) {
            den += 1.0;
            if p.score > q.score {
                num += 1.0;
            } else if p.score == q.score {
                num += 0.5;
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

/// A cohort of `n` samples with coarse scores and times, so ties occur.
pub fn random_cohort(rng: &mut impl rand::Rng, n: usize) -> Vec<ScoredOutcome> {
    (0..n)
        .map(|_| {
            let time = rng.gen_range(1..=8) as f64 * 9.0;
            let outcome = if rng.gen_bool(0.5) {
                Outcome::Event { time }
            } else {
                Outcome::Censored { follow_up: time }
            };
            ScoredOutcome {
                score: rng.gen_range(0..6) as f64 / 5.0 - 0.5,
                outcome,
            }
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
