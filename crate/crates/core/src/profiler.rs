//! Analytic parameter and FLOP counts, and measured throughput.
//!
//! FLOPs are fused multiply–adds. Per token and per block:
//!
//! | term        | count                        |
//! |-------------|------------------------------|
//! | norm        | `2d`                         |
//! | projection  | `d·(d+2N)`                   |
//! | recurrence  | `2·d·N`                      |
//! | readout     | `d·N`                        |
//! | fusion      | `Σ_s c·kt·kh·kw`             |
//! | mix         | `|𝒦|·c`                      |
//! | skip        | `d`                          |
//! | gate        | `d² + 2d` (when enabled)     |
//!
//! with `c = d` for readout fusion and `c = d·N` for state fusion. Every term
//! scales with the token count, so `FLOPs(L) = L · Σ terms`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::block::{BlockConfig, BlockStack, FusionMode, Grid};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tape::ParamStore;
use crate::tensor::Tensor;

/// Parameter counts of one block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockParams {
    pub projection: usize,
    pub a_log: usize,
    pub d_skip: usize,
    pub gamma: usize,
    pub fusion: usize,
    pub norm: usize,
    pub gate: usize,
}

impl BlockParams {
    /// Scan and fusion parameters.
    pub fn core(&self) -> usize {
        self.projection + self.a_log + self.d_skip + self.gamma + self.fusion
    }

    pub fn total(&self) -> usize {
        self.core() + self.norm + self.gate
    }
}

/// Parameter counts of a block stack, plus the encoder and head when known.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub per_block: BlockParams,
    pub layers: usize,
    pub blocks: usize,
    pub encoder: usize,
    pub head: usize,
    pub total: usize,
}

fn fusion_channels(c: &BlockConfig) -> usize {
    match c.fusion {
        FusionMode::State => c.channels * c.state,
        _ => c.channels,
    }
}

pub fn count_block_params(c: &BlockConfig) -> Result<BlockParams> {
    c.validate()?;
    let (d, n) = (c.channels, c.state);
    let width = c.projection_width();
    let fusion = if c.fusion == FusionMode::Off {
        0
    } else {
        let kernels = c.kernels()?;
        let ch = fusion_channels(c);
        kernels.iter().map(|k| ch * k[0] * k[1] * k[2]).sum::<usize>() + kernels.len()
    };
    Ok(BlockParams {
        projection: d * width + width,
        a_log: d * n,
        d_skip: d,
        gamma: 1,
        fusion,
        norm: d,
        gate: if c.gate { d * d + d } else { 0 },
    })
}

/// Counts for `config.layers` blocks only.
pub fn count_params(c: &BlockConfig) -> Result<ParamCounts> {
    let per_block = count_block_params(c)?;
    let blocks = per_block.total() * c.layers;
    Ok(ParamCounts {
        per_block,
        layers: c.layers,
        blocks,
        encoder: 0,
        head: 0,
        total: blocks,
    })
}

/// Counts for the full model, encoder and head included.
pub fn count_model_params(m: &ModelConfig) -> Result<ParamCounts> {
    m.validate()?;
    let mut counts = count_params(&m.block)?;
    let d = m.block.channels;
    counts.encoder = m.image.patch_len() * d + d;
    counts.head = (d + 1) * (1 + m.horizons);
    counts.total = counts.blocks + counts.encoder + counts.head;
    Ok(counts)
}

/// Per-token FMA counts of one block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenFlops {
    pub norm: u64,
    pub projection: u64,
    pub recurrence: u64,
    pub readout: u64,
    pub fusion: u64,
    pub mix: u64,
    pub skip: u64,
    pub gate: u64,
}

impl TokenFlops {
    pub fn total(&self) -> u64 {
        self.norm + self.projection + self.recurrence + self.readout + self.fusion + self.mix + self.skip + self.gate
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCounts {
    pub per_token: TokenFlops,
    pub layers: usize,
    pub tokens: usize,
    pub total: u64,
}

pub fn token_flops(c: &BlockConfig) -> Result<TokenFlops> {
    c.validate()?;
    let (d, n) = (c.channels as u64, c.state as u64);
    let ch = fusion_channels(c) as u64;
    let (fusion, mix) = if c.fusion == FusionMode::Off {
        (0, 0)
    } else {
        let kernels = c.kernels()?;
        let taps: u64 = kernels.iter().map(|k| (k[0] * k[1] * k[2]) as u64).sum();
        (ch * taps, ch * kernels.len() as u64)
    };
    Ok(TokenFlops {
        norm: 2 * d,
        projection: d * (d + 2 * n),
        recurrence: 2 * d * n,
        readout: d * n,
        fusion,
        mix,
        skip: d,
        gate: if c.gate { d * d + 2 * d } else { 0 },
    })
}

/// FMAs of the block stack over `tokens` tokens.
pub fn count_flops(c: &BlockConfig, tokens: usize) -> Result<FlopCounts> {
    if tokens == 0 {
        return Err(Error::Config("token count must be ≥ 1".into()));
    }
    let per_token = token_flops(c)?;
    Ok(FlopCounts {
        per_token,
        layers: c.layers,
        tokens,
        total: per_token.total() * tokens as u64 * c.layers as u64,
    })
}

/// Shortest median run time that is trusted.
pub const MIN_MEASURABLE_SECS: f64 = 1e-4;

/// Throughput measurement settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub channels: usize,
    pub state: usize,
    /// Spatial grid per visit; `L` must be a multiple of `height·width`.
    pub height: usize,
    pub width: usize,
    pub lengths: Vec<usize>,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Sequences per timed call; more than one runs them in parallel on
    /// the current thread pool.
    #[serde(default = "one")]
    pub batch: usize,
}

fn one() -> usize {
    1
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            state: 16,
            height: 8,
            width: 8,
            lengths: vec![256, 512, 1024, 2048, 4096],
            repeats: 7,
            warmup: 2,
            seed: 0,
            batch: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub tokens: usize,
    pub median_secs: f64,
    pub tokens_per_sec: f64,
    /// Coefficient of variation over the repeats.
    pub cv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub rows: Vec<ThroughputRow>,
    /// Least-squares slope of `ln(time)` against `ln(L)`.
    pub slope: f64,
    pub median_cv: f64,
    pub peak_tokens_per_sec: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Least-squares slope of `y` on `x`.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Times a single-layer block forward at every length in `cfg.lengths`.
pub fn bench_throughput(cfg: &BenchConfig) -> Result<ThroughputReport> {
    let plane = cfg.height * cfg.width;
    if cfg.lengths.len() < 2 || cfg.repeats == 0 || plane == 0 || cfg.batch == 0 {
        return Err(Error::Config("need ≥ 2 lengths, ≥ 1 repeat, a non-empty plane and a batch".into()));
    }
    let mut rows = Vec::with_capacity(cfg.lengths.len());
    for &len in &cfg.lengths {
        if len == 0 || len % plane != 0 {
            return Err(Error::Config(format!("length {len} is not a multiple of the {plane}-token plane")));
        }
        let visits = len / plane;
        let grid = Grid {
            visits,
            height: cfg.height,
            width: cfg.width,
        };
        let mut bc = BlockConfig::new(cfg.channels, cfg.state, grid);
        bc.layers = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let stack = BlockStack::new(&bc, &mut store, &mut rng)?;
        let volumes: Vec<Tensor> = (0..cfg.batch)
            .map(|_| Tensor::from_fn(&[cfg.channels, visits, cfg.height, cfg.width], |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let gaps: Vec<f64> = (0..visits).map(|t| if t == 0 { 0.0 } else { 12.0 + 6.0 * (t % 5) as f64 }).collect();
        let valid = vec![true; visits];
        let run = || -> Result<Vec<Tensor>> {
            if volumes.len() == 1 {
                Ok(vec![stack.forward(&store, &volumes[0], &gaps, &valid)?])
            } else {
                volumes.par_iter().map(|v| stack.forward(&store, v, &gaps, &valid)).collect()
            }
        };

        for _ in 0..cfg.warmup {
            run()?;
        }
        let mut times = Vec::with_capacity(cfg.repeats);
        for _ in 0..cfg.repeats {
            let start = Instant::now();
            let out = run()?;
            times.push(start.elapsed().as_secs_f64());
            std::hint::black_box(out);
        }
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / times.len() as f64;
        let med = median(&mut times);
        if med < MIN_MEASURABLE_SECS {
            return Err(Error::Measurement(format!(
                "median {med:.2e}s at L={len} is below the {MIN_MEASURABLE_SECS:.0e}s floor"
            )));
        }
        rows.push(ThroughputRow {
            tokens: len,
            median_secs: med,
            tokens_per_sec: (len * cfg.batch) as f64 / med,
            cv: var.sqrt() / mean,
        });
    }
    let lx: Vec<f64> = rows.iter().map(|r| (r.tokens as f64).ln()).collect();
    let ly: Vec<f64> = rows.iter().map(|r| r.median_secs.ln()).collect();
    let mut cvs: Vec<f64> = rows.iter().map(|r| r.cv).collect();
    Ok(ThroughputReport {
        slope: ls_slope(&lx, &ly),
        median_cv: median(&mut cvs),
        peak_tokens_per_sec: rows.iter().map(|r| r.tokens_per_sec).fold(0.0, f64::max),
        rows,
    })
}

/// One efficiency-table row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub channels: usize,
    pub state: usize,
    pub layers: usize,
    pub tokens: usize,
    pub params: usize,
    pub flops: u64,
    pub params_millions: f64,
    pub gflops: f64,
}

/// What `profile` reports on: one block shape at a token count, plus
/// optional throughput settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub block: BlockConfig,
    pub tokens: usize,
    #[serde(default)]
    pub bench: BenchConfig,
}

impl Default for ProfileConfig {
    /// Single block, `d = 768`, `N = 16`, on a 512-token `8×8×8` grid.
    fn default() -> Self {
        let mut block = BlockConfig::new(768, 16, Grid {
            visits: 8,
            height: 8,
            width: 8,
        });
        block.layers = 1;
        Self {
            block,
            tokens: 512,
            bench: BenchConfig::default(),
        }
    }
}

pub fn profile_row(c: &BlockConfig, tokens: usize) -> Result<ProfileRow> {
    let params = count_params(c)?.total;
    let flops = count_flops(c, tokens)?.total;
    Ok(ProfileRow {
        channels: c.channels,
        state: c.state,
        layers: c.layers,
        tokens,
        params,
        flops,
        params_millions: params as f64 / 1e6,
        gflops: flops as f64 / 1e9,
    })
}
