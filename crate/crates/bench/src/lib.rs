//! Shared fixtures for the benchmarks.

use dtmamba::block::{BlockConfig, BlockStack, Grid};
use dtmamba::fusion::FusionParams;
use dtmamba::scan::{ScanOrder, ScanParams, TokenSequence};
use dtmamba::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Token lengths swept by the throughput benches.
pub const LENGTHS: [usize; 5] = [256, 512, 1024, 2048, 4096];

/// Spatial plane per visit.
pub const PLANE: (usize, usize) = (8, 8);

fn gaps(visits: usize) -> Vec<f64> {
    (0..visits).map(|t| if t == 0 { 0.0 } else { 12.0 + 6.0 * (t % 5) as f64 }).collect()
}

fn grid(len: usize) -> Grid {
    Grid {
        visits: len / (PLANE.0 * PLANE.1),
        height: PLANE.0,
        width: PLANE.1,
    }
}

/// Random `[d, T, H, W]` volume with `T·H·W = len`.
pub fn volume(channels: usize, len: usize, seed: u64) -> Tensor {
    let g = grid(len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[channels, g.visits, g.height, g.width], |_| rng.gen_range(-1.0..1.0))
}

/// A scan input and parameters of the given size.
pub struct ScanFixture {
    pub seq: TokenSequence,
    pub params: ScanParams,
}

pub fn scan_fixture(channels: usize, state: usize, len: usize) -> ScanFixture {
    let g = grid(len);
    let vol = volume(channels, len, 1);
    let seq = TokenSequence::from_volume(&vol, &gaps(g.visits), &vec![true; g.visits], ScanOrder::VisitMajor)
        .expect("valid fixture");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    ScanFixture {
        seq,
        params: ScanParams::init(channels, state, &mut rng),
    }
}

/// Fusion input `[d, T, H, W]` and parameters for the default kernel set.
pub fn fusion_fixture(channels: usize, len: usize) -> (Tensor, FusionParams) {
    let cfg = BlockConfig::new(channels, 1, grid(len));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = FusionParams::init(channels, &cfg.kernels().expect("kernels"), 0.1, &mut rng);
    (volume(channels, len, 4), params)
}

/// One-block stack with its input.
pub struct BlockFixture {
    pub stack: BlockStack,
    pub store: ParamStore,
    pub volume: Tensor,
    pub gaps: Vec<f64>,
    pub valid: Vec<bool>,
}

pub fn block_fixture(channels: usize, state: usize, len: usize) -> BlockFixture {
    let g = grid(len);
    let mut cfg = BlockConfig::new(channels, state, g);
    cfg.layers = 1;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let stack = BlockStack::new(&cfg, &mut store, &mut rng).expect("valid block");
    BlockFixture {
        stack,
        store,
        volume: volume(channels, len, 6),
        gaps: gaps(g.visits),
        valid: vec![true; g.visits],
    }
}
