//! One time-aware scan + fusion block, and the residual block stack.
//!
//! A block maps `V ∈ ℝ^{d×T×H×W}` to `Z` of the same shape:
//!
//! ```text
//! u = rms_norm(V)
//! Z = V + mask ⊙ (fuse(C · scan(u)) + D ⊙ u)
//! ```
//!
//! Internally the volume is carried as a token matrix `[L, d]` with rows in
//! visit-major raster order (`L = T·H·W`).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{self, KernelSet};
use crate::scan::{self, ScanOrder, ScanParams, TAU_MIN_MONTHS};
use crate::tape::{GradTape, ParamId, ParamStore, Var};
use crate::tensor::Tensor;

/// Extents of the visit grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub visits: usize,
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn tokens(&self) -> usize {
        self.visits * self.plane()
    }
}

/// Where the neighborhood fusion is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// On the `d`-channel readout `C·x`.
    #[default]
    Readout,
    /// On the raw `d·N` states, before the readout.
    State,
    /// No fusion.
    Off,
}

fn default_gamma_init() -> f64 {
    0.5
}

fn default_tau_min() -> f64 {
    TAU_MIN_MONTHS
}

fn default_layers() -> usize {
    2
}

fn default_true() -> bool {
    true
}

fn default_norm_eps() -> f64 {
    1e-6
}

fn default_fusion_noise() -> f64 {
    1e-2
}

/// Shape and switches of the blocks in a stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub channels: usize,
    #[serde(default = "default_state")]
    pub state: usize,
    pub grid: Grid,
    #[serde(default)]
    pub kernel_set: KernelSet,
    /// Initial γ ∈ (0,1).
    #[serde(default = "default_gamma_init")]
    pub gamma_init: f64,
    #[serde(default = "default_tau_min")]
    pub tau_min: f64,
    /// Multiplicative SiLU gate branch.
    #[serde(default)]
    pub gate: bool,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default)]
    pub scan_order: ScanOrder,
    /// When false, γ is held at 0 and gaps have no effect.
    #[serde(default = "default_true")]
    pub time_aware: bool,
    #[serde(default)]
    pub fusion: FusionMode,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    /// Std of the noise added to the identity fusion filters at init.
    #[serde(default = "default_fusion_noise")]
    pub fusion_init_noise: f64,
}

fn default_state() -> usize {
    16
}

impl BlockConfig {
    pub fn new(channels: usize, state: usize, grid: Grid) -> Self {
        Self {
            channels,
            state,
            grid,
            kernel_set: KernelSet::Mixed,
            gamma_init: default_gamma_init(),
            tau_min: TAU_MIN_MONTHS,
            gate: false,
            layers: default_layers(),
            scan_order: ScanOrder::VisitMajor,
            time_aware: true,
            fusion: FusionMode::Readout,
            norm_eps: default_norm_eps(),
            fusion_init_noise: default_fusion_noise(),
        }
    }

    pub fn projection_width(&self) -> usize {
        self.channels + 2 * self.state
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.grid;
        if self.channels == 0 || self.state == 0 || g.visits == 0 || g.height == 0 || g.width == 0 {
            return Err(Error::Config(format!("all extents must be ≥ 1: {self:?}")));
        }
        if !(self.gamma_init > 0.0 && self.gamma_init < 1.0) {
            return Err(Error::Config(format!("gamma_init must lie in (0,1), got {}", self.gamma_init)));
        }
        if self.tau_min <= 0.0 {
            return Err(Error::Config("tau_min must be positive".into()));
        }
        Ok(())
    }

    /// Fusion kernel shapes for this grid.
    pub fn kernels(&self) -> Result<Vec<fusion::KernelShape>> {
        self.kernel_set.shapes(self.grid.visits)
    }

    fn fusion_channels(&self) -> usize {
        match self.fusion {
            FusionMode::State => self.channels * self.state,
            _ => self.channels,
        }
    }
}

/// Per-sequence token bookkeeping for one scan order.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLayout {
    pub grid: Grid,
    pub order: ScanOrder,
    /// Scan position → visit-major row.
    pub perm: Vec<usize>,
    /// Visit-major row → scan position.
    pub inverse: Vec<usize>,
    /// Gap attached to each token, in scan order.
    pub scan_gaps: Vec<f64>,
    pub scan_valid: Vec<bool>,
    /// Validity of each visit-major row.
    pub row_valid: Vec<bool>,
}

impl SequenceLayout {
    pub fn new(grid: Grid, order: ScanOrder, visit_gaps: &[f64], visit_valid: &[bool]) -> Result<Self> {
        if visit_gaps.len() != grid.visits {
            return Err(Error::Dimension(format!(
                "{} visit gaps for a {}-visit grid",
                visit_gaps.len(),
                grid.visits
            )));
        }
        let perm = order.permutation(grid.visits, grid.height, grid.width);
        let (scan_gaps, scan_valid) = scan::token_gaps(visit_gaps, visit_valid, grid.plane(), &perm)?;
        let mut inverse = vec![0; perm.len()];
        for (p, &r) in perm.iter().enumerate() {
            inverse[r] = p;
        }
        let row_valid = (0..grid.tokens()).map(|r| visit_valid[r / grid.plane()]).collect();
        Ok(Self {
            grid,
            order,
            perm,
            inverse,
            scan_gaps,
            scan_valid,
            row_valid,
        })
    }

    fn is_identity(&self) -> bool {
        self.order == ScanOrder::VisitMajor
    }
}

/// Parameter handles of one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub config: BlockConfig,
    pub norm_gain: ParamId,
    pub w_proj: ParamId,
    pub b_proj: ParamId,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub gamma_logit: ParamId,
    pub filters: Vec<ParamId>,
    pub alpha: Option<ParamId>,
    pub gate: Option<(ParamId, ParamId)>,
}

impl Block {
    /// Registers a freshly initialized block under `prefix`.
    pub fn new(config: &BlockConfig, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.channels;
        let init = ScanParams::init(d, config.state, rng);
        let gamma_logit = (config.gamma_init / (1.0 - config.gamma_init)).ln();
        let norm_gain = store.add(format!("{prefix}.norm_gain"), Tensor::full(&[d], 1.0));
        let w_proj = store.add(format!("{prefix}.w_proj"), init.w_proj);
        let b_proj = store.add(format!("{prefix}.b_proj"), init.b_proj);
        let a_log = store.add(format!("{prefix}.a_log"), init.a_log);
        let d_skip = store.add(format!("{prefix}.d_skip"), init.d_skip);
        let gamma_logit = store.add(format!("{prefix}.gamma_logit"), Tensor::scalar(gamma_logit));

        let (filters, alpha) = if config.fusion == FusionMode::Off {
            (Vec::new(), None)
        } else {
            let kernels = config.kernels()?;
            let fp = fusion::FusionParams::init(
                config.fusion_channels(),
                &kernels,
                config.fusion_init_noise,
                rng,
            );
            let filters = fp
                .filters
                .into_iter()
                .zip(&kernels)
                .map(|(f, k)| store.add(format!("{prefix}.fusion_{}x{}x{}", k[0], k[1], k[2]), f))
                .collect();
            (filters, Some(store.add(format!("{prefix}.fusion_alpha"), fp.alpha)))
        };

        let gate = if config.gate {
            let std = 1.0 / (d as f64).sqrt();
            let w = Tensor::from_fn(&[d, d], |_| rng.gen_range(-std..std));
            Some((
                store.add(format!("{prefix}.gate_w"), w),
                store.add(format!("{prefix}.gate_b"), Tensor::zeros(&[d])),
            ))
        } else {
            None
        };

        Ok(Self {
            config: config.clone(),
            norm_gain,
            w_proj,
            b_proj,
            a_log,
            d_skip,
            gamma_logit,
            filters,
            alpha,
            gate,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.norm_gain,
            self.w_proj,
            self.b_proj,
            self.a_log,
            self.d_skip,
            self.gamma_logit,
        ];
        ids.extend(&self.filters);
        ids.extend(self.alpha);
        if let Some((w, b)) = self.gate {
            ids.extend([w, b]);
        }
        ids
    }

    /// Plain scan parameters read from `store`.
    pub fn scan_params(&self, store: &ParamStore) -> ScanParams {
        ScanParams {
            a_log: store.get(self.a_log).clone(),
            w_proj: store.get(self.w_proj).clone(),
            b_proj: store.get(self.b_proj).clone(),
            d_skip: store.get(self.d_skip).clone(),
            gamma_logit: store.get(self.gamma_logit).data()[0],
            tau_min: self.config.tau_min,
        }
    }

    /// Records the block on `tape`. `x` is `[L, d]` in visit-major order.
    pub fn forward_on_tape(
        &self,
        tape: &mut GradTape,
        store: &ParamStore,
        x: Var,
        layout: &SequenceLayout,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (d, n) = (cfg.channels, cfg.state);
        let grid = layout.grid;
        if (grid.height, grid.width) != (cfg.grid.height, cfg.grid.width) || tape.shape(x) != [grid.tokens(), d] {
            return Err(Error::Dimension(format!(
                "block input {:?} does not match grid {:?} with {d} channels",
                tape.shape(x),
                grid
            )));
        }

        let gain = tape.param(store, self.norm_gain);
        let u = tape.rms_norm(x, gain, cfg.norm_eps)?;
        let u_scan = if layout.is_identity() {
            u
        } else {
            tape.gather_rows(u, layout.perm.clone())?
        };

        let w = tape.param(store, self.w_proj);
        let b = tape.param(store, self.b_proj);
        let proj = tape.matmul(u_scan, w)?;
        let proj = tape.add_row_bias(proj, b)?;
        let step_logit = tape.narrow_cols(proj, 0, d)?;
        let b_in = tape.narrow_cols(proj, d, n)?;
        let c_out = tape.narrow_cols(proj, d + n, n)?;
        let step = tape.softplus(step_logit);
        let gamma = if cfg.time_aware {
            let logit = tape.param(store, self.gamma_logit);
            Some(tape.sigmoid(logit))
        } else {
            None
        };
        let step = tape.time_aware_step(step, gamma, layout.scan_gaps.clone(), cfg.tau_min)?;
        let a_log = tape.param(store, self.a_log);
        let states = tape.selective_scan(u_scan, step, a_log, b_in, layout.scan_valid.clone())?;

        let unscan = |tape: &mut GradTape, v: Var| -> Result<Var> {
            if layout.is_identity() {
                Ok(v)
            } else {
                tape.gather_rows(v, layout.inverse.clone())
            }
        };

        let mixed = match cfg.fusion {
            FusionMode::Off => {
                let y = tape.readout(states, c_out)?;
                unscan(tape, y)?
            }
            FusionMode::Readout => {
                let y = tape.readout(states, c_out)?;
                let y = unscan(tape, y)?;
                self.fuse_rows(tape, store, y, grid, d)?
            }
            FusionMode::State => {
                let s = unscan(tape, states)?;
                let c = unscan(tape, c_out)?;
                let h = self.fuse_rows(tape, store, s, grid, d * n)?;
                tape.readout(h, c)?
            }
        };

        let d_skip = tape.param(store, self.d_skip);
        let skip = tape.scale_cols(u, d_skip)?;
        let mut out = tape.add(mixed, skip)?;
        if let Some((gw, gb)) = self.gate {
            let gw = tape.param(store, gw);
            let gb = tape.param(store, gb);
            let g = tape.matmul(u, gw)?;
            let g = tape.add_row_bias(g, gb)?;
            let g = tape.silu(g);
            out = tape.mul(out, g)?;
        }
        if layout.row_valid.iter().any(|v| !v) {
            let mask = Tensor::from_fn(&[grid.tokens(), d], |i| {
                if layout.row_valid[i / d] {
                    1.0
                } else {
                    0.0
                }
            });
            let mask = tape.constant(mask);
            out = tape.mul(out, mask)?;
        }
        tape.add(x, out)
    }

    /// Fuses a `[L, channels]` visit-major matrix over the grid.
    fn fuse_rows(
        &self,
        tape: &mut GradTape,
        store: &ParamStore,
        rows: Var,
        grid: Grid,
        channels: usize,
    ) -> Result<Var> {
        let vol = tape.transpose(rows)?;
        let vol = tape.reshape(vol, &[channels, grid.visits, grid.height, grid.width])?;
        let filters: Vec<Var> = self.filters.iter().map(|&f| tape.param(store, f)).collect();
        let alpha = tape.param(store, self.alpha.expect("fusion enabled"));
        let h = fusion::fuse_on_tape(tape, vol, &filters, alpha)?;
        let h = tape.reshape(h, &[channels, grid.tokens()])?;
        tape.transpose(h)
    }

    /// Tape-free forward of `volume: [d,T,H,W]`.
    pub fn forward(
        &self,
        store: &ParamStore,
        volume: &Tensor,
        visit_gaps: &[f64],
        visit_valid: &[bool],
    ) -> Result<Tensor> {
        BlockStack::from_blocks(vec![self.clone()])?.forward(store, volume, visit_gaps, visit_valid)
    }
}

/// Sequential composition of blocks sharing a channel width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockStack {
    pub blocks: Vec<Block>,
}

/// Builds and registers one block per config, in order.
pub fn stack(configs: &[BlockConfig], store: &mut ParamStore, rng: &mut impl Rng) -> Result<BlockStack> {
    let blocks = configs
        .iter()
        .enumerate()
        .map(|(i, c)| Block::new(c, store, &format!("block{i}"), rng))
        .collect::<Result<Vec<_>>>()?;
    BlockStack::from_blocks(blocks)
}

impl BlockStack {
    /// `config.layers` identical blocks.
    pub fn new(config: &BlockConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        stack(&vec![config.clone(); config.layers], store, rng)
    }

    pub fn from_blocks(blocks: Vec<Block>) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::Config("a stack needs at least one block".into()))?;
        let (d, grid) = (first.config.channels, first.config.grid);
        if blocks.iter().any(|b| b.config.channels != d || b.config.grid != grid) {
            return Err(Error::Config("blocks in a stack must share channels and grid".into()));
        }
        Ok(Self { blocks })
    }

    pub fn channels(&self) -> usize {
        self.blocks[0].config.channels
    }

    pub fn grid(&self) -> Grid {
        self.blocks[0].config.grid
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(Block::param_ids).collect()
    }

    pub fn forward_on_tape(
        &self,
        tape: &mut GradTape,
        store: &ParamStore,
        mut x: Var,
        visit_gaps: &[f64],
        visit_valid: &[bool],
    ) -> Result<Var> {
        let grid = Grid {
            visits: visit_gaps.len(),
            ..self.grid()
        };
        let mut layouts: Vec<SequenceLayout> = Vec::new();
        for block in &self.blocks {
            let order = block.config.scan_order;
            let layout = match layouts.iter().find(|l| l.order == order) {
                Some(l) => l.clone(),
                None => {
                    let l = SequenceLayout::new(grid, order, visit_gaps, visit_valid)?;
                    layouts.push(l.clone());
                    l
                }
            };
            x = block.forward_on_tape(tape, store, x, &layout)?;
        }
        Ok(x)
    }

    /// Tape-free forward of `volume: [d,T,H,W]`, returning `[d,T,H,W]`.
    /// `T` may differ from the configured visit count.
    pub fn forward(
        &self,
        store: &ParamStore,
        volume: &Tensor,
        visit_gaps: &[f64],
        visit_valid: &[bool],
    ) -> Result<Tensor> {
        let [d, t, h, w] = volume.dims4()?;
        let grid = self.grid();
        if d != self.channels() || [h, w] != [grid.height, grid.width] || visit_gaps.len() != t {
            return Err(Error::Dimension(format!(
                "volume {:?} does not match {d}-channel grid {grid:?}",
                volume.shape()
            )));
        }
        let rows = volume.clone().reshape(&[d, t * h * w])?.transpose()?;
        let mut tape = GradTape::new();
        let x = tape.constant(rows);
        let z = self.forward_on_tape(&mut tape, store, x, visit_gaps, visit_valid)?;
        tape.value(z).transpose()?.reshape(&[d, t, h, w])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(grid: Grid) -> BlockConfig {
        BlockConfig::new(2, 2, grid)
    }

    #[test]
    fn zero_volume_maps_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grid = Grid { visits: 2, height: 2, width: 2 };
        let mut store = ParamStore::new();
        let s = BlockStack::new(&small(grid), &mut store, &mut rng).unwrap();
        let z = s
            .forward(&store, &Tensor::zeros(&[2, 2, 2, 2]), &[0.0, 12.0], &[true, true])
            .unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_visit_requires_zero_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid = Grid { visits: 1, height: 3, width: 3 };
        let mut store = ParamStore::new();
        let s = BlockStack::new(&small(grid), &mut store, &mut rng).unwrap();
        let v = Tensor::from_fn(&[2, 1, 3, 3], |_| rng.gen_range(-1.0..1.0));
        assert!(s.forward(&store, &v, &[0.0], &[true]).is_ok());
        assert!(matches!(s.forward(&store, &v, &[12.0], &[true]), Err(Error::Data(_))));
    }

    #[test]
    fn grid_mismatch_is_a_dimension_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = Grid { visits: 2, height: 2, width: 2 };
        let mut store = ParamStore::new();
        let s = BlockStack::new(&small(grid), &mut store, &mut rng).unwrap();
        let v = Tensor::zeros(&[2, 2, 3, 2]);
        assert!(matches!(
            s.forward(&store, &v, &[0.0, 12.0], &[true, true]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn depth_doubles_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = Grid { visits: 4, height: 2, width: 2 };
        let mut one = small(grid);
        one.layers = 1;
        let mut two = one.clone();
        two.layers = 2;
        let (mut s1, mut s2) = (ParamStore::new(), ParamStore::new());
        BlockStack::new(&one, &mut s1, &mut rng).unwrap();
        BlockStack::new(&two, &mut s2, &mut rng).unwrap();
        assert_eq!(2 * s1.num_entries(), s2.num_entries());
    }

    #[test]
    fn mixed_channel_stack_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = Grid { visits: 2, height: 2, width: 2 };
        let mut store = ParamStore::new();
        let a = small(grid);
        let b = BlockConfig::new(3, 2, grid);
        assert!(stack(&[a, b], &mut store, &mut rng).is_err());
    }
}
