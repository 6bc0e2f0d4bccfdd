//! Multi-scale depthwise 3D neighborhood fusion.
//!
//! The scanned `[d,T,H,W]` tensor is filtered by one depthwise kernel bank
//! per kernel shape and the responses are mixed with softmax weights
//! `β = softmax(α)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::{conv3d_depthwise, softmax, Tensor};

/// Kernel extent `(time, height, width)`.
pub type KernelShape = [usize; 3];

/// Which kernel shapes take part in the fusion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSet {
    /// `(1,3,3)` and `(min(3,T),3,3)`.
    #[default]
    Mixed,
    /// `(1,3,3)` only.
    SpatialOnly,
    /// `(min(3,T),3,3)` only.
    SpatioTemporalOnly,
}

impl KernelSet {
    pub fn shapes(self, visits: usize) -> Result<Vec<KernelShape>> {
        let [spatial, joint] = clamp_kernels(visits)?;
        Ok(match self {
            KernelSet::Mixed => vec![spatial, joint],
            KernelSet::SpatialOnly => vec![spatial],
            KernelSet::SpatioTemporalOnly => vec![joint],
        })
    }
}

/// Effective `{(1,3,3), (min(3,T),3,3)}` for `T` visits. An even temporal
/// extent (T = 2) is reduced to 1 so every kernel stays centered.
pub fn clamp_kernels(visits: usize) -> Result<[KernelShape; 2]> {
    if visits == 0 {
        return Err(Error::Data("kernel set needs at least one visit".into()));
    }
    let mut kt = visits.min(3);
    if kt.is_multiple_of(2) {
        kt -= 1;
    }
    Ok([[1, 3, 3], [kt, 3, 3]])
}

/// Filter banks and mixture logits of one fusion stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub kernels: Vec<KernelShape>,
    /// One `[d, kt, kh, kw]` bank per kernel shape.
    pub filters: Vec<Tensor>,
    /// Mixture logits, one per kernel shape.
    pub alpha: Tensor,
}

impl FusionParams {
    /// Center-tap identity filters plus `N(0, noise_std²)` noise, α = 0.
    pub fn init(channels: usize, kernels: &[KernelShape], noise_std: f64, rng: &mut impl Rng) -> Self {
        let filters = kernels
            .iter()
            .map(|&k| identity_filter(channels, k, noise_std, rng))
            .collect();
        Self {
            kernels: kernels.to_vec(),
            filters,
            alpha: Tensor::zeros(&[kernels.len()]),
        }
    }

    pub fn weights(&self) -> Result<Vec<f64>> {
        softmax(self.alpha.data())
    }
}

pub(crate) fn identity_filter(
    channels: usize,
    kernel: KernelShape,
    noise_std: f64,
    rng: &mut impl Rng,
) -> Tensor {
    let [kt, kh, kw] = kernel;
    let center = (kt / 2) * kh * kw + (kh / 2) * kw + kw / 2;
    let per = kt * kh * kw;
    let noise = Normal::new(0.0, noise_std.max(0.0)).expect("finite std");
    Tensor::from_fn(&[channels, kt, kh, kw], |i| {
        let base = if i % per == center { 1.0 } else { 0.0 };
        if noise_std > 0.0 {
            base + noise.sample(rng)
        } else {
            base
        }
    })
}

fn check_kernels(kernels: &[KernelShape], visits: usize) -> Result<()> {
    for k in kernels {
        if k.iter().any(|e| e % 2 == 0) {
            return Err(Error::Config(format!("kernel {k:?} has an even extent")));
        }
        if k[0] > visits {
            return Err(Error::Config(format!(
                "kernel {k:?} spans more than the {visits} available visits"
            )));
        }
    }
    Ok(())
}

/// `h = Σ_s β_s · DWConv3D_s(x)` for `x: [d,T,H,W]`.
pub fn fuse(x: &Tensor, params: &FusionParams) -> Result<Tensor> {
    let [_, visits, _, _] = x.dims4()?;
    if !x.all_finite() {
        return Err(Error::Data("fusion input is not finite".into()));
    }
    check_kernels(&params.kernels, visits)?;
    let beta = params.weights()?;
    let mut h = Tensor::zeros(x.shape());
    for (filter, b) in params.filters.iter().zip(beta) {
        let y = conv3d_depthwise(x, filter)?;
        for (o, v) in h.data_mut().iter_mut().zip(y.data()) {
            *o += b * v;
        }
    }
    Ok(h)
}

/// Tape version of [`fuse`]; `filters` and `alpha` are tape variables.
pub fn fuse_on_tape(tape: &mut GradTape, x: Var, filters: &[Var], alpha: Var) -> Result<Var> {
    let [_, visits, _, _] = tape.value(x).dims4()?;
    let kernels: Vec<KernelShape> = filters
        .iter()
        .map(|&f| {
            let s = tape.shape(f);
            [s[1], s[2], s[3]]
        })
        .collect();
    check_kernels(&kernels, visits)?;
    let beta = tape.softmax(alpha)?;
    let branches = filters
        .iter()
        .map(|&f| tape.conv3d_depthwise(x, f))
        .collect::<Result<Vec<_>>>()?;
    tape.weighted_sum(&branches, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clamp_rule() {
        assert_eq!(clamp_kernels(8).unwrap(), [[1, 3, 3], [3, 3, 3]]);
        assert_eq!(clamp_kernels(3).unwrap(), [[1, 3, 3], [3, 3, 3]]);
        assert_eq!(clamp_kernels(2).unwrap(), [[1, 3, 3], [1, 3, 3]]);
        assert_eq!(clamp_kernels(1).unwrap(), [[1, 3, 3], [1, 3, 3]]);
        assert!(matches!(clamp_kernels(0), Err(Error::Data(_))));
    }

    #[test]
    fn identity_filters_reproduce_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let mut p = FusionParams::init(2, &clamp_kernels(3).unwrap(), 0.0, &mut rng);
        for alpha in [[0.0, 0.0], [3.0, -1.0], [-20.0, 5.0]] {
            p.alpha = Tensor::vector(alpha.to_vec());
            assert!(fuse(&x, &p).unwrap().max_abs_diff(&x) <= 1e-15);
        }
    }

    #[test]
    fn equal_logits_average_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let mut p = FusionParams::init(2, &clamp_kernels(3).unwrap(), 0.3, &mut rng);
        p.alpha = Tensor::vector(vec![1.7, 1.7]);
        let a = conv3d_depthwise(&x, &p.filters[0]).unwrap();
        let b = conv3d_depthwise(&x, &p.filters[1]).unwrap();
        let avg = Tensor::from_fn(x.shape(), |i| 0.5 * (a.data()[i] + b.data()[i]));
        assert!(fuse(&x, &p).unwrap().max_abs_diff(&avg) <= 1e-15);
    }

    #[test]
    fn temporal_extent_beyond_visits_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = FusionParams::init(1, &[[3, 3, 3]], 0.0, &mut rng);
        let x = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(matches!(fuse(&x, &p), Err(Error::Config(_))));
    }

    #[test]
    fn kernel_set_variants() {
        assert_eq!(KernelSet::Mixed.shapes(4).unwrap().len(), 2);
        assert_eq!(KernelSet::SpatialOnly.shapes(4).unwrap(), vec![[1, 3, 3]]);
        assert_eq!(KernelSet::SpatioTemporalOnly.shapes(4).unwrap(), vec![[3, 3, 3]]);
    }
}
