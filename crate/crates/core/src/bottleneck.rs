//! Content and style information bottlenecks.
//!
//! Each bottleneck level predicts a gate `alpha` in `(0, 1)` from the whole
//! feature pyramid, keeps `alpha * F` of the original feature and fills the
//! rest with Gaussian noise carrying the same per-channel mean and variance:
//!
//! ```text
//! R = alpha * F + (1 - alpha) * eps,   eps ~ N(mu_F, sigma_F^2)
//! ```
//!
//! The information retained is measured per element as the KL divergence
//! between `N(alpha * f, (1 - alpha)^2)` and `N(0, 1)`, with `f` the
//! channel-standardized feature:
//!
//! ```text
//! MI = -1/2 * (1 - (alpha * f)^2 - (1 - alpha)^2) - ln(1 - alpha)
//! ```

use candle_core::{DType, Tensor};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderArch;
use crate::error::{Error, Result};
use crate::params::{Conv2d, ParamStore};
use crate::tensor::{concat_channels, mean_std, resize_to, FeatureMap, FeaturePyramid, Level};

/// Gates are clamped to `1 - ALPHA_EPS` before MI is evaluated.
pub const ALPHA_EPS: f64 = 1e-4;

/// Hidden width of every controller predictor at full encoder width.
pub const FULL_HIDDEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    Content,
    Style,
}

impl BranchKind {
    pub fn prefix(self) -> &'static str {
        match self {
            BranchKind::Content => "cib",
            BranchKind::Style => "sib",
        }
    }
}

impl std::str::FromStr for BranchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "content" => Ok(BranchKind::Content),
            "style" => Ok(BranchKind::Style),
            other => Err(Error::arg(format!("branch must be content or style, got `{other}`"))),
        }
    }
}

/// Per-element gate map with the shape of its feature level.
#[derive(Debug, Clone)]
pub struct Controller {
    tensor: Tensor,
    level: Level,
}

impl Controller {
    pub fn new(tensor: Tensor, level: Level) -> Self {
        Controller { tensor, level }
    }

    /// Constant gate with the shape of `f`.
    pub fn constant(f: &FeatureMap, value: f64) -> Result<Self> {
        Ok(Controller {
            tensor: (f.tensor().ones_like()? * value)?,
            level: f.level(),
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn level(&self) -> Level {
        self.level
    }
}

/// conv3x3 -> ReLU -> conv3x3 -> sigmoid over the resized, concatenated pyramid.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub hidden: Conv2d,
    pub out: Conv2d,
}

impl Predictor {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.hidden.forward(x)?.relu()?;
        Ok(candle_nn::ops::sigmoid(&self.out.forward(&h)?)?)
    }
}

/// The four controller predictors of one branch (CIBs or SIBs).
#[derive(Debug, Clone)]
pub struct BottleneckParams {
    kind: BranchKind,
    predictors: Vec<Predictor>,
}

impl BottleneckParams {
    /// Registers fresh predictors under `cib.*` or `sib.*`.
    pub fn new<R: rand::Rng + ?Sized>(
        kind: BranchKind,
        arch: &EncoderArch,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let stacked: usize = arch.all_tap_channels().iter().sum();
        let hidden = FULL_HIDDEN / arch.width_divisor;
        let mut predictors = Vec::with_capacity(4);
        for level in Level::ALL {
            let base = format!("{}.level{}", kind.prefix(), level.index() + 1);
            predictors.push(Predictor {
                hidden: store.conv(&format!("{base}.hidden"), stacked, hidden, 3, rng)?,
                out: store.conv(&format!("{base}.out"), hidden, arch.tap_channels(level), 3, rng)?,
            });
        }
        Ok(BottleneckParams { kind, predictors })
    }

    pub fn from_predictors(kind: BranchKind, predictors: Vec<Predictor>) -> Result<Self> {
        if predictors.len() != 4 {
            return Err(Error::arg("a bottleneck needs one predictor per level"));
        }
        Ok(BottleneckParams { kind, predictors })
    }

    pub fn kind(&self) -> BranchKind {
        self.kind
    }

    pub fn predictor(&self, level: Level) -> &Predictor {
        &self.predictors[level.index()]
    }
}

/// All four levels resized to `level`'s spatial size and stacked on channels.
pub fn stacked_input(pyramid: &FeaturePyramid, level: Level) -> Result<FeatureMap> {
    let (h, w) = pyramid.level(level).spatial();
    let resized = pyramid
        .levels()
        .iter()
        .map(|f| resize_to(f, h, w))
        .collect::<Result<Vec<_>>>()?;
    concat_channels(&resized)
}

pub fn predict_controller(
    pyramid: &FeaturePyramid,
    level: Level,
    params: &BottleneckParams,
) -> Result<Controller> {
    let x = stacked_input(pyramid, level)?;
    let alpha = params.predictor(level).forward(x.tensor())?;
    let expected = pyramid.level(level).tensor().dims();
    if alpha.dims() != expected {
        return Err(Error::arg(format!(
            "controller shape {:?} does not match feature shape {expected:?}",
            alpha.dims()
        )));
    }
    Ok(Controller::new(alpha, level))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    Sample,
    Expectation,
}

/// How noise is produced for one forward pass. `seed` is ignored in
/// expectation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub mode: NoiseMode,
    pub seed: Option<u64>,
}

impl NoiseSpec {
    pub const EXPECTATION: NoiseSpec = NoiseSpec {
        mode: NoiseMode::Expectation,
        seed: None,
    };

    pub fn sample(seed: u64) -> Self {
        NoiseSpec {
            mode: NoiseMode::Sample,
            seed: Some(seed),
        }
    }

    /// RNG for sample mode; `None` in expectation mode.
    pub fn rng(&self) -> Option<ChaCha8Rng> {
        match self.mode {
            NoiseMode::Expectation => None,
            NoiseMode::Sample => Some(ChaCha8Rng::seed_from_u64(self.seed.unwrap_or(0))),
        }
    }
}

/// Noise source threaded through a forward pass.
pub enum Noise<'a> {
    Expectation,
    Sample(&'a mut dyn RngCore),
}

impl Noise<'_> {
    pub fn is_expectation(&self) -> bool {
        matches!(self, Noise::Expectation)
    }
}

/// `R = alpha * F + (1 - alpha) * eps` with per-channel Gaussian `eps`.
///
/// The noise is a constant for differentiation: gradients reach `alpha` and
/// `F` only through the two products.
pub fn inject_noise(f: &FeatureMap, alpha: &Controller, noise: &mut Noise<'_>) -> Result<FeatureMap> {
    let x = f.tensor();
    if alpha.tensor().dims() != x.dims() {
        return Err(Error::arg(format!(
            "controller shape {:?} does not match feature shape {:?}",
            alpha.tensor().dims(),
            x.dims()
        )));
    }
    let (mean, std) = mean_std(&x.detach())?;
    let eps = match noise {
        Noise::Expectation => mean.broadcast_as(x.shape())?.contiguous()?,
        Noise::Sample(rng) => {
            let n = x.elem_count();
            let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut **rng)).collect();
            let z = Tensor::from_vec(z, x.shape(), x.device())?.to_dtype(x.dtype())?;
            z.broadcast_mul(&std)?.broadcast_add(&mean)?
        }
    };
    let a = alpha.tensor();
    let r = ((a * x)? + (1.0 - a)?.mul(&eps)?)?;
    FeatureMap::new(r, f.level())
}

/// Channel-standardized feature `(F - mu) / sigma`, with `0` on constant channels.
pub fn standardize(x: &Tensor) -> Result<Tensor> {
    let (mean, std) = mean_std(x)?;
    let mask = std.detach().gt(0.0)?.to_dtype(x.dtype())?;
    let inv = mask.div(&(&std + (1.0 - &mask)?)?)?;
    Ok(x.broadcast_sub(&mean)?.broadcast_mul(&inv)?)
}

/// Elementwise MI in nats from a clamped gate and a standardized feature.
pub fn mi_elementwise(alpha: &Tensor, f: &Tensor) -> Result<Tensor> {
    let a = alpha.minimum(1.0 - ALPHA_EPS)?;
    let af = (&a * f)?;
    let one_minus = (1.0 - &a)?;
    let inner = ((1.0 - af.sqr()?)? - one_minus.sqr()?)?;
    Ok(((inner * -0.5)? - one_minus.log()?)?)
}

/// Per-element MI map and its mean over batch, channels and positions.
pub fn mutual_information(f: &FeatureMap, alpha: &Controller) -> Result<(Tensor, Tensor)> {
    if alpha.tensor().dims() != f.tensor().dims() {
        return Err(Error::arg("controller and feature shapes differ"));
    }
    let map = mi_elementwise(alpha.tensor(), &standardize(f.tensor())?)?;
    let mean = map.mean_all()?;
    Ok((map, mean))
}

/// Scalar form of the MI expression, for callers without tensors.
pub fn mi_scalar(alpha: f64, f: f64) -> f64 {
    let a = alpha.min(1.0 - ALPHA_EPS);
    -0.5 * (1.0 - (a * f).powi(2) - (1.0 - a).powi(2)) - (1.0 - a).ln()
}

#[derive(Debug, Clone)]
pub struct CompressedLevel {
    pub r: FeatureMap,
    pub alpha: Controller,
    pub mi_map: Tensor,
    /// Scalar tensor; differentiable.
    pub mi_mean: Tensor,
}

#[derive(Debug, Clone)]
pub struct CompressedPyramid {
    levels: Vec<CompressedLevel>,
}

impl CompressedPyramid {
    pub fn new(levels: Vec<CompressedLevel>) -> Result<Self> {
        if levels.len() != 4 {
            return Err(Error::arg("compressed pyramid needs 4 levels"));
        }
        Ok(CompressedPyramid { levels })
    }

    pub fn levels(&self) -> &[CompressedLevel] {
        &self.levels
    }

    pub fn level(&self, level: Level) -> &CompressedLevel {
        &self.levels[level.index()]
    }

    /// The noise-injected features as a plain pyramid.
    pub fn features(&self) -> Result<FeaturePyramid> {
        FeaturePyramid::new(self.levels.iter().map(|l| l.r.clone()).collect())
    }

    pub fn r_maps(&self) -> Vec<FeatureMap> {
        self.levels.iter().map(|l| l.r.clone()).collect()
    }

    /// Per-level MI means in nats.
    pub fn mi_means(&self) -> Result<Vec<f64>> {
        self.levels
            .iter()
            .map(|l| crate::tensor::scalar(&l.mi_mean))
            .collect()
    }
}

pub fn compress(
    pyramid: &FeaturePyramid,
    params: &BottleneckParams,
    noise: &mut Noise<'_>,
) -> Result<CompressedPyramid> {
    let mut levels = Vec::with_capacity(4);
    for level in Level::ALL {
        let alpha = predict_controller(pyramid, level, params)?;
        levels.push(compress_level(pyramid.level(level), alpha, noise)?);
    }
    CompressedPyramid::new(levels)
}

/// Compression of one level under a given gate.
pub fn compress_level(f: &FeatureMap, alpha: Controller, noise: &mut Noise<'_>) -> Result<CompressedLevel> {
    let r = inject_noise(f, &alpha, noise)?;
    let (mi_map, mi_mean) = mutual_information(f, &alpha)?;
    Ok(CompressedLevel {
        r,
        alpha,
        mi_map,
        mi_mean,
    })
}

/// Pass-through used when a branch's bottlenecks are ablated: `R = F`,
/// gate one, zero information cost.
pub fn bypass(pyramid: &FeaturePyramid) -> Result<CompressedPyramid> {
    let levels = pyramid
        .levels()
        .iter()
        .map(|f| {
            let zeros = f.tensor().zeros_like()?;
            Ok(CompressedLevel {
                r: f.clone(),
                alpha: Controller::constant(f, 1.0)?,
                mi_mean: zeros.mean_all()?,
                mi_map: zeros,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    CompressedPyramid::new(levels)
}

/// MI map of one level converted to bits.
pub fn info_map_bits(cp: &CompressedPyramid, level: Level) -> Result<Tensor> {
    Ok((&cp.level(level).mi_map / std::f64::consts::LN_2)?)
}

/// Casts a gate map for export.
pub fn controller_values(c: &Controller) -> Result<Vec<f64>> {
    Ok(c.tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
}
