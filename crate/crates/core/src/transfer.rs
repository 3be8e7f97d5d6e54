//! Attention-based statistics transfer over the multi-level pyramids.
//!
//! At level `i`, queries come from the instance-normalized content levels
//! `1..=i` (resized to the level-`i` size and stacked), keys likewise from
//! the style side, and values are the style features themselves. Each content
//! position receives an attention-weighted mean `M` and standard deviation
//! `S` of the style values, and the output is `S * IN(Rc) + M`.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::bottleneck::CompressedPyramid;
use crate::encoder::EncoderArch;
use crate::error::{Error, Result};
use crate::params::{Conv2d, ParamStore};
use crate::tensor::{
    instance_norm, max_pool, resize_tensor, safe_sqrt, FeatureMap, FeaturePyramid, Level,
};

/// Key/value grids larger than this per side are max-pooled down before attention.
pub const DEFAULT_MAX_KV_SIDE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferVariant {
    Learnable,
    ParameterFree,
}

/// 1x1 query and key projections for one level.
#[derive(Debug, Clone)]
pub struct LevelProjection {
    pub query: Conv2d,
    pub key: Conv2d,
}

#[derive(Debug, Clone)]
pub struct TransferParams {
    variant: TransferVariant,
    projections: Vec<LevelProjection>,
    max_kv_side: usize,
}

impl TransferParams {
    /// Registers `transfer.level{i}.{query,key}` projections mapping the
    /// stacked levels `1..=i` down to the level-`i` channel count.
    pub fn learnable<R: rand::Rng + ?Sized>(
        arch: &EncoderArch,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let channels = arch.all_tap_channels();
        let mut projections = Vec::with_capacity(4);
        for level in Level::ALL {
            let i = level.index();
            let stacked: usize = channels[..=i].iter().sum();
            let base = format!("transfer.level{}", i + 1);
            projections.push(LevelProjection {
                query: store.conv(&format!("{base}.query"), stacked, channels[i], 1, rng)?,
                key: store.conv(&format!("{base}.key"), stacked, channels[i], 1, rng)?,
            });
        }
        Ok(TransferParams {
            variant: TransferVariant::Learnable,
            projections,
            max_kv_side: DEFAULT_MAX_KV_SIDE,
        })
    }

    pub fn parameter_free() -> Self {
        TransferParams {
            variant: TransferVariant::ParameterFree,
            projections: Vec::new(),
            max_kv_side: DEFAULT_MAX_KV_SIDE,
        }
    }

    pub fn from_projections(projections: Vec<LevelProjection>) -> Result<Self> {
        if projections.len() != 4 {
            return Err(Error::arg("learnable transfer needs one projection pair per level"));
        }
        Ok(TransferParams {
            variant: TransferVariant::Learnable,
            projections,
            max_kv_side: DEFAULT_MAX_KV_SIDE,
        })
    }

    pub fn with_max_kv_side(mut self, side: usize) -> Self {
        self.max_kv_side = side.max(1);
        self
    }

    pub fn variant(&self) -> TransferVariant {
        self.variant
    }

    pub fn max_kv_side(&self) -> usize {
        self.max_kv_side
    }

    pub fn projection(&self, level: Level) -> Option<&LevelProjection> {
        self.projections.get(level.index())
    }
}

/// Non-negative weights summing to one, one per style.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationWeights(Vec<f64>);

impl InterpolationWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::arg("at least one interpolation weight is required"));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::arg(format!("interpolation weight {w} is negative or non-finite")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::arg(format!("interpolation weights sum to {sum}, expected 1")));
        }
        Ok(InterpolationWeights(weights))
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }
}

/// Intermediate quantities of one attention transfer, exposed for inspection.
#[derive(Debug, Clone)]
pub struct AttentionStats {
    /// `B x Nc x Ns` row-stochastic attention.
    pub attention: Tensor,
    /// `B x C x Hc x Wc` attention-weighted mean of the values.
    pub mean: Tensor,
    /// `B x C x Hc x Wc` attention-weighted standard deviation.
    pub std: Tensor,
    /// `B x C x Ns` values after any pooling.
    pub values: Tensor,
}

fn stacked_normalized(pyr: &[FeatureMap], upto: usize, h: usize, w: usize) -> Result<Tensor> {
    let parts = pyr[..=upto]
        .iter()
        .map(|f| instance_norm(&resize_tensor(f.tensor(), h, w)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 1)?)
}

fn pool_factor(h: usize, w: usize, side: usize) -> usize {
    if h <= side && w <= side {
        1
    } else {
        h.max(w).div_ceil(side)
    }
}

pub fn attention_stats(
    rc: &FeatureMap,
    rs: &FeatureMap,
    pyr_c: &[FeatureMap],
    pyr_s: &[FeatureMap],
    level: Level,
    params: &TransferParams,
) -> Result<AttentionStats> {
    let i = level.index();
    if pyr_c.len() <= i || pyr_s.len() <= i {
        return Err(Error::arg(format!("pyramids must reach level {level}")));
    }
    let (b, c, hc, wc) = rc.dims();
    let (bs, cs, hs, ws) = rs.dims();
    if b != bs || c != cs {
        return Err(Error::arg(format!(
            "content {:?} and style {:?} maps disagree on batch or channels",
            rc.dims(),
            rs.dims()
        )));
    }
    let mut q = stacked_normalized(pyr_c, i, hc, wc)?;
    let mut k = stacked_normalized(pyr_s, i, hs, ws)?;
    if let Some(p) = params.projection(level) {
        if p.query.in_channels() != q.dims()[1] || p.key.in_channels() != k.dims()[1] {
            return Err(Error::arg(format!(
                "projection at {level} expects {} stacked channels, got {}",
                p.query.in_channels(),
                q.dims()[1]
            )));
        }
        q = p.query.forward(&q)?;
        k = p.key.forward(&k)?;
    } else if params.variant() == TransferVariant::Learnable {
        return Err(Error::arg(format!("missing projection for {level}")));
    }
    let mut v = rs.tensor().clone();
    let factor = pool_factor(hs, ws, params.max_kv_side());
    if factor > 1 {
        k = max_pool(&k, factor)?;
        v = max_pool(&v, factor)?;
    }
    let d = q.dims()[1];
    let nc = hc * wc;
    let q = q.reshape((b, d, nc))?.transpose(1, 2)?.contiguous()?;
    let ns = k.dims()[2] * k.dims()[3];
    let k = k.reshape((b, d, ns))?.contiguous()?;
    let v = v.reshape((b, c, ns))?.contiguous()?;

    let logits = (q.matmul(&k)? / (d as f64).sqrt())?;
    let attention = candle_nn::ops::softmax(&logits, D::Minus1)?;
    let vt = v.transpose(1, 2)?.contiguous()?;
    let mean = attention.matmul(&vt)?;
    let second = attention.matmul(&vt.sqr()?)?;
    let var = (second - mean.sqr()?)?.relu()?;
    let std = safe_sqrt(&var)?;
    let to_map = |t: Tensor| -> Result<Tensor> {
        Ok(t.transpose(1, 2)?.contiguous()?.reshape((b, c, hc, wc))?)
    };
    Ok(AttentionStats {
        attention,
        mean: to_map(mean)?,
        std: to_map(std)?,
        values: v,
    })
}

/// Transfer at one level; output has the shape of `rc`.
pub fn adaattn_level(
    rc: &FeatureMap,
    rs: &FeatureMap,
    pyr_c: &[FeatureMap],
    pyr_s: &[FeatureMap],
    level: Level,
    params: &TransferParams,
) -> Result<FeatureMap> {
    let stats = attention_stats(rc, rs, pyr_c, pyr_s, level, params)?;
    let out = (stats.std * instance_norm(rc.tensor())?)?.add(&stats.mean)?;
    FeatureMap::new(out, rc.level())
}

/// Transfer at every level of two plain pyramids.
pub fn transfer_pyramids(
    content: &FeaturePyramid,
    style: &FeaturePyramid,
    params: &TransferParams,
) -> Result<Vec<FeatureMap>> {
    Level::ALL
        .iter()
        .map(|&l| {
            adaattn_level(
                content.level(l),
                style.level(l),
                content.levels(),
                style.levels(),
                l,
                params,
            )
        })
        .collect()
}

pub fn multi_level_transfer(
    cp_c: &CompressedPyramid,
    cp_s: &CompressedPyramid,
    params: &TransferParams,
) -> Result<Vec<FeatureMap>> {
    transfer_pyramids(&cp_c.features()?, &cp_s.features()?, params)
}

/// Convex combination of per-style transferred maps, level by level.
/// Zero-weight styles are skipped, so a one-hot weight vector reproduces the
/// single-style transfer exactly.
pub fn interpolate_styles(
    cp_c: &CompressedPyramid,
    styles: &[CompressedPyramid],
    weights: &InterpolationWeights,
    params: &TransferParams,
) -> Result<Vec<FeatureMap>> {
    if styles.len() != weights.weights().len() {
        return Err(Error::arg(format!(
            "{} styles but {} weights",
            styles.len(),
            weights.weights().len()
        )));
    }
    let mut acc: Option<Vec<Tensor>> = None;
    for (style, &w) in styles.iter().zip(weights.weights()) {
        if w == 0.0 {
            continue;
        }
        let maps = multi_level_transfer(cp_c, style, params)?;
        let scaled: Vec<Tensor> = maps
            .iter()
            .map(|m| if w == 1.0 { Ok(m.tensor().clone()) } else { m.tensor() * w })
            .collect::<candle_core::Result<_>>()?;
        acc = Some(match acc {
            None => scaled,
            Some(prev) => prev
                .iter()
                .zip(&scaled)
                .map(|(a, b)| a + b)
                .collect::<candle_core::Result<_>>()?,
        });
    }
    let acc = acc.ok_or_else(|| Error::arg("all interpolation weights are zero"))?;
    acc.into_iter()
        .zip(Level::ALL)
        .map(|(t, l)| FeatureMap::new(t, l))
        .collect()
}
