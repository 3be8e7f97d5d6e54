//! The assembled stylization network: frozen encoder, content and style
//! bottlenecks, learnable transfer, and decoder.

use std::path::PathBuf;

use candle_core::DType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bottleneck::{bypass, compress, BottleneckParams, BranchKind, CompressedPyramid, Noise};
use crate::decoder::{clamp_to_image, decode, DecoderParams};
use crate::encoder::{encode, load_encoder, EncoderArch, EncoderWeights};
use crate::error::{Error, Result};
use crate::imageio::{crop_tensor, pad_to_multiple};
use crate::params::ParamStore;
use crate::tensor::{FeatureMap, FeaturePyramid, ImageTensor};
use crate::transfer::{
    interpolate_styles, multi_level_transfer, InterpolationWeights, TransferParams,
    DEFAULT_MAX_KV_SIDE,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EncoderSource {
    Tiny { seed: u64 },
    Archive { path: PathBuf, checksum: String },
}

impl EncoderSource {
    pub fn arch(&self) -> Option<EncoderArch> {
        match self {
            EncoderSource::Tiny { .. } => Some(EncoderArch::TINY),
            EncoderSource::Archive { .. } => None,
        }
    }

    /// Loads the weights, checking the archive checksum when one is recorded.
    pub fn load(&self) -> Result<EncoderWeights> {
        match self {
            EncoderSource::Tiny { seed } => EncoderWeights::tiny(*seed),
            EncoderSource::Archive { path, checksum } => {
                let w = load_encoder(path)?;
                let actual = w.checksum()?;
                if !checksum.is_empty() && &actual != checksum {
                    return Err(Error::ConfigMismatch(format!(
                        "encoder archive {} has checksum {actual}, expected {checksum}",
                        path.display()
                    )));
                }
                Ok(w)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderSource,
    pub arch: EncoderArch,
    pub use_cib: bool,
    pub use_sib: bool,
    pub init_seed: u64,
    pub max_kv_side: usize,
}

impl ModelConfig {
    pub fn tiny(seed: u64) -> Self {
        ModelConfig {
            encoder: EncoderSource::Tiny {
                seed: crate::encoder::TINY_SEED,
            },
            arch: EncoderArch::TINY,
            use_cib: true,
            use_sib: true,
            init_seed: seed,
            max_kv_side: DEFAULT_MAX_KV_SIDE,
        }
    }

    /// Checks that a stored configuration can be used where `self` is expected.
    pub fn check_compatible(&self, stored: &ModelConfig) -> Result<()> {
        if self.arch != stored.arch {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint was trained with encoder width divisor {}, configuration expects {}",
                stored.arch.width_divisor, self.arch.width_divisor
            )));
        }
        if self.use_cib != stored.use_cib || self.use_sib != stored.use_sib {
            return Err(Error::ConfigMismatch(
                "checkpoint and configuration disagree on which bottlenecks exist".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: EncoderWeights,
    pub store: ParamStore,
    pub content_ib: Option<BottleneckParams>,
    pub style_ib: Option<BottleneckParams>,
    pub transfer: TransferParams,
    pub t_prime: TransferParams,
    pub decoder: DecoderParams,
}

impl Model {
    /// Freshly initialized trainable parameters around `encoder`.
    pub fn new(config: ModelConfig, encoder: EncoderWeights, dtype: DType) -> Result<Self> {
        if encoder.arch() != config.arch {
            return Err(Error::ConfigMismatch(format!(
                "encoder width divisor {} does not match configured {}",
                encoder.arch().width_divisor,
                config.arch.width_divisor
            )));
        }
        let encoder = if encoder.dtype() == dtype {
            encoder
        } else {
            encoder.to_dtype(dtype)?
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new(dtype);
        let arch = config.arch;
        let content_ib = config
            .use_cib
            .then(|| BottleneckParams::new(BranchKind::Content, &arch, &mut store, &mut rng))
            .transpose()?;
        let style_ib = config
            .use_sib
            .then(|| BottleneckParams::new(BranchKind::Style, &arch, &mut store, &mut rng))
            .transpose()?;
        let transfer =
            TransferParams::learnable(&arch, &mut store, &mut rng)?.with_max_kv_side(config.max_kv_side);
        let decoder = DecoderParams::new(&arch, &mut store, &mut rng)?;
        Ok(Model {
            t_prime: TransferParams::parameter_free().with_max_kv_side(config.max_kv_side),
            config,
            encoder,
            store,
            content_ib,
            style_ib,
            transfer,
            decoder,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn encode(&self, img: &ImageTensor) -> Result<FeaturePyramid> {
        encode(img, &self.encoder)
    }

    /// Content encoder: CIBs applied to a raw pyramid.
    pub fn compress_content(&self, pyr: &FeaturePyramid, noise: &mut Noise<'_>) -> Result<CompressedPyramid> {
        match &self.content_ib {
            Some(p) => compress(pyr, p, noise),
            None => bypass(pyr),
        }
    }

    /// Style encoder: SIBs applied to a raw pyramid.
    pub fn compress_style(&self, pyr: &FeaturePyramid, noise: &mut Noise<'_>) -> Result<CompressedPyramid> {
        match &self.style_ib {
            Some(p) => compress(pyr, p, noise),
            None => bypass(pyr),
        }
    }

    pub fn compress_branch(
        &self,
        kind: BranchKind,
        pyr: &FeaturePyramid,
        noise: &mut Noise<'_>,
    ) -> Result<CompressedPyramid> {
        match kind {
            BranchKind::Content => self.compress_content(pyr, noise),
            BranchKind::Style => self.compress_style(pyr, noise),
        }
    }

    pub fn transfer(&self, cp_c: &CompressedPyramid, cp_s: &CompressedPyramid) -> Result<Vec<FeatureMap>> {
        multi_level_transfer(cp_c, cp_s, &self.transfer)
    }

    pub fn decode(&self, transferred: &[FeatureMap]) -> Result<ImageTensor> {
        decode(transferred, &self.decoder)
    }

    /// Unclamped stylization of `content` with `style`.
    pub fn stylize_raw(&self, content: &ImageTensor, style: &ImageTensor, noise: &mut Noise<'_>) -> Result<ImageTensor> {
        let cp_c = self.compress_content(&self.encode(content)?, noise)?;
        let cp_s = self.compress_style(&self.encode(style)?, noise)?;
        self.decode(&self.transfer(&cp_c, &cp_s)?)
    }

    /// Clamped stylization of images of any size. Inputs are reflect-padded to
    /// a multiple of 16 and the result is cropped back to the content size.
    pub fn stylize(&self, content: &ImageTensor, style: &ImageTensor, noise: &mut Noise<'_>) -> Result<ImageTensor> {
        let (h, w) = (content.height(), content.width());
        let c = pad_to_multiple(content, 16)?;
        let s = pad_to_multiple(style, 16)?;
        let out = clamp_to_image(self.stylize_raw(&c, &s, noise)?.tensor())?;
        crop_tensor(&out, h, w)
    }

    /// Stylization with a convex mix of several styles.
    pub fn interpolate(
        &self,
        content: &ImageTensor,
        styles: &[ImageTensor],
        weights: &InterpolationWeights,
        noise: &mut Noise<'_>,
    ) -> Result<ImageTensor> {
        let (h, w) = (content.height(), content.width());
        let cp_c = self.compress_content(&self.encode(&pad_to_multiple(content, 16)?)?, noise)?;
        let cps = styles
            .iter()
            .map(|s| self.compress_style(&self.encode(&pad_to_multiple(s, 16)?)?, noise))
            .collect::<Result<Vec<_>>>()?;
        let maps = interpolate_styles(&cp_c, &cps, weights, &self.transfer)?;
        crop_tensor(&clamp_to_image(self.decode(&maps)?.tensor())?, h, w)
    }
}
