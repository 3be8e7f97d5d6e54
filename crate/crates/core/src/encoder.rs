//! The frozen VGG-19 encoder, truncated after `relu5_1`.
//!
//! Weights live in a named-tensor archive (`conv1_1.weight`, `conv1_1.bias`,
//! ... `conv5_1.bias`) whose manifest carries the architecture string, the
//! channel-width divisor, the input normalization constants and a provenance
//! tag. A tiny variant with every width divided by 8 and seeded random weights
//! stands in for the pretrained network in tests and desk-scale runs.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::{checksum, Archive};
use crate::error::{Error, Result};
use crate::params::Conv2d;
use crate::tensor::{max_pool, FeatureMap, FeaturePyramid, ImageTensor, Level};

pub const ARCHITECTURE: &str = "vgg19-relu5_1/v1";
pub const TINY_WIDTH_DIVISOR: usize = 8;
pub const TINY_SEED: u64 = 0x1b0_5eed;
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Conv layers in execution order: (name, block index of input width, block index of output width).
const LAYERS: [(&str, Option<usize>, usize); 13] = [
    ("conv1_1", None, 0),
    ("conv1_2", Some(0), 0),
    ("conv2_1", Some(0), 1),
    ("conv2_2", Some(1), 1),
    ("conv3_1", Some(1), 2),
    ("conv3_2", Some(2), 2),
    ("conv3_3", Some(2), 2),
    ("conv3_4", Some(2), 2),
    ("conv4_1", Some(2), 3),
    ("conv4_2", Some(3), 3),
    ("conv4_3", Some(3), 3),
    ("conv4_4", Some(3), 3),
    ("conv5_1", Some(3), 4),
];
const FULL_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Pretrained,
    TinyRandom,
    /// Full-width random weights, for shape checks only.
    Random,
}

impl Provenance {
    fn as_str(self) -> &'static str {
        match self {
            Provenance::Pretrained => "pretrained",
            Provenance::TinyRandom => "tiny-random",
            Provenance::Random => "random",
        }
    }
}

/// Channel layout of the encoder, fixed by the width divisor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub width_divisor: usize,
}

impl EncoderArch {
    pub const FULL: EncoderArch = EncoderArch { width_divisor: 1 };
    pub const TINY: EncoderArch = EncoderArch {
        width_divisor: TINY_WIDTH_DIVISOR,
    };

    /// Output width of each VGG block.
    pub fn block_widths(&self) -> [usize; 5] {
        FULL_WIDTHS.map(|w| w / self.width_divisor)
    }

    pub fn tap_channels(&self, level: Level) -> usize {
        level.full_channels() / self.width_divisor
    }

    pub fn all_tap_channels(&self) -> [usize; 4] {
        Level::ALL.map(|l| self.tap_channels(l))
    }

    /// Expected tensor names and shapes, in execution order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let widths = self.block_widths();
        let mut out = Vec::new();
        for (name, cin, cout) in LAYERS.iter() {
            let cin = cin.map_or(3, |i| widths[i]);
            let cout = widths[*cout];
            out.push((format!("{name}.weight"), vec![cout, cin, 3, 3]));
            out.push((format!("{name}.bias"), vec![cout]));
        }
        out
    }
}

/// A validated, immutable encoder weight set.
#[derive(Debug, Clone)]
pub struct EncoderWeights {
    arch: EncoderArch,
    provenance: Provenance,
    norm_mean: [f64; 3],
    norm_std: [f64; 3],
    tensors: BTreeMap<String, Tensor>,
    convs: Vec<(String, Conv2d)>,
}

impl EncoderWeights {
    fn from_parts(
        arch: EncoderArch,
        provenance: Provenance,
        norm_mean: [f64; 3],
        norm_std: [f64; 3],
        tensors: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let manifest = arch.manifest();
        for (name, shape) in &manifest {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::format(format!("encoder archive is missing `{name}`")))?;
            if t.dims() != shape.as_slice() {
                return Err(Error::format(format!(
                    "encoder tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.dims()
                )));
            }
        }
        if tensors.len() != manifest.len() {
            let extra: Vec<_> = tensors
                .keys()
                .filter(|k| !manifest.iter().any(|(n, _)| n == *k))
                .collect();
            return Err(Error::format(format!("encoder archive has unexpected tensors {extra:?}")));
        }
        if norm_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::format("encoder normalization std must be positive"));
        }
        let mut convs = Vec::new();
        for (name, _, _) in LAYERS.iter() {
            let w = tensors[&format!("{name}.weight")].detach();
            let b = tensors[&format!("{name}.bias")].detach();
            convs.push((name.to_string(), Conv2d::new(w, b)?));
        }
        Ok(EncoderWeights {
            arch,
            provenance,
            norm_mean,
            norm_std,
            tensors,
            convs,
        })
    }

    /// Tiny variant: widths divided by 8, He-normal weights from `seed`.
    pub fn tiny(seed: u64) -> Result<Self> {
        EncoderWeights::random(EncoderArch::TINY, seed)
    }

    /// He-normal random weights for any width divisor.
    pub fn random(arch: EncoderArch, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in arch.manifest() {
            let n: usize = shape.iter().product();
            let values: Vec<f32> = if name.ends_with(".weight") {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
                (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
            } else {
                let normal = Normal::new(0.0, 0.01).expect("valid std");
                (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
            };
            tensors.insert(name, Tensor::from_vec(values, shape, &Device::Cpu)?);
        }
        let provenance = if arch == EncoderArch::TINY {
            Provenance::TinyRandom
        } else {
            Provenance::Random
        };
        EncoderWeights::from_parts(arch, provenance, IMAGENET_MEAN, IMAGENET_STD, tensors)
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let arch_str = archive.manifest_str("architecture")?;
        if arch_str != ARCHITECTURE {
            return Err(Error::format(format!(
                "unsupported encoder architecture `{arch_str}`, expected `{ARCHITECTURE}`"
            )));
        }
        let divisor = archive
            .manifest
            .get("width_divisor")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::format("manifest is missing `width_divisor`"))?
            as usize;
        if divisor == 0 || FULL_WIDTHS.iter().any(|w| w % divisor != 0) {
            return Err(Error::format(format!("invalid width divisor {divisor}")));
        }
        let provenance: Provenance =
            serde_json::from_value(json!(archive.manifest_str("provenance")?))
                .map_err(|e| Error::format(format!("bad provenance tag: {e}")))?;
        let triple = |key: &str| -> Result<[f64; 3]> {
            let v: Vec<f64> = archive
                .manifest
                .get(key)
                .and_then(|v| serde_json::from_value(v.clone()).ok())
                .ok_or_else(|| Error::format(format!("manifest is missing `{key}`")))?;
            v.try_into()
                .map_err(|_| Error::format(format!("`{key}` must have 3 entries")))
        };
        let norm_mean = triple("norm_mean")?;
        let norm_std = triple("norm_std")?;
        EncoderWeights::from_parts(
            EncoderArch {
                width_divisor: divisor,
            },
            provenance,
            norm_mean,
            norm_std,
            archive.tensors.clone(),
        )
    }

    pub fn to_archive(&self) -> Archive {
        let tensor_manifest: serde_json::Map<String, serde_json::Value> = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), json!({"dtype": format!("{:?}", t.dtype()), "shape": t.dims()})))
            .collect();
        let mut a = Archive::new(json!({
            "format": "infostyler-encoder",
            "architecture": ARCHITECTURE,
            "width_divisor": self.arch.width_divisor,
            "provenance": self.provenance.as_str(),
            "norm_mean": self.norm_mean,
            "norm_std": self.norm_std,
            "tensors": tensor_manifest,
        }));
        for (k, t) in &self.tensors {
            a.insert(k.clone(), t.clone());
        }
        a
    }

    pub fn arch(&self) -> EncoderArch {
        self.arch
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn checksum(&self) -> Result<String> {
        checksum(self.tensors.iter())
    }

    /// Same weights cast to `dtype` (used for double-precision checks).
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, t)| Ok((k.clone(), t.to_dtype(dtype)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        EncoderWeights::from_parts(self.arch, self.provenance, self.norm_mean, self.norm_std, tensors)
    }

    pub fn dtype(&self) -> DType {
        self.convs[0].1.weight().dtype()
    }
}

pub fn load_encoder(path: &Path) -> Result<EncoderWeights> {
    EncoderWeights::from_archive(&Archive::load(path)?)
}

pub fn save_encoder(w: &EncoderWeights, path: &Path) -> Result<()> {
    w.to_archive().save(path)
}

/// Runs the frozen encoder and returns the four ReLU taps.
pub fn encode(img: &ImageTensor, w: &EncoderWeights) -> Result<FeaturePyramid> {
    let (h, wd) = (img.height(), img.width());
    if h % 16 != 0 || wd % 16 != 0 || h == 0 || wd == 0 {
        return Err(Error::arg(format!(
            "encoder input {h}x{wd} must have both sides divisible by 16; pad to the next multiple of 16"
        )));
    }
    let x = img.tensor();
    let dtype = x.dtype();
    let mean = Tensor::from_vec(w.norm_mean.to_vec(), (1, 3, 1, 1), x.device())?.to_dtype(dtype)?;
    let std = Tensor::from_vec(w.norm_std.to_vec(), (1, 3, 1, 1), x.device())?.to_dtype(dtype)?;
    let mut x = x.broadcast_sub(&mean)?.broadcast_div(&std)?;

    let cast;
    let convs = if w.dtype() == dtype {
        &w.convs
    } else {
        cast = w.to_dtype(dtype)?.convs;
        &cast
    };
    let mut taps = Vec::with_capacity(4);
    for (name, conv) in convs {
        if matches!(name.as_str(), "conv2_1" | "conv3_1" | "conv4_1" | "conv5_1") {
            x = max_pool(&x, 2)?;
        }
        x = conv.forward(&x)?.relu()?;
        let level = match name.as_str() {
            "conv2_1" => Some(Level::Relu2_1),
            "conv3_1" => Some(Level::Relu3_1),
            "conv4_1" => Some(Level::Relu4_1),
            "conv5_1" => Some(Level::Relu5_1),
            _ => None,
        };
        if let Some(level) = level {
            taps.push(FeatureMap::new(x.clone(), level)?);
        }
    }
    FeaturePyramid::new(taps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::to_f64_vec;

    fn gray(size: usize, dtype: DType) -> ImageTensor {
        let t = Tensor::arange(0f32, (3 * size * size) as f32, &Device::Cpu)
            .unwrap()
            .reshape((1, 3, size, size))
            .unwrap();
        let t = ((t / (3 * size * size) as f64).unwrap()).to_dtype(dtype).unwrap();
        ImageTensor::new(t).unwrap()
    }

    #[test]
    fn tiny_shapes_at_64() {
        let w = EncoderWeights::tiny(TINY_SEED).unwrap();
        let p = encode(&gray(64, DType::F32), &w).unwrap();
        let dims: Vec<_> = p.levels().iter().map(|l| l.dims()).collect();
        assert_eq!(
            dims,
            vec![(1, 16, 32, 32), (1, 32, 16, 16), (1, 64, 8, 8), (1, 64, 4, 4)]
        );
        for l in p.levels() {
            assert!(to_f64_vec(l.tensor()).unwrap().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let w = EncoderWeights::tiny(TINY_SEED).unwrap();
        let err = encode(&gray(40, DType::F32), &w).unwrap_err();
        assert!(matches!(err, Error::Argument(ref m) if m.contains("pad")));
    }

    #[test]
    fn encode_is_deterministic() {
        let w = EncoderWeights::tiny(TINY_SEED).unwrap();
        let img = gray(32, DType::F32);
        let a = encode(&img, &w).unwrap();
        let b = encode(&img, &w).unwrap();
        for (x, y) in a.levels().iter().zip(b.levels()) {
            assert_eq!(to_f64_vec(x.tensor()).unwrap(), to_f64_vec(y.tensor()).unwrap());
        }
    }

    #[test]
    fn archive_roundtrip_and_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.safetensors");
        let w = EncoderWeights::tiny(TINY_SEED).unwrap();
        save_encoder(&w, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let loaded = load_encoder(&path).unwrap();
        assert_eq!(loaded.provenance(), Provenance::TinyRandom);
        assert_eq!(loaded.checksum().unwrap(), w.checksum().unwrap());
        assert_eq!(loaded.to_archive().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn missing_bias_is_named() {
        let w = EncoderWeights::tiny(TINY_SEED).unwrap();
        let mut a = w.to_archive();
        a.tensors.remove("conv3_2.bias");
        let err = EncoderWeights::from_archive(&a).unwrap_err().to_string();
        assert!(err.contains("conv3_2.bias"), "{err}");
    }

    #[test]
    fn wrong_shape_is_named() {
        let w = EncoderWeights::tiny(TINY_SEED).unwrap();
        let mut a = w.to_archive();
        a.insert("conv1_1.bias", Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap());
        let err = EncoderWeights::from_archive(&a).unwrap_err().to_string();
        assert!(err.contains("conv1_1.bias"), "{err}");
    }

    #[test]
    fn full_manifest_matches_vgg19() {
        let m = EncoderArch::FULL.manifest();
        assert_eq!(m.len(), 26);
        assert_eq!(m[0], ("conv1_1.weight".to_string(), vec![64, 3, 3, 3]));
        assert_eq!(m[25], ("conv5_1.bias".to_string(), vec![512]));
        let n: usize = m.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        // conv1_1 .. conv5_1 of VGG-19
        assert_eq!(n, 12_944_960);
    }
}
