//! Trainable decoder: a mirrored VGG-19 stack from the `relu5_1` depth back to
//! RGB. Each shallower transferred map is concatenated onto the upsampled
//! stream at its resolution and fused by a 3x3 convolution.

use candle_core::Tensor;

use crate::encoder::EncoderArch;
use crate::error::{Error, Result};
use crate::params::{Conv2d, ParamStore};
use crate::tensor::{to_f64_vec, FeatureMap, ImageTensor, Level};

#[derive(Debug, Clone)]
struct Stage {
    fuse: Option<Conv2d>,
    convs: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    stages: Vec<Stage>,
    head: Vec<Conv2d>,
    out: Conv2d,
}

impl DecoderParams {
    pub fn new<R: rand::Rng + ?Sized>(
        arch: &EncoderArch,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let w = arch.block_widths();
        let tap = arch.all_tap_channels();
        let mut conv = |name: &str, cin: usize, cout: usize| store.conv(&format!("dec.{name}"), cin, cout, 3, rng);
        let stages = vec![
            // relu5_1 -> /8
            Stage {
                fuse: None,
                convs: vec![conv("stage5.conv1", tap[3], w[3])?],
            },
            // relu4_1 -> /4
            Stage {
                fuse: Some(conv("stage4.fuse", w[3] + tap[2], w[3])?),
                convs: vec![
                    conv("stage4.conv1", w[3], w[3])?,
                    conv("stage4.conv2", w[3], w[3])?,
                    conv("stage4.conv3", w[3], w[2])?,
                ],
            },
            // relu3_1 -> /2
            Stage {
                fuse: Some(conv("stage3.fuse", w[2] + tap[1], w[2])?),
                convs: vec![
                    conv("stage3.conv1", w[2], w[2])?,
                    conv("stage3.conv2", w[2], w[2])?,
                    conv("stage3.conv3", w[2], w[1])?,
                ],
            },
            // relu2_1 -> full size
            Stage {
                fuse: Some(conv("stage2.fuse", w[1] + tap[0], w[1])?),
                convs: vec![conv("stage2.conv1", w[1], w[0])?],
            },
        ];
        let head = vec![conv("stage1.conv1", w[0], w[0])?];
        let out = conv("out", w[0], 3)?;
        Ok(DecoderParams { stages, head, out })
    }
}

/// Maps the four transferred levels to an image 16x the deepest map's size.
/// The result is unclamped.
pub fn decode(transferred: &[FeatureMap], params: &DecoderParams) -> Result<ImageTensor> {
    if transferred.len() != 4 {
        return Err(Error::arg(format!(
            "decoder needs 4 transferred maps, got {}",
            transferred.len()
        )));
    }
    for (i, pair) in transferred.windows(2).enumerate() {
        let (b0, _, h0, w0) = pair[0].dims();
        let (b1, _, h1, w1) = pair[1].dims();
        if b0 != b1 || h0 != 2 * h1 || w0 != 2 * w1 {
            return Err(Error::arg(format!(
                "transferred maps {} and {} have inconsistent shapes {:?} / {:?}",
                i + 1,
                i + 2,
                pair[0].dims(),
                pair[1].dims()
            )));
        }
    }
    let mut x = transferred[Level::Relu5_1.index()].tensor().clone();
    for (stage, skip) in params.stages.iter().zip([None, Some(2usize), Some(1), Some(0)]) {
        if let (Some(fuse), Some(idx)) = (&stage.fuse, skip) {
            let skip = transferred[idx].tensor();
            if fuse.in_channels() != x.dims()[1] + skip.dims()[1] {
                return Err(Error::arg(format!(
                    "decoder fusion expects {} channels, got {}",
                    fuse.in_channels(),
                    x.dims()[1] + skip.dims()[1]
                )));
            }
            x = fuse.forward(&Tensor::cat(&[&x, skip], 1)?)?.relu()?;
        }
        for c in &stage.convs {
            x = c.forward(&x)?.relu()?;
        }
        let (_, _, h, w) = x.dims4()?;
        x = x.upsample_nearest2d(2 * h, 2 * w)?;
    }
    for c in &params.head {
        x = c.forward(&x)?.relu()?;
    }
    ImageTensor::new(params.out.forward(&x)?)
}

/// Clips to `[0, 1]` for export; non-finite values signal divergence.
pub fn clamp_to_image(x: &Tensor) -> Result<ImageTensor> {
    if to_f64_vec(x)?.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("decoder output contains non-finite values".into()));
    }
    ImageTensor::new(x.clamp(0.0, 1.0)?)
}
