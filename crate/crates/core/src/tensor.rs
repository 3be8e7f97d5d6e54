//! Image and feature containers plus the small set of tensor helpers the
//! pipeline shares: per-channel statistics, bilinear resizing, channel
//! concatenation, reflection padding and instance normalization.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};

/// Variance below this is treated as exactly zero so `sqrt` stays differentiable.
pub const VAR_FLOOR: f64 = 1e-12;

/// Epsilon used inside instance normalization.
pub const NORM_EPS: f64 = 1e-5;

/// The four encoder taps, shallow to deep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    Relu2_1,
    Relu3_1,
    Relu4_1,
    Relu5_1,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::Relu2_1, Level::Relu3_1, Level::Relu4_1, Level::Relu5_1];

    /// Zero-based position in the pyramid.
    pub fn index(self) -> usize {
        match self {
            Level::Relu2_1 => 0,
            Level::Relu3_1 => 1,
            Level::Relu4_1 => 2,
            Level::Relu5_1 => 3,
        }
    }

    pub fn from_index(i: usize) -> Result<Level> {
        Level::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::arg(format!("level index {i} out of range 0..4")))
    }

    /// One-based level number as used on the command line (1..=4).
    pub fn from_number(n: usize) -> Result<Level> {
        if n == 0 {
            return Err(Error::arg("level numbers start at 1"));
        }
        Level::from_index(n - 1)
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Relu2_1 => "relu2_1",
            Level::Relu3_1 => "relu3_1",
            Level::Relu4_1 => "relu4_1",
            Level::Relu5_1 => "relu5_1",
        }
    }

    /// Channel count at full VGG-19 width.
    pub fn full_channels(self) -> usize {
        match self {
            Level::Relu2_1 => 128,
            Level::Relu3_1 => 256,
            Level::Relu4_1 | Level::Relu5_1 => 512,
        }
    }

    /// Spatial downsampling factor relative to the input image.
    pub fn stride(self) -> usize {
        2usize << self.index()
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Batched RGB image, `B x 3 x H x W`, nominally in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        match t.dims() {
            [_, 3, _, _] => Ok(ImageTensor(t)),
            d => Err(Error::arg(format!("image tensor must be Bx3xHxW, got {d:?}"))),
        }
    }

    /// Builds a `1 x 3 x H x W` image from interleaved 8-bit RGB.
    pub fn from_rgb8(rgb: &[u8], width: usize, height: usize, dtype: DType) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(Error::arg("rgb buffer length does not match dimensions"));
        }
        let data: Vec<f32> = rgb.iter().map(|&v| v as f32 / 255.0).collect();
        let t = Tensor::from_vec(data, (height, width, 3), &Device::Cpu)?
            .permute((2, 0, 1))?
            .unsqueeze(0)?
            .to_dtype(dtype)?
            .contiguous()?;
        Ok(ImageTensor(t))
    }

    /// Interleaved 8-bit RGB of batch item `index`, clamped to `[0, 1]` first.
    pub fn to_rgb8(&self, index: usize) -> Result<(Vec<u8>, usize, usize)> {
        let (_, _, h, w) = self.0.dims4()?;
        let item = self
            .0
            .get(index)?
            .to_dtype(DType::F64)?
            .permute((1, 2, 0))?
            .flatten_all()?
            .to_vec1::<f64>()?;
        if item.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("image contains non-finite values".into()));
        }
        let bytes = item
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Ok((bytes, w, h))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[3]
    }

    pub fn dtype(&self) -> DType {
        self.0.dtype()
    }
}

/// One tapped feature map, `B x C x Hf x Wf`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    tensor: Tensor,
    level: Level,
}

impl FeatureMap {
    pub fn new(tensor: Tensor, level: Level) -> Result<Self> {
        if tensor.rank() != 4 {
            return Err(Error::arg(format!(
                "feature map must be rank 4, got {:?}",
                tensor.dims()
            )));
        }
        Ok(FeatureMap { tensor, level })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.tensor.dims();
        (d[0], d[1], d[2], d[3])
    }

    pub fn channels(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn spatial(&self) -> (usize, usize) {
        let d = self.tensor.dims();
        (d[2], d[3])
    }

    pub fn detach(&self) -> FeatureMap {
        FeatureMap {
            tensor: self.tensor.detach(),
            level: self.level,
        }
    }
}

/// The four taps of the fixed encoder, shallow to deep.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    levels: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<FeatureMap>) -> Result<Self> {
        if levels.len() != 4 {
            return Err(Error::arg(format!(
                "pyramid needs exactly 4 levels, got {}",
                levels.len()
            )));
        }
        for (i, l) in levels.iter().enumerate() {
            if l.level().index() != i {
                return Err(Error::arg(format!(
                    "pyramid slot {i} holds level {}",
                    l.level()
                )));
            }
        }
        for pair in levels.windows(2) {
            let (h0, w0) = pair[0].spatial();
            let (h1, w1) = pair[1].spatial();
            if h0 != 2 * h1 || w0 != 2 * w1 {
                return Err(Error::arg(format!(
                    "spatial sizes must halve level to level: {h0}x{w0} -> {h1}x{w1}"
                )));
            }
        }
        Ok(FeaturePyramid { levels })
    }

    pub fn levels(&self) -> &[FeatureMap] {
        &self.levels
    }

    pub fn level(&self, level: Level) -> &FeatureMap {
        &self.levels[level.index()]
    }

    pub fn detach(&self) -> FeaturePyramid {
        FeaturePyramid {
            levels: self.levels.iter().map(FeatureMap::detach).collect(),
        }
    }
}

/// Per-item, per-channel mean and population standard deviation (`B x C`).
#[derive(Debug, Clone)]
pub struct ChannelStats {
    pub mean: Tensor,
    pub std: Tensor,
}

impl ChannelStats {
    pub fn mean_vec(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.mean.to_dtype(DType::F64)?.to_vec2()?)
    }

    pub fn std_vec(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.std.to_dtype(DType::F64)?.to_vec2()?)
    }
}

pub fn channel_stats(f: &FeatureMap) -> Result<ChannelStats> {
    let (mean, std) = mean_std(f.tensor())?;
    Ok(ChannelStats {
        mean: mean.squeeze(3)?.squeeze(2)?,
        std: std.squeeze(3)?.squeeze(2)?,
    })
}

/// Per-(item, channel) spatial mean and population std with shape `B x C x 1 x 1`.
pub fn mean_std(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(D::Minus1)?;
    let std = safe_sqrt(&var)?;
    Ok((mean.reshape((b, c, 1, 1))?, std.reshape((b, c, 1, 1))?))
}

/// `sqrt` that is exactly zero, with zero gradient, for inputs at or below [`VAR_FLOOR`].
pub fn safe_sqrt(x: &Tensor) -> Result<Tensor> {
    let mask = x.detach().gt(VAR_FLOOR)?.to_dtype(x.dtype())?;
    let lifted = ((x * &mask)? + (1.0 - &mask)?)?;
    Ok((lifted.sqrt()? * mask)?)
}

/// Euclidean norm over every element, with a zero gradient at the origin.
pub fn l2_norm(x: &Tensor) -> Result<Tensor> {
    safe_sqrt(&x.sqr()?.sum_all()?)
}

/// Mean/std normalization per item and channel.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let out = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
    Ok(out.reshape((b, c, h, w))?)
}

fn bilinear_taps(n_in: usize, n_out: usize) -> (Vec<u32>, Vec<u32>, Vec<f64>) {
    let scale = n_in as f64 / n_out as f64;
    let mut lo = Vec::with_capacity(n_out);
    let mut hi = Vec::with_capacity(n_out);
    let mut frac = Vec::with_capacity(n_out);
    for i in 0..n_out {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        lo.push(i0 as u32);
        hi.push(i1 as u32);
        frac.push(if i1 == i0 { 0.0 } else { src - i0 as f64 });
    }
    (lo, hi, frac)
}

fn resize_dim(x: &Tensor, dim: usize, n_out: usize) -> Result<Tensor> {
    let n_in = x.dims()[dim];
    if n_in == n_out {
        return Ok(x.clone());
    }
    let dev = x.device();
    let (lo, hi, frac) = bilinear_taps(n_in, n_out);
    let x0 = x.index_select(&Tensor::new(lo, dev)?, dim)?;
    let x1 = x.index_select(&Tensor::new(hi, dev)?, dim)?;
    let mut shape = vec![1usize; x.rank()];
    shape[dim] = n_out;
    let frac = Tensor::from_vec(frac, shape, dev)?.to_dtype(x.dtype())?;
    // lerp form keeps constant inputs exactly constant
    Ok((&x0 + (x1 - &x0)?.broadcast_mul(&frac)?)?)
}

/// Bilinear resize (align-corners off) of a `B x C x H x W` tensor.
pub fn resize_tensor(x: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::arg(format!(
            "resize target must be positive, got {target_h}x{target_w}"
        )));
    }
    if x.rank() != 4 {
        return Err(Error::arg("resize expects a rank-4 tensor"));
    }
    let x = resize_dim(x, 3, target_w)?;
    resize_dim(&x, 2, target_h)
}

pub fn resize_to(f: &FeatureMap, target_h: usize, target_w: usize) -> Result<FeatureMap> {
    FeatureMap::new(resize_tensor(f.tensor(), target_h, target_w)?, f.level())
}

/// Concatenates along channels. The result keeps the first map's level tag.
pub fn concat_channels(maps: &[FeatureMap]) -> Result<FeatureMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::arg("concat_channels needs at least one map"))?;
    let (b, _, h, w) = first.dims();
    for m in maps {
        let (mb, _, mh, mw) = m.dims();
        if (mb, mh, mw) != (b, h, w) {
            return Err(Error::arg(format!(
                "concat_channels: batch/spatial mismatch {:?} vs {:?}",
                (b, h, w),
                (mb, mh, mw)
            )));
        }
    }
    if maps.len() == 1 {
        return Ok(first.clone());
    }
    let ts: Vec<&Tensor> = maps.iter().map(|m| m.tensor()).collect();
    FeatureMap::new(Tensor::cat(&ts, 1)?, first.level())
}

fn reflect_indices(n: usize, pad: usize) -> Vec<u32> {
    let n = n as i64;
    (-(pad as i64)..n + pad as i64)
        .map(|i| {
            let r = if n == 1 {
                0
            } else {
                let period = 2 * (n - 1);
                let m = i.rem_euclid(period);
                if m < n {
                    m
                } else {
                    period - m
                }
            };
            r as u32
        })
        .collect()
}

/// Reflection padding on both spatial dimensions.
pub fn reflect_pad(x: &Tensor, pad: usize) -> Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    let x = reflect_pad_dim(x, pad, 2)?;
    reflect_pad_dim(&x, pad, 3)
}

// Built from slices and a concatenation, which are cheap to differentiate.
fn reflect_pad_dim(x: &Tensor, pad: usize, dim: usize) -> Result<Tensor> {
    let n = x.dim(dim)?;
    let idx = reflect_indices(n, pad);
    let mut parts = Vec::with_capacity(2 * pad + 1);
    for &i in &idx[..pad] {
        parts.push(x.narrow(dim, i as usize, 1)?);
    }
    parts.push(x.clone());
    for &i in &idx[pad + n..] {
        parts.push(x.narrow(dim, i as usize, 1)?);
    }
    Ok(Tensor::cat(&parts, dim)?)
}

/// Non-overlapping `k x k` max pooling; trailing rows and columns that do not
/// fill a window are dropped. Ties share the gradient.
pub fn max_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (ho, wo) = (h / k, w / k);
    if ho == 0 || wo == 0 {
        return Err(Error::arg(format!("cannot max-pool {h}x{w} with window {k}")));
    }
    let x = x.narrow(2, 0, ho * k)?.narrow(3, 0, wo * k)?;
    let x = x.reshape((b, c, ho, k, wo, k))?.max(5)?.max(3)?;
    Ok(x)
}

/// Flattens a tensor into `f64` values, whatever its dtype.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Scalar tensor to `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(data: Vec<f64>, shape: (usize, usize, usize, usize)) -> FeatureMap {
        FeatureMap::new(
            Tensor::from_vec(data, shape, &Device::Cpu).unwrap(),
            Level::Relu2_1,
        )
        .unwrap()
    }

    #[test]
    fn stats_of_constant_map() {
        let s = channel_stats(&fm(vec![3.0; 16], (1, 1, 4, 4))).unwrap();
        assert_eq!(s.mean_vec().unwrap()[0][0], 3.0);
        assert_eq!(s.std_vec().unwrap()[0][0], 0.0);
    }

    #[test]
    fn stats_of_two_values() {
        let s = channel_stats(&fm(vec![1.0, 3.0], (1, 1, 1, 2))).unwrap();
        assert_eq!(s.mean_vec().unwrap()[0][0], 2.0);
        assert_eq!(s.std_vec().unwrap()[0][0], 1.0);
    }

    #[test]
    fn stats_of_zero_map_and_single_pixel() {
        let s = channel_stats(&fm(vec![0.0; 8], (2, 1, 2, 2))).unwrap();
        assert_eq!(s.mean_vec().unwrap(), vec![vec![0.0], vec![0.0]]);
        assert_eq!(s.std_vec().unwrap(), vec![vec![0.0], vec![0.0]]);
        let s = channel_stats(&fm(vec![5.0], (1, 1, 1, 1))).unwrap();
        assert_eq!(s.std_vec().unwrap()[0][0], 0.0);
    }

    #[test]
    fn stats_are_per_item() {
        let s = channel_stats(&fm(vec![0.0, 0.0, 4.0, 8.0], (2, 1, 1, 2))).unwrap();
        assert_eq!(s.mean_vec().unwrap(), vec![vec![0.0], vec![6.0]]);
        assert_eq!(s.std_vec().unwrap(), vec![vec![0.0], vec![2.0]]);
    }

    #[test]
    fn resize_identity_and_width_collapse() {
        let f = fm(vec![0.0, 0.0, 1.0, 1.0], (1, 1, 2, 2));
        let same = resize_to(&f, 2, 2).unwrap();
        assert_eq!(to_f64_vec(same.tensor()).unwrap(), vec![0.0, 0.0, 1.0, 1.0]);
        let collapsed = resize_to(&f, 2, 1).unwrap();
        assert_eq!(collapsed.spatial(), (2, 1));
        assert_eq!(to_f64_vec(collapsed.tensor()).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn resize_upsample_matches_hand_computed_weights() {
        // 1x2 -> 1x4: sources at -0.25 (clamped to 0), 0.25, 0.75, 1.25 (clamped)
        let f = fm(vec![0.0, 4.0], (1, 1, 1, 2));
        let up = resize_to(&f, 1, 4).unwrap();
        assert_eq!(to_f64_vec(up.tensor()).unwrap(), vec![0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn resize_rejects_zero_target() {
        let f = fm(vec![0.0; 4], (1, 1, 2, 2));
        assert!(matches!(resize_to(&f, 0, 2), Err(Error::Argument(_))));
    }

    #[test]
    fn resize_keeps_constants() {
        let f = fm(vec![0.7; 5 * 7], (1, 1, 5, 7));
        for (h, w) in [(1, 1), (3, 11), (5, 7), (13, 2)] {
            let r = resize_to(&f, h, w).unwrap();
            assert!(to_f64_vec(r.tensor()).unwrap().iter().all(|&v| v == 0.7));
        }
    }

    #[test]
    fn concat_shapes_and_blocks() {
        let a = fm(vec![1.0; 2 * 4], (1, 2, 2, 2));
        let b = fm(vec![2.0; 3 * 4], (1, 3, 2, 2));
        let c = concat_channels(&[a.clone(), b]).unwrap();
        assert_eq!(c.channels(), 5);
        let v = to_f64_vec(c.tensor()).unwrap();
        assert!(v[..8].iter().all(|&x| x == 1.0));
        assert!(v[8..].iter().all(|&x| x == 2.0));
        let single = concat_channels(&[a.clone()]).unwrap();
        assert_eq!(to_f64_vec(single.tensor()).unwrap(), to_f64_vec(a.tensor()).unwrap());
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = fm(vec![1.0; 4], (1, 1, 2, 2));
        let b = fm(vec![1.0; 9], (1, 1, 3, 3));
        assert!(matches!(concat_channels(&[a, b]), Err(Error::Argument(_))));
    }

    #[test]
    fn reflect_pad_matches_numpy_reflect() {
        assert_eq!(reflect_indices(4, 2), vec![2, 1, 0, 1, 2, 3, 2, 1]);
        assert_eq!(reflect_indices(2, 1), vec![1, 0, 1, 0]);
        assert_eq!(reflect_indices(1, 1), vec![0, 0, 0]);
        let x = Tensor::arange(0f64, 4.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 1, 1, 4))
            .unwrap();
        let p = reflect_pad(&x, 1).unwrap();
        assert_eq!(p.dims(), &[1, 1, 3, 6]);
        assert_eq!(
            to_f64_vec(&p.get(0).unwrap().get(0).unwrap().get(0).unwrap()).unwrap(),
            vec![1.0, 0.0, 1.0, 2.0, 3.0, 2.0]
        );
    }

    #[test]
    fn safe_sqrt_has_zero_gradient_at_zero() {
        let v = candle_core::Var::new(&[0.0f64, 4.0], &Device::Cpu).unwrap();
        let y = safe_sqrt(v.as_tensor()).unwrap();
        assert_eq!(to_f64_vec(&y).unwrap(), vec![0.0, 2.0]);
        let g = y.sum_all().unwrap().backward().unwrap();
        let g = to_f64_vec(g.get(&v).unwrap()).unwrap();
        assert_eq!(g, vec![0.0, 0.25]);
    }

    #[test]
    fn max_pool_values_and_gradient() {
        let v: Vec<f64> = vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 6.0, 9.0, 8.0, 1.0, 1.0];
        let x = candle_core::Var::from_tensor(&Tensor::from_vec(v, (1, 1, 3, 4), &Device::Cpu).unwrap()).unwrap();
        let y = max_pool(x.as_tensor(), 2).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 2]);
        assert_eq!(to_f64_vec(&y).unwrap(), vec![5.0, 7.0]);
        let w = Tensor::new(&[[[[2.0f64, 3.0]]]], &Device::Cpu).unwrap();
        let g = (y * w).unwrap().sum_all().unwrap().backward().unwrap();
        let g = to_f64_vec(g.get(&x).unwrap()).unwrap();
        let mut expected = vec![0.0; 12];
        expected[1] = 2.0;
        expected[6] = 3.0;
        assert_eq!(g, expected);
    }

    #[test]
    fn rgb8_roundtrip() {
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 13) as u8).collect();
        let img = ImageTensor::from_rgb8(&rgb, 3, 2, DType::F32).unwrap();
        assert_eq!(img.tensor().dims(), &[1, 3, 2, 3]);
        let (back, w, h) = img.to_rgb8(0).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(back, rgb);
    }
}
