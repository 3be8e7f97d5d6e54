//! PNG/JPEG load and save, mapped linearly between 8-bit RGB and `[0, 1]`.

use std::path::Path;

use candle_core::{DType, Tensor};
use image::imageops::FilterType;
use image::RgbImage;

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

pub fn rgb_to_tensor(img: &RgbImage, dtype: DType) -> Result<ImageTensor> {
    ImageTensor::from_rgb8(img.as_raw(), img.width() as usize, img.height() as usize, dtype)
}

pub fn tensor_to_rgb(img: &ImageTensor, index: usize) -> Result<RgbImage> {
    let (bytes, w, h) = img.to_rgb8(index)?;
    RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Numeric("rgb buffer size mismatch".into()))
}

pub fn load_image(path: &Path, dtype: DType) -> Result<ImageTensor> {
    rgb_to_tensor(&read_rgb(path)?, dtype)
}

/// Writes batch item `index` as PNG or JPEG depending on the extension.
pub fn save_image(img: &ImageTensor, index: usize, path: &Path) -> Result<()> {
    let rgb = tensor_to_rgb(img, index)?;
    rgb.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(format!("{}: {other}", path.display())),
    })
}

/// Resizes so the short side equals `short`, preserving aspect ratio.
pub fn resize_short_side(img: &RgbImage, short: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let (nw, nh) = short_side_dims(w, h, short);
    if (nw, nh) == (w, h) {
        return img.clone();
    }
    image::imageops::resize(img, nw, nh, FilterType::Triangle)
}

pub fn short_side_dims(w: u32, h: u32, short: u32) -> (u32, u32) {
    if w <= h {
        let nh = (h as f64 * short as f64 / w as f64).round() as u32;
        (short, nh.max(short))
    } else {
        let nw = (w as f64 * short as f64 / h as f64).round() as u32;
        (nw.max(short), short)
    }
}

pub fn crop(img: &RgbImage, x: u32, y: u32, size: u32) -> RgbImage {
    image::imageops::crop_imm(img, x, y, size, size).to_image()
}

/// Short-side resize followed by a centred square crop.
pub fn center_square(img: &RgbImage, size: u32) -> RgbImage {
    let r = resize_short_side(img, size);
    let (w, h) = r.dimensions();
    crop(&r, (w - size) / 2, (h - size) / 2, size)
}

/// Reflect-pads the bottom and right edges up to a multiple of `m`.
pub fn pad_to_multiple(img: &ImageTensor, m: usize) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    let (ph, pw) = ((m - h % m) % m, (m - w % m) % m);
    if ph == 0 && pw == 0 {
        return Ok(img.clone());
    }
    let dev = img.tensor().device();
    let idx = |n: usize, pad: usize| -> Vec<u32> {
        (0..n + pad)
            .map(|i| {
                if i < n {
                    i as u32
                } else {
                    let r = 2 * (n - 1) - i;
                    r.min(n - 1) as u32
                }
            })
            .collect()
    };
    if ph >= h || pw >= w {
        return Err(Error::arg(format!(
            "image {h}x{w} too small to pad to a multiple of {m}"
        )));
    }
    let t = img
        .tensor()
        .index_select(&Tensor::new(idx(h, ph), dev)?, 2)?
        .index_select(&Tensor::new(idx(w, pw), dev)?, 3)?;
    ImageTensor::new(t)
}

/// Crops the top-left `h x w` region.
pub fn crop_tensor(img: &ImageTensor, h: usize, w: usize) -> Result<ImageTensor> {
    ImageTensor::new(img.tensor().narrow(2, 0, h)?.narrow(3, 0, w)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_side_arithmetic() {
        assert_eq!(short_side_dims(800, 600, 512), (683, 512));
        assert_eq!(short_side_dims(600, 800, 512), (512, 683));
        assert_eq!(short_side_dims(512, 512, 512), (512, 512));
    }

    #[test]
    fn save_load_roundtrip_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let rgb: Vec<u8> = (0..4 * 5 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img = ImageTensor::from_rgb8(&rgb, 5, 4, DType::F32).unwrap();
        save_image(&img, 0, &path).unwrap();
        let back = load_image(&path, DType::F32).unwrap();
        assert_eq!(back.to_rgb8(0).unwrap().0, rgb);
    }

    #[test]
    fn pad_then_crop_restores() {
        let rgb: Vec<u8> = (0..18 * 20 * 3).map(|i| (i % 251) as u8).collect();
        let img = ImageTensor::from_rgb8(&rgb, 20, 18, DType::F32).unwrap();
        let p = pad_to_multiple(&img, 16).unwrap();
        assert_eq!((p.height(), p.width()), (32, 32));
        let c = crop_tensor(&p, 18, 20).unwrap();
        assert_eq!(c.to_rgb8(0).unwrap().0, rgb);
    }
}
