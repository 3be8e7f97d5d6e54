//! Image corpus scanning and augmented batch sampling.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use image::RgbImage;
use rand::Rng;

use crate::error::{Error, Result};
use crate::imageio::{crop, read_rgb, resize_short_side, rgb_to_tensor};
use crate::tensor::ImageTensor;

/// Corpora at most this large keep their resized images in memory.
const CACHE_LIMIT: usize = 512;

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Lists PNG/JPEG files in `dir` (sorted), checking that each header decodes.
pub fn scan_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Ingestion {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            image::image_dimensions(&path).map_err(|e| Error::Ingestion {
                path: path.clone(),
                reason: format!("undecodable image: {e}"),
            })?;
            files.push(path);
        }
    }
    if files.is_empty() {
        return Err(Error::Ingestion {
            path: dir.to_path_buf(),
            reason: "directory contains no decodable PNG/JPEG images".into(),
        });
    }
    files.sort();
    Ok(files)
}

/// Content and style corpora with resize-then-random-crop augmentation.
/// Both domains go through the same pipeline.
#[derive(Debug)]
pub struct Dataset {
    content: Vec<PathBuf>,
    style: Vec<PathBuf>,
    resize: u32,
    crop: u32,
    cache: Option<HashMap<PathBuf, RgbImage>>,
}

impl Dataset {
    pub fn open(content_dir: &Path, style_dir: &Path, resize: u32, crop: u32) -> Result<Self> {
        if crop > resize {
            return Err(Error::arg(format!("crop {crop} exceeds resize {resize}")));
        }
        if crop == 0 {
            return Err(Error::arg("crop size must be positive"));
        }
        let content = scan_images(content_dir)?;
        let style = scan_images(style_dir)?;
        let cache = (content.len() + style.len() <= CACHE_LIMIT).then(HashMap::new);
        Ok(Dataset {
            content,
            style,
            resize,
            crop,
            cache,
        })
    }

    pub fn content_paths(&self) -> &[PathBuf] {
        &self.content
    }

    pub fn style_paths(&self) -> &[PathBuf] {
        &self.style
    }

    fn resized(&mut self, path: &Path) -> Result<RgbImage> {
        if let Some(img) = self.cache.as_ref().and_then(|c| c.get(path)) {
            return Ok(img.clone());
        }
        let img = resize_short_side(&read_rgb(path)?, self.resize);
        if let Some(cache) = self.cache.as_mut() {
            cache.insert(path.to_path_buf(), img.clone());
        }
        Ok(img)
    }

    fn augmented<R: Rng + ?Sized>(&mut self, path: &Path, rng: &mut R) -> Result<RgbImage> {
        let img = self.resized(path)?;
        let (w, h) = img.dimensions();
        let x = rng.random_range(0..=w - self.crop);
        let y = rng.random_range(0..=h - self.crop);
        Ok(crop(&img, x, y, self.crop))
    }

    fn draw<R: Rng + ?Sized>(&mut self, style: bool, batch: usize, dtype: DType, rng: &mut R) -> Result<ImageTensor> {
        let mut items = Vec::with_capacity(batch);
        for _ in 0..batch {
            let paths = if style { &self.style } else { &self.content };
            let p = paths[rng.random_range(0..paths.len())].clone();
            items.push(rgb_to_tensor(&self.augmented(&p, rng)?, dtype)?.into_tensor());
        }
        ImageTensor::new(Tensor::cat(&items, 0)?)
    }

    /// Draws `batch` content and `batch` style crops.
    pub fn sample_batch<R: Rng + ?Sized>(
        &mut self,
        batch: usize,
        dtype: DType,
        rng: &mut R,
    ) -> Result<(ImageTensor, ImageTensor)> {
        let content = self.draw(false, batch, dtype, rng)?;
        let style = self.draw(true, batch, dtype, rng)?;
        Ok((content, style))
    }
}
