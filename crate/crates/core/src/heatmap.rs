//! Information maps in bits: viridis PNG heatmaps with an attached colour bar
//! and scale metadata, plus per-level CSV summaries.

use std::f64::consts::LN_2;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::bottleneck::CompressedPyramid;
use crate::error::{Error, Result};
use crate::tensor::{to_f64_vec, Level};

const COLORBAR_WIDTH: usize = 12;
const COLORBAR_GAP: usize = 4;

/// Viridis anchor colours at evenly spaced positions.
const VIRIDIS: [[f64; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [71.0, 44.0, 122.0],
    [59.0, 81.0, 139.0],
    [44.0, 113.0, 142.0],
    [33.0, 144.0, 141.0],
    [39.0, 173.0, 129.0],
    [92.0, 200.0, 99.0],
    [170.0, 220.0, 50.0],
    [253.0, 231.0, 37.0],
];

pub fn viridis(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let l = x - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    [0, 1, 2].map(|k| (a[k] + (b[k] - a[k]) * l).round() as u8)
}

/// Channel-averaged MI of batch item `index` at `level`, in bits.
pub fn level_bits_map(cp: &CompressedPyramid, level: Level, index: usize) -> Result<(Vec<f64>, usize, usize)> {
    let map = &cp.level(level).mi_map;
    let (_, c, h, w) = map.dims4()?;
    let v = to_f64_vec(&map.get(index)?)?;
    let n = h * w;
    let out = (0..n)
        .map(|p| (0..c).map(|ch| v[ch * n + p]).sum::<f64>() / c as f64 / LN_2)
        .collect();
    Ok((out, h, w))
}

/// Writes a heatmap upscaled by `scale` (nearest) with a colour bar on the
/// right. The bar runs from `max` at the top to 0 at the bottom; both ends are
/// recorded as PNG text chunks.
pub fn write_heatmap(values: &[f64], h: usize, w: usize, scale: usize, label: &str, path: &Path) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::arg("heatmap values do not match dimensions"));
    }
    let scale = scale.max(1);
    let max = values.iter().cloned().filter(|v| v.is_finite()).fold(0.0, f64::max);
    let norm = |v: f64| if max > 0.0 { v / max } else { 0.0 };
    let (ih, iw) = (h * scale, w * scale);
    let total_w = iw + COLORBAR_GAP + COLORBAR_WIDTH;
    let mut px = vec![255u8; ih * total_w * 3];
    for y in 0..ih {
        for x in 0..total_w {
            let rgb = if x < iw {
                viridis(norm(values[(y / scale) * w + x / scale]))
            } else if x >= iw + COLORBAR_GAP {
                viridis(1.0 - y as f64 / (ih.max(2) - 1) as f64)
            } else {
                [255, 255, 255]
            };
            px[(y * total_w + x) * 3..][..3].copy_from_slice(&rgb);
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), total_w as u32, ih as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let text = |k: &str, v: String| (k.to_string(), v);
    for (k, v) in [
        text("Title", label.to_string()),
        text("unit", "bits".into()),
        text("scale_min", "0".into()),
        text("scale_max", format!("{max}")),
    ] {
        enc.add_text_chunk(k, v)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    }
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(&px)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

/// Per-level mean MI of one branch as CSV (`branch,level,nats,bits`).
pub fn mi_csv(cp: &CompressedPyramid, branch: &str) -> Result<String> {
    let mut s = String::from("branch,level,nats,bits\n");
    for (level, nats) in Level::ALL.iter().zip(cp.mi_means()?) {
        s.push_str(&format!("{branch},{},{nats:e},{:e}\n", level.name(), nats / LN_2));
    }
    Ok(s)
}

/// Writes one heatmap per level and the CSV into `dir`; returns the paths.
pub fn export_info(cp: &CompressedPyramid, branch: &str, dir: &Path, index: usize) -> Result<Vec<PathBuf>> {
    let mut written = Vec::with_capacity(5);
    for level in Level::ALL {
        let (v, h, w) = level_bits_map(cp, level, index)?;
        let path = dir.join(format!("{branch}_{}_bits.png", level.name()));
        write_heatmap(&v, h, w, level.stride(), &format!("{branch} {} MI (bits)", level.name()), &path)?;
        written.push(path);
    }
    let path = dir.join(format!("{branch}_mi.csv"));
    std::fs::write(&path, mi_csv(cp, branch)?).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}
