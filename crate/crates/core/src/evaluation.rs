//! Evaluation metrics (feature content loss, SSIM, Gram loss), per-layer MI
//! tables and the disentanglement probes.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bottleneck::{BranchKind, Noise};
use crate::encoder::{encode, EncoderWeights};
use crate::error::{Error, Result};
use crate::imageio::{center_square, read_rgb, rgb_to_tensor};
use crate::model::Model;
use crate::tensor::{scalar, to_f64_vec, ImageTensor, Level};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

pub const BLACKLINE_PNG: &[u8] = include_bytes!("../assets/blackline_style.png");
pub const BLACK_PNG: &[u8] = include_bytes!("../assets/black_content.png");

fn same_size(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.tensor().dims() != b.tensor().dims() {
        return Err(Error::arg(format!(
            "images differ in size: {:?} vs {:?}",
            a.tensor().dims(),
            b.tensor().dims()
        )));
    }
    Ok(())
}

/// Feature-space MSE averaged over the four tap levels.
pub fn metric_content_loss(out: &ImageTensor, content: &ImageTensor, encoder: &EncoderWeights) -> Result<f64> {
    same_size(out, content)?;
    let a = encode(out, encoder)?;
    let b = encode(content, encoder)?;
    let mut total = 0.0;
    for level in Level::ALL {
        let d = (a.level(level).tensor() - b.level(level).tensor())?;
        total += scalar(&d.sqr()?.mean_all()?)?;
    }
    Ok(total / 4.0)
}

/// Batched Gram matrices `F F^T / (C H W)` of a `B x C x H x W` tensor.
pub fn gram_matrix(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let f = x.reshape((b, c, h * w))?;
    Ok((f.matmul(&f.t()?)? / (c * h * w) as f64)?)
}

/// Sum over levels of the MSE between Gram matrices.
pub fn metric_gram_loss(out: &ImageTensor, style: &ImageTensor, encoder: &EncoderWeights) -> Result<f64> {
    if out.batch() != style.batch() {
        return Err(Error::arg("gram loss needs equal batch sizes"));
    }
    let a = encode(out, encoder)?;
    let b = encode(style, encoder)?;
    let mut total = 0.0;
    for level in Level::ALL {
        let d = (gram_matrix(a.level(level).tensor())? - gram_matrix(b.level(level).tensor())?)?;
        total += scalar(&d.sqr()?.mean_all()?)?;
    }
    Ok(total)
}

/// ITU-R 601 luma of batch item `index`, row-major.
pub fn grayscale(img: &ImageTensor, index: usize) -> Result<Vec<f64>> {
    let v = to_f64_vec(&img.tensor().get(index)?)?;
    let n = img.height() * img.width();
    Ok((0..n)
        .map(|i| 0.299 * v[i] + 0.587 * v[n + i] + 0.114 * v[2 * n + i])
        .collect())
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..k).map(|i| g[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..k).map(|i| g[i] * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

/// Mean SSIM over all full windows of two grayscale planes in `[0, 1]`.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::arg(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::arg("plane length does not match its dimensions"));
    }
    let g = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &g);
    let mu_b = filter_valid(b, h, w, &g);
    let aa = filter_valid(&prod(a, a), h, w, &g);
    let bb = filter_valid(&prod(b, b), h, w, &g);
    let ab = filter_valid(&prod(a, b), h, w, &g);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(total / n as f64)
}

/// Grayscale SSIM, averaged over the batch.
pub fn metric_ssim(out: &ImageTensor, content: &ImageTensor) -> Result<f64> {
    same_size(out, content)?;
    let (h, w) = (out.height(), out.width());
    let mut total = 0.0;
    for i in 0..out.batch() {
        total += ssim_plane(&grayscale(out, i)?, &grayscale(content, i)?, h, w)?;
    }
    Ok(total / out.batch() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiTable {
    pub branch: String,
    /// Mean MI in nats per level, shallow to deep.
    pub nats: [f64; 4],
}

impl MiTable {
    pub fn bits(&self) -> [f64; 4] {
        self.nats.map(|v| v / std::f64::consts::LN_2)
    }
}

/// Per-level mean MI of one branch, averaged over `images`.
pub fn mi_table(model: &Model, images: &[ImageTensor], kind: BranchKind) -> Result<MiTable> {
    if images.is_empty() {
        return Err(Error::arg("mi table needs at least one image"));
    }
    let mut nats = [0.0; 4];
    for img in images {
        let cp = model.compress_branch(kind, &model.encode(img)?, &mut Noise::Expectation)?;
        for (acc, v) in nats.iter_mut().zip(cp.mi_means()?) {
            *acc += v;
        }
    }
    Ok(MiTable {
        branch: kind.prefix().to_string(),
        nats: nats.map(|v| v / images.len() as f64),
    })
}

/// CSV with one row per branch and one column per level.
pub fn mi_tables_csv(tables: &[MiTable]) -> String {
    let mut s = String::from("branch,unit");
    for l in Level::ALL {
        s.push(',');
        s.push_str(l.name());
    }
    s.push('\n');
    for t in tables {
        for (unit, vals) in [("nats", t.nats), ("bits", t.bits())] {
            s.push_str(&format!("{},{unit}", t.branch));
            for v in vals {
                s.push_str(&format!(",{v:.9}"));
            }
            s.push('\n');
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Probe {
    BlacklineStyle,
    BlackContent,
}

impl std::str::FromStr for Probe {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blackline" | "blackline_style" | "blackline-style" => Ok(Probe::BlacklineStyle),
            "black" | "black_content" | "black-content" => Ok(Probe::BlackContent),
            other => Err(Error::arg(format!("unknown probe `{other}` (use blackline or black)"))),
        }
    }
}

fn bundled(bytes: &[u8], size: u32, dtype: DType) -> Result<ImageTensor> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::format(format!("bundled probe asset: {e}")))?
        .to_rgb8();
    rgb_to_tensor(&center_square(&img, size), dtype)
}

pub fn blackline_style(size: u32, dtype: DType) -> Result<ImageTensor> {
    bundled(BLACKLINE_PNG, size, dtype)
}

pub fn black_content(size: u32, dtype: DType) -> Result<ImageTensor> {
    bundled(BLACK_PNG, size, dtype)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRow {
    pub input: String,
    pub content_loss: Option<f64>,
    pub ssim: Option<f64>,
    pub gram_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub probe: Probe,
    pub rows: Vec<ProbeRow>,
    pub mean_content_loss: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub mean_gram_loss: Option<f64>,
}

fn mean_of(rows: &[ProbeRow], f: impl Fn(&ProbeRow) -> Option<f64>) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter_map(f).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs a probe over named inputs: content images for the black-line probe,
/// style images for the black-content probe.
pub fn disentanglement_probe(model: &Model, probe: Probe, inputs: &[(String, ImageTensor)]) -> Result<ProbeReport> {
    let dtype = model.dtype();
    let mut rows = Vec::with_capacity(inputs.len());
    for (name, img) in inputs {
        let row = match probe {
            Probe::BlacklineStyle => {
                let style = blackline_style(img.height().min(img.width()) as u32, dtype)?;
                let out = model.stylize(img, &style, &mut Noise::Expectation)?;
                ProbeRow {
                    input: name.clone(),
                    content_loss: Some(metric_content_loss(&out, img, &model.encoder)?),
                    ssim: Some(metric_ssim(&out, img)?),
                    gram_loss: None,
                }
            }
            Probe::BlackContent => {
                let content = black_content(img.height().min(img.width()) as u32, dtype)?;
                let out = model.stylize(&content, img, &mut Noise::Expectation)?;
                ProbeRow {
                    input: name.clone(),
                    content_loss: None,
                    ssim: None,
                    gram_loss: Some(metric_gram_loss(&out, img, &model.encoder)?),
                }
            }
        };
        rows.push(row);
    }
    Ok(ProbeReport {
        probe,
        mean_content_loss: mean_of(&rows, |r| r.content_loss),
        mean_ssim: mean_of(&rows, |r| r.ssim),
        mean_gram_loss: mean_of(&rows, |r| r.gram_loss),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairRow {
    pub content: String,
    pub style: String,
    pub content_loss: f64,
    pub ssim: f64,
    pub gram_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub seed: u64,
    pub content_loss: f64,
    pub ssim: f64,
    pub gram_loss: f64,
    pub per_pair_rows: Vec<PairRow>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub mi_tables: Vec<MiTable>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub probes: Vec<ProbeReport>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("content,style,content_loss,ssim,gram_loss\n");
        for r in &self.per_pair_rows {
            s.push_str(&format!(
                "{},{},{:.9},{:.9},{:.9}\n",
                r.content, r.style, r.content_loss, r.ssim, r.gram_loss
            ));
        }
        s
    }
}

/// Seeded choice of `n_content` content and `n_style` style paths, without replacement.
pub fn sample_protocol(
    content: &[PathBuf],
    style: &[PathBuf],
    n_content: usize,
    n_style: usize,
    seed: u64,
) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    if n_content > content.len() || n_style > style.len() {
        return Err(Error::arg(format!(
            "requested {n_content} content / {n_style} style images but only {} / {} are available",
            content.len(),
            style.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |paths: &[PathBuf], n: usize| {
        let mut idx = sample(&mut rng, paths.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| paths[i].clone()).collect::<Vec<_>>()
    };
    let c = pick(content, n_content);
    let s = pick(style, n_style);
    Ok((c, s))
}

/// Loads an image as a `size x size` centre crop after short-side resize.
pub fn load_square(path: &Path, size: u32, dtype: DType) -> Result<ImageTensor> {
    rgb_to_tensor(&center_square(&read_rgb(path)?, size), dtype)
}

fn display_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Stylizes every content/style pair in expectation mode and scores it.
pub fn evaluate_pairs(
    model: &Model,
    content: &[PathBuf],
    style: &[PathBuf],
    size: u32,
    seed: u64,
) -> Result<MetricReport> {
    let dtype = model.dtype();
    let cs = content
        .iter()
        .map(|p| Ok((display_name(p), load_square(p, size, dtype)?)))
        .collect::<Result<Vec<_>>>()?;
    let ss = style
        .iter()
        .map(|p| Ok((display_name(p), load_square(p, size, dtype)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(cs.len() * ss.len());
    for (cn, c) in &cs {
        for (sn, s) in &ss {
            let out = model.stylize(c, s, &mut Noise::Expectation)?;
            rows.push(PairRow {
                content: cn.clone(),
                style: sn.clone(),
                content_loss: metric_content_loss(&out, c, &model.encoder)?,
                ssim: metric_ssim(&out, c)?,
                gram_loss: metric_gram_loss(&out, s, &model.encoder)?,
            });
        }
    }
    let n = rows.len().max(1) as f64;
    Ok(MetricReport {
        seed,
        content_loss: rows.iter().map(|r| r.content_loss).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        gram_loss: rows.iter().map(|r| r.gram_loss).sum::<f64>() / n,
        per_pair_rows: rows,
        mi_tables: Vec::new(),
        probes: Vec::new(),
    })
}
