//! Training: configuration, the in-domain and cross-domain forward passes,
//! optimization steps, checkpoints and the run driver.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::Archive;
use crate::bottleneck::{CompressedPyramid, Noise, NoiseMode};
use crate::data::Dataset;
use crate::encoder::{load_encoder, EncoderArch, TINY_SEED};
use crate::error::{Error, Result};
use crate::losses::{
    content_loss_features, info_loss, rec_loss_weighted, style_loss_features, total_loss,
    weighted_total, Lambdas, LossReport, LossTerms,
};
use crate::model::{EncoderSource, Model, ModelConfig};
use crate::optim::Adam;
use crate::tensor::{scalar, to_f64_vec, FeatureMap, FeaturePyramid, ImageTensor};
use crate::transfer::{transfer_pyramids, DEFAULT_MAX_KV_SIDE};

pub const CHECKPOINT_FORMAT: &str = "infostyler-checkpoint";
pub const CHECKPOINT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub content_dir: PathBuf,
    pub style_dir: PathBuf,
    pub steps: u64,
    pub batch: usize,
    pub crop: u32,
    pub resize: u32,
    pub lambdas: Lambdas,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub lr: f64,
    pub seed: u64,
    /// Adds the cross-domain compressions to the information loss.
    pub apply_info_loss_cross_domain: bool,
    pub use_cib: bool,
    pub use_sib: bool,
    /// Runs the cycle reconstruction pass.
    pub cross_domain: bool,
    pub rec_content: bool,
    pub rec_style: bool,
    pub noise: NoiseMode,
    /// `tiny` or a path to an encoder archive.
    pub encoder: String,
    pub checkpoint_every: u64,
    pub preview_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            content_dir: PathBuf::new(),
            style_dir: PathBuf::new(),
            steps: 10_000,
            batch: 2,
            crop: 256,
            resize: 512,
            lambdas: Lambdas::default(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            lr: 1e-4,
            seed: 0,
            apply_info_loss_cross_domain: false,
            use_cib: true,
            use_sib: true,
            cross_domain: true,
            rec_content: true,
            rec_style: true,
            noise: NoiseMode::Sample,
            encoder: "tiny".into(),
            checkpoint_every: 1000,
            preview_every: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::arg(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::arg(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl TrainConfig {
    /// Sets one field from its textual form. Keys accept `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key.trim().replace('-', "_");
        match k.as_str() {
            "content_dir" => self.content_dir = PathBuf::from(value.trim()),
            "style_dir" => self.style_dir = PathBuf::from(value.trim()),
            "steps" => self.steps = parse(&k, value)?,
            "batch" => self.batch = parse(&k, value)?,
            "crop" => self.crop = parse(&k, value)?,
            "resize" => self.resize = parse(&k, value)?,
            "lambda_info" => self.lambdas.info = parse(&k, value)?,
            "lambda_content" => self.lambdas.content = parse(&k, value)?,
            "lambda_style" => self.lambdas.style = parse(&k, value)?,
            "lambda_rec" => self.lambdas.rec = parse(&k, value)?,
            "adam_beta1" => self.adam_beta1 = parse(&k, value)?,
            "adam_beta2" => self.adam_beta2 = parse(&k, value)?,
            "lr" => self.lr = parse(&k, value)?,
            "seed" => self.seed = parse(&k, value)?,
            "apply_info_loss_cross_domain" => self.apply_info_loss_cross_domain = parse_bool(&k, value)?,
            "use_cib" => self.use_cib = parse_bool(&k, value)?,
            "use_sib" => self.use_sib = parse_bool(&k, value)?,
            "cross_domain" => self.cross_domain = parse_bool(&k, value)?,
            "rec_content" => self.rec_content = parse_bool(&k, value)?,
            "rec_style" => self.rec_style = parse_bool(&k, value)?,
            "noise" => {
                self.noise = match value.trim() {
                    "sample" => NoiseMode::Sample,
                    "expectation" => NoiseMode::Expectation,
                    other => return Err(Error::arg(format!("noise must be sample or expectation, got `{other}`"))),
                }
            }
            "encoder" => self.encoder = value.trim().to_string(),
            "checkpoint_every" => self.checkpoint_every = parse(&k, value)?,
            "preview_every" => self.preview_every = parse(&k, value)?,
            _ => return Err(Error::arg(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` file. Blank lines and `#` comments are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::arg(format!("{}:{}: expected `key = value`", path.display(), n + 1))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop > self.resize {
            return Err(Error::arg(format!("crop {} exceeds resize {}", self.crop, self.resize)));
        }
        if self.crop == 0 || self.crop % 16 != 0 {
            return Err(Error::arg(format!("crop {} must be a positive multiple of 16", self.crop)));
        }
        if self.batch == 0 {
            return Err(Error::arg("batch must be at least 1"));
        }
        let l = &self.lambdas;
        if [l.info, l.content, l.style, l.rec].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::arg("loss weights must be finite and non-negative"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::arg("learning rate must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn encoder_source(&self) -> Result<EncoderSource> {
        if self.encoder == "tiny" {
            Ok(EncoderSource::Tiny { seed: TINY_SEED })
        } else {
            let path = PathBuf::from(&self.encoder);
            let w = load_encoder(&path)?;
            Ok(EncoderSource::Archive {
                path,
                checksum: w.checksum()?,
            })
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let encoder = self.encoder_source()?;
        let arch = match &encoder {
            EncoderSource::Tiny { .. } => EncoderArch::TINY,
            EncoderSource::Archive { .. } => encoder.load()?.arch(),
        };
        Ok(ModelConfig {
            encoder,
            arch,
            use_cib: self.use_cib,
            use_sib: self.use_sib,
            init_seed: self.seed,
            max_kv_side: DEFAULT_MAX_KV_SIDE,
        })
    }

    fn rec_weights(&self) -> (f64, f64) {
        (
            if self.rec_content { 1.0 } else { 0.0 },
            if self.rec_style { 1.0 } else { 0.0 },
        )
    }
}

/// Named ablation settings, each a pure edit of [`TrainConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Full,
    NoCib,
    NoSib,
    NoContentLoss,
    NoStyleLoss,
    NoInfoLoss,
    NoRecLoss,
    NoRecContent,
    NoRecStyle,
}

impl Ablation {
    pub const ALL: [Ablation; 9] = [
        Ablation::Full,
        Ablation::NoCib,
        Ablation::NoSib,
        Ablation::NoContentLoss,
        Ablation::NoStyleLoss,
        Ablation::NoInfoLoss,
        Ablation::NoRecLoss,
        Ablation::NoRecContent,
        Ablation::NoRecStyle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoCib => "w/o CIBs",
            Ablation::NoSib => "w/o SIBs",
            Ablation::NoContentLoss => "w/o L_content",
            Ablation::NoStyleLoss => "w/o L_style",
            Ablation::NoInfoLoss => "w/o L_info",
            Ablation::NoRecLoss => "w/o L_rec",
            Ablation::NoRecContent => "w/o L_rec^c",
            Ablation::NoRecStyle => "w/o L_rec^s",
        }
    }

    /// The `key = value` edits that realize this ablation.
    pub fn settings(self) -> &'static [(&'static str, &'static str)] {
        match self {
            Ablation::Full => &[],
            Ablation::NoCib => &[("use_cib", "false")],
            Ablation::NoSib => &[("use_sib", "false")],
            Ablation::NoContentLoss => &[("lambda_content", "0")],
            Ablation::NoStyleLoss => &[("lambda_style", "0")],
            Ablation::NoInfoLoss => &[("lambda_info", "0")],
            Ablation::NoRecLoss => &[("cross_domain", "false"), ("lambda_rec", "0")],
            Ablation::NoRecContent => &[("rec_content", "false")],
            Ablation::NoRecStyle => &[("rec_style", "false")],
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig) -> Result<()> {
        for (k, v) in self.settings() {
            cfg.set(k, v)?;
        }
        Ok(())
    }
}

/// Everything produced by the in-domain pass.
pub struct InDomain {
    pub i_cs: ImageTensor,
    pub f_c: FeaturePyramid,
    pub f_s: FeaturePyramid,
    pub f_cs: FeaturePyramid,
    pub cp_c: CompressedPyramid,
    pub cp_s: CompressedPyramid,
    pub info: Tensor,
    pub content: Tensor,
    pub style: Tensor,
}

/// `I_cs = Dec(T(E_c(I_c), E_s(I_s)))` with its information, content and style losses.
pub fn forward_in_domain(
    model: &Model,
    i_c: &ImageTensor,
    i_s: &ImageTensor,
    noise: &mut Noise<'_>,
) -> Result<InDomain> {
    let f_c = model.encode(i_c)?;
    let f_s = model.encode(i_s)?;
    let cp_c = model.compress_content(&f_c, noise)?;
    let cp_s = model.compress_style(&f_s, noise)?;
    let i_cs = model.decode(&model.transfer(&cp_c, &cp_s)?)?;
    let f_cs = model.encode(&i_cs)?;

    let info = info_loss(&cp_c, &cp_s)?;
    let target: Vec<FeatureMap> = transfer_pyramids(&f_c, &f_s, &model.t_prime)?
        .iter()
        .map(FeatureMap::detach)
        .collect();
    let content = content_loss_features(&f_cs, &target)?;
    let style = style_loss_features(&f_cs, &f_s)?;
    Ok(InDomain {
        i_cs,
        f_c,
        f_s,
        f_cs,
        cp_c,
        cp_s,
        info,
        content,
        style,
    })
}

pub struct CrossDomain {
    pub i_c_hat: ImageTensor,
    pub i_s_hat: ImageTensor,
    pub rec: Tensor,
    /// `E_c(I_s)`, `E_s(I_c)`, `E_c(I_cs)`, `E_s(I_cs)`.
    pub compressions: [CompressedPyramid; 4],
}

/// Cycle pass: swap the input domains of the two encoders, re-encode the
/// stylized image, and reconstruct both inputs with the shared parameters.
pub fn forward_cross_domain(
    model: &Model,
    i_c: &ImageTensor,
    i_s: &ImageTensor,
    in_domain: &InDomain,
    rec_weights: (f64, f64),
    noise: &mut Noise<'_>,
) -> Result<CrossDomain> {
    let rc_of_s = model.compress_content(&in_domain.f_s, noise)?;
    let rs_of_c = model.compress_style(&in_domain.f_c, noise)?;
    let rc_of_cs = model.compress_content(&in_domain.f_cs, noise)?;
    let rs_of_cs = model.compress_style(&in_domain.f_cs, noise)?;
    let i_c_hat = model.decode(&model.transfer(&rc_of_cs, &rs_of_c)?)?;
    let i_s_hat = model.decode(&model.transfer(&rc_of_s, &rs_of_cs)?)?;
    let rec = rec_loss_weighted(&i_c_hat, i_c, &i_s_hat, i_s, rec_weights.0, rec_weights.1)?;
    Ok(CrossDomain {
        i_c_hat,
        i_s_hat,
        rec,
        compressions: [rc_of_s, rs_of_c, rc_of_cs, rs_of_cs],
    })
}

/// The full objective for one batch, before backpropagation.
pub struct Objective {
    pub in_domain: InDomain,
    pub cross: Option<CrossDomain>,
    pub info: Tensor,
    pub rec: Tensor,
    pub total: Tensor,
}

impl Objective {
    pub fn terms(&self) -> Result<LossTerms> {
        Ok(LossTerms {
            info: scalar(&self.info)?,
            content: scalar(&self.in_domain.content)?,
            style: scalar(&self.in_domain.style)?,
            rec: scalar(&self.rec)?,
        })
    }

    pub fn report(&self, lambdas: &Lambdas) -> Result<LossReport> {
        total_loss(
            &self.terms()?,
            lambdas,
            self.in_domain.cp_c.mi_means()?,
            self.in_domain.cp_s.mi_means()?,
        )
    }
}

pub fn objective(
    model: &Model,
    cfg: &TrainConfig,
    i_c: &ImageTensor,
    i_s: &ImageTensor,
    noise: &mut Noise<'_>,
) -> Result<Objective> {
    let in_domain = forward_in_domain(model, i_c, i_s, noise)?;
    let cross = if cfg.cross_domain {
        Some(forward_cross_domain(model, i_c, i_s, &in_domain, cfg.rec_weights(), noise)?)
    } else {
        None
    };
    let rec = match &cross {
        Some(c) => c.rec.clone(),
        None => in_domain.info.zeros_like()?,
    };
    let info = match (&cross, cfg.apply_info_loss_cross_domain) {
        (Some(c), true) => {
            let [a, b, x, y] = &c.compressions;
            let extra = (info_loss(a, b)? + info_loss(x, y)?)?;
            ((&in_domain.info + extra)? / 3.0)?
        }
        _ => in_domain.info.clone(),
    };
    let total = weighted_total(&info, &in_domain.content, &in_domain.style, &rec, &cfg.lambdas)?;
    Ok(Objective {
        in_domain,
        cross,
        info,
        rec,
        total,
    })
}

fn rng_state(rng: &ChaCha8Rng) -> serde_json::Value {
    json!({
        "seed": hex::encode(rng.get_seed()),
        "stream": rng.get_stream().to_string(),
        "word_pos": rng.get_word_pos().to_string(),
    })
}

fn rng_from_state(v: &serde_json::Value) -> Result<ChaCha8Rng> {
    let field = |k: &str| {
        v.get(k)
            .and_then(|x| x.as_str())
            .ok_or_else(|| Error::format(format!("checkpoint RNG state is missing `{k}`")))
    };
    let seed: [u8; 32] = hex::decode(field("seed")?)
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::format("checkpoint RNG seed is malformed"))?;
    let stream: u64 = field("stream")?.parse().map_err(|_| Error::format("bad RNG stream"))?;
    let word_pos: u128 = field("word_pos")?.parse().map_err(|_| Error::format("bad RNG position"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(rng)
}

/// Mutable training state. The encoder is frozen and excluded from the
/// optimizer; both passes use the parameters held in `model.store`.
pub struct TrainState {
    pub model: Model,
    pub config: TrainConfig,
    pub adam: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

pub struct StepOutput {
    pub report: LossReport,
    /// `I_c, I_s, I_cs, I_c_hat, I_s_hat` of the step, when requested.
    pub previews: Option<Vec<ImageTensor>>,
}

impl TrainState {
    pub fn new(config: TrainConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mc = config.model_config()?;
        let encoder = mc.encoder.load()?;
        let model = Model::new(mc, encoder, dtype)?;
        Ok(TrainState::from_model(model, config))
    }

    pub fn from_model(model: Model, config: TrainConfig) -> Self {
        let adam = Adam::new(config.lr, config.adam_beta1, config.adam_beta2);
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696e);
        TrainState {
            model,
            config,
            adam,
            step: 0,
            rng,
        }
    }

    /// One optimization step on an explicit batch.
    pub fn step_on_batch(&mut self, i_c: &ImageTensor, i_s: &ImageTensor, want_previews: bool) -> Result<StepOutput> {
        let step = self.step;
        let obj = match self.config.noise {
            NoiseMode::Expectation => objective(&self.model, &self.config, i_c, i_s, &mut Noise::Expectation)?,
            NoiseMode::Sample => objective(&self.model, &self.config, i_c, i_s, &mut Noise::Sample(&mut self.rng))?,
        };
        let report = obj.report(&self.config.lambdas).map_err(|e| {
            Error::Numeric(format!("step {step}: {e}; terms: {:?}", obj.terms().ok()))
        })?;
        if !to_f64_vec(obj.in_domain.i_cs.tensor())?.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("step {step}: stylized image is not finite; {report:?}")));
        }
        let grads = obj.total.backward()?;
        self.adam.step(&self.model.store, &grads)?;
        self.step += 1;
        let previews = want_previews.then(|| {
            let mut v = vec![i_c.clone(), i_s.clone(), obj.in_domain.i_cs.clone()];
            if let Some(c) = &obj.cross {
                v.push(c.i_c_hat.clone());
                v.push(c.i_s_hat.clone());
            }
            v
        });
        Ok(StepOutput { report, previews })
    }

    /// Samples a batch from `data` and takes one step.
    pub fn train_step(&mut self, data: &mut Dataset) -> Result<LossReport> {
        Ok(self.train_step_with(data, false)?.report)
    }

    pub fn train_step_with(&mut self, data: &mut Dataset, want_previews: bool) -> Result<StepOutput> {
        let (i_c, i_s) = data.sample_batch(self.config.batch, self.model.dtype(), &mut self.rng)?;
        self.step_on_batch(&i_c, &i_s, want_previews)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new(json!({
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "step": self.step,
            "dtype": format!("{:?}", self.model.dtype()),
            "model": self.model.config,
            "train": self.config,
            "adam_t": self.adam.t,
            "rng": rng_state(&self.rng),
        }));
        for (name, var) in self.model.store.vars() {
            a.insert(format!("param/{name}"), var.as_tensor().clone());
        }
        for (name, t) in &self.adam.m {
            a.insert(format!("adam.m/{name}"), t.clone());
        }
        for (name, t) in &self.adam.v {
            a.insert(format!("adam.v/{name}"), t.clone());
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive, expected: Option<&ModelConfig>) -> Result<Self> {
        let (mc, train, dtype) = checkpoint_header(a)?;
        if let Some(exp) = expected {
            exp.check_compatible(&mc)?;
        }
        let encoder = mc.encoder.load()?;
        let model = Model::new(mc, encoder, dtype)?;
        let params = prefixed(a, "param/");
        model.store.load_from(&params)?;
        let mut state = TrainState::from_model(model, train);
        state.adam.restore(&state.model.store, prefixed(a, "adam.m/"), prefixed(a, "adam.v/"))?;
        state.adam.t = a.manifest.get("adam_t").and_then(|v| v.as_u64()).unwrap_or(0);
        state.step = a.manifest.get("step").and_then(|v| v.as_u64()).unwrap_or(0);
        state.rng = rng_from_state(a.manifest.get("rng").unwrap_or(&serde_json::Value::Null))?;
        Ok(state)
    }
}

fn prefixed(a: &Archive, prefix: &str) -> BTreeMap<String, Tensor> {
    a.tensors
        .iter()
        .filter_map(|(k, t)| k.strip_prefix(prefix).map(|n| (n.to_string(), t.clone())))
        .collect()
}

fn checkpoint_header(a: &Archive) -> Result<(ModelConfig, TrainConfig, DType)> {
    if a.manifest.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(Error::format("not an infostyler checkpoint"));
    }
    let version = a.manifest.get("version").and_then(|v| v.as_u64());
    if version != Some(CHECKPOINT_VERSION) {
        return Err(Error::format(format!(
            "checkpoint version {version:?} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let mc: ModelConfig = serde_json::from_value(a.manifest["model"].clone())
        .map_err(|e| Error::format(format!("checkpoint model config: {e}")))?;
    let train: TrainConfig = serde_json::from_value(a.manifest["train"].clone())
        .map_err(|e| Error::format(format!("checkpoint train config: {e}")))?;
    let dtype = match a.manifest_str("dtype")? {
        "F32" => DType::F32,
        "F64" => DType::F64,
        other => return Err(Error::format(format!("unsupported checkpoint dtype {other}"))),
    };
    Ok((mc, train, dtype))
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    state.to_archive()?.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    TrainState::from_archive(&Archive::load(path)?, None)
}

/// Loads a checkpoint, refusing it if its model layout differs from `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<TrainState> {
    TrainState::from_archive(&Archive::load(path)?, Some(expected))
}

/// Loads only the model of a checkpoint, optionally with a replacement encoder.
pub fn load_model(path: &Path, encoder_override: Option<&Path>) -> Result<Model> {
    let a = Archive::load(path)?;
    let (mut mc, _, dtype) = checkpoint_header(&a)?;
    let encoder = match encoder_override {
        Some(p) => {
            let w = load_encoder(p)?;
            if w.arch() != mc.arch {
                return Err(Error::ConfigMismatch(format!(
                    "encoder {} has width divisor {}, checkpoint expects {}",
                    p.display(),
                    w.arch().width_divisor,
                    mc.arch.width_divisor
                )));
            }
            mc.encoder = EncoderSource::Archive {
                path: p.to_path_buf(),
                checksum: w.checksum()?,
            };
            w
        }
        None => mc.encoder.load()?,
    };
    let model = Model::new(mc, encoder, dtype)?;
    model.store.load_from(&prefixed(&a, "param/"))?;
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub reports: Vec<LossReport>,
    pub final_checkpoint: PathBuf,
}

fn write_preview(images: &[ImageTensor], path: &Path) -> Result<()> {
    let panels = images
        .iter()
        .map(|img| crate::decoder::clamp_to_image(&img.tensor().get(0)?.unsqueeze(0)?))
        .collect::<Result<Vec<_>>>()?;
    let ts: Vec<&Tensor> = panels.iter().map(|p| p.tensor()).collect();
    let strip = ImageTensor::new(Tensor::cat(&ts, 3)?)?;
    crate::imageio::save_image(&strip, 0, path)
}

fn write_latest(out: &Path, checkpoint: &Path, step: u64) -> Result<()> {
    let name = checkpoint
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_default();
    let body = json!({"checkpoint": name, "step": step}).to_string();
    let path = out.join("latest.json");
    std::fs::write(&path, body).map_err(|e| Error::io(path, e))
}

/// Runs `cfg.steps` steps, writing the JSON-lines log, periodic checkpoints
/// and previews, and a final checkpoint into `out`.
pub fn run_training(
    cfg: TrainConfig,
    out: &Path,
    mut on_step: impl FnMut(u64, &LossReport),
) -> Result<TrainSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut data = Dataset::open(&cfg.content_dir, &cfg.style_dir, cfg.resize, cfg.crop)?;
    let mut state = TrainState::new(cfg.clone(), DType::F32)?;
    let log_path = out.join("train_log.jsonl");
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut reports = Vec::with_capacity(cfg.steps as usize);
    while state.step < cfg.steps {
        let step = state.step;
        let preview = cfg.preview_every > 0 && step % cfg.preview_every == 0;
        let outp = state.train_step_with(&mut data, preview)?;
        writeln!(log, "{}", outp.report.to_json_line(step)).map_err(|e| Error::io(&log_path, e))?;
        if let Some(images) = &outp.previews {
            write_preview(images, &out.join(format!("preview_{step:06}.png")))?;
        }
        on_step(step, &outp.report);
        reports.push(outp.report);
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < cfg.steps {
            let path = out.join(format!("checkpoint_{:06}.safetensors", state.step));
            save_checkpoint(&state, &path)?;
            write_latest(out, &path, state.step)?;
        }
    }
    let final_checkpoint = out.join("final.safetensors");
    save_checkpoint(&state, &final_checkpoint)?;
    write_latest(out, &final_checkpoint, state.step)?;
    Ok(TrainSummary {
        reports,
        final_checkpoint,
    })
}
