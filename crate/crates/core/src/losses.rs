//! Training objectives: information, content, style and reconstruction
//! losses plus their weighted total. Norms are plain Euclidean norms over
//! every element (square root of the sum of squares).

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::bottleneck::CompressedPyramid;
use crate::encoder::{encode, EncoderWeights};
use crate::error::{Error, Result};
use crate::tensor::{l2_norm, mean_std, FeatureMap, FeaturePyramid, ImageTensor};
use crate::transfer::{transfer_pyramids, TransferParams, TransferVariant};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub info: f64,
    pub content: f64,
    pub style: f64,
    pub rec: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas {
            info: 5.0,
            content: 3.0,
            style: 10.0,
            rec: 10.0,
        }
    }
}

/// Unweighted loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub info: f64,
    pub content: f64,
    pub style: f64,
    pub rec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub info: f64,
    pub content: f64,
    pub style: f64,
    pub rec: f64,
    pub total: f64,
    pub mi_content_nats: Vec<f64>,
    pub mi_style_nats: Vec<f64>,
}

impl LossReport {
    /// One JSON line with per-layer MI in both nats and bits.
    pub fn to_json_line(&self, step: u64) -> String {
        let bits = |v: &[f64]| v.iter().map(|x| x / std::f64::consts::LN_2).collect::<Vec<_>>();
        serde_json::json!({
            "step": step,
            "info": self.info,
            "content": self.content,
            "style": self.style,
            "rec": self.rec,
            "total": self.total,
            "mi_content_nats": self.mi_content_nats,
            "mi_style_nats": self.mi_style_nats,
            "mi_content_bits": bits(&self.mi_content_nats),
            "mi_style_bits": bits(&self.mi_style_nats),
        })
        .to_string()
    }
}

/// Mean MI over the four levels of each branch, summed over the two branches.
pub fn info_loss(cp_c: &CompressedPyramid, cp_s: &CompressedPyramid) -> Result<Tensor> {
    let branch = |cp: &CompressedPyramid| -> Result<Tensor> {
        let means: Vec<Tensor> = cp.levels().iter().map(|l| l.mi_mean.reshape(1)).collect::<candle_core::Result<_>>()?;
        Ok(Tensor::cat(&means, 0)?.mean_all()?)
    };
    Ok((branch(cp_c)? + branch(cp_s)?)?)
}

/// Sum over levels of `||E(I_cs)_i - target_i||`.
pub fn content_loss_features(generated: &FeaturePyramid, target: &[FeatureMap]) -> Result<Tensor> {
    if target.len() != 4 {
        return Err(Error::arg("content target needs 4 levels"));
    }
    let mut terms = Vec::with_capacity(4);
    for (g, t) in generated.levels().iter().zip(target) {
        if g.dims() != t.dims() {
            return Err(Error::arg(format!(
                "content loss shape mismatch {:?} vs {:?}",
                g.dims(),
                t.dims()
            )));
        }
        terms.push(l2_norm(&(g.tensor() - t.tensor())?)?);
    }
    sum_scalars(terms)
}

/// Content loss against the parameter-free transfer of the raw pyramids.
pub fn content_loss(
    i_cs: &ImageTensor,
    f_c: &FeaturePyramid,
    f_s: &FeaturePyramid,
    encoder: &EncoderWeights,
    t_prime: &TransferParams,
) -> Result<Tensor> {
    if t_prime.variant() != TransferVariant::ParameterFree {
        return Err(Error::arg("content loss target must use the parameter-free transfer"));
    }
    let target: Vec<FeatureMap> = transfer_pyramids(f_c, f_s, t_prime)?
        .iter()
        .map(FeatureMap::detach)
        .collect();
    content_loss_features(&encode(i_cs, encoder)?, &target)
}

/// Sum over levels of the mean and std distances between channel statistics.
pub fn style_loss_features(generated: &FeaturePyramid, style: &FeaturePyramid) -> Result<Tensor> {
    let mut terms = Vec::with_capacity(8);
    for (g, s) in generated.levels().iter().zip(style.levels()) {
        let (gm, gs) = mean_std(g.tensor())?;
        let (sm, ss) = mean_std(s.tensor())?;
        if gm.dims() != sm.dims() {
            return Err(Error::arg(format!(
                "style loss statistics mismatch {:?} vs {:?}",
                gm.dims(),
                sm.dims()
            )));
        }
        terms.push(l2_norm(&(gm - sm)?)?);
        terms.push(l2_norm(&(gs - ss)?)?);
    }
    sum_scalars(terms)
}

pub fn style_loss(i_cs: &ImageTensor, i_s: &ImageTensor, encoder: &EncoderWeights) -> Result<Tensor> {
    style_loss_features(&encode(i_cs, encoder)?, &encode(i_s, encoder)?)
}

/// `wc * ||I_c_hat - I_c|| + ws * ||I_s_hat - I_s||`; ablations zero one weight.
pub fn rec_loss_weighted(
    i_c_hat: &ImageTensor,
    i_c: &ImageTensor,
    i_s_hat: &ImageTensor,
    i_s: &ImageTensor,
    content_weight: f64,
    style_weight: f64,
) -> Result<Tensor> {
    for (a, b) in [(i_c_hat, i_c), (i_s_hat, i_s)] {
        if a.tensor().dims() != b.tensor().dims() {
            return Err(Error::arg(format!(
                "reconstruction shape mismatch {:?} vs {:?}",
                a.tensor().dims(),
                b.tensor().dims()
            )));
        }
    }
    let c = (l2_norm(&(i_c_hat.tensor() - i_c.tensor())?)? * content_weight)?;
    let s = (l2_norm(&(i_s_hat.tensor() - i_s.tensor())?)? * style_weight)?;
    Ok((c + s)?)
}

pub fn rec_loss(
    i_c_hat: &ImageTensor,
    i_c: &ImageTensor,
    i_s_hat: &ImageTensor,
    i_s: &ImageTensor,
) -> Result<Tensor> {
    rec_loss_weighted(i_c_hat, i_c, i_s_hat, i_s, 1.0, 1.0)
}

/// Differentiable weighted total of scalar loss tensors.
pub fn weighted_total(
    info: &Tensor,
    content: &Tensor,
    style: &Tensor,
    rec: &Tensor,
    lambdas: &Lambdas,
) -> Result<Tensor> {
    let t = ((info * lambdas.info)? + (content * lambdas.content)?)?;
    let t = (t + (style * lambdas.style)?)?;
    Ok((t + (rec * lambdas.rec)?)?)
}

/// Weighted total of already-evaluated terms.
pub fn total_loss(
    terms: &LossTerms,
    lambdas: &Lambdas,
    mi_content_nats: Vec<f64>,
    mi_style_nats: Vec<f64>,
) -> Result<LossReport> {
    for (name, v) in [
        ("info", terms.info),
        ("content", terms.content),
        ("style", terms.style),
        ("rec", terms.rec),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is not finite ({v})")));
        }
    }
    let total = lambdas.info * terms.info
        + lambdas.content * terms.content
        + lambdas.style * terms.style
        + lambdas.rec * terms.rec;
    Ok(LossReport {
        info: terms.info,
        content: terms.content,
        style: terms.style,
        rec: terms.rec,
        total,
        mi_content_nats,
        mi_style_nats,
    })
}

fn sum_scalars(terms: Vec<Tensor>) -> Result<Tensor> {
    let flat: Vec<Tensor> = terms.iter().map(|t| t.reshape(1)).collect::<candle_core::Result<_>>()?;
    Ok(Tensor::cat(&flat, 0)?.sum_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bottleneck::{CompressedLevel, Controller};
    use crate::tensor::{scalar, Level};
    use candle_core::{DType, Device};

    fn cp_with_means(means: [f64; 4]) -> CompressedPyramid {
        let levels = Level::ALL
            .iter()
            .zip(means)
            .map(|(&l, m)| {
                let t = Tensor::zeros((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
                let f = FeatureMap::new(t.clone(), l).unwrap();
                CompressedLevel {
                    r: f.clone(),
                    alpha: Controller::constant(&f, 0.5).unwrap(),
                    mi_map: (t.ones_like().unwrap() * m).unwrap(),
                    mi_mean: Tensor::new(m, &Device::Cpu).unwrap(),
                }
            })
            .collect();
        CompressedPyramid::new(levels).unwrap()
    }

    #[test]
    fn info_loss_arithmetic() {
        let zero = cp_with_means([0.0; 4]);
        assert_eq!(scalar(&info_loss(&zero, &zero).unwrap()).unwrap(), 0.0);
        let c = cp_with_means([0.4; 4]);
        assert!((scalar(&info_loss(&c, &zero).unwrap()).unwrap() - 0.4).abs() < 1e-12);
        let a = cp_with_means([0.3, 0.3, 0.3, 0.3]);
        assert!((scalar(&info_loss(&a, &a).unwrap()).unwrap() - 0.6).abs() < 1e-12);
    }

    fn pyr(fill: f64, bump_level: Option<usize>) -> FeaturePyramid {
        FeaturePyramid::new(
            Level::ALL
                .iter()
                .map(|&l| {
                    let s = 8 >> l.index();
                    let mut t = Tensor::ones((1, 2, s, s), DType::F64, &Device::Cpu).unwrap();
                    t = (t * fill).unwrap();
                    if bump_level == Some(l.index()) {
                        t = (t + 1.0).unwrap();
                    }
                    FeatureMap::new(t, l).unwrap()
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn content_loss_norm_convention() {
        let a = pyr(0.5, None);
        assert_eq!(scalar(&content_loss_features(&a, a.levels()).unwrap()).unwrap(), 0.0);
        let b = pyr(0.5, Some(1));
        // level 2 is 2 x 4 x 4 = 32 elements off by one
        let v = scalar(&content_loss_features(&b, a.levels()).unwrap()).unwrap();
        assert!((v - 32f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn style_loss_mean_offset() {
        let mk = |v: f64| {
            let t = (Tensor::ones((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap() * v).unwrap();
            t
        };
        let g = crate::tensor::mean_std(&mk(3.0)).unwrap();
        let s = crate::tensor::mean_std(&mk(1.0)).unwrap();
        let v = scalar(&(l2_norm(&(g.0 - s.0).unwrap()).unwrap() + l2_norm(&(g.1 - s.1).unwrap()).unwrap()).unwrap()).unwrap();
        assert_eq!(v, 2.0);
        let a = pyr(0.7, Some(2));
        assert_eq!(scalar(&style_loss_features(&a, &a).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn rec_loss_cases() {
        let img = |v: f64| ImageTensor::new((Tensor::ones((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap() * v).unwrap()).unwrap();
        let (a, b) = (img(0.2), img(1.2));
        assert_eq!(scalar(&rec_loss(&a, &a, &a, &a).unwrap()).unwrap(), 0.0);
        let v = scalar(&rec_loss(&b, &a, &a, &a).unwrap()).unwrap();
        assert!((v - 48f64.sqrt()).abs() < 1e-12);
        let w = scalar(&rec_loss(&a, &a, &b, &a).unwrap()).unwrap();
        assert_eq!(v, w);
        let small = ImageTensor::new(Tensor::ones((1, 3, 2, 2), DType::F64, &Device::Cpu).unwrap()).unwrap();
        assert!(rec_loss(&small, &a, &a, &a).is_err());
    }

    #[test]
    fn total_loss_weights() {
        let ones = LossTerms { info: 1.0, content: 1.0, style: 1.0, rec: 1.0 };
        let r = total_loss(&ones, &Lambdas::default(), vec![], vec![]).unwrap();
        assert_eq!(r.total, 28.0);
        let zero = total_loss(&LossTerms::default(), &Lambdas::default(), vec![], vec![]).unwrap();
        assert_eq!(zero.total, 0.0);
        let terms = LossTerms { info: 0.3, content: 2.0, style: 0.7, rec: 5.5 };
        let l = Lambdas::default();
        let l2 = Lambdas { info: 2.0 * l.info, content: 2.0 * l.content, style: 2.0 * l.style, rec: 2.0 * l.rec };
        let t1 = total_loss(&terms, &l, vec![], vec![]).unwrap().total;
        let t2 = total_loss(&terms, &l2, vec![], vec![]).unwrap().total;
        assert!((t2 - 2.0 * t1).abs() < 1e-12);
    }

    #[test]
    fn non_finite_term_is_named() {
        let bad = LossTerms { info: 0.0, content: 0.0, style: f64::NAN, rec: 0.0 };
        let err = total_loss(&bad, &Lambdas::default(), vec![], vec![]).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("style")));
    }
}
