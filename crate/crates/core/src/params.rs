//! Trainable parameter storage and the reflection-padded convolution used by
//! every learnable block.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::reflect_pad;

/// All trainable tensors of a model, keyed by dotted name.
///
/// Layers keep clones of the underlying tensors, which share storage and
/// identity with the `Var`s held here; updating a `Var` updates every layer
/// that uses it.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    fn register(&mut self, name: String, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::arg(format!("parameter `{name}` registered twice")));
        }
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(handle)
    }

    /// Registers a `k x k` convolution with uniform `±1/sqrt(fan_in)` init.
    pub fn conv<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Conv2d> {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let n = out_ch * in_ch * kernel * kernel;
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        let b: Vec<f64> = (0..out_ch).map(|_| rng.random_range(-bound..bound)).collect();
        let weight = self.register(format!("{name}.weight"), w, &[out_ch, in_ch, kernel, kernel])?;
        let bias = self.register(format!("{name}.bias"), b, &[out_ch])?;
        Conv2d::new(weight, bias)
    }

    /// Overwrites every parameter with zeros.
    pub fn zero_all(&self) -> Result<()> {
        for v in self.vars.values() {
            v.set(&v.zeros_like()?)?;
        }
        Ok(())
    }

    /// Copies values from `other` for every shared name; shapes must match.
    pub fn load_from(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::format(format!("missing parameter `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::format(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// Convolution with reflection padding (`kernel / 2` on each side) and bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    pad: usize,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (out_ch, _, kh, kw) = weight.dims4()?;
        if kh != kw || kh % 2 == 0 {
            return Err(Error::arg(format!("conv kernel must be odd and square, got {kh}x{kw}")));
        }
        if bias.dims() != [out_ch] {
            return Err(Error::arg(format!(
                "conv bias shape {:?} does not match {out_ch} outputs",
                bias.dims()
            )));
        }
        Ok(Conv2d {
            weight,
            bias,
            pad: kh / 2,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Conv2d> {
        Conv2d::new(self.weight.to_dtype(dtype)?, self.bias.to_dtype(dtype)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = reflect_pad(x, self.pad)?;
        let y = x.conv2d(&self.weight, 0, 1, 1, 1)?;
        let b = self.bias.reshape((1, self.out_channels(), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_keeps_spatial_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new(DType::F64);
        let conv = store.conv("c", 2, 5, 3, &mut rng).unwrap();
        let x = Tensor::ones((1, 2, 6, 7), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(conv.forward(&x).unwrap().dims(), &[1, 5, 6, 7]);
        assert_eq!(store.len(), 2);
        assert!(store.get("c.weight").is_some());
    }

    #[test]
    fn layers_see_store_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new(DType::F64);
        let conv = store.conv("c", 1, 1, 1, &mut rng).unwrap();
        store.zero_all().unwrap();
        let x = Tensor::ones((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let y = conv.forward(&x).unwrap();
        assert!(crate::tensor::to_f64_vec(&y).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new(DType::F32);
        store.conv("c", 1, 1, 1, &mut rng).unwrap();
        assert!(store.conv("c", 1, 1, 1, &mut rng).is_err());
    }
}
