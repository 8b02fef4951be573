//! Small neural-network toolkit on top of candle tensors: a named parameter
//! store with frozen/trainable entries, linear layers whose frozen weights
//! skip the weight gradient, and differentiable activations built from
//! primitive ops.

use std::collections::BTreeMap;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::invalid;
use crate::Result;

#[derive(Debug, Clone)]
pub enum Param {
    Frozen(Tensor),
    Trainable(Var),
}

impl Param {
    pub fn tensor(&self) -> &Tensor {
        match self {
            Param::Frozen(t) => t,
            Param::Trainable(v) => v.as_tensor(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, Param::Trainable(_))
    }
}

/// Named parameters in insertion-independent (sorted) order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(invalid!("duplicate parameter {name}"));
        }
        let p = if trainable {
            Param::Trainable(Var::from_tensor(&t)?)
        } else {
            Param::Frozen(t.detach())
        };
        self.entries.insert(name, p);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.entries
            .get(name)
            .map(|p| p.tensor().clone())
            .ok_or_else(|| invalid!("unknown parameter {name}"))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.entries.iter().filter_map(|(k, p)| match p {
            Param::Trainable(v) => Some((k, v)),
            Param::Frozen(_) => None,
        })
    }

    pub fn frozen(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter().filter_map(|(k, p)| match p {
            Param::Frozen(t) => Some((k, t)),
            Param::Trainable(_) => None,
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    /// Overwrites the value of an existing parameter, keeping its kind.
    pub fn set(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| invalid!("unknown parameter {name}"))?;
        if p.tensor().shape() != value.shape() {
            return Err(crate::Error::Shape(format!(
                "{name}: stored {:?}, new {:?}",
                p.tensor().shape(),
                value.shape()
            )));
        }
        let value = value.to_dtype(p.tensor().dtype())?;
        match p {
            Param::Frozen(t) => *t = value.detach(),
            Param::Trainable(v) => v.set(&value)?,
        }
        Ok(())
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|(_, v)| v.elem_count()).sum()
    }
}

/// Deterministic initialiser; every draw advances one ChaCha stream.
pub struct Init {
    rng: ChaCha8Rng,
    pub dtype: DType,
}

impl Init {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| invalid!("{e}"))?;
        let v: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    pub fn zeros(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::zeros(shape, self.dtype, &Device::Cpu)?)
    }

    pub fn ones(&self, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::ones(shape, self.dtype, &Device::Cpu)?)
    }

    pub fn eye(&self, n: usize) -> Result<Tensor> {
        Ok(Tensor::eye(n, self.dtype, &Device::Cpu)?)
    }
}

struct FrozenMatmul {
    w: Tensor,
    out: Tensor,
}

impl CustomOp1 for FrozenMatmul {
    fn name(&self) -> &'static str {
        "frozen-matmul"
    }

    fn cpu_fwd(&self, _: &CpuStorage, _: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let flat = self.out.flatten_all()?;
        let storage = match flat.dtype() {
            DType::F32 => CpuStorage::F32(flat.to_vec1::<f32>()?),
            DType::F64 => CpuStorage::F64(flat.to_vec1::<f64>()?),
            dt => return Err(candle_core::Error::UnsupportedDTypeForOp(dt, "frozen-matmul")),
        };
        Ok((storage, self.out.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.broadcast_matmul(&self.w.t()?)?))
    }
}

/// `x @ w` for a weight that never receives gradients. Backpropagation only
/// computes the input gradient.
pub fn frozen_matmul(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let out = x.detach().broadcast_matmul(w)?;
    if !x.track_op() {
        return Ok(out);
    }
    Ok(x.apply_op1(FrozenMatmul { w: w.clone(), out })?)
}

/// `x @ w + b` with weights stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
    pub frozen: bool,
}

impl Linear {
    pub fn from_store(store: &ParamStore, prefix: &str, bias: bool) -> Result<Self> {
        let w = store.get(&format!("{prefix}.w"))?;
        let frozen = !store
            .param(&format!("{prefix}.w"))
            .map(Param::is_trainable)
            .unwrap_or(false);
        let b = if bias {
            Some(store.get(&format!("{prefix}.b"))?)
        } else {
            None
        };
        Ok(Linear { w, b, frozen })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = if self.frozen {
            frozen_matmul(x, &self.w)?
        } else {
            x.broadcast_matmul(&self.w)?
        };
        match &self.b {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

/// Registers `prefix.w` (`[in, out]`, normal init) and optionally a zero
/// `prefix.b`.
pub fn register_linear(
    store: &mut ParamStore,
    init: &mut Init,
    prefix: &str,
    shape: (usize, usize),
    std: f64,
    bias: bool,
    trainable: bool,
) -> Result<()> {
    store.insert(format!("{prefix}.w"), init.normal(&[shape.0, shape.1], std)?, trainable)?;
    if bias {
        store.insert(format!("{prefix}.b"), init.zeros(&[shape.1])?, trainable)?;
    }
    Ok(())
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let c = x.broadcast_sub(&mean)?;
    let var = c.sqr()?.mean_keepdim(D::Minus1)?;
    let y = c.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(y.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    // tanh approximation
    let inner = ((x.powf(3.0)? * 0.044715)? + x)? * (2.0f64 / std::f64::consts::PI).sqrt();
    Ok(((inner?.tanh()? + 1.0)? * 0.5)?.mul(x)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// `relu(z) + ln(1 + exp(-|z|))`
pub fn softplus(z: &Tensor) -> Result<Tensor> {
    let tail = (z.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((z.relu()? + tail)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?.iter().sum())
}

pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn from_ndarray(a: &ndarray::Array2<f32>, dtype: DType) -> Result<Tensor> {
    let (r, c) = a.dim();
    let v: Vec<f32> = a.iter().copied().collect();
    Ok(Tensor::from_vec(v, (r, c), &Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn frozen_matmul_matches_plain_and_skips_weight_grad() {
        let mut init = Init::new(1, DType::F64);
        let x = Var::from_tensor(&init.normal(&[2, 3, 4], 1.0).unwrap()).unwrap();
        let w = init.normal(&[4, 5], 1.0).unwrap();
        let w_var = Var::from_tensor(&w).unwrap();
        let y1 = frozen_matmul(x.as_tensor(), &w).unwrap();
        let y2 = x.as_tensor().broadcast_matmul(w_var.as_tensor()).unwrap();
        assert_eq!(to_vec_f64(&y1).unwrap(), to_vec_f64(&y2).unwrap());
        let g1 = y1.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = y2.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let a = to_vec_f64(g1.get(x.as_tensor()).unwrap()).unwrap();
        let b = to_vec_f64(g2.get(x.as_tensor()).unwrap()).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!(g1.get(&w).is_none());
    }

    #[test]
    fn activations_closed_form() {
        let x = t(&[-30.0, -1.0, 0.0, 2.0, 30.0], &[5]);
        let s = to_vec_f64(&sigmoid(&x).unwrap()).unwrap();
        let sp = to_vec_f64(&softplus(&x).unwrap()).unwrap();
        for (i, &v) in [-30.0f64, -1.0, 0.0, 2.0, 30.0].iter().enumerate() {
            assert!((s[i] - 1.0 / (1.0 + (-v).exp())).abs() < 1e-12);
            assert!((sp[i] - (1.0 + v.exp()).ln()).abs() < 1e-12);
        }
        let sm = to_vec_f64(&softmax_last(&t(&[1.0, 2.0, 3.0], &[1, 3])).unwrap()).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        assert!((sm[2] - 3.0f64.exp() / z).abs() < 1e-12);
        let ls = to_vec_f64(&log_softmax_last(&t(&[1.0, 2.0, 3.0], &[1, 3])).unwrap()).unwrap();
        assert!((ls[0] - (1.0 - z.ln())).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_unit_stats() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 8.0], &[2, 4]);
        let y = layer_norm(&x, &t(&[1.0; 4], &[4]), &t(&[0.0; 4], &[4]), 0.0).unwrap();
        let v = to_vec_f64(&y).unwrap();
        for r in 0..2 {
            let row = &v[r * 4..r * 4 + 4];
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn store_kinds() {
        let mut s = ParamStore::new();
        let mut init = Init::new(0, DType::F32);
        register_linear(&mut s, &mut init, "a", (2, 3), 0.1, true, false).unwrap();
        register_linear(&mut s, &mut init, "b", (3, 3), 0.1, false, true).unwrap();
        assert_eq!(s.frozen().count(), 2);
        assert_eq!(s.num_trainable(), 9);
        assert!(s.insert("a.w", init.zeros(&[1]).unwrap(), true).is_err());
        let lin = Linear::from_store(&s, "a", true).unwrap();
        assert!(lin.frozen);
    }
}
