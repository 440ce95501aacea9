//! Minimal layer toolkit on top of `candle_core`: a named parameter store,
//! convolution, batch normalization, linear layers and a few differentiable
//! helpers shared by the backbone and the SiRIIB module.

use std::collections::BTreeMap;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// Whether batch normalization uses batch statistics (and updates its
/// running estimates) or the frozen running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Trainable parameters and non-trainable buffers keyed by canonical layer
/// path, e.g. `backbone.layer1.0.conv1.weight`.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device, seed: u64) -> Self {
        Self {
            dtype,
            device,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn insert(map: &mut BTreeMap<String, Var>, path: String, var: Var) -> Result<Var> {
        if map.contains_key(&path) {
            return Err(Error::Config(format!("duplicate parameter path {path}")));
        }
        map.insert(path, var.clone());
        Ok(var)
    }

    pub fn param_from_vec(&mut self, path: String, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        Self::insert(&mut self.params, path, Var::from_tensor(&t)?)
    }

    pub fn buffer_from_vec(&mut self, path: String, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        Self::insert(&mut self.buffers, path, Var::from_tensor(&t)?)
    }

    pub fn param_normal(&mut self, path: String, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let values: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.param_from_vec(path, values, shape)
    }

    pub fn param_uniform(&mut self, path: String, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::Config(e.to_string()))?;
        let values: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.param_from_vec(path, values, shape)
    }

    pub fn param_const(&mut self, path: String, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.param_from_vec(path, vec![value; n], shape)
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    /// Number of trainable scalars whose path starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    pub fn get(&self, path: &str) -> Option<&Var> {
        self.params.get(path).or_else(|| self.buffers.get(path))
    }

    /// Deep copy of every parameter and buffer.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.params
            .iter()
            .chain(&self.buffers)
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrite values from a snapshot. Every stored path must be present
    /// with an identical shape.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, var) in self.params.iter().chain(&self.buffers) {
            let t = values
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {k}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {k}: stored shape {:?}, model shape {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        let known = self.params.len() + self.buffers.len();
        if values.len() != known {
            let extra: Vec<_> = values.keys().filter(|k| self.get(k).is_none()).collect();
            return Err(Error::Checkpoint(format!("unexpected tensors {extra:?}")));
        }
        Ok(())
    }
}

/// 2-D convolution with square kernel and symmetric zero padding.
#[derive(Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy)]
pub enum ConvInit {
    /// He-normal with fan-out scaling.
    KaimingFanOut,
    Zeros,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        path: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: ConvInit,
    ) -> Result<Self> {
        let shape = [out_ch, in_ch, kernel, kernel];
        let weight = match init {
            ConvInit::KaimingFanOut => {
                let fan_out = (out_ch * kernel * kernel) as f64;
                store.param_normal(format!("{path}.weight"), &shape, (2.0 / fan_out).sqrt())?
            }
            ConvInit::Zeros => store.param_const(format!("{path}.weight"), &shape, 0.0)?,
        };
        let bias = if bias {
            Some(store.param_const(format!("{path}.bias"), &[out_ch], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }

    /// Multiply-adds for one sample producing an `out_h x out_w` map.
    pub fn macs(&self, out_h: usize, out_w: usize) -> u64 {
        let per_pixel = self.out_channels() * self.in_channels() * self.kernel() * self.kernel();
        let bias = usize::from(self.bias.is_some()) * self.out_channels();
        ((per_pixel + bias) * out_h * out_w) as u64
    }

    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.padding - self.kernel()) / self.stride + 1
    }
}

/// Batch normalization over the channel axis of `(N, C, H, W)` tensors.
#[derive(Clone)]
pub struct BatchNorm2d {
    pub weight: Var,
    pub bias: Var,
    pub running_mean: Var,
    pub running_var: Var,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, path: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.param_const(format!("{path}.weight"), &[channels], 1.0)?,
            bias: store.param_const(format!("{path}.bias"), &[channels], 0.0)?,
            running_mean: store.buffer_from_vec(
                format!("{path}.running_mean"),
                vec![0.0; channels],
                &[channels],
            )?,
            running_var: store.buffer_from_vec(
                format!("{path}.running_var"),
                vec![1.0; channels],
                &[channels],
            )?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn channels(&self) -> usize {
        self.weight.elem_count()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (mean, var) = match mode {
            Mode::Train => {
                let count = (n * h * w) as f64;
                let mean = x.mean_keepdim((0, 2, 3))?;
                let centered = x.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
                let m = self.momentum;
                let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                    + (mean.detach().flatten_all()? * m)?)?;
                let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                    + (var.detach().flatten_all()? * (m * unbiased))?)?;
                self.running_mean.set(&new_mean)?;
                self.running_var.set(&new_var)?;
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            ),
        };
        let inv_std = (var + self.eps)?.sqrt()?.recip()?;
        let scale = self.weight.as_tensor().reshape((1, c, 1, 1))?.mul(&inv_std)?;
        let shift = self.bias.as_tensor().reshape((1, c, 1, 1))?;
        Ok(x.broadcast_sub(&mean)?.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (2 * self.channels() * h * w) as u64
    }
}

#[derive(Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(store: &mut ParamStore, path: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: store.param_uniform(format!("{path}.weight"), &[out_dim, in_dim], bound)?,
            bias: store.param_uniform(format!("{path}.bias"), &[out_dim], bound)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x
            .matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }

    pub fn macs(&self) -> u64 {
        self.weight.elem_count() as u64
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Numerically stable `log_softmax` over the last axis.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn one_hot(labels: &Tensor, classes: usize, dtype: DType) -> Result<Tensor> {
    let n = labels.dims1()?;
    let idx = labels.to_vec1::<u32>()?;
    let mut data = vec![0f32; n * classes];
    for (i, &l) in idx.iter().enumerate() {
        let l = l as usize;
        if l >= classes {
            return Err(Error::Config(format!("label {l} out of range for {classes} classes")));
        }
        data[i * classes + l] = 1.0;
    }
    Ok(Tensor::from_vec(data, (n, classes), labels.device())?.to_dtype(dtype)?)
}

/// Batch-averaged cross-entropy.
pub fn cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let (_, classes) = logits.dims2()?;
    let target = one_hot(labels, classes, logits.dtype())?;
    Ok(log_softmax(logits)?.mul(&target)?.sum(D::Minus1)?.mean_all()?.neg()?)
}

/// Number of correct predictions.
pub fn correct(logits: &Tensor, labels: &[u8]) -> Result<usize> {
    let pred = logits.argmax(D::Minus1)?.to_vec1::<u32>()?;
    Ok(pred
        .iter()
        .zip(labels)
        .filter(|(p, l)| **p == u32::from(**l))
        .count())
}

/// Row-interpolation matrix for 1-D linear resampling from `input` to
/// `output` samples with half-pixel centers and edge clamping.
pub fn linear_resample_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for i in 0..output {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[i * input + i0] += 1.0 - frac;
        m[i * input + i1] += frac;
    }
    m
}

/// Differentiable bilinear resize of `(N, C, H, W)` with square output,
/// computed as `R X R^T`.
pub fn bilinear_resize(x: &Tensor, size: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == size && w == size {
        return Ok(x.clone());
    }
    let dev = x.device();
    let rh = Tensor::from_vec(linear_resample_matrix(h, size), (size, h), dev)?.to_dtype(x.dtype())?;
    let rw = Tensor::from_vec(linear_resample_matrix(w, size), (size, w), dev)?.to_dtype(x.dtype())?;
    let rows = rh.broadcast_matmul(&x.contiguous()?)?;
    Ok(rows.broadcast_matmul(&rw.t()?.contiguous()?)?)
}

/// Euclidean norm of every row of a 2-D tensor, with a zero (rather than
/// NaN) gradient at the origin.
pub fn row_norms(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(RowNorm)?)
}

struct RowNorm;

fn norms_of(values: &[f64], cols: usize) -> Vec<f64> {
    values
        .chunks(cols)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

pub(crate) fn storage_to_f64(storage: &CpuStorage, layout: &Layout) -> Result<Vec<f64>> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| Error::Config("custom op needs a contiguous input".into()))?;
    Ok(match storage {
        CpuStorage::F32(v) => v[start..end].iter().map(|&x| f64::from(x)).collect(),
        CpuStorage::F64(v) => v[start..end].to_vec(),
        _ => return Err(Error::Config("custom op supports f32 and f64".into())),
    })
}

pub(crate) fn f64_to_storage(values: Vec<f64>, like: &CpuStorage) -> CpuStorage {
    match like {
        CpuStorage::F32(_) => CpuStorage::F32(values.into_iter().map(|v| v as f32).collect()),
        _ => CpuStorage::F64(values),
    }
}

impl CustomOp1 for RowNorm {
    fn name(&self) -> &'static str {
        "row-norm"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (rows, cols) = layout.shape().dims2()?;
        let values = storage_to_f64(storage, layout).map_err(candle_core::Error::wrap)?;
        Ok((f64_to_storage(norms_of(&values, cols), storage), Shape::from(rows)))
    }

    fn bwd(&self, arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        // d|x|/dx = x / |x|, defined as 0 at x = 0
        let safe = res.gt(0.0)?;
        let denom = safe.where_cond(res, &res.ones_like()?)?;
        let scale = safe.where_cond(&grad.div(&denom)?, &grad.zeros_like()?)?;
        Ok(Some(arg.broadcast_mul(&scale.unsqueeze(1)?)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resample_rows_sum_to_one() {
        for (i, o) in [(32, 24), (32, 16), (8, 32), (24, 32), (5, 5)] {
            let m = linear_resample_matrix(i, o);
            for r in m.chunks(i) {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        // halving is 2x2 averaging
        let m = linear_resample_matrix(4, 2);
        assert_eq!(m, vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn row_norm_value_and_zero_gradient() {
        let x = Var::from_tensor(&Tensor::new(&[[3.0f64, 4.0], [0.0, 0.0]], &Device::Cpu).unwrap()).unwrap();
        let n = row_norms(x.as_tensor()).unwrap();
        assert_eq!(n.to_vec1::<f64>().unwrap(), vec![5.0, 0.0]);
        let g = n.sum_all().unwrap().backward().unwrap();
        let gx = g.get(x.as_tensor()).unwrap().to_vec2::<f64>().unwrap();
        assert!((gx[0][0] - 0.6).abs() < 1e-15 && (gx[0][1] - 0.8).abs() < 1e-15);
        assert_eq!(gx[1], vec![0.0, 0.0]);

        let y = Var::from_tensor(&Tensor::zeros((2, 3), DType::F32, &Device::Cpu).unwrap()).unwrap();
        let g = row_norms(y.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        let gy = g.get(y.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(gy.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::zeros((2, 4), DType::F64, &Device::Cpu).unwrap();
        let labels = Tensor::new(&[1u32, 3], &Device::Cpu).unwrap();
        let ce = cross_entropy(&logits, &labels).unwrap().to_scalar::<f64>().unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_train_normalizes_and_tracks() {
        let mut store = ParamStore::new(DType::F64, Device::Cpu, 0);
        let bn = BatchNorm2d::new(&mut store, "bn", 2).unwrap();
        let x = Tensor::arange(0f64, 16.0, &Device::Cpu).unwrap().reshape((2, 2, 2, 2)).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        let mean = y.mean_keepdim((0, 2, 3)).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(mean.iter().all(|m| m.abs() < 1e-12));
        let rm = bn.running_mean.as_tensor().to_vec1::<f64>().unwrap();
        // channel means are 5.5 and 9.5
        assert!((rm[0] - 0.55).abs() < 1e-12 && (rm[1] - 0.95).abs() < 1e-12);
        let before = store.snapshot().unwrap();
        let _ = bn.forward(&x, Mode::Eval).unwrap();
        let after = store.snapshot().unwrap();
        for (k, v) in before {
            let a = v.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let b = after[&k].flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert_eq!(a, b, "{k}");
        }
    }

    #[test]
    fn store_rejects_duplicates_and_bad_loads() {
        let mut store = ParamStore::new(DType::F32, Device::Cpu, 0);
        store.param_const("a".into(), &[2], 1.0).unwrap();
        assert!(store.param_const("a".into(), &[2], 1.0).is_err());
        let mut snap = store.snapshot().unwrap();
        snap.insert("a".into(), Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap());
        assert!(store.load(&snap).is_err());
    }
}
