//! Image batches in raw `[0, 1]` pixel space and their tensor conversions.

use candle_core::{DType, Device, Tensor};
use ndarray::{s, Array3, Array4, ArrayView3, Axis};

use crate::error::{Error, Result};

/// A batch of `C x H x W` images with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    /// `(batch, channel, height, width)`, intensities in `[0, 1]`.
    pub data: Array4<f32>,
    pub labels: Vec<u8>,
}

impl ImageBatch {
    pub fn new(data: Array4<f32>, labels: Vec<u8>) -> Result<Self> {
        if data.shape()[0] != labels.len() {
            return Err(Error::shape(
                "image batch labels",
                &[data.shape()[0]],
                &[labels.len()],
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "image batch" });
        }
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Config("image intensities must lie in [0, 1]".into()));
        }
        Ok(Self { data, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn resolution(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, f32> {
        self.data.index_axis(Axis(0), i)
    }

    /// Single image widened to `f64`, the precision used by all SVD routines.
    pub fn image_f64(&self, i: usize) -> Array3<f64> {
        self.image(i).mapv(f64::from)
    }

    /// Contiguous sub-batch `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> ImageBatch {
        let end = (start + len).min(self.len());
        ImageBatch {
            data: self.data.slice(s![start..end, .., .., ..]).to_owned(),
            labels: self.labels[start..end].to_vec(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        ImageBatch {
            data: self.data.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Iterate over consecutive mini-batches (the last one may be short).
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = ImageBatch> + '_ {
        (0..self.len())
            .step_by(size.max(1))
            .map(move |start| self.slice(start, size))
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        array_to_tensor(&self.data, dtype, device)
    }

    pub fn labels_tensor(&self, device: &Device) -> Result<Tensor> {
        let labels: Vec<u32> = self.labels.iter().map(|&l| u32::from(l)).collect();
        Ok(Tensor::from_vec(labels, self.len(), device)?)
    }
}

pub fn array_to_tensor(data: &Array4<f32>, dtype: DType, device: &Device) -> Result<Tensor> {
    let shape = data.shape().to_vec();
    let flat: Vec<f32> = data.iter().copied().collect();
    Ok(Tensor::from_vec(flat, shape, device)?.to_dtype(dtype)?)
}

pub fn tensor_to_array(t: &Tensor) -> Result<Array4<f32>> {
    let dims = t.dims4()?;
    let flat: Vec<f32> = t
        .to_dtype(DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    Array4::from_shape_vec(dims, flat)
        .map_err(|e| Error::Config(format!("tensor to array: {e}")))
}
