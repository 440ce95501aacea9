//! Training objective terms for SiRIIB.
//!
//! `L_svd` compares singular values and the polar factor `U Vᵀ` rather than
//! `U` and `V` themselves. Both are invariant to the sign and rotation freedom
//! of the singular vectors, so their gradients stay finite on repeated
//! singular values; only rank deficiency (`σ_i + σ_j = 0`) needs guarding.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{f64_to_storage, row_norms, storage_to_f64};
use crate::spectral::svd_matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of `L_svd + L_info`.
    pub lambda1: f64,
    /// Weight of the orthogonality penalty.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 20.0,
            lambda2: 1e-4,
        }
    }
}

impl LossWeights {
    pub const NONE: LossWeights = LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-matrix SVD of a `(m, n, n)` batch, row-major.
fn batch_svd(values: &[f64], n: usize) -> Result<Vec<crate::spectral::ChannelSvd>> {
    values
        .chunks(n * n)
        .map(|m| svd_matrix(DMatrix::from_row_slice(n, n, m)))
        .collect()
}

fn square_dims(shape: &Shape) -> candle_core::Result<(usize, usize)> {
    let (m, r, c) = shape.dims3()?;
    if r != c {
        return Err(candle_core::Error::wrap(Error::NonSquare { rows: r, cols: c }));
    }
    Ok((m, r))
}

fn host_f64(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()
}

fn push_row_major(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
}

/// Singular values of each matrix in a `(m, n, n)` batch, non-increasing.
struct SingularValues;

impl CustomOp1 for SingularValues {
    fn name(&self) -> &'static str {
        "singular-values"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (m, n) = square_dims(layout.shape())?;
        let values = storage_to_f64(storage, layout).map_err(candle_core::Error::wrap)?;
        let svds = batch_svd(&values, n).map_err(candle_core::Error::wrap)?;
        let out = svds.iter().flat_map(|s| s.sigma.iter().copied()).collect();
        Ok((f64_to_storage(out, storage), Shape::from((m, n))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        // dσ_k = u_kᵀ dX v_k
        let (m, n) = square_dims(arg.shape())?;
        let svds = batch_svd(&host_f64(arg)?, n).map_err(candle_core::Error::wrap)?;
        let g = host_f64(grad)?;
        let mut out = Vec::with_capacity(m * n * n);
        for (s, g) in svds.iter().zip(g.chunks(n)) {
            let d = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(g));
            push_row_major(&mut out, &(&s.u * d * &s.vt));
        }
        Ok(Some(
            Tensor::from_vec(out, (m, n, n), arg.device())?.to_dtype(arg.dtype())?,
        ))
    }
}

/// Orthogonal polar factor `U Vᵀ` of each matrix in a `(m, n, n)` batch.
struct PolarFactor;

impl CustomOp1 for PolarFactor {
    fn name(&self) -> &'static str {
        "polar-factor"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (m, n) = square_dims(layout.shape())?;
        let values = storage_to_f64(storage, layout).map_err(candle_core::Error::wrap)?;
        let svds = batch_svd(&values, n).map_err(candle_core::Error::wrap)?;
        let mut out = Vec::with_capacity(m * n * n);
        for s in &svds {
            push_row_major(&mut out, &s.polar());
        }
        Ok((f64_to_storage(out, storage), Shape::from((m, n, n))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        // dQ = U Ω Vᵀ with Ω_ij = (P_ij - P_ji) / (σ_i + σ_j), P = Uᵀ dX V,
        // so the adjoint is U (F ∘ (M - Mᵀ)) Vᵀ with M = Uᵀ G V.
        let (m, n) = square_dims(arg.shape())?;
        let svds = batch_svd(&host_f64(arg)?, n).map_err(candle_core::Error::wrap)?;
        let g = host_f64(grad)?;
        let mut out = Vec::with_capacity(m * n * n);
        for (s, g) in svds.iter().zip(g.chunks(n * n)) {
            let g = DMatrix::from_row_slice(n, n, g);
            let v = s.vt.transpose();
            let mm = s.u.transpose() * g * &v;
            let floor = s.sigma[0].max(f64::MIN_POSITIVE) * 1e-12;
            let inner = DMatrix::from_fn(n, n, |i, j| {
                let denom = s.sigma[i] + s.sigma[j];
                if denom > floor {
                    (mm[(i, j)] - mm[(j, i)]) / denom
                } else {
                    0.0
                }
            });
            push_row_major(&mut out, &(&s.u * inner * s.vt.clone()));
        }
        Ok(Some(
            Tensor::from_vec(out, (m, n, n), arg.device())?.to_dtype(arg.dtype())?,
        ))
    }
}

fn ensure_finite(t: &Tensor, what: &'static str) -> Result<()> {
    let s = t.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { what })
    }
}

pub fn singular_values(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SingularValues)?)
}

pub fn polar_factor(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(PolarFactor)?)
}

/// Spectral calibration loss between `x_avg` and the clean image, per channel:
/// `‖σ_a − σ_c‖ + ‖U_aV_aᵀ − U_cV_cᵀ‖_F + ‖x_a − x_c‖_F`, channel-summed and
/// batch-averaged. The clean side is a constant.
pub fn loss_svd(x_avg: &Tensor, x_clean: &Tensor) -> Result<Tensor> {
    if x_avg.dims() != x_clean.dims() {
        return Err(Error::shape("loss_svd", x_avg.dims(), x_clean.dims()));
    }
    let (b, c, h, w) = x_avg.dims4()?;
    if h != w {
        return Err(Error::NonSquare { rows: h, cols: w });
    }
    ensure_finite(x_avg, "x_avg")?;
    ensure_finite(x_clean, "clean reference")?;
    let a = x_avg.reshape((b * c, h, w))?;
    let r = x_clean.detach().reshape((b * c, h, w))?;
    let sigma = row_norms(&singular_values(&a)?.sub(&singular_values(&r)?.detach())?)?;
    let polar = row_norms(
        &polar_factor(&a)?
            .sub(&polar_factor(&r)?.detach())?
            .reshape((b * c, h * w))?,
    )?;
    let pixel = row_norms(&a.sub(&r)?.reshape((b * c, h * w))?)?;
    Ok((sigma.add(&polar)?.add(&pixel)?.sum_all()? / b as f64)?)
}

/// Feature calibration loss `Σ_i ‖f_i − f_i^clean‖_F`, batch-averaged, with
/// the clean features treated as constants.
pub fn loss_info(f_adv: &[Tensor], f_clean: &[Tensor]) -> Result<Tensor> {
    if f_adv.len() != f_clean.len() || f_adv.is_empty() {
        return Err(Error::shape("loss_info feature lists", &[f_adv.len()], &[f_clean.len()]));
    }
    let b = f_adv[0].dims()[0];
    let mut total: Option<Tensor> = None;
    for (a, c) in f_adv.iter().zip(f_clean) {
        if a.dims() != c.dims() || a.dims()[0] != b {
            return Err(Error::shape("loss_info feature", a.dims(), c.dims()));
        }
        let per = row_norms(&a.sub(&c.detach())?.reshape((b, ()))?)?.sum_all()?;
        total = Some(match total {
            Some(t) => t.add(&per)?,
            None => per,
        });
    }
    Ok((total.expect("non-empty") / b as f64)?)
}

/// `L_ori + λ1 (L_svd + L_info) + λ2 R`.
pub fn total_loss(
    l_ori: &Tensor,
    l_svd: Option<&Tensor>,
    l_info: Option<&Tensor>,
    penalty: Option<&Tensor>,
    weights: LossWeights,
) -> Result<Tensor> {
    let mut total = l_ori.clone();
    if weights.lambda1 != 0.0 {
        for term in [l_svd, l_info].into_iter().flatten() {
            total = total.add(&(term * weights.lambda1)?)?;
        }
    }
    if let (Some(p), true) = (penalty, weights.lambda2 != 0.0) {
        total = total.add(&(p * weights.lambda2)?)?;
    }
    Ok(total)
}
