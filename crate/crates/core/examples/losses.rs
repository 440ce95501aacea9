//! The SiRIIB training terms on small tensors: L_svd between two images,
//! L_info between feature lists, and the weighted total.
//!
//! cargo run --release --example losses

use candle_core::{Device, Tensor};
use siriib::losses::{loss_info, loss_svd, polar_factor, singular_values};

fn main() -> siriib::Result<()> {
    let clean = Tensor::rand(0f64, 1f64, (2, 3, 8, 8), &Device::Cpu)?;
    let noise = Tensor::rand(-0.03f64, 0.03f64, (2, 3, 8, 8), &Device::Cpu)?;
    let noisy = (&clean + noise)?;

    println!("L_svd(x, x)       = {:.3e}", loss_svd(&clean, &clean)?.to_scalar::<f64>()?);
    println!("L_svd(x + n, x)   = {:.4}", loss_svd(&noisy, &clean)?.to_scalar::<f64>()?);
    println!("L_svd(2x, x)      = {:.4}", loss_svd(&(&clean * 2.0)?, &clean)?.to_scalar::<f64>()?);

    let sigma = singular_values(&clean.reshape((6, 8, 8))?)?;
    println!("σ of the first channel: {:.3?}", sigma.get(0)?.to_vec1::<f64>()?);
    let polar = polar_factor(&clean.reshape((6, 8, 8))?)?.get(0)?;
    let gram = polar.t()?.matmul(&polar)?;
    let eye = Tensor::eye(8, candle_core::DType::F64, &Device::Cpu)?;
    println!("max |(UVᵀ)ᵀ(UVᵀ) − I| = {:.1e}", (gram - eye)?.abs()?.max_all()?.to_scalar::<f64>()?);

    let f_clean = [Tensor::rand(0f64, 1f64, (2, 8, 4, 4), &Device::Cpu)?];
    let f_adv = [(&f_clean[0] + 0.1)?];
    println!("L_info(f + 0.1, f) = {:.4}", loss_info(&f_adv, &f_clean)?.to_scalar::<f64>()?);
    Ok(())
}
