//! The SR block on its own: the orthogonal channel transform keeps the
//! singular values of the channel-flattened input, the Fourier modulator
//! starts as the identity, and the penalty measures drift from orthonormality.
//!
//! cargo run --release --example sr_block

use candle_core::{DType, Device, Tensor};
use nalgebra::DMatrix;
use siriib::nn::{Mode, ParamStore};
use siriib::sr::{orthogonality_penalty, SrBlock};

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn main() -> siriib::Result<()> {
    let mut store = ParamStore::new(DType::F64, Device::Cpu, 0);
    let block = SrBlock::new(&mut store, "sr", 16)?;
    let x = Tensor::rand(0f64, 1f64, (1, 3, 16, 16), &Device::Cpu)?;

    let y = block.orthogonal.apply(&x)?;
    let sx = DMatrix::from_row_slice(3, 256, &flat(&x)).singular_values();
    let sy = DMatrix::from_row_slice(12, 256, &flat(&y)).singular_values();
    let mut sy: Vec<f64> = sy.iter().copied().collect();
    sy.sort_by(|a, b| b.total_cmp(a));
    println!("input σ            {:?}", sx.as_slice());
    println!("after W (top 3)    {:?}", &sy[..3]);

    let same = block.fourier.apply(&x)?;
    let gap = flat(&(same - &x)?.abs()?.max_all()?.reshape(1)?)[0];
    println!("modulator at init: max |F⁻¹(M ⊙ F(x)) − x| = {gap:.2e}");

    let w = block.orthogonal.weight.as_tensor();
    println!("R(W) at init       {:.2e}", orthogonality_penalty(w)?.to_scalar::<f64>()?);
    println!("R(2W)              {:.3}", orthogonality_penalty(&(w * 2.0)?)?.to_scalar::<f64>()?);

    let out = block.forward(&x, Mode::Eval)?;
    println!("block output shape {:?}, penalty {:.2e}", out.dims(), block.penalty()?.to_scalar::<f64>()?);
    Ok(())
}
