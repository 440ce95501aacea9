//! Build ResNet-18 with and without the SiRIIB branch and inspect one forward
//! pass: the compressed multiscale image x_avg, the injected features, and the
//! logits, which match the bare backbone while the projections are zero.
//!
//! cargo run --release --example siriib_forward

use candle_core::{DType, Device, Tensor};
use siriib::nn::Mode;
use siriib::{ArchitectureDescriptor, Classifier};

fn main() -> siriib::Result<()> {
    let base = Classifier::new(ArchitectureDescriptor::resnet18(10), DType::F32, &Device::Cpu, 0)?;
    let sr = Classifier::new(ArchitectureDescriptor::resnet18_sr(10), DType::F32, &Device::Cpu, 0)?;
    let x = Tensor::rand(0f32, 1f32, (2, 3, 32, 32), &Device::Cpu)?;

    let out = sr.forward(&x, Mode::Eval)?;
    let side = out.siriib.expect("instrumented model");
    let lo = side.x_avg.min_all()?.to_scalar::<f32>()?;
    let hi = side.x_avg.max_all()?.to_scalar::<f32>()?;
    println!("x_avg {:?} in [{lo:.4}, {hi:.4}]", side.x_avg.dims());
    for (i, f) in side.features.iter().enumerate() {
        println!("feature f{} {:?}", i + 1, f.dims());
    }
    let gap = (out.logits - base.logits(&x, Mode::Eval)?)?
        .abs()?
        .max_all()?
        .to_scalar::<f32>()?;
    println!("max |logits(SR) − logits(base)| at init: {gap:.2e}");
    println!("penalty {:.2e}", sr.orthogonality_penalty()?.expect("SR blocks").to_scalar::<f32>()?);
    Ok(())
}
