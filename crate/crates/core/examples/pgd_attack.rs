//! PGD against a linear classifier, where every step can be checked by hand,
//! then against a small residual network under the standard presets.
//!
//! cargo run --release --example pgd_attack

use candle_core::{DType, Device, Tensor};
use siriib::attacks::{cw_margin, pgd_traced, AttackConfig};
use siriib::backbone::BackboneConfig;
use siriib::data::synthetic;
use siriib::nn::cross_entropy;
use siriib::training::evaluate_robustness;
use siriib::{ArchitectureDescriptor, Classifier};

fn main() -> siriib::Result<()> {
    let x = Tensor::rand(0f64, 1f64, (4, 3, 8, 8), &Device::Cpu)?;
    let y = Tensor::new(&[0u32, 1, 1, 0], &Device::Cpu)?;
    let w = Tensor::randn(0f64, 1f64, (192, 2), &Device::Cpu)?;
    let linear = |c: &Tensor| -> siriib::Result<Tensor> { Ok(c.reshape((4, 192))?.matmul(&w)?) };

    let cfg = AttackConfig::pgd20();
    let (x_adv, trace) = pgd_traced(&x, &cfg, 0, |c| cross_entropy(&linear(c)?, &y))?;
    let delta = (&x_adv - &x)?.abs()?.max_all()?.to_scalar::<f64>()?;
    println!("{}: ε = {:.4}, max |δ| = {delta:.4}", cfg.label(), cfg.epsilon);
    let shown: Vec<String> = trace.objectives.iter().step_by(5).map(|v| format!("{v:.3}")).collect();
    println!("cross-entropy along the path: {}", shown.join(" → "));
    println!("C&W margin at the end: {:.3}", cw_margin(&linear(&x_adv)?, &y)?.to_scalar::<f64>()?);

    let mut desc = ArchitectureDescriptor::resnet18(10);
    desc.backbone = BackboneConfig::narrow(8, 10);
    let model = Classifier::new(desc, DType::F32, &Device::Cpu, 0)?;
    let data = synthetic(20, 10, 32, 1)?;
    let attacks = [AttackConfig::pgd20(), AttackConfig::cw100().with_steps(20), AttackConfig::l2_pgd20()];
    let report = evaluate_robustness(&model, &data, &attacks, 10, 0)?;
    println!("untrained {}: clean {:.1}%", model.descriptor().name(), report.clean);
    for (label, acc) in &report.robust {
        println!("  {label}: {acc:.1}%");
    }
    Ok(())
}
