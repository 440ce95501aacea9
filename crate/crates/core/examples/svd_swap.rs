//! Train a bare narrow ResNet-18 adversarially on synthetic data, attack it,
//! and classify the adversarial images after giving them back the clean
//! singular values.
//!
//! cargo run --release --example svd_swap -- out/swap

use std::path::PathBuf;

use candle_core::{DType, Device};
use siriib::attacks::AttackConfig;
use siriib::backbone::BackboneConfig;
use siriib::data::synthetic;
use siriib::experiments::swap_panels;
use siriib::training::{adversarial_train, svd_swap_experiment, TrainConfig, TrainSink};
use siriib::{ArchitectureDescriptor, Classifier};

fn main() -> siriib::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/swap".into()));
    // one draw, so both splits share the class templates
    let all = synthetic(250, 10, 32, 0)?;
    let (train, test) = (all.slice(0, 200), all.slice(200, 50));
    let mut desc = ArchitectureDescriptor::resnet18(10);
    desc.backbone = BackboneConfig::narrow(4, 10);
    let model = Classifier::new(desc, DType::F32, &Device::Cpu, 0)?;
    let mut config = TrainConfig::desk(6);
    config.batch_size = 20;
    config.attack = AttackConfig::train().with_steps(3);
    adversarial_train(&config, &model, &train, &TrainSink::default())?;

    for attack in [AttackConfig::pgd20(), AttackConfig::cw100()] {
        let r = svd_swap_experiment(&model, &test, &attack, 25, 0)?;
        println!("{}: robust {:.1}%, swapped {:.1}%, gain {:+.1}", attack.label(), r.robust, r.swapped, r.gain());
    }
    let paths = swap_panels(&model, &test.slice(0, 4), &AttackConfig::pgd20(), 0, &out)?;
    println!("{} panels (x, x_adv, swapped, difference) in {}", paths.len(), out.display());
    Ok(())
}
