//! Grey-box protocol: attack a fixed model, then classify the adversarial
//! images after a separately trained multiscale SR purifier.
//!
//! cargo run --release --example grey_box

use candle_core::{DType, Device};
use siriib::assembly::MultiScaleConfig;
use siriib::attacks::AttackConfig;
use siriib::backbone::BackboneConfig;
use siriib::data::synthetic;
use siriib::training::{
    adversarial_train, grey_box_sr_eval, train_purifier, PurifierTrainConfig, SrPurifier, TrainConfig, TrainSink,
};
use siriib::{ArchitectureDescriptor, Classifier};

fn main() -> siriib::Result<()> {
    // one draw, so both splits share the class templates
    let all = synthetic(160, 10, 32, 0)?;
    let (train, test) = (all.slice(0, 120), all.slice(120, 40));
    let mut desc = ArchitectureDescriptor::resnet18(10);
    desc.backbone = BackboneConfig::narrow(4, 10);
    let model = Classifier::new(desc, DType::F32, &Device::Cpu, 0)?;
    let mut config = TrainConfig::desk(6);
    config.batch_size = 20;
    config.attack = AttackConfig::train().with_steps(3);
    adversarial_train(&config, &model, &train, &TrainSink::default())?;

    let purifier = SrPurifier::new(&MultiScaleConfig::default(), 32, DType::F32, &Device::Cpu, 0)?;
    let pconfig = PurifierTrainConfig {
        batch_size: 20,
        attack: AttackConfig::train().with_steps(3),
        ..PurifierTrainConfig::default()
    };
    let losses = train_purifier(&purifier, &model, &train, &pconfig)?;
    println!("purifier loss per epoch: {losses:.3?}");
    let r = grey_box_sr_eval(&purifier, &model, &test, &AttackConfig::pgd20(), 20, 0)?;
    println!("clean:  x {:.1}%, x_avg {:.1}%", r.clean_x, r.clean_x_avg);
    println!("PGD-20: x_adv {:.1}%, x_avg {:.1}%", r.robust_x_adv, r.robust_x_avg);
    Ok(())
}
