//! White-box attacks whose objective targets the SiRIIB loss terms, and the
//! range of x_avg seen along the way.
//!
//! cargo run --release --example adaptive_attacks

use candle_core::{DType, Device};
use siriib::attacks::{AttackConfig, Objective};
use siriib::backbone::BackboneConfig;
use siriib::data::synthetic;
use siriib::experiments::adaptive_attack_eval;
use siriib::training::{adversarial_train, TrainConfig, TrainSink};
use siriib::{ArchitectureDescriptor, Classifier};

fn main() -> siriib::Result<()> {
    // one draw, so both splits share the class templates
    let all = synthetic(100, 10, 32, 0)?;
    let (train, test) = (all.slice(0, 80), all.slice(80, 20));
    let mut desc = ArchitectureDescriptor::resnet18_sr(10);
    desc.backbone = BackboneConfig::narrow(4, 10);
    let model = Classifier::new(desc, DType::F32, &Device::Cpu, 0)?;
    let mut config = TrainConfig::desk(2);
    config.batch_size = 20;
    config.attack = AttackConfig::train().with_steps(2);
    adversarial_train(&config, &model, &train, &TrainSink::default())?;

    let objectives: Vec<Objective> = ["ce", "cw", "svd", "info", "ce+svd", "ce+info", "ce+svd+info"]
        .iter()
        .map(|s| s.parse())
        .collect::<siriib::Result<_>>()?;
    let report = adaptive_attack_eval(&model, &test, &objectives, 20, 0)?;
    println!("{}", report.table()?.to_text());
    println!(
        "x_avg over {} batches in [{:.4}, {:.4}], {} out-of-range batches",
        report.batches, report.x_avg_min, report.x_avg_max, report.range_violations
    );
    Ok(())
}
