//! Sweep λ1 and the number of injected projections on a narrow model.
//!
//! cargo run --release --example ablation

use siriib::attacks::AttackConfig;
use siriib::backbone::BackboneConfig;
use siriib::data::synthetic;
use siriib::experiments::{run_ablation, AblationAxis, AblationConfig};
use siriib::training::TrainConfig;
use siriib::ArchitectureDescriptor;

fn main() -> siriib::Result<()> {
    // one draw, so both splits share the class templates
    let all = synthetic(80, 10, 32, 0)?;
    let (train, test) = (all.slice(0, 60), all.slice(60, 20));
    let mut descriptor = ArchitectureDescriptor::resnet18_sr(10);
    descriptor.backbone = BackboneConfig::narrow(4, 10);
    let mut train_cfg = TrainConfig::desk(1);
    train_cfg.batch_size = 30;
    train_cfg.attack = AttackConfig::train().with_steps(2);

    for axis in [AblationAxis::Lambda1(vec![1.0, 5.0, 20.0]), AblationAxis::Projections(vec![1, 2, 3])] {
        let config = AblationConfig {
            axis,
            train: train_cfg.clone(),
            descriptor: descriptor.clone(),
            attack: AttackConfig::pgd20().with_steps(5),
            eval_batch: 20,
        };
        println!("{}", run_ablation(&config, &train, &test, None)?.to_text());
    }
    Ok(())
}
