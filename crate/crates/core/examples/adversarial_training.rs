//! PGD adversarial training of a narrow ResNet-18-SR on synthetic data, with
//! per-epoch metrics, checkpoints, and a reload of the final checkpoint.
//!
//! cargo run --release --example adversarial_training -- out/train 3

use std::path::PathBuf;

use candle_core::{DType, Device};
use siriib::attacks::AttackConfig;
use siriib::backbone::BackboneConfig;
use siriib::checkpoint::load_checkpoint;
use siriib::data::synthetic;
use siriib::report::MetricsLog;
use siriib::training::{adversarial_train, evaluate_robustness, TrainConfig, TrainSink};
use siriib::{ArchitectureDescriptor, Classifier};

fn main() -> siriib::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/train".into()));
    let epochs: usize = args.next().map_or(3, |v| v.parse().expect("epochs"));
    std::fs::create_dir_all(&out)?;

    // one draw, so both splits share the class templates
    let all = synthetic(160, 10, 32, 0)?;
    let (train, test) = (all.slice(0, 120), all.slice(120, 40));
    let mut desc = ArchitectureDescriptor::resnet18_sr(10);
    desc.backbone = BackboneConfig::narrow(4, 10);
    let model = Classifier::new(desc, DType::F32, &Device::Cpu, 0)?;

    let mut config = TrainConfig::desk(epochs);
    config.batch_size = 20;
    config.attack = AttackConfig::train().with_steps(3);
    let sink = TrainSink {
        metrics: Some(MetricsLog::create(&out.join("metrics.jsonl"))?),
        checkpoint_dir: Some(out.join("checkpoints")),
    };
    for m in adversarial_train(&config, &model, &train, &sink)? {
        println!(
            "epoch {} lr {:.3}: loss {:.3} (CE {:.3}, L_svd {:.3}, L_info {:.3}), adversarial acc {:.1}%, x_avg in {:?}",
            m.epoch,
            m.lr,
            m.loss,
            m.loss_ori,
            m.loss_svd.unwrap_or(0.0),
            m.loss_info.unwrap_or(0.0),
            m.adv_accuracy,
            m.x_avg_range.unwrap_or_default()
        );
    }

    let restored = load_checkpoint(&out.join("checkpoints/final.safetensors"))?.build(&Device::Cpu)?;
    let attacks = [AttackConfig::pgd20()];
    let a = evaluate_robustness(&model, &test, &attacks, 20, 0)?;
    let b = evaluate_robustness(&restored, &test, &attacks, 20, 0)?;
    println!("trained:  {a:?}\nrestored: {b:?}");
    assert_eq!(a, b);
    Ok(())
}
