//! Store adversarial examples in the npy archive format, read them back,
//! check the declared budget, and reproduce the robust accuracy from disk.
//!
//! cargo run --release --example archive_roundtrip -- out/archive

use std::path::PathBuf;

use candle_core::{DType, Device};
use siriib::archive::{AdversarialArchive, ArchiveMeta, ARCHIVE_VERSION};
use siriib::attacks::AttackConfig;
use siriib::backbone::BackboneConfig;
use siriib::data::synthetic;
use siriib::experiments::attack_dataset;
use siriib::training::{clean_accuracy, robust_accuracy};
use siriib::{ArchitectureDescriptor, Classifier};

fn main() -> siriib::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/archive".into()));
    let mut desc = ArchitectureDescriptor::resnet18(10);
    desc.backbone = BackboneConfig::narrow(8, 10);
    let model = Classifier::new(desc, DType::F32, &Device::Cpu, 0)?;
    let data = synthetic(30, 10, 32, 1)?;
    let attack = AttackConfig::pgd20();

    let archive = AdversarialArchive {
        meta: ArchiveMeta {
            format_version: ARCHIVE_VERSION,
            norm: attack.norm,
            epsilon: attack.epsilon,
            attack: attack.label(),
        },
        batch: attack_dataset(&model, &data, &attack, 10, 7)?,
    };
    archive.write(&dir)?;

    let back = AdversarialArchive::read(&dir)?;
    let budget = back.validate(&data)?;
    println!(
        "{} samples, max perturbation {:.5} (ε {:.5}), {} violations",
        back.batch.len(),
        budget.max_perturbation,
        back.meta.epsilon,
        budget.violations.len()
    );
    let live = robust_accuracy(&model, &data, &attack, 10, 7)?;
    let stored = clean_accuracy(&model, &back.batch, 10)?;
    println!("robust accuracy: attacked live {live:.1}%, from archive {stored:.1}%");
    Ok(())
}
