//! Parameter and multiply-add counts of ResNet-18 and ResNet-18-SR.
//!
//! cargo run --release --example param_count

use candle_core::{DType, Device};
use siriib::complexity::count_overhead;
use siriib::{ArchitectureDescriptor, Classifier};

fn main() -> siriib::Result<()> {
    let base = Classifier::new(ArchitectureDescriptor::resnet18(10), DType::F32, &Device::Cpu, 0)?;
    let sr = Classifier::new(ArchitectureDescriptor::resnet18_sr(10), DType::F32, &Device::Cpu, 0)?;
    let overhead = count_overhead(&base, &sr);
    println!("{}", overhead.table()?.to_text());
    println!(
        "overhead: {:.2}% parameters, {:.2}% multiply-adds",
        100.0 * overhead.param_fraction(),
        100.0 * overhead.mac_fraction()
    );
    Ok(())
}
