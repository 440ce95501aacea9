//! Write a small synthetic dataset in the CIFAR-10 binary layout, so the CLI
//! and the examples can run without downloading anything.
//!
//! cargo run --release --example synthetic_dataset -- data/synthetic 1000 200

use std::path::PathBuf;

use siriib::data::{load_cifar10, write_synthetic_cifar10, DatasetSpec, Split};

fn main() -> siriib::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "data/synthetic".into()));
    let train: usize = args.next().map_or(1000, |v| v.parse().expect("train count"));
    let test: usize = args.next().map_or(200, |v| v.parse().expect("test count"));
    write_synthetic_cifar10(&dir, train, test, 0)?;
    let check = load_cifar10(&DatasetSpec::new(&dir, Split::Test))?;
    println!("wrote {train} training and {} test images to {}", check.len(), dir.display());
    Ok(())
}
