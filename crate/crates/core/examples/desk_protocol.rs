//! The short-schedule directional check: PGD-AT of ResNet-18 and
//! ResNet-18-SR per seed, the singular-value swap under PGD-20 and C&W-100,
//! and the adaptive-attack ordering.
//!
//! With CIFAR-10 binaries in a directory this runs the full protocol
//! (4,096 training images, 10 epochs, three seeds; many CPU hours):
//!
//! cargo run --release --example desk_protocol -- data/cifar-10-batches-bin
//!
//! Extra arguments shrink it for a quick look:
//! `<dir> <train subset> <eval subset> <epochs> <width> <seeds>`.

use std::path::PathBuf;

use siriib::backbone::BackboneConfig;
use siriib::experiments::{run_desk_protocol, DeskProtocol};

fn main() -> siriib::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let dir = PathBuf::from(args.first().cloned().unwrap_or_else(|| "data/cifar-10-batches-bin".into()));
    let mut protocol = DeskProtocol::new(&dir);
    let num = |i: usize| args.get(i).map(|v| v.parse::<usize>().expect("numeric argument"));
    if let Some(n) = num(1) {
        protocol.train_subset = n;
    }
    if let Some(n) = num(2) {
        protocol.eval_subset = n;
    }
    if let Some(n) = num(3) {
        protocol.epochs = n;
    }
    if let Some(w) = num(4) {
        protocol.backbone = BackboneConfig::narrow(w, 10);
    }
    if let Some(s) = num(5) {
        protocol.seeds = (0..s as u64).collect();
    }
    let out = PathBuf::from("out/desk");
    std::fs::create_dir_all(&out)?;
    let (results, verdict) = run_desk_protocol(&protocol, Some(&out))?;
    for r in &results {
        println!(
            "seed {}: PGD-20 {:.1} → {:.1} ({:+.1}), CW-100 {:.1} → {:.1} ({:+.1}), {:.0}s",
            r.seed,
            r.swap_pgd20.robust,
            r.swap_pgd20.swapped,
            r.swap_pgd20.gain(),
            r.swap_cw100.robust,
            r.swap_cw100.swapped,
            r.swap_cw100.gain(),
            r.seconds
        );
        println!("{}", r.adaptive.table()?.to_text());
    }
    println!("{verdict:?}");
    std::fs::write(out.join("desk.json"), serde_json::to_string_pretty(&(results, verdict))?)?;
    Ok(())
}
