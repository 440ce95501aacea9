//! The desk protocol end to end on a tiny synthetic stand-in for CIFAR-10.
//! This checks the plumbing and the x_avg range, not the reported orderings.

use siriib::attacks::Objective;
use siriib::backbone::BackboneConfig;
use siriib::data::write_synthetic_cifar10;
use siriib::experiments::{run_desk_protocol, DeskProtocol};

#[test]
fn tiny_protocol_runs_and_keeps_x_avg_in_range() {
    let tmp = tempfile::tempdir().unwrap();
    write_synthetic_cifar10(tmp.path(), 40, 20, 3).unwrap();
    let protocol = DeskProtocol {
        train_subset: 20,
        eval_subset: 10,
        epochs: 1,
        seeds: vec![0],
        batch_size: 10,
        backbone: BackboneConfig::narrow(2, 10),
        ..DeskProtocol::new(tmp.path())
    };
    let out = tmp.path().join("out");
    std::fs::create_dir_all(&out).unwrap();
    let (results, verdict) = run_desk_protocol(&protocol, Some(&out)).unwrap();
    assert_eq!(results.len(), 1);
    let r = &results[0];
    for v in [r.swap_pgd20.robust, r.swap_pgd20.swapped, r.swap_cw100.robust, r.swap_cw100.swapped] {
        assert!((0.0..=100.0).contains(&v), "{v}");
    }
    for o in [Objective::Ce, Objective::Svd, Objective::Info] {
        assert!(r.adaptive.accuracy(o).is_some(), "{o}");
    }
    assert!(r.adaptive.x_avg_min > 0.0 && r.adaptive.x_avg_max < 1.0);
    assert!(verdict.x_avg_range);
    assert!(out.join("seed0-base-metrics.jsonl").exists());
    assert!(out.join("checkpoints/seed0-sr/final.safetensors").exists());
}
