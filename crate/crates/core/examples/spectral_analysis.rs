//! Per-channel SVD of images: round trip, Parseval's identity, and the
//! singular-value swap between a perturbed image and its clean original.
//!
//! cargo run --release --example spectral_analysis -- out/spectral

use std::path::PathBuf;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use siriib::data::synthetic;
use siriib::report::save_panel;
use siriib::spectral::{decompose, difference_map, parseval_residual, reconstruct, swap_singular_values};

fn main() -> siriib::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/spectral".into()));
    std::fs::create_dir_all(&out)?;
    let images = synthetic(4, 10, 32, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let eps = 8.0 / 255.0;
    for i in 0..images.len() {
        let clean = images.image_f64(i);
        // a random sign perturbation stands in for an attack here
        let noisy = Array3::from_shape_fn(clean.dim(), |idx| {
            (clean[idx] + if rng.random::<bool>() { eps } else { -eps }).clamp(0.0, 1.0)
        });
        let factors = decompose(&noisy)?;
        let back = reconstruct(&factors, false)?;
        let round = (&back - &noisy).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        let parseval = parseval_residual(&noisy)?;
        let swapped = swap_singular_values(&noisy, &clean)?;
        let sigma_gap: f64 = decompose(&clean)?
            .channels
            .iter()
            .zip(&factors.channels)
            .map(|(c, n)| (&c.sigma - &n.sigma).norm())
            .sum();
        println!(
            "image {i}: round trip {round:.1e}, Parseval {:.1e}, ‖σ_clean − σ_noisy‖ summed over channels {sigma_gap:.3}",
            parseval.iter().copied().fold(0.0, f64::max)
        );
        let shown = swapped.mapv(|v| v.clamp(0.0, 1.0) as f32);
        let diff = difference_map(&swapped, &noisy)?.mapv(|v| v as f32);
        let path = out.join(format!("swap-{i}.png"));
        save_panel(
            &path,
            &[clean.mapv(|v| v as f32).view(), noisy.mapv(|v| v as f32).view(), shown.view(), diff.view()],
            4,
        )?;
    }
    println!("panels (clean, perturbed, swapped, difference) in {}", out.display());
    Ok(())
}
