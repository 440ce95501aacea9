//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Criterion 7 needs the CIFAR-10 binary files; point `SIRIIB_CIFAR10_DIR` at
//! the directory holding `data_batch_*.bin` and `test_batch.bin`.

use std::path::PathBuf;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use nalgebra::DMatrix;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use siriib::attacks::{pgd, pgd_traced, AttackConfig};
use siriib::checkpoint::{load_checkpoint, save_checkpoint};
use siriib::complexity::count_overhead;
use siriib::data::synthetic;
use siriib::experiments::{run_desk_protocol, DeskProtocol};
use siriib::losses::{loss_info, loss_svd};
use siriib::nn::{cross_entropy, Mode, ParamStore};
use siriib::spectral::{decompose, parseval_residual, reconstruct, swap_singular_values};
use siriib::sr::{orthogonality_penalty, FourierModulator, OrthogonalTransform, SrBlock};
use siriib::training::{adversarial_train, evaluate_robustness, TrainConfig, TrainSink};
use siriib::{ArchitectureDescriptor, Classifier};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn random_image(rng: &mut ChaCha8Rng, c: usize, n: usize) -> Array3<f64> {
    Array3::from_shape_fn((c, n, n), |_| rng.random::<f64>())
}

fn tensor(values: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(values, shape, &Device::Cpu).unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_1() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut round, mut parseval, mut swap) = (0f64, 0f64, 0f64);
    for _ in 0..100 {
        let x = random_image(&mut rng, 3, 32);
        let back = reconstruct(&decompose(&x).map_err(e)?, false).map_err(e)?;
        round = round.max((&back - &x).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b)));
        parseval = parseval_residual(&x).map_err(e)?.into_iter().fold(parseval, f64::max);
        let s = swap_singular_values(&x, &x).map_err(e)?;
        swap = swap.max((&s - &x).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b)));
    }
    let secs = started.elapsed().as_secs_f64();
    let msg = format!("round-trip {round:.2e}, Parseval {parseval:.2e}, swap(x,x) {swap:.2e}, {secs:.2}s");
    ensure(round <= 1e-5 && parseval <= 1e-6 && swap <= 1e-5 && secs < 10.0, msg.clone())?;
    Ok(msg)
}

fn criterion_2() -> Check {
    let mut store = ParamStore::new(DType::F64, Device::Cpu, 2);
    let orth = OrthogonalTransform::new(&mut store, "o", 3, 12).map_err(e)?;
    let w = flat(orth.weight.as_tensor());
    let wm = DMatrix::from_row_slice(12, 3, &w);
    let gram_err = (wm.transpose() * &wm - DMatrix::<f64>::identity(3, 3)).abs().max();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0f64;
    for _ in 0..20 {
        let x: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.random::<f64>()).collect();
        let y = flat(&orth.apply(&tensor(x.clone(), &[1, 3, 16, 16])).map_err(e)?);
        let sx = DMatrix::from_row_slice(3, 256, &x).singular_values();
        let sy = DMatrix::from_row_slice(12, 256, &y).singular_values();
        let mut sy: Vec<f64> = sy.iter().copied().collect();
        sy.sort_by(|a, b| b.total_cmp(a));
        let mut sx: Vec<f64> = sx.iter().copied().collect();
        sx.sort_by(|a, b| b.total_cmp(a));
        worst = worst.max(max_abs_diff(&sx, &sy[..3]));
    }
    let mut embed = vec![0.0; 36];
    for i in 0..3 {
        embed[i * 3 + i] = 1.0;
    }
    let r0 = orthogonality_penalty(&tensor(embed.clone(), &[12, 3])).map_err(e)?.to_scalar::<f64>().map_err(e)?;
    let doubled: Vec<f64> = embed.iter().map(|v| 2.0 * v).collect();
    let r2 = orthogonality_penalty(&tensor(doubled, &[12, 3])).map_err(e)?.to_scalar::<f64>().map_err(e)?;
    let msg = format!("max σ mismatch {worst:.2e} (|WᵀW−I| {gram_err:.1e}), R(embed I)={r0}, R(2·embed I)={r2}");
    ensure(worst <= 1e-4 && r0 == 0.0 && r2 == 27.0, msg.clone())?;
    Ok(msg)
}

fn criterion_3() -> Check {
    let mut store = ParamStore::new(DType::F64, Device::Cpu, 4);
    let fourier = FourierModulator::new(&mut store, "f", 3, 32).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..2 * 3 * 32 * 32).map(|_| rng.random::<f64>()).collect();
    let y = flat(&fourier.apply(&tensor(x.clone(), &[2, 3, 32, 32])).map_err(e)?);
    let identity = max_abs_diff(&x, &y);

    let base = Classifier::new(ArchitectureDescriptor::resnet18(10), DType::F32, &Device::Cpu, 5).map_err(e)?;
    let inst = Classifier::new(ArchitectureDescriptor::resnet18_sr(10), DType::F32, &Device::Cpu, 5).map_err(e)?;
    let img = Tensor::rand(0f32, 1f32, (2, 3, 32, 32), &Device::Cpu).map_err(e)?;
    let a = flat(&base.logits(&img, Mode::Eval).map_err(e)?);
    let b = flat(&inst.logits(&img, Mode::Eval).map_err(e)?);
    let logits = max_abs_diff(&a, &b);
    let msg = format!("modulator identity {identity:.2e}, logits base vs SR {logits:.2e}");
    ensure(identity <= 1e-5 && logits <= 1e-6, msg.clone())?;
    Ok(msg)
}

/// Relative error between the autodiff gradient of `f` at `x0` and central
/// differences, as `|g − g_fd| / max(|g_fd|, 1e-12)` over the whole vector.
fn fd_relative_error(x0: &[f64], shape: &[usize], f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let var = Var::from_tensor(&tensor(x0.to_vec(), shape)).unwrap();
    let out = f(var.as_tensor());
    let grad = flat(out.backward().unwrap().get(var.as_tensor()).unwrap());
    let h = 1e-6;
    let value = |v: Vec<f64>| f(&tensor(v, shape)).to_scalar::<f64>().unwrap();
    let fd: Vec<f64> = (0..x0.len())
        .map(|i| {
            let (mut p, mut m) = (x0.to_vec(), x0.to_vec());
            p[i] += h;
            m[i] -= h;
            (value(p) - value(m)) / (2.0 * h)
        })
        .collect();
    let num = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den = fd.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-12);
    num / den
}

/// Same measure for a parameter, perturbed in place through `Var::set`.
fn fd_param_error(var: &Var, f: impl Fn() -> Tensor) -> f64 {
    let x0 = flat(var.as_tensor());
    let shape = var.dims().to_vec();
    let grad = flat(f().backward().unwrap().get(var.as_tensor()).unwrap());
    let h = 1e-6;
    let value = |v: Vec<f64>| {
        var.set(&tensor(v, &shape)).unwrap();
        f().to_scalar::<f64>().unwrap()
    };
    let fd: Vec<f64> = (0..x0.len())
        .map(|i| {
            let (mut p, mut m) = (x0.clone(), x0.clone());
            p[i] += h;
            m[i] -= h;
            (value(p) - value(m)) / (2.0 * h)
        })
        .collect();
    var.set(&tensor(x0, &shape)).unwrap();
    let num = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    num / fd.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-12)
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random::<f64>()).collect() };

    let shape = [2, 3, 5, 5];
    let clean = tensor(draw(150), &shape);
    let svd = fd_relative_error(&draw(150), &shape, |x| loss_svd(x, &clean).unwrap());

    let f_clean = [tensor(draw(2 * 4 * 3 * 3), &[2, 4, 3, 3]), tensor(draw(2 * 2 * 2 * 2), &[2, 2, 2, 2])];
    let second = tensor(draw(16), &[2, 2, 2, 2]);
    let info = fd_relative_error(&draw(72), &[2, 4, 3, 3], |f| {
        loss_info(&[f.clone(), second.clone()], &f_clean).unwrap()
    });

    let penalty = fd_relative_error(&draw(36), &[12, 3], |w| orthogonality_penalty(w).unwrap());

    let mut store = ParamStore::new(DType::F64, Device::Cpu, 7);
    let block = SrBlock::new(&mut store, "sr", 4).map_err(e)?;
    // move the modulator away from the identity so both branches matter
    block.fourier.real.set(&tensor(draw(48), &[3, 4, 4])).map_err(e)?;
    block.fourier.imag.set(&tensor(draw(48), &[3, 4, 4])).map_err(e)?;
    let weights = tensor(draw(2 * 3 * 16), &[2, 3, 4, 4]);
    let sr = fd_relative_error(&draw(96), &[2, 3, 4, 4], |x| {
        block.forward(x, Mode::Eval).unwrap().mul(&weights).unwrap().sum_all().unwrap()
    });
    let x_fixed = tensor(draw(96), &[2, 3, 4, 4]);
    let block_out = || block.forward(&x_fixed, Mode::Eval).unwrap().mul(&weights).unwrap().sum_all().unwrap();
    let sr_params = [
        &block.orthogonal.weight,
        &block.fourier.real,
        &block.fourier.imag,
        &block.fusion.weight,
    ]
    .into_iter()
    .map(|v| fd_param_error(v, block_out))
    .fold(0.0, f64::max);

    let worst = [svd, info, penalty, sr, sr_params].into_iter().fold(0.0, f64::max);
    let msg = format!(
        "relative errors: L_svd {svd:.1e}, L_info {info:.1e}, R {penalty:.1e}, SR block input {sr:.1e}, SR block params {sr_params:.1e}"
    );
    ensure(worst <= 1e-3, msg.clone())?;
    Ok(msg)
}

/// Two-class linear model on flattened inputs.
struct Linear2 {
    w: Vec<f64>,
    b: [f64; 2],
}

impl Linear2 {
    fn ce(&self, x: &Tensor, y: &Tensor) -> siriib::Result<Tensor> {
        let n = x.dims()[0];
        let d = self.w.len() / 2;
        let w = Tensor::from_vec(self.w.clone(), (2, d), x.device())?.to_dtype(x.dtype())?;
        let b = Tensor::new(&self.b, x.device())?.to_dtype(x.dtype())?;
        let z = x.reshape((n, d))?.matmul(&w.t()?)?.broadcast_add(&b)?;
        cross_entropy(&z, y)
    }

    fn grad(&self, x: &[f64], y: usize, n: usize) -> Vec<f64> {
        let d = x.len();
        let z: Vec<f64> = (0..2)
            .map(|k| self.b[k] + (0..d).map(|j| self.w[k * d + j] * x[j]).sum::<f64>())
            .collect();
        let m = z[0].max(z[1]);
        let ex: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s = ex[0] + ex[1];
        let p = [ex[0] / s - f64::from(y == 0), ex[1] / s - f64::from(y == 1)];
        (0..d).map(|j| (p[0] * self.w[j] + p[1] * self.w[d + j]) / n as f64).collect()
    }
}

fn criterion_5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = Linear2 {
        w: (0..96).map(|_| rng.random::<f64>() - 0.5).collect(),
        b: [0.1, -0.2],
    };
    let labels = [0usize, 1, 1, 0];
    let y = Tensor::new(&[0u32, 1, 1, 0], &Device::Cpu).map_err(e)?;
    let x = tensor((0..4 * 48).map(|_| rng.random::<f64>()).collect(), &[4, 3, 4, 4]);
    let xs = flat(&x);

    // every iterate of a random-start run stays in the ball and the box
    let cfg = AttackConfig::pgd20();
    let (_, trace) = pgd_traced(&x, &cfg, 9, |c| model.ce(c, &y)).map_err(e)?;
    let ulp = f64::EPSILON;
    let mut ball = 0f64;
    let mut in_box = true;
    for it in &trace.iterates {
        let v = flat(it);
        ball = ball.max(max_abs_diff(&v, &xs));
        in_box &= v.iter().all(|p| (0.0..=1.0).contains(p));
    }
    ensure(ball <= cfg.epsilon + ulp && in_box, format!("projection: max |δ| {ball:.3e} vs ε {:.3e}, in box {in_box}", cfg.epsilon))?;

    let fixed = |steps: usize| AttackConfig {
        random_start: false,
        ..AttackConfig::pgd20().with_steps(steps)
    };
    let zero_steps = max_abs_diff(&flat(&pgd(&x, &fixed(0), 0, |c| model.ce(c, &y)).map_err(e)?), &xs);
    let zero_eps = max_abs_diff(
        &flat(&pgd(&x, &AttackConfig::pgd20().with_epsilon(0.0), 0, |c| model.ce(c, &y)).map_err(e)?),
        &xs,
    );
    ensure(zero_steps == 0.0 && zero_eps == 0.0, format!("identities: {zero_steps:e}, {zero_eps:e}"))?;

    let one = flat(&pgd(&x, &fixed(1), 0, |c| model.ce(c, &y)).map_err(e)?);
    let mut closed = 0f64;
    for (i, label) in labels.iter().enumerate() {
        let row = &xs[i * 48..(i + 1) * 48];
        let g = model.grad(row, *label, 4);
        for j in 0..48 {
            let expected = (row[j] + cfg.step_size * g[j].signum()).clamp(0.0, 1.0);
            closed = closed.max((expected - one[i * 48 + j]).abs());
        }
    }
    let (_, mono) = pgd_traced(&x, &fixed(15), 0, |c| model.ce(c, &y)).map_err(e)?;
    let monotone = mono.objectives.windows(2).all(|w| w[1] >= w[0]);
    let msg = format!("max |δ| {ball:.3e} ≤ ε, identities exact, one-step error {closed:.1e}, monotone {monotone}");
    ensure(closed <= 1e-6 && monotone, msg.clone())?;
    Ok(msg)
}

fn criterion_6() -> Check {
    let base = Classifier::new(ArchitectureDescriptor::resnet18(10), DType::F32, &Device::Cpu, 0).map_err(e)?;
    let inst = Classifier::new(ArchitectureDescriptor::resnet18_sr(10), DType::F32, &Device::Cpu, 0).map_err(e)?;
    let over = count_overhead(&base, &inst);
    let base = over.base.params_millions();
    let frac = 100.0 * over.param_fraction();
    let msg = format!("ResNet-18 {base:.2} M params, SiRIIB overhead {frac:.2}%");
    ensure((base - 11.17).abs() <= 0.01 * 11.17 && (0.5..=2.5).contains(&frac), msg.clone())?;
    Ok(msg)
}

fn criterion_7() -> Check {
    let Some(dir) = std::env::var_os("SIRIIB_CIFAR10_DIR").map(PathBuf::from) else {
        return Err("not run: CIFAR-10 binaries unavailable (set SIRIIB_CIFAR10_DIR)".into());
    };
    let started = Instant::now();
    let protocol = DeskProtocol::new(dir);
    let (results, verdict) = run_desk_protocol(&protocol, None).map_err(e)?;
    let hours = started.elapsed().as_secs_f64() / 3600.0;
    let mut msg = format!("{} seeds in {hours:.2} h; {verdict:?}", results.len());
    for r in &results {
        msg.push_str(&format!(
            "; seed {}: PGD-20 {:.1}->{:.1}, CW-100 {:.1}->{:.1}",
            r.seed, r.swap_pgd20.robust, r.swap_pgd20.swapped, r.swap_cw100.robust, r.swap_cw100.swapped
        ));
    }
    let ok = verdict.swap_ordering && verdict.adaptive_ordering && verdict.x_avg_range && hours <= 4.0;
    ensure(ok, msg.clone())?;
    Ok(msg)
}

fn small_descriptor() -> ArchitectureDescriptor {
    let mut d = ArchitectureDescriptor::resnet18_sr(10);
    d.backbone = siriib::backbone::BackboneConfig::narrow(4, 10);
    d
}

fn criterion_8() -> Check {
    let all = synthetic(68, 10, 32, 11).map_err(e)?;
    let (data, eval) = (all.slice(0, 48), all.slice(48, 20));
    let mut cfg = TrainConfig::desk(2);
    cfg.batch_size = 16;
    cfg.attack = AttackConfig::train().with_steps(2);
    cfg.seed = 13;
    let run = || -> siriib::Result<(Classifier, Vec<siriib::training::EpochMetrics>)> {
        let model = Classifier::new(small_descriptor(), DType::F32, &Device::Cpu, 13)?;
        let history = adversarial_train(&cfg, &model, &data, &TrainSink::default())?;
        Ok((model, history))
    };
    let (model, first) = run().map_err(e)?;
    let (_, second) = run().map_err(e)?;
    ensure(first == second, format!("metric histories differ: {first:?} vs {second:?}"))?;

    let dir = tempfile::tempdir().map_err(e)?;
    let path = dir.path().join("model.safetensors");
    save_checkpoint(&path, &model, 2, 13, None).map_err(e)?;
    let restored = load_checkpoint(&path).map_err(e)?.build(&Device::Cpu).map_err(e)?;
    let attacks = [AttackConfig::pgd20().with_steps(3)];
    let a = evaluate_robustness(&model, &eval, &attacks, 10, 4).map_err(e)?;
    let b = evaluate_robustness(&restored, &eval, &attacks, 10, 4).map_err(e)?;
    let x = eval.to_tensor(DType::F32, &Device::Cpu).map_err(e)?;
    let la = flat(&model.logits(&x, Mode::Eval).map_err(e)?);
    let lb = flat(&restored.logits(&x, Mode::Eval).map_err(e)?);
    ensure(a == b && la == lb, format!("checkpoint round trip changed evaluation: {a:?} vs {b:?}"))?;
    Ok(format!("{} epochs identical across runs; restored eval {:?} identical", first.len(), a))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 8] = [
        ("spectral exactness", criterion_1),
        ("orthogonality math", criterion_2),
        ("identity at init", criterion_3),
        ("gradient oracle", criterion_4),
        ("attack contracts", criterion_5),
        ("complexity accounting", criterion_6),
        ("desk-scale directional reproduction", criterion_7),
        ("reproducibility", criterion_8),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS criterion {} ({name}): {msg} [{secs:.1}s]", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): {msg} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
