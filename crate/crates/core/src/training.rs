//! PGD adversarial training and the evaluation protocols built on it.

use std::path::PathBuf;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_attack, AttackConfig};
use crate::batch::{array_to_tensor, tensor_to_array, ImageBatch};
use crate::checkpoint::save_checkpoint;
use crate::data::shuffled;
use crate::error::{Error, Result};
use crate::losses::{loss_info, loss_svd, total_loss, LossWeights};
use crate::model::Classifier;
use crate::nn::{correct, cross_entropy, Mode, ParamStore};
use crate::optim::{LrSchedule, Sgd, SgdConfig};
use crate::report::MetricsLog;
use crate::assembly::{MultiScaleConfig, SrFrontEnd};
use crate::spectral::swap_singular_values;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Epochs after which the learning rate drops tenfold.
    pub milestones: Vec<usize>,
    pub attack: AttackConfig,
    pub weights: LossWeights,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-length schedule: drops at epochs 100 and 150.
    pub fn full(epochs: usize) -> Self {
        Self {
            epochs,
            batch_size: 128,
            sgd: SgdConfig::default(),
            milestones: vec![100, 150],
            attack: AttackConfig::train(),
            weights: LossWeights::default(),
            seed: 0,
        }
    }

    /// Short schedule with milestones at the same fractions of training.
    pub fn desk(epochs: usize) -> Self {
        Self {
            milestones: LrSchedule::scaled(0.1, epochs).milestones,
            ..Self::full(epochs)
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::new(self.sgd.lr, self.milestones.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        self.schedule().validate(self.epochs)?;
        self.attack.validate()?;
        self.weights.validate()
    }
}

/// One line of the training metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_ori: f64,
    pub loss_svd: Option<f64>,
    pub loss_info: Option<f64>,
    pub penalty: Option<f64>,
    /// Accuracy (%) on the adversarial training batches, in training mode.
    pub adv_accuracy: f64,
    /// Extremes of `x_avg` over the epoch, when SiRIIB is present.
    pub x_avg_range: Option<(f64, f64)>,
}

/// Where training writes its artifacts; both parts are optional.
#[derive(Default)]
pub struct TrainSink {
    pub metrics: Option<MetricsLog>,
    pub checkpoint_dir: Option<PathBuf>,
}

pub(crate) fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((epoch as u64) << 32) ^ batch as u64
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn extremes(t: &Tensor) -> Result<(f64, f64)> {
    let t = t.to_dtype(DType::F64)?;
    Ok((t.min_all()?.to_scalar()?, t.max_all()?.to_scalar()?))
}

struct Running {
    sums: [f64; 5],
    present: [bool; 3],
    correct: usize,
    seen: usize,
    batches: usize,
    range: Option<(f64, f64)>,
}

/// Train `model` in place with PGD adversarial training. Adversarial
/// examples come from the model in evaluation mode; the update uses
/// `total_loss` with SiRIIB terms when the branch is attached.
pub fn adversarial_train(config: &TrainConfig, model: &Classifier, data: &ImageBatch, sink: &TrainSink) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut sgd = Sgd::new(config.sgd);
    let schedule = config.schedule();
    let use_side = model.siriib().is_some() && config.weights.lambda1 != 0.0;
    let use_penalty = model.siriib().is_some() && config.weights.lambda2 != 0.0;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = schedule.lr_at(epoch);
        let order = shuffled(data, batch_seed(config.seed, epoch, usize::MAX));
        let mut run = Running {
            sums: [0.0; 5],
            present: [false; 3],
            correct: 0,
            seen: 0,
            batches: 0,
            range: None,
        };
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let x = batch.to_tensor(model.dtype(), model.device())?;
            let y = batch.labels_tensor(model.device())?;
            let x_adv = pgd_attack(model, &x, &y, &config.attack, batch_seed(config.seed, epoch, b))?;
            let (out, clean) = if model.siriib().is_some() {
                model.forward_with_reference(&x_adv, &x, Mode::Train)?
            } else {
                (model.forward(&x_adv, Mode::Train)?, None)
            };
            let l_ori = cross_entropy(&out.logits, &y)?;
            let (mut l_svd, mut l_info) = (None, None);
            if let (true, Some(side), Some(clean)) = (use_side, &out.siriib, &clean) {
                l_svd = Some(loss_svd(&side.x_avg, &x)?);
                l_info = Some(loss_info(&side.features, &clean.features)?);
            }
            let penalty = if use_penalty { model.orthogonality_penalty()? } else { None };
            let loss = total_loss(&l_ori, l_svd.as_ref(), l_info.as_ref(), penalty.as_ref(), config.weights)?;
            let value = scalar(&loss)?;
            if log::log_enabled!(log::Level::Debug) {
                let show = |t: &Option<Tensor>| t.as_ref().map(scalar).transpose();
                log::debug!(
                    "epoch {epoch} batch {b}: loss {value:.4} ori {:.4} svd {:?} info {:?} penalty {:?}",
                    scalar(&l_ori)?,
                    show(&l_svd)?,
                    show(&l_info)?,
                    show(&penalty)?
                );
            }
            if !value.is_finite() {
                log::error!("non-finite loss {value} at epoch {epoch}, batch {b} (batch size {})", batch.len());
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            sgd.step(model.store(), &loss.backward()?, lr)?;

            run.sums[0] += value;
            run.sums[1] += scalar(&l_ori)?;
            for (k, term) in [&l_svd, &l_info, &penalty].into_iter().enumerate() {
                if let Some(t) = term {
                    run.sums[2 + k] += scalar(t)?;
                    run.present[k] = true;
                }
            }
            if let Some(side) = &out.siriib {
                let (lo, hi) = extremes(&side.x_avg)?;
                let (lo2, hi2) = clean.as_ref().map_or(Ok((lo, hi)), |c| extremes(&c.x_avg))?;
                let (a, z) = run.range.unwrap_or((f64::INFINITY, f64::NEG_INFINITY));
                run.range = Some((a.min(lo).min(lo2), z.max(hi).max(hi2)));
            }
            run.correct += correct(&out.logits, &batch.labels)?;
            run.seen += batch.len();
            run.batches += 1;
        }
        let n = run.batches as f64;
        let mean = |k: usize| run.sums[k] / n;
        let m = EpochMetrics {
            epoch,
            lr,
            loss: mean(0),
            loss_ori: mean(1),
            loss_svd: run.present[0].then(|| mean(2)),
            loss_info: run.present[1].then(|| mean(3)),
            penalty: run.present[2].then(|| mean(4)),
            adv_accuracy: 100.0 * run.correct as f64 / run.seen as f64,
            x_avg_range: run.range,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} adv acc {:.2}% lr {lr} ({:.1}s)",
            m.loss,
            m.adv_accuracy,
            started.elapsed().as_secs_f64()
        );
        if let Some(log) = &sink.metrics {
            log.append(&m)?;
        }
        history.push(m);
        let done = epoch + 1;
        if let Some(dir) = &sink.checkpoint_dir {
            if config.milestones.contains(&done) || done == config.epochs {
                save_checkpoint(&dir.join(format!("epoch-{done:03}.safetensors")), model, done, config.seed, Some(&sgd))?;
                if done == config.epochs {
                    save_checkpoint(&dir.join("final.safetensors"), model, done, config.seed, Some(&sgd))?;
                }
            }
        }
    }
    Ok(history)
}

/// Accuracy (%) of `model` on inputs produced per batch by `inputs`.
fn accuracy_with<F>(model: &Classifier, data: &ImageBatch, batch_size: usize, mut inputs: F) -> Result<f64>
where
    F: FnMut(usize, &Tensor, &Tensor) -> Result<Tensor>,
{
    if data.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let mut hits = 0;
    for (b, batch) in data.chunks(batch_size.max(1)).enumerate() {
        let x = batch.to_tensor(model.dtype(), model.device())?;
        let y = batch.labels_tensor(model.device())?;
        let input = inputs(b, &x, &y)?;
        hits += correct(&model.logits(&input, Mode::Eval)?, &batch.labels)?;
    }
    Ok(100.0 * hits as f64 / data.len() as f64)
}

pub fn clean_accuracy(model: &Classifier, data: &ImageBatch, batch_size: usize) -> Result<f64> {
    accuracy_with(model, data, batch_size, |_, x, _| Ok(x.clone()))
}

pub fn robust_accuracy(model: &Classifier, data: &ImageBatch, attack: &AttackConfig, batch_size: usize, seed: u64) -> Result<f64> {
    accuracy_with(model, data, batch_size, |b, x, y| pgd_attack(model, x, y, attack, batch_seed(seed, 0, b)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub clean: f64,
    /// `(attack label, robust accuracy %)` in request order.
    pub robust: Vec<(String, f64)>,
}

impl RobustnessReport {
    pub fn columns(&self) -> Vec<String> {
        std::iter::once("Clean".to_string())
            .chain(self.robust.iter().map(|(l, _)| l.clone()))
            .collect()
    }

    pub fn values(&self) -> Vec<Option<f64>> {
        std::iter::once(Some(self.clean))
            .chain(self.robust.iter().map(|(_, v)| Some(*v)))
            .collect()
    }
}

pub fn evaluate_robustness(
    model: &Classifier,
    data: &ImageBatch,
    attacks: &[AttackConfig],
    batch_size: usize,
    seed: u64,
) -> Result<RobustnessReport> {
    let clean = clean_accuracy(model, data, batch_size)?;
    let robust = attacks
        .iter()
        .map(|a| Ok((a.label(), robust_accuracy(model, data, a, batch_size, seed)?)))
        .collect::<Result<_>>()?;
    Ok(RobustnessReport { clean, robust })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwapResult {
    /// Accuracy (%) on `x_adv`.
    pub robust: f64,
    /// Accuracy (%) on `x_adv` with its singular values replaced by the clean ones.
    pub swapped: f64,
}

impl SwapResult {
    pub fn gain(&self) -> f64 {
        self.swapped - self.robust
    }
}

/// Per-image singular-value swap of a batch tensor; recombinations are left
/// unclipped. Identical pairs are returned unchanged.
pub fn swap_batch(adv: &Tensor, clean: &Tensor) -> Result<Tensor> {
    let a = tensor_to_array(adv)?;
    let c = tensor_to_array(clean)?;
    let mut out = a.clone();
    for i in 0..a.shape()[0] {
        let (ai, ci) = (a.index_axis(ndarray::Axis(0), i), c.index_axis(ndarray::Axis(0), i));
        if ai == ci {
            continue;
        }
        let s = swap_singular_values(&ai.mapv(f64::from), &ci.mapv(f64::from))?;
        out.index_axis_mut(ndarray::Axis(0), i).assign(&s.mapv(|v| v as f32));
    }
    array_to_tensor(&out, adv.dtype(), adv.device())
}

/// Evaluate on adversarial examples and on their clean-spectrum recombinations.
pub fn svd_swap_experiment(model: &Classifier, data: &ImageBatch, attack: &AttackConfig, batch_size: usize, seed: u64) -> Result<SwapResult> {
    let (mut hits, mut swapped_hits) = (0, 0);
    for (b, batch) in data.chunks(batch_size.max(1)).enumerate() {
        let x = batch.to_tensor(model.dtype(), model.device())?;
        let y = batch.labels_tensor(model.device())?;
        let x_adv = pgd_attack(model, &x, &y, attack, batch_seed(seed, 0, b))?;
        hits += correct(&model.logits(&x_adv, Mode::Eval)?, &batch.labels)?;
        let swapped = swap_batch(&x_adv, &x)?;
        swapped_hits += correct(&model.logits(&swapped, Mode::Eval)?, &batch.labels)?;
    }
    let n = data.len().max(1) as f64;
    Ok(SwapResult {
        robust: 100.0 * hits as f64 / n,
        swapped: 100.0 * swapped_hits as f64 / n,
    })
}

/// A stand-alone multiscale SR front end used as an input purifier.
pub struct SrPurifier {
    store: ParamStore,
    front: SrFrontEnd,
}

impl SrPurifier {
    pub fn new(scales: &MultiScaleConfig, native: usize, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(dtype, device.clone(), seed);
        let front = SrFrontEnd::new(&mut store, "sr", scales, native)?;
        Ok(Self { store, front })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn native(&self) -> usize {
        self.front.native()
    }

    pub fn purify(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let size = x.dims4()?.3;
        if size != self.native() {
            return Err(Error::Config(format!(
                "purifier expects {}x{} inputs, got {size}x{size}",
                self.native(),
                self.native()
            )));
        }
        self.front.x_avg(x, mode)
    }

    pub fn penalty(&self) -> Result<Tensor> {
        self.front.penalty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub attack: AttackConfig,
    pub lambda2: f64,
    pub seed: u64,
}

impl Default for PurifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 128,
            sgd: SgdConfig {
                lr: 0.01,
                ..SgdConfig::default()
            },
            attack: AttackConfig::train(),
            lambda2: LossWeights::default().lambda2,
            seed: 0,
        }
    }
}

/// Train the purifier alone on adversarial examples of a fixed model, pulling
/// `x_avg(x_adv)` toward the clean image with `L_svd`. Returns the mean loss
/// per epoch.
pub fn train_purifier(purifier: &SrPurifier, model: &Classifier, data: &ImageBatch, config: &PurifierTrainConfig) -> Result<Vec<f64>> {
    let mut sgd = Sgd::new(config.sgd);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = shuffled(data, batch_seed(config.seed, epoch, usize::MAX));
        let (mut sum, mut n) = (0.0, 0usize);
        for (b, batch) in order.chunks(config.batch_size.max(1)).enumerate() {
            let x = batch.to_tensor(model.dtype(), model.device())?;
            let y = batch.labels_tensor(model.device())?;
            let x_adv = pgd_attack(model, &x, &y, &config.attack, batch_seed(config.seed, epoch, b))?;
            let x_avg = purifier.purify(&x_adv, Mode::Train)?;
            let loss = loss_svd(&x_avg, &x)?.add(&(purifier.penalty()? * config.lambda2)?)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            sgd.step(purifier.store(), &loss.backward()?, config.sgd.lr)?;
            sum += value;
            n += 1;
        }
        history.push(sum / n.max(1) as f64);
    }
    Ok(history)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GreyBoxResult {
    pub clean_x: f64,
    pub clean_x_avg: f64,
    pub robust_x_adv: f64,
    pub robust_x_avg: f64,
}

/// Grey-box protocol: attack the model alone, then classify the purified
/// inputs. Accuracies in %.
pub fn grey_box_sr_eval(
    purifier: &SrPurifier,
    model: &Classifier,
    data: &ImageBatch,
    attack: &AttackConfig,
    batch_size: usize,
    seed: u64,
) -> Result<GreyBoxResult> {
    if data.resolution() != purifier.native() || model.descriptor().backbone.resolution != purifier.native() {
        return Err(Error::Config(format!(
            "resolution mismatch: data {}, model {}, purifier {}",
            data.resolution(),
            model.descriptor().backbone.resolution,
            purifier.native()
        )));
    }
    let mut hits = [0usize; 4];
    for (b, batch) in data.chunks(batch_size.max(1)).enumerate() {
        let x = batch.to_tensor(model.dtype(), model.device())?;
        let y = batch.labels_tensor(model.device())?;
        let x_adv = pgd_attack(model, &x, &y, attack, batch_seed(seed, 0, b))?;
        let inputs = [
            x.clone(),
            purifier.purify(&x, Mode::Eval)?,
            x_adv.clone(),
            purifier.purify(&x_adv, Mode::Eval)?,
        ];
        for (h, input) in hits.iter_mut().zip(&inputs) {
            *h += correct(&model.logits(input, Mode::Eval)?, &batch.labels)?;
        }
    }
    let pct = |h: usize| 100.0 * h as f64 / data.len().max(1) as f64;
    Ok(GreyBoxResult {
        clean_x: pct(hits[0]),
        clean_x_avg: pct(hits[1]),
        robust_x_adv: pct(hits[2]),
        robust_x_avg: pct(hits[3]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::data::synthetic;
    use crate::model::ArchitectureDescriptor;
    use crate::assembly::SiriibConfig;

    fn tiny(siriib: bool, seed: u64) -> Classifier {
        let mut d = ArchitectureDescriptor::resnet18(10);
        d.backbone = BackboneConfig::narrow(2, 10);
        d.siriib = siriib.then(SiriibConfig::default);
        Classifier::new(d, DType::F32, &Device::Cpu, seed).unwrap()
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            attack: AttackConfig::train().with_steps(1),
            ..TrainConfig::desk(epochs)
        }
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::full(200);
        assert_eq!((c.batch_size, c.milestones.clone()), (128, vec![100, 150]));
        assert_eq!(TrainConfig::desk(10).milestones, vec![5, 8]);
        assert!(TrainConfig::full(50).validate().is_err());
        let mut bad = TrainConfig::desk(10);
        bad.weights.lambda1 = -1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn bare_backbone_without_weights_logs_only_ce() {
        let data = synthetic(16, 10, 32, 0).unwrap();
        let model = tiny(false, 1);
        let cfg = TrainConfig {
            weights: LossWeights::NONE,
            ..quick(1)
        };
        let h = adversarial_train(&cfg, &model, &data, &TrainSink::default()).unwrap();
        assert_eq!(h.len(), 1);
        assert!(h[0].loss_svd.is_none() && h[0].loss_info.is_none() && h[0].penalty.is_none());
        assert_eq!(h[0].loss, h[0].loss_ori);
    }

    #[test]
    fn instrumented_training_is_reproducible() {
        let data = synthetic(16, 10, 32, 0).unwrap();
        let run = || {
            let model = tiny(true, 2);
            adversarial_train(&quick(1), &model, &data, &TrainSink::default()).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        let (lo, hi) = a[0].x_avg_range.unwrap();
        assert!(lo > 0.0 && hi < 1.0);
        assert!(a[0].loss_svd.unwrap() > 0.0 && a[0].penalty.is_some());
    }

    #[test]
    fn swap_with_no_attack_is_identity() {
        let data = synthetic(8, 10, 32, 3).unwrap();
        let model = tiny(false, 3);
        let r = svd_swap_experiment(&model, &data, &AttackConfig::pgd20().with_epsilon(0.0), 4, 0).unwrap();
        assert_eq!(r.robust, r.swapped);
        let zero = evaluate_robustness(&model, &data, &[AttackConfig::pgd20().with_epsilon(0.0)], 4, 0).unwrap();
        assert_eq!(zero.robust[0].1, zero.clean);
    }

    #[test]
    fn grey_box_smoke_and_resolution_check() {
        let data = synthetic(8, 10, 32, 4).unwrap();
        let model = tiny(false, 4);
        let purifier = SrPurifier::new(&MultiScaleConfig::default(), 32, DType::F32, &Device::Cpu, 0).unwrap();
        let attack = AttackConfig::pgd20().with_steps(1);
        let r = grey_box_sr_eval(&purifier, &model, &data, &attack, 4, 0).unwrap();
        for v in [r.clean_x, r.clean_x_avg, r.robust_x_adv, r.robust_x_avg] {
            assert!((0.0..=100.0).contains(&v));
        }
        let cfg = PurifierTrainConfig {
            epochs: 1,
            batch_size: 4,
            attack,
            ..PurifierTrainConfig::default()
        };
        let losses = train_purifier(&purifier, &model, &data, &cfg).unwrap();
        assert!(losses[0].is_finite());
        let small = synthetic(2, 2, 16, 0).unwrap();
        assert!(grey_box_sr_eval(&purifier, &model, &small, &AttackConfig::pgd20(), 2, 0).is_err());
    }
}
