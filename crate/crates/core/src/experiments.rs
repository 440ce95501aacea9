//! Experiment protocols composed from training and evaluation: adaptive
//! attack tables, the short-schedule directional reproduction, ablation
//! sweeps and image panels.

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use log::info;
use serde::{Deserialize, Serialize};

use crate::assembly::{FeatureInjectionPlan, SiriibConfig};
use crate::attacks::{pgd_attack, AttackConfig, Objective};
use crate::backbone::BackboneConfig;
use crate::batch::{tensor_to_array, ImageBatch};
use crate::data::{load_cifar10, DatasetSpec, Split};
use crate::error::{Error, Result};
use crate::model::{ArchitectureDescriptor, Classifier};
use crate::nn::{correct, Mode};
use crate::report::{save_panel, MetricsLog, ResultsTable};
use crate::spectral::difference_map;
use crate::training::{
    adversarial_train, batch_seed, clean_accuracy, robust_accuracy, svd_swap_experiment, swap_batch, SwapResult,
    TrainConfig, TrainSink,
};

/// Column heading for an attack objective.
pub fn objective_label(o: Objective) -> &'static str {
    match o {
        Objective::Ce => "L_CE",
        Objective::Cw => "C&W",
        Objective::Svd => "L_svd",
        Objective::Info => "L_info",
        Objective::CeSvd => "L_CE+L_svd",
        Objective::CeInfo => "L_CE+L_info",
        Objective::CeSvdInfo => "L_CE+L_svd+L_info",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveReport {
    /// Robust accuracy (%) per objective, in request order.
    pub accuracies: Vec<(Objective, f64)>,
    /// Extremes of `x_avg` over every clean and adversarial batch evaluated.
    pub x_avg_min: f64,
    pub x_avg_max: f64,
    pub batches: usize,
    /// Batches on which some `x_avg` entry left the open unit interval.
    pub range_violations: usize,
}

impl AdaptiveReport {
    pub fn accuracy(&self, o: Objective) -> Option<f64> {
        self.accuracies.iter().find(|(k, _)| *k == o).map(|(_, v)| *v)
    }

    pub fn table(&self) -> Result<ResultsTable> {
        let columns = self.accuracies.iter().map(|(o, _)| objective_label(*o).to_string()).collect();
        let mut t = ResultsTable::new("Adaptive attacks (PGD-20)", "Loss", columns);
        t.push("Robust Accuracy", self.accuracies.iter().map(|(_, v)| Some(*v)).collect())?;
        Ok(t)
    }
}

fn extremes(t: &Tensor) -> Result<(f64, f64)> {
    let t = t.to_dtype(DType::F64)?;
    Ok((t.min_all()?.to_scalar()?, t.max_all()?.to_scalar()?))
}

/// PGD-20 under each objective against an instrumented model, tracking the
/// range of `x_avg` on every batch it sees.
pub fn adaptive_attack_eval(
    model: &Classifier,
    data: &ImageBatch,
    objectives: &[Objective],
    batch_size: usize,
    seed: u64,
) -> Result<AdaptiveReport> {
    let siriib = model.siriib().ok_or(Error::MissingSiriib("adaptive attack evaluation"))?;
    let mut hits = vec![0usize; objectives.len()];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut batches, mut range_violations) = (0, 0);
    let mut track = |x_avg: &Tensor| -> Result<()> {
        let (a, b) = extremes(x_avg)?;
        lo = lo.min(a);
        hi = hi.max(b);
        batches += 1;
        if !(a > 0.0 && b < 1.0) {
            range_violations += 1;
        }
        Ok(())
    };
    for (b, batch) in data.chunks(batch_size.max(1)).enumerate() {
        let x = batch.to_tensor(model.dtype(), model.device())?;
        let y = batch.labels_tensor(model.device())?;
        track(&siriib.compute_x_avg(&x, Mode::Eval)?)?;
        for (k, o) in objectives.iter().enumerate() {
            let x_adv = pgd_attack(model, &x, &y, &AttackConfig::adaptive(*o), batch_seed(seed, 0, b))?;
            let out = model.forward(&x_adv, Mode::Eval)?;
            hits[k] += correct(&out.logits, &batch.labels)?;
            if let Some(side) = &out.siriib {
                track(&side.x_avg)?;
            }
        }
    }
    let n = data.len().max(1) as f64;
    Ok(AdaptiveReport {
        accuracies: objectives.iter().zip(&hits).map(|(o, h)| (*o, 100.0 * *h as f64 / n)).collect(),
        x_avg_min: lo,
        x_avg_max: hi,
        batches,
        range_violations,
    })
}

/// The short-schedule directional reproduction on real CIFAR-10.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskProtocol {
    pub data_dir: PathBuf,
    pub train_subset: usize,
    pub eval_subset: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    pub backbone: BackboneConfig,
    pub objectives: Vec<Objective>,
}

impl DeskProtocol {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            train_subset: 4096,
            eval_subset: 1000,
            epochs: 10,
            seeds: vec![0, 1, 2],
            batch_size: 128,
            backbone: BackboneConfig::resnet18(10),
            objectives: vec![Objective::Ce, Objective::Svd, Objective::Info],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskSeedResult {
    pub seed: u64,
    pub swap_pgd20: SwapResult,
    pub swap_cw100: SwapResult,
    pub adaptive: AdaptiveReport,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskVerdict {
    /// Mean swapped accuracy ≥ mean unswapped accuracy under PGD-20, and the
    /// C&W-100 gain ≥ the PGD-20 gain in at least two thirds of the seeds.
    pub swap_ordering: bool,
    /// Mean accuracy under the L_svd-only and L_info-only objectives exceeds
    /// the cross-entropy one by at least 10 points.
    pub adaptive_ordering: bool,
    pub x_avg_range: bool,
}

impl DeskVerdict {
    pub fn from_results(results: &[DeskSeedResult]) -> Self {
        let n = results.len().max(1) as f64;
        let mean = |f: &dyn Fn(&DeskSeedResult) -> f64| results.iter().map(f).sum::<f64>() / n;
        let direction = mean(&|r| r.swap_pgd20.swapped) >= mean(&|r| r.swap_pgd20.robust);
        let ordered = results.iter().filter(|r| r.swap_cw100.gain() >= r.swap_pgd20.gain()).count();
        let acc = |o: Objective| mean(&|r| r.adaptive.accuracy(o).unwrap_or(f64::NAN));
        let ce = acc(Objective::Ce);
        Self {
            swap_ordering: !results.is_empty() && direction && 3 * ordered >= 2 * results.len(),
            adaptive_ordering: acc(Objective::Svd) - ce >= 10.0 && acc(Objective::Info) - ce >= 10.0,
            x_avg_range: !results.is_empty() && results.iter().all(|r| r.adaptive.range_violations == 0),
        }
    }
}

fn train_model(
    descriptor: ArchitectureDescriptor,
    config: &TrainConfig,
    data: &ImageBatch,
    out: Option<&Path>,
    tag: &str,
) -> Result<Classifier> {
    let model = Classifier::new(descriptor, DType::F32, &Device::Cpu, config.seed)?;
    let sink = match out {
        Some(dir) => TrainSink {
            metrics: Some(MetricsLog::create(&dir.join(format!("{tag}-metrics.jsonl")))?),
            checkpoint_dir: Some(dir.join("checkpoints").join(tag)),
        },
        None => TrainSink::default(),
    };
    adversarial_train(config, &model, data, &sink)?;
    Ok(model)
}

/// Run one seed: PGD-AT of the bare and the instrumented model, then the swap
/// and adaptive-attack evaluations.
pub fn run_desk_seed(protocol: &DeskProtocol, seed: u64, out: Option<&Path>) -> Result<DeskSeedResult> {
    let started = Instant::now();
    let train = load_cifar10(&DatasetSpec::new(&protocol.data_dir, Split::Train).with_subset(protocol.train_subset, seed))?;
    let eval = load_cifar10(&DatasetSpec::new(&protocol.data_dir, Split::Test).with_subset(protocol.eval_subset, seed))?;
    let config = TrainConfig {
        batch_size: protocol.batch_size,
        seed,
        ..TrainConfig::desk(protocol.epochs)
    };
    let mut base = ArchitectureDescriptor::resnet18(protocol.backbone.num_classes);
    base.backbone = protocol.backbone.clone();
    let instrumented = base.clone().with_siriib(Some(SiriibConfig::default()));

    info!("seed {seed}: training {}", base.name());
    let plain = train_model(base, &config, &train, out, &format!("seed{seed}-base"))?;
    let swap_pgd20 = svd_swap_experiment(&plain, &eval, &AttackConfig::pgd20(), protocol.batch_size, seed)?;
    let swap_cw100 = svd_swap_experiment(&plain, &eval, &AttackConfig::cw100(), protocol.batch_size, seed)?;
    info!("seed {seed}: swap PGD-20 {swap_pgd20:?}, CW-100 {swap_cw100:?}");

    info!("seed {seed}: training {}", instrumented.name());
    let sr = train_model(instrumented, &config, &train, out, &format!("seed{seed}-sr"))?;
    let adaptive = adaptive_attack_eval(&sr, &eval, &protocol.objectives, protocol.batch_size, seed)?;
    info!("seed {seed}: adaptive {:?}", adaptive.accuracies);
    Ok(DeskSeedResult {
        seed,
        swap_pgd20,
        swap_cw100,
        adaptive,
        seconds: started.elapsed().as_secs_f64(),
    })
}

pub fn run_desk_protocol(protocol: &DeskProtocol, out: Option<&Path>) -> Result<(Vec<DeskSeedResult>, DeskVerdict)> {
    let results = protocol
        .seeds
        .iter()
        .map(|&s| run_desk_seed(protocol, s, out))
        .collect::<Result<Vec<_>>>()?;
    let verdict = DeskVerdict::from_results(&results);
    Ok((results, verdict))
}

/// What an ablation sweep varies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AblationAxis {
    Lambda1(Vec<f64>),
    /// Number of injected projections, shallowest taps first.
    Projections(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub axis: AblationAxis,
    pub train: TrainConfig,
    pub descriptor: ArchitectureDescriptor,
    pub attack: AttackConfig,
    pub eval_batch: usize,
}

impl AblationConfig {
    fn variants(&self) -> Result<Vec<(String, ArchitectureDescriptor, TrainConfig)>> {
        let siriib = self.descriptor.siriib.clone().unwrap_or_default();
        match &self.axis {
            AblationAxis::Lambda1(values) => values
                .iter()
                .map(|&l| {
                    let mut train = self.train.clone();
                    train.weights.lambda1 = l;
                    train.validate()?;
                    let d = self.descriptor.clone().with_siriib(Some(siriib.clone()));
                    Ok((format!("{l:.1}"), d, train))
                })
                .collect(),
            AblationAxis::Projections(counts) => counts
                .iter()
                .map(|&n| {
                    let plan = FeatureInjectionPlan::shallowest(n)?;
                    plan.validate(self.descriptor.backbone.tap_shapes().len())?;
                    let cfg = SiriibConfig {
                        plan,
                        ..siriib.clone()
                    };
                    self.train.validate()?;
                    Ok((n.to_string(), self.descriptor.clone().with_siriib(Some(cfg)), self.train.clone()))
                })
                .collect(),
        }
    }
}

/// Train one model per value on the swept axis and tabulate clean and robust
/// accuracy. The `AA` column is left empty for results of an external
/// evaluator. Every variant is validated before any training starts.
pub fn run_ablation(config: &AblationConfig, train: &ImageBatch, eval: &ImageBatch, out: Option<&Path>) -> Result<ResultsTable> {
    let variants = config.variants()?;
    let header = match config.axis {
        AblationAxis::Lambda1(_) => "lambda1",
        AblationAxis::Projections(_) => "# of p_i",
    };
    let mut table = ResultsTable::new(
        format!("Ablation over {header}"),
        header,
        vec!["Clean Accuracy".into(), config.attack.label(), "AA".into()],
    );
    for (label, descriptor, train_cfg) in variants {
        info!("ablation {header} = {label}");
        let model = train_model(descriptor, &train_cfg, train, out, &format!("ablate-{label}"))?;
        let clean = clean_accuracy(&model, eval, config.eval_batch)?;
        let robust = robust_accuracy(&model, eval, &config.attack, config.eval_batch, train_cfg.seed)?;
        table.push(label, vec![Some(clean), Some(robust), None])?;
    }
    Ok(table)
}

fn sample(t: &Tensor, i: usize) -> Result<ndarray::Array3<f32>> {
    Ok(tensor_to_array(&t.narrow(0, i, 1)?)?.index_axis_move(ndarray::Axis(0), 0))
}

fn diff(a: &ndarray::Array3<f32>, b: &ndarray::Array3<f32>) -> Result<ndarray::Array3<f32>> {
    Ok(difference_map(&a.mapv(f64::from), &b.mapv(f64::from))?.mapv(|v| v as f32))
}

/// Adversarial counterpart of `data`, drawn with the same per-batch seeds as
/// [`robust_accuracy`], so classifying the result reproduces that accuracy.
pub fn attack_dataset(model: &Classifier, data: &ImageBatch, attack: &AttackConfig, batch_size: usize, seed: u64) -> Result<ImageBatch> {
    let mut parts = Vec::new();
    for (b, batch) in data.chunks(batch_size.max(1)).enumerate() {
        let x = batch.to_tensor(model.dtype(), model.device())?;
        let y = batch.labels_tensor(model.device())?;
        let x_adv = pgd_attack(model, &x, &y, attack, batch_seed(seed, 0, b))?;
        parts.push(ImageBatch::new(tensor_to_array(&x_adv)?, batch.labels.clone())?);
    }
    crate::data::concat(&parts)
}

/// Save one panel per sample: `x`, `x_adv`, `x_avg(x_adv)`, the difference
/// map of `x` and `x_adv`, and that of `x_avg` and `x_adv`. Returns the paths
/// and the extremes of `x_avg(x_adv)`.
pub fn sr_panels(
    model: &Classifier,
    batch: &ImageBatch,
    attack: &AttackConfig,
    seed: u64,
    dir: &Path,
) -> Result<(Vec<PathBuf>, (f64, f64))> {
    let siriib = model.siriib().ok_or(Error::MissingSiriib("x_avg visualization"))?;
    let x = batch.to_tensor(model.dtype(), model.device())?;
    let y = batch.labels_tensor(model.device())?;
    let x_adv = pgd_attack(model, &x, &y, attack, seed)?;
    let x_avg = siriib.compute_x_avg(&x_adv, Mode::Eval)?;
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for i in 0..batch.len() {
        let (c, a, s) = (sample(&x, i)?, sample(&x_adv, i)?, sample(&x_avg, i)?);
        let path = dir.join(format!("sr-{i:03}.png"));
        let (d1, d2) = (diff(&c, &a)?, diff(&s, &a)?);
        save_panel(&path, &[c.view(), a.view(), s.view(), d1.view(), d2.view()], 4)?;
        paths.push(path);
    }
    Ok((paths, extremes(&x_avg)?))
}

/// Save one panel per sample: `x`, `x_adv`, the clean-spectrum recombination
/// (clipped for display only) and its difference map against `x_adv`.
pub fn swap_panels(model: &Classifier, batch: &ImageBatch, attack: &AttackConfig, seed: u64, dir: &Path) -> Result<Vec<PathBuf>> {
    let x = batch.to_tensor(model.dtype(), model.device())?;
    let y = batch.labels_tensor(model.device())?;
    let x_adv = pgd_attack(model, &x, &y, attack, seed)?;
    let swapped = swap_batch(&x_adv, &x)?;
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for i in 0..batch.len() {
        let (c, a, s) = (sample(&x, i)?, sample(&x_adv, i)?, sample(&swapped, i)?);
        let path = dir.join(format!("swap-{i:03}.png"));
        let d = diff(&s, &a)?;
        let shown = s.mapv(|v| v.clamp(0.0, 1.0));
        save_panel(&path, &[c.view(), a.view(), shown.view(), d.view()], 4)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic;

    fn tiny_descriptor() -> ArchitectureDescriptor {
        let mut d = ArchitectureDescriptor::resnet18(4);
        d.backbone = BackboneConfig::narrow(2, 4);
        d
    }

    fn swap(robust: f64, swapped: f64) -> SwapResult {
        SwapResult { robust, swapped }
    }

    fn seed_result(pgd: SwapResult, cw: SwapResult, ce: f64, svd: f64, info: f64, violations: usize) -> DeskSeedResult {
        DeskSeedResult {
            seed: 0,
            swap_pgd20: pgd,
            swap_cw100: cw,
            adaptive: AdaptiveReport {
                accuracies: vec![(Objective::Ce, ce), (Objective::Svd, svd), (Objective::Info, info)],
                x_avg_min: 0.1,
                x_avg_max: 0.9,
                batches: 1,
                range_violations: violations,
            },
            seconds: 0.0,
        }
    }

    #[test]
    fn verdict_rules() {
        let good = seed_result(swap(40.0, 41.0), swap(38.0, 45.0), 40.0, 70.0, 75.0, 0);
        let flipped = seed_result(swap(40.0, 42.0), swap(38.0, 39.0), 40.0, 70.0, 75.0, 0);
        let v = DeskVerdict::from_results(&[good.clone(), good.clone(), flipped.clone()]);
        assert!(v.swap_ordering && v.adaptive_ordering && v.x_avg_range);
        let v = DeskVerdict::from_results(&[good.clone(), flipped.clone(), flipped]);
        assert!(!v.swap_ordering);
        let close = seed_result(swap(40.0, 41.0), swap(38.0, 45.0), 40.0, 49.0, 75.0, 1);
        let v = DeskVerdict::from_results(&[close]);
        assert!(!v.adaptive_ordering && !v.x_avg_range);
        assert!(!DeskVerdict::from_results(&[]).swap_ordering);
    }

    #[test]
    fn adaptive_report_on_untrained_model() {
        let model = Classifier::new(tiny_descriptor().with_siriib(Some(SiriibConfig::default())), DType::F32, &Device::Cpu, 0)
            .unwrap();
        let data = synthetic(6, 4, 32, 1).unwrap();
        let objectives = [Objective::Ce, Objective::Svd];
        let r = adaptive_attack_eval(&model, &data, &objectives, 4, 0).unwrap();
        assert_eq!(r.accuracies.len(), 2);
        // two chunks, each seen clean and once per objective
        assert_eq!(r.batches, 6);
        assert_eq!(r.range_violations, 0);
        assert!(r.x_avg_min > 0.0 && r.x_avg_max < 1.0);
        assert_eq!(r.table().unwrap().columns, vec!["L_CE".to_string(), "L_svd".to_string()]);
        let bare = Classifier::new(tiny_descriptor(), DType::F32, &Device::Cpu, 0).unwrap();
        assert!(matches!(adaptive_attack_eval(&bare, &data, &objectives, 4, 0), Err(Error::MissingSiriib(_))));
    }

    #[test]
    fn ablation_rejects_deep_plans_before_training() {
        let config = AblationConfig {
            axis: AblationAxis::Projections(vec![1, 4]),
            train: TrainConfig::desk(1),
            descriptor: tiny_descriptor(),
            attack: AttackConfig::pgd20(),
            eval_batch: 8,
        };
        let data = synthetic(4, 4, 32, 0).unwrap();
        assert!(matches!(run_ablation(&config, &data, &data, None), Err(Error::Config(_))));
    }

    #[test]
    fn lambda_ablation_has_one_row_per_value() {
        let mut train = TrainConfig::desk(1);
        train.batch_size = 8;
        train.attack = train.attack.with_steps(1);
        let config = AblationConfig {
            axis: AblationAxis::Lambda1(vec![1.0, 5.0, 20.0]),
            train,
            descriptor: tiny_descriptor(),
            attack: AttackConfig::pgd20().with_steps(1),
            eval_batch: 8,
        };
        let data = synthetic(8, 4, 32, 0).unwrap();
        let table = run_ablation(&config, &data, &data, None).unwrap();
        let labels: Vec<_> = table.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["1.0", "5.0", "20.0"]);
        assert_eq!(table.columns, ["Clean Accuracy", "PGD-1", "AA"]);
        assert!(table.rows.iter().all(|r| r.values[2].is_none()));
    }

    #[test]
    fn attacked_dataset_reproduces_robust_accuracy() {
        let model = Classifier::new(tiny_descriptor(), DType::F32, &Device::Cpu, 3).unwrap();
        let data = synthetic(10, 4, 32, 2).unwrap();
        let attack = AttackConfig::pgd20().with_steps(2);
        let adv = attack_dataset(&model, &data, &attack, 4, 9).unwrap();
        assert_eq!(adv.labels, data.labels);
        let direct = robust_accuracy(&model, &data, &attack, 4, 9).unwrap();
        assert_eq!(clean_accuracy(&model, &adv, 4).unwrap(), direct);
    }

    #[test]
    fn panels_are_written() {
        let model = Classifier::new(tiny_descriptor().with_siriib(Some(SiriibConfig::default())), DType::F32, &Device::Cpu, 0)
            .unwrap();
        let data = synthetic(2, 4, 32, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let attack = AttackConfig::pgd20().with_steps(2);
        let (a, (lo, hi)) = sr_panels(&model, &data, &attack, 0, dir.path()).unwrap();
        assert!(lo > 0.0 && hi < 1.0);
        let b = swap_panels(&model, &data, &attack, 0, dir.path()).unwrap();
        for p in a.iter().chain(&b) {
            let img = image::open(p).unwrap();
            assert_eq!(img.height(), 128);
        }
        assert_eq!(image::open(&a[0]).unwrap().width(), 5 * 128 + 4 * 2);
    }
}
