//! The `siriib` command line: one subcommand per experiment, each writing a
//! self-describing run directory.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::archive::{AdversarialArchive, ArchiveMeta, ARCHIVE_VERSION};
use crate::assembly::{FeatureInjectionPlan, MultiScaleConfig, SiriibConfig};
use crate::attacks::{AttackConfig, Norm, Objective};
use crate::backbone::BackboneConfig;
use crate::batch::ImageBatch;
use crate::checkpoint::load_checkpoint;
use crate::complexity::count_overhead;
use crate::data::{load_cifar10, DatasetSpec, Split, CIFAR_CLASSES};
use crate::error::{Error, Result};
use crate::experiments::{
    adaptive_attack_eval, attack_dataset, run_ablation, sr_panels, swap_panels, AblationAxis, AblationConfig,
};
use crate::losses::LossWeights;
use crate::model::{ArchitectureDescriptor, Classifier};
use crate::optim::{LrSchedule, SgdConfig};
use crate::report::{write_toml, MetricsLog, ResultsTable};
use crate::training::{
    adversarial_train, clean_accuracy, evaluate_robustness, grey_box_sr_eval, svd_swap_experiment, train_purifier,
    PurifierTrainConfig, SrPurifier, TrainConfig, TrainSink,
};

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

const PRECEDENCE: &str = "\
Settings are resolved in three layers, later layers winning:
  1. built-in defaults
  2. the flat TOML file given with --config (keys named like the flags, with
     underscores: batch_size, lambda1, attacks, ...)
  3. command-line flags
The resolved settings are written to <run dir>/config.toml, which can be passed
back with --config to repeat the run.

Exit status: 0 on success, 1 on a configuration error, 2 on a runtime failure.";

#[derive(Debug, Parser)]
#[command(name = "siriib", version, about = "SVD analysis of adversarial examples and SiRIIB experiments", after_help = PRECEDENCE)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// PGD adversarial training, then clean and robust evaluation.
    #[command(after_help = PRECEDENCE)]
    Train(TrainArgs),
    /// Evaluate a checkpoint under a list of attacks, adaptive objectives or a stored archive.
    #[command(after_help = PRECEDENCE)]
    AttackEval(AttackEvalArgs),
    /// Robust accuracy before and after replacing singular values with clean ones.
    #[command(after_help = PRECEDENCE)]
    SvdSwap(SharedArgs),
    /// Save x / x_adv / x_avg panels with difference maps.
    #[command(after_help = PRECEDENCE)]
    SrVisualize(SharedArgs),
    /// Train a stand-alone SR purifier against a fixed model and evaluate it grey-box.
    #[command(after_help = PRECEDENCE)]
    GreyBox(GreyBoxArgs),
    /// Parameter and multiply-add counts of the base and instrumented models.
    #[command(after_help = PRECEDENCE)]
    ParamCount(SharedArgs),
    /// Sweep lambda1 or the number of injected projections.
    #[command(after_help = PRECEDENCE)]
    Ablate(AblateArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::AttackEval(_) => "attack-eval",
            Command::SvdSwap(_) => "svd-swap",
            Command::SrVisualize(_) => "sr-visualize",
            Command::GreyBox(_) => "grey-box",
            Command::ParamCount(_) => "param-count",
            Command::Ablate(_) => "ablate",
        }
    }

    fn shared(&self) -> &SharedArgs {
        match self {
            Command::Train(a) => &a.shared,
            Command::AttackEval(a) => &a.shared,
            Command::SvdSwap(a) | Command::SrVisualize(a) | Command::ParamCount(a) => a,
            Command::GreyBox(a) => &a.shared,
            Command::Ablate(a) => &a.shared,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct SharedArgs {
    /// Flat TOML settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory with the CIFAR-10 binary batches.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Parent of the run directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Training samples, class-balanced (0 = whole split).
    #[arg(long)]
    pub train_subset: Option<usize>,
    /// Test samples, class-balanced (0 = whole split).
    #[arg(long)]
    pub eval_subset: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Width of the first backbone stage (64 is ResNet-18).
    #[arg(long)]
    pub width: Option<usize>,
    /// Attach SiRIIB to models built from scratch (`--siriib false` for the bare backbone).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub siriib: Option<bool>,
    /// Model checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// L-infinity budget of evaluation attacks, in [0, 1] pixel units.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Comma-separated evaluation attacks, e.g. pgd20,pgd100,cw100,l2-pgd20.
    #[arg(long, value_delimiter = ',')]
    pub attacks: Option<Vec<String>>,
    /// Number of samples rendered as PNG panels.
    #[arg(long)]
    pub images: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Number of injected projections (1 to 3).
    #[arg(long)]
    pub projections: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct AttackEvalArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    /// Comma-separated adaptive objectives, e.g. ce,svd,info,ce+svd.
    #[arg(long, value_delimiter = ',')]
    pub objectives: Option<Vec<String>>,
    /// Evaluate the adversarial examples stored in this archive directory.
    #[arg(long)]
    pub archive: Option<PathBuf>,
    /// Also store every attack's adversarial examples as archives.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub save_archive: Option<bool>,
}

#[derive(Debug, Clone, Args)]
pub struct GreyBoxArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[arg(long)]
    pub purifier_epochs: Option<usize>,
    #[arg(long)]
    pub purifier_lr: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Comma-separated lambda1 values, one trained model each.
    #[arg(long, value_delimiter = ',')]
    pub lambda1: Option<Vec<f64>>,
    /// Comma-separated projection counts, one trained model each.
    #[arg(long, value_delimiter = ',')]
    pub projections: Option<Vec<usize>>,
}

/// Every setting of every subcommand, as one flat key-value table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Informational; filled in when the run directory is written.
    pub command: String,
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub train_subset: usize,
    pub eval_subset: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub max_grad_norm: f64,
    /// Learning-rate drop epochs; empty places them at 50% and 75% of training.
    pub milestones: Vec<usize>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub siriib: bool,
    pub width: usize,
    pub projections: usize,
    pub scales: Vec<usize>,
    pub train_attack_steps: usize,
    pub epsilon: f64,
    pub epsilon_l2: f64,
    pub attacks: Vec<String>,
    pub objectives: Vec<String>,
    pub checkpoint: Option<PathBuf>,
    pub archive: Option<PathBuf>,
    pub save_archive: bool,
    pub images: usize,
    pub purifier_epochs: usize,
    pub purifier_lr: f64,
    pub ablate_lambda1: Vec<f64>,
    pub ablate_projections: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        let weights = LossWeights::default();
        Self {
            command: String::new(),
            seed: 0,
            data_dir: None,
            out_dir: PathBuf::from("runs"),
            train_subset: 4096,
            eval_subset: 1000,
            epochs: 10,
            batch_size: 128,
            lr: sgd.lr,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            max_grad_norm: sgd.max_grad_norm.unwrap_or(0.0),
            milestones: Vec::new(),
            lambda1: weights.lambda1,
            lambda2: weights.lambda2,
            siriib: true,
            width: 64,
            projections: 3,
            scales: MultiScaleConfig::default().resolutions,
            train_attack_steps: AttackConfig::train().steps,
            epsilon: 8.0 / 255.0,
            epsilon_l2: AttackConfig::l2_pgd20().epsilon,
            attacks: vec!["pgd20".into(), "pgd100".into(), "cw100".into()],
            objectives: Vec::new(),
            checkpoint: None,
            archive: None,
            save_archive: false,
            images: 8,
            purifier_epochs: PurifierTrainConfig::default().epochs,
            purifier_lr: PurifierTrainConfig::default().sgd.lr,
            ablate_lambda1: Vec::new(),
            ablate_projections: Vec::new(),
        }
    }
}

fn set<T>(slot: &mut T, value: &Option<T>)
where
    T: Clone,
{
    if let Some(v) = value {
        *slot = v.clone();
    }
}

impl RunConfig {
    /// Defaults, then the config file, then flags.
    pub fn resolve(command: &Command) -> Result<Self> {
        let shared = command.shared();
        let mut c = match &shared.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        c.command = command.name().to_string();
        set(&mut c.seed, &shared.seed);
        if shared.data_dir.is_some() {
            c.data_dir = shared.data_dir.clone();
        }
        set(&mut c.out_dir, &shared.out_dir);
        set(&mut c.train_subset, &shared.train_subset);
        set(&mut c.eval_subset, &shared.eval_subset);
        set(&mut c.batch_size, &shared.batch_size);
        set(&mut c.width, &shared.width);
        set(&mut c.siriib, &shared.siriib);
        if shared.checkpoint.is_some() {
            c.checkpoint = shared.checkpoint.clone();
        }
        set(&mut c.epsilon, &shared.epsilon);
        set(&mut c.attacks, &shared.attacks);
        set(&mut c.images, &shared.images);
        match command {
            Command::Train(a) => {
                set(&mut c.epochs, &a.epochs);
                set(&mut c.lr, &a.lr);
                set(&mut c.lambda1, &a.lambda1);
                set(&mut c.lambda2, &a.lambda2);
                set(&mut c.projections, &a.projections);
            }
            Command::AttackEval(a) => {
                set(&mut c.objectives, &a.objectives);
                if a.archive.is_some() {
                    c.archive = a.archive.clone();
                }
                set(&mut c.save_archive, &a.save_archive);
            }
            Command::GreyBox(a) => {
                set(&mut c.purifier_epochs, &a.purifier_epochs);
                set(&mut c.purifier_lr, &a.purifier_lr);
            }
            Command::Ablate(a) => {
                set(&mut c.epochs, &a.epochs);
                set(&mut c.ablate_lambda1, &a.lambda1);
                set(&mut c.ablate_projections, &a.projections);
            }
            Command::SvdSwap(_) | Command::SrVisualize(_) | Command::ParamCount(_) => {}
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.width == 0 {
            return Err(Error::Config("batch_size, epochs and width must be positive".into()));
        }
        self.train_config()?.validate()?;
        self.descriptor()?;
        for a in self.attack_configs()? {
            a.validate()?;
        }
        self.objective_list()?;
        Ok(())
    }

    pub fn descriptor(&self) -> Result<ArchitectureDescriptor> {
        let mut d = ArchitectureDescriptor::resnet18(CIFAR_CLASSES);
        d.backbone = BackboneConfig::narrow(self.width, CIFAR_CLASSES);
        d.backbone.validate()?;
        if self.siriib {
            let cfg = SiriibConfig {
                scales: MultiScaleConfig {
                    resolutions: self.scales.clone(),
                },
                plan: FeatureInjectionPlan::shallowest(self.projections)?,
                ..SiriibConfig::default()
            };
            cfg.scales.validate(d.backbone.resolution)?;
            cfg.plan.validate(d.backbone.tap_shapes().len())?;
            d.siriib = Some(cfg);
        }
        Ok(d)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let milestones = if self.milestones.is_empty() {
            LrSchedule::scaled(self.lr, self.epochs).milestones
        } else {
            self.milestones.clone()
        };
        Ok(TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            sgd: SgdConfig {
                lr: self.lr,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
                max_grad_norm: (self.max_grad_norm > 0.0).then_some(self.max_grad_norm),
            },
            milestones,
            attack: AttackConfig::train().with_steps(self.train_attack_steps),
            weights: LossWeights {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
            },
            seed: self.seed,
        })
    }

    pub fn attack_configs(&self) -> Result<Vec<AttackConfig>> {
        self.attacks
            .iter()
            .map(|name| parse_attack(name, self.epsilon, self.epsilon_l2))
            .collect()
    }

    pub fn objective_list(&self) -> Result<Vec<Objective>> {
        self.objectives.iter().map(|o| o.parse()).collect()
    }

    fn data_dir(&self) -> Result<&Path> {
        self.data_dir
            .as_deref()
            .ok_or_else(|| Error::Config(format!("{} needs --data-dir (or data_dir in the config)", self.command)))
    }

    fn load(&self, split: Split, size: usize) -> Result<ImageBatch> {
        let mut spec = DatasetSpec::new(self.data_dir()?, split);
        if size > 0 {
            spec = spec.with_subset(size, self.seed);
        }
        load_cifar10(&spec)
    }

    fn checkpoint_path(&self) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| Error::Config(format!("{} needs --checkpoint (or checkpoint in the config)", self.command)))
    }

    fn load_model(&self) -> Result<Classifier> {
        let ck = load_checkpoint(self.checkpoint_path()?)?;
        info!("loaded {} from {}", ck.meta.descriptor.name(), self.checkpoint_path()?.display());
        ck.build(&Device::Cpu)
    }
}

/// Attack names: `pgd<N>` or `cw<N>`, optionally prefixed by `l2-`, with an
/// optional dash before the step count (`pgd-20`).
pub fn parse_attack(name: &str, epsilon: f64, epsilon_l2: f64) -> Result<AttackConfig> {
    let lower = name.trim().to_ascii_lowercase();
    let (l2, rest) = match lower.strip_prefix("l2-") {
        Some(r) => (true, r),
        None => (false, lower.as_str()),
    };
    let (mut cfg, digits) = if let Some(d) = rest.strip_prefix("pgd") {
        (AttackConfig::pgd20(), d)
    } else if let Some(d) = rest.strip_prefix("cw") {
        (AttackConfig::cw100(), d)
    } else {
        return Err(Error::Config(format!("unknown attack {name:?}")));
    };
    let steps: usize = digits
        .trim_start_matches('-')
        .parse()
        .map_err(|_| Error::Config(format!("attack {name:?} needs a step count, e.g. pgd20")))?;
    if l2 {
        let base = AttackConfig::l2_pgd20();
        cfg.norm = Norm::L2;
        cfg.step_size = base.step_size;
        cfg.epsilon = epsilon_l2;
    } else {
        cfg.epsilon = epsilon;
    }
    cfg.steps = steps;
    cfg.validate()?;
    Ok(cfg)
}

/// Output directory of one invocation.
pub struct RunDir {
    pub root: PathBuf,
    pub metrics: MetricsLog,
}

impl RunDir {
    /// `<out_dir>/<YYYYmmdd-HHMMSS>-seed<seed>-<command>`, with a numeric
    /// suffix if that name is taken.
    pub fn create(config: &RunConfig) -> Result<Self> {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        let base = format!("{stamp}-seed{}-{}", config.seed, config.command);
        let mut root = config.out_dir.join(&base);
        let mut k = 1;
        while root.exists() {
            root = config.out_dir.join(format!("{base}-{k}"));
            k += 1;
        }
        std::fs::create_dir_all(root.join("checkpoints"))?;
        std::fs::create_dir_all(root.join("images"))?;
        write_toml(&root.join("config.toml"), config)?;
        let metrics = MetricsLog::create(&root.join("metrics.jsonl"))?;
        Ok(Self { root, metrics })
    }

    pub fn images(&self) -> PathBuf {
        self.root.join("images")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    fn emit(&self, table: &ResultsTable, stem: &str) -> Result<()> {
        table.write(&self.root, stem)?;
        println!("{}", table.to_text());
        Ok(())
    }
}

fn run_train(c: &RunConfig, run: RunDir) -> Result<()> {
    let train = c.load(Split::Train, c.train_subset)?;
    let eval = c.load(Split::Test, c.eval_subset)?;
    let model = Classifier::new(c.descriptor()?, DType::F32, &Device::Cpu, c.seed)?;
    info!("training {} ({} parameters) on {} samples", model.descriptor().name(), model.param_count(), train.len());
    let sink = TrainSink {
        metrics: Some(MetricsLog::create(run.metrics.path())?),
        checkpoint_dir: Some(run.checkpoints()),
    };
    adversarial_train(&c.train_config()?, &model, &train, &sink)?;
    let report = evaluate_robustness(&model, &eval, &c.attack_configs()?, c.batch_size, c.seed)?;
    let mut table = ResultsTable::new("Robust accuracy (%)", "Model", report.columns());
    table.push(model.descriptor().name(), report.values())?;
    run.emit(&table, "results")
}

fn run_attack_eval(c: &RunConfig, run: RunDir) -> Result<()> {
    let model = c.load_model()?;
    let eval = c.load(Split::Test, c.eval_subset)?;
    let attacks = c.attack_configs()?;
    let report = evaluate_robustness(&model, &eval, &attacks, c.batch_size, c.seed)?;
    let (mut columns, mut values) = (report.columns(), report.values());
    if c.save_archive {
        for a in &attacks {
            let batch = attack_dataset(&model, &eval, a, c.batch_size, c.seed)?;
            let archive = AdversarialArchive {
                meta: ArchiveMeta {
                    format_version: ARCHIVE_VERSION,
                    norm: a.norm,
                    epsilon: a.epsilon,
                    attack: a.label(),
                },
                batch,
            };
            archive.write(&run.root.join("archives").join(a.label()))?;
        }
    }
    if let Some(dir) = &c.archive {
        let archive = AdversarialArchive::read(dir)?;
        if archive.batch.data.shape() == eval.data.shape() {
            let budget = archive.validate(&eval)?;
            if !budget.ok() {
                warn!(
                    "{} archive samples exceed the declared budget or mismatch labels (max perturbation {:.6})",
                    budget.violations.len(),
                    budget.max_perturbation
                );
            }
            run.metrics.append(&serde_json::json!({ "archive_budget": budget }))?;
        } else {
            warn!("archive shape differs from the evaluation set; budget not checked");
        }
        columns.push(format!("{} (archive)", archive.meta.attack));
        values.push(Some(clean_accuracy(&model, &archive.batch, c.batch_size)?));
    }
    let mut table = ResultsTable::new("Robust accuracy (%)", "Model", columns);
    table.push(model.descriptor().name(), values)?;
    run.metrics.append(&report)?;
    run.emit(&table, "results")?;
    let objectives = c.objective_list()?;
    if !objectives.is_empty() {
        let adaptive = adaptive_attack_eval(&model, &eval, &objectives, c.batch_size, c.seed)?;
        run.metrics.append(&adaptive)?;
        run.emit(&adaptive.table()?, "results-adaptive")?;
    }
    Ok(())
}

fn run_svd_swap(c: &RunConfig, run: RunDir) -> Result<()> {
    let model = c.load_model()?;
    let eval = c.load(Split::Test, c.eval_subset)?;
    let attacks = c.attack_configs()?;
    let mut table = ResultsTable::new(
        "Singular-value swap (%)",
        "Attack",
        vec!["Robust".into(), "Swapped".into(), "Gain".into()],
    );
    for a in &attacks {
        let r = svd_swap_experiment(&model, &eval, a, c.batch_size, c.seed)?;
        run.metrics.append(&serde_json::json!({ "attack": a.label(), "result": r }))?;
        table.push(a.label(), vec![Some(r.robust), Some(r.swapped), Some(r.gain())])?;
    }
    if let Some(a) = attacks.first() {
        let n = c.images.min(eval.len());
        if n > 0 {
            swap_panels(&model, &eval.slice(0, n), a, c.seed, &run.images())?;
        }
    }
    run.emit(&table, "results")
}

fn run_sr_visualize(c: &RunConfig, run: RunDir) -> Result<()> {
    let model = c.load_model()?;
    let eval = c.load(Split::Test, c.images.max(CIFAR_CLASSES))?;
    let attack = c.attack_configs()?.into_iter().next().unwrap_or_else(AttackConfig::pgd20);
    let n = c.images.min(eval.len()).max(1);
    let (paths, (lo, hi)) = sr_panels(&model, &eval.slice(0, n), &attack, c.seed, &run.images())?;
    info!("wrote {} panels to {}", paths.len(), run.images().display());
    let mut table = ResultsTable::new("x_avg of adversarial inputs", "Attack", vec!["min".into(), "max".into()]);
    table.push(attack.label(), vec![Some(lo), Some(hi)])?;
    run.emit(&table, "results")
}

fn run_grey_box(c: &RunConfig, run: RunDir) -> Result<()> {
    let model = c.load_model()?;
    let train = c.load(Split::Train, c.train_subset)?;
    let eval = c.load(Split::Test, c.eval_subset)?;
    let scales = MultiScaleConfig {
        resolutions: c.scales.clone(),
    };
    let purifier = SrPurifier::new(&scales, model.descriptor().backbone.resolution, model.dtype(), model.device(), c.seed)?;
    let config = PurifierTrainConfig {
        epochs: c.purifier_epochs,
        batch_size: c.batch_size,
        sgd: SgdConfig {
            lr: c.purifier_lr,
            ..SgdConfig::default()
        },
        attack: AttackConfig::train().with_steps(c.train_attack_steps),
        lambda2: c.lambda2,
        seed: c.seed,
    };
    for (epoch, loss) in train_purifier(&purifier, &model, &train, &config)?.into_iter().enumerate() {
        run.metrics.append(&serde_json::json!({ "epoch": epoch, "purifier_loss": loss }))?;
    }
    let attacks = c.attack_configs()?;
    let mut columns = vec!["Clean Accuracy".to_string()];
    let (mut plain, mut purified) = (Vec::new(), Vec::new());
    for (k, a) in attacks.iter().enumerate() {
        let r = grey_box_sr_eval(&purifier, &model, &eval, a, c.batch_size, c.seed)?;
        run.metrics.append(&serde_json::json!({ "attack": a.label(), "result": r }))?;
        if k == 0 {
            plain.push(Some(r.clean_x));
            purified.push(Some(r.clean_x_avg));
        }
        columns.push(a.label());
        plain.push(Some(r.robust_x_adv));
        purified.push(Some(r.robust_x_avg));
    }
    if attacks.is_empty() {
        let x = eval.to_tensor(model.dtype(), model.device())?;
        let purified_batch = ImageBatch::new(
            crate::batch::tensor_to_array(&purifier.purify(&x, crate::nn::Mode::Eval)?)?,
            eval.labels.clone(),
        )?;
        plain.push(Some(clean_accuracy(&model, &eval, c.batch_size)?));
        purified.push(Some(clean_accuracy(&model, &purified_batch, c.batch_size)?));
    }
    let mut table = ResultsTable::new("Grey-box SR purification (%)", "Input", columns);
    table.push("x or x_adv", plain)?;
    table.push("x_avg", purified)?;
    run.emit(&table, "results")
}

fn run_param_count(c: &RunConfig, run: RunDir) -> Result<()> {
    let instrumented_desc = RunConfig {
        siriib: true,
        ..c.clone()
    }
    .descriptor()?;
    let base = Classifier::new(instrumented_desc.clone().with_siriib(None), DType::F32, &Device::Cpu, c.seed)?;
    let inst = Classifier::new(instrumented_desc, DType::F32, &Device::Cpu, c.seed)?;
    let overhead = count_overhead(&base, &inst);
    run.metrics.append(&overhead)?;
    run.emit(&overhead.table()?, "results")?;
    println!(
        "SiRIIB overhead: {:.2}% parameters, {:.2}% multiply-adds",
        100.0 * overhead.param_fraction(),
        100.0 * overhead.mac_fraction()
    );
    Ok(())
}

fn run_ablate(c: &RunConfig, run: RunDir) -> Result<()> {
    let mut axes = Vec::new();
    if !c.ablate_lambda1.is_empty() {
        axes.push(("results", AblationAxis::Lambda1(c.ablate_lambda1.clone())));
    }
    if !c.ablate_projections.is_empty() {
        let stem = if axes.is_empty() { "results" } else { "results-projections" };
        axes.push((stem, AblationAxis::Projections(c.ablate_projections.clone())));
    }
    if axes.is_empty() {
        return Err(Error::Config("ablate needs --lambda1 or --projections values".into()));
    }
    let attack = c.attack_configs()?.into_iter().next().unwrap_or_else(AttackConfig::pgd20);
    let descriptor = RunConfig {
        siriib: true,
        ..c.clone()
    }
    .descriptor()?;
    let configs: Vec<_> = axes
        .into_iter()
        .map(|(stem, axis)| {
            (
                stem,
                AblationConfig {
                    axis,
                    train: c.train_config().expect("validated"),
                    descriptor: descriptor.clone(),
                    attack: attack.clone(),
                    eval_batch: c.batch_size,
                },
            )
        })
        .collect();
    let train = c.load(Split::Train, c.train_subset)?;
    let eval = c.load(Split::Test, c.eval_subset)?;
    for (stem, config) in configs {
        let table = run_ablation(&config, &train, &eval, Some(&run.checkpoints()))?;
        run.metrics.append(&table)?;
        run.emit(&table, stem)?;
    }
    Ok(())
}

fn dispatch(c: &RunConfig, run: RunDir) -> Result<()> {
    match c.command.as_str() {
        "train" => run_train(c, run),
        "attack-eval" => run_attack_eval(c, run),
        "svd-swap" => run_svd_swap(c, run),
        "sr-visualize" => run_sr_visualize(c, run),
        "grey-box" => run_grey_box(c, run),
        "param-count" => run_param_count(c, run),
        "ablate" => run_ablate(c, run),
        other => Err(Error::Config(format!("unknown command {other:?}"))),
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::MissingSiriib(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parse `args` (program name first), run the command and return the exit
/// status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    let config = match RunConfig::resolve(&cli.command) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let outcome = RunDir::create(&config).and_then(|run| {
        println!("run directory: {}", run.root.display());
        dispatch(&config, run)
    });
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
