//! Projected gradient attacks in `[0, 1]` pixel space.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{loss_info, loss_svd};
use crate::model::Classifier;
use crate::nn::{cross_entropy, one_hot, Mode};
use crate::assembly::SiriibOutput;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Norm {
    Linf,
    L2,
}

/// Quantity the attacker maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    Ce,
    Cw,
    Svd,
    Info,
    CeSvd,
    CeInfo,
    CeSvdInfo,
}

impl Objective {
    pub const ALL: [Objective; 7] = [
        Objective::Ce,
        Objective::Cw,
        Objective::Svd,
        Objective::Info,
        Objective::CeSvd,
        Objective::CeInfo,
        Objective::CeSvdInfo,
    ];

    fn parts(self) -> (bool, bool, bool) {
        // (cross-entropy, L_svd, L_info)
        match self {
            Objective::Ce | Objective::Cw => (self == Objective::Ce, false, false),
            Objective::Svd => (false, true, false),
            Objective::Info => (false, false, true),
            Objective::CeSvd => (true, true, false),
            Objective::CeInfo => (true, false, true),
            Objective::CeSvdInfo => (true, true, true),
        }
    }

    pub fn needs_siriib(self) -> bool {
        let (_, s, i) = self.parts();
        s || i
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Ce => "ce",
            Objective::Cw => "cw",
            Objective::Svd => "svd",
            Objective::Info => "info",
            Objective::CeSvd => "ce+svd",
            Objective::CeInfo => "ce+info",
            Objective::CeSvdInfo => "ce+svd+info",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown attack objective {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub norm: Norm,
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub objective: Objective,
    pub random_start: bool,
}

impl AttackConfig {
    fn linf(steps: usize, objective: Objective) -> Self {
        Self {
            norm: Norm::Linf,
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            steps,
            objective,
            random_start: true,
        }
    }

    /// The attack used to generate training examples.
    pub fn train() -> Self {
        Self::linf(10, Objective::Ce)
    }

    pub fn pgd20() -> Self {
        Self::linf(20, Objective::Ce)
    }

    pub fn pgd100() -> Self {
        Self::linf(100, Objective::Ce)
    }

    pub fn cw100() -> Self {
        Self::linf(100, Objective::Cw)
    }

    pub fn l2_pgd20() -> Self {
        Self {
            norm: Norm::L2,
            epsilon: 0.5,
            step_size: 0.1,
            ..Self::pgd20()
        }
    }

    pub fn adaptive(objective: Objective) -> Self {
        Self::linf(20, objective)
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.steps > 0 && !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::Config(format!("step size must be > 0, got {}", self.step_size)));
        }
        Ok(())
    }

    /// Short label for result tables, e.g. `PGD-20` or `CW-100`.
    pub fn label(&self) -> String {
        let base = match self.objective {
            Objective::Ce => "PGD".to_string(),
            Objective::Cw => "CW".to_string(),
            o => format!("PGD[{o}]"),
        };
        let norm = if self.norm == Norm::L2 { "-L2" } else { "" };
        format!("{base}-{}{norm}", self.steps)
    }
}

/// Iterates and objective values of a traced attack. `objectives[k]` is the
/// objective at `iterates[k]`; the last entry belongs to the returned point.
pub struct PgdTrace {
    pub iterates: Vec<Tensor>,
    pub objectives: Vec<f64>,
}

fn per_sample_norms(t: &Tensor) -> Result<Tensor> {
    let n = t.dims()[0];
    Ok(t.reshape((n, ()))?.sqr()?.sum_keepdim(1)?.sqrt()?)
}

fn broadcast_rows(scale: &Tensor, like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![like.dims()[0]];
    shape.extend(std::iter::repeat_n(1, like.rank() - 1));
    Ok(scale.reshape(shape)?.broadcast_as(like.shape())?)
}

fn sign(g: &Tensor) -> Result<Tensor> {
    let pos = g.gt(0.0)?.to_dtype(g.dtype())?;
    let neg = g.lt(0.0)?.to_dtype(g.dtype())?;
    Ok(pos.sub(&neg)?)
}

/// Project `x_adv` onto the `eps`-ball around `x`, then onto `[0, 1]`.
pub fn project(x_adv: &Tensor, x: &Tensor, norm: Norm, eps: f64) -> Result<Tensor> {
    let out = match norm {
        Norm::Linf => x_adv.maximum(&(x - eps)?)?.minimum(&(x + eps)?)?,
        Norm::L2 => {
            let delta = x_adv.sub(x)?;
            let norms = per_sample_norms(&delta)?;
            // radial rescale of rows whose norm exceeds eps
            let over = norms.gt(eps)?;
            let factor = over.where_cond(&(norms.recip()? * eps)?.minimum(1.0)?, &norms.ones_like()?)?;
            x.add(&delta.mul(&broadcast_rows(&factor, &delta)?)?)?
        }
    };
    // clipping moves every coordinate toward x, so the ball constraint survives
    Ok(out.clamp(0.0, 1.0)?)
}

fn random_start(x: &Tensor, cfg: &AttackConfig, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = x.elem_count();
    let delta: Vec<f64> = match cfg.norm {
        Norm::Linf => {
            let u = Uniform::new_inclusive(-cfg.epsilon, cfg.epsilon).map_err(|e| Error::Config(e.to_string()))?;
            (0..n).map(|_| u.sample(&mut rng)).collect()
        }
        Norm::L2 => {
            // direction uniform on the sphere, radius eps * u^(1/d)
            let rows = x.dims()[0];
            let d = n / rows.max(1);
            let mut out = Vec::with_capacity(n);
            for _ in 0..rows {
                let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                let r = cfg.epsilon * rand::Rng::random::<f64>(&mut rng).powf(1.0 / d as f64);
                out.extend(g.iter().map(|v| v / norm * r));
            }
            out
        }
    };
    let delta = Tensor::from_vec(delta, x.shape(), x.device())?.to_dtype(x.dtype())?;
    project(&x.add(&delta)?, x, cfg.norm, cfg.epsilon)
}

fn run<F>(x: &Tensor, cfg: &AttackConfig, seed: u64, mut objective: F, traced: bool) -> Result<(Tensor, Option<PgdTrace>)>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    cfg.validate()?;
    let x = x.detach();
    let mut x_adv = if cfg.random_start && cfg.epsilon > 0.0 {
        random_start(&x, cfg, seed)?
    } else {
        x.clone()
    };
    let mut trace = traced.then(|| PgdTrace {
        iterates: vec![x_adv.clone()],
        objectives: Vec::new(),
    });
    if cfg.epsilon == 0.0 {
        if let Some(t) = trace.as_mut() {
            t.objectives.push(scalar_objective(&mut objective, &x_adv)?);
        }
        return Ok((x, trace));
    }
    for _ in 0..cfg.steps {
        let var = Var::from_tensor(&x_adv)?;
        let loss = objective(var.as_tensor())?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFinite { what: "attack objective" });
        }
        if let Some(t) = trace.as_mut() {
            t.objectives.push(value);
        }
        let grads = loss.backward()?;
        let Some(g) = grads.get(var.as_tensor()) else {
            // no dependence on the input: the step is a no-op
            if let Some(t) = trace.as_mut() {
                t.iterates.push(x_adv.clone());
            }
            continue;
        };
        let step = match cfg.norm {
            Norm::Linf => (sign(g)? * cfg.step_size)?,
            Norm::L2 => {
                let norms = (per_sample_norms(g)? + 1e-12)?;
                (g.div(&broadcast_rows(&norms, g)?)? * cfg.step_size)?
            }
        };
        x_adv = project(&x_adv.add(&step)?, &x, cfg.norm, cfg.epsilon)?.detach();
        if let Some(t) = trace.as_mut() {
            t.iterates.push(x_adv.clone());
        }
    }
    if let Some(t) = trace.as_mut() {
        t.objectives.push(scalar_objective(&mut objective, &x_adv)?);
    }
    Ok((x_adv, trace))
}

fn scalar_objective<F: FnMut(&Tensor) -> Result<Tensor>>(objective: &mut F, x: &Tensor) -> Result<f64> {
    Ok(objective(x)?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Generic PGD: ascend `objective` (a scalar-valued function of the input)
/// from `x` within the configured ball. `seed` drives the random start.
pub fn pgd<F>(x: &Tensor, cfg: &AttackConfig, seed: u64, objective: F) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    Ok(run(x, cfg, seed, objective, false)?.0)
}

/// Like [`pgd`], also returning every iterate and its objective value.
pub fn pgd_traced<F>(x: &Tensor, cfg: &AttackConfig, seed: u64, objective: F) -> Result<(Tensor, PgdTrace)>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let (x_adv, trace) = run(x, cfg, seed, objective, true)?;
    Ok((x_adv, trace.expect("traced run")))
}

/// C&W margin objective `−(z_y − max_{j≠y} z_j)`, batch-averaged, κ = 0.
pub fn cw_margin(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let (_, classes) = logits.dims2()?;
    let mask = one_hot(labels, classes, logits.dtype())?;
    let z_y = logits.mul(&mask)?.sum(D::Minus1)?;
    let others = logits.sub(&(mask * 1e30)?)?.max(D::Minus1)?;
    Ok(others.sub(&z_y)?.mean_all()?)
}

/// Attack objective bound to a model, a clean batch and its labels. The clean
/// SiRIIB internals are computed once, in evaluation mode.
pub struct AdaptiveObjective<'a> {
    model: &'a Classifier,
    labels: Tensor,
    selector: Objective,
    clean: Option<SiriibOutput>,
}

impl<'a> AdaptiveObjective<'a> {
    pub fn new(model: &'a Classifier, x_clean: &Tensor, labels: &Tensor, selector: Objective) -> Result<Self> {
        let clean = if selector.needs_siriib() {
            let s = model.siriib().ok_or(Error::MissingSiriib("adaptive attack objective"))?;
            let out = s.forward(&x_clean.detach(), Mode::Eval)?;
            Some(SiriibOutput {
                x_avg: out.x_avg.detach(),
                features: out.features.iter().map(Tensor::detach).collect(),
            })
        } else {
            None
        };
        Ok(Self {
            model,
            labels: labels.clone(),
            selector,
            clean,
        })
    }

    pub fn evaluate(&self, x_cand: &Tensor) -> Result<Tensor> {
        let out = self.model.forward(x_cand, Mode::Eval)?;
        if self.selector == Objective::Cw {
            return cw_margin(&out.logits, &self.labels);
        }
        let (ce, svd, info) = self.selector.parts();
        let mut terms = Vec::new();
        if ce {
            terms.push(cross_entropy(&out.logits, &self.labels)?);
        }
        if let (Some(clean), Some(side)) = (&self.clean, &out.siriib) {
            if svd {
                terms.push(loss_svd(&side.x_avg, &clean.x_avg)?);
            }
            if info {
                terms.push(loss_info(&side.features, &clean.features)?);
            }
        }
        let mut total = terms.pop().ok_or(Error::MissingSiriib("adaptive attack objective"))?;
        for t in terms {
            total = total.add(&t)?;
        }
        Ok(total)
    }
}

/// One-shot evaluation of a selector at `x_cand`.
pub fn adaptive_objective(
    model: &Classifier,
    x_cand: &Tensor,
    x_clean: &Tensor,
    labels: &Tensor,
    selector: Objective,
) -> Result<Tensor> {
    AdaptiveObjective::new(model, x_clean, labels, selector)?.evaluate(x_cand)
}

/// White-box PGD against `model` in evaluation mode.
pub fn pgd_attack(model: &Classifier, x: &Tensor, labels: &Tensor, cfg: &AttackConfig, seed: u64) -> Result<Tensor> {
    let objective = AdaptiveObjective::new(model, x, labels, cfg.objective)?;
    pgd(x, cfg, seed, |c| objective.evaluate(c))
}
