//! The SiRIIB side branch.
//!
//! ```text
//! x ──┬─ resize 32 ─ SR ─ sigmoid ─ resize 32 ─┐
//!     ├─ resize 24 ─ SR ─ sigmoid ─ resize 32 ─┤ mean = x_avg ─ c(.) ─┬─ p_1 ─ f_1 ─> tap 0
//!     ├─ resize 16 ─ SR ─ sigmoid ─ resize 32 ─┤                     ├─ p_2 ─ f_2 ─> tap 1
//!     └─ resize  8 ─ SR ─ sigmoid ─ resize 32 ─┘                     └─ p_3 ─ f_3 ─> tap 2
//! ```
//!
//! The sigmoid bounds `x_avg` to `(0, 1)`, which is what makes the branch an
//! information-bottleneck skip connection `g2 . sigmoid . g1`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::TapShape;
use crate::error::{Error, Result};
use crate::nn::{bilinear_resize, sigmoid, BatchNorm2d, Conv2d, ConvInit, Mode, ParamStore};
use crate::sr::SrBlock;

/// Deeper configurations do not converge, so the plan is capped here.
pub const MAX_INJECTIONS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiScaleConfig {
    /// Side lengths, native resolution first, strictly decreasing.
    pub resolutions: Vec<usize>,
}

impl Default for MultiScaleConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![32, 24, 16, 8],
        }
    }
}

impl MultiScaleConfig {
    pub fn validate(&self, native: usize) -> Result<()> {
        match self.resolutions.first() {
            Some(&r) if r == native => {}
            _ => {
                return Err(Error::Config(format!(
                    "first scale must equal the native resolution {native}, got {:?}",
                    self.resolutions
                )))
            }
        }
        if self.resolutions.windows(2).any(|w| w[1] >= w[0]) || self.resolutions.contains(&0) {
            return Err(Error::Config(format!(
                "scales must be positive and strictly decreasing: {:?}",
                self.resolutions
            )));
        }
        Ok(())
    }
}

/// Backbone taps receiving `f_1, f_2, ...` in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureInjectionPlan {
    pub taps: Vec<usize>,
}

impl Default for FeatureInjectionPlan {
    fn default() -> Self {
        Self { taps: vec![0, 1, 2] }
    }
}

impl FeatureInjectionPlan {
    /// The shallowest `count` taps, starting at the stem.
    pub fn shallowest(count: usize) -> Result<Self> {
        let plan = Self {
            taps: (0..count).collect(),
        };
        plan.validate(usize::MAX)?;
        Ok(plan)
    }

    pub fn validate(&self, available_taps: usize) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::Config("injection plan needs at least one tap".into()));
        }
        if self.taps.len() > MAX_INJECTIONS {
            return Err(Error::Config(format!(
                "{} injection taps requested; at most {MAX_INJECTIONS} are supported",
                self.taps.len()
            )));
        }
        if self.taps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!("taps must be strictly increasing: {:?}", self.taps)));
        }
        if let Some(&last) = self.taps.last() {
            if last >= available_taps {
                return Err(Error::Config(format!("tap {last} does not exist in the backbone")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiriibConfig {
    pub scales: MultiScaleConfig,
    pub extractor_channels: [usize; 3],
    pub plan: FeatureInjectionPlan,
}

impl Default for SiriibConfig {
    fn default() -> Self {
        Self {
            scales: MultiScaleConfig::default(),
            extractor_channels: [16, 32, 64],
            plan: FeatureInjectionPlan::default(),
        }
    }
}

/// Multiscale SR stack producing `x_avg`. Also used on its own as an input
/// purifier in the grey-box protocol.
#[derive(Clone)]
pub struct SrFrontEnd {
    blocks: Vec<SrBlock>,
    native: usize,
}

impl SrFrontEnd {
    pub fn new(store: &mut ParamStore, path: &str, scales: &MultiScaleConfig, native: usize) -> Result<Self> {
        scales.validate(native)?;
        let blocks = scales
            .resolutions
            .iter()
            .enumerate()
            .map(|(i, &r)| SrBlock::new(store, &format!("{path}.{i}"), r))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks, native })
    }

    pub fn native(&self) -> usize {
        self.native
    }

    pub fn blocks(&self) -> &[SrBlock] {
        &self.blocks
    }

    /// `x_avg = mean_s resize_up(sigmoid(SR_s(resize_down_s(x))))`.
    pub fn x_avg(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if h != self.native || w != self.native || c != 3 {
            return Err(Error::shape("SR front end input", &[3, self.native, self.native], &[c, h, w]));
        }
        let mut acc: Option<Tensor> = None;
        for block in &self.blocks {
            let down = bilinear_resize(x, block.size())?;
            let squashed = sigmoid(&block.forward(&down, mode)?)?;
            let up = bilinear_resize(&squashed, self.native)?;
            acc = Some(match acc {
                Some(a) => (a + up)?,
                None => up,
            });
        }
        let sum = acc.ok_or_else(|| Error::Config("no SR scales".into()))?;
        Ok((sum / self.blocks.len() as f64)?)
    }

    /// Sum of the orthogonality penalties of every block.
    pub fn penalty(&self) -> Result<Tensor> {
        let mut terms = self.blocks.iter().map(|b| b.penalty());
        let first = terms.next().ok_or_else(|| Error::Config("no SR scales".into()))??;
        terms.try_fold(first, |acc, t| Ok((acc + t?)?))
    }

    pub fn macs(&self) -> u64 {
        self.blocks.iter().map(SrBlock::macs).sum()
    }
}

/// `c(.)`: three padded 3x3 convolutions, each followed by batch norm and ReLU.
#[derive(Clone)]
pub struct FeatureExtractor {
    layers: Vec<(Conv2d, BatchNorm2d)>,
    size: usize,
}

impl FeatureExtractor {
    pub fn new(store: &mut ParamStore, path: &str, channels: [usize; 3], size: usize) -> Result<Self> {
        let mut in_ch = 3;
        let mut layers = Vec::new();
        for (i, &out) in channels.iter().enumerate() {
            layers.push((
                Conv2d::new(store, &format!("{path}.{i}.conv"), in_ch, out, 3, 1, 1, false, ConvInit::KaimingFanOut)?,
                BatchNorm2d::new(store, &format!("{path}.{i}.bn"), out)?,
            ));
            in_ch = out;
        }
        Ok(Self { layers, size })
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map(|(c, _)| c.out_channels()).unwrap_or(3)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.layers.iter().try_fold(x.clone(), |h, (conv, bn)| {
            Ok(bn.forward(&conv.forward(&h)?, mode)?.relu()?)
        })
    }

    pub fn macs(&self) -> u64 {
        let s = self.size;
        self.layers.iter().map(|(c, b)| c.macs(s, s) + b.macs(s, s)).sum()
    }
}

/// `p_i(.)`: one 3x3 convolution to the tap's width, then a resize to the
/// tap's spatial size when it is smaller than the native resolution.
#[derive(Clone)]
pub struct Projection {
    pub conv: Conv2d,
    pub target: TapShape,
    size: usize,
}

impl Projection {
    /// Zero-initialized, so a fresh module leaves the backbone unchanged.
    pub fn new(store: &mut ParamStore, path: &str, in_ch: usize, target: TapShape, size: usize) -> Result<Self> {
        if target.size > size {
            return Err(Error::Config(format!(
                "tap resolution {} exceeds the SiRIIB resolution {size}",
                target.size
            )));
        }
        Ok(Self {
            conv: Conv2d::new(store, path, in_ch, target.channels, 3, 1, 1, true, ConvInit::Zeros)?,
            target,
            size,
        })
    }

    pub fn forward(&self, deep: &Tensor) -> Result<Tensor> {
        let f = self.conv.forward(deep)?;
        bilinear_resize(&f, self.target.size)
    }

    pub fn macs(&self) -> u64 {
        self.conv.macs(self.size, self.size)
    }
}

/// Intermediate SiRIIB tensors for one batch.
pub struct SiriibOutput {
    pub x_avg: Tensor,
    /// `f_i`, in plan order.
    pub features: Vec<Tensor>,
}

#[derive(Clone)]
pub struct Siriib {
    pub front: SrFrontEnd,
    pub extractor: FeatureExtractor,
    pub projections: Vec<Projection>,
    plan: FeatureInjectionPlan,
}

impl Siriib {
    pub fn new(store: &mut ParamStore, path: &str, config: &SiriibConfig, taps: &[TapShape], native: usize) -> Result<Self> {
        config.plan.validate(taps.len())?;
        let front = SrFrontEnd::new(store, &format!("{path}.sr"), &config.scales, native)?;
        let extractor = FeatureExtractor::new(store, &format!("{path}.extractor"), config.extractor_channels, native)?;
        let projections = config
            .plan
            .taps
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                Projection::new(store, &format!("{path}.proj{}", i + 1), extractor.out_channels(), taps[t], native)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            front,
            extractor,
            projections,
            plan: config.plan.clone(),
        })
    }

    pub fn plan(&self) -> &FeatureInjectionPlan {
        &self.plan
    }

    pub fn compute_x_avg(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.front.x_avg(x, mode)
    }

    pub fn extract_features(&self, x_avg: &Tensor, mode: Mode) -> Result<Tensor> {
        self.extractor.forward(x_avg, mode)
    }

    /// `f_{index+1} = p_{index+1}(deep)`.
    pub fn project_feature(&self, deep: &Tensor, index: usize) -> Result<Tensor> {
        let p = self.projections.get(index).ok_or_else(|| {
            Error::Config(format!("projection {} not in plan of {}", index + 1, self.projections.len()))
        })?;
        p.forward(deep)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<SiriibOutput> {
        let x_avg = self.compute_x_avg(x, mode)?;
        let deep = self.extract_features(&x_avg, mode)?;
        let features = (0..self.projections.len())
            .map(|i| self.project_feature(&deep, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(SiriibOutput { x_avg, features })
    }

    /// Pair each `f_i` with its backbone tap.
    pub fn injections(&self, features: &[Tensor]) -> Vec<(usize, Tensor)> {
        self.plan.taps.iter().copied().zip(features.iter().cloned()).collect()
    }

    pub fn penalty(&self) -> Result<Tensor> {
        self.front.penalty()
    }

    pub fn macs(&self) -> u64 {
        self.front.macs() + self.extractor.macs() + self.projections.iter().map(Projection::macs).sum::<u64>()
    }
}
