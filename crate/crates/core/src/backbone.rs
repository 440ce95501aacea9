//! CIFAR-resolution ResNet with ordered feature taps.
//!
//! Tap 0 is the stem output (3x3 convolution, batch norm, ReLU) and taps
//! 1..=4 are the outputs of the four residual stages. Features supplied for
//! a tap are added to it before the next stage consumes it.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ConvInit, Linear, Mode, ParamStore};

/// Per-channel input standardization applied as the first model operation,
/// so that every attack works in raw `[0, 1]` pixel space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub const CIFAR10: Normalization = Normalization {
        mean: [0.4914, 0.4822, 0.4465],
        std: [0.2471, 0.2435, 0.2616],
    };
}

impl Default for Normalization {
    fn default() -> Self {
        Self::CIFAR10
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub widths: [usize; 4],
    pub blocks: [usize; 4],
    pub num_classes: usize,
    pub resolution: usize,
}

impl BackboneConfig {
    /// CIFAR ResNet-18: 3x3 stem without max-pool, 2 basic blocks per stage.
    pub fn resnet18(num_classes: usize) -> Self {
        Self {
            widths: [64, 128, 256, 512],
            blocks: [2, 2, 2, 2],
            num_classes,
            resolution: 32,
        }
    }

    /// Same topology with narrow stages, for tests and quick experiments.
    pub fn narrow(base_width: usize, num_classes: usize) -> Self {
        Self {
            widths: [base_width, 2 * base_width, 4 * base_width, 8 * base_width],
            blocks: [2, 2, 2, 2],
            num_classes,
            resolution: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.blocks.contains(&0) {
            return Err(Error::Config("backbone widths and block counts must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.resolution % 8 != 0 {
            return Err(Error::Config("resolution must be divisible by 8".into()));
        }
        Ok(())
    }

    /// `(channels, side)` of every tap, in depth order.
    pub fn tap_shapes(&self) -> Vec<TapShape> {
        let mut shapes = vec![TapShape {
            channels: self.widths[0],
            size: self.resolution,
        }];
        let mut size = self.resolution;
        for (stage, &w) in self.widths.iter().enumerate() {
            if stage > 0 {
                size /= 2;
            }
            shapes.push(TapShape { channels: w, size });
        }
        shapes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapShape {
    pub channels: usize,
    pub size: usize,
}

#[derive(Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(store: &mut ParamStore, path: &str, in_ch: usize, out_ch: usize, stride: usize) -> Result<Self> {
        let k = ConvInit::KaimingFanOut;
        let shortcut = if stride != 1 || in_ch != out_ch {
            Some((
                Conv2d::new(store, &format!("{path}.shortcut.conv"), in_ch, out_ch, 1, stride, 0, false, k)?,
                BatchNorm2d::new(store, &format!("{path}.shortcut.bn"), out_ch)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{path}.conv1"), in_ch, out_ch, 3, stride, 1, false, k)?,
            bn1: BatchNorm2d::new(store, &format!("{path}.bn1"), out_ch)?,
            conv2: Conv2d::new(store, &format!("{path}.conv2"), out_ch, out_ch, 3, 1, 1, false, k)?,
            bn2: BatchNorm2d::new(store, &format!("{path}.bn2"), out_ch)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?, mode)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }

    fn macs(&self, in_size: usize) -> u64 {
        let out = self.conv1.out_size(in_size);
        let mut total = self.conv1.macs(out, out)
            + self.bn1.macs(out, out)
            + self.conv2.macs(out, out)
            + self.bn2.macs(out, out);
        if let Some((conv, bn)) = &self.shortcut {
            total += conv.macs(out, out) + bn.macs(out, out);
        }
        total
    }
}

/// Output of a backbone pass.
pub struct BackboneOutput {
    pub logits: Tensor,
    /// Tap features after any injection, in depth order.
    pub taps: Vec<Tensor>,
}

#[derive(Clone)]
pub struct ResNet {
    config: BackboneConfig,
    normalization: Normalization,
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<BasicBlock>>,
    fc: Linear,
    mean: Tensor,
    inv_std: Tensor,
}

impl ResNet {
    pub fn new(
        store: &mut ParamStore,
        path: &str,
        config: &BackboneConfig,
        normalization: Normalization,
    ) -> Result<Self> {
        config.validate()?;
        let k = ConvInit::KaimingFanOut;
        let stem_conv = Conv2d::new(store, &format!("{path}.stem.conv"), 3, config.widths[0], 3, 1, 1, false, k)?;
        let stem_bn = BatchNorm2d::new(store, &format!("{path}.stem.bn"), config.widths[0])?;
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = config.widths[0];
        for (s, (&w, &n)) in config.widths.iter().zip(&config.blocks).enumerate() {
            let mut blocks = Vec::with_capacity(n);
            for b in 0..n {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(store, &format!("{path}.layer{}.{b}", s + 1), in_ch, w, stride)?);
                in_ch = w;
            }
            stages.push(blocks);
        }
        let fc = Linear::new(store, &format!("{path}.fc"), in_ch, config.num_classes)?;
        let dev = store.device().clone();
        let mean = Tensor::from_vec(normalization.mean.to_vec(), (1, 3, 1, 1), &dev)?.to_dtype(store.dtype())?;
        let inv_std = Tensor::from_vec(normalization.std.map(|s| 1.0 / s).to_vec(), (1, 3, 1, 1), &dev)?
            .to_dtype(store.dtype())?;
        Ok(Self {
            config: config.clone(),
            normalization,
            stem_conv,
            stem_bn,
            stages,
            fc,
            mean,
            inv_std,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn tap_shapes(&self) -> Vec<TapShape> {
        self.config.tap_shapes()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let r = self.config.resolution;
        if c != 3 || h != r || w != r {
            return Err(Error::shape("backbone input", &[3, r, r], &[c, h, w]));
        }
        Ok(())
    }

    pub fn forward_with_taps(&self, x: &Tensor, mode: Mode) -> Result<BackboneOutput> {
        self.forward_injected(x, mode, &[])
    }

    /// Forward pass adding `feature` to tap `index` for every `(index, feature)`.
    pub fn forward_injected(&self, x: &Tensor, mode: Mode, injections: &[(usize, Tensor)]) -> Result<BackboneOutput> {
        self.check_input(x)?;
        let shapes = self.tap_shapes();
        for (tap, f) in injections {
            let shape = shapes
                .get(*tap)
                .ok_or_else(|| Error::Config(format!("no backbone tap {tap}")))?;
            let (n, c, h, w) = f.dims4()?;
            if (c, h, w) != (shape.channels, shape.size, shape.size) || n != x.dims()[0] {
                return Err(Error::shape(
                    "injected feature",
                    &[x.dims()[0], shape.channels, shape.size, shape.size],
                    f.dims(),
                ));
            }
        }
        let inject = |tap: usize, h: Tensor| -> Result<Tensor> {
            injections
                .iter()
                .filter(|(t, _)| *t == tap)
                .try_fold(h, |acc, (_, f)| Ok((acc + f)?))
        };

        let normalized = x.broadcast_sub(&self.mean)?.broadcast_mul(&self.inv_std)?;
        let mut h = self.stem_bn.forward(&self.stem_conv.forward(&normalized)?, mode)?.relu()?;
        h = inject(0, h)?;
        let mut taps = vec![h.clone()];
        for (s, stage) in self.stages.iter().enumerate() {
            for block in stage {
                h = block.forward(&h, mode)?;
            }
            h = inject(s + 1, h)?;
            taps.push(h.clone());
        }
        let pooled = h.mean(D::Minus1)?.mean(D::Minus1)?;
        let logits = self.fc.forward(&pooled)?;
        Ok(BackboneOutput { logits, taps })
    }

    /// Multiply-adds for one sample: convolutions, batch norms and the head.
    pub fn macs(&self) -> u64 {
        let r = self.config.resolution;
        let mut total = self.stem_conv.macs(r, r) + self.stem_bn.macs(r, r);
        let mut size = r;
        for stage in &self.stages {
            for block in stage {
                total += block.macs(size);
                size = block.conv1.out_size(size);
            }
        }
        total + self.fc.macs()
    }
}
