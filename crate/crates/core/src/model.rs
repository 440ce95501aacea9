//! A residual classifier with an optional SiRIIB branch.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, Normalization, ResNet};
use crate::error::{Error, Result};
use crate::nn::{Mode, ParamStore};
use crate::assembly::{Siriib, SiriibConfig, SiriibOutput};

/// Everything needed to rebuild a model before loading its tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    pub backbone: BackboneConfig,
    pub siriib: Option<SiriibConfig>,
    pub normalization: Normalization,
}

impl ArchitectureDescriptor {
    pub fn resnet18(num_classes: usize) -> Self {
        Self {
            backbone: BackboneConfig::resnet18(num_classes),
            siriib: None,
            normalization: Normalization::CIFAR10,
        }
    }

    pub fn resnet18_sr(num_classes: usize) -> Self {
        Self {
            siriib: Some(SiriibConfig::default()),
            ..Self::resnet18(num_classes)
        }
    }

    pub fn with_siriib(mut self, config: Option<SiriibConfig>) -> Self {
        self.siriib = config;
        self
    }

    pub fn name(&self) -> String {
        let base = if self.backbone == BackboneConfig::resnet18(self.backbone.num_classes) {
            "ResNet-18".to_string()
        } else {
            format!("ResNet-18(w{})", self.backbone.widths[0])
        };
        if self.siriib.is_some() {
            format!("{base}-SR")
        } else {
            base
        }
    }
}

pub struct ModelOutput {
    pub logits: Tensor,
    /// Present when the SiRIIB branch is attached.
    pub siriib: Option<SiriibOutput>,
}

pub struct Classifier {
    descriptor: ArchitectureDescriptor,
    store: ParamStore,
    backbone: ResNet,
    siriib: Option<Siriib>,
}

impl Classifier {
    /// Build and initialize from `seed`. The backbone is created first, so a
    /// base and an instrumented model sharing a seed share backbone weights.
    pub fn new(descriptor: ArchitectureDescriptor, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(dtype, device.clone(), seed);
        let backbone = ResNet::new(&mut store, "backbone", &descriptor.backbone, descriptor.normalization)?;
        let siriib = match &descriptor.siriib {
            Some(cfg) => Some(Siriib::new(
                &mut store,
                "siriib",
                cfg,
                &backbone.tap_shapes(),
                descriptor.backbone.resolution,
            )?),
            None => None,
        };
        Ok(Self {
            descriptor,
            store,
            backbone,
            siriib,
        })
    }

    pub fn descriptor(&self) -> &ArchitectureDescriptor {
        &self.descriptor
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn backbone(&self) -> &ResNet {
        &self.backbone
    }

    pub fn siriib(&self) -> Option<&Siriib> {
        self.siriib.as_ref()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn num_classes(&self) -> usize {
        self.descriptor.backbone.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.store.count("")
    }

    pub fn macs(&self) -> u64 {
        self.backbone.macs() + self.siriib.as_ref().map_or(0, Siriib::macs)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<ModelOutput> {
        match &self.siriib {
            Some(s) => {
                let side = s.forward(x, mode)?;
                let logits = self
                    .backbone
                    .forward_injected(x, mode, &s.injections(&side.features))?
                    .logits;
                Ok(ModelOutput {
                    logits,
                    siriib: Some(side),
                })
            }
            None => Ok(ModelOutput {
                logits: self.backbone.forward_with_taps(x, mode)?.logits,
                siriib: None,
            }),
        }
    }

    pub fn logits(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward(x, mode)?.logits)
    }

    /// Training pass: `x_adv` through the whole model while `x_clean` shares
    /// the SiRIIB batch. The clean half is returned detached, as a reference.
    pub fn forward_with_reference(
        &self,
        x_adv: &Tensor,
        x_clean: &Tensor,
        mode: Mode,
    ) -> Result<(ModelOutput, Option<SiriibOutput>)> {
        let Some(s) = &self.siriib else {
            return Ok((self.forward(x_adv, mode)?, None));
        };
        if x_adv.dims() != x_clean.dims() {
            return Err(Error::shape("clean reference batch", x_adv.dims(), x_clean.dims()));
        }
        let n = x_adv.dims()[0];
        let both = s.forward(&Tensor::cat(&[x_adv, x_clean], 0)?, mode)?;
        let split = |t: &Tensor, start: usize| t.narrow(0, start, n);
        let adv = SiriibOutput {
            x_avg: split(&both.x_avg, 0)?,
            features: both.features.iter().map(|f| split(f, 0)).collect::<candle_core::Result<_>>()?,
        };
        let clean = SiriibOutput {
            x_avg: split(&both.x_avg, n)?.detach(),
            features: both
                .features
                .iter()
                .map(|f| Ok(split(f, n)?.detach()))
                .collect::<Result<_>>()?,
        };
        let logits = self
            .backbone
            .forward_injected(x_adv, mode, &s.injections(&adv.features))?
            .logits;
        Ok((
            ModelOutput {
                logits,
                siriib: Some(adv),
            },
            Some(clean),
        ))
    }

    /// Sum of orthogonality penalties of the SR blocks, if any.
    pub fn orthogonality_penalty(&self) -> Result<Option<Tensor>> {
        self.siriib.as_ref().map(|s| s.penalty()).transpose()
    }
}
