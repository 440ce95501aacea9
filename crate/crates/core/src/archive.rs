//! Exchange format for adversarial examples produced by this crate or by an
//! external attack tool.
//!
//! An archive is a directory with `images.npy` (`f32`, `N x 3 x H x W`),
//! `labels.npy` (`u8`, `N`) and `archive.json` ([`ArchiveMeta`]).

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array4};
use ndarray_npy::{read_npy, write_npy};
use serde::{Deserialize, Serialize};

use crate::attacks::Norm;
use crate::batch::ImageBatch;
use crate::error::{Error, Result};

pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMeta {
    pub format_version: u32,
    pub norm: Norm,
    /// Declared perturbation budget in `[0, 1]` pixel units.
    pub epsilon: f64,
    /// Free-form description of the producing attack.
    pub attack: String,
}

#[derive(Debug, Clone)]
pub struct AdversarialArchive {
    pub meta: ArchiveMeta,
    pub batch: ImageBatch,
}

/// Result of checking an archive against the clean images it perturbs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub max_perturbation: f64,
    /// Indices of samples over budget or with a label differing from the clean one.
    pub violations: Vec<usize>,
}

impl BudgetReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Slack for `f32` rounding of `x + ε`.
const BUDGET_SLACK: f64 = 1e-6;

impl AdversarialArchive {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_npy(dir.join("images.npy"), &self.batch.data).map_err(|e| Error::Npy(e.to_string()))?;
        write_npy(dir.join("labels.npy"), &Array1::from(self.batch.labels.clone()))
            .map_err(|e| Error::Npy(e.to_string()))?;
        fs::write(dir.join("archive.json"), serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("archive.json"))?)?;
        let found = value.get("format_version").and_then(serde_json::Value::as_u64);
        if found != Some(u64::from(ARCHIVE_VERSION)) {
            return Err(Error::Version {
                found: found.map_or_else(|| "missing".to_string(), |v| v.to_string()),
                expected: ARCHIVE_VERSION.to_string(),
            });
        }
        let meta: ArchiveMeta = serde_json::from_value(value)?;
        let images: Array4<f32> = read_npy(dir.join("images.npy")).map_err(|e| Error::Npy(e.to_string()))?;
        let labels: Array1<u8> = read_npy(dir.join("labels.npy")).map_err(|e| Error::Npy(e.to_string()))?;
        Ok(Self {
            meta,
            batch: ImageBatch::new(images, labels.to_vec())?,
        })
    }

    /// Check every sample against the declared budget.
    pub fn validate(&self, clean: &ImageBatch) -> Result<BudgetReport> {
        if clean.data.shape() != self.batch.data.shape() {
            return Err(Error::shape("archive vs clean images", clean.data.shape(), self.batch.data.shape()));
        }
        let mut max_perturbation = 0f64;
        let mut violations = Vec::new();
        for i in 0..clean.len() {
            let (a, c) = (self.batch.image(i), clean.image(i));
            let diffs = a.iter().zip(c.iter()).map(|(a, c)| f64::from(a - c));
            let size = match self.meta.norm {
                Norm::Linf => diffs.fold(0f64, |m, d| m.max(d.abs())),
                Norm::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
            };
            max_perturbation = max_perturbation.max(size);
            if size > self.meta.epsilon + BUDGET_SLACK || self.batch.labels[i] != clean.labels[i] {
                violations.push(i);
            }
        }
        Ok(BudgetReport {
            max_perturbation,
            violations,
        })
    }
}
