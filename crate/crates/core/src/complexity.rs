//! Parameter and multiply-add accounting for base and instrumented models.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::Classifier;
use crate::report::ResultsTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCost {
    pub name: String,
    /// Trainable parameters (batch-norm running statistics excluded).
    pub params: usize,
    /// Multiply-adds of one forward pass on a single native-resolution image.
    pub macs: u64,
}

impl ModelCost {
    pub fn of(model: &Classifier) -> Self {
        Self {
            name: model.descriptor().name(),
            params: model.param_count(),
            macs: model.macs(),
        }
    }

    pub fn params_millions(&self) -> f64 {
        self.params as f64 / 1e6
    }

    pub fn macs_giga(&self) -> f64 {
        self.macs as f64 / 1e9
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    pub base: ModelCost,
    pub instrumented: ModelCost,
}

impl Overhead {
    /// Extra parameters relative to the base model.
    pub fn param_fraction(&self) -> f64 {
        (self.instrumented.params as f64 - self.base.params as f64) / self.base.params as f64
    }

    pub fn mac_fraction(&self) -> f64 {
        (self.instrumented.macs as f64 - self.base.macs as f64) / self.base.macs as f64
    }

    /// Rows per model with columns `Params (M)` and `MACs (G)`.
    pub fn table(&self) -> Result<ResultsTable> {
        let mut t = ResultsTable::new(
            "Model complexity",
            "Model",
            vec!["Params (M)".into(), "MACs (G)".into()],
        );
        for c in [&self.base, &self.instrumented] {
            t.push(c.name.clone(), vec![Some(c.params_millions()), Some(c.macs_giga())])?;
        }
        Ok(t)
    }
}

pub fn count_overhead(base: &Classifier, instrumented: &Classifier) -> Overhead {
    Overhead {
        base: ModelCost::of(base),
        instrumented: ModelCost::of(instrumented),
    }
}
