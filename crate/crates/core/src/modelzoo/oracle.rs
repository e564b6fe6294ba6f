use std::sync::atomic::{AtomicU64, Ordering};

use super::Classifier;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Monotone query counter with an optional cap.
#[derive(Debug, Default)]
pub struct QueryLedger {
    count: AtomicU64,
    budget: Option<u64>,
}

impl QueryLedger {
    pub fn new(budget: Option<u64>) -> Self {
        QueryLedger { count: AtomicU64::new(0), budget }
    }

    pub fn unlimited() -> Self {
        Self::new(None)
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::SeqCst)
    }

    pub fn budget(&self) -> Option<u64> {
        self.budget
    }

    pub fn remaining(&self) -> Option<u64> {
        self.budget.map(|b| b.saturating_sub(self.count()))
    }

    /// Reserves one query; fails without counting once the budget is spent.
    pub fn charge(&self) -> Result<()> {
        match self.budget {
            None => {
                self.count.fetch_add(1, Ordering::SeqCst);
                Ok(())
            }
            Some(budget) => self
                .count
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |c| (c < budget).then_some(c + 1))
                .map(|_| ())
                .map_err(|_| Error::BudgetExhausted { budget }),
        }
    }
}

/// The only access an attack has to its target: top-1 labels, each one counted.
pub struct HardLabelOracle<'m, S> {
    model: &'m dyn Classifier<S>,
    ledger: QueryLedger,
    clamp_unit_box: bool,
}

impl<'m, S: Scalar> HardLabelOracle<'m, S> {
    pub fn new(model: &'m dyn Classifier<S>, budget: Option<u64>) -> Self {
        HardLabelOracle { model, ledger: QueryLedger::new(budget), clamp_unit_box: false }
    }

    /// Oracle over a model the caller already owns (surrogates), with no cap.
    pub fn unmetered(model: &'m dyn Classifier<S>) -> Self {
        Self::new(model, None)
    }

    /// Inputs are clamped to `[0, 1]^d` before classification.
    pub fn with_unit_box(mut self, on: bool) -> Self {
        self.clamp_unit_box = on;
        self
    }

    pub fn unit_box(&self) -> bool {
        self.clamp_unit_box
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn ledger(&self) -> &QueryLedger {
        &self.ledger
    }

    pub fn queries(&self) -> u64 {
        self.ledger.count()
    }

    pub fn predict(&self, x: &[S]) -> Result<usize> {
        if x.len() != self.model.dim() {
            return Err(Error::DimensionMismatch { expected: self.model.dim(), got: x.len() });
        }
        self.ledger.charge()?;
        if self.clamp_unit_box {
            let clamped: Vec<S> = x.iter().map(|&v| v.max(S::zero()).min(S::one())).collect();
            Ok(self.model.predict(&clamped))
        } else {
            Ok(self.model.predict(x))
        }
    }
}
