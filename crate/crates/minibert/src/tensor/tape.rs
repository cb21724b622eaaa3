use std::cell::RefCell;

use super::{Dtype, Tensor};
use crate::error::{Error, Result};

/// Ordered record of primitive operations. Each record is a closure that
/// reads the upstream gradient of the op's output and accumulates adjoints
/// into the op's inputs. Replaying the records in reverse order applies the
/// chain rule.
///
/// One forward/backward may be in flight per tape (single writer). A tape
/// created with [`Tape::disabled`] records nothing, which turns every kernel
/// into a plain forward evaluation.
pub struct Tape<T: Dtype> {
    records: RefCell<Vec<Box<dyn Fn()>>>,
    enabled: bool,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Dtype> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Dtype> Tape<T> {
    pub fn new() -> Self {
        Tape {
            records: RefCell::new(Vec::new()),
            enabled: true,
            _marker: std::marker::PhantomData,
        }
    }

    /// A tape that never records; use for inference and metric passes.
    pub fn disabled() -> Self {
        Tape {
            records: RefCell::new(Vec::new()),
            enabled: false,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn len(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whether an op writing `output` should be recorded, given whether any
    /// of its inputs is tracked.
    pub(super) fn tracks(&self, any_input_tracked: bool) -> bool {
        self.enabled && any_input_tracked
    }

    pub(super) fn record(&self, back: impl Fn() + 'static) {
        self.records.borrow_mut().push(Box::new(back));
    }

    /// Reverse-mode sweep from a scalar loss: seeds the loss gradient with 1
    /// and replays all records in reverse, leaving a fully accumulated `grad`
    /// on every reachable tensor with `requires_grad`.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<()> {
        if loss.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward expects a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if !loss.requires_grad() {
            return Err(Error::Autodiff(
                "loss is not connected to the tape (no tracked inputs)".into(),
            ));
        }
        loss.seed_grad_ones();
        let records = self.records.borrow();
        for rec in records.iter().rev() {
            rec();
        }
        Ok(())
    }
}
