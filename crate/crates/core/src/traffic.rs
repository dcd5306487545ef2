//! Logical memory-movement accounting.
//!
//! Kernels report the elements they load and store to a [`PhaseScope`], a
//! short-lived view of a [`TrafficRecorder`] bound to one phase label.
//! Accounting is unique-operand: within a scope each distinct operand tensor
//! contributes its element count once, however many arithmetic uses read it.
//! That is how a single attention matrix shared by every head is charged
//! `N^2` loads rather than `h * N^2`.

use std::marker::PhantomData;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PHASE_SCORE: &str = "score";
pub const PHASE_NORMALIZE: &str = "normalize";
pub const PHASE_AGGREGATE: &str = "aggregate";

/// Loads and stores accumulated under one phase label, in elements.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PhaseCount {
    pub phase: String,
    pub loads: u64,
    pub stores: u64,
}

impl PhaseCount {
    pub fn total(&self) -> u64 {
        self.loads + self.stores
    }
}

/// Per-phase load/store counters, kept in first-seen phase order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrafficRecorder {
    entries: Vec<PhaseCount>,
}

impl TrafficRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds raw counts to `phase`, creating the entry if needed.
    pub fn record(&mut self, phase: &str, loads: u64, stores: u64) {
        match self.entries.iter_mut().find(|e| e.phase == phase) {
            Some(e) => {
                e.loads += loads;
                e.stores += stores;
            }
            None => self.entries.push(PhaseCount {
                phase: phase.to_string(),
                loads,
                stores,
            }),
        }
    }

    /// Opens a unique-operand accounting scope for `phase`.
    ///
    /// Operands passed to [`PhaseScope::load`] are borrowed for `'a`, so they
    /// are guaranteed to stay alive (and keep distinct buffers) while the
    /// scope can still see them.
    pub fn scope<'a>(&mut self, phase: &str) -> PhaseScope<'_, 'a> {
        PhaseScope {
            recorder: self,
            phase: phase.to_string(),
            seen: Vec::new(),
            _operands: PhantomData,
        }
    }

    pub fn get(&self, phase: &str) -> Option<&PhaseCount> {
        self.entries.iter().find(|e| e.phase == phase)
    }

    pub fn loads(&self, phase: &str) -> u64 {
        self.get(phase).map_or(0, |e| e.loads)
    }

    pub fn stores(&self, phase: &str) -> u64 {
        self.get(phase).map_or(0, |e| e.stores)
    }

    pub fn entries(&self) -> &[PhaseCount] {
        &self.entries
    }

    pub fn total_loads(&self) -> u64 {
        self.entries.iter().map(|e| e.loads).sum()
    }

    pub fn total_stores(&self) -> u64 {
        self.entries.iter().map(|e| e.stores).sum()
    }

    pub fn total(&self) -> u64 {
        self.total_loads() + self.total_stores()
    }

    pub fn merge(&mut self, other: &TrafficRecorder) {
        for e in &other.entries {
            self.record(&e.phase, e.loads, e.stores);
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// One phase of a [`TrafficRecorder`] with operand de-duplication.
#[derive(Debug)]
pub struct PhaseScope<'r, 'a> {
    recorder: &'r mut TrafficRecorder,
    phase: String,
    // buffer addresses of operands already charged in this scope
    seen: Vec<usize>,
    _operands: PhantomData<&'a ()>,
}

impl<'a> PhaseScope<'_, 'a> {
    pub fn phase(&self) -> &str {
        &self.phase
    }

    /// Charges `t` as a load unless it was already loaded in this scope.
    pub fn load<T: Scalar>(&mut self, t: &'a Tensor<T>) {
        let key = t.data().as_ptr() as usize;
        if !self.seen.contains(&key) {
            self.seen.push(key);
            self.recorder.record(&self.phase, t.data().len() as u64, 0);
        }
    }

    pub fn store<T: Scalar>(&mut self, t: &Tensor<T>) {
        self.recorder.record(&self.phase, 0, t.data().len() as u64);
    }
}
