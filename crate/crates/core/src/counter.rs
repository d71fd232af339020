//! Thread-local multiply-add instrumentation.
//!
//! Forward kernels report the scalar multiply-accumulate operations they
//! perform. Counts are bucketed by [`Category`] so that analytic cost formulas
//! can be checked against exactly the kernels they describe. Gradient kernels
//! never report.

use std::cell::{Cell, RefCell};
use std::ops::{Add, AddAssign};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    /// Query and key projections plus the score and weighted-value products:
    /// the terms of the attention cost formula `2·n_q·n_kv·C + n_q·C² + n_kv·C²`.
    AttentionCore,
    /// Value and output projections of multi-head attention.
    Projection,
    /// Key/value spatial pooling (one accumulate per input element).
    Pooling,
    /// Feed-forward layers inside attention blocks.
    Mlp,
    /// Convolutions.
    Conv,
    /// Depth-wise cross-correlation.
    Correlation,
    /// Anything not claimed by a scope.
    Other,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::AttentionCore,
        Category::Projection,
        Category::Pooling,
        Category::Mlp,
        Category::Conv,
        Category::Correlation,
        Category::Other,
    ];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::AttentionCore => "attention_core",
            Category::Projection => "projection",
            Category::Pooling => "pooling",
            Category::Mlp => "mlp",
            Category::Conv => "conv",
            Category::Correlation => "correlation",
            Category::Other => "other",
        }
    }
}

/// Snapshot of multiply-add counts per category.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCount {
    pub mul_adds: [u64; 7],
}

impl OpCount {
    pub fn get(&self, cat: Category) -> u64 {
        self.mul_adds[cat.index()]
    }

    pub fn total(&self) -> u64 {
        self.mul_adds.iter().sum()
    }
}

impl Add for OpCount {
    type Output = OpCount;
    fn add(mut self, rhs: OpCount) -> OpCount {
        self += rhs;
        self
    }
}

impl AddAssign for OpCount {
    fn add_assign(&mut self, rhs: OpCount) {
        for (a, b) in self.mul_adds.iter_mut().zip(rhs.mul_adds) {
            *a += b;
        }
    }
}

thread_local! {
    static ENABLED: Cell<bool> = const { Cell::new(false) };
    static COUNTS: RefCell<OpCount> = RefCell::new(OpCount::default());
    static CURRENT: Cell<Category> = const { Cell::new(Category::Other) };
}

/// Handle to the calling thread's counter.
pub struct OpCounter;

impl OpCounter {
    pub fn enable() {
        ENABLED.with(|e| e.set(true));
    }

    pub fn disable() {
        ENABLED.with(|e| e.set(false));
    }

    pub fn is_enabled() -> bool {
        ENABLED.with(|e| e.get())
    }

    pub fn reset() {
        COUNTS.with(|c| *c.borrow_mut() = OpCount::default());
    }

    pub fn snapshot() -> OpCount {
        COUNTS.with(|c| *c.borrow())
    }

    /// Runs `f` with a freshly reset, enabled counter and returns what it counted.
    /// The previous enabled state and counts are restored afterwards.
    pub fn measure<R>(f: impl FnOnce() -> R) -> (R, OpCount) {
        let was_enabled = Self::is_enabled();
        let saved = Self::snapshot();
        Self::reset();
        Self::enable();
        let out = f();
        let counted = Self::snapshot();
        COUNTS.with(|c| *c.borrow_mut() = saved);
        ENABLED.with(|e| e.set(was_enabled));
        (out, counted)
    }
}

/// Attributes kernels run inside `f` to `cat`.
pub fn in_category<R>(cat: Category, f: impl FnOnce() -> R) -> R {
    let prev = CURRENT.with(|c| c.replace(cat));
    let out = f();
    CURRENT.with(|c| c.set(prev));
    out
}

pub(crate) fn record(mul_adds: u64) {
    if ENABLED.with(|e| e.get()) {
        let cat = CURRENT.with(|c| c.get());
        COUNTS.with(|c| c.borrow_mut().mul_adds[cat.index()] += mul_adds);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disabled_counter_ignores_records() {
        OpCounter::disable();
        OpCounter::reset();
        record(10);
        assert_eq!(OpCounter::snapshot().total(), 0);
    }

    #[test]
    fn measure_buckets_by_category_and_restores() {
        let ((), c) = OpCounter::measure(|| {
            record(3);
            in_category(Category::Mlp, || record(5));
            record(1);
        });
        assert_eq!(c.get(Category::Other), 4);
        assert_eq!(c.get(Category::Mlp), 5);
        assert_eq!(c.total(), 9);
        assert!(!OpCounter::is_enabled());
    }
}
