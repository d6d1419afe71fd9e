//! Per-thread counts of network forward and backward passes.
//!
//! A batched forward through a [`crate::Classifier`] counts once, as does a
//! call to [`crate::Trace::backward`].

use std::cell::Cell;

thread_local! {
    static FORWARD: Cell<u64> = const { Cell::new(0) };
    static BACKWARD: Cell<u64> = const { Cell::new(0) };
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PassCount {
    pub forward: u64,
    pub backward: u64,
}

impl std::ops::Sub for PassCount {
    type Output = PassCount;

    fn sub(self, rhs: PassCount) -> PassCount {
        PassCount {
            forward: self.forward - rhs.forward,
            backward: self.backward - rhs.backward,
        }
    }
}

impl std::ops::AddAssign for PassCount {
    fn add_assign(&mut self, rhs: PassCount) {
        self.forward += rhs.forward;
        self.backward += rhs.backward;
    }
}

pub fn snapshot() -> PassCount {
    PassCount {
        forward: FORWARD.with(Cell::get),
        backward: BACKWARD.with(Cell::get),
    }
}

pub(crate) fn record_forward() {
    FORWARD.with(|c| c.set(c.get() + 1));
}

pub(crate) fn record_backward() {
    BACKWARD.with(|c| c.set(c.get() + 1));
}
