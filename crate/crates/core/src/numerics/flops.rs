//! Thread-local multiply-add counter fed by the matrix product kernels.
//!
//! Only matrix-product multiply-adds are counted; elementwise and reduction
//! kernels are not. One multiply-add is reported as two floating point ops.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn record_macs(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}

pub fn reset() {
    MACS.with(|c| c.set(0));
}

/// Multiply-add pairs recorded on this thread since the last [`reset`].
pub fn macs() -> u64 {
    MACS.with(|c| c.get())
}

/// Runs `f` and returns its result together with the multiply-adds it executed.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = macs();
    let out = f();
    (out, macs() - before)
}
