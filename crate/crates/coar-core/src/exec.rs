//! Pluggable batch execution.
//!
//! Training steps evaluate several independent sequences (the class-prior
//! batch, drift probes, sweep arms). The executor decides whether those run
//! on one thread or many; results always come back in index order and are
//! reduced sequentially, so the choice cannot change any computed bit.

use alloc::vec::Vec;

pub trait BatchExecutor {
    /// Evaluate `f(0..n)` and return the results in index order.
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync;
}

/// Plain in-order loop. The only executor the core crate ships.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl BatchExecutor for Sequential {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync,
    {
        (0..n).map(f).collect()
    }
}
