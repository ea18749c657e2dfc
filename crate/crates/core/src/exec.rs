//! Order-preserving map over independent work items. The core runs it
//! serially; the std crate plugs in a thread pool.

use alloc::vec::Vec;

pub trait Exec: Sync {
    /// Applies `f` to every item; output order matches input order.
    fn map<I, R, F>(&self, items: Vec<I>, f: F) -> Vec<R>
    where
        I: Send,
        R: Send,
        F: Fn(I) -> R + Sync + Send;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Serial;

impl Exec for Serial {
    fn map<I, R, F>(&self, items: Vec<I>, f: F) -> Vec<R>
    where
        I: Send,
        R: Send,
        F: Fn(I) -> R + Sync + Send,
    {
        items.into_iter().map(f).collect()
    }
}
