use cirlab_core::exec::Exec;
use rayon::prelude::*;

/// Thread-pool map; results keep input order.
#[derive(Debug, Clone, Copy, Default)]
pub struct Rayon;

impl Exec for Rayon {
    fn map<I, R, F>(&self, items: Vec<I>, f: F) -> Vec<R>
    where
        I: Send,
        R: Send,
        F: Fn(I) -> R + Sync + Send,
    {
        items.into_par_iter().map(f).collect()
    }
}
