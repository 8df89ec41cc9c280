//! Optional data-parallelism. Both paths produce identical output
//! ordering; the flag changes timing only, never labels.

use rayon::prelude::*;

pub(crate) fn maybe_par_map<T, U, F>(parallel: bool, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    if parallel {
        items
            .par_iter()
            .enumerate()
            .map(|(i, item)| f(i, item))
            .collect()
    } else {
        items.iter().enumerate().map(|(i, item)| f(i, item)).collect()
    }
}
