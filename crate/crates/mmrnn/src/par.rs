//! Data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature (on by default) the map fans out over rayon's
//! thread pool; without it the same call runs sequentially. Results come back
//! in input order either way, so downstream sequential folds see the same
//! operand order and the two builds produce bitwise-identical numbers.

#[cfg(feature = "parallel")]
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_input_order() {
        let items: Vec<usize> = (0..257).collect();
        let out = map_collect(&items, |&i| i * 3);
        assert_eq!(out, items.iter().map(|i| i * 3).collect::<Vec<_>>());
    }

    #[test]
    fn fold_after_map_is_deterministic() {
        let items: Vec<f64> = (0..1000).map(|i| (i as f64).sin() * 1e-3).collect();
        let mapped = map_collect(&items, |&x| x * x);
        let a: f64 = mapped.iter().sum();
        let mapped2 = map_collect(&items, |&x| x * x);
        let b: f64 = mapped2.iter().sum();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
