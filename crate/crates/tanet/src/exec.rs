//! Execution strategy for data-parallel kernels.
//!
//! Every kernel is written as a map over disjoint output slots with any
//! cross-slot reduction done sequentially in slot order afterwards, so the
//! parallel and sequential paths produce bit-identical results. With the
//! `parallel` feature disabled, [`Exec::Parallel`] silently degrades to the
//! sequential loop.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

/// Split `data` into consecutive `chunk_len`-sized pieces and run `f` on each.
/// `data.len()` must be a multiple of `chunk_len`.
pub fn for_each_chunk<E, F>(exec: Exec, data: &mut [E], chunk_len: usize, f: F)
where
    E: Send,
    F: Fn(usize, &mut [E]) + Sync,
{
    debug_assert!(chunk_len > 0 && data.len() % chunk_len == 0);
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, chunk)| f(i, chunk));
        }
        _ => {
            for (i, chunk) in data.chunks_mut(chunk_len).enumerate() {
                f(i, chunk);
            }
        }
    }
}

/// Compute `count` independent values; the returned vector is in slot order
/// regardless of execution strategy.
pub fn map_slots<T, F>(exec: Exec, count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => (0..count).into_par_iter().map(f).collect(),
        _ => (0..count).map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_indices_cover_buffer_in_order() {
        let mut buf = vec![0usize; 12];
        for_each_chunk(Exec::Sequential, &mut buf, 3, |i, chunk| {
            chunk.iter_mut().for_each(|v| *v = i);
        });
        assert_eq!(buf, [0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matches_sequential() {
        let f = |i: usize| (i as f64 + 0.5).sin();
        let a = map_slots(Exec::Sequential, 100, f);
        let b = map_slots(Exec::Parallel, 100, f);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
