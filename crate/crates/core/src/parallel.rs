//! Deterministic chunked parallel map over a slice.
//!
//! Output order always matches input order, so results are identical for
//! any thread count; only wall time changes.

/// Apply `f` to every item, splitting the slice across up to `threads`
/// OS threads.
pub fn chunked_map<T, U, F>(items: &[T], threads: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let chunk_size = items.len().div_ceil(threads);
    let mut out = Vec::with_capacity(items.len());
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk_size)
            .map(|chunk| scope.spawn(|| chunk.iter().map(&f).collect::<Vec<U>>()))
            .collect();
        for handle in handles {
            out.extend(handle.join().expect("worker thread panicked"));
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_sequential_map_for_any_thread_count() {
        let items: Vec<i64> = (0..1000).collect();
        let expected: Vec<i64> = items.iter().map(|x| x * x - 3).collect();
        for threads in [1, 2, 3, 7, 64] {
            assert_eq!(chunked_map(&items, threads, |x| x * x - 3), expected);
        }
    }

    #[test]
    fn empty_input() {
        let out: Vec<i32> = chunked_map(&[] as &[i32], 4, |x| *x);
        assert!(out.is_empty());
    }
}
