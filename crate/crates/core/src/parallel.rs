//! Deterministic replication helper: replication `i` always consumes stream
//! `base + i`, and results come back in index order, so the worker count never
//! changes any output.

use crate::error::Result;

pub(crate) fn replicate<T, F>(jobs: usize, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let jobs = jobs.max(1).min(n.max(1));
    if jobs <= 1 {
        return (0..n).map(&f).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(jobs);
    std::thread::scope(|scope| {
        let mut rest = slots.as_mut_slice();
        let mut start = 0;
        while !rest.is_empty() {
            let take = chunk.min(rest.len());
            let (head, tail) = rest.split_at_mut(take);
            let f = &f;
            scope.spawn(move || {
                for (off, slot) in head.iter_mut().enumerate() {
                    *slot = Some(f(start + off));
                }
            });
            rest = tail;
            start += take;
        }
    });
    // surface the lowest-index error so failures are independent of the job count
    slots
        .into_iter()
        .map(|slot| slot.expect("all slots are filled"))
        .collect()
}
