//! Small index-stable parallel map over scoped threads. Worker count is
//! capped by the SLM_THREADS environment variable; results land at their
//! input index, so output is identical to the sequential run.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::Result;

/// Worker cap: SLM_THREADS when set (minimum 1), otherwise the machine's
/// available parallelism.
pub fn thread_cap() -> usize {
    match std::env::var("SLM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        Some(n) => n.max(1),
        None => std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1),
    }
}

/// Applies `f` to 0..n on up to `thread_cap()` workers. The first error
/// wins; output order matches input order exactly.
pub fn try_par_map<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let workers = thread_cap().min(n.max(1));
    if workers <= 1 || n <= 1 {
        return (0..n).map(&f).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    let next = AtomicUsize::new(0);
    {
        let slots_ptr = SendSlots(slots.as_mut_ptr());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                let f = &f;
                let next = &next;
                let slots_ptr = &slots_ptr;
                scope.spawn(move || loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= n {
                        break;
                    }
                    let value = f(i);
                    // Each index is claimed by exactly one worker.
                    unsafe { *slots_ptr.0.add(i) = Some(value) };
                });
            }
        });
    }
    slots
        .into_iter()
        .map(|s| s.expect("every index was claimed"))
        .collect()
}

struct SendSlots<T>(*mut Option<Result<T>>);
unsafe impl<T: Send> Sync for SendSlots<T> {}
