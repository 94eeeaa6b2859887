//! Bounded worker pool for independent jobs.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Worker count: `VRL_DETERMINISTIC=1` forces one, otherwise `requested`
/// or the machine's parallelism.
pub fn worker_count(requested: Option<usize>) -> usize {
    if std::env::var("VRL_DETERMINISTIC").is_ok_and(|v| v == "1") {
        return 1;
    }
    requested
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

/// Runs `f` on every item with at most `workers` threads. Results come back
/// in item order; the first error by item order wins.
pub fn run<T, R, E, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync,
{
    let slots: Vec<Mutex<Option<Result<R, E>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = workers.clamp(1, items.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every job ran"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_preserved_for_any_worker_count() {
        let items: Vec<u64> = (0..50).collect();
        for w in [1, 3, 16] {
            let out: Result<Vec<u64>, ()> = run(&items, w, |&x| Ok(x * x));
            assert_eq!(out.unwrap(), items.iter().map(|x| x * x).collect::<Vec<_>>());
        }
    }

    #[test]
    fn first_error_by_position() {
        let items: Vec<u64> = (0..10).collect();
        let out: Result<Vec<u64>, u64> = run(&items, 4, |&x| if x % 4 == 3 { Err(x) } else { Ok(x) });
        assert_eq!(out, Err(3));
    }

    #[test]
    fn empty_input() {
        let out: Result<Vec<u8>, ()> = run(&[] as &[u8], 4, |_| Ok(0));
        assert!(out.unwrap().is_empty());
    }
}
