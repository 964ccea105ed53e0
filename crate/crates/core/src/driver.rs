//! Live drivers: one per hart, run concurrently with the `parallel` feature
//! and round-robin on the calling thread without it.

use crate::event::Event;
use crate::hierarchy::{SimError, System};

/// Executes every stream to completion. Stream `i` may contain events for
/// any hart, but conventionally holds hart `i`'s events.
pub fn drive<S>(system: &System, streams: Vec<S>) -> Result<(), SimError>
where
    S: IntoIterator<Item = Event> + Send,
    S::IntoIter: Send,
{
    #[cfg(feature = "parallel")]
    {
        drive_parallel(system, streams)
    }
    #[cfg(not(feature = "parallel"))]
    {
        drive_sequential(system, streams)
    }
}

/// Interleaves the streams one event at a time on the calling thread.
pub fn drive_sequential<S>(system: &System, streams: Vec<S>) -> Result<(), SimError>
where
    S: IntoIterator<Item = Event>,
{
    let mut iters: Vec<_> = streams.into_iter().map(IntoIterator::into_iter).collect();
    let mut done = vec![false; iters.len()];
    let mut live = iters.len();
    while live > 0 {
        for (i, it) in iters.iter_mut().enumerate() {
            if done[i] {
                continue;
            }
            match it.next() {
                Some(e) => system.execute(&e)?,
                None => {
                    done[i] = true;
                    live -= 1;
                }
            }
        }
    }
    Ok(())
}

/// Runs each stream on its own worker of a dedicated pool.
#[cfg(feature = "parallel")]
pub fn drive_parallel<S>(system: &System, streams: Vec<S>) -> Result<(), SimError>
where
    S: IntoIterator<Item = Event> + Send,
    S::IntoIter: Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(streams.len().max(1))
        .thread_name(|i| format!("hart-driver-{i}"))
        .build()
        .expect("driver pool");
    let first_error = parking_lot::Mutex::new(None);
    pool.scope(|scope| {
        for stream in streams {
            let first_error = &first_error;
            scope.spawn(move |_| {
                for e in stream {
                    if let Err(err) = system.execute(&e) {
                        first_error.lock().get_or_insert(err);
                        return;
                    }
                }
            });
        }
    });
    match first_error.into_inner() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Runs independent jobs (e.g. sweep points) concurrently when enabled.
pub fn map_jobs<T, R, F>(jobs: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        jobs.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        jobs.into_iter().map(f).collect()
    }
}
