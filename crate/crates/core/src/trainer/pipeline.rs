//! Single-producer, single-consumer row hand-off of capacity one.
//!
//! The producer fetches the next row only once the slot is empty, so at
//! most one row is ever buffered while the consumer works on the previous
//! one.

use std::sync::{Condvar, Mutex};

use crate::cooccur::{RowSource, StoreError};
use crate::model::SparseRow;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError<E> {
    #[error("fetching row {row} failed: {source}")]
    Fetch { row: usize, source: StoreError },
    #[error(transparent)]
    Consumer(E),
}

/// Counters observed during one pipeline run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PipelineStats {
    pub delivered: usize,
    pub max_occupancy: usize,
}

struct Slot {
    item: Option<(usize, Result<SparseRow, StoreError>)>,
    finished: bool,
    cancelled: bool,
    max_occupancy: usize,
}

/// Streams rows `0..source.n()` to `consume` in order, prefetching row
/// `i + 1` on a second thread while row `i` is being consumed.
pub fn prefetch_pipeline<E, F>(
    source: &mut dyn RowSource,
    mut consume: F,
) -> Result<PipelineStats, PipelineError<E>>
where
    E: Send,
    F: FnMut(SparseRow) -> Result<(), E>,
{
    let n = source.n();
    let slot = Mutex::new(Slot {
        item: None,
        finished: false,
        cancelled: false,
        max_occupancy: 0,
    });
    let ready = Condvar::new();

    std::thread::scope(|scope| {
        let producer = scope.spawn(|| {
            for i in 0..n {
                {
                    let mut s = slot.lock().unwrap();
                    while s.item.is_some() && !s.cancelled {
                        s = ready.wait(s).unwrap();
                    }
                    if s.cancelled {
                        return;
                    }
                }
                let fetched = source.next_row(i);
                let failed = fetched.is_err();
                let mut s = slot.lock().unwrap();
                s.item = Some((i, fetched));
                s.max_occupancy = s.max_occupancy.max(1);
                ready.notify_all();
                if failed {
                    break;
                }
            }
            let mut s = slot.lock().unwrap();
            s.finished = true;
            ready.notify_all();
        });

        let mut stats = PipelineStats::default();
        let result = loop {
            let next = {
                let mut s = slot.lock().unwrap();
                loop {
                    if let Some(item) = s.item.take() {
                        ready.notify_all();
                        break Some(item);
                    }
                    if s.finished {
                        break None;
                    }
                    s = ready.wait(s).unwrap();
                }
            };
            match next {
                None => break Ok(()),
                Some((row, Err(source))) => break Err(PipelineError::Fetch { row, source }),
                Some((_, Ok(r))) => {
                    stats.delivered += 1;
                    if let Err(e) = consume(r) {
                        break Err(PipelineError::Consumer(e));
                    }
                }
            }
        };
        {
            let mut s = slot.lock().unwrap();
            s.cancelled = true;
            stats.max_occupancy = s.max_occupancy;
            ready.notify_all();
        }
        producer.join().expect("row producer panicked");
        result.map(|()| stats)
    })
}

/// The same contract without a second thread.
pub fn sequential_rows<E, F>(
    source: &mut dyn RowSource,
    mut consume: F,
) -> Result<PipelineStats, PipelineError<E>>
where
    F: FnMut(SparseRow) -> Result<(), E>,
{
    let mut stats = PipelineStats::default();
    for i in 0..source.n() {
        let row = source
            .next_row(i)
            .map_err(|source| PipelineError::Fetch { row: i, source })?;
        stats.delivered += 1;
        stats.max_occupancy = 1;
        consume(row).map_err(PipelineError::Consumer)?;
    }
    Ok(stats)
}
