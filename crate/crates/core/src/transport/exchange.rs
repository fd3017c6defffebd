//! The blocks a worker exposes to its peers during one collective.
//!
//! A producer publishes a finished block under a [`Tag`]; consumers fetch it
//! by sending a request to the owner, which answers once the tag exists.
//! Entries are scoped to an epoch (the collective sequence number) and the
//! table is cleared when the next collective starts, so a stale block can
//! never satisfy a request from a later collective.

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};

use super::protocol::Tag;

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum ExchangeError {
    /// The owner failed during this epoch; the block will never appear.
    Aborted,
    /// The request belongs to an epoch the owner has already left.
    Stale,
}

#[derive(Debug)]
struct Exposed {
    data: Arc<Vec<f64>>,
    clock: u64,
    /// Remaining fetches before the entry is dropped; `None` keeps it for
    /// the rest of the epoch.
    remaining: Option<usize>,
}

#[derive(Debug, Default)]
struct State {
    epoch: u64,
    failed: bool,
    entries: HashMap<Tag, Exposed>,
}

#[derive(Debug, Default)]
pub(crate) struct Exchange {
    state: Mutex<State>,
    ready: Condvar,
}

impl Exchange {
    pub fn new() -> Self {
        Self::default()
    }

    /// Enters `epoch`, dropping everything exposed before.
    pub fn begin(&self, epoch: u64) {
        let mut st = self.state.lock().unwrap();
        st.epoch = epoch;
        st.failed = false;
        st.entries.clear();
        self.ready.notify_all();
    }

    pub fn publish(&self, epoch: u64, tag: Tag, data: Arc<Vec<f64>>, clock: u64, consumers: Option<usize>) {
        let mut st = self.state.lock().unwrap();
        debug_assert_eq!(st.epoch, epoch);
        st.entries.insert(tag, Exposed { data, clock, remaining: consumers });
        self.ready.notify_all();
    }

    /// Marks the current epoch as failed and wakes every waiting requester.
    pub fn fail(&self, epoch: u64) {
        let mut st = self.state.lock().unwrap();
        if st.epoch == epoch {
            st.failed = true;
        }
        self.ready.notify_all();
    }

    /// Blocks until `tag` is exposed in `epoch`, then hands out the shared
    /// buffer and the producer's clock.
    pub fn take(&self, epoch: u64, tag: &Tag) -> Result<(Arc<Vec<f64>>, u64), ExchangeError> {
        let mut st = self.state.lock().unwrap();
        loop {
            if st.epoch > epoch {
                return Err(ExchangeError::Stale);
            }
            if st.epoch == epoch {
                if let Some(entry) = st.entries.get_mut(tag) {
                    let out = (Arc::clone(&entry.data), entry.clock);
                    if let Some(r) = entry.remaining.as_mut() {
                        *r -= 1;
                        if *r == 0 {
                            st.entries.remove(tag);
                        }
                    }
                    return Ok(out);
                }
                if st.failed {
                    return Err(ExchangeError::Aborted);
                }
            }
            st = self.ready.wait(st).unwrap();
        }
    }

    #[cfg(test)]
    pub fn len(&self) -> usize {
        self.state.lock().unwrap().entries.len()
    }
}
