use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::topology::RankId;

use super::Tag;

/// Per-rank receive queues keyed by `(src, tag)`.
#[derive(Default)]
pub(crate) struct Mailbox {
    state: Mutex<State>,
    arrived: Condvar,
}

#[derive(Default)]
struct State {
    queues: HashMap<(usize, Tag), VecDeque<Vec<u8>>>,
    max_depth: usize,
    dead: HashSet<usize>,
}

impl Mailbox {
    pub(crate) fn push(&self, src: usize, tag: Tag, payload: Vec<u8>) {
        let mut st = self.state.lock().expect("mailbox poisoned");
        let q = st.queues.entry((src, tag)).or_default();
        q.push_back(payload);
        let depth = q.len();
        st.max_depth = st.max_depth.max(depth);
        drop(st);
        self.arrived.notify_all();
    }

    /// Marks `src` as gone: pending messages remain receivable, further
    /// waits on it fail with `PeerUnreachable`.
    pub(crate) fn mark_dead(&self, src: usize) {
        self.state.lock().expect("mailbox poisoned").dead.insert(src);
        self.arrived.notify_all();
    }

    pub(crate) fn pop(&self, src: usize, tag: Tag, timeout: Option<Duration>) -> Result<Vec<u8>> {
        let deadline = timeout.map(|t| (Instant::now() + t, t));
        let mut st = self.state.lock().expect("mailbox poisoned");
        loop {
            if let Some(q) = st.queues.get_mut(&(src, tag)) {
                if let Some(payload) = q.pop_front() {
                    if q.is_empty() {
                        st.queues.remove(&(src, tag));
                    }
                    return Ok(payload);
                }
            }
            if st.dead.contains(&src) {
                return Err(Error::PeerUnreachable(RankId(src).0));
            }
            st = match deadline {
                None => self.arrived.wait(st).expect("mailbox poisoned"),
                Some((at, total)) => {
                    let now = Instant::now();
                    if now >= at {
                        return Err(Error::Timeout(total));
                    }
                    self.arrived.wait_timeout(st, at - now).expect("mailbox poisoned").0
                }
            };
        }
    }

    pub(crate) fn max_depth(&self) -> usize {
        self.state.lock().expect("mailbox poisoned").max_depth
    }
}
