//! Cooperatively scheduled ranks for the virtual-time backend.
//!
//! Every rank runs on its own thread, but only the holder of a single baton
//! executes. A rank keeps the baton until it blocks in `recv` on an empty
//! channel or finishes; the baton then moves round-robin to the next rank
//! that can make progress. Execution order, and therefore the message log,
//! is fully deterministic. When no live rank can progress the world is
//! declared deadlocked and every blocked `recv` fails.
//!
//! The log produced here is timed by [`crate::simnet::time_log`].

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};

use crate::error::{Error, Result};
use crate::topology::RankId;

use super::{Communicator, LogEntry, Tag, Transport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Task {
    Runnable,
    Blocked { src: usize, tag: Tag },
    Done,
}

/// Queued payloads of one rank keyed by `(src, tag)`.
type Inbox = HashMap<(usize, Tag), VecDeque<Vec<u8>>>;

struct State {
    baton: usize,
    tasks: Vec<Task>,
    /// Ranks able to make progress.
    ready: BTreeSet<usize>,
    mail: Vec<Inbox>,
    log: Vec<LogEntry>,
    deadlocked: bool,
}

impl State {
    /// Hands the baton to the next rank after `from` able to progress.
    /// Returns the new holder, or `None` when the world is finished or
    /// deadlocked.
    fn pass_baton(&mut self, from: usize) -> Option<usize> {
        let next = self
            .ready
            .range(from + 1..)
            .next()
            .or_else(|| self.ready.iter().next())
            .copied();
        match next {
            Some(r) => self.baton = r,
            None if self.tasks.iter().any(|t| *t != Task::Done) => self.deadlocked = true,
            None => {}
        }
        next
    }
}

struct Shared {
    state: Mutex<State>,
    turns: Vec<Condvar>,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().expect("simulated world poisoned")
    }

    fn wait_for_baton<'a>(&self, mut st: MutexGuard<'a, State>, rank: usize) -> MutexGuard<'a, State> {
        while st.baton != rank && !st.deadlocked {
            st = self.turns[rank].wait(st).expect("simulated world poisoned");
        }
        st
    }

    fn wake(&self, st: &State, next: Option<usize>) {
        match next {
            Some(r) => self.turns[r].notify_one(),
            None if st.deadlocked => self.turns.iter().for_each(Condvar::notify_all),
            None => {}
        }
    }
}

/// A deterministic world of `p` cooperatively scheduled ranks.
pub struct SimulatedWorld {
    p: usize,
    shared: Arc<Shared>,
}

pub struct SimulatedEndpoint {
    rank: usize,
    p: usize,
    shared: Arc<Shared>,
}

impl SimulatedWorld {
    pub fn new(p: usize) -> Self {
        assert!(p >= 1, "a world needs at least one rank");
        Self {
            p,
            shared: Arc::new(Shared {
                state: Mutex::new(State {
                    baton: 0,
                    tasks: vec![Task::Runnable; p],
                    ready: (0..p).collect(),
                    mail: vec![HashMap::new(); p],
                    log: Vec::new(),
                    deadlocked: false,
                }),
                turns: (0..p).map(|_| Condvar::new()).collect(),
            }),
        }
    }

    pub fn size(&self) -> usize {
        self.p
    }

    /// Messages in the exact (deterministic) order they were sent.
    pub fn log(&self) -> Vec<LogEntry> {
        self.shared.lock().log.clone()
    }

    /// Runs `f` once per rank under the baton scheduler. Can be called once
    /// per world.
    pub fn run<R, F>(&self, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(&Communicator<'_>) -> R + Sync,
    {
        {
            let st = self.shared.lock();
            assert!(
                st.tasks.iter().all(|t| *t == Task::Runnable) && st.log.is_empty(),
                "a SimulatedWorld runs exactly once"
            );
        }
        let f = &f;
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..self.p)
                .map(|rank| {
                    let ep = SimulatedEndpoint {
                        rank,
                        p: self.p,
                        shared: Arc::clone(&self.shared),
                    };
                    std::thread::Builder::new()
                        .stack_size(1 << 20)
                        .spawn_scoped(s, move || {
                            let guard = FinishGuard(&ep);
                            drop(ep.shared.wait_for_baton(ep.shared.lock(), rank));
                            let comm = Communicator::world(&ep);
                            let out = f(&comm);
                            drop(guard);
                            out
                        })
                        .expect("spawn simulated rank")
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("simulated rank panicked"))
                .collect()
        })
    }
}

/// Marks the task done and releases the baton, including on unwind.
struct FinishGuard<'a>(&'a SimulatedEndpoint);

impl Drop for FinishGuard<'_> {
    fn drop(&mut self) {
        let ep = self.0;
        let mut st = match ep.shared.state.lock() {
            Ok(st) => st,
            Err(poisoned) => poisoned.into_inner(),
        };
        st.tasks[ep.rank] = Task::Done;
        st.ready.remove(&ep.rank);
        if st.baton == ep.rank {
            let next = st.pass_baton(ep.rank);
            ep.shared.wake(&st, next);
        }
    }
}

impl Transport for SimulatedEndpoint {
    fn rank(&self) -> RankId {
        RankId(self.rank)
    }

    fn world_size(&self) -> usize {
        self.p
    }

    fn send(&self, dst: RankId, tag: Tag, payload: &[u8]) -> Result<()> {
        if dst.0 == self.rank {
            return Err(Error::SelfSend(self.rank));
        }
        if dst.0 >= self.p {
            return Err(Error::NotMember(dst.0));
        }
        let mut st = self.shared.lock();
        st.log.push(LogEntry {
            src: self.rank,
            dst: dst.0,
            tag,
            bytes: payload.len(),
        });
        st.mail[dst.0]
            .entry((self.rank, tag))
            .or_default()
            .push_back(payload.to_vec());
        if st.tasks[dst.0] == (Task::Blocked { src: self.rank, tag }) {
            st.ready.insert(dst.0);
        }
        Ok(())
    }

    fn recv(&self, src: RankId, tag: Tag) -> Result<Vec<u8>> {
        if src.0 == self.rank {
            return Err(Error::SelfSend(self.rank));
        }
        if src.0 >= self.p {
            return Err(Error::NotMember(src.0));
        }
        let mut st = self.shared.lock();
        loop {
            if let Some(payload) = st.mail[self.rank].get_mut(&(src.0, tag)).and_then(VecDeque::pop_front) {
                st.tasks[self.rank] = Task::Runnable;
                return Ok(payload);
            }
            if st.deadlocked {
                return Err(Error::Deadlock);
            }
            st.tasks[self.rank] = Task::Blocked { src: src.0, tag };
            st.ready.remove(&self.rank);
            let next = st.pass_baton(self.rank);
            self.shared.wake(&st, next);
            st = self.shared.wait_for_baton(st, self.rank);
        }
    }
}
