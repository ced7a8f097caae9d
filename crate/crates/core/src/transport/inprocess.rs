//! Real concurrent ranks inside one process: one OS thread per rank.

use std::sync::Arc;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::topology::RankId;

use super::mailbox::Mailbox;
use super::{Communicator, LogEntry, MessageLog, Tag, Transport};

/// Shared routing state for `p` in-process ranks.
#[derive(Clone)]
pub struct InProcessWorld {
    mailboxes: Arc<[Mailbox]>,
    log: Option<MessageLog>,
    recv_timeout: Option<Duration>,
}

pub struct InProcessEndpoint {
    rank: usize,
    world: InProcessWorld,
}

impl InProcessWorld {
    pub fn new(p: usize) -> Self {
        assert!(p >= 1, "a world needs at least one rank");
        Self {
            mailboxes: (0..p).map(|_| Mailbox::default()).collect(),
            log: None,
            recv_timeout: None,
        }
    }

    /// Records every send into a shared log.
    pub fn with_log(mut self) -> Self {
        self.log = Some(MessageLog::new());
        self
    }

    pub fn with_recv_timeout(mut self, timeout: Duration) -> Self {
        self.recv_timeout = Some(timeout);
        self
    }

    pub fn size(&self) -> usize {
        self.mailboxes.len()
    }

    pub fn endpoint(&self, rank: usize) -> InProcessEndpoint {
        assert!(rank < self.size());
        InProcessEndpoint {
            rank,
            world: self.clone(),
        }
    }

    pub fn log(&self) -> Vec<LogEntry> {
        self.log.as_ref().map(MessageLog::entries).unwrap_or_default()
    }

    pub fn clear_log(&self) {
        if let Some(log) = &self.log {
            log.clear();
        }
    }

    /// Deepest any single `(src, dst, tag)` queue has been.
    pub fn max_in_flight(&self) -> usize {
        self.mailboxes.iter().map(Mailbox::max_depth).max().unwrap_or(0)
    }

    /// Runs `f` once per rank on its own thread, each with a world
    /// communicator, and returns the per-rank results in rank order.
    pub fn run<R, F>(&self, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(&Communicator<'_>) -> R + Sync,
    {
        let f = &f;
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..self.size())
                .map(|rank| {
                    let ep = self.endpoint(rank);
                    s.spawn(move || {
                        let comm = Communicator::world(&ep);
                        f(&comm)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("rank thread panicked"))
                .collect()
        })
    }
}

/// Convenience wrapper: a fresh `p`-rank world running `f` on every rank.
pub fn run_in_process<R, F>(p: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(&Communicator<'_>) -> R + Sync,
{
    InProcessWorld::new(p).run(f)
}

impl Transport for InProcessEndpoint {
    fn rank(&self) -> RankId {
        RankId(self.rank)
    }

    fn world_size(&self) -> usize {
        self.world.size()
    }

    fn send(&self, dst: RankId, tag: Tag, payload: &[u8]) -> Result<()> {
        if dst.0 == self.rank {
            return Err(Error::SelfSend(self.rank));
        }
        let mailbox = self.world.mailboxes.get(dst.0).ok_or(Error::NotMember(dst.0))?;
        if let Some(log) = &self.world.log {
            log.record(LogEntry {
                src: self.rank,
                dst: dst.0,
                tag,
                bytes: payload.len(),
            });
        }
        mailbox.push(self.rank, tag, payload.to_vec());
        Ok(())
    }

    fn recv(&self, src: RankId, tag: Tag) -> Result<Vec<u8>> {
        if src.0 == self.rank {
            return Err(Error::SelfSend(self.rank));
        }
        if src.0 >= self.world.size() {
            return Err(Error::NotMember(src.0));
        }
        self.world.mailboxes[self.rank].pop(src.0, tag, self.world.recv_timeout)
    }
}
