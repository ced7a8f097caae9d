//! Tagged point-to-point messaging beneath every collective.
//!
//! Three backends implement [`Transport`]:
//!
//! * [`inprocess`]: one thread per rank, shared mailboxes, wall-clock time.
//! * [`socket`]: one process (or thread) per rank over TCP, framed with a
//!   fixed 16-byte little-endian header.
//! * [`simulated`]: ranks run as cooperatively scheduled tasks with a
//!   deterministic round-robin baton; time comes from the virtual-time
//!   engine in [`crate::simnet`].
//!
//! Matching is exact on `(src, tag)` and FIFO per `(src, dst, tag)` channel.
//! Sends are buffered: a send never waits for the matching receive, which is
//! what lets [`Transport::sendrecv`] be a plain send followed by a receive.

pub mod inprocess;
pub(crate) mod mailbox;
pub mod simulated;
pub mod socket;

use std::cell::Cell;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::{GroupSpec, RankId};

pub type Tag = u32;

pub trait Transport: Send {
    /// Global rank owning this endpoint.
    fn rank(&self) -> RankId;

    fn world_size(&self) -> usize;

    /// Queues `payload` for delivery to `dst`. Must not block on the receiver.
    fn send(&self, dst: RankId, tag: Tag, payload: &[u8]) -> Result<()>;

    /// Blocks until the next message on channel `(src, tag)` arrives.
    fn recv(&self, src: RankId, tag: Tag) -> Result<Vec<u8>>;

    fn sendrecv(&self, peer: RankId, tag: Tag, payload: &[u8]) -> Result<Vec<u8>> {
        self.send(peer, tag, payload)?;
        self.recv(peer, tag)
    }
}

/// One message as seen by transport instrumentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LogEntry {
    pub src: usize,
    pub dst: usize,
    pub tag: Tag,
    pub bytes: usize,
}

/// Shared, append-only record of every send.
#[derive(Debug, Clone, Default)]
pub struct MessageLog(Arc<Mutex<Vec<LogEntry>>>);

impl MessageLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn record(&self, entry: LogEntry) {
        self.0.lock().expect("message log poisoned").push(entry);
    }

    pub fn entries(&self) -> Vec<LogEntry> {
        self.0.lock().expect("message log poisoned").clone()
    }

    pub fn clear(&self) {
        self.0.lock().expect("message log poisoned").clear();
    }
}

/// Communicator context: keeps traffic of different communicators apart in
/// the tag space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Context(u8);

impl Context {
    pub const WORLD: Context = Context(0);
    pub const INTER_NODE: Context = Context(1);
    pub const INTRA_NODE: Context = Context(2);

    const BARRIER_FLAG: u8 = 0x8;

    pub const fn custom(id: u8) -> Context {
        assert!(id < Self::BARRIER_FLAG, "context ids are 3 bits");
        Context(id)
    }

    pub fn id(self) -> u8 {
        self.0
    }

    pub fn is_barrier(self) -> bool {
        self.0 & Self::BARRIER_FLAG != 0
    }

    fn barrier(self) -> Context {
        Context(self.0 | Self::BARRIER_FLAG)
    }
}

/// Tag layout: `[context:4][sequence:16][step:12]`.
pub mod tags {
    use super::{Context, Tag};

    pub const STEP_BITS: u32 = 12;
    pub const SEQ_BITS: u32 = 16;
    pub const MAX_STEPS: u32 = 1 << STEP_BITS;

    pub fn make(context: Context, seq: u16, step: u32) -> Tag {
        assert!(step < MAX_STEPS, "step {step} exceeds the {MAX_STEPS}-step tag space");
        ((context.0 as u32) << (STEP_BITS + SEQ_BITS)) | ((seq as u32) << STEP_BITS) | step
    }

    pub fn context(tag: Tag) -> Context {
        Context((tag >> (STEP_BITS + SEQ_BITS)) as u8)
    }

    pub fn sequence(tag: Tag) -> u16 {
        ((tag >> STEP_BITS) & ((1 << SEQ_BITS) - 1)) as u16
    }

    pub fn step(tag: Tag) -> u32 {
        tag & (MAX_STEPS - 1)
    }
}

/// An ordered group of ranks over a transport endpoint.
///
/// Ranks inside a communicator are addressed by their index in the member
/// list. Every collective call draws a fresh sequence number, so each
/// invocation (and each of its steps) occupies its own tags. All members must
/// issue collectives in the same order.
pub struct Communicator<'t> {
    transport: &'t dyn Transport,
    members: Vec<RankId>,
    index: usize,
    context: Context,
    seq: Cell<u16>,
    barrier_seq: Cell<u16>,
}

impl<'t> Communicator<'t> {
    /// The world communicator: members `0..p` in order.
    pub fn world(transport: &'t dyn Transport) -> Self {
        let p = transport.world_size();
        let index = transport.rank().0;
        Self {
            transport,
            members: (0..p).map(RankId).collect(),
            index,
            context: Context::WORLD,
            seq: Cell::new(0),
            barrier_seq: Cell::new(0),
        }
    }

    pub fn from_group(transport: &'t dyn Transport, group: &GroupSpec, context: Context) -> Result<Self> {
        Self::from_members(transport, group.members.clone(), context)
    }

    pub fn from_members(transport: &'t dyn Transport, members: Vec<RankId>, context: Context) -> Result<Self> {
        let me = transport.rank();
        let index = members.iter().position(|&m| m == me).ok_or(Error::NotMember(me.0))?;
        if let Some(bad) = members.iter().find(|m| m.0 >= transport.world_size()) {
            return Err(Error::NotMember(bad.0));
        }
        Ok(Self {
            transport,
            members,
            index,
            context,
            seq: Cell::new(0),
            barrier_seq: Cell::new(0),
        })
    }

    /// A sub-communicator over `members` whose sequence numbers continue from
    /// this one, so repeated splits never reuse tags. Every member of `self`
    /// must split in the same order.
    pub fn split(&self, members: Vec<RankId>, context: Context) -> Result<Self> {
        let base = self.next_collective().seq;
        let sub = Self::from_members(self.transport, members, context)?;
        sub.seq.set(base);
        Ok(sub)
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    /// This rank's index within the communicator.
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn global_rank(&self) -> RankId {
        self.members[self.index]
    }

    pub fn members(&self) -> &[RankId] {
        &self.members
    }

    pub fn context(&self) -> Context {
        self.context
    }

    pub fn transport(&self) -> &'t dyn Transport {
        self.transport
    }

    /// Reserves a sequence number for one collective invocation; step `s`
    /// of that invocation uses `step_tag(base, s)`.
    pub fn next_collective(&self) -> CollectiveTags {
        let seq = self.seq.get();
        self.seq.set(seq.wrapping_add(1));
        CollectiveTags {
            context: self.context,
            seq,
        }
    }

    fn member(&self, index: usize) -> Result<RankId> {
        self.members.get(index).copied().ok_or(Error::IndexOutOfRange {
            index,
            limit: self.members.len(),
        })
    }

    pub fn send(&self, to: usize, tag: Tag, payload: &[u8]) -> Result<()> {
        self.transport.send(self.member(to)?, tag, payload)
    }

    pub fn recv(&self, from: usize, tag: Tag) -> Result<Vec<u8>> {
        self.transport.recv(self.member(from)?, tag)
    }

    pub fn sendrecv(&self, peer: usize, tag: Tag, payload: &[u8]) -> Result<Vec<u8>> {
        self.transport.sendrecv(self.member(peer)?, tag, payload)
    }

    /// Dissemination barrier: `ceil(log2 p)` rounds, round `k` signals
    /// `index + 2^k` and waits on `index - 2^k`.
    pub fn barrier(&self) -> Result<()> {
        let p = self.size();
        let seq = self.barrier_seq.get();
        self.barrier_seq.set(seq.wrapping_add(1));
        let mut dist = 1;
        let mut round = 0;
        while dist < p {
            let tag = tags::make(self.context.barrier(), seq, round);
            self.send((self.index + dist) % p, tag, &[])?;
            self.recv((self.index + p - dist) % p, tag)?;
            dist <<= 1;
            round += 1;
        }
        Ok(())
    }
}

/// Tag allocator for a single collective invocation.
#[derive(Debug, Clone, Copy)]
pub struct CollectiveTags {
    context: Context,
    seq: u16,
}

impl CollectiveTags {
    pub fn step(&self, step: usize) -> Tag {
        tags::make(self.context, self.seq, step as u32)
    }
}

/// Little-endian encoding of an `f32` slice.
pub fn encode_f32(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f32(bytes: &[u8]) -> Result<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Unsupported(format!(
            "payload of {} bytes is not a whole number of f32 elements",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Decodes into `dst`, which must have exactly the payload's element count.
pub fn decode_f32_into(bytes: &[u8], dst: &mut [f32]) -> Result<()> {
    if bytes.len() != dst.len() * 4 {
        return Err(Error::LengthMismatch {
            expected: dst.len(),
            actual: bytes.len() / 4,
        });
    }
    for (d, c) in dst.iter_mut().zip(bytes.chunks_exact(4)) {
        *d = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tag_fields_round_trip() {
        let t = tags::make(Context::INTRA_NODE, 513, 4095);
        assert_eq!(tags::context(t), Context::INTRA_NODE);
        assert_eq!(tags::sequence(t), 513);
        assert_eq!(tags::step(t), 4095);
        let b = tags::make(Context::INTER_NODE.barrier(), 0, 3);
        assert!(tags::context(b).is_barrier());
    }

    #[test]
    #[should_panic]
    fn step_overflow_panics() {
        tags::make(Context::WORLD, 0, tags::MAX_STEPS);
    }

    #[test]
    fn f32_codec() {
        let v = [1.5f32, -2.0, 0.0, f32::MAX];
        let b = encode_f32(&v);
        assert_eq!(b.len(), 16);
        assert_eq!(decode_f32(&b).unwrap(), v);
        assert!(decode_f32(&b[..3]).is_err());
        let mut short = [0f32; 3];
        assert!(matches!(
            decode_f32_into(&b, &mut short),
            Err(Error::LengthMismatch { expected: 3, actual: 4 })
        ));
    }
}
