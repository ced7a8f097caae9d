//! Flat all-gather and reduce-scatter over a single communicator.
//!
//! Buffers are `f32` elements. For a collective over `p` ranks an
//! all-gather takes `n` elements per rank and returns the rank-ordered
//! concatenation of `p * n`; a reduce-scatter takes `p * n` elements and
//! rank `r` returns chunk `r` (elements `[r*n, (r+1)*n)`) of the element-wise
//! sum over all ranks.
//!
//! Every invocation draws a fresh tag sequence from the communicator and
//! step `s` of the schedule uses tag `s`, so one message per
//! `(src, dst, tag)` channel is ever in flight.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transport::{decode_f32_into, encode_f32, Communicator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum ReduceOp {
    #[default]
    Sum,
}

/// `acc[i] <- acc[i] (op) other[i]`.
pub fn reduce_inplace(acc: &mut [f32], other: &[f32], op: ReduceOp) -> Result<()> {
    if acc.len() != other.len() {
        return Err(Error::LengthMismatch {
            expected: acc.len(),
            actual: other.len(),
        });
    }
    match op {
        ReduceOp::Sum => acc.iter_mut().zip(other).for_each(|(a, b)| *a += *b),
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    AllGather,
    ReduceScatter,
}

impl CollectiveKind {
    pub fn short(self) -> &'static str {
        match self {
            CollectiveKind::AllGather => "ag",
            CollectiveKind::ReduceScatter => "rs",
        }
    }
}

impl std::fmt::Display for CollectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CollectiveKind::AllGather => "all_gather",
            CollectiveKind::ReduceScatter => "reduce_scatter",
        })
    }
}

impl std::str::FromStr for CollectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ag" | "all_gather" | "allgather" => Ok(CollectiveKind::AllGather),
            "rs" | "reduce_scatter" | "reducescatter" => Ok(CollectiveKind::ReduceScatter),
            other => Err(Error::InvalidConfig(format!("unknown collective `{other}`"))),
        }
    }
}

/// Single-level algorithm family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlatAlgorithm {
    Ring,
    /// Recursive doubling for all-gather, recursive halving for
    /// reduce-scatter. Power-of-two communicators only.
    Recursive,
}

impl std::fmt::Display for FlatAlgorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FlatAlgorithm::Ring => "ring",
            FlatAlgorithm::Recursive => "recursive",
        })
    }
}

pub fn all_gather(comm: &Communicator<'_>, algorithm: FlatAlgorithm, input: &[f32]) -> Result<Vec<f32>> {
    match algorithm {
        FlatAlgorithm::Ring => ring_all_gather(comm, input),
        FlatAlgorithm::Recursive => recdbl_all_gather(comm, input),
    }
}

pub fn reduce_scatter(comm: &Communicator<'_>, algorithm: FlatAlgorithm, input: &[f32]) -> Result<Vec<f32>> {
    match algorithm {
        FlatAlgorithm::Ring => ring_reduce_scatter(comm, input),
        FlatAlgorithm::Recursive => rechalf_reduce_scatter(comm, input),
    }
}

pub fn run_collective(
    comm: &Communicator<'_>,
    collective: CollectiveKind,
    algorithm: FlatAlgorithm,
    input: &[f32],
) -> Result<Vec<f32>> {
    match collective {
        CollectiveKind::AllGather => all_gather(comm, algorithm, input),
        CollectiveKind::ReduceScatter => reduce_scatter(comm, algorithm, input),
    }
}

/// `log2(p)` if `p` is a power of two.
pub fn exact_log2(p: usize) -> Option<u32> {
    p.is_power_of_two().then(|| p.trailing_zeros())
}

fn chunk_len(len: usize, parts: usize) -> Result<usize> {
    if !len.is_multiple_of(parts) {
        return Err(Error::NotDivisible { len, parts });
    }
    Ok(len / parts)
}

fn recv_into(comm: &Communicator<'_>, from: usize, tag: u32, dst: &mut [f32]) -> Result<()> {
    let bytes = comm.recv(from, tag)?;
    decode_f32_into(&bytes, dst)
}

/// Ring all-gather: `p - 1` steps; at step `s` rank `r` forwards the block
/// that originated at `(r - s) mod p` to `r + 1` and receives block
/// `(r - s - 1) mod p` from `r - 1`.
pub fn ring_all_gather(comm: &Communicator<'_>, input: &[f32]) -> Result<Vec<f32>> {
    let p = comm.size();
    let r = comm.index();
    let n = input.len();
    let mut out = vec![0f32; p * n];
    out[r * n..(r + 1) * n].copy_from_slice(input);
    if p == 1 {
        return Ok(out);
    }
    let tags = comm.next_collective();
    let next = (r + 1) % p;
    let prev = (r + p - 1) % p;
    for s in 0..p - 1 {
        let send_block = (r + p - s) % p;
        let recv_block = (r + 2 * p - s - 1) % p;
        let tag = tags.step(s);
        comm.send(next, tag, &encode_f32(&out[send_block * n..(send_block + 1) * n]))?;
        recv_into(comm, prev, tag, &mut out[recv_block * n..(recv_block + 1) * n])?;
    }
    Ok(out)
}

/// Ring reduce-scatter: `p - 1` steps, each moving one `n`-element chunk
/// and performing one reduction. Rank `r` ends with chunk `r`.
pub fn ring_reduce_scatter(comm: &Communicator<'_>, input: &[f32]) -> Result<Vec<f32>> {
    let p = comm.size();
    let r = comm.index();
    let n = chunk_len(input.len(), p)?;
    if p == 1 {
        return Ok(input.to_vec());
    }
    let mut acc = input.to_vec();
    let mut incoming = vec![0f32; n];
    let tags = comm.next_collective();
    let next = (r + 1) % p;
    let prev = (r + p - 1) % p;
    for s in 0..p - 1 {
        let send_chunk = (r + 2 * p - s - 1) % p;
        let recv_chunk = (r + 2 * p - s - 2) % p;
        let tag = tags.step(s);
        comm.send(next, tag, &encode_f32(&acc[send_chunk * n..(send_chunk + 1) * n]))?;
        recv_into(comm, prev, tag, &mut incoming)?;
        reduce_inplace(&mut acc[recv_chunk * n..(recv_chunk + 1) * n], &incoming, ReduceOp::Sum)?;
    }
    acc.truncate((r + 1) * n);
    acc.drain(..r * n);
    Ok(acc)
}

/// Bit flipped to find the partner at step `step` of a `levels`-step
/// recursive all-gather: the distance halves as the exchanged data doubles,
/// so the largest transfers go to the nearest partners.
pub(crate) fn all_gather_partner_bit(step: u32, levels: u32) -> u32 {
    levels - 1 - step
}

/// Bit flipped at step `step` of a recursive-halving reduce-scatter: the
/// distance doubles as the exchanged data halves, so again the largest
/// transfers go to the nearest partners.
pub(crate) fn reduce_scatter_partner_bit(step: u32, _levels: u32) -> u32 {
    step
}

fn pack_blocks(buf: &[f32], blocks: &[usize], n: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(blocks.len() * n * 4);
    for &b in blocks {
        for v in &buf[b * n..(b + 1) * n] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn check_payload(bytes: &[u8], blocks: usize, n: usize) -> Result<()> {
    if bytes.len() != blocks * n * 4 {
        return Err(Error::LengthMismatch {
            expected: blocks * n,
            actual: bytes.len() / 4,
        });
    }
    Ok(())
}

/// Recursive-doubling all-gather: `log2 p` pairwise exchanges; at step `k`
/// each rank swaps its `2^k * n` accumulated elements with its partner and
/// the accumulated set doubles.
pub fn recdbl_all_gather(comm: &Communicator<'_>, input: &[f32]) -> Result<Vec<f32>> {
    let p = comm.size();
    let levels = exact_log2(p).ok_or(Error::NonPowerOfTwo(p))?;
    let r = comm.index();
    let n = input.len();
    let mut out = vec![0f32; p * n];
    out[r * n..(r + 1) * n].copy_from_slice(input);
    let tags = comm.next_collective();
    let mut held = vec![r];
    for k in 0..levels {
        let bit = 1usize << all_gather_partner_bit(k, levels);
        let partner = r ^ bit;
        let bytes = comm.sendrecv(partner, tags.step(k as usize), &pack_blocks(&out, &held, n))?;
        check_payload(&bytes, held.len(), n)?;
        let theirs: Vec<usize> = held.iter().map(|b| b ^ bit).collect();
        for (b, chunk) in theirs.iter().zip(bytes.chunks_exact(n.max(1) * 4)) {
            decode_f32_into(chunk, &mut out[b * n..(b + 1) * n])?;
        }
        held.extend(theirs);
        held.sort_unstable();
    }
    Ok(out)
}

/// Recursive-halving reduce-scatter: `log2 p` pairwise exchanges; at step
/// `k` each rank sends the half of its active blocks owned by the partner's
/// side, reduces the partner's copy of its own half, and the active set
/// halves. Rank `r` ends with chunk `r`.
pub fn rechalf_reduce_scatter(comm: &Communicator<'_>, input: &[f32]) -> Result<Vec<f32>> {
    let p = comm.size();
    let levels = exact_log2(p).ok_or(Error::NonPowerOfTwo(p))?;
    let r = comm.index();
    let n = chunk_len(input.len(), p)?;
    let mut acc = input.to_vec();
    let tags = comm.next_collective();
    let mut active: Vec<usize> = (0..p).collect();
    let mut incoming = vec![0f32; n];
    for k in 0..levels {
        let bit = 1usize << reduce_scatter_partner_bit(k, levels);
        let partner = r ^ bit;
        let (keep, give): (Vec<usize>, Vec<usize>) = active.iter().partition(|&&b| b & bit == r & bit);
        let bytes = comm.sendrecv(partner, tags.step(k as usize), &pack_blocks(&acc, &give, n))?;
        check_payload(&bytes, keep.len(), n)?;
        for (b, chunk) in keep.iter().zip(bytes.chunks_exact(n.max(1) * 4)) {
            decode_f32_into(chunk, &mut incoming)?;
            reduce_inplace(&mut acc[b * n..(b + 1) * n], &incoming, ReduceOp::Sum)?;
        }
        active = keep;
    }
    debug_assert_eq!(active, vec![r]);
    acc.truncate((r + 1) * n);
    acc.drain(..r * n);
    Ok(acc)
}
