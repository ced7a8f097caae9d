//! Seeded integer-valued inputs and brute-force oracles.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::collectives::CollectiveKind;

/// Inputs are integers in `[-INPUT_RANGE, INPUT_RANGE]`, so float sums over
/// up to 2^13 ranks stay exact.
pub const INPUT_RANGE: u32 = 1024;

/// splitmix64 finalizer over `a` and `b`.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit FNV-1a of a cell label.
pub fn label_hash(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed of one sweep cell.
pub fn cell_seed(global_seed: u64, cell_label: &str) -> u64 {
    mix(global_seed, label_hash(cell_label))
}

/// Deterministic input stream of one rank, addressable by element index.
#[derive(Debug, Clone, Copy)]
pub struct InputGen {
    seed: u64,
}

impl InputGen {
    pub fn new(cell_seed: u64) -> Self {
        Self { seed: cell_seed }
    }

    /// Elements `[start, start + len)` of `rank`'s input.
    pub fn slice(&self, rank: usize, start: usize, len: usize) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, rank as u64));
        rng.set_word_pos(start as u128);
        (0..len)
            .map(|_| (rng.next_u32() % (2 * INPUT_RANGE + 1)) as i32 as f32 - INPUT_RANGE as f32)
            .collect()
    }

    pub fn input(&self, rank: usize, len: usize) -> Vec<f32> {
        self.slice(rank, 0, len)
    }
}

/// Input length (elements) each rank contributes for a collective whose
/// full buffer holds `full_elems` elements.
pub fn input_len(collective: CollectiveKind, full_elems: usize, p: usize) -> usize {
    match collective {
        CollectiveKind::AllGather => full_elems / p,
        CollectiveKind::ReduceScatter => full_elems,
    }
}

/// Rank-ordered concatenation of all inputs.
pub fn all_gather_oracle(inputs: &[Vec<f32>]) -> Vec<f32> {
    inputs.concat()
}

/// Chunk `rank` of the element-wise sum of all inputs, summed in rank order.
pub fn reduce_scatter_oracle(inputs: &[Vec<f32>], rank: usize) -> Vec<f32> {
    let p = inputs.len();
    let n = inputs[0].len() / p;
    (rank * n..(rank + 1) * n)
        .map(|i| inputs.iter().fold(0f32, |acc, v| acc + v[i]))
        .collect()
}

/// Expected output of `rank`, regenerating inputs from `gen` on demand so
/// that no rank ever holds every input at once.
pub fn expected_output(gen: &InputGen, collective: CollectiveKind, p: usize, rank: usize, in_len: usize) -> Vec<f32> {
    match collective {
        CollectiveKind::AllGather => (0..p).flat_map(|q| gen.input(q, in_len)).collect(),
        CollectiveKind::ReduceScatter => {
            let n = in_len / p;
            let mut acc = vec![0f32; n];
            for q in 0..p {
                for (a, v) in acc.iter_mut().zip(gen.slice(q, rank * n, n)) {
                    *a += v;
                }
            }
            acc
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_are_bounded_integers() {
        let g = InputGen::new(7);
        let v = g.input(3, 5000);
        assert!(v.iter().all(|x| x.fract() == 0.0 && x.abs() <= INPUT_RANGE as f32));
        assert!(v.iter().any(|x| *x < -1000.0) && v.iter().any(|x| *x > 1000.0));
    }

    #[test]
    fn slices_match_full_stream() {
        let g = InputGen::new(99);
        let full = g.input(2, 300);
        assert_eq!(g.slice(2, 120, 50), full[120..170].to_vec());
        assert_ne!(g.input(1, 300), full);
        assert_eq!(InputGen::new(99).input(2, 300), full);
    }

    #[test]
    fn oracles() {
        let inputs = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(all_gather_oracle(&inputs), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(reduce_scatter_oracle(&inputs, 0), vec![4.0]);
        assert_eq!(reduce_scatter_oracle(&inputs, 1), vec![6.0]);
    }

    #[test]
    fn streaming_expectation_matches_oracle() {
        let g = InputGen::new(5);
        let p = 4;
        for (c, len) in [(CollectiveKind::AllGather, 3), (CollectiveKind::ReduceScatter, 12)] {
            let inputs: Vec<_> = (0..p).map(|r| g.input(r, len)).collect();
            for r in 0..p {
                let want = match c {
                    CollectiveKind::AllGather => all_gather_oracle(&inputs),
                    CollectiveKind::ReduceScatter => reduce_scatter_oracle(&inputs, r),
                };
                assert_eq!(expected_output(&g, c, p, r, len), want);
            }
        }
    }

    #[test]
    fn seeds_differ_per_cell() {
        assert_ne!(cell_seed(1, "a"), cell_seed(1, "b"));
        assert_ne!(cell_seed(1, "a"), cell_seed(2, "a"));
        assert_eq!(cell_seed(3, "x"), cell_seed(3, "x"));
    }
}
