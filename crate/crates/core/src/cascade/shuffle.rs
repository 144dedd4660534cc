//! Shared pseudo-random orderings. Both parties derive identical orders
//! from the chunk seed, so only range bounds cross the channel.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bits::BitString;

/// Ids at or above this value name random subsets used by confirmation
/// rounds; ids below it name pass permutations.
pub const SUBSET_BASE: u32 = 1 << 20;

fn rng_for(seed: u64, id: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);
    rng
}

pub fn permutation(seed: u64, id: u32, n: usize) -> Vec<u32> {
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(&mut rng_for(seed, id));
    order
}

/// Uniformly random subset of `0..n` as a membership mask.
pub fn subset_mask(seed: u64, id: u32, n: usize) -> BitString {
    let mut rng = rng_for(seed, id);
    BitString::from_words_fn(n, || rng.next_u64())
}

fn mask_positions(mask: &BitString) -> Vec<u32> {
    (0..mask.len()).filter(|&i| mask.get(i)).map(|i| i as u32).collect()
}

struct Subset {
    mask: BitString,
    len: usize,
    positions: Option<Vec<u32>>,
}

/// Lazily materialized orderings for one key chunk.
pub struct Shuffles {
    seed: u64,
    n: usize,
    perms: HashMap<u32, Vec<u32>>,
    subsets: HashMap<u32, Subset>,
}

impl Shuffles {
    pub fn new(seed: u64, n: usize) -> Self {
        Self {
            seed,
            n,
            perms: HashMap::new(),
            subsets: HashMap::new(),
        }
    }

    pub fn key_len(&self) -> usize {
        self.n
    }

    fn subset(&mut self, id: u32) -> &mut Subset {
        let (seed, n) = (self.seed, self.n);
        self.subsets.entry(id).or_insert_with(|| {
            let mask = subset_mask(seed, id, n);
            let len = mask.count_ones();
            Subset {
                mask,
                len,
                positions: None,
            }
        })
    }

    /// Number of positions addressed by `id`.
    pub fn len_of(&mut self, id: u32) -> usize {
        if id >= SUBSET_BASE {
            self.subset(id).len
        } else {
            self.n
        }
    }

    /// Ordered positions of `id`.
    pub fn order(&mut self, id: u32) -> &[u32] {
        if id >= SUBSET_BASE {
            let s = self.subset(id);
            if s.positions.is_none() {
                s.positions = Some(mask_positions(&s.mask));
            }
            s.positions.as_deref().unwrap()
        } else {
            let (seed, n) = (self.seed, self.n);
            self.perms.entry(id).or_insert_with(|| permutation(seed, id, n))
        }
    }

    /// Parity of `key` over positions `start..end` of ordering `id`.
    pub fn range_parity(&mut self, key: &BitString, id: u32, start: usize, end: usize) -> bool {
        if id >= SUBSET_BASE {
            let s = self.subset(id);
            if start == 0 && end == s.len {
                return key.and_parity(&s.mask);
            }
        }
        key.parity_of(&self.order(id)[start..end])
    }

    /// Drops cached subsets; pass permutations are kept.
    pub fn forget_subsets(&mut self) {
        self.subsets.clear();
    }
}
