//! Seeded synthetic implicit-feedback data with latent user archetypes.
//!
//! Items are divided into `n_archetypes` contiguous blocks. Each user is
//! assigned one archetype uniformly at random and draws between
//! `min_items` and `max_items` distinct items. Each draw comes from the
//! user's own block with probability `in_archetype_prob`, otherwise from
//! the whole catalogue. Within a block item `r` (0-based position) has
//! weight `1 / (r + 1)^zipf_exponent`, so every block has its own head of
//! popular items while global popularity stays spread across blocks.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::UserHistory;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchetypeConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_archetypes: usize,
    pub min_items: usize,
    pub max_items: usize,
    pub in_archetype_prob: f64,
    pub zipf_exponent: f64,
}

impl Default for ArchetypeConfig {
    fn default() -> Self {
        ArchetypeConfig {
            n_users: 1200,
            n_items: 300,
            n_archetypes: 3,
            min_items: 15,
            max_items: 30,
            in_archetype_prob: 0.9,
            zipf_exponent: 0.8,
        }
    }
}

pub fn item_id(i: usize) -> String {
    format!("item{i:05}")
}

pub fn user_id(u: usize) -> String {
    format!("user{u:05}")
}

impl ArchetypeConfig {
    /// Archetype block that item `i` belongs to.
    pub fn block_of(&self, item: usize) -> usize {
        (item * self.n_archetypes / self.n_items).min(self.n_archetypes - 1)
    }

    /// Generates users sorted by id, each with a sorted item list.
    pub fn generate(&self, seed: u64) -> Vec<UserHistory> {
        self.generate_with_archetypes(seed).into_iter().map(|(u, _)| u).collect()
    }

    /// As [`generate`](Self::generate), also returning each user's archetype.
    pub fn generate_with_archetypes(&self, seed: u64) -> Vec<(UserHistory, usize)> {
        assert!(self.n_archetypes >= 1 && self.n_items >= self.n_archetypes);
        assert!(self.min_items >= 1 && self.min_items <= self.max_items);
        assert!(self.max_items <= self.n_items);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks: Vec<Vec<usize>> = (0..self.n_archetypes)
            .map(|a| (0..self.n_items).filter(|&i| self.block_of(i) == a).collect())
            .collect();
        let samplers: Vec<WeightedIndex<f64>> = blocks
            .iter()
            .map(|b| {
                let w: Vec<f64> = (0..b.len())
                    .map(|r| 1.0 / ((r + 1) as f64).powf(self.zipf_exponent))
                    .collect();
                WeightedIndex::new(w).expect("non-empty positive weights")
            })
            .collect();

        (0..self.n_users)
            .map(|u| {
                let archetype = rng.random_range(0..self.n_archetypes);
                let target = rng.random_range(self.min_items..=self.max_items);
                let mut items = BTreeSet::new();
                while items.len() < target {
                    let item = if rng.random_bool(self.in_archetype_prob) {
                        blocks[archetype][samplers[archetype].sample(&mut rng)]
                    } else {
                        rng.random_range(0..self.n_items)
                    };
                    items.insert(item);
                }
                (
                    UserHistory {
                        user_id: user_id(u),
                        items: items.into_iter().map(item_id).collect(),
                    },
                    archetype,
                )
            })
            .collect()
    }
}

/// Renders users as a ratings log (`user_id,item_id,rating,timestamp`, with
/// header). Every consumed item gets rating 5; each user also gets one
/// low-rated row (rating 2) that binarization must discard.
pub fn ratings_csv(users: &[UserHistory], n_items: usize) -> String {
    let mut out = String::from("userId,movieId,rating,timestamp\n");
    let mut ts = 1_000_000_000u64;
    for (u, user) in users.iter().enumerate() {
        for item in &user.items {
            let _ = writeln!(out, "{},{item},5,{ts}", user.user_id);
            ts += 1;
        }
        let decoy = item_id((u * 31 + 7) % n_items.max(1));
        if !user.items.contains(&decoy) {
            let _ = writeln!(out, "{},{decoy},2,{ts}", user.user_id);
            ts += 1;
        }
    }
    out
}
