use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ColdSplit;
use crate::error::{Error, Result};

/// Rejection-sampling budget for the negative user of a triple.
pub const MAX_NEGATIVE_TRIES: usize = 100;

/// One training example: a warm item, a user who interacted with it, a user
/// who did not, and co-occurrence positives/negatives for the first user.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainTriple {
    pub item: usize,
    pub user: usize,
    pub neg_user: usize,
    pub co_pos: Vec<usize>,
    pub co_neg: Vec<usize>,
}

pub struct TripleSampler<'a> {
    split: &'a ColdSplit,
    c_p: usize,
    c_n: usize,
}

impl<'a> TripleSampler<'a> {
    pub fn new(split: &'a ColdSplit, c_p: usize, c_n: usize) -> Result<Self> {
        if split.train.is_empty() {
            return Err(Error::Sampling("no training interactions".into()));
        }
        if c_p == 0 {
            return Err(Error::Sampling("c_p must be at least 1".into()));
        }
        Ok(TripleSampler { split, c_p, c_n })
    }

    pub fn split(&self) -> &ColdSplit {
        self.split
    }

    /// Completes the training pair `(user, item)` into a triple.
    pub fn make_triple<R: Rng + ?Sized>(&self, user: usize, item: usize, rng: &mut R) -> Result<TrainTriple> {
        let split = self.split;
        let history = split.history(user);
        if history.is_empty() {
            return Err(Error::Sampling(format!("user {user} has no warm history")));
        }

        let mut neg_user = None;
        for _ in 0..MAX_NEGATIVE_TRIES {
            let cand = rng.random_range(0..split.user_count);
            if !split.interacted(cand, item) {
                neg_user = Some(cand);
                break;
            }
        }
        let neg_user = neg_user.ok_or_else(|| {
            Error::Sampling(format!(
                "no non-interacting user found for item {item} after {MAX_NEGATIVE_TRIES} tries"
            ))
        })?;

        let k = self.c_p.min(history.len());
        let co_pos: Vec<usize> = history.choose_multiple(rng, k).copied().collect();
        let co_neg = self.negatives(history, rng)?;
        Ok(TrainTriple {
            item,
            user,
            neg_user,
            co_pos,
            co_neg,
        })
    }

    fn negatives<R: Rng + ?Sized>(&self, history: &[usize], rng: &mut R) -> Result<Vec<usize>> {
        let warm = &self.split.warm_items;
        let available = warm.len() - history.len();
        if self.c_n == 0 {
            return Ok(Vec::new());
        }
        if available == 0 {
            return Err(Error::Sampling("user interacted with every warm item".into()));
        }
        let in_history = |i: &usize| history.binary_search(i).is_ok();
        if available >= 2 * self.c_n {
            let mut picked = Vec::with_capacity(self.c_n);
            let mut seen = HashSet::with_capacity(self.c_n);
            while picked.len() < self.c_n {
                let cand = *warm.choose(rng).expect("warm set is non-empty");
                if !in_history(&cand) && seen.insert(cand) {
                    picked.push(cand);
                }
            }
            return Ok(picked);
        }
        let mut pool: Vec<usize> = warm.iter().copied().filter(|i| !in_history(i)).collect();
        if pool.len() >= self.c_n {
            pool.shuffle(rng);
            pool.truncate(self.c_n);
            Ok(pool)
        } else {
            Ok((0..self.c_n).map(|_| *pool.choose(rng).unwrap()).collect())
        }
    }

    /// Draws `batch_size` training pairs uniformly and completes each.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<TrainTriple>> {
        (0..batch_size)
            .map(|_| {
                let &(u, i) = self.split.train.choose(rng).expect("non-empty");
                self.make_triple(u, i, rng)
            })
            .collect()
    }

    /// One pass over all training pairs in a seeded order, chunked into batches.
    pub fn epoch_schedule<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<Vec<(usize, usize)>> {
        let mut pairs = self.split.train.clone();
        pairs.shuffle(rng);
        pairs.chunks(batch_size.max(1)).map(<[_]>::to_vec).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{make_cold_split, Catalog, FeatureMatrix, InteractionLog};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn split_with(entries: Vec<(usize, usize)>, users: usize, items: usize) -> ColdSplit {
        let log = InteractionLog::from_indices(entries, users, items).unwrap();
        let cat = Catalog::new(vec![vec![0]; items], 1, FeatureMatrix::zeros(items, 1)).unwrap();
        make_cold_split(&log, &cat, 0.2, 3).unwrap()
    }

    #[test]
    fn short_history_caps_positives() {
        // user 0 interacts with exactly three warm items
        let entries: Vec<_> = (0..100).map(|i| (1, i)).collect();
        let mut split = split_with(entries, 3, 100);
        let warm3: Vec<usize> = split.warm_items[..3].to_vec();
        for &i in &warm3 {
            split.train.push((0, i));
        }
        split.user_histories[0] = warm3.clone();
        let s = TripleSampler::new(&split, 5, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = s.make_triple(0, warm3[0], &mut rng).unwrap();
        assert_eq!(t.co_pos.len(), 3);
        let mut sorted = t.co_pos.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, warm3);
        assert_eq!(t.co_neg.len(), 20);
        let distinct: HashSet<_> = t.co_neg.iter().collect();
        assert_eq!(distinct.len(), 20);
        assert!(t.co_neg.iter().all(|i| !warm3.contains(i)));
    }

    #[test]
    fn same_stream_same_batch() {
        let entries: Vec<_> = (0..20)
            .flat_map(|u| (0..30).filter(move |i| (u + i) % 3 == 0).map(move |i| (u, i)))
            .collect();
        let split = split_with(entries, 20, 30);
        let s = TripleSampler::new(&split, 5, 4).unwrap();
        let a = s.sample_batch(16, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = s.sample_batch(16, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn item_liked_by_everyone_fails() {
        let entries: Vec<_> = (0..5).flat_map(|u| (0..10).map(move |i| (u, i))).collect();
        let split = split_with(entries, 5, 10);
        let s = TripleSampler::new(&split, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (u, i) = split.train[0];
        assert!(s.make_triple(u, i, &mut rng).is_err());
    }
}
