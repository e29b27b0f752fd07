use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Catalog, InteractionLog};
use crate::error::{Error, Result};

/// Disjoint warm/cold item partition with the interactions routed to each side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColdSplit {
    pub user_count: usize,
    pub item_count: usize,
    /// Sorted ascending.
    pub warm_items: Vec<usize>,
    /// Sorted ascending.
    pub cold_items: Vec<usize>,
    pub train: Vec<(usize, usize)>,
    pub validation: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    /// Warm items per user, sorted ascending.
    pub user_histories: Vec<Vec<usize>>,
    is_cold: Vec<bool>,
}

impl ColdSplit {
    pub fn is_cold(&self, item: usize) -> bool {
        self.is_cold[item]
    }

    pub fn history(&self, user: usize) -> &[usize] {
        &self.user_histories[user]
    }

    /// Whether `(user, item)` is a training interaction.
    pub fn interacted(&self, user: usize, item: usize) -> bool {
        self.user_histories[user].binary_search(&item).is_ok()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Permutes items with a seeded RNG and marks the last `⌈fraction·N⌉` as cold.
/// Cold interactions are shuffled and halved into validation and test.
pub fn make_cold_split(log: &InteractionLog, catalog: &Catalog, cold_fraction: f64, seed: u64) -> Result<ColdSplit> {
    if !(cold_fraction > 0.0 && cold_fraction < 1.0) {
        return Err(Error::Split(format!("cold fraction {cold_fraction} not in (0, 1)")));
    }
    let n = log.item_count;
    if catalog.item_count() != n {
        return Err(Error::Split(format!(
            "catalog has {} items, interaction log {n}",
            catalog.item_count()
        )));
    }
    // Guard against 0.3 * 10 landing a hair above 3.
    let n_cold = ((cold_fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    if n_cold == 0 {
        return Err(Error::Split(format!(
            "cold fraction {cold_fraction} leaves no cold items of {n}"
        )));
    }
    if n_cold >= n {
        return Err(Error::Split(format!(
            "cold fraction {cold_fraction} leaves no warm items of {n}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut is_cold = vec![false; n];
    for &i in &perm[n - n_cold..] {
        is_cold[i] = true;
    }
    let warm_items: Vec<usize> = (0..n).filter(|&i| !is_cold[i]).collect();
    let cold_items: Vec<usize> = (0..n).filter(|&i| is_cold[i]).collect();

    let mut train = Vec::new();
    let mut eval = Vec::new();
    for &(u, i) in &log.entries {
        if is_cold[i] {
            eval.push((u, i));
        } else {
            train.push((u, i));
        }
    }
    eval.shuffle(&mut rng);
    let test = eval.split_off(eval.len() / 2);
    let validation = eval;

    let mut user_histories = vec![Vec::new(); log.user_count];
    for &(u, i) in &train {
        user_histories[u].push(i);
    }
    for h in &mut user_histories {
        h.sort_unstable();
    }

    Ok(ColdSplit {
        user_count: log.user_count,
        item_count: n,
        warm_items,
        cold_items,
        train,
        validation,
        test,
        user_histories,
        is_cold,
    })
}
