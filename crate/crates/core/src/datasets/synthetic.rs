//! Clustered desk-scale data with a shared (common) signal in both content
//! channels and an independent per-channel (unique) signal.
//!
//! Every item belongs to one of `clusters` groups and carries two subtypes,
//! one expressed only in its attributes and one only in its image features.
//! Users have a home cluster, a preferred subtype per channel, and an
//! inclination toward one of the two channels. Interaction propensity is
//! `p_in` (same cluster) or `p_out` (other cluster), multiplied by
//! `1 + unique_boost` when the item's subtype in the user's favoured channel
//! matches the user's preference.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Catalog, FeatureMatrix, InteractionLog};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub clusters: usize,
    pub users: usize,
    pub items: usize,
    pub attributes: usize,
    pub feature_dim: usize,
    pub interactions_per_user: usize,
    /// Std of the Gaussian noise added to image features.
    pub noise_scale: f64,
    pub seed: u64,
    pub p_in: f64,
    pub p_out: f64,
    /// Number of unique-view subtypes per channel.
    pub subtypes: usize,
    /// Multiplicative preference boost for a matching unique subtype.
    pub unique_boost: f64,
    /// Scale of the per-subtype image pattern.
    pub unique_scale: f64,
    /// Probability that an item's cluster attribute points at a random cluster.
    pub attribute_noise: f64,
    /// Probability that each free attribute slot is set at random.
    pub noise_bit_rate: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            clusters: 4,
            users: 200,
            items: 100,
            attributes: 16,
            feature_dim: 16,
            interactions_per_user: 20,
            noise_scale: 0.1,
            seed: 0,
            p_in: 0.8,
            p_out: 0.05,
            subtypes: 4,
            unique_boost: 2.0,
            unique_scale: 0.5,
            attribute_noise: 0.1,
            noise_bit_rate: 0.05,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clusters", self.clusters),
            ("users", self.users),
            ("items", self.items),
            ("attributes", self.attributes),
            ("feature_dim", self.feature_dim),
            ("interactions_per_user", self.interactions_per_user),
            ("subtypes", self.subtypes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("synthetic `{name}` must be positive")));
            }
        }
        if self.attributes < self.clusters + self.subtypes {
            return Err(Error::Config(format!(
                "need at least clusters + subtypes = {} attribute slots, got {}",
                self.clusters + self.subtypes,
                self.attributes
            )));
        }
        let probs = [
            ("noise_scale", self.noise_scale, f64::INFINITY),
            ("p_in", self.p_in, 1.0),
            ("p_out", self.p_out, 1.0),
            ("unique_boost", self.unique_boost, f64::INFINITY),
            ("unique_scale", self.unique_scale, f64::INFINITY),
            ("attribute_noise", self.attribute_noise, 1.0),
            ("noise_bit_rate", self.noise_bit_rate, 1.0),
        ];
        for (name, v, hi) in probs {
            if !(v >= 0.0 && v <= hi) {
                return Err(Error::Config(format!("synthetic `{name}` = {v} out of range")));
            }
        }
        if self.p_in == 0.0 && self.p_out == 0.0 {
            return Err(Error::Config("p_in and p_out cannot both be zero".into()));
        }
        Ok(())
    }
}

/// Generated data plus the ground truth that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub log: InteractionLog,
    pub catalog: Catalog,
    pub item_clusters: Vec<usize>,
    pub user_clusters: Vec<usize>,
    pub item_attr_subtype: Vec<usize>,
    pub item_image_subtype: Vec<usize>,
    /// `clusters × feature_dim`, row-major.
    pub centroids: Vec<Vec<f64>>,
    /// `subtypes × feature_dim` image patterns.
    pub image_patterns: Vec<Vec<f64>>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (k, s, d) = (spec.clusters, spec.subtypes, spec.feature_dim);

    let centroids: Vec<Vec<f64>> = (0..k).map(|_| gaussian_vec(&mut rng, d, 1.0)).collect();
    let image_patterns: Vec<Vec<f64>> = (0..s).map(|_| gaussian_vec(&mut rng, d, spec.unique_scale)).collect();

    let item_clusters: Vec<usize> = (0..spec.items).map(|_| rng.random_range(0..k)).collect();
    let item_attr_subtype: Vec<usize> = (0..spec.items).map(|_| rng.random_range(0..s)).collect();
    let item_image_subtype: Vec<usize> = (0..spec.items).map(|_| rng.random_range(0..s)).collect();

    // Attribute slots: [0, k) cluster, [k, k + s) attribute subtype, rest noise.
    let mut attributes = Vec::with_capacity(spec.items);
    for i in 0..spec.items {
        let mut row = Vec::new();
        let cluster_slot = if rng.random::<f64>() < spec.attribute_noise {
            rng.random_range(0..k)
        } else {
            item_clusters[i]
        };
        row.push(cluster_slot);
        row.push(k + item_attr_subtype[i]);
        for slot in k + s..spec.attributes {
            if rng.random::<f64>() < spec.noise_bit_rate {
                row.push(slot);
            }
        }
        attributes.push(row);
    }

    // Image features are rounded through f32 so the in-memory matrix equals
    // what the binary container stores.
    let mut image = FeatureMatrix::zeros(spec.items, d);
    for i in 0..spec.items {
        let noise = gaussian_vec(&mut rng, d, spec.noise_scale);
        let row = image.row_mut(i);
        for j in 0..d {
            let v = centroids[item_clusters[i]][j] + image_patterns[item_image_subtype[i]][j] + noise[j];
            row[j] = v as f32 as f64;
        }
    }

    let user_clusters: Vec<usize> = (0..spec.users).map(|_| rng.random_range(0..k)).collect();
    let mut entries = Vec::with_capacity(spec.users * spec.interactions_per_user);
    for (u, &user_cluster) in user_clusters.iter().enumerate() {
        let pref_attr = rng.random_range(0..s);
        let pref_image = rng.random_range(0..s);
        let favours_attr = rng.random::<bool>();
        // Efraimidis–Spirakis weighted sampling without replacement.
        let mut keyed: Vec<(f64, usize)> = (0..spec.items)
            .filter_map(|i| {
                let base = if item_clusters[i] == user_cluster {
                    spec.p_in
                } else {
                    spec.p_out
                };
                let matches = if favours_attr {
                    item_attr_subtype[i] == pref_attr
                } else {
                    item_image_subtype[i] == pref_image
                };
                let w = base * if matches { 1.0 + spec.unique_boost } else { 1.0 };
                let r: f64 = rng.random();
                (w > 0.0).then(|| (r.ln() / w, i))
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        entries.extend(keyed.into_iter().take(spec.interactions_per_user).map(|(_, i)| (u, i)));
    }

    // Every item gets at least one interaction so file round-trips keep it in
    // the item vocabulary.
    let mut seen = vec![false; spec.items];
    for &(_, i) in &entries {
        seen[i] = true;
    }
    for i in (0..spec.items).filter(|&i| !seen[i]) {
        let same: Vec<usize> = (0..spec.users)
            .filter(|&u| user_clusters[u] == item_clusters[i])
            .collect();
        let pool = if same.is_empty() || spec.p_in == 0.0 {
            (0..spec.users).collect()
        } else {
            same
        };
        let u = *pool.choose(&mut rng).unwrap();
        entries.push((u, i));
    }

    let log = InteractionLog::from_indices(entries, spec.users, spec.items)?;
    let catalog = Catalog::new(attributes, spec.attributes, image)?;
    Ok(SyntheticData {
        log,
        catalog,
        item_clusters,
        user_clusters,
        item_attr_subtype,
        item_image_subtype,
        centroids,
        image_patterns,
    })
}
