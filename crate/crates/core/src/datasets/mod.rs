//! Interaction logs, item content, the cold-start split, and training samplers.

mod io;
mod sampler;
mod split;
mod synthetic;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    load_attributes, load_image_features, load_interactions, write_attributes, write_image_features_binary,
    write_image_features_text, write_interactions, AttributeTable, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use sampler::{TrainTriple, TripleSampler, MAX_NEGATIVE_TRIES};
pub use split::{make_cold_split, ColdSplit};
pub use synthetic::{generate_synthetic, SyntheticData, SyntheticSpec};

/// Token ↔ dense index mapping in first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    /// Returns the index for `token`, appending it when unseen.
    pub fn intern(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), i);
        i
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Deduplicated (user, item) pairs over dense vocabularies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionLog {
    pub entries: Vec<(usize, usize)>,
    pub user_count: usize,
    pub item_count: usize,
    pub users: Vocab,
    pub items: Vocab,
}

impl InteractionLog {
    /// Builds a log with synthetic tokens `u<idx>` / `i<idx>`, dropping
    /// duplicate pairs while keeping first occurrences in order.
    pub fn from_indices(entries: Vec<(usize, usize)>, user_count: usize, item_count: usize) -> Result<Self> {
        for &(u, i) in &entries {
            if u >= user_count || i >= item_count {
                return Err(Error::Config(format!(
                    "interaction ({u}, {i}) outside {user_count} users × {item_count} items"
                )));
            }
        }
        let users = Vocab::from_tokens((0..user_count).map(|u| format!("u{u}")).collect());
        let items = Vocab::from_tokens((0..item_count).map(|i| format!("i{i}")).collect());
        Ok(InteractionLog {
            entries: dedup_pairs(entries),
            user_count,
            item_count,
            users,
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub(crate) fn dedup_pairs(entries: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    let mut seen = std::collections::HashSet::with_capacity(entries.len());
    entries.into_iter().filter(|p| seen.insert(*p)).collect()
}

/// Dense row-major matrix of per-item features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        FeatureMatrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        FeatureMatrix::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Per-item content: multi-hot attributes (stored as sorted set-bit indices)
/// and a dense image-feature row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub attributes: Vec<Vec<usize>>,
    pub attribute_count: usize,
    pub image_features: FeatureMatrix,
    /// Items whose attribute row is empty.
    pub flagged: Vec<usize>,
}

impl Catalog {
    pub fn new(attributes: Vec<Vec<usize>>, attribute_count: usize, image_features: FeatureMatrix) -> Result<Self> {
        if attributes.len() != image_features.rows {
            return Err(Error::Config(format!(
                "{} attribute rows but {} image-feature rows",
                attributes.len(),
                image_features.rows
            )));
        }
        let mut attributes = attributes;
        for (item, row) in attributes.iter_mut().enumerate() {
            row.sort_unstable();
            row.dedup();
            if let Some(&bad) = row.iter().find(|&&a| a >= attribute_count) {
                return Err(Error::Config(format!(
                    "item {item} sets attribute {bad} but only {attribute_count} slots exist"
                )));
            }
        }
        for (item, row) in image_features.data.chunks(image_features.cols.max(1)).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Feature {
                    item: item.to_string(),
                    msg: "non-finite value".into(),
                });
            }
        }
        let flagged = attributes
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_empty())
            .map(|(i, _)| i)
            .collect();
        Ok(Catalog {
            attributes,
            attribute_count,
            image_features,
            flagged,
        })
    }

    pub fn item_count(&self) -> usize {
        self.attributes.len()
    }

    pub fn image_dim(&self) -> usize {
        self.image_features.cols
    }

    pub fn attributes_of(&self, item: usize) -> &[usize] {
        &self.attributes[item]
    }

    pub fn image_of(&self, item: usize) -> &[f64] {
        self.image_features.row(item)
    }

    /// Dense 0/1 attribute row.
    pub fn multi_hot(&self, item: usize) -> Vec<u8> {
        let mut row = vec![0u8; self.attribute_count];
        for &a in &self.attributes[item] {
            row[a] = 1;
        }
        row
    }

    /// An item has content when it sets at least one attribute or carries a
    /// nonzero image row.
    pub fn has_content(&self, item: usize) -> bool {
        !self.attributes[item].is_empty() || self.image_of(item).iter().any(|&v| v != 0.0)
    }

    /// Brings the image width to `dim`: wider features go through a seeded
    /// Gaussian random projection scaled by `1/sqrt(d_img)`, narrower ones
    /// are zero-padded, equal widths pass through unchanged.
    pub fn with_image_dim(mut self, dim: usize, seed: u64) -> Self {
        let src = self.image_features.cols;
        if src == dim {
            return self;
        }
        let rows = self.image_features.rows;
        let mut out = FeatureMatrix::zeros(rows, dim);
        if src < dim {
            for i in 0..rows {
                out.row_mut(i)[..src].copy_from_slice(self.image_features.row(i));
            }
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scale = 1.0 / (src as f64).sqrt();
            let proj: Vec<f64> = (0..src * dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * scale
                })
                .collect();
            for i in 0..rows {
                let x = self.image_features.row(i).to_vec();
                let y = out.row_mut(i);
                for (r, &xr) in x.iter().enumerate() {
                    for (c, yc) in y.iter_mut().enumerate() {
                        *yc += xr * proj[r * dim + c];
                    }
                }
            }
        }
        self.image_features = out;
        self
    }
}

/// A loaded dataset: interactions plus aligned item content.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub log: InteractionLog,
    pub catalog: Catalog,
}

impl Dataset {
    /// Loads the three on-disk files. `feature_dim` pins the expected
    /// image width; `None` accepts whatever width the file declares.
    pub fn load(
        interactions: &std::path::Path,
        attributes: &std::path::Path,
        features: &std::path::Path,
        feature_dim: Option<usize>,
    ) -> Result<Self> {
        let log = load_interactions(interactions)?;
        let attrs = load_attributes(attributes, &log.items)?;
        if !attrs.flagged.is_empty() {
            log::warn!("{} items have no attributes", attrs.flagged.len());
        }
        let image = load_image_features(features, &log.items, feature_dim)?;
        let catalog = Catalog::new(attrs.rows, attrs.vocab.len(), image)?;
        Ok(Dataset { log, catalog })
    }
}
