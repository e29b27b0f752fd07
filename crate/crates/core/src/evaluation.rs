//! Cold-item ranking metrics, the evaluation protocol, and ablation runs.
//!
//! Every cold item with content is a candidate for every user; each held-out
//! `(user, cold item)` pair is scored on its own, so the ideal DCG is 1.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::NORM_GUARD;
use crate::datasets::{Catalog, ColdSplit};
use crate::error::{Error, Result};
use crate::model::{encode_item, reparameterize, score_encoded, CommonView, Fusion, ItemEncoding, ModelParams};
use crate::training::{EpochRecord, TrainConfig, Trainer};

/// Which half of the cold interactions to score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    Validation,
    Test,
}

impl SplitPart {
    pub fn pairs(self, split: &ColdSplit) -> &[(usize, usize)] {
        match self {
            SplitPart::Validation => &split.validation,
            SplitPart::Test => &split.test,
        }
    }
}

/// Cold items ordered by descending score; ties go to the smaller id.
pub fn rank_cold(params: &ModelParams, encodings: &[ItemEncoding], user: usize) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = encodings
        .iter()
        .map(|e| (e.item, score_encoded(params, e, user).1))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
}

/// 1-based rank of `item` in `ranked`, if present.
pub fn rank_of(ranked: &[usize], item: usize) -> Option<usize> {
    ranked.iter().position(|&i| i == item).map(|p| p + 1)
}

/// Fraction of `pairs` whose item sits in the user's top `k`. Users without a
/// ranking count as misses.
pub fn hit_rate_at_k(rankings: &BTreeMap<usize, Vec<usize>>, pairs: &[(usize, usize)], k: usize) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits = pairs
        .iter()
        .filter(|&&(u, v)| rankings.get(&u).and_then(|r| rank_of(r, v)).is_some_and(|r| r <= k))
        .count();
    hits as f64 / pairs.len() as f64
}

/// Mean over pairs of `1/log2(rank + 1)` when `rank <= k`, else 0.
pub fn ndcg_at_k(rankings: &BTreeMap<usize, Vec<usize>>, pairs: &[(usize, usize)], k: usize) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = pairs
        .iter()
        .map(|&(u, v)| match rankings.get(&u).and_then(|r| rank_of(r, v)) {
            Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
            _ => 0.0,
        })
        .sum();
    total / pairs.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub k: usize,
    pub hit_rate: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub seed: u64,
    pub part: SplitPart,
    pub metrics: Vec<KMetrics>,
    /// Users with at least one scored pair.
    pub users: usize,
    pub pairs: usize,
    /// Cold items ranked.
    pub candidates: usize,
    /// Cold items without any content, left out of the candidate set.
    pub skipped_items: usize,
    /// Held-out pairs dropped because their item has no content.
    pub skipped_pairs: usize,
}

impl EvalReport {
    pub fn at(&self, k: usize) -> Option<&KMetrics> {
        self.metrics.iter().find(|m| m.k == k)
    }

    pub fn hit_rate(&self, k: usize) -> Option<f64> {
        self.at(k).map(|m| m.hit_rate)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.at(k).map(|m| m.ndcg)
    }

    /// Expected HR@k of a uniformly random ranking over the candidates.
    pub fn random_hit_rate(&self, k: usize) -> f64 {
        if self.candidates == 0 {
            0.0
        } else {
            (k as f64 / self.candidates as f64).min(1.0)
        }
    }

    /// Bounds and monotonicity in `k`.
    pub fn check_invariants(&self) -> Result<()> {
        for m in &self.metrics {
            if !(0.0..=1.0).contains(&m.hit_rate) || !(0.0..=1.0).contains(&m.ndcg) {
                return Err(Error::Config(format!("metrics at K={} out of [0, 1]", m.k)));
            }
        }
        for a in &self.metrics {
            for b in &self.metrics {
                if a.k < b.k && a.hit_rate > b.hit_rate {
                    return Err(Error::Config(format!("HR@{} exceeds HR@{}", a.k, b.k)));
                }
            }
        }
        Ok(())
    }
}

/// Encodes every cold item that has content, in ascending id order.
pub fn encode_cold_items(params: &ModelParams, catalog: &Catalog, split: &ColdSplit) -> Result<Vec<ItemEncoding>> {
    split
        .cold_items
        .iter()
        .filter(|&&i| catalog.has_content(i))
        .map(|&i| encode_item(params, catalog, i))
        .collect()
}

/// Per-user rankings for every user appearing in `pairs`.
pub fn rank_users(
    params: &ModelParams,
    encodings: &[ItemEncoding],
    pairs: &[(usize, usize)],
) -> BTreeMap<usize, Vec<usize>> {
    let users: Vec<usize> = pairs
        .iter()
        .map(|&(u, _)| u)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    users
        .into_par_iter()
        .map(|u| (u, rank_cold(params, encodings, u).into_iter().map(|(i, _)| i).collect()))
        .collect()
}

pub fn evaluate(
    params: &ModelParams,
    catalog: &Catalog,
    split: &ColdSplit,
    part: SplitPart,
    ks: &[usize],
) -> Result<EvalReport> {
    let encodings = encode_cold_items(params, catalog, split)?;
    let all_pairs = part.pairs(split);
    let pairs: Vec<(usize, usize)> = all_pairs
        .iter()
        .copied()
        .filter(|&(_, v)| catalog.has_content(v))
        .collect();
    let rankings = rank_users(params, &encodings, &pairs);
    let metrics = ks
        .iter()
        .map(|&k| KMetrics {
            k,
            hit_rate: hit_rate_at_k(&rankings, &pairs, k),
            ndcg: ndcg_at_k(&rankings, &pairs, k),
        })
        .collect();
    let report = EvalReport {
        variant: String::new(),
        seed: 0,
        part,
        metrics,
        users: rankings.len(),
        pairs: pairs.len(),
        candidates: encodings.len(),
        skipped_items: split.cold_items.len() - encodings.len(),
        skipped_pairs: all_pairs.len() - pairs.len(),
    };
    report.check_invariants()?;
    Ok(report)
}

/// Mean over items and both unique views of `|cos(z_v, z_com)|` between
/// reparameterized samples. Lower means the unique views are more
/// disentangled from the common view.
pub fn view_common_alignment(params: &ModelParams, catalog: &Catalog, items: &[usize], seed: u64) -> Result<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = params.dim();
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..d).map(|_| StandardNormal.sample(rng)).collect() };
    let mut total = 0.0;
    let mut count = 0usize;
    for &i in items.iter().filter(|&&i| catalog.has_content(i)) {
        let enc = encode_item(params, catalog, i)?;
        let com = reparameterize(&enc.z_com, &draw(&mut rng));
        for z in [&enc.z_a, &enc.z_c] {
            let s = reparameterize(z, &draw(&mut rng));
            total += cosine(&s, &com).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Config("no items with content to measure".into()));
    }
    Ok(total / count as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na.max(NORM_GUARD) * nb.max(NORM_GUARD))
}

/// Model variants compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    WoCommon,
    EarlyGenerate,
    NaiveMoe,
    WeightedPoe,
    WoDcl,
    WoCo,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::WoCommon,
        Variant::EarlyGenerate,
        Variant::NaiveMoe,
        Variant::WeightedPoe,
        Variant::WoDcl,
        Variant::WoCo,
    ];

    pub const NAMES: [&'static str; 7] = [
        "full",
        "wo_common",
        "early_generate",
        "naive_moe",
        "weighted_poe",
        "wo_dcl",
        "wo_co",
    ];

    pub fn name(self) -> &'static str {
        Self::NAMES[Self::ALL.iter().position(|&v| v == self).unwrap()]
    }

    pub fn description(self) -> &'static str {
        match self {
            Variant::Full => "all components",
            Variant::WoCommon => "no common view; gates over the unique views only",
            Variant::EarlyGenerate => "common view from an MLP over concatenated raw features",
            Variant::NaiveMoe => "fixed 0.5/0.5 gates, no user conditioning",
            Variant::WeightedPoe => "learned-weight product of all three view experts",
            Variant::WoDcl => "disentangled contrastive loss off (alpha = 0)",
            Variant::WoCo => "co-occurrence contrastive loss off (beta = 0)",
        }
    }

    /// `config` with this variant's changes applied.
    pub fn apply(self, config: &TrainConfig) -> TrainConfig {
        let mut c = config.clone();
        match self {
            Variant::Full => {}
            Variant::WoCommon => c.architecture.fusion = Fusion::UserGatedNoCommon,
            Variant::EarlyGenerate => c.architecture.common = CommonView::EarlyGenerate,
            Variant::NaiveMoe => c.architecture.fusion = Fusion::Uniform,
            Variant::WeightedPoe => c.architecture.fusion = Fusion::WeightedPoe,
            Variant::WoDcl => c.alpha = 0.0,
            Variant::WoCo => c.beta = 0.0,
        }
        c
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::NAMES
            .iter()
            .position(|&n| n == s)
            .map(|k| Self::ALL[k])
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Result of training and evaluating one variant at one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub report: EvalReport,
    /// View/common alignment on the test cold items.
    pub alignment: f64,
    pub epochs: Vec<EpochRecord>,
}

/// Trains `variant` from `config` with `seed` replacing the configured seed,
/// then evaluates on the test half.
pub fn run_variant(
    variant: Variant,
    catalog: &Catalog,
    split: &ColdSplit,
    config: &TrainConfig,
    seed: u64,
) -> Result<RunOutcome> {
    let mut c = variant.apply(config);
    c.seed = seed;
    let trainer = Trainer::new(c, split, catalog)?;
    let mut state = trainer.init_state()?;
    let epochs = trainer.fit(&mut state, |_, _| Ok(()))?;
    let params = state.final_params();
    let mut report = evaluate(params, catalog, split, SplitPart::Test, &[5, 10])?;
    report.variant = variant.name().to_string();
    report.seed = seed;
    let alignment = view_common_alignment(params, catalog, &split.cold_items, seed)?;
    Ok(RunOutcome {
        report,
        alignment,
        epochs,
    })
}

/// One run per seed, in parallel across seeds; results keep seed order.
pub fn run_ablation(
    variant: Variant,
    catalog: &Catalog,
    split: &ColdSplit,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<RunOutcome>> {
    seeds
        .par_iter()
        .map(|&s| run_variant(variant, catalog, split, config, s))
        .collect()
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Human-readable table with columns HR@5, NDCG@5, HR@10, NDCG@10.
pub fn format_report_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>6} {:>8} {:>8} {:>8} {:>8}",
        "variant", "seed", "HR@5", "NDCG@5", "HR@10", "NDCG@10"
    );
    for r in reports {
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>8} {:>8} {:>8} {:>8}",
            if r.variant.is_empty() { "model" } else { &r.variant },
            r.seed,
            cell(r.hit_rate(5)),
            cell(r.ndcg(5)),
            cell(r.hit_rate(10)),
            cell(r.ndcg(10)),
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: usize,
    pub hr5_mean: f64,
    pub hr5_std: f64,
    pub ndcg5_mean: f64,
    pub ndcg5_std: f64,
}

pub fn summarize(variant: &str, reports: &[EvalReport]) -> AblationRow {
    let hr: Vec<f64> = reports.iter().filter_map(|r| r.hit_rate(5)).collect();
    let nd: Vec<f64> = reports.iter().filter_map(|r| r.ndcg(5)).collect();
    let (hr5_mean, hr5_std) = mean_std(&hr);
    let (ndcg5_mean, ndcg5_std) = mean_std(&nd);
    AblationRow {
        variant: variant.to_string(),
        seeds: reports.len(),
        hr5_mean,
        hr5_std,
        ndcg5_mean,
        ndcg5_std,
    }
}

/// Variants as rows, HR@5 and NDCG@5 as `mean ± std` columns.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<16} {:>17} {:>17}", "variant", "HR@5", "NDCG@5");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<16} {:>17} {:>17}",
            r.variant,
            format!("{:.4} ± {:.4}", r.hr5_mean, r.hr5_std),
            format!("{:.4} ± {:.4}", r.ndcg5_mean, r.ndcg5_std),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rankings(lists: &[(usize, &[usize])]) -> BTreeMap<usize, Vec<usize>> {
        lists.iter().map(|(u, l)| (*u, l.to_vec())).collect()
    }

    #[test]
    fn hit_rate_counts() {
        let r = rankings(&[(0, &[1, 2, 3, 4, 5, 6, 7]), (1, &[7, 6, 5, 4, 3, 2, 1])]);
        let pairs = [(0, 1), (0, 7), (1, 1), (1, 2)];
        assert_eq!(hit_rate_at_k(&r, &pairs, 5), 0.25);
        assert_eq!(hit_rate_at_k(&r, &pairs, 7), 1.0);
        assert_eq!(hit_rate_at_k(&r, &[(0, 1)], 1), 1.0);
    }

    #[test]
    fn ndcg_positions() {
        let r = rankings(&[(0, &[1, 2, 3, 4, 5, 6, 7])]);
        assert_eq!(ndcg_at_k(&r, &[(0, 1)], 5), 1.0);
        assert!((ndcg_at_k(&r, &[(0, 2)], 5) - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert_eq!(ndcg_at_k(&r, &[(0, 6)], 5), 0.0);
    }

    #[test]
    fn variant_names_round_trip() {
        for (v, n) in Variant::ALL.iter().zip(Variant::NAMES) {
            assert_eq!(v.name(), n);
            assert_eq!(n.parse::<Variant>().unwrap(), *v);
        }
        let err = "nope".parse::<Variant>().unwrap_err().to_string();
        assert!(err.contains("wo_common") && err.contains("nope"), "{err}");
    }

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
    }
}
