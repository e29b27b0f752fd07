use m2vae::datasets::{generate_synthetic, make_cold_split, Catalog, ColdSplit, SyntheticSpec};
use m2vae::evaluation::{encode_cold_items, evaluate, rank_cold, run_variant, SplitPart, Variant};
use m2vae::model::{forward_train, infer_cold, ModelParams, ZeroNoise};
use m2vae::theory::{estimate_elbo_gap, trapezoid, ElboToy, Normal1};
use m2vae::training::{init_params, TrainConfig, Trainer};

fn setup(dim: usize, users: usize, items: usize) -> (Catalog, ColdSplit) {
    let spec = SyntheticSpec {
        users,
        items,
        interactions_per_user: 8,
        ..Default::default()
    };
    let data = generate_synthetic(&spec).unwrap();
    let catalog = data.catalog.with_image_dim(dim, 0);
    let split = make_cold_split(&data.log, &catalog, 0.3, 0).unwrap();
    (catalog, split)
}

fn untrained(catalog: &Catalog, split: &ColdSplit, dim: usize, seed: u64) -> ModelParams {
    let config = TrainConfig {
        dim,
        ..Default::default()
    };
    init_params(
        &config,
        split.user_count,
        split.item_count,
        catalog.attribute_count,
        dim,
        seed,
    )
    .unwrap()
}

#[test]
fn ranking_agrees_with_single_item_inference() {
    let (catalog, split) = setup(8, 40, 30);
    let p = untrained(&catalog, &split, 8, 1);
    let enc = encode_cold_items(&p, &catalog, &split).unwrap();
    for user in [0, 7, 19] {
        let ranked = rank_cold(&p, &enc, user);
        assert_eq!(ranked.len(), enc.len());
        for &(item, score) in &ranked {
            assert_eq!(infer_cold(&p, &catalog, item, user).unwrap().1, score);
        }
        assert!(ranked.windows(2).all(|w| w[0].1 >= w[1].1));
    }
}

#[test]
fn duplicated_content_ranks_adjacent_in_id_order() {
    let (mut catalog, split) = setup(8, 40, 30);
    let (a, b) = (split.cold_items[1], split.cold_items[4]);
    catalog.attributes[b] = catalog.attributes[a].clone();
    let row = catalog.image_features.row(a).to_vec();
    catalog.image_features.row_mut(b).copy_from_slice(&row);
    let p = untrained(&catalog, &split, 8, 2);
    let enc = encode_cold_items(&p, &catalog, &split).unwrap();
    for user in 0..10 {
        let ids: Vec<usize> = rank_cold(&p, &enc, user).into_iter().map(|(i, _)| i).collect();
        let pa = ids.iter().position(|&i| i == a).unwrap();
        assert_eq!(ids[pa + 1], b, "user {user}");
    }
}

#[test]
fn evaluation_is_deterministic_and_nested() {
    let (catalog, split) = setup(8, 60, 40);
    let p = untrained(&catalog, &split, 8, 3);
    let r1 = evaluate(&p, &catalog, &split, SplitPart::Test, &[5, 10]).unwrap();
    let r2 = evaluate(&p, &catalog, &split, SplitPart::Test, &[5, 10]).unwrap();
    assert_eq!(r1, r2);
    assert!(r1.hit_rate(10).unwrap() >= r1.hit_rate(5).unwrap());
    assert!(r1.ndcg(5).unwrap() <= r1.hit_rate(5).unwrap());
    assert_eq!(r1.candidates, split.cold_items.len());
}

#[test]
fn untrained_model_matches_random_baseline() {
    let (catalog, split) = setup(16, 200, 100);
    let k = 5;
    let mut hits = 0.0;
    let mut trials = 0.0;
    let mut p0 = 0.0;
    for seed in 0..20 {
        let p = untrained(&catalog, &split, 16, seed);
        let r = evaluate(&p, &catalog, &split, SplitPart::Test, &[k]).unwrap();
        hits += r.hit_rate(k).unwrap() * r.pairs as f64;
        trials += r.pairs as f64;
        p0 = k as f64 / r.candidates as f64;
    }
    let rate = hits / trials;
    let sigma = (p0 * (1.0 - p0) / trials).sqrt();
    assert!((rate - p0).abs() <= 3.0 * sigma, "rate {rate} vs {p0} (σ {sigma})");
}

#[test]
fn wo_dcl_equals_full_with_zero_alpha() {
    let (catalog, split) = setup(8, 40, 30);
    let config = TrainConfig {
        dim: 8,
        epochs: 2,
        batch_size: 16,
        ..Default::default()
    };
    let wo = run_variant(Variant::WoDcl, &catalog, &split, &config, 4).unwrap();
    let zero = TrainConfig { alpha: 0.0, ..config };
    let full = run_variant(Variant::Full, &catalog, &split, &zero, 4).unwrap();
    assert_eq!(wo.report.metrics, full.report.metrics);
    assert_eq!(wo.epochs, full.epochs);
}

#[test]
fn naive_moe_variant_uses_even_gates() {
    let (catalog, split) = setup(8, 40, 30);
    let config = Variant::NaiveMoe.apply(&TrainConfig {
        dim: 8,
        ..Default::default()
    });
    let p = init_params(
        &config,
        split.user_count,
        split.item_count,
        catalog.attribute_count,
        8,
        5,
    )
    .unwrap();
    for &item in split.warm_items.iter().take(4) {
        let t = forward_train(&p, &catalog, item, 3, &mut ZeroNoise);
        assert_eq!((t.gate_a, t.gate_c), (0.5, 0.5));
    }
}

#[test]
fn training_lowers_the_loss() {
    let (catalog, split) = setup(8, 60, 40);
    let config = TrainConfig {
        dim: 8,
        epochs: 6,
        batch_size: 16,
        learning_rate: 1e-2,
        early_stop_patience: 100,
        ..Default::default()
    };
    let trainer = Trainer::new(config, &split, &catalog).unwrap();
    let mut state = trainer.init_state().unwrap();
    let epochs = trainer.fit(&mut state, |_, _| Ok(())).unwrap();
    let first = epochs.first().unwrap().loss.total;
    let last = epochs.last().unwrap().loss.total;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn weight_init_has_uniform_moments() {
    let config = TrainConfig {
        dim: 128,
        ..Default::default()
    };
    let p = init_params(&config, 2, 2, 2, 128, 0).unwrap();
    let w = &p.tensor("enc.id.w_mu").unwrap().data;
    assert!(w.len() >= 10_000);
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let want = (1.0 / 128f64.sqrt()) / 3f64.sqrt();
    assert!((std / want - 1.0).abs() < 0.05, "{std} vs {want}");
    assert!(w.iter().all(|x| x.abs() <= 1.0 / 128f64.sqrt()));
}

#[test]
fn synthetic_clusters_are_separable() {
    let spec = SyntheticSpec {
        clusters: 4,
        users: 200,
        items: 100,
        noise_scale: 0.1,
        ..Default::default()
    };
    let data = generate_synthetic(&spec).unwrap();
    let feats = &data.catalog.image_features;
    // Class means estimated from the features themselves.
    let d = feats.cols;
    let mut means = vec![vec![0.0; d]; 4];
    let mut counts = [0usize; 4];
    for i in 0..feats.rows {
        let c = data.item_clusters[i];
        counts[c] += 1;
        for (m, x) in means[c].iter_mut().zip(feats.row(i)) {
            *m += x;
        }
    }
    for (m, &n) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|x| *x /= n.max(1) as f64);
    }
    let correct = (0..feats.rows)
        .filter(|&i| {
            let dist = |m: &Vec<f64>| m.iter().zip(feats.row(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..4)
                .min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b])))
                .unwrap();
            best == data.item_clusters[i]
        })
        .count();
    let purity = correct as f64 / feats.rows as f64;
    assert!(purity > 0.95, "{purity}");
}

/// `∫ q (log p(x|z) + log p(z) - log q)` by quadrature.
fn elbo_by_grid(toy: &ElboToy, q: impl Fn(f64) -> f64) -> f64 {
    let prior = Normal1 { mean: 0.0, var: 1.0 };
    let f = |z: f64| {
        let qz = q(z);
        if qz <= 0.0 {
            0.0
        } else {
            qz * (toy.log_likelihood(z) + prior.log_pdf(z) - qz.ln())
        }
    };
    trapezoid(f, -30.0, 30.0, 200_000)
}

#[test]
fn elbo_estimates_match_quadrature() {
    let toy = ElboToy::default();
    let r = estimate_elbo_gap(&toy, 20_000, 0).unwrap();
    let hybrid = toy.hybrid();
    let poe = toy.poe();
    let h = elbo_by_grid(&toy, |z| hybrid.pdf(z));
    let p = elbo_by_grid(&toy, |z| poe.pdf(z));
    assert!(
        (r.hybrid_mean - h).abs() < 4.0 * r.hybrid_se,
        "{} vs {h}",
        r.hybrid_mean
    );
    assert!((r.poe_mean - p).abs() < 4.0 * r.poe_se, "{} vs {p}", r.poe_mean);
    assert!((r.gap_mean - (h - p)).abs() < 4.0 * r.gap_se.max(r.hybrid_se + r.poe_se));
}

#[test]
fn identical_experts_gap_matches_quadrature() {
    let toy = ElboToy {
        mu_a: 0.7,
        mu_c: 0.7,
        log_var_a: 0.2,
        log_var_c: 0.2,
        ..Default::default()
    };
    let r = estimate_elbo_gap(&toy, 20_000, 1).unwrap();
    let hybrid = toy.hybrid();
    let poe = toy.poe();
    let want = elbo_by_grid(&toy, |z| hybrid.pdf(z)) - elbo_by_grid(&toy, |z| poe.pdf(z));
    assert!((r.gap_mean - want).abs() < 4.0 * r.gap_se, "{} vs {want}", r.gap_mean);
}

#[test]
fn standard_error_shrinks_with_more_samples() {
    let toy = ElboToy::default();
    let small = estimate_elbo_gap(&toy, 10_000, 2).unwrap();
    let large = estimate_elbo_gap(&toy, 20_000, 2).unwrap();
    let ratio = large.hybrid_se / small.hybrid_se;
    assert!((ratio - 0.5f64.sqrt()).abs() < 0.05, "{ratio}");
    let ratio = large.poe_se / small.poe_se;
    assert!((ratio - 0.5f64.sqrt()).abs() < 0.05, "{ratio}");
}
