use m2vae::datasets::{generate_synthetic, make_cold_split, SyntheticSpec};
use m2vae::model::{
    atten_pool, decode, encode_attr, encode_id, encode_image, encode_item, forward_train, fuse_joint, fuse_views,
    infer_cold, moe_gate, poe_common, reparameterize, score_encoded, self_gate, Architecture, Fusion, GaussianLatent,
    ModelConfig, ModelParams, View, ZeroNoise,
};
use m2vae::params::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn config(dim: usize, hidden: usize) -> ModelConfig {
    ModelConfig {
        users: 3,
        items: 4,
        attributes: 5,
        dim,
        hidden,
        architecture: Architecture::default(),
    }
}

fn params(dim: usize, hidden: usize, seed: u64) -> ModelParams {
    ModelParams::init(config(dim, hidden), seed).unwrap()
}

fn set(p: &mut ModelParams, name: &str, data: Vec<f64>) {
    let t = p.tensor_mut(name).unwrap();
    assert_eq!(t.data.len(), data.len(), "{name}");
    t.data = data;
}

fn fill(p: &mut ModelParams, name: &str, rng: &mut ChaCha8Rng) {
    let n = p.tensor(name).unwrap().data.len();
    set(p, name, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// `b + x W` with `W` stored row-major as `in × out`, by explicit loops.
fn matmul_oracle(x: &[f64], w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let mut out = vec![0.0; w.cols];
    for (j, o) in out.iter_mut().enumerate() {
        let mut acc = b.map_or(0.0, |b| b.data[j]);
        for (i, xi) in x.iter().enumerate() {
            acc += xi * w.data[i * w.cols + j];
        }
        *o = acc;
    }
    out
}

fn head_oracle(x: &[f64], p: &ModelParams, prefix: &str) -> GaussianLatent {
    let t = |s: &str| p.tensor(&format!("{prefix}.{s}")).unwrap();
    GaussianLatent::new(
        matmul_oracle(x, t("w_mu"), Some(t("b_mu"))),
        matmul_oracle(x, t("w_logvar"), Some(t("b_logvar"))),
    )
}

fn zero_heads(p: &mut ModelParams) {
    for head in ["enc.id", "enc.attr", "enc.image"] {
        for part in ["w_mu", "b_mu", "w_logvar", "b_logvar"] {
            let name = format!("{head}.{part}");
            let n = p.tensor(&name).unwrap().data.len();
            set(p, &name, vec![0.0; n]);
        }
    }
}

fn identity(n: usize) -> Vec<f64> {
    (0..n * n).map(|k| if k / n == k % n { 1.0 } else { 0.0 }).collect()
}

#[test]
fn zero_heads_give_standard_latents() {
    let mut p = params(3, 4, 0);
    zero_heads(&mut p);
    let z = encode_id(&[0.3, -1.0, 2.0], &p);
    assert_eq!(z, GaussianLatent::standard(3));
    assert_eq!(encode_attr(&[1, 2], &p), GaussianLatent::standard(3));
    assert_eq!(encode_image(&[1.0, 2.0, 3.0], &p), GaussianLatent::standard(3));
}

#[test]
fn identity_heads_pass_inputs_through() {
    let mut p = params(3, 4, 0);
    zero_heads(&mut p);
    set(&mut p, "enc.id.w_mu", identity(3));
    set(&mut p, "enc.attr.w_mu", identity(3));
    let e = [0.3, -1.0, 2.0];
    assert_eq!(encode_id(&e, &p).mean, e.to_vec());
    let a = atten_pool(&[0, 3], &p);
    assert_eq!(encode_attr(&[0, 3], &p).mean, a);
}

#[test]
fn heads_match_matmul_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut p = params(3, 4, 1);
    for head in ["enc.id", "enc.attr", "enc.image"] {
        for part in ["w_mu", "b_mu", "w_logvar", "b_logvar"] {
            fill(&mut p, &format!("{head}.{part}"), &mut rng);
        }
    }
    let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
    let id = encode_id(&x, &p);
    let want = head_oracle(&x, &p, "enc.id");
    assert!(close(&id.mean, &want.mean, 1e-12) && close(&id.log_var, &want.log_var, 1e-12));
    let img = encode_image(&x, &p);
    let want = head_oracle(&x, &p, "enc.image");
    assert!(close(&img.mean, &want.mean, 1e-12) && close(&img.log_var, &want.log_var, 1e-12));
    let pooled = atten_pool(&[1, 4], &p);
    let attr = encode_attr(&[1, 4], &p);
    let want = head_oracle(&pooled, &p, "enc.attr");
    assert!(close(&attr.mean, &want.mean, 1e-12) && close(&attr.log_var, &want.log_var, 1e-12));
}

#[test]
fn attention_pooling_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut p = params(3, 4, 2);
    fill(&mut p, "emb.attr", &mut rng);
    fill(&mut p, "att.query", &mut rng);
    let row = |p: &ModelParams, j: usize| p.tensor("emb.attr").unwrap().row(j).to_vec();
    assert_eq!(atten_pool(&[2], &p), row(&p, 2));
    assert_eq!(atten_pool(&[], &p), p.tensor("att.default").unwrap().data);

    set(&mut p, "att.query", vec![0.0; 3]);
    let avg: Vec<f64> = row(&p, 1).iter().zip(row(&p, 3)).map(|(a, b)| (a + b) / 2.0).collect();
    assert!(close(&atten_pool(&[1, 3], &p), &avg, 1e-12));

    // Softmax weights against a direct oracle.
    fill(&mut p, "att.query", &mut rng);
    let q = p.tensor("att.query").unwrap().data.clone();
    let rows: Vec<Vec<f64>> = [0, 2, 4].iter().map(|&j| row(&p, j)).collect();
    let logits: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().zip(&q).map(|(a, b)| a * b).sum())
        .collect();
    let zsum: f64 = logits.iter().map(|l| l.exp()).sum();
    let want: Vec<f64> = (0..3)
        .map(|d| rows.iter().zip(&logits).map(|(r, l)| r[d] * l.exp() / zsum).sum())
        .collect();
    assert!(close(&atten_pool(&[0, 2, 4], &p), &want, 1e-12));
}

#[test]
fn poe_worked_examples() {
    let a = GaussianLatent::new(vec![0.0], vec![0.7]);
    let c = GaussianLatent::new(vec![2.0], vec![0.7]);
    assert!((poe_common(&a, &c).mean[0] - 1.0).abs() < 1e-12);

    let std = GaussianLatent::standard(1);
    let f = poe_common(&std, &std);
    let eps = 1e-8;
    assert_eq!(f.mean[0], 0.0);
    assert!((f.log_var[0] - ((1.0 + eps) / 2.0f64).ln()).abs() < 1e-12);
    assert!((f.log_var[0] + std::f64::consts::LN_2).abs() < 1e-4);
}

#[test]
fn reparameterization_cases() {
    let z = GaussianLatent::new(vec![1.0, -2.0], vec![0.0, 0.0]);
    assert_eq!(reparameterize(&z, &[0.0, 0.0]), z.mean);
    assert_eq!(reparameterize(&z, &[1.0, 1.0]), vec![2.0, -1.0]);

    let z = GaussianLatent::new(vec![0.5], vec![0.8]);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n = 100_000;
    let xs: Vec<f64> = (0..n)
        .map(|_| reparameterize(&z, &[StandardNormal.sample(&mut rng)])[0])
        .collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let want_std = (0.8f64 / 2.0).exp();
    assert!(
        (mean - 0.5).abs() < 0.01 * 0.5 + 3.0 * want_std / (n as f64).sqrt(),
        "{mean}"
    );
    assert!((std / want_std - 1.0).abs() < 0.01, "{std}");
}

#[test]
fn self_gate_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut p = params(3, 4, 3);
    assert_eq!(self_gate(&[0.0; 3], View::Attribute, &p), vec![0.0; 3]);
    set(&mut p, "gate.self.attr.w", vec![0.0; 9]);
    set(&mut p, "gate.self.attr.b", vec![0.0; 3]);
    assert_eq!(self_gate(&[2.0, -4.0, 1.0], View::Attribute, &p), vec![1.0, -2.0, 0.5]);

    fill(&mut p, "gate.self.image.w", &mut rng);
    fill(&mut p, "gate.self.image.b", &mut rng);
    let u = [0.4, -1.3, 0.9];
    let pre = matmul_oracle(
        &u,
        p.tensor("gate.self.image.w").unwrap(),
        Some(p.tensor("gate.self.image.b").unwrap()),
    );
    let want: Vec<f64> = u.iter().zip(pre).map(|(x, s)| x / (1.0 + (-s).exp())).collect();
    assert!(close(&self_gate(&u, View::Image, &p), &want, 1e-12));
}

#[test]
fn moe_gate_cases() {
    let mut p = params(2, 4, 4);
    set(&mut p, "gate.moe.attr.w", identity(2));
    set(&mut p, "gate.moe.image.w", identity(2));
    set(&mut p, "gate.moe.a", vec![1.0, 0.0]);
    // logit_v = u_v[0] * z_v[0] here.
    let (ga, gc) = moe_gate(&[1.0, 0.0], &[1.0, 0.0], &[3.0, 1.0], &[3.0, -1.0], &p);
    assert_eq!((ga, gc), (0.5, 0.5));
    let (ga, _) = moe_gate(&[1.0, 0.0], &[1.0, 0.0], &[20.0, 0.0], &[-20.0, 0.0], &p);
    assert!(ga >= 1.0 - 1e-9);
    let base = moe_gate(&[1.0, 0.0], &[1.0, 0.0], &[0.7, 0.0], &[-0.2, 0.0], &p);
    let shifted = moe_gate(&[1.0, 0.0], &[1.0, 0.0], &[0.7 + 5.0, 0.0], &[-0.2 + 5.0, 0.0], &p);
    assert!((base.0 - shifted.0).abs() < 1e-12 && (base.1 - shifted.1).abs() < 1e-12);
}

#[test]
fn fusion_cases() {
    let l = GaussianLatent::new(vec![0.3, -0.2], vec![0.1, -0.5]);
    assert_eq!(fuse_views(&l, &l, &l, (0.3, 0.7)), l);
    let a = GaussianLatent::new(vec![2.0], vec![1.0]);
    let c = GaussianLatent::new(vec![-5.0], vec![3.0]);
    let m = GaussianLatent::new(vec![4.0], vec![-1.0]);
    let f = fuse_views(&a, &c, &m, (1.0, 0.0));
    assert_eq!(f.mean, vec![3.0]);
    assert_eq!(f.log_var, vec![0.0]);

    assert_eq!(fuse_joint(&l, &l), l);
    let e = GaussianLatent::new(vec![0.0], vec![0.0]);
    let z = GaussianLatent::new(vec![2.0], vec![0.0]);
    assert_eq!(fuse_joint(&e, &z).mean, vec![1.0]);
}

#[test]
fn decoder_cases() {
    let mut p = params(2, 3, 5);
    set(&mut p, "dec.hidden.w", vec![0.0; 18]);
    set(&mut p, "dec.out.w", vec![0.0; 6]);
    set(&mut p, "dec.out.b", vec![0.25, -0.5]);
    assert_eq!(decode(&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0], &p), vec![0.25, -0.5]);

    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for name in ["dec.hidden.w", "dec.hidden.b", "dec.out.w", "dec.out.b"] {
        fill(&mut p, name, &mut rng);
    }
    let (z, a, c) = ([0.1, -0.4], [0.9, 0.3], [-1.2, 0.5]);
    let x: Vec<f64> = z.iter().chain(&a).chain(&c).copied().collect();
    let h: Vec<f64> = matmul_oracle(
        &x,
        p.tensor("dec.hidden.w").unwrap(),
        Some(p.tensor("dec.hidden.b").unwrap()),
    )
    .into_iter()
    .map(f64::tanh)
    .collect();
    let want = matmul_oracle(&h, p.tensor("dec.out.w").unwrap(), Some(p.tensor("dec.out.b").unwrap()));
    assert!(close(&decode(&z, &a, &c, &p), &want, 1e-12));

    let mut bad = config(2, 0);
    bad.hidden = 0;
    assert!(ModelParams::init(bad, 0).is_err());
}

fn synthetic(noise: f64) -> (m2vae::datasets::SyntheticData, m2vae::datasets::ColdSplit) {
    let spec = SyntheticSpec {
        users: 30,
        items: 20,
        attributes: 10,
        feature_dim: 4,
        interactions_per_user: 5,
        clusters: 2,
        subtypes: 2,
        noise_scale: noise,
        ..Default::default()
    };
    let data = generate_synthetic(&spec).unwrap();
    let split = make_cold_split(&data.log, &data.catalog, 0.3, 0).unwrap();
    (data, split)
}

fn model_for(data: &m2vae::datasets::SyntheticData, fusion: Fusion, seed: u64) -> ModelParams {
    let config = ModelConfig {
        users: data.log.user_count,
        items: data.log.item_count,
        attributes: data.catalog.attribute_count,
        dim: 4,
        hidden: 8,
        architecture: Architecture {
            fusion,
            ..Default::default()
        },
    };
    ModelParams::init(config, seed).unwrap()
}

#[test]
fn forward_trace_is_deterministic_and_composed() {
    let (data, split) = synthetic(0.1);
    let p = model_for(&data, Fusion::UserGated, 0);
    let item = split.warm_items[0];
    let t1 = forward_train(&p, &data.catalog, item, 1, &mut ZeroNoise);
    let t2 = forward_train(&p, &data.catalog, item, 1, &mut ZeroNoise);
    assert_eq!(t1, t2);
    assert!((t1.gate_a + t1.gate_c - 1.0).abs() <= 1e-6);

    // Recompose from the individual operations.
    let attrs = data.catalog.attributes_of(item);
    let image = data.catalog.image_of(item);
    let z_a = encode_attr(attrs, &p);
    let z_c = encode_image(image, &p);
    let z_com = poe_common(&z_a, &z_c);
    let u = p.user_embedding(1);
    let (ga, gc) = moe_gate(
        &self_gate(u, View::Attribute, &p),
        &self_gate(u, View::Image, &p),
        &z_a.mean,
        &z_c.mean,
        &p,
    );
    let z_f = fuse_views(&z_a, &z_c, &z_com, (ga, gc));
    let z_e = encode_id(p.item_embedding(item), &p);
    let z = fuse_joint(&z_e, &z_f);
    let e_new = decode(&z.mean, &atten_pool(attrs, &p), image, &p);
    assert!(close(&t1.e_new, &e_new, 1e-12));
    assert!((t1.gate_a - ga).abs() < 1e-12);
    assert_eq!(t1.z_com, z_com);
}

#[test]
fn naive_moe_gates_are_fixed() {
    let (data, split) = synthetic(0.1);
    let p = model_for(&data, Fusion::Uniform, 1);
    for &item in split.warm_items.iter().take(5) {
        for user in 0..3 {
            let t = forward_train(&p, &data.catalog, item, user, &mut ZeroNoise);
            assert_eq!((t.gate_a, t.gate_c), (0.5, 0.5));
        }
    }
}

#[test]
fn cold_scores_are_linear_in_the_user() {
    let (data, split) = synthetic(0.1);
    let mut p = model_for(&data, Fusion::UserGated, 2);
    let item = split.cold_items[0];
    let (_, s0) = infer_cold(&p, &data.catalog, item, 0).unwrap();
    let (_, s1) = infer_cold(&p, &data.catalog, item, 1).unwrap();
    let row0 = p.user_embedding(0).to_vec();
    // Copy user 0's embedding onto user 1: identical scores.
    let users = p.tensor_mut("emb.user").unwrap();
    users.row_mut(1).copy_from_slice(&row0);
    let (_, s1_copy) = infer_cold(&p, &data.catalog, item, 1).unwrap();
    assert_eq!(s0, s1_copy);
    assert_ne!(s0, s1);

    // Scaling the embedding at scoring time scales the score when the
    // generated embedding is held fixed.
    let enc = encode_item(&p, &data.catalog, item).unwrap();
    let (e_new, s) = score_encoded(&p, &enc, 0);
    let dot: f64 = row0.iter().zip(&e_new).map(|(a, b)| a * b).sum();
    assert!((s - dot).abs() < 1e-12);
    let scaled: f64 = row0.iter().zip(&e_new).map(|(a, b)| 3.0 * a * b).sum();
    assert!((scaled - 3.0 * s).abs() < 1e-12);
}
