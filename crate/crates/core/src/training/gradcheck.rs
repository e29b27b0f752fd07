//! Central finite-difference verification of reverse-mode gradients.

use serde::{Deserialize, Serialize};

use super::{init_params, TrainConfig};
use crate::autodiff::{Gradients, Graph, Var};
use crate::datasets::{generate_synthetic, make_cold_split, Catalog, SyntheticSpec, TrainTriple, TripleSampler};
use crate::error::Result;
use crate::losses::{total_loss_nodes, LossWeights};
use crate::model::forward::forward_nodes;
use crate::model::{ModelParams, ReplayNoise};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Gradients smaller than this in both estimates are compared absolutely.
    pub floor: f64,
    /// Multiply the analytic gradient of this tensor's largest entry by the
    /// factor before comparing; used to show the check catches a wrong gradient.
    pub corrupt: Option<(String, f64)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            floor: 1e-6,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorError {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub loss: f64,
    pub tensors: Vec<TensorError>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&TensorError> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |t| t.max_rel_error)
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks every scalar of `store` against central differences of the scalar
/// that `build` constructs. Detached nodes keep their base-point values in
/// the perturbed evaluations, matching what reverse mode differentiates.
pub fn finite_difference_check(
    store: &ParamStore,
    build: impl Fn(&mut Graph) -> Var,
    opts: &GradCheckOptions,
) -> GradCheckReport {
    let mut grads = Gradients::zeros_like(store);
    let (loss, frozen) = {
        let mut g = Graph::new(store);
        let root = build(&mut g);
        g.backward(root, 1.0, &mut grads);
        (g.scalar(root), g.detached_values())
    };
    if let Some((name, factor)) = &opts.corrupt {
        if let Some(id) = store.id(name) {
            let gs = grads.get_mut(id);
            if let Some(j) = (0..gs.len()).max_by(|&a, &b| gs[a].abs().total_cmp(&gs[b].abs())) {
                gs[j] *= factor;
            }
        }
    }

    let eval = |s: &ParamStore| {
        let mut g = Graph::with_frozen(s, frozen.clone());
        let root = build(&mut g);
        g.scalar(root)
    };
    let mut work = store.clone();
    let mut tensors = Vec::with_capacity(store.len());
    let mut checked = 0;
    for (k, id) in store.ids().enumerate() {
        let mut worst = TensorError {
            name: store.tensor(id).name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: grads.grads[k].first().copied().unwrap_or(0.0),
            numeric: 0.0,
        };
        for j in 0..store.tensor(id).data.len() {
            let orig = work.tensor(id).data[j];
            work.tensor_mut(id).data[j] = orig + opts.step;
            let plus = eval(&work);
            work.tensor_mut(id).data[j] = orig - opts.step;
            let minus = eval(&work);
            work.tensor_mut(id).data[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let analytic = grads.grads[k][j];
            let err = relative_error(analytic, numeric, opts.floor);
            if err > worst.max_rel_error || !err.is_finite() {
                worst.max_rel_error = err;
                worst.worst_index = j;
                worst.analytic = analytic;
                worst.numeric = numeric;
            }
            checked += 1;
        }
        tensors.push(worst);
    }
    GradCheckReport { checked, loss, tensors }
}

/// Gradient check of the full objective for one triple with fixed noise draws
/// (four vectors: `z_a`, `z_c`, `z_com`, joint).
pub fn grad_check(
    params: &ModelParams,
    catalog: &Catalog,
    triple: &TrainTriple,
    weights: &LossWeights,
    noise: &[Vec<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    // Surface objective errors (e.g. missing positives) before the sweep.
    {
        let mut g = Graph::new(&params.store);
        let fwd = forward_nodes(
            &mut g,
            params,
            catalog,
            triple.item,
            triple.user,
            &mut ReplayNoise::new(noise.to_vec()),
        );
        total_loss_nodes(&mut g, params, &fwd, triple, weights)?;
    }
    let build = |g: &mut Graph| {
        let mut replay = ReplayNoise::new(noise.to_vec());
        let fwd = forward_nodes(g, params, catalog, triple.item, triple.user, &mut replay);
        total_loss_nodes(g, params, &fwd, triple, weights)
            .expect("objective validated above")
            .total
    };
    Ok(finite_difference_check(&params.store, build, opts))
}

/// Small synthetic instance for checking the full objective: `dim = 4`,
/// hidden width 8, one training triple, and fixed noise draws, all derived
/// from `seed`. Loss weights and architecture come from `config`.
pub fn full_model_check(config: &TrainConfig, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    let spec = SyntheticSpec {
        clusters: 2,
        users: 12,
        items: 10,
        attributes: 8,
        feature_dim: 4,
        interactions_per_user: 4,
        subtypes: 2,
        seed,
        ..Default::default()
    };
    let data = generate_synthetic(&spec)?;
    let split = make_cold_split(&data.log, &data.catalog, 0.3, seed)?;
    let c = TrainConfig {
        dim: 4,
        hidden: Some(8),
        c_p: config.c_p.min(3),
        c_n: config.c_n.min(4),
        ..config.clone()
    };
    let params = init_params(&c, spec.users, spec.items, spec.attributes, spec.feature_dim, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = TripleSampler::new(&split, c.c_p, c.c_n)?;
    let triple = sampler.sample_batch(1, &mut rng)?.remove(0);
    let noise: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..c.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    grad_check(&params, &data.catalog, &triple, &c.loss_weights(), &noise, opts)
}

/// A linear map under a squared-error loss: central differences are exact up
/// to rounding, so the reported error should sit near machine precision.
pub fn linear_toy_check(seed: u64, opts: &GradCheckOptions) -> GradCheckReport {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let mut store = ParamStore::default();
    let w = store.insert("toy.w", 4, 3, uniform(12));
    let b = store.insert("toy.b", 1, 3, uniform(3));
    let x = uniform(4);
    let y = uniform(3);
    let build = move |g: &mut Graph| {
        let xi = g.input(x.clone());
        let yi = g.input(y.clone());
        let out = g.affine(xi, w, Some(b));
        let diff = g.sub(out, yi);
        let sq = g.mul(diff, diff);
        g.mean(sq)
    };
    finite_difference_check(&store, build, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_toy_is_exact() {
        let r = linear_toy_check(1, &GradCheckOptions::default());
        assert!(r.max_rel_error() < 1e-9, "{r:?}");
        assert_eq!(r.checked, 15);
    }

    #[test]
    fn corruption_is_detected() {
        let opts = GradCheckOptions {
            corrupt: Some(("toy.w".into(), 1.1)),
            ..Default::default()
        };
        let r = linear_toy_check(1, &opts);
        assert_eq!(r.worst().unwrap().name, "toy.w");
        assert!(r.max_rel_error() > 0.05);
    }

    #[test]
    fn full_model_within_tolerance() {
        for seed in 0..3 {
            let r = full_model_check(&TrainConfig::default(), seed, &GradCheckOptions::default()).unwrap();
            let w = r.worst().unwrap();
            eprintln!(
                "seed {seed}: worst {} {:.3e} ({} vs {})",
                w.name, w.max_rel_error, w.analytic, w.numeric
            );
            assert!(r.max_rel_error() < 1e-4);
        }
    }

    #[test]
    fn relative_error_conventions() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(1.1, 1.0, 1e-6) - 0.1 / 1.1).abs() < 1e-15);
        assert_eq!(relative_error(1e-9, 0.0, 1e-6), 1e-3);
    }
}
