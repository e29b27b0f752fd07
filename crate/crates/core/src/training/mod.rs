//! Optimization of model parameters: Adam with global-norm clipping, the
//! per-epoch loop, early stopping on validation HR@5, checkpoints, and the
//! finite-difference gradient check.

mod checkpoint;
mod gradcheck;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph};
use crate::datasets::{Catalog, ColdSplit, TrainTriple, TripleSampler};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, SplitPart};
use crate::losses::{total_loss_nodes, LossBreakdown, LossWeights};
use crate::model::forward::forward_nodes;
use crate::model::{Architecture, ModelConfig, ModelParams, NoiseSource, RngNoise};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{
    finite_difference_check, full_model_check, grad_check, linear_toy_check, GradCheckOptions, GradCheckReport,
    TensorError,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dim: usize,
    /// Decoder hidden width; `2 * dim` when absent.
    pub hidden: Option<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub tau_co: f64,
    pub c_p: usize,
    pub c_n: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub early_stop_patience: usize,
    pub eval_every: usize,
    pub kl_weight: f64,
    pub stop_prior_grad: bool,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 128,
            hidden: None,
            batch_size: 64,
            epochs: 50,
            learning_rate: 1e-3,
            alpha: 0.5,
            beta: 0.5,
            tau: 0.1,
            tau_co: 1.0,
            c_p: 5,
            c_n: 20,
            grad_clip_norm: 5.0,
            seed: 0,
            early_stop_patience: 5,
            eval_every: 1,
            kl_weight: 1.0,
            stop_prior_grad: true,
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn hidden_width(&self) -> usize {
        self.hidden.unwrap_or(2 * self.dim)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("hidden", self.hidden_width()),
            ("batch_size", self.batch_size),
            ("c_p", self.c_p),
            ("eval_every", self.eval_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{name}` must be positive")));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} invalid", self.learning_rate)));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("`{name}` = {v} not in [0, 1]")));
            }
        }
        for (name, v) in [
            ("tau", self.tau),
            ("tau_co", self.tau_co),
            ("grad_clip_norm", self.grad_clip_norm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{name}` = {v} must be positive")));
            }
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::Config(format!("kl_weight {} invalid", self.kl_weight)));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            tau: self.tau,
            tau_co: self.tau_co,
            kl_weight: self.kl_weight,
            stop_prior_grad: self.stop_prior_grad,
        }
    }

    pub fn model_config(&self, users: usize, items: usize, attributes: usize) -> ModelConfig {
        ModelConfig {
            users,
            items,
            attributes,
            dim: self.dim,
            hidden: self.hidden_width(),
            architecture: self.architecture,
        }
    }
}

/// Seeded parameters for `users × items` with `attributes` attribute slots.
/// Image features must already be `dim` wide.
pub fn init_params(
    config: &TrainConfig,
    users: usize,
    items: usize,
    attributes: usize,
    image_dim: usize,
    seed: u64,
) -> Result<ModelParams> {
    config.validate()?;
    if image_dim != config.dim {
        return Err(Error::Config(format!(
            "image features are {image_dim} wide but the model dim is {}; project them first",
            config.dim
        )));
    }
    ModelParams::init(config.model_config(users, items, attributes), seed)
}

/// Adam with bias correction and moments `(0.9, 0.999)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Gradients,
    pub v: Gradients,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Gradients::zeros_like(&params.store),
            v: Gradients::zeros_like(&params.store),
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &Gradients, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, tensor) in params.store.tensors_mut().iter_mut().enumerate() {
            let (g, m, v) = (&grads.grads[k], &mut self.m.grads[k], &mut self.v.grads[k]);
            for j in 0..tensor.data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                tensor.data[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Loss and gradient of the batch mean. Gradients are written into `grads`
/// (overwriting them).
pub fn batch_gradients(
    params: &ModelParams,
    catalog: &Catalog,
    triples: &[TrainTriple],
    weights: &LossWeights,
    noise: &mut dyn NoiseSource,
    grads: &mut Gradients,
) -> std::result::Result<LossBreakdown, &'static str> {
    grads.fill_zero();
    let scale = 1.0 / triples.len() as f64;
    let mut mean = LossBreakdown::default();
    for t in triples {
        let mut g = Graph::new(&params.store);
        let fwd = forward_nodes(&mut g, params, catalog, t.item, t.user, noise);
        let nodes = total_loss_nodes(&mut g, params, &fwd, t, weights).map_err(|_| "co")?;
        let b = nodes.breakdown(&g, weights);
        if let Some(term) = b.non_finite_term() {
            return Err(term);
        }
        g.backward(nodes.total, scale, grads);
        mean.accumulate(&b, scale);
    }
    Ok(mean)
}

/// One optimizer step on a fixed batch.
pub fn train_step(
    params: &mut ModelParams,
    adam: &mut Adam,
    catalog: &Catalog,
    triples: &[TrainTriple],
    config: &TrainConfig,
    noise: &mut dyn NoiseSource,
    batch: usize,
) -> Result<(LossBreakdown, f64)> {
    let mut grads = Gradients::zeros_like(&params.store);
    let loss =
        batch_gradients(params, catalog, triples, &config.loss_weights(), noise, &mut grads).map_err(|term| {
            Error::NonFinite {
                term: term.to_string(),
                batch: Some(batch),
            }
        })?;
    if !grads.all_finite() {
        return Err(Error::NonFinite {
            term: "gradient".into(),
            batch: Some(batch),
        });
    }
    let norm = clip_global_norm(&mut grads, config.grad_clip_norm);
    adam.update(params, &grads, config.learning_rate);
    debug_assert!(params.store.all_finite(), "non-finite parameter after step");
    if let Some(name) = params.store.first_non_finite() {
        return Err(Error::NonFinite {
            term: format!("parameter `{name}`"),
            batch: Some(batch),
        });
    }
    Ok((loss, norm))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss: LossBreakdown,
    pub batches: usize,
    pub mean_grad_norm: f64,
}

/// One pass over the training interactions in a seeded batch order.
pub fn train_epoch(
    params: &mut ModelParams,
    adam: &mut Adam,
    split: &ColdSplit,
    catalog: &Catalog,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    let sampler = TripleSampler::new(split, config.c_p, config.c_n)?;
    let schedule = sampler.epoch_schedule(config.batch_size, rng);
    let total_pairs: usize = schedule.iter().map(Vec::len).sum();
    let mut stats = EpochStats::default();
    for (b, pairs) in schedule.iter().enumerate() {
        let triples = pairs
            .iter()
            .map(|&(u, i)| sampler.make_triple(u, i, rng))
            .collect::<Result<Vec<_>>>()?;
        let (loss, norm) = train_step(params, adam, catalog, &triples, config, &mut RngNoise(&mut *rng), b)?;
        let share = pairs.len() as f64 / total_pairs as f64;
        stats.loss.accumulate(&loss, share);
        stats.mean_grad_norm += norm / schedule.len() as f64;
        stats.batches += 1;
    }
    Ok(stats)
}

/// One line of the epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub batches: usize,
    pub mean_grad_norm: f64,
    pub val_hr5: Option<f64>,
}

/// Everything that evolves during training and is persisted in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub best_metric: Option<f64>,
    pub best_params: ModelParams,
    pub stale_evals: usize,
    pub stopped: bool,
}

impl TrainState {
    /// The parameters to evaluate: best on validation when any evaluation
    /// happened, otherwise the latest.
    pub fn final_params(&self) -> &ModelParams {
        if self.best_metric.is_some() {
            &self.best_params
        } else {
            &self.params
        }
    }
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub split: &'a ColdSplit,
    pub catalog: &'a Catalog,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, split: &'a ColdSplit, catalog: &'a Catalog) -> Result<Self> {
        config.validate()?;
        if catalog.item_count() != split.item_count {
            return Err(Error::Config(format!(
                "catalog has {} items but the split has {}",
                catalog.item_count(),
                split.item_count
            )));
        }
        TripleSampler::new(split, config.c_p, config.c_n)?;
        Ok(Trainer { config, split, catalog })
    }

    pub fn init_state(&self) -> Result<TrainState> {
        let c = &self.config;
        let params = init_params(
            c,
            self.split.user_count,
            self.split.item_count,
            self.catalog.attribute_count,
            self.catalog.image_dim(),
            c.seed,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        rng.set_stream(1);
        Ok(TrainState {
            adam: Adam::new(&params),
            best_params: params.clone(),
            params,
            rng,
            epoch: 0,
            best_metric: None,
            stale_evals: 0,
            stopped: false,
        })
    }

    pub fn validation_hr5(&self, params: &ModelParams) -> Result<Option<f64>> {
        if self.split.validation.is_empty() {
            return Ok(None);
        }
        let report = evaluate(params, self.catalog, self.split, SplitPart::Validation, &[5])?;
        Ok(report.hit_rate(5))
    }

    /// Runs one epoch, evaluates when due, and updates early stopping.
    pub fn step_epoch(&self, state: &mut TrainState) -> Result<EpochRecord> {
        let c = &self.config;
        let stats = train_epoch(
            &mut state.params,
            &mut state.adam,
            self.split,
            self.catalog,
            c,
            &mut state.rng,
        )?;
        state.epoch += 1;
        let due = state.epoch.is_multiple_of(c.eval_every) || state.epoch == c.epochs;
        let val_hr5 = if due { self.validation_hr5(&state.params)? } else { None };
        if let Some(hr) = val_hr5 {
            if state.best_metric.is_none_or(|best| hr > best) {
                state.best_metric = Some(hr);
                state.best_params = state.params.clone();
                state.stale_evals = 0;
            } else {
                state.stale_evals += 1;
                if c.early_stop_patience > 0 && state.stale_evals >= c.early_stop_patience {
                    state.stopped = true;
                }
            }
        }
        log::debug!(
            "epoch {} total {:.5} val_hr5 {:?}",
            state.epoch,
            stats.loss.total,
            val_hr5
        );
        Ok(EpochRecord {
            epoch: state.epoch,
            loss: stats.loss,
            batches: stats.batches,
            mean_grad_norm: stats.mean_grad_norm,
            val_hr5,
        })
    }

    pub fn finished(&self, state: &TrainState) -> bool {
        state.stopped || state.epoch >= self.config.epochs
    }

    /// Trains until the epoch budget or early stopping. `on_epoch` runs after
    /// every epoch (for logging or checkpointing).
    pub fn fit(
        &self,
        state: &mut TrainState,
        mut on_epoch: impl FnMut(&TrainState, &EpochRecord) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        let mut records = Vec::new();
        while !self.finished(state) {
            let rec = self.step_epoch(state)?;
            on_epoch(state, &rec)?;
            records.push(rec);
        }
        Ok(records)
    }
}
