//! Forward computations: type-specific Gaussian encoders, product-of-experts
//! common view, user-conditioned gating over unique views, joint posterior,
//! conditional decoder, and cold-item scoring.
//!
//! Every operation is written once as a graph builder in [`layers`] and
//! [`forward`]; the plain-value functions re-exported here wrap those
//! builders for callers that do not need gradients.

pub mod forward;
pub mod layers;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Tensor};

pub use forward::{
    encode_item, forward_train, infer_cold, score_encoded, ForwardNodes, ForwardTrace, ItemEncoding, NoiseSource,
    ReplayNoise, RngNoise, ZeroNoise,
};
pub use layers::{
    atten_pool, decode, encode_attr, encode_id, encode_image, fuse_joint, fuse_views, moe_gate, poe_common,
    reparameterize, self_gate, GaussNode,
};

/// Added to `exp(log_var)` before inverting it into a precision.
pub const PRECISION_EPS: f64 = 1e-8;

/// Diagonal Gaussian stored as mean and log-variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianLatent {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianLatent {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Self {
        assert_eq!(mean.len(), log_var.len());
        GaussianLatent { mean, log_var }
    }

    pub fn standard(dim: usize) -> Self {
        GaussianLatent::new(vec![0.0; dim], vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_var.iter().map(|s| (0.5 * s).exp()).collect()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|s| s.exp()).collect()
    }

    pub fn precision(&self) -> Vec<f64> {
        self.log_var.iter().map(|s| 1.0 / (s.exp() + PRECISION_EPS)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(&self.log_var).all(|v| v.is_finite())
    }
}

/// The two content views.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    Attribute,
    Image,
}

impl View {
    pub const ALL: [View; 2] = [View::Attribute, View::Image];

    pub fn index(self) -> usize {
        match self {
            View::Attribute => 0,
            View::Image => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            View::Attribute => "attr",
            View::Image => "image",
        }
    }
}

/// How the common view is produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommonView {
    /// Precision-weighted product of the attribute and image experts.
    #[default]
    ProductOfExperts,
    /// Concatenate raw attribute and image vectors, then MLP and Gaussian head.
    EarlyGenerate,
}

/// How unique and common views are fused into `z_f`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// User-gated unique views averaged with the common view.
    #[default]
    UserGated,
    /// User-gated unique views only.
    UserGatedNoCommon,
    /// Fixed 0.5/0.5 gates.
    Uniform,
    /// Product of the three experts with a learned positive weight per view.
    WeightedPoe,
}

/// How log-variances are combined when views are mixed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogVarMix {
    /// Gate-weighted average of log-variances.
    #[default]
    Linear,
    /// Variance of the gate-weighted mixture (moment matching).
    MomentMatched,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub common: CommonView,
    pub fusion: Fusion,
    pub logvar_mix: LogVarMix,
}

/// Shapes of the model. Latent width, embedding width, and image width are
/// all `dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub users: usize,
    pub items: usize,
    pub attributes: usize,
    pub dim: usize,
    pub hidden: usize,
    pub architecture: Architecture,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("model dim must be positive".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("decoder hidden width must be positive".into()));
        }
        if self.users == 0 || self.items == 0 {
            return Err(Error::Config("model needs at least one user and one item".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// Centered uniform with half-width `1/sqrt(fan_in)`.
    Uniform(usize),
    Zero,
}

struct Slot {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

fn slot(name: impl Into<String>, rows: usize, cols: usize, init: Init) -> Slot {
    Slot {
        name: name.into(),
        rows,
        cols,
        init,
    }
}

fn head_slots(prefix: &str, input: usize, out: usize) -> Vec<Slot> {
    vec![
        slot(format!("{prefix}.w_mu"), input, out, Init::Uniform(input)),
        slot(format!("{prefix}.b_mu"), 1, out, Init::Zero),
        slot(format!("{prefix}.w_logvar"), input, out, Init::Uniform(input)),
        slot(format!("{prefix}.b_logvar"), 1, out, Init::Zero),
    ]
}

fn layout(c: &ModelConfig) -> Vec<Slot> {
    let d = c.dim;
    let h = c.hidden;
    let mut s = vec![
        slot("emb.user", c.users, d, Init::Uniform(d)),
        slot("emb.item", c.items, d, Init::Uniform(d)),
        slot("emb.attr", c.attributes.max(1), d, Init::Uniform(d)),
        slot("att.query", 1, d, Init::Uniform(d)),
        slot("att.default", 1, d, Init::Uniform(d)),
    ];
    s.extend(head_slots("enc.id", d, d));
    s.extend(head_slots("enc.attr", d, d));
    s.extend(head_slots("enc.image", d, d));
    for v in View::ALL {
        s.push(slot(format!("gate.self.{}.w", v.name()), d, d, Init::Uniform(d)));
        s.push(slot(format!("gate.self.{}.b", v.name()), 1, d, Init::Zero));
    }
    for v in View::ALL {
        s.push(slot(format!("gate.moe.{}.w", v.name()), d, d, Init::Uniform(d)));
    }
    s.push(slot("gate.moe.a", 1, d, Init::Uniform(d)));
    s.push(slot("dec.hidden.w", 3 * d, h, Init::Uniform(3 * d)));
    s.push(slot("dec.hidden.b", 1, h, Init::Zero));
    s.push(slot("dec.out.w", h, d, Init::Uniform(h)));
    s.push(slot("dec.out.b", 1, d, Init::Zero));
    if c.architecture.fusion == Fusion::WeightedPoe {
        s.push(slot("fuse.poe.log_weight", 1, 3, Init::Zero));
    }
    if c.architecture.common == CommonView::EarlyGenerate {
        s.push(slot("early.hidden.w", 2 * d, h, Init::Uniform(2 * d)));
        s.push(slot("early.hidden.b", 1, h, Init::Zero));
        s.extend(head_slots("early.head", h, d));
    }
    s
}

#[derive(Clone, Copy, Debug)]
pub struct Head {
    pub w_mu: ParamId,
    pub b_mu: ParamId,
    pub w_logvar: ParamId,
    pub b_logvar: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct EarlyIds {
    pub hidden_w: ParamId,
    pub hidden_b: ParamId,
    pub head: Head,
}

/// Resolved ids of every tensor the forward pass touches.
#[derive(Clone, Copy, Debug)]
pub struct ParamIds {
    pub user_emb: ParamId,
    pub item_emb: ParamId,
    pub attr_emb: ParamId,
    pub att_query: ParamId,
    pub att_default: ParamId,
    pub enc_id: Head,
    pub enc_attr: Head,
    pub enc_image: Head,
    pub self_gate_w: [ParamId; 2],
    pub self_gate_b: [ParamId; 2],
    pub moe_w: [ParamId; 2],
    pub moe_a: ParamId,
    pub dec_hidden_w: ParamId,
    pub dec_hidden_b: ParamId,
    pub dec_out_w: ParamId,
    pub dec_out_b: ParamId,
    pub poe_log_weight: Option<ParamId>,
    pub early: Option<EarlyIds>,
}

impl ParamIds {
    fn resolve(store: &ParamStore) -> Self {
        let id = |n: &str| store.id(n).unwrap_or_else(|| panic!("missing tensor `{n}`"));
        let head = |p: &str| Head {
            w_mu: id(&format!("{p}.w_mu")),
            b_mu: id(&format!("{p}.b_mu")),
            w_logvar: id(&format!("{p}.w_logvar")),
            b_logvar: id(&format!("{p}.b_logvar")),
        };
        ParamIds {
            user_emb: id("emb.user"),
            item_emb: id("emb.item"),
            attr_emb: id("emb.attr"),
            att_query: id("att.query"),
            att_default: id("att.default"),
            enc_id: head("enc.id"),
            enc_attr: head("enc.attr"),
            enc_image: head("enc.image"),
            self_gate_w: [id("gate.self.attr.w"), id("gate.self.image.w")],
            self_gate_b: [id("gate.self.attr.b"), id("gate.self.image.b")],
            moe_w: [id("gate.moe.attr.w"), id("gate.moe.image.w")],
            moe_a: id("gate.moe.a"),
            dec_hidden_w: id("dec.hidden.w"),
            dec_hidden_b: id("dec.hidden.b"),
            dec_out_w: id("dec.out.w"),
            dec_out_b: id("dec.out.b"),
            poe_log_weight: store.id("fuse.poe.log_weight"),
            early: store.id("early.hidden.w").map(|hidden_w| EarlyIds {
                hidden_w,
                hidden_b: id("early.hidden.b"),
                head: head("early.head"),
            }),
        }
    }
}

/// All trainable tensors plus the configuration that shaped them.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub ids: ParamIds,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.store == other.store
    }
}

impl ModelParams {
    /// Seeded initialization: weights and embeddings uniform in
    /// `±1/sqrt(fan_in)`, biases (log-variance biases included) zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        for s in layout(&config) {
            let n = s.rows * s.cols;
            let data = match s.init {
                Init::Zero => vec![0.0; n],
                Init::Uniform(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
            };
            store.insert(&s.name, s.rows, s.cols, data);
        }
        let ids = ParamIds::resolve(&store);
        Ok(ModelParams { config, store, ids })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        for s in layout(&config) {
            store.insert(&s.name, s.rows, s.cols, vec![0.0; s.rows * s.cols]);
        }
        let ids = ParamIds::resolve(&store);
        Ok(ModelParams { config, store, ids })
    }

    /// Rebuilds parameters from named tensors, checking every name and shape
    /// against what `config` requires.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let mut by_name: std::collections::HashMap<String, Tensor> =
            tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        let mut store = ParamStore::default();
        for s in layout(&config) {
            let t = by_name
                .remove(&s.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", s.name)))?;
            if t.shape() != (s.rows, s.cols) {
                return Err(Error::Shape {
                    tensor: s.name,
                    expected: (s.rows, s.cols),
                    found: t.shape(),
                });
            }
            store.insert(&s.name, s.rows, s.cols, t.data);
        }
        if let Some(extra) = by_name.keys().min() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        let ids = ParamIds::resolve(&store);
        Ok(ModelParams { config, store, ids })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.store.by_name(name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let id = self.store.id(name)?;
        Some(self.store.tensor_mut(id))
    }

    pub fn user_embedding(&self, user: usize) -> &[f64] {
        self.store.tensor(self.ids.user_emb).row(user)
    }

    pub fn item_embedding(&self, item: usize) -> &[f64] {
        self.store.tensor(self.ids.item_emb).row(item)
    }
}
