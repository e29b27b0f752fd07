//! Full training forward pass and cold-item inference.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::layers::*;
use super::{CommonView, Fusion, GaussianLatent, ModelParams, View};
use crate::autodiff::{Graph, Var};
use crate::datasets::Catalog;
use crate::error::{Error, Result};

/// Supplies the standard-normal draws used by reparameterization.
pub trait NoiseSource {
    fn standard_normal(&mut self, len: usize) -> Vec<f64>;
}

pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn standard_normal(&mut self, len: usize) -> Vec<f64> {
        vec![0.0; len]
    }
}

pub struct RngNoise<'r, R: Rng + ?Sized>(pub &'r mut R);

impl<R: Rng + ?Sized> NoiseSource for RngNoise<'_, R> {
    fn standard_normal(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| StandardNormal.sample(&mut *self.0)).collect()
    }
}

/// Replays previously recorded draws in order.
pub struct ReplayNoise {
    draws: Vec<Vec<f64>>,
    pos: usize,
}

impl ReplayNoise {
    pub fn new(draws: Vec<Vec<f64>>) -> Self {
        ReplayNoise { draws, pos: 0 }
    }
}

impl NoiseSource for ReplayNoise {
    fn standard_normal(&mut self, len: usize) -> Vec<f64> {
        let d = self.draws[self.pos].clone();
        assert_eq!(d.len(), len, "replayed noise has the wrong width");
        self.pos += 1;
        d
    }
}

/// User-independent part of an item's forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ContentNodes {
    pub attr_vec: Var,
    pub image_vec: Var,
    pub z_a: GaussNode,
    pub z_c: GaussNode,
    pub z_com: GaussNode,
}

/// User-conditioned fusion of the content views.
#[derive(Clone, Copy, Debug)]
pub struct FusionNodes {
    pub gates: Var,
    pub z_f: GaussNode,
}

/// Every node of one training forward pass that the objective reads.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub item: usize,
    pub user: usize,
    pub user_vec: Var,
    pub item_vec: Var,
    pub content: ContentNodes,
    pub z_e: GaussNode,
    pub sample_a: Var,
    pub sample_c: Var,
    pub sample_com: Var,
    pub fusion: FusionNodes,
    pub joint: GaussNode,
    pub sample: Var,
    pub e_new: Var,
    pub noise: [Var; 4],
}

/// Plain snapshot of a training forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub z_e: GaussianLatent,
    pub z_a: GaussianLatent,
    pub z_c: GaussianLatent,
    pub z_com: GaussianLatent,
    pub z_f: GaussianLatent,
    pub z: GaussianLatent,
    pub sample_a: Vec<f64>,
    pub sample_c: Vec<f64>,
    pub sample_com: Vec<f64>,
    pub sample: Vec<f64>,
    pub gate_a: f64,
    pub gate_c: f64,
    pub attr_vec: Vec<f64>,
    pub e_new: Vec<f64>,
    /// Draws consumed, in order: `z_a`, `z_c`, `z_com`, joint.
    pub noise: Vec<Vec<f64>>,
}

pub(crate) fn content_nodes(g: &mut Graph, p: &ModelParams, attrs: &[usize], image: &[f64]) -> ContentNodes {
    let attr_vec = atten_pool_node(g, p, attrs);
    let image_vec = g.input(image.to_vec());
    let z_a = head_node(g, attr_vec, &p.ids.enc_attr);
    let z_c = head_node(g, image_vec, &p.ids.enc_image);
    let z_com = match p.config.architecture.common {
        CommonView::ProductOfExperts => poe_node(g, &[z_a, z_c], None),
        CommonView::EarlyGenerate => {
            let early = p.ids.early.expect("early-generate tensors");
            let x = g.concat(&[attr_vec, image_vec]);
            let h = g.affine(x, early.hidden_w, Some(early.hidden_b));
            let h = g.tanh(h);
            head_node(g, h, &early.head)
        }
    };
    ContentNodes {
        attr_vec,
        image_vec,
        z_a,
        z_c,
        z_com,
    }
}

/// Fuses content views for one user. `gate_inputs` are the per-view latent
/// vectors fed to the gate: samples during training, means at inference.
pub(crate) fn fusion_nodes(
    g: &mut Graph,
    p: &ModelParams,
    content: &ContentNodes,
    user_vec: Var,
    gate_inputs: [Var; 2],
) -> FusionNodes {
    let arch = p.config.architecture;
    let user_gated = |g: &mut Graph| {
        let users = View::ALL.map(|v| self_gate_node(g, p, user_vec, v));
        moe_gate_node(g, p, users, gate_inputs)
    };
    match arch.fusion {
        Fusion::UserGated => {
            let gates = user_gated(g);
            let z_f = fuse_views_node(g, content.z_a, content.z_c, Some(content.z_com), gates, arch.logvar_mix);
            FusionNodes { gates, z_f }
        }
        Fusion::UserGatedNoCommon => {
            let gates = user_gated(g);
            let z_f = fuse_views_node(g, content.z_a, content.z_c, None, gates, arch.logvar_mix);
            FusionNodes { gates, z_f }
        }
        Fusion::Uniform => {
            let gates = g.input(vec![0.5, 0.5]);
            let z_f = fuse_views_node(g, content.z_a, content.z_c, Some(content.z_com), gates, arch.logvar_mix);
            FusionNodes { gates, z_f }
        }
        Fusion::WeightedPoe => {
            let log_w = g.param_vec(p.ids.poe_log_weight.expect("weighted-PoE tensor"));
            let w = g.exp(log_w);
            let ws: Vec<Var> = (0..3).map(|k| g.index(w, k)).collect();
            let z_f = poe_node(g, &[content.z_a, content.z_c, content.z_com], Some(&ws));
            // Reported gates: relative weight of the two unique views.
            let pair = g.concat(&[ws[0], ws[1]]);
            let total = g.sum(pair);
            let inv = g.recip(total);
            let gates = g.mul_scalar(pair, inv);
            FusionNodes { gates, z_f }
        }
    }
}

/// Builds the training forward pass for `(item, user)` on `g`.
pub fn forward_nodes(
    g: &mut Graph,
    p: &ModelParams,
    catalog: &Catalog,
    item: usize,
    user: usize,
    noise: &mut dyn NoiseSource,
) -> ForwardNodes {
    let d = p.dim();
    let item_vec = g.param_row(p.ids.item_emb, item);
    let z_e = head_node(g, item_vec, &p.ids.enc_id);
    let content = content_nodes(g, p, catalog.attributes_of(item), catalog.image_of(item));

    let n_a = g.input(noise.standard_normal(d));
    let n_c = g.input(noise.standard_normal(d));
    let n_com = g.input(noise.standard_normal(d));
    let sample_a = reparameterize_node(g, content.z_a, n_a);
    let sample_c = reparameterize_node(g, content.z_c, n_c);
    let sample_com = reparameterize_node(g, content.z_com, n_com);

    let user_vec = g.param_row(p.ids.user_emb, user);
    let fusion = fusion_nodes(g, p, &content, user_vec, [sample_a, sample_c]);
    let joint = fuse_joint_node(g, z_e, fusion.z_f);
    let n_z = g.input(noise.standard_normal(d));
    let sample = reparameterize_node(g, joint, n_z);
    let e_new = decode_node(g, p, sample, content.attr_vec, content.image_vec);

    ForwardNodes {
        item,
        user,
        user_vec,
        item_vec,
        content,
        z_e,
        sample_a,
        sample_c,
        sample_com,
        fusion,
        joint,
        sample,
        e_new,
        noise: [n_a, n_c, n_com, n_z],
    }
}

impl ForwardNodes {
    pub fn trace(&self, g: &Graph) -> ForwardTrace {
        let gates = g.value(self.fusion.gates);
        ForwardTrace {
            z_e: self.z_e.value(g),
            z_a: self.content.z_a.value(g),
            z_c: self.content.z_c.value(g),
            z_com: self.content.z_com.value(g),
            z_f: self.fusion.z_f.value(g),
            z: self.joint.value(g),
            sample_a: g.value(self.sample_a).to_vec(),
            sample_c: g.value(self.sample_c).to_vec(),
            sample_com: g.value(self.sample_com).to_vec(),
            sample: g.value(self.sample).to_vec(),
            gate_a: gates[0],
            gate_c: gates[1],
            attr_vec: g.value(self.content.attr_vec).to_vec(),
            e_new: g.value(self.e_new).to_vec(),
            noise: self.noise.iter().map(|&n| g.value(n).to_vec()).collect(),
        }
    }
}

pub fn forward_train(
    p: &ModelParams,
    catalog: &Catalog,
    item: usize,
    user: usize,
    noise: &mut dyn NoiseSource,
) -> ForwardTrace {
    let mut g = Graph::new(&p.store);
    forward_nodes(&mut g, p, catalog, item, user, noise).trace(&g)
}

/// Cached user-independent encoding of an item's content.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemEncoding {
    pub item: usize,
    pub attr_vec: Vec<f64>,
    pub image_vec: Vec<f64>,
    pub z_a: GaussianLatent,
    pub z_c: GaussianLatent,
    pub z_com: GaussianLatent,
}

pub fn encode_item(p: &ModelParams, catalog: &Catalog, item: usize) -> Result<ItemEncoding> {
    if !catalog.has_content(item) {
        return Err(Error::MissingContent(item));
    }
    let mut g = Graph::new(&p.store);
    let c = content_nodes(&mut g, p, catalog.attributes_of(item), catalog.image_of(item));
    Ok(ItemEncoding {
        item,
        attr_vec: g.value(c.attr_vec).to_vec(),
        image_vec: g.value(c.image_vec).to_vec(),
        z_a: c.z_a.value(&g),
        z_c: c.z_c.value(&g),
        z_com: c.z_com.value(&g),
    })
}

/// Generated embedding and score `e_u · e_new` for an encoded cold item.
/// No ID embedding is read; the decoder sees the deterministic mean of `z_f`.
pub fn score_encoded(p: &ModelParams, enc: &ItemEncoding, user: usize) -> (Vec<f64>, f64) {
    let mut g = Graph::new(&p.store);
    let content = ContentNodes {
        attr_vec: g.input(enc.attr_vec.clone()),
        image_vec: g.input(enc.image_vec.clone()),
        z_a: GaussNode::input(&mut g, &enc.z_a),
        z_c: GaussNode::input(&mut g, &enc.z_c),
        z_com: GaussNode::input(&mut g, &enc.z_com),
    };
    let user_vec = g.param_row(p.ids.user_emb, user);
    let fusion = fusion_nodes(&mut g, p, &content, user_vec, [content.z_a.mean, content.z_c.mean]);
    let e_new = decode_node(&mut g, p, fusion.z_f.mean, content.attr_vec, content.image_vec);
    let score = g.dot(user_vec, e_new);
    (g.value(e_new).to_vec(), g.scalar(score))
}

pub fn infer_cold(p: &ModelParams, catalog: &Catalog, item: usize, user: usize) -> Result<(Vec<f64>, f64)> {
    let enc = encode_item(p, catalog, item)?;
    Ok(score_encoded(p, &enc, user))
}
