//! Training objectives: reconstruction, Gaussian KL terms, disentangled
//! contrastive loss, co-occurrence contrastive loss, BPR, and their total.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::datasets::TrainTriple;
use crate::error::{Error, Result};
use crate::model::{ForwardNodes, GaussNode, GaussianLatent, ModelParams};
use crate::params::ParamStore;

/// Weights and switches of the total objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub tau_co: f64,
    /// Multiplier on all KL terms; 1.0 leaves the objective unannealed.
    pub kl_weight: f64,
    /// Treat the content-conditioned prior as a fixed target in the joint KL.
    pub stop_prior_grad: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            beta: 0.5,
            tau: 0.1,
            tau_co: 1.0,
            kl_weight: 1.0,
            stop_prior_grad: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl_joint: f64,
    pub kl_unique_a: f64,
    pub kl_unique_c: f64,
    pub dcl: f64,
    pub co: f64,
    pub bpr: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
}

impl LossBreakdown {
    /// `elbo + bpr + α·dcl + β·co`, summed in the same order as the graph.
    pub fn compose(&self, kl_weight: f64) -> f64 {
        let kl = (self.kl_joint + self.kl_unique_a) + self.kl_unique_c;
        let elbo = self.recon + kl * kl_weight;
        let with_bpr = elbo + self.bpr;
        let with_dcl = with_bpr + self.alpha * self.dcl;
        with_dcl + self.beta * self.co
    }

    pub fn terms(&self) -> [(&'static str, f64); 8] {
        [
            ("recon", self.recon),
            ("kl_joint", self.kl_joint),
            ("kl_unique_a", self.kl_unique_a),
            ("kl_unique_c", self.kl_unique_c),
            ("dcl", self.dcl),
            ("co", self.co),
            ("bpr", self.bpr),
            ("total", self.total),
        ]
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        self.terms().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }

    pub fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.recon += weight * other.recon;
        self.kl_joint += weight * other.kl_joint;
        self.kl_unique_a += weight * other.kl_unique_a;
        self.kl_unique_c += weight * other.kl_unique_c;
        self.dcl += weight * other.dcl;
        self.co += weight * other.co;
        self.bpr += weight * other.bpr;
        self.total += weight * other.total;
        self.alpha = other.alpha;
        self.beta = other.beta;
        self.tau = other.tau;
    }
}

// Graph builders.

pub fn recon_mse_node(g: &mut Graph, target: Var, output: Var) -> Var {
    let diff = g.sub(target, output);
    let sq = g.mul(diff, diff);
    g.mean(sq)
}

/// Closed-form `KL(q ‖ p)` for diagonal Gaussians, summed over dimensions.
pub fn kl_gaussians_node(g: &mut Graph, q: GaussNode, p: GaussNode) -> Var {
    let var_q = g.exp(q.log_var);
    let diff = g.sub(q.mean, p.mean);
    let diff_sq = g.mul(diff, diff);
    let num = g.add(var_q, diff_sq);
    let var_p = g.exp(p.log_var);
    let ratio = g.div(num, var_p);
    let ratio = g.shift(ratio, -1.0);
    let logs = g.sub(p.log_var, q.log_var);
    let inner = g.add(ratio, logs);
    let total = g.sum(inner);
    g.scale(total, 0.5)
}

pub fn kl_to_standard_node(g: &mut Graph, q: GaussNode) -> Var {
    let n = g.value(q.mean).len();
    let p = GaussNode {
        mean: g.input(vec![0.0; n]),
        log_var: g.input(vec![0.0; n]),
    };
    kl_gaussians_node(g, q, p)
}

/// Sum over views of `-(cos(z_v, v_i) - cos(z_v, z_com)) / τ`.
pub fn dcl_node(g: &mut Graph, samples: [Var; 2], raw: [Var; 2], common: Var, tau: f64) -> Var {
    let terms: Vec<Var> = samples
        .iter()
        .zip(raw)
        .map(|(&z, r)| {
            let pos = g.cosine(z, r);
            let neg = g.cosine(z, common);
            let gap = g.sub(pos, neg);
            g.scale(gap, -1.0 / tau)
        })
        .collect();
    g.add_all(&terms)
}

/// Mean over positives of `-log(exp(s⁺) / (exp(s⁺) + Σ exp(s⁻)))` with
/// `s = cos(e_new, e_v) / τ_co`.
pub fn co_loss_node(g: &mut Graph, e_new: Var, positives: &[Var], negatives: &[Var], tau_co: f64) -> Result<Var> {
    if positives.is_empty() {
        return Err(Error::Sampling("co-occurrence loss needs at least one positive".into()));
    }
    let neg_sims: Vec<Var> = negatives
        .iter()
        .map(|&v| {
            let c = g.cosine(e_new, v);
            g.scale(c, 1.0 / tau_co)
        })
        .collect();
    let terms: Vec<Var> = positives
        .iter()
        .map(|&v| {
            let c = g.cosine(e_new, v);
            let s = g.scale(c, 1.0 / tau_co);
            let mut all = vec![s];
            all.extend_from_slice(&neg_sims);
            let all = g.concat(&all);
            let lse = g.log_sum_exp(all);
            g.sub(lse, s)
        })
        .collect();
    let sum = g.add_all(&terms);
    Ok(g.scale(sum, 1.0 / positives.len() as f64))
}

/// `-log σ(e_new·e_u − e_new·e_{u⁻})`, computed as a softplus.
pub fn bpr_node(g: &mut Graph, e_new: Var, user: Var, neg_user: Var) -> Var {
    let pos = g.dot(e_new, user);
    let neg = g.dot(e_new, neg_user);
    let diff = g.sub(neg, pos);
    g.softplus(diff)
}

/// Nodes of every objective term.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub recon: Var,
    pub kl_joint: Var,
    pub kl_unique_a: Var,
    pub kl_unique_c: Var,
    pub dcl: Var,
    pub co: Var,
    pub bpr: Var,
    pub total: Var,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph, w: &LossWeights) -> LossBreakdown {
        LossBreakdown {
            recon: g.scalar(self.recon),
            kl_joint: g.scalar(self.kl_joint),
            kl_unique_a: g.scalar(self.kl_unique_a),
            kl_unique_c: g.scalar(self.kl_unique_c),
            dcl: g.scalar(self.dcl),
            co: g.scalar(self.co),
            bpr: g.scalar(self.bpr),
            total: g.scalar(self.total),
            alpha: w.alpha,
            beta: w.beta,
            tau: w.tau,
        }
    }
}

/// Assembles the full objective for one triple on top of its forward pass.
pub fn total_loss_nodes(
    g: &mut Graph,
    p: &ModelParams,
    fwd: &ForwardNodes,
    triple: &TrainTriple,
    w: &LossWeights,
) -> Result<LossNodes> {
    let recon = recon_mse_node(g, fwd.item_vec, fwd.e_new);
    let prior = if w.stop_prior_grad {
        fwd.fusion.z_f.detach(g)
    } else {
        fwd.fusion.z_f
    };
    let kl_joint = kl_gaussians_node(g, fwd.joint, prior);
    let kl_unique_a = kl_to_standard_node(g, fwd.content.z_a);
    let kl_unique_c = kl_to_standard_node(g, fwd.content.z_c);
    let dcl = dcl_node(
        g,
        [fwd.sample_a, fwd.sample_c],
        [fwd.content.attr_vec, fwd.content.image_vec],
        fwd.sample_com,
        w.tau,
    );
    let pos: Vec<Var> = triple.co_pos.iter().map(|&v| g.param_row(p.ids.item_emb, v)).collect();
    let neg: Vec<Var> = triple.co_neg.iter().map(|&v| g.param_row(p.ids.item_emb, v)).collect();
    let co = co_loss_node(g, fwd.e_new, &pos, &neg, w.tau_co)?;
    let neg_user = g.param_row(p.ids.user_emb, triple.neg_user);
    let bpr = bpr_node(g, fwd.e_new, fwd.user_vec, neg_user);

    let kl = g.add(kl_joint, kl_unique_a);
    let kl = g.add(kl, kl_unique_c);
    let kl = g.scale(kl, w.kl_weight);
    let elbo = g.add(recon, kl);
    let with_bpr = g.add(elbo, bpr);
    let dcl_w = g.scale(dcl, w.alpha);
    let with_dcl = g.add(with_bpr, dcl_w);
    let co_w = g.scale(co, w.beta);
    let total = g.add(with_dcl, co_w);
    Ok(LossNodes {
        recon,
        kl_joint,
        kl_unique_a,
        kl_unique_c,
        dcl,
        co,
        bpr,
        total,
    })
}

// Plain-value wrappers.

fn scratch<R>(f: impl FnOnce(&mut Graph) -> R) -> R {
    let store = ParamStore::default();
    let mut g = Graph::new(&store);
    f(&mut g)
}

pub fn recon_mse(target: &[f64], output: &[f64]) -> f64 {
    scratch(|g| {
        let (t, o) = (g.input(target.to_vec()), g.input(output.to_vec()));
        let l = recon_mse_node(g, t, o);
        g.scalar(l)
    })
}

pub fn kl_gaussians(q: &GaussianLatent, p: &GaussianLatent) -> f64 {
    scratch(|g| {
        let (qn, pn) = (GaussNode::input(g, q), GaussNode::input(g, p));
        let l = kl_gaussians_node(g, qn, pn);
        g.scalar(l)
    })
}

pub fn kl_to_standard(q: &GaussianLatent) -> f64 {
    scratch(|g| {
        let qn = GaussNode::input(g, q);
        let l = kl_to_standard_node(g, qn);
        g.scalar(l)
    })
}

pub fn dcl_loss(z_a: &[f64], z_c: &[f64], z_com: &[f64], a_i: &[f64], c_i: &[f64], tau: f64) -> f64 {
    scratch(|g| {
        let s = [g.input(z_a.to_vec()), g.input(z_c.to_vec())];
        let r = [g.input(a_i.to_vec()), g.input(c_i.to_vec())];
        let m = g.input(z_com.to_vec());
        let l = dcl_node(g, s, r, m, tau);
        g.scalar(l)
    })
}

pub fn co_loss(e_new: &[f64], positives: &[Vec<f64>], negatives: &[Vec<f64>], tau_co: f64) -> Result<f64> {
    scratch(|g| {
        let e = g.input(e_new.to_vec());
        let pos: Vec<Var> = positives.iter().map(|v| g.input(v.clone())).collect();
        let neg: Vec<Var> = negatives.iter().map(|v| g.input(v.clone())).collect();
        let l = co_loss_node(g, e, &pos, &neg, tau_co)?;
        Ok(g.scalar(l))
    })
}

pub fn bpr_loss(e_new: &[f64], user: &[f64], neg_user: &[f64]) -> f64 {
    scratch(|g| {
        let (e, u, n) = (
            g.input(e_new.to_vec()),
            g.input(user.to_vec()),
            g.input(neg_user.to_vec()),
        );
        let l = bpr_node(g, e, u, n);
        g.scalar(l)
    })
}

/// Objective of one triple with an explicit noise source; returns the
/// breakdown and leaves gradients untouched.
pub fn total_loss(
    p: &ModelParams,
    catalog: &crate::datasets::Catalog,
    triple: &TrainTriple,
    w: &LossWeights,
    noise: &mut dyn crate::model::NoiseSource,
) -> Result<LossBreakdown> {
    let mut g = Graph::new(&p.store);
    let fwd = crate::model::forward::forward_nodes(&mut g, p, catalog, triple.item, triple.user, noise);
    let nodes = total_loss_nodes(&mut g, p, &fwd, triple, w)?;
    let b = nodes.breakdown(&g, w);
    match b.non_finite_term() {
        Some(term) => Err(Error::NonFinite {
            term: term.to_string(),
            batch: None,
        }),
        None => Ok(b),
    }
}
