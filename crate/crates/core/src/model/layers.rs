//! Graph builders for the individual model operations, each paired with a
//! plain-value wrapper.

use super::{GaussianLatent, Head, LogVarMix, ModelParams, View, PRECISION_EPS};
use crate::autodiff::{Graph, Var};
use crate::params::ParamStore;

/// Mean and log-variance nodes of a diagonal Gaussian on the tape.
#[derive(Clone, Copy, Debug)]
pub struct GaussNode {
    pub mean: Var,
    pub log_var: Var,
}

impl GaussNode {
    pub fn input(g: &mut Graph, z: &GaussianLatent) -> Self {
        GaussNode {
            mean: g.input(z.mean.clone()),
            log_var: g.input(z.log_var.clone()),
        }
    }

    pub fn value(&self, g: &Graph) -> GaussianLatent {
        GaussianLatent::new(g.value(self.mean).to_vec(), g.value(self.log_var).to_vec())
    }

    pub fn detach(&self, g: &mut Graph) -> Self {
        GaussNode {
            mean: g.detach(self.mean),
            log_var: g.detach(self.log_var),
        }
    }
}

/// Affine mean and log-variance heads over the same input.
pub fn head_node(g: &mut Graph, x: Var, h: &Head) -> GaussNode {
    GaussNode {
        mean: g.affine(x, h.w_mu, Some(h.b_mu)),
        log_var: g.affine(x, h.w_logvar, Some(h.b_logvar)),
    }
}

/// Softmax attention with a learned query over the embeddings of the set
/// attributes; falls back to a learned default vector when none are set.
pub fn atten_pool_node(g: &mut Graph, p: &ModelParams, attrs: &[usize]) -> Var {
    if attrs.is_empty() {
        return g.param_vec(p.ids.att_default);
    }
    let query = g.param_vec(p.ids.att_query);
    let rows: Vec<Var> = attrs.iter().map(|&a| g.param_row(p.ids.attr_emb, a)).collect();
    let logits: Vec<Var> = rows.iter().map(|&r| g.dot(query, r)).collect();
    let logits = g.concat(&logits);
    let weights = g.softmax(logits);
    let terms: Vec<Var> = rows
        .iter()
        .enumerate()
        .map(|(j, &r)| {
            let w = g.index(weights, j);
            g.mul_scalar(r, w)
        })
        .collect();
    g.add_all(&terms)
}

/// Product of Gaussian experts: precisions `1/(exp(s)+eps)`, optionally
/// scaled by per-expert positive weights, summed; mean is precision-weighted.
pub fn poe_node(g: &mut Graph, experts: &[GaussNode], weights: Option<&[Var]>) -> GaussNode {
    let mut precisions = Vec::with_capacity(experts.len());
    for (k, e) in experts.iter().enumerate() {
        let var = g.exp(e.log_var);
        let var = g.shift(var, PRECISION_EPS);
        let mut t = g.recip(var);
        if let Some(w) = weights {
            t = g.mul_scalar(t, w[k]);
        }
        precisions.push(t);
    }
    let weighted: Vec<Var> = experts
        .iter()
        .zip(&precisions)
        .map(|(e, &t)| g.mul(e.mean, t))
        .collect();
    let num = g.add_all(&weighted);
    let den = g.add_all(&precisions);
    let mean = g.div(num, den);
    let log_den = g.ln(den);
    let log_var = g.scale(log_den, -1.0);
    GaussNode { mean, log_var }
}

/// `mean + exp(log_var / 2) * noise`.
pub fn reparameterize_node(g: &mut Graph, z: GaussNode, noise: Var) -> Var {
    let half = g.scale(z.log_var, 0.5);
    let std = g.exp(half);
    let spread = g.mul(std, noise);
    g.add(z.mean, spread)
}

/// `u ⊙ logistic(u W_v + b_v)`.
pub fn self_gate_node(g: &mut Graph, p: &ModelParams, user: Var, view: View) -> Var {
    let k = view.index();
    let pre = g.affine(user, p.ids.self_gate_w[k], Some(p.ids.self_gate_b[k]));
    let gate = g.logistic(pre);
    g.mul(user, gate)
}

/// Softmax over views of `aᵀ · ((u_v ⊙ z_v) W_v)`; returns the 2-vector of gates.
pub fn moe_gate_node(g: &mut Graph, p: &ModelParams, users: [Var; 2], latents: [Var; 2]) -> Var {
    let a = g.param_vec(p.ids.moe_a);
    let logits: Vec<Var> = View::ALL
        .iter()
        .map(|v| {
            let k = v.index();
            let x = g.mul(users[k], latents[k]);
            let y = g.affine(x, p.ids.moe_w[k], None);
            g.dot(a, y)
        })
        .collect();
    let logits = g.concat(&logits);
    g.softmax(logits)
}

/// Gate-weighted unique views, optionally averaged with the common view.
pub fn fuse_views_node(
    g: &mut Graph,
    z_a: GaussNode,
    z_c: GaussNode,
    z_com: Option<GaussNode>,
    gates: Var,
    mix: LogVarMix,
) -> GaussNode {
    let ga = g.index(gates, 0);
    let gc = g.index(gates, 1);
    // Mixture weights per component.
    let mut comps = vec![(z_a, Some(ga)), (z_c, Some(gc))];
    if let Some(zc) = z_com {
        comps.push((zc, None));
    }
    let halve = z_com.is_some();

    let weighted = |g: &mut Graph, x: Var, w: Option<Var>| match w {
        Some(w) => g.mul_scalar(x, w),
        None => x,
    };
    let combine = |g: &mut Graph, parts: Vec<Var>| {
        let s = g.add_all(&parts);
        if halve {
            g.scale(s, 0.5)
        } else {
            s
        }
    };

    let mean_parts: Vec<Var> = comps.iter().map(|&(z, w)| weighted(g, z.mean, w)).collect();
    let mean = combine(g, mean_parts);
    let log_var = match mix {
        LogVarMix::Linear => {
            let parts: Vec<Var> = comps.iter().map(|&(z, w)| weighted(g, z.log_var, w)).collect();
            combine(g, parts)
        }
        LogVarMix::MomentMatched => {
            let parts: Vec<Var> = comps
                .iter()
                .map(|&(z, w)| {
                    let var = g.exp(z.log_var);
                    let sq = g.mul(z.mean, z.mean);
                    let second = g.add(var, sq);
                    weighted(g, second, w)
                })
                .collect();
            let second = combine(g, parts);
            let mean_sq = g.mul(mean, mean);
            let var = g.sub(second, mean_sq);
            g.ln(var)
        }
    };
    GaussNode { mean, log_var }
}

/// Midpoint of the ID-view and fused-content Gaussians.
pub fn fuse_joint_node(g: &mut Graph, z_e: GaussNode, z_f: GaussNode) -> GaussNode {
    let m = g.add(z_e.mean, z_f.mean);
    let s = g.add(z_e.log_var, z_f.log_var);
    GaussNode {
        mean: g.scale(m, 0.5),
        log_var: g.scale(s, 0.5),
    }
}

/// One tanh hidden layer over `[z; a; c]`, linear output.
pub fn decode_node(g: &mut Graph, p: &ModelParams, z: Var, a: Var, c: Var) -> Var {
    let x = g.concat(&[z, a, c]);
    let h = g.affine(x, p.ids.dec_hidden_w, Some(p.ids.dec_hidden_b));
    let h = g.tanh(h);
    g.affine(h, p.ids.dec_out_w, Some(p.ids.dec_out_b))
}

// Plain-value wrappers.

pub fn encode_id(e: &[f64], p: &ModelParams) -> GaussianLatent {
    let mut g = Graph::new(&p.store);
    let x = g.input(e.to_vec());
    head_node(&mut g, x, &p.ids.enc_id).value(&g)
}

pub fn encode_image(c: &[f64], p: &ModelParams) -> GaussianLatent {
    let mut g = Graph::new(&p.store);
    let x = g.input(c.to_vec());
    head_node(&mut g, x, &p.ids.enc_image).value(&g)
}

/// `attrs` lists the set positions of the multi-hot attribute vector.
pub fn encode_attr(attrs: &[usize], p: &ModelParams) -> GaussianLatent {
    let mut g = Graph::new(&p.store);
    let a = atten_pool_node(&mut g, p, attrs);
    head_node(&mut g, a, &p.ids.enc_attr).value(&g)
}

pub fn atten_pool(attrs: &[usize], p: &ModelParams) -> Vec<f64> {
    let mut g = Graph::new(&p.store);
    let a = atten_pool_node(&mut g, p, attrs);
    g.value(a).to_vec()
}

pub fn poe_common(z_a: &GaussianLatent, z_c: &GaussianLatent) -> GaussianLatent {
    let store = ParamStore::default();
    let mut g = Graph::new(&store);
    let a = GaussNode::input(&mut g, z_a);
    let c = GaussNode::input(&mut g, z_c);
    poe_node(&mut g, &[a, c], None).value(&g)
}

pub fn reparameterize(z: &GaussianLatent, noise: &[f64]) -> Vec<f64> {
    let store = ParamStore::default();
    let mut g = Graph::new(&store);
    let zn = GaussNode::input(&mut g, z);
    let eps = g.input(noise.to_vec());
    let s = reparameterize_node(&mut g, zn, eps);
    g.value(s).to_vec()
}

pub fn self_gate(user: &[f64], view: View, p: &ModelParams) -> Vec<f64> {
    let mut g = Graph::new(&p.store);
    let u = g.input(user.to_vec());
    let out = self_gate_node(&mut g, p, u, view);
    g.value(out).to_vec()
}

pub fn moe_gate(u_a: &[f64], u_c: &[f64], z_a: &[f64], z_c: &[f64], p: &ModelParams) -> (f64, f64) {
    let mut g = Graph::new(&p.store);
    let users = [g.input(u_a.to_vec()), g.input(u_c.to_vec())];
    let latents = [g.input(z_a.to_vec()), g.input(z_c.to_vec())];
    let gates = moe_gate_node(&mut g, p, users, latents);
    let v = g.value(gates);
    (v[0], v[1])
}

/// Linear log-variance mixing over both unique views and the common view.
pub fn fuse_views(
    z_a: &GaussianLatent,
    z_c: &GaussianLatent,
    z_com: &GaussianLatent,
    gates: (f64, f64),
) -> GaussianLatent {
    let store = ParamStore::default();
    let mut g = Graph::new(&store);
    let a = GaussNode::input(&mut g, z_a);
    let c = GaussNode::input(&mut g, z_c);
    let m = GaussNode::input(&mut g, z_com);
    let gv = g.input(vec![gates.0, gates.1]);
    fuse_views_node(&mut g, a, c, Some(m), gv, LogVarMix::Linear).value(&g)
}

pub fn fuse_joint(z_e: &GaussianLatent, z_f: &GaussianLatent) -> GaussianLatent {
    let store = ParamStore::default();
    let mut g = Graph::new(&store);
    let e = GaussNode::input(&mut g, z_e);
    let f = GaussNode::input(&mut g, z_f);
    fuse_joint_node(&mut g, e, f).value(&g)
}

pub fn decode(z: &[f64], a: &[f64], c: &[f64], p: &ModelParams) -> Vec<f64> {
    let mut g = Graph::new(&p.store);
    let (zv, av, cv) = (g.input(z.to_vec()), g.input(a.to_vec()), g.input(c.to_vec()));
    let out = decode_node(&mut g, p, zv, av, cv);
    g.value(out).to_vec()
}
