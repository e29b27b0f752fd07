//! Numeric checks of the fusion inequalities (weighted AM-GM chain and the
//! mixture-versus-product density comparison) and a Monte Carlo ELBO
//! comparison of hybrid and product-only posteriors on a 1-D toy.
//!
//! The inequality checks count violations exactly and record the smallest
//! margin seen. The ELBO comparison only reports; it asserts nothing.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Draws per independently seeded stream.
const CHUNK: usize = 4096;

/// Two expert densities at a point and the mixture weights over them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionCase {
    pub q: [f64; 2],
    pub alpha: [f64; 2],
}

impl FusionCase {
    pub fn arithmetic(&self) -> f64 {
        self.alpha[0] * self.q[0] + self.alpha[1] * self.q[1]
    }

    pub fn geometric(&self) -> f64 {
        self.q[0].powf(self.alpha[0]) * self.q[1].powf(self.alpha[1])
    }

    pub fn product(&self) -> f64 {
        self.q[0] * self.q[1]
    }

    fn equal_q(&self) -> bool {
        (self.q[0] - self.q[1]).abs() <= 1e-12
    }
}

fn sample_case(rng: &mut ChaCha8Rng) -> FusionCase {
    let mut open = || loop {
        let x: f64 = rng.random();
        if x > 0.0 {
            return x;
        }
    };
    let q = [open(), open()];
    let a = open();
    FusionCase { q, alpha: [a, 1.0 - a] }
}

/// Splits `draws` into fixed-size chunks, each with its own ChaCha8 stream.
fn sample_cases(draws: usize, seed: u64) -> Vec<FusionCase> {
    let chunks = draws.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let n = CHUNK.min(draws - c * CHUNK);
            (0..n).map(move |_| sample_case(&mut rng)).collect::<Vec<_>>()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmgmReport {
    pub draws: usize,
    /// Cases with `Σα q < Π q^α`, other than equal-q cases within rounding.
    pub am_gm_violations: usize,
    /// Cases with `Π q^α <= Π q`.
    pub exponent_violations: usize,
    pub min_am_gm_margin: f64,
    pub min_exponent_margin: f64,
    /// Cases whose two densities agree within 1e-12 (equality allowed).
    pub equal_cases: usize,
}

/// Checks `Σα_j q_j ≥ Π q_j^{α_j} > Π q_j` on each case. Equal-q cases may
/// hold with equality up to a relative rounding slack of 1e-12; every other
/// case is compared exactly.
pub fn check_amgm_cases(cases: &[FusionCase]) -> AmgmReport {
    let mut r = AmgmReport {
        draws: cases.len(),
        am_gm_violations: 0,
        exponent_violations: 0,
        min_am_gm_margin: f64::INFINITY,
        min_exponent_margin: f64::INFINITY,
        equal_cases: 0,
    };
    for c in cases {
        let (am, gm, prod) = (c.arithmetic(), c.geometric(), c.product());
        let first = am - gm;
        let second = gm - prod;
        let slack = if c.equal_q() {
            r.equal_cases += 1;
            1e-12 * gm.abs()
        } else {
            0.0
        };
        if first < -slack || first.is_nan() {
            r.am_gm_violations += 1;
        }
        if second <= 0.0 || second.is_nan() {
            r.exponent_violations += 1;
        }
        r.min_am_gm_margin = r.min_am_gm_margin.min(first);
        r.min_exponent_margin = r.min_exponent_margin.min(second);
    }
    r
}

pub fn check_amgm_chain(draws: usize, seed: u64) -> Result<AmgmReport> {
    if draws == 0 {
        return Err(Error::Config("need at least one draw".into()));
    }
    Ok(check_amgm_cases(&sample_cases(draws, seed)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub draws: usize,
    /// Cases with `Σα q <= Π q`.
    pub violations: usize,
    pub min_margin: f64,
}

pub fn check_density_cases(cases: &[FusionCase]) -> DensityReport {
    let mut r = DensityReport {
        draws: cases.len(),
        violations: 0,
        min_margin: f64::INFINITY,
    };
    for c in cases {
        let margin = c.arithmetic() - c.product();
        if margin <= 0.0 || margin.is_nan() {
            r.violations += 1;
        }
        r.min_margin = r.min_margin.min(margin);
    }
    r
}

/// The end-to-end strict inequality `Σα_j q_j > Π q_j`.
pub fn compare_fusion_densities(draws: usize, seed: u64) -> Result<DensityReport> {
    if draws == 0 {
        return Err(Error::Config("need at least one draw".into()));
    }
    Ok(check_density_cases(&sample_cases(draws, seed)))
}

/// 1-D Gaussian with mean and variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normal1 {
    pub mean: f64,
    pub var: f64,
}

impl Normal1 {
    pub fn log_pdf(&self, x: f64) -> f64 {
        -0.5 * ((2.0 * PI * self.var).ln() + (x - self.mean).powi(2) / self.var)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.log_pdf(x).exp()
    }

    /// Closed-form `KL(self ‖ N(0, 1))`.
    pub fn kl_to_standard(&self) -> f64 {
        0.5 * (self.var + self.mean * self.mean - 1.0 - self.var.ln())
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        self.mean + self.var.sqrt() * z
    }
}

/// Normalized product of two Gaussian densities.
pub fn product_of(a: Normal1, c: Normal1) -> Normal1 {
    let (ta, tc) = (1.0 / a.var, 1.0 / c.var);
    Normal1 {
        mean: (a.mean * ta + c.mean * tc) / (ta + tc),
        var: 1.0 / (ta + tc),
    }
}

/// Integral of the unnormalized product `N_a(z) N_c(z)` over z.
pub fn product_mass(a: Normal1, c: Normal1) -> f64 {
    Normal1 {
        mean: c.mean,
        var: a.var + c.var,
    }
    .pdf(a.mean)
}

/// `q(z) ∝ ½(α_a N_a(z) + α_c N_c(z) + N_a(z) N_c(z))`, written as a
/// normalized three-component Gaussian mixture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridPosterior {
    pub weights: [f64; 3],
    pub components: [Normal1; 3],
    /// Integral of the unnormalized density (including the ½).
    pub normalizer: f64,
}

impl HybridPosterior {
    pub fn new(a: Normal1, c: Normal1, gate_a: f64) -> Self {
        let z = product_mass(a, c);
        let raw = [gate_a, 1.0 - gate_a, z];
        let total: f64 = raw.iter().sum();
        HybridPosterior {
            weights: raw.map(|w| w / total),
            components: [a, c, product_of(a, c)],
            normalizer: 0.5 * total,
        }
    }

    /// Unnormalized density exactly as written: `½(α_a N_a + α_c N_c + N_a N_c)`.
    pub fn unnormalized(&self, x: f64, gate_a: f64) -> f64 {
        let [a, c, _] = self.components;
        0.5 * (gate_a * a.pdf(x) + (1.0 - gate_a) * c.pdf(x) + a.pdf(x) * c.pdf(x))
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.components)
            .map(|(w, n)| w * n.pdf(x))
            .sum()
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        self.pdf(x).ln()
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let u: f64 = rng.random();
        let k = if u < self.weights[0] {
            0
        } else if u < self.weights[0] + self.weights[1] {
            1
        } else {
            2
        };
        self.components[k].sample(rng)
    }
}

/// Trapezoid-rule integral of `f` on `[lo, hi]` with `n` intervals.
pub fn trapezoid(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    let inner: f64 = (1..n).map(|k| f(lo + k as f64 * h)).sum();
    h * (0.5 * (f(lo) + f(hi)) + inner)
}

/// `KL(q ‖ N(0, 1))` for a density known up to a constant, normalized
/// numerically on the grid.
pub fn grid_kl_to_standard(unnormalized: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let mass = trapezoid(&unnormalized, lo, hi, n);
    let std = Normal1 { mean: 0.0, var: 1.0 };
    trapezoid(
        |x| {
            let q = unnormalized(x) / mass;
            if q > 0.0 {
                q * (q.ln() - std.log_pdf(x))
            } else {
                0.0
            }
        },
        lo,
        hi,
        n,
    )
}

/// Two 1-D experts, a linear Gaussian decoder `x ~ N(w z + b, σ²)`, and a
/// standard-normal prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElboToy {
    pub mu_a: f64,
    pub log_var_a: f64,
    pub mu_c: f64,
    pub log_var_c: f64,
    /// Mixture weight of expert `a`; expert `c` gets the rest.
    pub gate_a: f64,
    pub decoder_w: f64,
    pub decoder_b: f64,
    pub observation: f64,
    pub obs_log_var: f64,
    /// Independent estimate pairs reported.
    pub replicates: usize,
}

impl Default for ElboToy {
    fn default() -> Self {
        ElboToy {
            mu_a: -2.0,
            log_var_a: 0.0,
            mu_c: 2.0,
            log_var_c: 0.0,
            gate_a: 0.5,
            decoder_w: 1.0,
            decoder_b: 0.0,
            observation: 0.5,
            obs_log_var: 0.0,
            replicates: 8,
        }
    }
}

impl ElboToy {
    pub fn experts(&self) -> (Normal1, Normal1) {
        (
            Normal1 {
                mean: self.mu_a,
                var: self.log_var_a.exp(),
            },
            Normal1 {
                mean: self.mu_c,
                var: self.log_var_c.exp(),
            },
        )
    }

    pub fn poe(&self) -> Normal1 {
        let (a, c) = self.experts();
        product_of(a, c)
    }

    pub fn hybrid(&self) -> HybridPosterior {
        let (a, c) = self.experts();
        HybridPosterior::new(a, c, self.gate_a)
    }

    pub fn log_likelihood(&self, z: f64) -> f64 {
        Normal1 {
            mean: self.decoder_w * z + self.decoder_b,
            var: self.obs_log_var.exp(),
        }
        .log_pdf(self.observation)
    }

    fn validate(&self) -> Result<()> {
        let finite = [
            self.mu_a,
            self.log_var_a,
            self.mu_c,
            self.log_var_c,
            self.decoder_w,
            self.decoder_b,
            self.observation,
            self.obs_log_var,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("toy parameters must be finite".into()));
        }
        if !(self.gate_a > 0.0 && self.gate_a < 1.0) {
            return Err(Error::Config(format!("gate_a {} not in (0, 1)", self.gate_a)));
        }
        if self.replicates == 0 {
            return Err(Error::Config("need at least one replicate".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboGapReport {
    pub mc_samples: usize,
    /// One `(elbo_hybrid, elbo_poe)` estimate pair per replicate.
    pub samples: Vec<(f64, f64)>,
    pub hybrid_mean: f64,
    pub hybrid_se: f64,
    pub poe_mean: f64,
    pub poe_se: f64,
    /// Mean and standard error of `elbo_hybrid - elbo_poe` across replicates.
    pub gap_mean: f64,
    pub gap_se: f64,
    pub kl_hybrid: f64,
    pub kl_poe: f64,
    pub hybrid_normalizer: f64,
    pub hybrid_normalizer_grid: f64,
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Single-sample ELBO terms `log p(x|z) + log p(z) - log q(z)`, `z ~ q`.
fn elbo_draws(
    toy: &ElboToy,
    n: usize,
    rng: &mut ChaCha8Rng,
    sample: impl Fn(&mut ChaCha8Rng) -> f64,
    log_q: impl Fn(f64) -> f64,
) -> Vec<f64> {
    let prior = Normal1 { mean: 0.0, var: 1.0 };
    (0..n)
        .map(|_| {
            let z = sample(rng);
            toy.log_likelihood(z) + prior.log_pdf(z) - log_q(z)
        })
        .collect()
}

/// Monte Carlo ELBO under the hybrid and the product-only posterior. Each
/// replicate uses `mc_samples` draws per posterior on its own stream; the
/// pooled means have standard errors over all draws.
pub fn estimate_elbo_gap(toy: &ElboToy, mc_samples: usize, seed: u64) -> Result<ElboGapReport> {
    toy.validate()?;
    if mc_samples < 2 {
        return Err(Error::Config("need at least two Monte Carlo samples".into()));
    }
    let poe = toy.poe();
    let hybrid = toy.hybrid();
    let per_rep: Vec<(Vec<f64>, Vec<f64>)> = (0..toy.replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(2 * r as u64);
            let h = elbo_draws(toy, mc_samples, &mut rng, |g| hybrid.sample(g), |z| hybrid.log_pdf(z));
            rng.set_stream(2 * r as u64 + 1);
            let p = elbo_draws(toy, mc_samples, &mut rng, |g| poe.sample(g), |z| poe.log_pdf(z));
            (h, p)
        })
        .collect();

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let samples: Vec<(f64, f64)> = per_rep.iter().map(|(h, p)| (mean(h), mean(p))).collect();
    let all_h: Vec<f64> = per_rep.iter().flat_map(|(h, _)| h.iter().copied()).collect();
    let all_p: Vec<f64> = per_rep.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    let (hybrid_mean, hybrid_se) = mean_se(&all_h);
    let (poe_mean, poe_se) = mean_se(&all_p);
    let gaps: Vec<f64> = samples.iter().map(|(h, p)| h - p).collect();
    let (gap_mean, gap_se) = mean_se(&gaps);

    let (a, c) = toy.experts();
    let spread = 12.0 * a.var.sqrt().max(c.var.sqrt()).max(1.0);
    let lo = a.mean.min(c.mean).min(0.0) - spread;
    let hi = a.mean.max(c.mean).max(0.0) + spread;
    let kl_hybrid = grid_kl_to_standard(|x| hybrid.unnormalized(x, toy.gate_a), lo, hi, 20_000);
    let hybrid_normalizer_grid = trapezoid(|x| hybrid.unnormalized(x, toy.gate_a), lo, hi, 20_000);

    Ok(ElboGapReport {
        mc_samples,
        samples,
        hybrid_mean,
        hybrid_se,
        poe_mean,
        poe_se,
        gap_mean,
        gap_se,
        kl_hybrid,
        kl_poe: poe.kl_to_standard(),
        hybrid_normalizer: hybrid.normalizer,
        hybrid_normalizer_grid,
    })
}

/// Everything `verify` reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub draws: usize,
    pub seed: u64,
    pub amgm: AmgmReport,
    pub density: DensityReport,
    pub elbo: Option<ElboGapReport>,
    /// Extra fixed cases checked with the same rules, if any were supplied.
    pub fixture: Option<(AmgmReport, DensityReport)>,
}

impl TheoryReport {
    pub fn violations(&self) -> usize {
        let fixed = self
            .fixture
            .as_ref()
            .map_or(0, |(a, d)| a.am_gm_violations + a.exponent_violations + d.violations);
        self.amgm.am_gm_violations + self.amgm.exponent_violations + self.density.violations + fixed
    }

    pub fn passed(&self) -> bool {
        self.violations() == 0
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let a = &self.amgm;
        let _ = writeln!(out, "draws                      {}", self.draws);
        let _ = writeln!(out, "seed                       {}", self.seed);
        let _ = writeln!(out, "am >= gm violations        {}", a.am_gm_violations);
        let _ = writeln!(out, "gm > product violations    {}", a.exponent_violations);
        let _ = writeln!(out, "min am - gm                {:.3e}", a.min_am_gm_margin);
        let _ = writeln!(out, "min gm - product           {:.3e}", a.min_exponent_margin);
        let _ = writeln!(out, "mixture > product viol.    {}", self.density.violations);
        let _ = writeln!(out, "min mixture - product      {:.3e}", self.density.min_margin);
        if let Some((fa, fd)) = &self.fixture {
            let _ = writeln!(
                out,
                "fixture cases              {} (violations {})",
                fa.draws,
                fa.am_gm_violations + fa.exponent_violations + fd.violations
            );
        }
        if let Some(e) = &self.elbo {
            let _ = writeln!(
                out,
                "elbo hybrid                {:.5} ± {:.5}",
                e.hybrid_mean, e.hybrid_se
            );
            let _ = writeln!(out, "elbo product               {:.5} ± {:.5}", e.poe_mean, e.poe_se);
            let _ = writeln!(out, "elbo gap (hybrid - prod)   {:.5} ± {:.5}", e.gap_mean, e.gap_se);
            let _ = writeln!(out, "kl hybrid / product        {:.5} / {:.5}", e.kl_hybrid, e.kl_poe);
        }
        let _ = writeln!(
            out,
            "result                     {}",
            if self.passed() { "PASS" } else { "FAIL" }
        );
        out
    }
}

pub fn verify(
    draws: usize,
    seed: u64,
    fixture: Option<&[FusionCase]>,
    elbo: Option<(&ElboToy, usize)>,
) -> Result<TheoryReport> {
    Ok(TheoryReport {
        draws,
        seed,
        amgm: check_amgm_chain(draws, seed)?,
        density: compare_fusion_densities(draws, seed)?,
        elbo: elbo.map(|(toy, n)| estimate_elbo_gap(toy, n, seed)).transpose()?,
        fixture: fixture.map(|c| (check_amgm_cases(c), check_density_cases(c))),
    })
}
