//! Output heads: Gaussian mixture policy, categorical value distribution,
//! sigmoid scalar. Each head interprets the raw MLP output vector.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::DiffError;
use crate::rng::RngStream;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Evenly spaced value atoms on `[v_min, v_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Support {
    pub v_min: f64,
    pub v_max: f64,
    pub n_atoms: usize,
}

impl Support {
    pub fn new(v_min: f64, v_max: f64, n_atoms: usize) -> Self {
        assert!(n_atoms >= 2 && v_max > v_min, "degenerate support");
        Self { v_min, v_max, n_atoms }
    }

    pub fn delta(&self) -> f64 {
        (self.v_max - self.v_min) / (self.n_atoms - 1) as f64
    }

    pub fn atom(&self, i: usize) -> f64 {
        if i + 1 == self.n_atoms {
            self.v_max
        } else {
            self.v_min + i as f64 * self.delta()
        }
    }

    pub fn atoms(&self) -> Vec<f64> {
        (0..self.n_atoms).map(|i| self.atom(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Head {
    /// Mixture of `components` diagonal Gaussians over `act_dim` dimensions.
    /// Raw layout: means (K·A), std pre-activations (K·A), logits (K).
    Gmm { components: usize, act_dim: usize, std_floor: f64 },
    Categorical(Support),
    Sigmoid,
}

impl Head {
    pub fn raw_dim(&self) -> usize {
        match *self {
            Head::Gmm { components, act_dim, .. } => components * (2 * act_dim + 1),
            Head::Categorical(s) => s.n_atoms,
            Head::Sigmoid => 1,
        }
    }

    pub fn interpret(&self, raw: &[f64]) -> HeadOutput {
        match *self {
            Head::Gmm { components, act_dim, std_floor } => {
                HeadOutput::Gmm(GmmOutput::from_raw(raw, components, act_dim, std_floor))
            }
            Head::Categorical(_) => HeadOutput::Categorical(softmax(raw)),
            Head::Sigmoid => HeadOutput::Sigmoid(sigmoid(raw[0])),
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Head::Gmm { components, act_dim, std_floor } => write!(f, "gmm:{components}:{act_dim}:{std_floor}"),
            Head::Categorical(s) => write!(f, "categorical:{}:{}:{}", s.n_atoms, s.v_min, s.v_max),
            Head::Sigmoid => write!(f, "sigmoid"),
        }
    }
}

impl FromStr for Head {
    type Err = DiffError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DiffError::Descriptor(s.to_string());
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["sigmoid"] => Ok(Head::Sigmoid),
            ["gmm", k, a, floor] => Ok(Head::Gmm {
                components: k.parse().map_err(|_| bad())?,
                act_dim: a.parse().map_err(|_| bad())?,
                std_floor: floor.parse().map_err(|_| bad())?,
            }),
            ["categorical", n, lo, hi] => {
                let n: usize = n.parse().map_err(|_| bad())?;
                let lo: f64 = lo.parse().map_err(|_| bad())?;
                let hi: f64 = hi.parse().map_err(|_| bad())?;
                if n < 2 || hi <= lo {
                    return Err(bad());
                }
                Ok(Head::Categorical(Support::new(lo, hi, n)))
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadOutput {
    Gmm(GmmOutput),
    Categorical(Vec<f64>),
    Sigmoid(f64),
}

/// Mixture parameters; `means` and `stds` are `components × act_dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmOutput {
    pub components: usize,
    pub act_dim: usize,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub logits: Vec<f64>,
}

impl GmmOutput {
    pub fn from_raw(raw: &[f64], components: usize, act_dim: usize, std_floor: f64) -> Self {
        let ka = components * act_dim;
        Self {
            components,
            act_dim,
            means: raw[..ka].to_vec(),
            stds: raw[ka..2 * ka].iter().map(|&x| softplus(x) + std_floor).collect(),
            logits: raw[2 * ka..2 * ka + components].to_vec(),
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.act_dim..(k + 1) * self.act_dim]
    }

    fn std(&self, k: usize) -> &[f64] {
        &self.stds[k * self.act_dim..(k + 1) * self.act_dim]
    }

    /// Mean of the heaviest component, clipped to `[-1, 1]`.
    pub fn mode_action(&self) -> Vec<f64> {
        let w = self.weights();
        let k = (0..self.components).fold(0, |best, k| if w[k] > w[best] { k } else { best });
        self.mean(k).iter().map(|m| m.clamp(-1.0, 1.0)).collect()
    }
}

/// Log density of `action` under the mixture.
pub fn gmm_log_prob(g: &GmmOutput, action: &[f64]) -> f64 {
    let lse_logits = log_sum_exp(g.logits.iter().copied());
    let per_component = (0..g.components).map(|k| {
        let comp: f64 = g
            .mean(k)
            .iter()
            .zip(g.std(k))
            .zip(action)
            .map(|((m, s), a)| {
                let z = (a - m) / s;
                -0.5 * z * z - s.ln() - HALF_LN_2PI
            })
            .sum();
        g.logits[k] - lse_logits + comp
    });
    log_sum_exp(per_component)
}

/// Log density and its gradient with respect to the raw head output, written to `grad`.
pub fn gmm_log_prob_raw_grad(
    raw: &[f64],
    components: usize,
    act_dim: usize,
    std_floor: f64,
    action: &[f64],
    grad: &mut [f64],
) -> f64 {
    let ka = components * act_dim;
    let logits = &raw[2 * ka..2 * ka + components];
    let lse_logits = log_sum_exp(logits.iter().copied());
    let mut comp_lp = [0.0f64; 16];
    let mut comp_lp_vec;
    let comp_lp: &mut [f64] = if components <= 16 {
        &mut comp_lp[..components]
    } else {
        comp_lp_vec = vec![0.0; components];
        &mut comp_lp_vec
    };
    for k in 0..components {
        let mut lp = logits[k] - lse_logits;
        for d in 0..act_dim {
            let i = k * act_dim + d;
            let s = softplus(raw[ka + i]) + std_floor;
            let z = (action[d] - raw[i]) / s;
            lp += -0.5 * z * z - s.ln() - HALF_LN_2PI;
        }
        comp_lp[k] = lp;
    }
    let total = log_sum_exp(comp_lp.iter().copied());
    for k in 0..components {
        let resp = (comp_lp[k] - total).exp();
        let weight = (logits[k] - lse_logits).exp();
        grad[2 * ka + k] = resp - weight;
        for d in 0..act_dim {
            let i = k * act_dim + d;
            let x = raw[ka + i];
            let s = softplus(x) + std_floor;
            let diff = action[d] - raw[i];
            grad[i] = resp * diff / (s * s);
            let dlp_ds = diff * diff / (s * s * s) - 1.0 / s;
            grad[ka + i] = resp * dlp_ds * sigmoid(x);
        }
    }
    total
}

/// A mixture sample, clipped to `[-1, 1]`.
pub fn gmm_sample(g: &GmmOutput, rng: &mut RngStream) -> Vec<f64> {
    let w = g.weights();
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut k = g.components - 1;
    for (i, wi) in w.iter().enumerate() {
        acc += wi;
        if u < acc {
            k = i;
            break;
        }
    }
    g.mean(k)
        .iter()
        .zip(g.std(k))
        .map(|(m, s)| {
            let z: f64 = StandardNormal.sample(rng);
            (m + s * z).clamp(-1.0, 1.0)
        })
        .collect()
}

/// Expected value `Σ p_i z_i` of a categorical distribution over `atoms`.
pub fn categorical_mean(probs: &[f64], atoms: &[f64]) -> f64 {
    probs.iter().zip(atoms).map(|(p, z)| p * z).sum()
}

/// Density of a 1-D normal, used by quadrature oracles in tests.
pub fn normal_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    (-0.5 * z * z).exp() / (std * (2.0 * PI).sqrt())
}
