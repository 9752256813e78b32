use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::ModalityKind;
use crate::error::{Error, Result};
use crate::numerics::kernels::softmax_in_place;

/// Floor on the mean divergence when normalising JSD scales.
pub const JSD_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    /// Per-modality scales given up front.
    Fixed,
    /// Scales proportional to each stream's divergence from the unconditional one, recomputed per step.
    Jsd,
}

impl std::str::FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "jsd" => Ok(Self::Jsd),
            other => Err(Error::config("guidance.mode", format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fixed => "fixed",
            Self::Jsd => "jsd",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    /// Fixed-mode scales; modalities not listed use `default_lambda`.
    pub lambda: BTreeMap<ModalityKind, f64>,
    pub default_lambda: f64,
    /// Mean scale in jsd mode.
    pub kappa: f64,
    pub temperature: f64,
    /// Keep only the `top_k` largest logits; 0 keeps all.
    pub top_k: usize,
    /// Take the argmax instead of sampling (the zero-temperature limit).
    pub greedy: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            mode: GuidanceMode::Jsd,
            lambda: BTreeMap::new(),
            default_lambda: 1.0,
            kappa: 1.0,
            temperature: 1.0,
            top_k: 0,
            greedy: false,
        }
    }
}

impl GuidanceConfig {
    pub fn fixed(lambda: f64) -> Self {
        Self { mode: GuidanceMode::Fixed, default_lambda: lambda, ..Self::default() }
    }

    pub fn jsd(kappa: f64) -> Self {
        Self { mode: GuidanceMode::Jsd, kappa, ..Self::default() }
    }

    pub fn lambda_for(&self, kind: ModalityKind) -> f64 {
        self.lambda.get(&kind).copied().unwrap_or(self.default_lambda)
    }

    pub fn validate(&self, image_vocab: usize) -> Result<()> {
        if let Some((k, v)) = self.lambda.iter().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::config("guidance.lambda", format!("{k} = {v} must be finite and nonnegative")));
        }
        if !(self.default_lambda >= 0.0 && self.default_lambda.is_finite()) {
            return Err(Error::config("guidance.lambda", "default must be finite and nonnegative"));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::config("guidance.kappa", "must be finite and nonnegative"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("guidance.temperature", "must be positive"));
        }
        if self.top_k > image_vocab {
            return Err(Error::config("guidance.top_k", format!("must be 0 or at most {image_vocab}")));
        }
        Ok(())
    }
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-4 || p.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::contract(format!("{name} is not a probability vector (sum {s})")));
    }
    Ok(())
}

/// Jensen-Shannon divergence in nats, within `[0, ln 2]`.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension { op: "jsd", lhs: vec![p.len()], rhs: vec![q.len()] });
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    let half_kl = |a: f64, m: f64| if a > 0.0 { 0.5 * a * (a / m).ln() } else { 0.0 };
    let d: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            half_kl(a, m) + half_kl(b, m)
        })
        .sum();
    Ok(d.clamp(0.0, std::f64::consts::LN_2))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

/// `(1 - sum λ) u + sum_m λ_m c_m`, which equals `u + sum_m λ_m (c_m - u)`.
///
/// Written with an explicit unconditional weight so that all-zero scales
/// return `uncon` exactly and a single unit scale returns that stream exactly.
pub fn guided_logits(uncon: &[f64], con: &[Vec<f64>], lambdas: &[f64]) -> Result<Vec<f64>> {
    if con.len() != lambdas.len() {
        return Err(Error::contract(format!("{} conditional streams but {} scales", con.len(), lambdas.len())));
    }
    if let Some(c) = con.iter().find(|c| c.len() != uncon.len()) {
        return Err(Error::Dimension { op: "guided_logits", lhs: vec![uncon.len()], rhs: vec![c.len()] });
    }
    let w0 = 1.0 - lambdas.iter().sum::<f64>();
    let mut out: Vec<f64> = uncon.iter().map(|&u| w0 * u).collect();
    for (c, &l) in con.iter().zip(lambdas) {
        for (o, &v) in out.iter_mut().zip(c) {
            *o += l * v;
        }
    }
    Ok(out)
}

/// Per-stream divergences from the unconditional distribution.
pub fn divergences(uncon: &[f64], con: &[Vec<f64>]) -> Result<Vec<f64>> {
    let pu = softmax(uncon);
    con.iter().map(|c| jsd(&softmax(c), &pu)).collect()
}

/// `λ_m = κ d_m / max(ε, mean d)`, so the scales average to `κ` and follow
/// the relative divergences.
pub fn lambdas_from_divergences(d: &[f64], kappa: f64) -> Vec<f64> {
    if d.is_empty() {
        return Vec::new();
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let denom = mean.max(JSD_EPS);
    d.iter().map(|&v| kappa * v / denom).collect()
}

pub fn jsd_lambdas(uncon: &[f64], con: &[Vec<f64>], kappa: f64) -> Result<Vec<f64>> {
    Ok(lambdas_from_divergences(&divergences(uncon, con)?, kappa))
}

/// Replaces every logit outside the `k` largest with a large negative value;
/// ties go to the lowest token id. `k = 0` leaves the logits unchanged.
pub fn top_k_filter(logits: &mut [f64], k: usize) {
    if k == 0 || k >= logits.len() {
        return;
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    for &i in &order[k..] {
        logits[i] = crate::numerics::MASK_VALUE;
    }
}
