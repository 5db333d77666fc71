//! Loss terms and their aggregation.
//!
//! Reconstruction terms sum squared error over valid steps and embedding
//! dimensions; classification terms are cross-entropy; every term is
//! averaged over the batch.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// self-reconstruction
    pub lambda1: f64,
    /// protocol-feature semantic minimization
    pub lambda2: f64,
    /// cross-protocol decoupling
    pub lambda3: f64,
    /// app semantic alignment
    pub lambda4: f64,
    /// app semantic classification
    pub lambda5: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 1.0,
            lambda5: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// The weights with the ablated term set to zero.
    pub fn ablated(self, ablation: Ablation) -> Self {
        let mut w = self;
        match ablation {
            Ablation::None => {}
            Ablation::Src => w.lambda1 = 0.0,
            Ablation::Psm => w.lambda2 = 0.0,
            Ablation::Cpd => w.lambda3 = 0.0,
            Ablation::Asa => w.lambda4 = 0.0,
            Ablation::Asc => w.lambda5 = 0.0,
        }
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    #[default]
    None,
    Src,
    Psm,
    Cpd,
    Asa,
    Asc,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::None,
        Ablation::Src,
        Ablation::Psm,
        Ablation::Cpd,
        Ablation::Asa,
        Ablation::Asc,
    ];

    /// Name of the model variant trained under this ablation.
    pub fn variant(self) -> String {
        match self {
            Ablation::None => "full".into(),
            other => format!("no_{other}"),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::None => "none",
            Ablation::Src => "src",
            Ablation::Psm => "psm",
            Ablation::Cpd => "cpd",
            Ablation::Asa => "asa",
            Ablation::Asc => "asc",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!("unknown ablation `{s}`; expected one of none, src, psm, cpd, asa, asc"))
            })
    }
}

/// Unweighted batch-mean loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub src: f64,
    pub psm: f64,
    pub cpd: f64,
    pub asa: f64,
    pub asc: f64,
}

impl LossParts {
    pub fn add(&mut self, o: &LossParts) {
        self.src += o.src;
        self.psm += o.psm;
        self.cpd += o.cpd;
        self.asa += o.asa;
        self.asc += o.asc;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub src: f64,
    pub psm: f64,
    pub cpd: f64,
    pub asa: f64,
    pub asc: f64,
    pub frd: f64,
    pub afa: f64,
    pub total: f64,
}

pub fn total_loss(parts: LossParts, w: &LossWeights, ablation: Ablation) -> LossReport {
    let w = w.ablated(ablation);
    let frd = w.lambda1 * parts.src + w.lambda2 * parts.psm + w.lambda3 * parts.cpd;
    let afa = w.lambda4 * parts.asa + w.lambda5 * parts.asc;
    LossReport {
        src: parts.src,
        psm: parts.psm,
        cpd: parts.cpd,
        asa: parts.asa,
        asc: parts.asc,
        frd,
        afa,
        total: frd + afa,
    }
}

/// Cross-entropy of the softmax of `logits` against `label`, with its
/// gradient with respect to the logits.
pub fn softmax_ce(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// 1 − cos(a, b) and its gradients.
pub fn cosine_loss(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = na * nb + COS_EPS;
    let cos = dot / den;
    // d cos / da = b / den − dot · nb · a / (na · den²)
    let grad = |u: &[f64], v: &[f64], nu: f64, nv: f64| -> Vec<f64> {
        u.iter()
            .zip(v)
            .map(|(&ui, &vi)| {
                let dden = if nu > 0.0 { nv * ui / nu } else { 0.0 };
                -(vi / den - dot * dden / (den * den))
            })
            .collect()
    };
    let ga = grad(a, b, na, nb);
    let gb = grad(b, a, nb, na);
    (1.0 - cos, ga, gb)
}

/// One branch's reconstruction of one sample: `x` and `recon` are n × d.
#[derive(Debug, Clone, Copy)]
pub struct Recon<'a> {
    pub x: &'a Array2<f64>,
    pub recon: &'a Array2<f64>,
    pub mask: &'a [bool],
}

fn recon_error(r: &Recon) -> f64 {
    r.mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(t, _)| {
            r.x.row(t)
                .iter()
                .zip(r.recon.row(t))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum()
}

fn paired_mean(tls: &[Recon], tun: &[Recon]) -> f64 {
    assert_eq!(tls.len(), tun.len(), "branches need equal batch sizes");
    if tls.is_empty() {
        return 0.0;
    }
    let sum: f64 = tls.iter().zip(tun).map(|(a, b)| recon_error(a) + recon_error(b)).sum();
    sum / tls.len() as f64
}

/// Self-reconstruction: recon holds x'.
pub fn loss_src(tls: &[Recon], tun: &[Recon]) -> f64 {
    paired_mean(tls, tun)
}

/// Cross-protocol decoupling: recon holds the swapped reconstruction x̂.
pub fn loss_cpd(tls: &[Recon], tun: &[Recon]) -> f64 {
    paired_mean(tls, tun)
}

fn paired_ce(logits_tls: &Array2<f64>, logits_tun: &Array2<f64>, labels: &[usize]) -> f64 {
    assert_eq!(logits_tls.nrows(), labels.len());
    assert_eq!(logits_tun.nrows(), labels.len());
    if labels.is_empty() {
        return 0.0;
    }
    let sum: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            softmax_ce(&logits_tls.row(i).to_vec(), y).0 + softmax_ce(&logits_tun.row(i).to_vec(), y).0
        })
        .sum();
    sum / labels.len() as f64
}

/// Protocol-feature semantic minimization, computed on protocol-head logits.
pub fn loss_psm(logits_tls: &Array2<f64>, logits_tun: &Array2<f64>, labels: &[usize]) -> f64 {
    paired_ce(logits_tls, logits_tun, labels)
}

/// App semantic classification, computed on app-head logits.
pub fn loss_asc(logits_tls: &Array2<f64>, logits_tun: &Array2<f64>, labels: &[usize]) -> f64 {
    paired_ce(logits_tls, logits_tun, labels)
}

/// App semantic alignment between pooled app-view features (B × 2H each).
pub fn loss_asa(pooled_tls: &Array2<f64>, pooled_tun: &Array2<f64>) -> f64 {
    assert_eq!(pooled_tls.dim(), pooled_tun.dim());
    let b = pooled_tls.nrows();
    if b == 0 {
        return 0.0;
    }
    let sum: f64 = (0..b)
        .map(|i| cosine_loss(&pooled_tls.row(i).to_vec(), &pooled_tun.row(i).to_vec()).0)
        .sum();
    sum / b as f64
}
