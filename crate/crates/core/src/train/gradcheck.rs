//! Finite-difference verification of the analytic gradients.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::losses::{total_loss, Ablation, LossParts, LossWeights};
use crate::error::{Error, Result};
use crate::nn::model::{batch_loss, batch_loss_with_targets, GrlMode, Objective, PairInput};
use crate::nn::{NetConfig, Params};

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

/// The configuration gradients are verified on.
pub fn tiny_config() -> NetConfig {
    NetConfig {
        d: 4,
        hidden: 3,
        n: 6,
        classes: 3,
        ..NetConfig::default()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupError {
    pub name: String,
    /// ‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂); 0 when both vanish.
    pub rel_error: f64,
    pub entries: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.rel_error).fold(0.0, f64::max)
    }

    /// Fails listing every group above `tol`.
    pub fn check(&self, tol: f64) -> Result<()> {
        let bad: Vec<String> = self
            .groups
            .iter()
            .filter(|g| !(g.rel_error <= tol))
            .map(|g| format!("{} ({:.3e})", g.name, g.rel_error))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::GradCheck(bad))
        }
    }
}

/// Random token sequences of length 1..=n with random labels.
pub fn random_batch(net: &NetConfig, batch: usize, seed: u64) -> Vec<(Vec<u16>, Vec<u16>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seq = |rng: &mut ChaCha8Rng| -> Vec<u16> {
        let len = rng.random_range(1..=net.n);
        (0..len).map(|_| rng.random_range(1..net.vocab as u16)).collect()
    };
    (0..batch)
        .map(|_| {
            let a = seq(&mut rng);
            let b = seq(&mut rng);
            (a, b, rng.random_range(0..net.classes))
        })
        .collect()
}

pub fn as_inputs(raw: &[(Vec<u16>, Vec<u16>, usize)]) -> Vec<PairInput<'_>> {
    raw.iter()
        .map(|(a, b, y)| PairInput {
            tls: a,
            tun: b,
            label: *y,
        })
        .collect()
}

/// Unweighted loss terms of the batch with reconstruction targets taken
/// from `targets` (terms with zero weight report 0).
fn loss_parts(
    params: &Params,
    net: &NetConfig,
    batch: &[PairInput],
    weights: &LossWeights,
    targets: &Array2<f64>,
) -> Result<LossParts> {
    let obj = Objective::Dual {
        weights: *weights,
        grl: GrlMode::Reverse,
    };
    batch_loss_with_targets(params, net.grl_lambda, batch, &obj, 1.0 / batch.len() as f64, None, Some(targets))
}

/// Analytic gradient of the weighted objective.
pub fn analytic_gradient(
    params: &Params,
    net: &NetConfig,
    batch: &[PairInput],
    weights: &LossWeights,
    grl: GrlMode,
) -> Result<Params> {
    let obj = Objective::Dual { weights: *weights, grl };
    let mut g = params.zeros_like();
    batch_loss(params, net.grl_lambda, batch, &obj, 1.0 / batch.len() as f64, Some(&mut g))?;
    Ok(g)
}

/// Embedding entries at the check point are uniform in ±this.
pub const CHECK_EMB_SCALE: f64 = 4.0;

/// Parameters the check is evaluated at: the seeded initialization with
/// embedding rows redrawn in ±[`CHECK_EMB_SCALE`]. At the stock embedding
/// scale the pooled app features are short, the cosine term bends on the
/// scale of the difference step, and truncation error swamps the
/// comparison.
pub fn check_point(net: &NetConfig, seed: u64) -> Params {
    let mut p = Params::init(net, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe3b);
    p.emb.mapv_inplace(|_| rng.random_range(-CHECK_EMB_SCALE..=CHECK_EMB_SCALE));
    p
}

/// Tensors that sit above the reversal layer on the protocol path.
fn above_reversal(name: &str) -> bool {
    name.contains(".proto_head.")
}

/// Compares analytic gradients of the weighted objective, reversal active,
/// against central differences, tensor by tensor.
///
/// The reversal layer has no forward effect, so the numeric reference is
/// assembled from two differenced quantities: the objective without the
/// protocol term, plus the protocol term scaled by its weight and, for
/// tensors below the reversal layer, by −λ. Reconstruction targets stay at
/// their unperturbed embedding rows, since they carry no gradient.
pub fn grad_check(net: &NetConfig, batch: usize, seed: u64, weights: &LossWeights) -> Result<GradCheckReport> {
    grad_check_with_step(net, batch, seed, weights, STEP)
}

pub fn grad_check_with_step(
    net: &NetConfig,
    batch: usize,
    seed: u64,
    weights: &LossWeights,
    step: f64,
) -> Result<GradCheckReport> {
    net.validate()?;
    weights.validate()?;
    let raw = random_batch(net, batch, seed);
    let inputs = as_inputs(&raw);
    let params = check_point(net, seed);
    let analytic = analytic_gradient(&params, net, &inputs, weights, GrlMode::Reverse)?;
    let rest = LossWeights {
        lambda2: 0.0,
        ..*weights
    };
    let split = |p: &LossParts| (total_loss(*p, &rest, Ablation::None).total, p.psm);

    // The objective reads embedding rows only through batch tokens; other
    // rows are differenced on a fixed sample and otherwise taken as 0.
    let mut read_rows = vec![false; net.vocab];
    for r in &raw {
        for &t in r.0.iter().chain(&r.1) {
            read_rows[t as usize] = true;
        }
    }
    let sampled = |row: usize| read_rows[row] || row % 997 == 0;

    let mut probe = params.clone();
    let names = params.names();
    let mut groups = Vec::with_capacity(names.len());
    for (ti, name) in names.iter().enumerate() {
        let psm_scale = weights.lambda2 * if above_reversal(name) { 1.0 } else { -net.grl_lambda };
        let a_flat: Vec<f64> = analytic.tensors()[ti].1.iter().copied().collect();
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for (k, &a) in a_flat.iter().enumerate() {
            if name == "emb" && !sampled(k / net.d) {
                diff2 += a * a;
                a2 += a * a;
                continue;
            }
            let orig = probe.tensors()[ti].1.as_slice().expect("contiguous")[k];
            let mut eval = |v: f64| -> Result<(f64, f64)> {
                probe.tensors_mut()[ti].1.as_slice_mut().expect("contiguous")[k] = v;
                Ok(split(&loss_parts(&probe, net, &inputs, weights, &params.emb)?))
            };
            let (rp, pp) = eval(orig + step)?;
            let (rm, pm) = eval(orig - step)?;
            eval(orig)?;
            let numeric = (rp - rm) / (2.0 * step) + psm_scale * (pp - pm) / (2.0 * step);
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        let rel_error = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
        groups.push(GroupError {
            name: name.clone(),
            rel_error,
            entries: a_flat.len(),
        });
    }
    Ok(GradCheckReport { groups })
}
