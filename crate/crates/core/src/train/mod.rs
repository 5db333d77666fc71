//! Optimization: the loss terms, Adam, the training loop and the gradient
//! verification harness.

pub mod gradcheck;
pub mod losses;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::flow::ParallelFlowPair;
use crate::nn::model::{batch_loss, GrlMode, Objective, PairInput};
use crate::nn::{tunnel_features, ModelState, NetConfig, Params};
use crate::sim::reencap::mix2;
pub use gradcheck::{grad_check, GradCheckReport};
pub use losses::{total_loss, Ablation, LossParts, LossReport, LossWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub ablation: Ablation,
    /// Worker threads for gradient computation. Results are reproducible
    /// for a fixed value.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            learning_rate: 1e-3,
            max_epochs: 50,
            patience: 10,
            seed: 7,
            train_fraction: 0.8,
            val_fraction: 0.1,
            test_fraction: 0.1,
            ablation: Ablation::None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if self.batch_size == 0 || self.threads == 0 || self.max_epochs == 0 {
            return bad("batch_size, threads and max_epochs must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive".into());
        }
        let fr = [self.train_fraction, self.val_fraction, self.test_fraction];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {fr:?} must lie in [0, 1] and sum to 1"));
        }
        if self.train_fraction == 0.0 || self.val_fraction == 0.0 {
            return bad("train and validation fractions must be positive".into());
        }
        Ok(())
    }
}

/// Pair indices of a stratified split, each list ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Stratified by label: each class is shuffled with `seed` and cut by
    /// the configured fractions, rounding to the nearest count.
    pub fn stratified(labels: &[usize], cfg: &TrainConfig) -> Split {
        let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
        let mut split = Split {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for c in 0..classes {
            let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix2(cfg.seed, 0x5_0000 + c as u64));
            idx.shuffle(&mut rng);
            let k = idx.len();
            let n_train = ((k as f64 * cfg.train_fraction).round() as usize).min(k);
            let n_val = ((k as f64 * cfg.val_fraction).round() as usize).min(k - n_train);
            split.train.extend(&idx[..n_train]);
            split.val.extend(&idx[n_train..n_train + n_val]);
            split.test.extend(&idx[n_train + n_val..]);
        }
        split.train.sort_unstable();
        split.val.sort_unstable();
        split.test.sort_unstable();
        split
    }

    pub fn digest(&self) -> u64 {
        let mut h = 0x9e37_79b9_7f4a_7c15;
        for (tag, part) in [(1u64, &self.train), (2, &self.val), (3, &self.test)] {
            h = mix2(h, tag);
            for &i in part {
                h = mix2(h, i as u64);
            }
        }
        h
    }
}

/// Adaptive moment estimation.
pub struct Adam {
    m: Params,
    v: Params,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(like: &Params, lr: f64) -> Self {
        Adam {
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let step = self.lr / c1;
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for ((((_, p), (_, g)), (_, m)), (_, v)) in tensors {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / ((*v / c2).sqrt() + self.eps);
            });
        }
    }
}

/// Loss and gradient of one batch, split into `threads` contiguous shards
/// whose gradients are summed in shard order.
pub fn batch_gradient(
    params: &Params,
    grl_lambda: f64,
    batch: &[PairInput],
    objective: &Objective,
    threads: usize,
) -> Result<(LossParts, Params)> {
    let scale = 1.0 / batch.len() as f64;
    let shards = threads.clamp(1, batch.len().max(1));
    if shards == 1 {
        let mut g = params.zeros_like();
        let parts = batch_loss(params, grl_lambda, batch, objective, scale, Some(&mut g))?;
        return Ok((parts, g));
    }
    let size = batch.len().div_ceil(shards);
    let results: Vec<Result<(LossParts, Params)>> = std::thread::scope(|s| {
        let handles: Vec<_> = batch
            .chunks(size)
            .map(|chunk| {
                s.spawn(move || {
                    let mut g = params.zeros_like();
                    let parts = batch_loss(params, grl_lambda, chunk, objective, scale, Some(&mut g))?;
                    Ok((parts, g))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut total = LossParts::default();
    let mut grads: Option<Params> = None;
    for r in results {
        let (p, g) = r?;
        total.add(&p);
        match grads.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => grads = Some(g),
        }
    }
    Ok((total, grads.expect("at least one shard")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossReport,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The state with the best validation macro-F1.
    pub state: ModelState,
    pub log: Vec<EpochLog>,
    pub split: Split,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for e in &self.log {
            let line = serde_json::to_string(e).expect("log entry serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Valid tokens of each pair, cut to `n`.
pub fn pair_inputs(pairs: &[ParallelFlowPair], n: usize) -> Vec<PairInput<'_>> {
    pairs
        .iter()
        .map(|p| {
            let tls = p.tls.valid_tokens();
            let tun = p.tun.valid_tokens();
            PairInput {
                tls: &tls[..tls.len().min(n)],
                tun: &tun[..tun.len().min(n)],
                label: p.label,
            }
        })
        .collect()
}

/// Predicted labels for tunnel token sequences, evaluated in chunks.
pub fn predict_tunnel(params: &Params, seqs: &[&[u16]]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(512) {
        let (_, logits) = tunnel_features(params, chunk)?;
        out.extend(logits.rows().into_iter().map(|r| argmax(r.as_slice().expect("contiguous"))));
    }
    Ok(out)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_dataset(pairs: &[ParallelFlowPair], net: &NetConfig, split: &Split) -> Result<()> {
    if let Some(p) = pairs.iter().find(|p| p.label >= net.classes) {
        return Err(Error::Config(format!(
            "label {} exceeds the configured {} classes",
            p.label, net.classes
        )));
    }
    let mut seen = vec![false; net.classes];
    for &i in &split.train {
        seen[pairs[i].label] = true;
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(Error::Config(format!("class {c} is absent from the training split")));
    }
    if split.val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    Ok(())
}

/// Trains the two-branch model on parallel pairs.
pub fn train(
    pairs: &[ParallelFlowPair],
    net: &NetConfig,
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<TrainOutcome> {
    weights.validate()?;
    let objective = Objective::Dual {
        weights: weights.ablated(cfg.ablation),
        grl: GrlMode::Reverse,
    };
    run(pairs, net, cfg, &objective, weights)
}

/// Trains the reference classifier: embedding, tunnel app-view encoder and
/// app head under cross-entropy on tunnel flows alone.
pub fn train_baseline(pairs: &[ParallelFlowPair], net: &NetConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let weights = LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
        lambda4: 0.0,
        lambda5: 1.0,
    };
    run(pairs, net, cfg, &Objective::TunnelOnly, &weights)
}

fn run(
    pairs: &[ParallelFlowPair],
    net: &NetConfig,
    cfg: &TrainConfig,
    objective: &Objective,
    report_weights: &LossWeights,
) -> Result<TrainOutcome> {
    net.validate()?;
    cfg.validate()?;
    let labels: Vec<usize> = pairs.iter().map(|p| p.label).collect();
    let split = Split::stratified(&labels, cfg);
    check_dataset(pairs, net, &split)?;

    let inputs = pair_inputs(pairs, net.n);
    let val_seqs: Vec<&[u16]> = split.val.iter().map(|&i| inputs[i].tun).collect();
    let val_labels: Vec<usize> = split.val.iter().map(|&i| labels[i]).collect();

    let mut state = ModelState::new(net.clone(), cfg.seed)?;
    let mut adam = Adam::new(&state.params, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(mix2(cfg.seed, 0x7a11));
    let mut order = split.train.clone();
    let mut best: Option<(f64, usize, ModelState)> = None;
    let mut log = Vec::new();
    let mut stale = 0;
    let ablation = match objective {
        Objective::Dual { .. } => cfg.ablation,
        Objective::TunnelOnly => Ablation::None,
    };

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut parts = LossParts::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PairInput> = chunk.iter().map(|&i| inputs[i]).collect();
            let (p, g) = batch_gradient(&state.params, net.grl_lambda, &batch, objective, cfg.threads)?;
            let w = batch.len() as f64 / order.len() as f64;
            parts.add(&LossParts {
                src: p.src * w,
                psm: p.psm * w,
                cpd: p.cpd * w,
                asa: p.asa * w,
                asc: p.asc * w,
            });
            adam.step(&mut state.params, &g);
            state.step += 1;
        }
        if !state.params.is_finite() {
            return Err(Error::InvalidInput(format!("parameters diverged in epoch {epoch}")));
        }
        let pred = predict_tunnel(&state.params, &val_seqs)?;
        let m = MetricsReport::from_predictions(&val_labels, &pred, net.classes)?;
        let entry = EpochLog {
            epoch,
            loss: total_loss(parts, report_weights, ablation),
            val_accuracy: m.accuracy,
            val_macro_f1: m.macro_f1,
        };
        log::info!(
            "epoch {epoch}: total {:.5} val macro-F1 {:.4} acc {:.4}",
            entry.loss.total,
            m.macro_f1,
            m.accuracy
        );
        log.push(entry);
        if best.as_ref().is_none_or(|(f, _, _)| m.macro_f1 > *f) {
            best = Some((m.macro_f1, epoch, state.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_epoch, state) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        state,
        log,
        split,
        best_epoch,
    })
}
