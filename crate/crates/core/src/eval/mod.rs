//! Tunnel-only inference, metrics and experiment drivers.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowKind, FlowSequence, ParallelFlowPair};
use crate::nn::checkpoint::write_atomic;
use crate::nn::{tunnel_features, ModelState, NetConfig};
use crate::train::{argmax, train, train_baseline, Ablation, LossWeights, Split, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

impl MetricsReport {
    /// Classes without support score 0 and still count in macro means.
    pub fn from_predictions(truth: &[usize], pred: &[usize], classes: usize) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::InvalidInput("cannot evaluate an empty set".into()));
        }
        if truth.len() != pred.len() {
            return Err(Error::InvalidInput("label and prediction counts differ".into()));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= classes || p >= classes {
                return Err(Error::InvalidInput(format!("label outside 0..{classes}")));
            }
            confusion[t][p] += 1;
        }
        Ok(Self::from_confusion(confusion))
    }

    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Self {
        let c = confusion.len();
        let total: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..c).map(|i| confusion[i][i]).sum();
        let per_class: Vec<ClassMetrics> = (0..c)
            .map(|k| {
                let tp = confusion[k][k] as f64;
                let support: usize = confusion[k].iter().sum();
                let predicted: usize = confusion.iter().map(|row| row[k]).sum();
                let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
                let recall = if support > 0 { tp / support as f64 } else { 0.0 };
                let f1 = if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                };
                ClassMetrics {
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect();
        let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c.max(1) as f64;
        MetricsReport {
            accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
            macro_precision: mean(|m| m.precision),
            macro_recall: mean(|m| m.recall),
            macro_f1: mean(|m| m.f1),
            per_class,
            confusion,
        }
    }

    pub fn support(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    /// Human-readable summary with a per-class table.
    pub fn render(&self, names: &[String]) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}  (n = {})",
            self.accuracy,
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
            self.support()
        );
        let _ = writeln!(s, "{:<16} {:>9} {:>9} {:>9} {:>8}", "class", "precision", "recall", "f1", "support");
        for (i, m) in self.per_class.iter().enumerate() {
            let name = names.get(i).cloned().unwrap_or_else(|| i.to_string());
            let _ = writeln!(
                s,
                "{name:<16} {:>9.4} {:>9.4} {:>9.4} {:>8}",
                m.precision, m.recall, m.f1, m.support
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fingerprint {
    /// Pooled app-view features, 2H long.
    pub vector: Vec<f64>,
    pub flow_ref: String,
    pub predicted: usize,
    /// Largest softmax probability.
    pub confidence: f64,
}

pub fn flow_ref(flow: &FlowSequence) -> String {
    format!("{}@{}", flow.key, flow.start_time)
}

fn softmax_max(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    1.0 / sum
}

/// Fingerprints of tunnel flows, computed in chunks.
pub fn fingerprints(flows: &[FlowSequence], state: &ModelState) -> Result<Vec<Fingerprint>> {
    if let Some(f) = flows.iter().find(|f| f.kind != FlowKind::Tunnel) {
        return Err(Error::InvalidInput(format!("flow {} is not a tunnel flow", flow_ref(f))));
    }
    let n = state.config.n;
    let mut out = Vec::with_capacity(flows.len());
    for chunk in flows.chunks(512) {
        let seqs: Vec<&[u16]> = chunk
            .iter()
            .map(|f| {
                let v = f.valid_tokens();
                &v[..v.len().min(n)]
            })
            .collect();
        let (pooled, logits) = tunnel_features(&state.params, &seqs)?;
        for (i, f) in chunk.iter().enumerate() {
            let l = logits.row(i);
            let l = l.as_slice().expect("contiguous");
            out.push(Fingerprint {
                vector: pooled.row(i).to_vec(),
                flow_ref: flow_ref(f),
                predicted: argmax(l),
                confidence: softmax_max(l),
            });
        }
    }
    Ok(out)
}

pub fn fingerprint(flow: &FlowSequence, state: &ModelState) -> Result<Fingerprint> {
    Ok(fingerprints(std::slice::from_ref(flow), state)?.remove(0))
}

fn labels_of(flows: &[FlowSequence]) -> Result<Vec<usize>> {
    flows
        .iter()
        .map(|f| {
            f.label
                .ok_or_else(|| Error::InvalidInput(format!("flow {} has no label", flow_ref(f))))
        })
        .collect()
}

/// Metrics of tunnel-only predictions against the flows' labels.
pub fn evaluate(flows: &[FlowSequence], state: &ModelState) -> Result<MetricsReport> {
    let truth = labels_of(flows)?;
    let pred: Vec<usize> = fingerprints(flows, state)?.iter().map(|f| f.predicted).collect();
    MetricsReport::from_predictions(&truth, &pred, state.config.classes)
}

/// Tunnel flows of the selected pairs.
pub fn tunnel_flows(pairs: &[ParallelFlowPair], idx: &[usize]) -> Vec<FlowSequence> {
    idx.iter().map(|&i| pairs[i].tun.clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketResult {
    pub lo: usize,
    pub hi: usize,
    pub support: usize,
    /// Absent when no flow falls in the bucket.
    pub accuracy: Option<f64>,
    pub metrics: Option<MetricsReport>,
}

impl BucketResult {
    pub fn label(&self) -> String {
        format!("{}-{}", self.lo, self.hi)
    }
}

/// Evaluates flows grouped by true length. Bucket i covers
/// [edges[i], edges[i+1]); the last bucket also includes its upper edge.
pub fn bucketed_eval(flows: &[FlowSequence], state: &ModelState, edges: &[usize]) -> Result<Vec<BucketResult>> {
    if edges.len() < 2 || edges[0] != 1 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("bucket edges {edges:?} must start at 1 and increase")));
    }
    let last = edges.len() - 2;
    let bucket_of = |len: usize| -> Option<usize> {
        (0..=last).find(|&i| len >= edges[i] && (len < edges[i + 1] || (i == last && len == edges[i + 1])))
    };
    let truth = labels_of(flows)?;
    let fps = fingerprints(flows, state)?;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); last + 1];
    for (i, f) in flows.iter().enumerate() {
        let len = f.true_len.min(state.config.n);
        let b = bucket_of(len)
            .ok_or_else(|| Error::Config(format!("flow length {len} outside bucket edges {edges:?}")))?;
        members[b].push(i);
    }
    members
        .iter()
        .enumerate()
        .map(|(b, m)| {
            let metrics = if m.is_empty() {
                None
            } else {
                let t: Vec<usize> = m.iter().map(|&i| truth[i]).collect();
                let p: Vec<usize> = m.iter().map(|&i| fps[i].predicted).collect();
                Some(MetricsReport::from_predictions(&t, &p, state.config.classes)?)
            };
            Ok(BucketResult {
                lo: edges[b],
                hi: edges[b + 1],
                support: m.len(),
                accuracy: metrics.as_ref().map(|r| r.accuracy),
                metrics,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: String,
    pub ablation: Ablation,
    pub outcome: TrainOutcome,
    /// Test-split metrics.
    pub test: MetricsReport,
}

/// Trains and scores one model; the test split is the one training used.
pub fn train_and_test(
    pairs: &[ParallelFlowPair],
    net: &NetConfig,
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<(TrainOutcome, MetricsReport)> {
    let outcome = train(pairs, net, cfg, weights)?;
    let test = test_metrics(pairs, &outcome)?;
    Ok((outcome, test))
}

pub fn baseline_and_test(
    pairs: &[ParallelFlowPair],
    net: &NetConfig,
    cfg: &TrainConfig,
) -> Result<(TrainOutcome, MetricsReport)> {
    let outcome = train_baseline(pairs, net, cfg)?;
    let test = test_metrics(pairs, &outcome)?;
    Ok((outcome, test))
}

pub fn test_metrics(pairs: &[ParallelFlowPair], outcome: &TrainOutcome) -> Result<MetricsReport> {
    evaluate(&tunnel_flows(pairs, &outcome.split.test), &outcome.state)
}

/// The full model and every single-term ablation, trained with identical
/// seeds and splits.
pub fn ablate(
    pairs: &[ParallelFlowPair],
    net: &NetConfig,
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<Vec<VariantResult>> {
    Ablation::ALL
        .into_iter()
        .map(|a| {
            log::info!("training variant {}", a.variant());
            let c = TrainConfig { ablation: a, ..cfg.clone() };
            let (outcome, test) = train_and_test(pairs, net, &c, weights)?;
            Ok(VariantResult {
                variant: a.variant(),
                ablation: a,
                outcome,
                test,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub n: usize,
    pub outcome: TrainOutcome,
    pub test: MetricsReport,
}

/// Retrains at each sequence length with the same seed and configuration.
pub fn sequence_length_sweep(
    pairs: &[ParallelFlowPair],
    lengths: &[usize],
    net: &NetConfig,
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<Vec<SweepPoint>> {
    let captured = pairs.iter().map(|p| p.tls.seq_len()).max().unwrap_or(0);
    lengths
        .iter()
        .map(|&n| {
            if n == 0 || n > captured {
                return Err(Error::Config(format!("sweep length {n} outside 1..={captured}")));
            }
            log::info!("training at n = {n}");
            let cut: Vec<ParallelFlowPair> = pairs.iter().map(|p| p.with_seq_len(n)).collect::<Result<_>>()?;
            let net_n = NetConfig { n, ..net.clone() };
            let (outcome, test) = train_and_test(&cut, &net_n, cfg, weights)?;
            Ok(SweepPoint { n, outcome, test })
        })
        .collect()
}

/// One line of the machine-readable metrics table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub variant: String,
    pub n: usize,
    pub bucket: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

impl MetricsRow {
    pub fn new(variant: &str, n: usize, bucket: &str, m: &MetricsReport) -> Self {
        MetricsRow {
            variant: variant.to_string(),
            n,
            bucket: bucket.to_string(),
            accuracy: m.accuracy,
            precision: m.macro_precision,
            recall: m.macro_recall,
            f1: m.macro_f1,
            support: m.support(),
        }
    }
}

pub const METRICS_HEADER: &str = "variant,n,bucket,accuracy,precision,recall,f1,support";

pub fn render_metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.variant, r.n, r.bucket, r.accuracy, r.precision, r.recall, r.f1, r.support
        );
    }
    s
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_atomic(path, render_metrics_csv(rows).as_bytes())
}

/// Writes one row per flow: reference, true and predicted label, and the
/// fingerprint components `fp_0..`. Returns the number of rows.
pub fn export_fingerprints(flows: &[FlowSequence], state: &ModelState, path: &Path) -> Result<usize> {
    let fps = fingerprints(flows, state)?;
    let width = 2 * state.config.hidden;
    let mut s = String::from("flow_ref,label,predicted,confidence");
    for i in 0..width {
        let _ = write!(s, ",fp_{i}");
    }
    s.push('\n');
    for (f, fp) in flows.iter().zip(&fps) {
        let label = f.label.map(|l| l.to_string()).unwrap_or_default();
        let _ = write!(s, "{},{},{},{}", fp.flow_ref, label, fp.predicted, fp.confidence);
        for v in &fp.vector {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())?;
    Ok(fps.len())
}

/// Split indices a variant trained on, for cross-variant comparison.
pub fn split_digest(s: &Split) -> u64 {
    s.digest()
}
