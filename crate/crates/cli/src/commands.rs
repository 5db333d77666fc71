use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use tunfp::eval::{
    self, bucketed_eval, evaluate, export_fingerprints, tunnel_flows, write_metrics_csv, MetricsReport,
    MetricsRow,
};
use tunfp::flow::{FlowKind, FlowSequence, ParallelFlowPair};
use tunfp::formats::{self, DatasetHeader};
use tunfp::ingest::{correlate, reassemble_dir, ReassemblyConfig};
use tunfp::nn::{checkpoint, ModelState, NetConfig};
use tunfp::sim::{generate_corpus, synthesize_apps};
use tunfp::train::gradcheck::{grad_check, tiny_config, TOLERANCE};
use tunfp::train::{train, train_baseline, Split};

use crate::config::RunConfig;
use crate::manifest::Manifest;

pub const MANIFEST_FILE: &str = "manifest.json";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        bail!("input {} does not exist", path.display());
    }
    Ok(())
}

/// Pairs of a dataset file, optionally restricted to one tunnel profile.
fn load_pairs(path: &Path, profile: Option<&str>) -> Result<(DatasetHeader, Vec<ParallelFlowPair>)> {
    require(path)?;
    let (header, pairs) = formats::read_dataset(path)?;
    let pairs = match profile {
        Some(p) => {
            let kept: Vec<_> = pairs.into_iter().filter(|x| x.tunnel.as_deref() == Some(p)).collect();
            if kept.is_empty() {
                bail!("no pairs carried by tunnel profile `{p}` in {}", path.display());
            }
            kept
        }
        None => pairs,
    };
    if pairs.is_empty() {
        bail!("{} holds no pairs", path.display());
    }
    Ok((header, pairs))
}

/// The network shape follows the data: class count from the label list,
/// sequence length from the dataset.
fn net_for(cfg: &RunConfig, header: &DatasetHeader) -> NetConfig {
    let net = NetConfig {
        classes: header.labels.len(),
        n: header.n,
        ..cfg.net.clone()
    };
    if net.classes != cfg.net.classes || net.n != cfg.net.n {
        log::info!("network uses classes = {}, n = {} from the dataset", net.classes, net.n);
    }
    net
}

fn metric_rows(variant: &str, n: usize, m: &MetricsReport) -> Vec<MetricsRow> {
    vec![MetricsRow::new(variant, n, "all", m)]
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let mut manifest = Manifest::new("simulate", cfg, &[])?;
    let apps = synthesize_apps(cfg.apps.count, cfg.seed, &cfg.apps.synth)?;
    let corpus = generate_corpus(&apps, &cfg.profile, &cfg.corpus)?;
    let files = corpus.write(out)?;
    for p in [&files.tls_dir, &files.tun_dir, &files.mapping, &files.pairs, &files.profiles] {
        manifest.output(p);
    }
    manifest.write(&out.join(MANIFEST_FILE))?;
    println!(
        "simulated {} pairs ({} with reused ports) into {}",
        corpus.pairs.len(),
        corpus.reused,
        out.display()
    );
    Ok(())
}

pub fn ingest(cfg: &RunConfig, tls: &Path, tun: &Path, out: &Path) -> Result<()> {
    require(tls)?;
    require(tun)?;
    create_dir(out)?;
    let mut manifest = Manifest::new("ingest", cfg, &[tls.to_path_buf(), tun.to_path_buf()])?;
    let rcfg = ReassemblyConfig {
        n: cfg.correlation.n,
        idle_timeout: cfg.idle_timeout(),
    };
    let (tls_names, tls_flows) = reassemble_dir(tls, &rcfg, FlowKind::Tls)?;
    let (tun_names, tun_flows) = reassemble_dir(tun, &rcfg, FlowKind::Tunnel)?;
    if tls_names != tun_names {
        bail!("TLS and tunnel directories hold different app files");
    }
    let header = DatasetHeader {
        n: rcfg.n,
        labels: tls_names,
    };
    let tls_out = out.join("tls_flows.jsonl");
    let tun_out = out.join("tun_flows.jsonl");
    formats::write_flows(&tls_out, &header, FlowKind::Tls, &tls_flows.flows)?;
    formats::write_flows(&tun_out, &header, FlowKind::Tunnel, &tun_flows.flows)?;
    manifest.output(&tls_out);
    manifest.output(&tun_out);
    manifest.write(&out.join(MANIFEST_FILE))?;
    println!(
        "ingested {} TLS and {} tunnel flows ({} empty flows dropped)",
        tls_flows.flows.len(),
        tun_flows.flows.len(),
        tls_flows.dropped_empty + tun_flows.dropped_empty
    );
    Ok(())
}

fn read_flows_of(path: &Path, kind: FlowKind) -> Result<(DatasetHeader, Vec<FlowSequence>)> {
    require(path)?;
    let (header, k, flows) = formats::read_flows(path)?;
    if k != kind {
        bail!("{} holds {k} flows, expected {kind}", path.display());
    }
    Ok((header, flows))
}

pub fn correlate_cmd(cfg: &RunConfig, tls: &Path, tun: &Path, mapping: &Path, out: &Path) -> Result<()> {
    require(mapping)?;
    let (th, tls_flows) = read_flows_of(tls, FlowKind::Tls)?;
    let (uh, tun_flows) = read_flows_of(tun, FlowKind::Tunnel)?;
    if th.labels != uh.labels {
        bail!("TLS and tunnel flow files disagree on the label list");
    }
    create_dir(out)?;
    let mut manifest = Manifest::new(
        "correlate",
        cfg,
        &[tls.to_path_buf(), tun.to_path_buf(), mapping.to_path_buf()],
    )?;
    let table = formats::read_mapping_table(mapping)?;
    let mut c = correlate(&tls_flows, &tun_flows, &table, &cfg.correlation)?;
    for pair in &mut c.pairs {
        pair.tunnel = tunnel_of(cfg, &pair.tun);
    }
    let path = out.join("pairs.jsonl");
    let header = DatasetHeader {
        n: cfg.correlation.n,
        labels: th.labels,
    };
    formats::write_dataset(&path, &header, &c.pairs)?;
    manifest.output(&path);
    manifest.write(&out.join(MANIFEST_FILE))?;
    println!("{}", c.summary());
    Ok(())
}

/// The configured profile whose server endpoint the tunnel flow reaches,
/// when exactly one matches.
fn tunnel_of(cfg: &RunConfig, tun: &FlowSequence) -> Option<String> {
    let mut hits = cfg
        .profile
        .iter()
        .filter(|p| p.server_port == tun.key.dst_port && p.protocol == tun.key.protocol);
    match (hits.next(), hits.next()) {
        (Some(p), None) => Some(p.name.clone()),
        _ => None,
    }
}

pub struct TrainArgs<'a> {
    pub pairs: &'a Path,
    pub out: &'a Path,
    pub profile: Option<&'a str>,
    pub baseline: bool,
}

pub fn train_cmd(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let (header, pairs) = load_pairs(a.pairs, a.profile)?;
    create_dir(a.out)?;
    let mut manifest = Manifest::new("train", cfg, &[a.pairs.to_path_buf()])?;
    let net = net_for(cfg, &header);
    let outcome = if a.baseline {
        train_baseline(&pairs, &net, &cfg.train)?
    } else {
        train(&pairs, &net, &cfg.train, &cfg.loss)?
    };
    let ckpt = a.out.join("model.ckpt");
    checkpoint::save(&outcome.state, &ckpt)?;
    let log = a.out.join("train_log.jsonl");
    outcome.write_log(&log)?;
    let test = eval::test_metrics(&pairs, &outcome)?;
    let variant = if a.baseline { "baseline".to_string() } else { cfg.train.ablation.variant() };
    let csv = a.out.join("metrics.csv");
    write_metrics_csv(&csv, &metric_rows(&variant, net.n, &test))?;
    let report = a.out.join("metrics.txt");
    std::fs::write(&report, test.render(&header.labels)).with_context(|| format!("writing {}", report.display()))?;
    for p in [&ckpt, &log, &csv, &report] {
        manifest.output(p);
    }
    manifest.write(&a.out.join(MANIFEST_FILE))?;
    println!(
        "best epoch {} of {}; test macro-F1 {:.4}, accuracy {:.4}",
        outcome.best_epoch,
        outcome.log.len(),
        test.macro_f1,
        test.accuracy
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Subset {
    /// The held-out test part of the stratified split.
    Test,
    All,
}

/// Tunnel flows to score, cut to the checkpoint's sequence length.
fn flows_for(
    cfg: &RunConfig,
    pairs: &[ParallelFlowPair],
    subset: Subset,
    state: &ModelState,
) -> Result<Vec<FlowSequence>> {
    let idx: Vec<usize> = match subset {
        Subset::All => (0..pairs.len()).collect(),
        Subset::Test => {
            let labels: Vec<usize> = pairs.iter().map(|p| p.label).collect();
            Split::stratified(&labels, &cfg.train).test
        }
    };
    tunnel_flows(pairs, &idx)
        .into_iter()
        .map(|f| {
            if f.seq_len() == state.config.n {
                Ok(f)
            } else {
                Ok(f.with_seq_len(state.config.n)?)
            }
        })
        .collect()
}

fn load_checkpoint(path: &Path) -> Result<ModelState> {
    require(path)?;
    Ok(checkpoint::load(path)?)
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub pairs: &'a Path,
    pub out: &'a Path,
    pub profile: Option<&'a str>,
    pub subset: Subset,
    pub buckets: Option<Vec<usize>>,
    pub variant: &'a str,
}

pub fn eval_cmd(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let state = load_checkpoint(a.checkpoint)?;
    let (header, pairs) = load_pairs(a.pairs, a.profile)?;
    if header.labels.len() != state.config.classes {
        bail!(
            "checkpoint has {} classes, dataset {}",
            state.config.classes,
            header.labels.len()
        );
    }
    create_dir(a.out)?;
    let mut manifest = Manifest::new("eval", cfg, &[a.checkpoint.to_path_buf(), a.pairs.to_path_buf()])?;
    let flows = flows_for(cfg, &pairs, a.subset, &state)?;
    if flows.is_empty() {
        bail!("no flows to evaluate");
    }
    let m = evaluate(&flows, &state)?;
    let mut rows = metric_rows(a.variant, state.config.n, &m);
    let mut text = m.render(&header.labels);
    if let Some(edges) = &a.buckets {
        for b in bucketed_eval(&flows, &state, edges)? {
            text.push_str(&format!(
                "bucket {}: support {} accuracy {}\n",
                b.label(),
                b.support,
                b.accuracy.map_or("-".to_string(), |x| format!("{x:.4}"))
            ));
            if let Some(bm) = &b.metrics {
                rows.push(MetricsRow::new(a.variant, state.config.n, &b.label(), bm));
            }
        }
    }
    let csv = a.out.join("metrics.csv");
    write_metrics_csv(&csv, &rows)?;
    let report = a.out.join("metrics.txt");
    std::fs::write(&report, &text).with_context(|| format!("writing {}", report.display()))?;
    manifest.output(&csv);
    manifest.output(&report);
    manifest.write(&a.out.join(MANIFEST_FILE))?;
    print!("{text}");
    Ok(())
}

pub fn ablate_cmd(cfg: &RunConfig, pairs_path: &Path, out: &Path, profile: Option<&str>) -> Result<()> {
    let (header, pairs) = load_pairs(pairs_path, profile)?;
    create_dir(out)?;
    let mut manifest = Manifest::new("ablate", cfg, &[pairs_path.to_path_buf()])?;
    let net = net_for(cfg, &header);
    let results = eval::ablate(&pairs, &net, &cfg.train, &cfg.loss)?;
    let mut rows = Vec::new();
    for r in &results {
        println!("{:<8} test macro-F1 {:.4}", r.variant, r.test.macro_f1);
        rows.extend(metric_rows(&r.variant, net.n, &r.test));
    }
    let csv = out.join("metrics.csv");
    write_metrics_csv(&csv, &rows)?;
    manifest.output(&csv);
    manifest.write(&out.join(MANIFEST_FILE))?;
    Ok(())
}

pub fn sweep_cmd(
    cfg: &RunConfig,
    pairs_path: &Path,
    out: &Path,
    profile: Option<&str>,
    lengths: &[usize],
) -> Result<()> {
    let (header, pairs) = load_pairs(pairs_path, profile)?;
    create_dir(out)?;
    let mut manifest = Manifest::new("sweep", cfg, &[pairs_path.to_path_buf()])?;
    let net = net_for(cfg, &header);
    let points = eval::sequence_length_sweep(&pairs, lengths, &net, &cfg.train, &cfg.loss)?;
    let variant = cfg.train.ablation.variant();
    let mut rows = Vec::new();
    for p in &points {
        println!("n = {:<4} test macro-F1 {:.4}", p.n, p.test.macro_f1);
        rows.extend(metric_rows(&variant, p.n, &p.test));
    }
    let csv = out.join("metrics.csv");
    write_metrics_csv(&csv, &rows)?;
    manifest.output(&csv);
    manifest.write(&out.join(MANIFEST_FILE))?;
    Ok(())
}

pub struct FingerprintArgs<'a> {
    pub checkpoint: &'a Path,
    pub pairs: Option<&'a Path>,
    pub flows: Option<&'a Path>,
    pub subset: Subset,
    pub out: &'a Path,
}

pub fn fingerprint_cmd(cfg: &RunConfig, a: &FingerprintArgs) -> Result<()> {
    let state = load_checkpoint(a.checkpoint)?;
    let (input, flows): (PathBuf, Vec<FlowSequence>) = match (a.pairs, a.flows) {
        (Some(p), None) => {
            let (_, pairs) = load_pairs(p, None)?;
            (p.to_path_buf(), flows_for(cfg, &pairs, a.subset, &state)?)
        }
        (None, Some(f)) => {
            let (_, flows) = read_flows_of(f, FlowKind::Tunnel)?;
            let flows = flows
                .into_iter()
                .map(|x| if x.seq_len() == state.config.n { Ok(x) } else { x.with_seq_len(state.config.n) })
                .collect::<tunfp::Result<Vec<_>>>()?;
            (f.to_path_buf(), flows)
        }
        _ => bail!("give exactly one of --pairs and --flows"),
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut manifest = Manifest::new("fingerprint", cfg, &[a.checkpoint.to_path_buf(), input])?;
    let n = export_fingerprints(&flows, &state, a.out)?;
    manifest.output(a.out);
    let mpath = PathBuf::from(format!("{}.manifest.json", a.out.display()));
    manifest.write(&mpath)?;
    println!("wrote {n} fingerprints to {}", a.out.display());
    Ok(())
}

/// Returns whether every group passed.
pub fn gradcheck_cmd(cfg: &RunConfig, batch: usize) -> Result<bool> {
    let net = NetConfig {
        grl_lambda: cfg.net.grl_lambda,
        ..tiny_config()
    };
    let report = grad_check(&net, batch, cfg.seed, &cfg.loss)?;
    for g in &report.groups {
        let mark = if g.rel_error <= TOLERANCE { "ok" } else { "FAIL" };
        println!("{:<28} {:>6} {:.3e} {mark}", g.name, g.entries, g.rel_error);
    }
    println!("worst relative error {:.3e} (tolerance {:.0e})", report.worst(), TOLERANCE);
    Ok(report.check(TOLERANCE).is_ok())
}
