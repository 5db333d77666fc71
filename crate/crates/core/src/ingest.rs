//! Flow reassembly and TLS/tunnel flow correlation.
//!
//! Correlation pairs a TLS flow with a tunnel flow when the tunnel client's
//! socket mapping table holds `(tls.src_port, tun.src_port)` and the two flow
//! start times differ by at most `epsilon`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{
    tokenize, Direction, FlowKey, FlowKind, FlowSequence, PacketRecord, ParallelFlowPair,
    DEFAULT_SEQ_LEN,
};
use crate::formats;

/// Default start-time threshold in seconds.
pub const DEFAULT_EPSILON: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappingEntry {
    /// Source port of the app's connection to the tunnel client.
    pub inbound: u16,
    /// Source port of the tunnel client's connection to the tunnel server.
    pub outbound: u16,
    pub created_at: f64,
}

/// The tunnel client's socket mapping log, ordered by creation time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MappingTable {
    entries: Vec<MappingEntry>,
}

impl MappingTable {
    pub fn new(mut entries: Vec<MappingEntry>) -> Result<Self> {
        if let Some(e) = entries.iter().find(|e| e.inbound == 0 || e.outbound == 0) {
            return Err(Error::InvalidInput(format!(
                "mapping ports must be in [1, 65535], got ({}, {})",
                e.inbound, e.outbound
            )));
        }
        entries.sort_by(|a, b| a.created_at.total_cmp(&b.created_at));
        Ok(MappingTable { entries })
    }

    pub fn entries(&self) -> &[MappingEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn port_pairs(&self) -> HashSet<(u16, u16)> {
        self.entries.iter().map(|e| (e.inbound, e.outbound)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrelationConfig {
    pub epsilon: f64,
    pub n: usize,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        CorrelationConfig {
            epsilon: DEFAULT_EPSILON,
            n: DEFAULT_SEQ_LEN,
        }
    }
}

impl CorrelationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be a positive number, got {}",
                self.epsilon
            )));
        }
        if self.n == 0 {
            return Err(Error::Config("sequence length n must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Reassembly {
    pub flows: Vec<FlowSequence>,
    /// Flows dropped because every packet had an empty payload.
    pub dropped_empty: usize,
}

/// Default idle gap, in seconds, after which a reused 5-tuple starts a new flow.
pub const DEFAULT_IDLE_TIMEOUT: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReassemblyConfig {
    pub n: usize,
    /// Packets more than this many seconds after the previous packet of the
    /// same 5-tuple open a new flow. `None` keeps one flow per 5-tuple.
    pub idle_timeout: Option<f64>,
}

impl ReassemblyConfig {
    pub fn new(n: usize) -> Self {
        ReassemblyConfig {
            n,
            idle_timeout: Some(DEFAULT_IDLE_TIMEOUT),
        }
    }
}

struct PartialFlow {
    key: FlowKey,
    start: f64,
    last: f64,
    packets: Vec<(f64, Direction, u16)>,
}

impl PartialFlow {
    fn finish(
        mut self,
        cfg: &ReassemblyConfig,
        kind: FlowKind,
        label: Option<usize>,
        out: &mut Reassembly,
    ) -> Result<()> {
        if self.packets.is_empty() {
            out.dropped_empty += 1;
            return Ok(());
        }
        self.packets.sort_by(|a, b| a.0.total_cmp(&b.0));
        let raw = self
            .packets
            .iter()
            .map(|&(_, d, len)| tokenize(d, len))
            .collect::<Result<Vec<_>>>()?;
        out.flows.push(FlowSequence::from_tokens(
            self.key, self.start, &raw, cfg.n, label, kind,
        )?);
        Ok(())
    }
}

/// Groups packets into flows by 5-tuple and tokenizes each flow.
///
/// The first packet of a flow fixes its orientation: its sender becomes the
/// flow source and every packet it sends is outbound. Zero-payload packets
/// are dropped, and flows left without payload are counted in
/// `dropped_empty`. Output is ordered by `(start_time, key)`.
pub fn reassemble<I>(
    records: I,
    cfg: &ReassemblyConfig,
    kind: FlowKind,
    label: Option<usize>,
) -> Result<Reassembly>
where
    I: IntoIterator<Item = PacketRecord>,
{
    if cfg.n == 0 {
        return Err(Error::Config("sequence length n must be >= 1".into()));
    }
    let mut out = Reassembly::default();
    let mut open: HashMap<FlowKey, PartialFlow> = HashMap::new();
    for rec in records {
        let key = rec.key();
        let canon = key.canonical();
        let expired = open.get(&canon).is_some_and(|p| {
            cfg.idle_timeout
                .is_some_and(|limit| rec.timestamp - p.last > limit)
        });
        if expired {
            if let Some(done) = open.remove(&canon) {
                done.finish(cfg, kind, label, &mut out)?;
            }
        }
        let slot = open.entry(canon).or_insert_with(|| PartialFlow {
            key: key.clone(),
            start: rec.timestamp,
            last: rec.timestamp,
            packets: Vec::new(),
        });
        slot.last = slot.last.max(rec.timestamp);
        let dir = if key.src_ip == slot.key.src_ip && key.src_port == slot.key.src_port {
            Direction::Outbound
        } else {
            Direction::Inbound
        };
        if rec.payload_len > 0 {
            slot.packets.push((rec.timestamp, dir, rec.payload_len));
        }
    }
    for (_, p) in open {
        p.finish(cfg, kind, label, &mut out)?;
    }
    if out.dropped_empty > 0 {
        warn!("dropped {} flows without payload packets", out.dropped_empty);
    }
    out.flows.sort_by(order_flows);
    Ok(out)
}

/// Reassembles every `*.csv` packet file in `dir`, one app per file.
///
/// Files are taken in name order; the file stem becomes the label name and
/// its position the label id.
pub fn reassemble_dir(
    dir: &Path,
    cfg: &ReassemblyConfig,
    kind: FlowKind,
) -> Result<(Vec<String>, Reassembly)> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "csv") {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no packet files (*.csv) in {}",
            dir.display()
        )));
    }
    let mut names = Vec::with_capacity(files.len());
    let mut all = Reassembly::default();
    for (label, path) in files.iter().enumerate() {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        names.push(stem);
        let records = formats::read_packet_records(path)?;
        let part = reassemble(records, cfg, kind, Some(label))?;
        all.flows.extend(part.flows);
        all.dropped_empty += part.dropped_empty;
    }
    all.flows.sort_by(order_flows);
    Ok((names, all))
}

fn order_flows(a: &FlowSequence, b: &FlowSequence) -> Ordering {
    a.start_time
        .total_cmp(&b.start_time)
        .then_with(|| a.key.cmp(&b.key))
}

#[derive(Debug, Clone, Default)]
pub struct Correlation {
    pub pairs: Vec<ParallelFlowPair>,
    /// Indices into the input TLS list that found no partner.
    pub unmatched_tls: Vec<usize>,
    /// Indices into the input tunnel list that found no partner.
    pub unmatched_tun: Vec<usize>,
    /// Candidate pairs skipped because neither flow carried a label.
    pub unlabeled: usize,
}

impl Correlation {
    pub fn summary(&self) -> String {
        format!(
            "pairs={} unmatched_tls={} unmatched_tun={} unlabeled={}",
            self.pairs.len(),
            self.unmatched_tls.len(),
            self.unmatched_tun.len(),
            self.unlabeled
        )
    }
}

/// One admissible (tls, tun) match and its start-time gap.
#[derive(Debug, Clone, Copy)]
pub struct Candidate {
    pub tls: usize,
    pub tun: usize,
    pub gap: f64,
}

/// Lists every (tls, tun) combination allowed by the mapping table and the
/// time threshold. Label conflicts are excluded.
pub fn candidates(
    tls_flows: &[FlowSequence],
    tun_flows: &[FlowSequence],
    table: &MappingTable,
    epsilon: f64,
) -> Vec<Candidate> {
    let ports = table.port_pairs();
    let mut by_port: HashMap<u16, Vec<usize>> = HashMap::new();
    for (j, f) in tun_flows.iter().enumerate() {
        by_port.entry(f.key.src_port).or_default().push(j);
    }
    let mut outbound_of: BTreeMap<u16, Vec<u16>> = BTreeMap::new();
    for &(i, o) in &ports {
        outbound_of.entry(i).or_default().push(o);
    }
    let mut out = Vec::new();
    for (i, tls) in tls_flows.iter().enumerate() {
        let Some(outs) = outbound_of.get(&tls.key.src_port) else {
            continue;
        };
        for o in outs {
            for &j in by_port.get(o).map(Vec::as_slice).unwrap_or(&[]) {
                let tun = &tun_flows[j];
                let gap = (tls.start_time - tun.start_time).abs();
                let labels_agree = match (tls.label, tun.label) {
                    (Some(a), Some(b)) => a == b,
                    _ => true,
                };
                if gap <= epsilon && labels_agree {
                    out.push(Candidate { tls: i, tun: j, gap });
                }
            }
        }
    }
    out
}

/// Correlates TLS flows with tunnel flows into parallel pairs.
///
/// When several candidates compete for a flow, the smallest start-time gap
/// wins; exact ties go to the earlier TLS then tunnel start time, then to
/// the smaller flow key. Each flow joins at most one pair. The result does
/// not depend on input order.
pub fn correlate(
    tls_flows: &[FlowSequence],
    tun_flows: &[FlowSequence],
    table: &MappingTable,
    cfg: &CorrelationConfig,
) -> Result<Correlation> {
    cfg.validate()?;
    if let Some(f) = tls_flows.iter().find(|f| f.kind != FlowKind::Tls) {
        return Err(Error::InvalidInput(format!("flow {} is not a TLS flow", f.key)));
    }
    if let Some(f) = tun_flows.iter().find(|f| f.kind != FlowKind::Tunnel) {
        return Err(Error::InvalidInput(format!(
            "flow {} is not a tunnel flow",
            f.key
        )));
    }

    let mut cands = candidates(tls_flows, tun_flows, table, cfg.epsilon);
    cands.sort_by(|a, b| {
        let (ta, ua) = (&tls_flows[a.tls], &tun_flows[a.tun]);
        let (tb, ub) = (&tls_flows[b.tls], &tun_flows[b.tun]);
        a.gap
            .total_cmp(&b.gap)
            .then_with(|| ta.start_time.total_cmp(&tb.start_time))
            .then_with(|| ua.start_time.total_cmp(&ub.start_time))
            .then_with(|| ta.key.cmp(&tb.key))
            .then_with(|| ua.key.cmp(&ub.key))
    });

    let mut tls_used = vec![false; tls_flows.len()];
    let mut tun_used = vec![false; tun_flows.len()];
    let mut result = Correlation::default();
    let mut matched = Vec::new();
    for c in cands {
        if tls_used[c.tls] || tun_used[c.tun] {
            continue;
        }
        let (tls, tun) = (&tls_flows[c.tls], &tun_flows[c.tun]);
        let Some(label) = tls.label.or(tun.label) else {
            result.unlabeled += 1;
            continue;
        };
        tls_used[c.tls] = true;
        tun_used[c.tun] = true;
        matched.push((c.tls, ParallelFlowPair::new(tls.clone(), tun.clone(), label, None)?));
    }
    matched.sort_by(|a, b| order_flows(&a.1.tls, &b.1.tls));
    result.pairs = matched.into_iter().map(|(_, p)| p).collect();
    result.unmatched_tls = (0..tls_flows.len()).filter(|&i| !tls_used[i]).collect();
    result.unmatched_tun = (0..tun_flows.len()).filter(|&j| !tun_used[j]).collect();
    Ok(result)
}
