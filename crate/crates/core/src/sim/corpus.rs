//! Parallel corpus generation: app flows, their tunnel counterparts, the
//! tunnel client's mapping table and the ground-truth pairs.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{
    tokenize, AppLabel, Direction, FlowKey, FlowKind, FlowSequence, PacketRecord,
    ParallelFlowPair, Protocol, DEFAULT_SEQ_LEN,
};
use crate::formats::{self, DatasetHeader};
use crate::ingest::{MappingEntry, MappingTable};
use crate::sim::apps::AppTrafficModel;
use crate::sim::reencap::{forward_fragments, mix2, mix3, render_profiles, TunnelProfile};

const CLIENT_IP: &str = "10.0.0.2";
const FRESH_PORTS: u32 = 30_000;
const INBOUND_BASE: u32 = 1_024;
const OUTBOUND_BASE: u32 = 33_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub pairs_per_cell: usize,
    pub seed: u64,
    pub n: usize,
    /// Fraction of pairs that reuse the ports of an earlier, finished pair.
    pub port_reuse: f64,
    /// Minimum start-time distance between two pairs sharing ports.
    pub reuse_gap: f64,
    /// Start-time spacing between consecutive pairs.
    pub spacing: f64,
    /// Probability of a pure ACK after each inbound packet.
    pub ack_prob: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            pairs_per_cell: 200,
            seed: 7,
            n: DEFAULT_SEQ_LEN,
            port_reuse: 0.0,
            reuse_gap: 10.0,
            spacing: 1.5,
            ack_prob: 0.3,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairs_per_cell == 0 {
            return Err(Error::Config("pairs_per_cell must be >= 1".into()));
        }
        if self.n == 0 {
            return Err(Error::Config("n must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.port_reuse) || !(0.0..=1.0).contains(&self.ack_prob) {
            return Err(Error::Config(
                "port_reuse and ack_prob must lie in [0, 1]".into(),
            ));
        }
        if !(self.spacing > 0.0 && self.reuse_gap >= 0.0) {
            return Err(Error::Config("spacing must be > 0 and reuse_gap >= 0".into()));
        }
        Ok(())
    }
}

/// A generated corpus held in memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub labels: Vec<AppLabel>,
    pub profiles: Vec<TunnelProfile>,
    pub n: usize,
    /// Packet records per app, TLS side.
    pub tls_records: Vec<Vec<PacketRecord>>,
    /// Packet records per app, tunnel side.
    pub tun_records: Vec<Vec<PacketRecord>>,
    pub table: MappingTable,
    /// Ground truth, ordered by TLS start time.
    pub pairs: Vec<ParallelFlowPair>,
    /// Number of pairs whose ports were taken from an earlier pair.
    pub reused: usize,
}

/// Paths written by [`Corpus::write`].
#[derive(Debug, Clone)]
pub struct CorpusFiles {
    pub tls_dir: PathBuf,
    pub tun_dir: PathBuf,
    pub mapping: PathBuf,
    pub pairs: PathBuf,
    pub profiles: PathBuf,
}

impl CorpusFiles {
    pub fn in_dir(dir: &Path) -> Self {
        CorpusFiles {
            tls_dir: dir.join("tls"),
            tun_dir: dir.join("tun"),
            mapping: dir.join("mapping.csv"),
            pairs: dir.join("pairs.jsonl"),
            profiles: dir.join("profiles.toml"),
        }
    }
}

/// One simulated app flow before it is placed on the timeline.
struct CellFlow {
    label: usize,
    profile: usize,
    app_packets: Vec<(Direction, u16)>,
    tun_groups: Vec<Vec<(Direction, u16)>>,
    gaps: Vec<f64>,
    acks: Vec<bool>,
    offset: f64,
    server_host: u8,
}

fn simulate_cell(
    app: &AppTrafficModel,
    profile_idx: usize,
    profile: &TunnelProfile,
    cell: u64,
    cfg: &CorpusConfig,
) -> Result<Vec<CellFlow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix2(cfg.seed, cell));
    (0..cfg.pairs_per_cell)
        .map(|k| {
            let app_packets = app.sample(&mut rng);
            let tun_groups =
                forward_fragments(&app_packets, profile, mix3(cfg.seed, cell, k as u64))?;
            let gaps = (0..app_packets.len())
                .map(|_| rng.random_range(0.005..0.06))
                .collect();
            let acks = app_packets
                .iter()
                .map(|&(d, _)| d == Direction::Inbound && rng.random_bool(cfg.ack_prob))
                .collect();
            Ok(CellFlow {
                label: app.label.id,
                profile: profile_idx,
                app_packets,
                tun_groups,
                gaps,
                acks,
                offset: rng.random_range(0.0..cfg.spacing * 0.3),
                server_host: rng.random_range(1..=4),
            })
        })
        .collect()
}

fn packet(
    key: &FlowKey,
    t: f64,
    dir: Direction,
    payload_len: u16,
) -> PacketRecord {
    let (src_ip, src_port, dst_ip, dst_port) = match dir {
        Direction::Outbound => (&key.src_ip, key.src_port, &key.dst_ip, key.dst_port),
        Direction::Inbound => (&key.dst_ip, key.dst_port, &key.src_ip, key.src_port),
    };
    PacketRecord {
        src_ip: src_ip.clone(),
        src_port,
        dst_ip: dst_ip.clone(),
        dst_port,
        protocol: key.protocol,
        timestamp: t,
        direction: dir,
        payload_len,
    }
}

/// Generates a parallel corpus.
///
/// Every (app, profile) cell draws from its own generator derived from
/// `(seed, cell index)`, so the output does not depend on evaluation order.
/// Pairs are then interleaved round-robin across cells on one timeline.
pub fn generate_corpus(
    apps: &[AppTrafficModel],
    profiles: &[TunnelProfile],
    cfg: &CorpusConfig,
) -> Result<Corpus> {
    cfg.validate()?;
    if apps.len() < 2 {
        return Err(Error::Config(format!("need at least 2 apps, got {}", apps.len())));
    }
    if profiles.is_empty() {
        return Err(Error::Config("need at least one tunnel profile".into()));
    }
    for (i, app) in apps.iter().enumerate() {
        app.validate()?;
        if app.label.id != i {
            return Err(Error::Config(format!(
                "app `{}` has id {} at position {i}",
                app.label.name, app.label.id
            )));
        }
    }
    for p in profiles {
        p.validate()?;
    }

    let mut cells = Vec::with_capacity(apps.len() * profiles.len());
    for (a, app) in apps.iter().enumerate() {
        for (p, profile) in profiles.iter().enumerate() {
            let cell = (a * profiles.len() + p) as u64;
            cells.push(simulate_cell(app, p, profile, cell, cfg)?);
        }
    }

    let mut timeline_rng = ChaCha8Rng::seed_from_u64(mix2(cfg.seed, u64::MAX));
    let mut tls_records = vec![Vec::new(); apps.len()];
    let mut tun_records = vec![Vec::new(); apps.len()];
    let mut entries = Vec::new();
    let mut pairs = Vec::new();
    let mut reuse_pool: VecDeque<(f64, u16, u16)> = VecDeque::new();
    let mut reused = 0;
    let mut g = 0usize;

    for k in 0..cfg.pairs_per_cell {
        for cell in &cells {
            let f = &cell[k];
            let t0 = g as f64 * cfg.spacing + f.offset;
            let wants_reuse = cfg.port_reuse > 0.0 && timeline_rng.random_bool(cfg.port_reuse);
            let eligible = reuse_pool
                .front()
                .is_some_and(|&(t, _, _)| t0 - t >= cfg.reuse_gap);
            let (inbound, outbound) = if wants_reuse && eligible {
                let (_, i, o) = reuse_pool.pop_front().unwrap();
                reused += 1;
                (i, o)
            } else {
                let slot = g as u32 % FRESH_PORTS;
                ((INBOUND_BASE + slot) as u16, (OUTBOUND_BASE + slot) as u16)
            };
            reuse_pool.push_back((t0, inbound, outbound));
            g += 1;

            let profile = &profiles[f.profile];
            let tls_key = FlowKey {
                src_ip: CLIENT_IP.into(),
                src_port: inbound,
                dst_ip: format!("198.18.{}.{}", f.label, f.server_host),
                dst_port: 443,
                protocol: Protocol::Tcp,
            };
            let tun_key = FlowKey {
                src_ip: CLIENT_IP.into(),
                src_port: outbound,
                dst_ip: format!("203.0.113.{}", f.profile + 1),
                dst_port: profile.server_port,
                protocol: profile.protocol,
            };

            // TLS side: handshake opener, data packets, optional ACKs.
            let tls_out = &mut tls_records[f.label];
            tls_out.push(packet(&tls_key, t0, Direction::Outbound, 0));
            let mut t = t0;
            let mut times = Vec::with_capacity(f.app_packets.len());
            for ((&(dir, len), &gap), &ack) in f.app_packets.iter().zip(&f.gaps).zip(&f.acks) {
                t += gap;
                times.push(t);
                tls_out.push(packet(&tls_key, t, dir, len));
                if ack {
                    tls_out.push(packet(&tls_key, t + gap * 0.25, Direction::Outbound, 0));
                }
            }

            // Tunnel side: opener, control prefix, forwarded fragments.
            let start = t0 + profile.latency;
            let tun_out = &mut tun_records[f.label];
            tun_out.push(packet(&tun_key, start, Direction::Outbound, 0));
            let mut tt = start;
            for &(dir, len) in &profile.control_prefix {
                tt += 1e-3;
                tun_out.push(packet(&tun_key, tt, dir, len));
            }
            for (group, &sent) in f.tun_groups.iter().zip(&times) {
                for &(dir, len) in group {
                    tt = (sent + profile.latency).max(tt + 1e-4);
                    tun_out.push(packet(&tun_key, tt, dir, len));
                }
            }

            entries.push(MappingEntry {
                inbound,
                outbound,
                created_at: t0,
            });

            let tls_tokens = f
                .app_packets
                .iter()
                .map(|&(d, l)| tokenize(d, l))
                .collect::<Result<Vec<_>>>()?;
            let tun_tokens = profile
                .control_prefix
                .iter()
                .chain(f.tun_groups.iter().flatten())
                .map(|&(d, l)| tokenize(d, l))
                .collect::<Result<Vec<_>>>()?;
            let tls = FlowSequence::from_tokens(tls_key, t0, &tls_tokens, cfg.n, Some(f.label), FlowKind::Tls)?;
            let tun = FlowSequence::from_tokens(tun_key, start, &tun_tokens, cfg.n, Some(f.label), FlowKind::Tunnel)?;
            pairs.push(ParallelFlowPair::new(tls, tun, f.label, Some(profile.name.clone()))?);
        }
    }

    Ok(Corpus {
        labels: apps.iter().map(|a| a.label.clone()).collect(),
        profiles: profiles.to_vec(),
        n: cfg.n,
        tls_records,
        tun_records,
        table: MappingTable::new(entries)?,
        pairs,
        reused,
    })
}

impl Corpus {
    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            n: self.n,
            labels: self.labels.iter().map(|l| l.name.clone()).collect(),
        }
    }

    /// Ground-truth pairs produced through one tunnel profile.
    pub fn pairs_for(&self, profile: &str) -> Vec<ParallelFlowPair> {
        self.pairs
            .iter()
            .filter(|p| p.tunnel.as_deref() == Some(profile))
            .cloned()
            .collect()
    }

    /// Writes per-app packet files under `tls/` and `tun/`, the mapping
    /// table, the ground-truth pairs and the profiles used.
    pub fn write(&self, dir: &Path) -> Result<CorpusFiles> {
        let files = CorpusFiles::in_dir(dir);
        for (label, (tls, tun)) in self
            .labels
            .iter()
            .zip(self.tls_records.iter().zip(&self.tun_records))
        {
            let name = format!("{}.csv", label.name);
            formats::write_packet_records(&files.tls_dir.join(&name), tls)?;
            formats::write_packet_records(&files.tun_dir.join(&name), tun)?;
        }
        formats::write_mapping_table(&files.mapping, &self.table)?;
        formats::write_dataset(&files.pairs, &self.header(), &self.pairs)?;
        std::fs::write(&files.profiles, render_profiles(&self.profiles)?)
            .map_err(|e| Error::io(&files.profiles, e))?;
        Ok(files)
    }
}
