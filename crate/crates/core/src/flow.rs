//! Flow data model and the token transforms that turn packet records into
//! fixed-length model inputs.
//!
//! A token encodes one packet as a direction-signed payload length:
//! `0` is padding, `1..=1500` are outbound lengths and `1501..=3000` are
//! inbound lengths. Lengths above 1500 bytes are clamped.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest payload length with its own token. Larger payloads are clamped.
pub const MAX_TOKEN_LEN: u16 = 1500;
/// Padding token.
pub const PAD: u16 = 0;
/// Number of distinct tokens, padding included.
pub const VOCAB_SIZE: usize = 2 * MAX_TOKEN_LEN as usize + 1;
/// Default unified flow sequence length.
pub const DEFAULT_SEQ_LEN: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Tcp,
    Udp,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Tcp => f.write_str("tcp"),
            Protocol::Udp => f.write_str("udp"),
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "tcp" | "6" => Ok(Protocol::Tcp),
            "udp" | "17" => Ok(Protocol::Udp),
            other => Err(format!("unknown protocol `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Outbound,
    Inbound,
}

impl Direction {
    pub fn flip(self) -> Self {
        match self {
            Direction::Outbound => Direction::Inbound,
            Direction::Inbound => Direction::Outbound,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::Outbound => f.write_str("out"),
            Direction::Inbound => f.write_str("in"),
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "out" | "outbound" | "o" | "+" => Ok(Direction::Outbound),
            "in" | "inbound" | "i" | "-" => Ok(Direction::Inbound),
            other => Err(format!("unknown direction `{other}`")),
        }
    }
}

/// One observed packet.
#[derive(Debug, Clone, PartialEq)]
pub struct PacketRecord {
    pub src_ip: String,
    pub src_port: u16,
    pub dst_ip: String,
    pub dst_port: u16,
    pub protocol: Protocol,
    pub timestamp: f64,
    pub direction: Direction,
    pub payload_len: u16,
}

impl PacketRecord {
    pub fn key(&self) -> FlowKey {
        FlowKey {
            src_ip: self.src_ip.clone(),
            src_port: self.src_port,
            dst_ip: self.dst_ip.clone(),
            dst_port: self.dst_port,
            protocol: self.protocol,
        }
    }
}

/// Transport 5-tuple. `src` is the flow initiator once a flow is assembled.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowKey {
    pub src_ip: String,
    pub src_port: u16,
    pub dst_ip: String,
    pub dst_port: u16,
    pub protocol: Protocol,
}

impl FlowKey {
    pub fn reversed(&self) -> FlowKey {
        FlowKey {
            src_ip: self.dst_ip.clone(),
            src_port: self.dst_port,
            dst_ip: self.src_ip.clone(),
            dst_port: self.src_port,
            protocol: self.protocol,
        }
    }

    /// Orientation-independent form: the lexicographically smaller endpoint
    /// comes first. Two packets of one flow share a canonical key.
    pub fn canonical(&self) -> FlowKey {
        let a = (&self.src_ip, self.src_port);
        let b = (&self.dst_ip, self.dst_port);
        if a <= b {
            self.clone()
        } else {
            self.reversed()
        }
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}:{} -> {}:{}",
            self.protocol, self.src_ip, self.src_port, self.dst_ip, self.dst_port
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    Tls,
    Tunnel,
}

impl fmt::Display for FlowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FlowKind::Tls => f.write_str("tls"),
            FlowKind::Tunnel => f.write_str("tun"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppLabel {
    pub id: usize,
    pub name: String,
}

/// Validates a label list: ids dense `0..C` in order and `C >= 2`.
pub fn check_labels(labels: &[AppLabel]) -> Result<()> {
    if labels.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 app labels, got {}",
            labels.len()
        )));
    }
    for (i, l) in labels.iter().enumerate() {
        if l.id != i {
            return Err(Error::Config(format!(
                "label ids must be dense and ordered: position {i} has id {}",
                l.id
            )));
        }
    }
    Ok(())
}

/// A flow as a padded token sequence of fixed length `tokens.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSequence {
    pub key: FlowKey,
    pub start_time: f64,
    pub tokens: Vec<u16>,
    pub true_len: usize,
    pub label: Option<usize>,
    pub kind: FlowKind,
}

impl FlowSequence {
    /// Builds a sequence from unpadded tokens, padding or truncating to `n`.
    pub fn from_tokens(
        key: FlowKey,
        start_time: f64,
        raw: &[u16],
        n: usize,
        label: Option<usize>,
        kind: FlowKind,
    ) -> Result<Self> {
        if let Some(&bad) = raw.iter().find(|&&t| t == PAD || t as usize >= VOCAB_SIZE) {
            return Err(Error::InvalidInput(format!(
                "token {bad} is not a packet token"
            )));
        }
        let (tokens, true_len) = pad_or_truncate(raw, n)?;
        Ok(FlowSequence {
            key,
            start_time,
            tokens,
            true_len,
            label,
            kind,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn valid_tokens(&self) -> &[u16] {
        &self.tokens[..self.true_len]
    }

    pub fn mask(&self) -> Vec<bool> {
        self.tokens.iter().map(|&t| t != PAD).collect()
    }

    /// Re-pads or re-truncates to a new sequence length.
    pub fn with_seq_len(&self, n: usize) -> Result<Self> {
        let (tokens, true_len) = pad_or_truncate(self.valid_tokens(), n)?;
        Ok(FlowSequence {
            tokens,
            true_len,
            ..self.clone()
        })
    }

    /// Checks the padding invariants.
    pub fn validate(&self) -> Result<()> {
        if self.true_len == 0 || self.true_len > self.tokens.len() {
            return Err(Error::InvalidInput(format!(
                "true_len {} outside [1, {}]",
                self.true_len,
                self.tokens.len()
            )));
        }
        let (head, tail) = self.tokens.split_at(self.true_len);
        if head.iter().any(|&t| t == PAD || t as usize >= VOCAB_SIZE) {
            return Err(Error::InvalidInput(
                "valid prefix holds a pad or out-of-vocabulary token".into(),
            ));
        }
        if tail.iter().any(|&t| t != PAD) {
            return Err(Error::InvalidInput("non-pad token after true_len".into()));
        }
        Ok(())
    }
}

/// A TLS flow and the tunnel flow that carried its data.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelFlowPair {
    pub tls: FlowSequence,
    pub tun: FlowSequence,
    pub label: usize,
    /// Name of the tunnel that produced `tun`, when known.
    pub tunnel: Option<String>,
}

impl ParallelFlowPair {
    pub fn new(
        mut tls: FlowSequence,
        mut tun: FlowSequence,
        label: usize,
        tunnel: Option<String>,
    ) -> Result<Self> {
        if tls.kind != FlowKind::Tls || tun.kind != FlowKind::Tunnel {
            return Err(Error::InvalidInput(format!(
                "pair expects (tls, tun) kinds, got ({}, {})",
                tls.kind, tun.kind
            )));
        }
        for (side, l) in [("tls", tls.label), ("tun", tun.label)] {
            if l.is_some_and(|l| l != label) {
                return Err(Error::InvalidInput(format!(
                    "{side} flow label {l:?} differs from pair label {label}"
                )));
            }
        }
        tls.label = Some(label);
        tun.label = Some(label);
        Ok(ParallelFlowPair {
            tls,
            tun,
            label,
            tunnel,
        })
    }

    pub fn with_seq_len(&self, n: usize) -> Result<Self> {
        Ok(ParallelFlowPair {
            tls: self.tls.with_seq_len(n)?,
            tun: self.tun.with_seq_len(n)?,
            label: self.label,
            tunnel: self.tunnel.clone(),
        })
    }
}

/// Maps one packet to its token.
pub fn tokenize(direction: Direction, payload_len: u16) -> Result<u16> {
    if payload_len == 0 {
        return Err(Error::InvalidInput(
            "zero-payload packets carry no token".into(),
        ));
    }
    let clamped = payload_len.min(MAX_TOKEN_LEN);
    Ok(match direction {
        Direction::Outbound => clamped,
        Direction::Inbound => MAX_TOKEN_LEN + clamped,
    })
}

/// Inverse of [`tokenize`] up to clamping. `None` for the pad token or
/// out-of-vocabulary values.
pub fn decode_token(token: u16) -> Option<(Direction, u16)> {
    match token {
        0 => None,
        t if t <= MAX_TOKEN_LEN => Some((Direction::Outbound, t)),
        t if (t as usize) < VOCAB_SIZE => Some((Direction::Inbound, t - MAX_TOKEN_LEN)),
        _ => None,
    }
}

/// Pads with [`PAD`] or truncates to exactly `n` tokens. Returns the
/// sequence and the number of real tokens kept.
pub fn pad_or_truncate(tokens: &[u16], n: usize) -> Result<(Vec<u16>, usize)> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput("empty token list".into()));
    }
    if n == 0 {
        return Err(Error::InvalidInput("sequence length must be >= 1".into()));
    }
    let keep = tokens.len().min(n);
    let mut out = Vec::with_capacity(n);
    out.extend_from_slice(&tokens[..keep]);
    out.resize(n, PAD);
    Ok((out, keep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key() -> FlowKey {
        FlowKey {
            src_ip: "10.0.0.2".into(),
            src_port: 50001,
            dst_ip: "93.184.216.34".into(),
            dst_port: 443,
            protocol: Protocol::Tcp,
        }
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize(Direction::Outbound, 517).unwrap(), 517);
        assert_eq!(tokenize(Direction::Inbound, 1440).unwrap(), 2940);
        assert_eq!(tokenize(Direction::Outbound, 9000).unwrap(), 1500);
        assert_eq!(tokenize(Direction::Inbound, 9000).unwrap(), 3000);
        assert!(tokenize(Direction::Outbound, 0).is_err());
    }

    #[test]
    fn pad_or_truncate_examples() {
        assert_eq!(
            pad_or_truncate(&[517, 1612], 4).unwrap(),
            (vec![517, 1612, 0, 0], 2)
        );
        assert_eq!(
            pad_or_truncate(&[1, 2, 3, 4, 5], 3).unwrap(),
            (vec![1, 2, 3], 3)
        );
        assert_eq!(pad_or_truncate(&[7], 1).unwrap(), (vec![7], 1));
        assert!(pad_or_truncate(&[], 4).is_err());
        assert!(pad_or_truncate(&[1], 0).is_err());
    }

    #[test]
    fn canonical_key_ignores_orientation() {
        let k = key();
        assert_eq!(k.canonical(), k.reversed().canonical());
    }

    #[test]
    fn flow_sequence_invariants() {
        let f =
            FlowSequence::from_tokens(key(), 1.0, &[517, 2940, 64], 5, Some(1), FlowKind::Tls)
                .unwrap();
        f.validate().unwrap();
        assert_eq!(f.tokens, vec![517, 2940, 64, 0, 0]);
        assert_eq!(f.mask(), vec![true, true, true, false, false]);
        let g = f.with_seq_len(2).unwrap();
        assert_eq!(g.tokens, vec![517, 2940]);
        assert_eq!(g.true_len, 2);
        assert!(
            FlowSequence::from_tokens(key(), 0.0, &[0, 3], 4, None, FlowKind::Tls).is_err()
        );
    }

    #[test]
    fn pair_rejects_mismatched_kinds_and_labels() {
        let tls = FlowSequence::from_tokens(key(), 0.0, &[5], 2, Some(0), FlowKind::Tls).unwrap();
        let tun =
            FlowSequence::from_tokens(key(), 0.0, &[5], 2, None, FlowKind::Tunnel).unwrap();
        let p = ParallelFlowPair::new(tls.clone(), tun.clone(), 0, None).unwrap();
        assert_eq!(p.tun.label, Some(0));
        assert!(ParallelFlowPair::new(tun.clone(), tls.clone(), 0, None).is_err());
        assert!(ParallelFlowPair::new(tls, tun, 1, None).is_err());
    }

    proptest! {
        #[test]
        fn tokenize_roundtrip(out in any::<bool>(), len in 1u16..=u16::MAX) {
            let dir = if out { Direction::Outbound } else { Direction::Inbound };
            let t = tokenize(dir, len).unwrap();
            prop_assert!(t != PAD && (t as usize) < VOCAB_SIZE);
            prop_assert_eq!(decode_token(t), Some((dir, len.min(MAX_TOKEN_LEN))));
        }

        #[test]
        fn pad_or_truncate_idempotent(
            tokens in prop::collection::vec(1u16..3001, 1..40),
            n in 1usize..50,
        ) {
            let (once, kept) = pad_or_truncate(&tokens, n).unwrap();
            prop_assert_eq!(once.len(), n);
            prop_assert_eq!(kept, tokens.len().min(n));
            prop_assert_eq!(&once[..kept], &tokens[..kept]);
            let (twice, kept2) = pad_or_truncate(&once[..kept], n).unwrap();
            prop_assert_eq!(twice, once);
            prop_assert_eq!(kept2, kept);
        }
    }
}
