//! The dual-branch decoupling network.
//!
//! Both branches share the token embedding, the reconstruction decoder and
//! the app head. Each branch owns a protocol-view encoder, an app-view
//! encoder and a protocol head. Inference on tunnel traffic reads only the
//! embedding, the tunnel app-view encoder and the app head.

pub mod checkpoint;
pub mod layers;
pub mod model;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowKind, DEFAULT_SEQ_LEN, VOCAB_SIZE};
pub use layers::{BiGru, BiLayer, GruDir, Linear, Packing};
pub use model::{
    bigru_encode, decode, embed, forward_pair, grl_backward, grl_forward, tunnel_features,
    BranchActivations, PairActivations,
};

/// Encoder and decoder depth.
pub const GRU_LAYERS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub vocab: usize,
    /// Embedding width.
    pub d: usize,
    /// GRU hidden size per direction.
    pub hidden: usize,
    pub n: usize,
    pub classes: usize,
    pub grl_lambda: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            vocab: VOCAB_SIZE,
            d: 128,
            hidden: 128,
            n: DEFAULT_SEQ_LEN,
            classes: 2,
            grl_lambda: 1.0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("net: {m}")));
        if self.vocab < 2 {
            return bad("vocab must be at least 2");
        }
        if self.d == 0 || self.hidden == 0 || self.n == 0 {
            return bad("d, hidden and n must be >= 1");
        }
        if self.classes < 2 {
            return bad("classes must be >= 2");
        }
        if !(self.grl_lambda > 0.0 && self.grl_lambda.is_finite()) {
            return bad("grl_lambda must be a positive finite number");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub enc_p: BiGru,
    pub enc_a: BiGru,
    pub proto_head: Linear,
}

impl Branch {
    fn init(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        Branch {
            enc_p: BiGru::init(cfg.d, cfg.hidden, GRU_LAYERS, rng),
            enc_a: BiGru::init(cfg.d, cfg.hidden, GRU_LAYERS, rng),
            proto_head: Linear::init(2 * cfg.hidden, cfg.classes, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Branch {
            enc_p: self.enc_p.zeros_like(),
            enc_a: self.enc_a.zeros_like(),
            proto_head: self.proto_head.zeros_like(),
        }
    }
}

/// Every trainable tensor. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// vocab × d
    pub emb: Array2<f64>,
    pub tls: Branch,
    pub tun: Branch,
    /// Consumes [Z_P; Z_A] per step (4H wide).
    pub dec: BiGru,
    /// 2H → d
    pub dec_out: Linear,
    /// 2H → C, shared by both branches
    pub app_head: Linear,
}

type Named<'a> = Vec<(String, &'a Array2<f64>)>;
type NamedMut<'a> = Vec<(String, &'a mut Array2<f64>)>;

fn gru_names(prefix: &str, g: &BiGru) -> Vec<String> {
    let mut out = Vec::new();
    for l in 0..g.layers.len() {
        for dir in ["fwd", "bwd"] {
            for t in ["wx", "urz", "uh", "b"] {
                out.push(format!("{prefix}.l{l}.{dir}.{t}"));
            }
        }
    }
    out
}

fn gru_refs<'a>(g: &'a BiGru, out: &mut Vec<&'a Array2<f64>>) {
    for l in &g.layers {
        for d in [&l.fwd, &l.bwd] {
            out.extend([&d.wx, &d.urz, &d.uh, &d.b]);
        }
    }
}

fn gru_muts<'a>(g: &'a mut BiGru, out: &mut Vec<&'a mut Array2<f64>>) {
    for l in &mut g.layers {
        for d in [&mut l.fwd, &mut l.bwd] {
            out.extend([&mut d.wx, &mut d.urz, &mut d.uh, &mut d.b]);
        }
    }
}

impl Params {
    /// Weights uniform in ±1/√fan_in, biases zero. The embedding acts on a
    /// one-hot vocabulary vector, so its fan-in is the vocabulary size.
    pub fn init(cfg: &NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = layers::uniform(cfg.vocab, cfg.d, 1.0 / (cfg.vocab as f64).sqrt(), &mut rng);
        let tls = Branch::init(cfg, &mut rng);
        let tun = Branch::init(cfg, &mut rng);
        let dec = BiGru::init(4 * cfg.hidden, cfg.hidden, GRU_LAYERS, &mut rng);
        let dec_out = Linear::init(2 * cfg.hidden, cfg.d, &mut rng);
        let app_head = Linear::init(2 * cfg.hidden, cfg.classes, &mut rng);
        Params {
            emb,
            tls,
            tun,
            dec,
            dec_out,
            app_head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Params {
            emb: Array2::zeros(self.emb.raw_dim()),
            tls: self.tls.zeros_like(),
            tun: self.tun.zeros_like(),
            dec: self.dec.zeros_like(),
            dec_out: self.dec_out.zeros_like(),
            app_head: self.app_head.zeros_like(),
        }
    }

    pub fn branch(&self, kind: FlowKind) -> &Branch {
        match kind {
            FlowKind::Tls => &self.tls,
            FlowKind::Tunnel => &self.tun,
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["emb".to_string()];
        for (p, b) in [("tls", &self.tls), ("tun", &self.tun)] {
            names.extend(gru_names(&format!("{p}.enc_p"), &b.enc_p));
            names.extend(gru_names(&format!("{p}.enc_a"), &b.enc_a));
            names.push(format!("{p}.proto_head.w"));
            names.push(format!("{p}.proto_head.b"));
        }
        names.extend(gru_names("dec", &self.dec));
        names.extend(["dec_out.w", "dec_out.b", "app_head.w", "app_head.b"].map(String::from));
        names
    }

    /// Tensors in a fixed order, paired with their names.
    pub fn tensors(&self) -> Named<'_> {
        let mut refs = vec![&self.emb];
        for b in [&self.tls, &self.tun] {
            gru_refs(&b.enc_p, &mut refs);
            gru_refs(&b.enc_a, &mut refs);
            refs.extend([&b.proto_head.w, &b.proto_head.b]);
        }
        gru_refs(&self.dec, &mut refs);
        refs.extend([&self.dec_out.w, &self.dec_out.b, &self.app_head.w, &self.app_head.b]);
        self.names().into_iter().zip(refs).collect()
    }

    pub fn tensors_mut(&mut self) -> NamedMut<'_> {
        let names = self.names();
        let mut refs = vec![&mut self.emb];
        for b in [&mut self.tls, &mut self.tun] {
            gru_muts(&mut b.enc_p, &mut refs);
            gru_muts(&mut b.enc_a, &mut refs);
            refs.extend([&mut b.proto_head.w, &mut b.proto_head.b]);
        }
        gru_muts(&mut self.dec, &mut refs);
        refs.extend([
            &mut self.dec_out.w,
            &mut self.dec_out.b,
            &mut self.app_head.w,
            &mut self.app_head.b,
        ]);
        names.into_iter().zip(refs).collect()
    }

    pub fn add_assign(&mut self, other: &Params) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Trainable parameters plus the bookkeeping needed to resume or audit.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: NetConfig,
    pub params: Params,
    /// Optimizer steps taken.
    pub step: u64,
    pub seed: u64,
}

impl ModelState {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(ModelState {
            params: Params::init(&config, seed),
            config,
            step: 0,
            seed,
        })
    }

    /// Checks that every tensor has the shape `config` implies.
    pub fn check_shapes(&self) -> Result<()> {
        let expected = Params::init(&self.config, 0);
        for ((name, a), (_, b)) in self.params.tensors().into_iter().zip(expected.tensors()) {
            if a.dim() != b.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, config implies {:?}",
                    a.dim(),
                    b.dim()
                )));
            }
        }
        Ok(())
    }
}
