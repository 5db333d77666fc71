//! Synthetic parallel traffic: app models, tunnel re-encapsulation and
//! corpus generation.

pub mod apps;
pub mod corpus;
pub mod reencap;

pub use apps::{synthesize_apps, AppSynthConfig, AppTrafficModel};
pub use corpus::{generate_corpus, Corpus, CorpusConfig, CorpusFiles};
pub use reencap::{
    forward_fragments, fragment, parse_profiles, reencapsulate, render_profiles, stock_profiles,
    TunnelProfile,
};
