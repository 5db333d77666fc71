//! Synthetic per-app traffic models.
//!
//! Each app emits a handshake drawn from a few app-specific templates,
//! followed by a body walked from a Markov chain over length states. Apps
//! draw their states and handshake lengths from shared pools, so classes
//! overlap but stay separable by their sequence structure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{AppLabel, Direction, MAX_TOKEN_LEN};
use crate::sim::reencap::mix2;

#[derive(Debug, Clone, PartialEq)]
pub struct AppTrafficModel {
    pub label: AppLabel,
    /// Handshake prefixes; one is picked per flow.
    pub templates: Vec<Vec<(Direction, u16)>>,
    /// Every emitted length is perturbed uniformly within `±jitter`.
    pub jitter: u16,
    /// Markov states as (direction, center length).
    pub states: Vec<(Direction, u16)>,
    pub initial: Vec<f64>,
    pub transitions: Vec<Vec<f64>>,
    /// Inclusive range of body packet counts.
    pub body_len: (usize, usize),
}

impl AppTrafficModel {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("app `{}`: {msg}", self.label.name)));
        if self.templates.is_empty() || self.templates.iter().any(Vec::is_empty) {
            return bad("templates must be non-empty");
        }
        if self.states.is_empty() {
            return bad("needs at least one Markov state");
        }
        let k = self.states.len();
        if self.initial.len() != k
            || self.transitions.len() != k
            || self.transitions.iter().any(|row| row.len() != k)
        {
            return bad("Markov chain shape does not match its states");
        }
        let stochastic =
            |row: &[f64]| row.iter().all(|&p| p >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        if !stochastic(&self.initial) || !self.transitions.iter().all(|r| stochastic(r)) {
            return bad("probability rows must be non-negative and sum to 1");
        }
        if self.body_len.0 > self.body_len.1 {
            return bad("body_len range is inverted");
        }
        let lens = self
            .templates
            .iter()
            .flatten()
            .chain(self.states.iter())
            .map(|&(_, l)| l);
        for l in lens {
            if l == 0 || l > MAX_TOKEN_LEN {
                return bad("lengths must lie in [1, 1500]");
            }
        }
        Ok(())
    }

    fn perturb(&self, len: u16, rng: &mut impl Rng) -> u16 {
        let j = self.jitter as i32;
        let noisy = len as i32 + if j > 0 { rng.random_range(-j..=j) } else { 0 };
        noisy.clamp(1, MAX_TOKEN_LEN as i32) as u16
    }

    /// Samples one flow as (direction, payload length) packets.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<(Direction, u16)> {
        let template = &self.templates[rng.random_range(0..self.templates.len())];
        let body = rng.random_range(self.body_len.0..=self.body_len.1);
        let mut out = Vec::with_capacity(template.len() + body);
        for &(dir, len) in template {
            out.push((dir, self.perturb(len, rng)));
        }
        let mut state = draw(&self.initial, rng);
        for _ in 0..body {
            let (dir, len) = self.states[state];
            out.push((dir, self.perturb(len, rng)));
            state = draw(&self.transitions[state], rng);
        }
        out
    }
}

fn draw(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Knobs for [`synthesize_apps`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppSynthConfig {
    /// Size of the shared pool of length states.
    pub state_pool: usize,
    pub states_per_app: usize,
    /// Nonzero successors per Markov state.
    pub fanout: usize,
    pub templates_per_app: usize,
    /// Distinct client-hello lengths shared by all apps.
    pub hello_variants: usize,
    pub jitter: u16,
    pub body_len: (usize, usize),
}

impl Default for AppSynthConfig {
    fn default() -> Self {
        AppSynthConfig {
            state_pool: 24,
            states_per_app: 6,
            fanout: 2,
            templates_per_app: 2,
            hello_variants: 4,
            jitter: 3,
            body_len: (6, 36),
        }
    }
}

impl AppSynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.states_per_app == 0 || self.states_per_app > self.state_pool {
            return Err(Error::Config(format!(
                "states_per_app {} must lie in [1, state_pool = {}]",
                self.states_per_app, self.state_pool
            )));
        }
        if self.fanout == 0 || self.fanout > self.states_per_app {
            return Err(Error::Config("fanout must lie in [1, states_per_app]".into()));
        }
        if self.templates_per_app == 0 || self.hello_variants == 0 {
            return Err(Error::Config(
                "templates_per_app and hello_variants must be >= 1".into(),
            ));
        }
        if self.body_len.0 > self.body_len.1 {
            return Err(Error::Config("body_len range is inverted".into()));
        }
        Ok(())
    }
}

/// Builds `count` app models, deterministic in `seed`. Apps are named
/// `app00`, `app01`, ... so lexical order matches label ids.
pub fn synthesize_apps(count: usize, seed: u64, cfg: &AppSynthConfig) -> Result<Vec<AppTrafficModel>> {
    cfg.validate()?;
    if count < 2 {
        return Err(Error::Config(format!("need at least 2 apps, got {count}")));
    }
    let mut pool_rng = ChaCha8Rng::seed_from_u64(mix2(seed, 0xA995));
    let pool: Vec<(Direction, u16)> = (0..cfg.state_pool)
        .map(|i| {
            // alternate directions; inbound states skew large, outbound small
            if i % 2 == 0 {
                (Direction::Outbound, pool_rng.random_range(40..=900))
            } else {
                (Direction::Inbound, pool_rng.random_range(60..=1500))
            }
        })
        .collect();
    let hellos: Vec<u16> = (0..cfg.hello_variants)
        .map(|_| pool_rng.random_range(240..=640))
        .collect();

    let width = count.to_string().len().max(2);
    let mut apps = Vec::with_capacity(count);
    for id in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(mix2(seed, id as u64 + 1));
        let mut picks: Vec<usize> = (0..cfg.state_pool).collect();
        for i in 0..cfg.states_per_app {
            let j = rng.random_range(i..picks.len());
            picks.swap(i, j);
        }
        let states: Vec<_> = picks[..cfg.states_per_app].iter().map(|&i| pool[i]).collect();
        let k = states.len();

        let initial = random_row(k, k.min(2), &mut rng);
        let transitions = (0..k).map(|_| random_row(k, cfg.fanout, &mut rng)).collect();

        let hello = hellos[rng.random_range(0..hellos.len())];
        let templates = (0..cfg.templates_per_app)
            .map(|_| {
                vec![
                    (Direction::Outbound, hello),
                    (Direction::Inbound, rng.random_range(1200..=1500)),
                    (Direction::Inbound, rng.random_range(200..=1500)),
                    (Direction::Outbound, rng.random_range(40..=160)),
                ]
            })
            .collect();

        let lo = rng.random_range(cfg.body_len.0..=cfg.body_len.1);
        let hi = rng.random_range(lo..=cfg.body_len.1);
        let app = AppTrafficModel {
            label: AppLabel {
                id,
                name: format!("app{id:0width$}"),
            },
            templates,
            jitter: cfg.jitter,
            states,
            initial,
            transitions,
            body_len: (lo, hi),
        };
        app.validate()?;
        apps.push(app);
    }
    Ok(apps)
}

/// A probability row over `k` entries with `support` nonzero cells.
fn random_row(k: usize, support: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..k).collect();
    for i in 0..support {
        let j = rng.random_range(i..k);
        idx.swap(i, j);
    }
    let weights: Vec<f64> = (0..support).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let mut row = vec![0.0; k];
    for (w, &i) in weights.iter().zip(&idx[..support]) {
        row[i] = w / total;
    }
    // absorb rounding so the row sums to 1 exactly enough for validation
    let drift = 1.0 - row.iter().sum::<f64>();
    row[idx[0]] += drift;
    row
}
