use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Resource tier of a language.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    High,
    Low,
}

/// One spectral state: a bank of sinusoids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralState {
    /// Identifier shared across languages that use the same state.
    pub id: String,
    /// Tone frequencies in Hz.
    pub freqs: Vec<f64>,
    /// Tone amplitudes, aligned with `freqs`.
    pub amps: Vec<f64>,
}

/// Markov source over spectral states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generator {
    pub states: Vec<SpectralState>,
    /// Row-stochastic transition matrix over `states`.
    pub transitions: Vec<Vec<f64>>,
    /// Standard deviation of additive white Gaussian noise.
    pub noise: f64,
    /// Segment duration bounds in milliseconds, `[min, max]`.
    pub segment_ms: [f64; 2],
}

/// A synthetic language. `amount` is in seconds of audio at desk scale
/// (it plays the role of hours of data).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub id: String,
    pub amount: f64,
    pub tier: Tier,
    pub generator: Generator,
}

impl LanguageSpec {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let f = |s: &str| format!("languages.{}.{s}", self.id);
        if self.id.is_empty() || !self.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(Error::validation("languages.id", format!("'{}' must be non-empty [A-Za-z0-9_-]", self.id)));
        }
        if !(self.amount > 0.0 && self.amount.is_finite()) {
            return Err(Error::validation(f("amount"), "must be positive"));
        }
        let g = &self.generator;
        if g.states.is_empty() {
            return Err(Error::validation(f("generator.states"), "at least one state required"));
        }
        let nyquist = sample_rate as f64 / 2.0;
        for (i, s) in g.states.iter().enumerate() {
            if s.freqs.is_empty() || s.freqs.len() != s.amps.len() {
                return Err(Error::validation(
                    f(&format!("generator.states[{i}]")),
                    "freqs and amps must be non-empty and of equal length",
                ));
            }
            if let Some(bad) = s.freqs.iter().find(|&&hz| !(hz > 0.0 && hz < nyquist)) {
                return Err(Error::validation(
                    f(&format!("generator.states[{i}].freqs")),
                    format!("{bad} Hz is outside (0, {nyquist})"),
                ));
            }
            if s.amps.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
                return Err(Error::validation(f(&format!("generator.states[{i}].amps")), "must be finite and >= 0"));
            }
        }
        let n = g.states.len();
        if g.transitions.len() != n || g.transitions.iter().any(|r| r.len() != n) {
            return Err(Error::validation(f("generator.transitions"), format!("must be {n}x{n}")));
        }
        for (i, row) in g.transitions.iter().enumerate() {
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(Error::validation(f(&format!("generator.transitions[{i}]")), "entries must be >= 0"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::validation(f(&format!("generator.transitions[{i}]")), format!("row sums to {s}, not 1")));
            }
        }
        if !(g.noise >= 0.0 && g.noise.is_finite()) {
            return Err(Error::validation(f("generator.noise"), "must be >= 0"));
        }
        let [lo, hi] = g.segment_ms;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::validation(f("generator.segment_ms"), "need 0 < min <= max"));
        }
        Ok(())
    }
}

/// Parameters of [`synthetic_family`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FamilyConfig {
    pub n_languages: usize,
    pub n_high: usize,
    /// Seconds per high-resource language.
    pub high_amount: f64,
    /// Seconds per low-resource language.
    pub low_amount: f64,
    /// States used by each language.
    pub states_per_language: usize,
    /// States shared between neighbouring languages.
    pub shared_states: usize,
    pub noise: f64,
    pub segment_ms: [f64; 2],
    /// Probability of staying in the current state.
    pub self_loop: f64,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        Self {
            n_languages: 10,
            n_high: 8,
            high_amount: 240.0,
            low_amount: 60.0,
            states_per_language: 8,
            shared_states: 4,
            noise: 0.05,
            segment_ms: [40.0, 120.0],
            self_loop: 0.3,
        }
    }
}

impl FamilyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_languages == 0 || self.n_high > self.n_languages {
            return Err(Error::validation("family.n_high", "need 1 <= n_languages and n_high <= n_languages"));
        }
        if self.states_per_language == 0 || self.shared_states > self.states_per_language {
            return Err(Error::validation("family.shared_states", "must not exceed states_per_language"));
        }
        if !(self.high_amount > 0.0 && self.low_amount > 0.0) {
            return Err(Error::validation("family.high_amount", "amounts must be positive"));
        }
        if !(0.0..1.0).contains(&self.self_loop) {
            return Err(Error::validation("family.self_loop", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// A family of languages laid out on a ring of spectral states: language `i`
/// uses a contiguous run of `states_per_language` states starting at
/// `i * (states_per_language - shared_states)`, so neighbours share
/// `shared_states` states and distant languages share none.
pub fn synthetic_family(cfg: &FamilyConfig, sample_rate: u32, seed: u64) -> Result<Vec<LanguageSpec>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift = cfg.states_per_language - cfg.shared_states;
    let inventory_len = (shift * cfg.n_languages).max(cfg.states_per_language);
    let nyquist = sample_rate as f64 / 2.0;
    let (lo, hi) = (0.02 * nyquist, 0.9 * nyquist);
    let inventory: Vec<SpectralState> = (0..inventory_len)
        .map(|i| {
            let tones = rng.gen_range(1..=3);
            let freqs = (0..tones).map(|_| lo * (hi / lo).powf(rng.gen::<f64>())).collect();
            let amps = (0..tones).map(|_| rng.gen_range(0.1..0.4)).collect();
            SpectralState { id: format!("s{i:03}"), freqs, amps }
        })
        .collect();
    let mut out = Vec::with_capacity(cfg.n_languages);
    for l in 0..cfg.n_languages {
        let states: Vec<SpectralState> = (0..cfg.states_per_language)
            .map(|k| inventory[(l * shift + k) % inventory_len].clone())
            .collect();
        let n = states.len();
        let transitions = (0..n).map(|i| random_row(&mut rng, n, i, cfg.self_loop)).collect();
        let tier = if l < cfg.n_high { Tier::High } else { Tier::Low };
        out.push(LanguageSpec {
            id: format!("lang{l:02}"),
            amount: if tier == Tier::High { cfg.high_amount } else { cfg.low_amount },
            tier,
            generator: Generator { states, transitions, noise: cfg.noise, segment_ms: cfg.segment_ms },
        });
    }
    Ok(out)
}

/// A sparse random row: self loop plus mass on a few successors.
fn random_row(rng: &mut dyn RngCore, n: usize, i: usize, self_loop: f64) -> Vec<f64> {
    let mut row = vec![0.0; n];
    if n == 1 {
        row[0] = 1.0;
        return row;
    }
    let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
    others.shuffle(rng);
    let k = others.len().min(3);
    let weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = weights.iter().sum();
    for (j, w) in others[..k].iter().zip(&weights) {
        row[*j] = (1.0 - self_loop) * w / total;
    }
    row[i] = self_loop;
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= s);
    row
}
