use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::spec::{LanguageSpec, Tier};
use crate::error::{Error, Result};

/// What the sampler needs to know about a language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageInfo {
    pub id: String,
    /// Amount `n_l` (seconds at desk scale).
    pub amount: f64,
    pub tier: Tier,
}

impl From<&LanguageSpec> for LanguageInfo {
    fn from(s: &LanguageSpec) -> Self {
        Self { id: s.id.clone(), amount: s.amount, tier: s.tier }
    }
}

/// `p_l = (n_l / N)^alpha / sum_k (n_k / N)^alpha`.
pub fn sampling_probs(amounts: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if amounts.is_empty() {
        return Err(Error::invalid("no languages to sample from"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    if amounts.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
        return Err(Error::invalid("language amounts must be positive"));
    }
    let total: f64 = amounts.iter().sum();
    let w: Vec<f64> = amounts.iter().map(|n| (n / total).powf(alpha)).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}

fn draw(probs: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// One draw from the multinomial over `specs` with exponent `alpha`.
pub fn language_sampler<'a>(specs: &'a [LanguageSpec], alpha: f64, rng: &mut dyn RngCore) -> Result<&'a str> {
    let amounts: Vec<f64> = specs.iter().map(|s| s.amount).collect();
    let probs = sampling_probs(&amounts, alpha)?;
    Ok(&specs[draw(&probs, rng)].id)
}

/// How batches pick their language.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SamplingPolicy {
    /// One multinomial over all languages.
    Flat { alpha: f64 },
    /// Draw a tier with exponent `tier_alpha` over tier totals, then a
    /// language inside it with that tier's exponent.
    Tiered { tier_alpha: f64, high_alpha: f64, low_alpha: f64 },
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        SamplingPolicy::Tiered { tier_alpha: 0.5, high_alpha: 1.0, low_alpha: 0.5 }
    }
}

impl SamplingPolicy {
    pub fn validate(&self) -> Result<()> {
        let alphas = match *self {
            SamplingPolicy::Flat { alpha } => vec![alpha],
            SamplingPolicy::Tiered { tier_alpha, high_alpha, low_alpha } => vec![tier_alpha, high_alpha, low_alpha],
        };
        if alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::validation("sampling", "every alpha must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Stage {
    probs: Vec<f64>,
    members: Vec<usize>,
}

/// Stateless language sampler for a fixed set of languages.
#[derive(Clone, Debug)]
pub struct LanguageSampler {
    ids: Vec<String>,
    tiers: Vec<f64>,
    stages: Vec<Stage>,
}

impl LanguageSampler {
    pub fn new(specs: &[LanguageInfo], policy: SamplingPolicy) -> Result<Self> {
        policy.validate()?;
        let ids: Vec<String> = specs.iter().map(|s| s.id.clone()).collect();
        let amounts: Vec<f64> = specs.iter().map(|s| s.amount).collect();
        match policy {
            SamplingPolicy::Flat { alpha } => {
                let probs = sampling_probs(&amounts, alpha)?;
                Ok(Self { ids, tiers: vec![1.0], stages: vec![Stage { probs, members: (0..specs.len()).collect() }] })
            }
            SamplingPolicy::Tiered { tier_alpha, high_alpha, low_alpha } => {
                if specs.is_empty() {
                    return Err(Error::invalid("no languages to sample from"));
                }
                let mut tier_amounts = Vec::new();
                let mut stages = Vec::new();
                for (tier, alpha) in [(Tier::High, high_alpha), (Tier::Low, low_alpha)] {
                    let members: Vec<usize> = (0..specs.len()).filter(|&i| specs[i].tier == tier).collect();
                    if members.is_empty() {
                        continue;
                    }
                    let a: Vec<f64> = members.iter().map(|&i| amounts[i]).collect();
                    tier_amounts.push(a.iter().sum::<f64>());
                    stages.push(Stage { probs: sampling_probs(&a, alpha)?, members });
                }
                let tiers = sampling_probs(&tier_amounts, tier_alpha)?;
                Ok(Self { ids, tiers, stages })
            }
        }
    }

    pub fn from_specs(specs: &[LanguageSpec], policy: SamplingPolicy) -> Result<Self> {
        Self::new(&specs.iter().map(LanguageInfo::from).collect::<Vec<_>>(), policy)
    }

    /// Marginal probability of every language, in input order.
    pub fn probabilities(&self) -> Vec<(String, f64)> {
        let mut p = vec![0.0; self.ids.len()];
        for (t, stage) in self.tiers.iter().zip(&self.stages) {
            for (m, q) in stage.members.iter().zip(&stage.probs) {
                p[*m] += t * q;
            }
        }
        self.ids.iter().cloned().zip(p).collect()
    }

    /// Draws a language index. Tiered policies use two draws (tier, then
    /// language); a single-tier set uses one.
    pub fn sample_index(&self, rng: &mut dyn RngCore) -> usize {
        let stage = if self.stages.len() == 1 { &self.stages[0] } else { &self.stages[draw(&self.tiers, rng)] };
        stage.members[draw(&stage.probs, rng)]
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> &str {
        &self.ids[self.sample_index(rng)]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}
