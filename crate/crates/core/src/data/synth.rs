use std::f64::consts::TAU;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, RngCore};
use rand_distr::Normal;

use super::spec::LanguageSpec;
use crate::error::{Error, Result};

/// Synthesizes `samples` samples of `spec` at `sample_rate`.
///
/// A Markov chain over the language's spectral states emits segments of
/// random length; each segment is the sum of the state's tones plus white
/// noise. Tone phases are tracked per tone slot, so a state that lasts
/// across segments stays phase-continuous.
pub fn synth_utterance(spec: &LanguageSpec, sample_rate: u32, samples: usize, rng: &mut dyn RngCore) -> Result<Vec<f32>> {
    if samples == 0 {
        return Err(Error::invalid("utterance length must be positive"));
    }
    let g = &spec.generator;
    let sr = sample_rate as f64;
    let rows = g
        .transitions
        .iter()
        .map(WeightedIndex::new)
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::validation(format!("languages.{}.generator.transitions", spec.id), e.to_string()))?;
    let noise = (g.noise > 0.0).then(|| Normal::new(0.0, g.noise).expect("finite std"));
    let max_tones = g.states.iter().map(|s| s.freqs.len()).max().unwrap_or(0);
    let mut phase = vec![0.0f64; max_tones];
    let mut state = rng.gen_range(0..g.states.len());
    let mut out = Vec::with_capacity(samples);
    let [lo, hi] = g.segment_ms;
    while out.len() < samples {
        let ms = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let len = ((ms * sr / 1000.0).round() as usize).max(1).min(samples - out.len());
        let s = &g.states[state];
        for _ in 0..len {
            let mut x = 0.0;
            for (k, (f, a)) in s.freqs.iter().zip(&s.amps).enumerate() {
                x += a * phase[k].sin();
                phase[k] = (phase[k] + TAU * f / sr) % TAU;
            }
            if let Some(n) = &noise {
                x += n.sample(rng);
            }
            out.push(x as f32);
        }
        state = rows[state].sample(rng);
    }
    Ok(out)
}
