#![allow(dead_code)]

use std::path::Path;

use s3net::data::{make_corpus, synthetic_family, Corpus, CorpusConfig, FamilyConfig, LanguageSpec};

pub fn family(n_high: usize, n_low: usize, high_s: f64, low_s: f64, seed: u64) -> Vec<LanguageSpec> {
    let fc = FamilyConfig {
        n_languages: n_high + n_low,
        n_high,
        high_amount: high_s,
        low_amount: low_s,
        ..FamilyConfig::default()
    };
    synthetic_family(&fc, 8000, seed).unwrap()
}

/// Generates and opens a synthetic corpus under `dir`.
pub fn corpus(dir: &Path, n_high: usize, n_low: usize, high_s: f64, low_s: f64, seed: u64) -> Corpus {
    make_corpus(&family(n_high, n_low, high_s, low_s, seed), &CorpusConfig::default(), dir, seed).unwrap();
    Corpus::open(dir).unwrap()
}
