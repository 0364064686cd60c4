use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::sampler::LanguageInfo;
use super::spec::{Generator, LanguageSpec, Tier};
use super::synth::synth_utterance;
use crate::error::{Error, Result};
use crate::rng::Stream;

pub const CORPUS_FORMAT: &str = "s3net-corpus-v1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Corpus layout parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub sample_rate: u32,
    /// Samples per stored window (one window is one utterance).
    pub window_samples: usize,
    pub valid_fraction: f64,
    pub test_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { sample_rate: 8000, window_samples: 4000, valid_fraction: 0.1, test_fraction: 0.1 }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.window_samples == 0 {
            return Err(Error::validation("corpus.window_samples", "sample rate and window must be positive"));
        }
        let f = self.valid_fraction + self.test_fraction;
        if !(self.valid_fraction > 0.0 && self.test_fraction > 0.0 && f < 1.0) {
            return Err(Error::validation("corpus.valid_fraction", "valid and test fractions must be positive and sum below 1"));
        }
        Ok(())
    }

    pub fn window_seconds(&self) -> f64 {
        self.window_samples as f64 / self.sample_rate as f64
    }

    fn split_counts(&self, total: usize) -> [usize; 3] {
        let valid = ((total as f64 * self.valid_fraction).round() as usize).max(1);
        let test = ((total as f64 * self.test_fraction).round() as usize).max(1);
        [total - valid - test, valid, test]
    }
}

/// Shard of one split: `windows * window_samples` little-endian f32 values.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardInfo {
    /// Path relative to the corpus root.
    pub file: String,
    pub windows: usize,
    pub sha256: String,
}

/// Where a language's audio came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Source {
    Synthetic { seed: u64, generator: Generator },
    Audio { files: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageEntry {
    pub id: String,
    pub tier: Tier,
    /// Requested amount `n_l` in seconds.
    pub amount: f64,
    /// Seconds actually stored over all splits.
    pub stored_seconds: f64,
    pub source: Source,
    pub splits: BTreeMap<Split, ShardInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub format: String,
    pub sample_rate: u32,
    pub window_samples: usize,
    pub languages: Vec<LanguageEntry>,
}

impl CorpusManifest {
    pub fn language_info(&self) -> Vec<LanguageInfo> {
        self.languages.iter().map(|l| LanguageInfo { id: l.id.clone(), amount: l.amount, tier: l.tier }).collect()
    }

    /// SHA-256 of the manifest file contents.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(manifest_bytes(self)?)))
    }
}

fn manifest_bytes(m: &CorpusManifest) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(m)?;
    v.push(b'\n');
    Ok(v)
}

fn write_shard(root: &Path, rel: &str, windows: &[Vec<f32>]) -> Result<ShardInfo> {
    let path = root.join(rel);
    let bytes: Vec<u8> = windows.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    Ok(ShardInfo { file: rel.to_string(), windows: windows.len(), sha256: hex::encode(Sha256::digest(&bytes)) })
}

fn write_manifest(root: &Path, m: &CorpusManifest) -> Result<()> {
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, manifest_bytes(m)?).map_err(|e| Error::io(&path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Generates a synthetic corpus under `out`: one directory per language with
/// `train.f32`, `valid.f32` and `test.f32` shards, plus `manifest.json`.
/// Every language and split draws from its own named stream under `seed`,
/// so regeneration is byte-identical. All specs are validated before
/// anything is written.
pub fn make_corpus(specs: &[LanguageSpec], cfg: &CorpusConfig, out: &Path, seed: u64) -> Result<CorpusManifest> {
    cfg.validate()?;
    if specs.is_empty() {
        return Err(Error::validation("languages", "at least one language required"));
    }
    let mut counts = Vec::with_capacity(specs.len());
    for (i, s) in specs.iter().enumerate() {
        s.validate(cfg.sample_rate)?;
        if specs[..i].iter().any(|o| o.id == s.id) {
            return Err(Error::validation("languages.id", format!("duplicate id '{}'", s.id)));
        }
        let total = (s.amount / cfg.window_seconds()).floor() as usize;
        if total < 3 {
            return Err(Error::validation(
                format!("languages.{}.amount", s.id),
                format!("{} s holds fewer than 3 windows of {} s", s.amount, cfg.window_seconds()),
            ));
        }
        counts.push(cfg.split_counts(total));
    }
    create_dir(out)?;
    let mut languages = Vec::with_capacity(specs.len());
    for (s, count) in specs.iter().zip(counts) {
        create_dir(&out.join(&s.id))?;
        let mut splits = BTreeMap::new();
        for (split, n) in Split::ALL.into_iter().zip(count) {
            let mut rng = Stream::new(seed, &["corpus", &s.id, split.as_str()]);
            let windows = (0..n)
                .map(|_| synth_utterance(s, cfg.sample_rate, cfg.window_samples, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let info = write_shard(out, &format!("{}/{}.f32", s.id, split.as_str()), &windows)?;
            splits.insert(split, info);
        }
        let stored: usize = count.iter().sum();
        languages.push(LanguageEntry {
            id: s.id.clone(),
            tier: s.tier,
            amount: s.amount,
            stored_seconds: stored as f64 * cfg.window_seconds(),
            source: Source::Synthetic { seed, generator: s.generator.clone() },
            splits,
        });
    }
    let manifest = CorpusManifest {
        format: CORPUS_FORMAT.into(),
        sample_rate: cfg.sample_rate,
        window_samples: cfg.window_samples,
        languages,
    };
    write_manifest(out, &manifest)?;
    Ok(manifest)
}

/// A language backed by PCM WAV files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AudioLanguage {
    pub id: String,
    pub tier: Tier,
    pub files: Vec<PathBuf>,
}

/// Builds a corpus from 16-bit mono PCM WAV files at `cfg.sample_rate`.
/// Each language's files are concatenated and cut into windows; the first
/// windows go to train, then valid, then test. `n_l` is the stored amount.
pub fn make_audio_corpus(langs: &[AudioLanguage], cfg: &CorpusConfig, out: &Path) -> Result<CorpusManifest> {
    cfg.validate()?;
    let mut prepared = Vec::with_capacity(langs.len());
    for l in langs {
        let mut signal = Vec::new();
        for f in &l.files {
            let (sr, mut x) = super::wav::read_pcm_wav(f)?;
            if sr != cfg.sample_rate {
                return Err(Error::format(f, format!("sample rate {sr} Hz, corpus expects {}", cfg.sample_rate)));
            }
            signal.append(&mut x);
        }
        let total = signal.len() / cfg.window_samples;
        if total < 3 {
            return Err(Error::validation(format!("languages.{}.files", l.id), "fewer than 3 windows of audio"));
        }
        let windows: Vec<Vec<f32>> = signal.chunks_exact(cfg.window_samples).map(<[f32]>::to_vec).collect();
        prepared.push((l, windows, cfg.split_counts(total)));
    }
    create_dir(out)?;
    let mut languages = Vec::with_capacity(langs.len());
    for (l, windows, count) in prepared {
        create_dir(&out.join(&l.id))?;
        let mut splits = BTreeMap::new();
        let mut start = 0;
        for (split, n) in Split::ALL.into_iter().zip(count) {
            let info = write_shard(out, &format!("{}/{}.f32", l.id, split.as_str()), &windows[start..start + n])?;
            splits.insert(split, info);
            start += n;
        }
        let seconds = windows.len() as f64 * cfg.window_seconds();
        languages.push(LanguageEntry {
            id: l.id.clone(),
            tier: l.tier,
            amount: seconds,
            stored_seconds: seconds,
            source: Source::Audio { files: l.files.iter().map(|p| p.display().to_string()).collect() },
            splits,
        });
    }
    let manifest = CorpusManifest {
        format: CORPUS_FORMAT.into(),
        sample_rate: cfg.sample_rate,
        window_samples: cfg.window_samples,
        languages,
    };
    write_manifest(out, &manifest)?;
    Ok(manifest)
}

/// A monolingual batch of windows.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub language: String,
    pub windows: Vec<Vec<f32>>,
    /// `(language, window index)` of every window.
    pub sources: Vec<(String, usize)>,
    /// Where the batch was drawn, e.g. `pretrain/step/17`.
    pub lineage: String,
}

impl BatchPlan {
    /// Errors unless every window comes from `language`.
    pub fn check_monolingual(&self) -> Result<()> {
        match self.sources.iter().find(|(l, _)| *l != self.language) {
            Some((l, i)) => Err(Error::invalid(format!(
                "batch for '{}' holds window {i} of '{l}'",
                self.language
            ))),
            None => Ok(()),
        }
    }
}

/// An opened corpus with all shards in memory.
#[derive(Clone, Debug)]
pub struct Corpus {
    root: PathBuf,
    manifest: CorpusManifest,
    shards: BTreeMap<(String, Split), Vec<f32>>,
}

impl Corpus {
    /// Opens `root`, checking shard sizes and hashes against the manifest.
    pub fn open(root: &Path) -> Result<Self> {
        let mpath = root.join(MANIFEST_FILE);
        let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: CorpusManifest =
            serde_json::from_slice(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        if manifest.format != CORPUS_FORMAT {
            return Err(Error::format(&mpath, format!("unsupported format '{}'", manifest.format)));
        }
        let mut shards = BTreeMap::new();
        for l in &manifest.languages {
            for (split, info) in &l.splits {
                let path = root.join(&info.file);
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                if bytes.len() != info.windows * manifest.window_samples * 4 {
                    return Err(Error::format(&path, format!("{} bytes, expected {}", bytes.len(), info.windows * manifest.window_samples * 4)));
                }
                if hex::encode(Sha256::digest(&bytes)) != info.sha256 {
                    return Err(Error::format(&path, "checksum mismatch"));
                }
                let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
                shards.insert((l.id.clone(), *split), data);
            }
        }
        Ok(Self { root: root.to_path_buf(), manifest, shards })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    pub fn languages(&self) -> Vec<LanguageInfo> {
        self.manifest.language_info()
    }

    pub fn language_ids(&self) -> Vec<String> {
        self.manifest.languages.iter().map(|l| l.id.clone()).collect()
    }

    pub fn tier(&self, language: &str) -> Result<Tier> {
        self.manifest
            .languages
            .iter()
            .find(|l| l.id == language)
            .map(|l| l.tier)
            .ok_or_else(|| Error::UnknownLanguage(language.into()))
    }

    fn shard(&self, language: &str, split: Split) -> Result<&[f32]> {
        self.shards
            .get(&(language.to_string(), split))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownLanguage(language.into()))
    }

    pub fn num_windows(&self, language: &str, split: Split) -> Result<usize> {
        Ok(self.shard(language, split)?.len() / self.manifest.window_samples)
    }

    pub fn window(&self, language: &str, split: Split, index: usize) -> Result<&[f32]> {
        let w = self.manifest.window_samples;
        let shard = self.shard(language, split)?;
        let len = shard.len() / w;
        if index >= len {
            return Err(Error::OutOfRange { index, len });
        }
        Ok(&shard[index * w..(index + 1) * w])
    }

    /// `size` windows of `language` drawn uniformly with replacement.
    pub fn batch(
        &self,
        language: &str,
        split: Split,
        size: usize,
        lineage: impl Into<String>,
        rng: &mut dyn RngCore,
    ) -> Result<BatchPlan> {
        let n = self.num_windows(language, split)?;
        if n == 0 {
            return Err(Error::invalid(format!("split {} of '{language}' is empty", split.as_str())));
        }
        let idx: Vec<usize> = (0..size).map(|_| rng.gen_range(0..n)).collect();
        let windows = idx.iter().map(|&i| self.window(language, split, i).map(<[f32]>::to_vec)).collect::<Result<_>>()?;
        let plan = BatchPlan {
            language: language.into(),
            windows,
            sources: idx.into_iter().map(|i| (language.to_string(), i)).collect(),
            lineage: lineage.into(),
        };
        plan.check_monolingual()?;
        Ok(plan)
    }
}
