//! Synthetic multilingual corpus, PCM ingestion, and language sampling.

mod corpus;
mod sampler;
mod spec;
mod synth;
mod wav;

pub use corpus::{
    make_audio_corpus, make_corpus, AudioLanguage, BatchPlan, Corpus, CorpusConfig, CorpusManifest, LanguageEntry,
    ShardInfo, Source, Split, CORPUS_FORMAT, MANIFEST_FILE,
};
pub use sampler::{language_sampler, sampling_probs, LanguageInfo, LanguageSampler, SamplingPolicy};
pub use spec::{synthetic_family, FamilyConfig, Generator, LanguageSpec, SpectralState, Tier};
pub use synth::synth_utterance;
pub use wav::{read_pcm_wav, write_pcm_wav};
