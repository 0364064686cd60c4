//! Run configuration: one TOML file holding every constant of a run.
//!
//! Every section is optional and falls back to the desk defaults; unknown
//! keys are rejected. A minimal file is just `seed = 1`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::EvalConfig;
use crate::data::{synthetic_family, CorpusConfig, FamilyConfig, LanguageInfo, LanguageSpec, SamplingPolicy};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::ObjectiveConfig;
use crate::pruning::{Grouping, Scope, Strategy};
use crate::train::{AdamConfig, LrSchedule, Stage, TrainConfig};

/// Where the languages come from: an explicit list, or a synthetic family
/// when the list is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub corpus: CorpusConfig,
    pub family: FamilyConfig,
    pub languages: Vec<LanguageSpec>,
    /// Seed of the generated audio; the run seed when absent.
    pub seed: Option<u64>,
    /// Corpus directory; relative paths are resolved against the working
    /// directory.
    pub path: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            family: FamilyConfig::default(),
            languages: Vec::new(),
            seed: None,
            path: PathBuf::from("corpus"),
        }
    }
}

/// Partial stage settings as written in the file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageFile {
    stage: Option<Stage>,
    steps: Option<u64>,
    batch_size: Option<usize>,
    lr: Option<LrSchedule>,
    adam: Option<AdamConfig>,
    grad_clip: Option<f64>,
}

impl StageFile {
    fn resolve(self, stage: Stage) -> Result<TrainConfig> {
        if let Some(s) = self.stage {
            if s != stage {
                return Err(Error::validation(format!("train.{stage}.stage"), format!("says '{s}'")));
            }
        }
        let d = TrainConfig::desk(stage);
        Ok(TrainConfig {
            stage,
            steps: self.steps.unwrap_or(d.steps),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            lr: self.lr.unwrap_or(d.lr),
            adam: self.adam.unwrap_or(d.adam),
            grad_clip: self.grad_clip.or(d.grad_clip),
        })
    }
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct StagesFile {
    pretrain: StageFile,
    warmup: StageFile,
    adapt: StageFile,
}

/// Settings of the three training stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StagesFile")]
pub struct StagesConfig {
    pub pretrain: TrainConfig,
    pub warmup: TrainConfig,
    pub adapt: TrainConfig,
}

impl TryFrom<StagesFile> for StagesConfig {
    type Error = Error;

    fn try_from(f: StagesFile) -> Result<Self> {
        Ok(Self {
            pretrain: f.pretrain.resolve(Stage::Pretrain)?,
            warmup: f.warmup.resolve(Stage::Warmup)?,
            adapt: f.adapt.resolve(Stage::Adapt)?,
        })
    }
}

impl Default for StagesConfig {
    fn default() -> Self {
        Self {
            pretrain: TrainConfig::desk(Stage::Pretrain),
            warmup: TrainConfig::desk(Stage::Warmup),
            adapt: TrainConfig::desk(Stage::Adapt),
        }
    }
}

impl StagesConfig {
    pub fn get(&self, stage: Stage) -> &TrainConfig {
        match stage {
            Stage::Pretrain => &self.pretrain,
            Stage::Warmup => &self.warmup,
            Stage::Adapt => &self.adapt,
        }
    }
}

/// Sub-network extraction settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruningConfig {
    pub strategy: Strategy,
    pub scope: Scope,
    pub prune_rate: f64,
    /// Number of masks (1, #languages, or #high + 1); one per language when
    /// neither this nor `grouping` is set.
    pub masks: Option<usize>,
    pub grouping: Option<Grouping>,
    /// Batches averaged per Taylor importance table.
    pub taylor_batches: usize,
}

impl Default for PruningConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Lth,
            scope: Scope::Layerwise,
            prune_rate: 0.4,
            masks: None,
            grouping: None,
            taylor_batches: 8,
        }
    }
}

impl PruningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.prune_rate) {
            return Err(Error::validation("pruning.prune_rate", "must lie in [0, 1)"));
        }
        if self.masks.is_some() && self.grouping.is_some() {
            return Err(Error::validation("pruning.masks", "set either masks or grouping, not both"));
        }
        if self.masks == Some(0) {
            return Err(Error::validation("pruning.masks", "must be >= 1"));
        }
        if self.taylor_batches == 0 {
            return Err(Error::validation("pruning.taylor_batches", "must be >= 1"));
        }
        Ok(())
    }

    pub fn grouping_for(&self, languages: &[LanguageInfo]) -> Result<Grouping> {
        let ids: Vec<String> = languages.iter().map(|l| l.id.clone()).collect();
        let g = match (&self.grouping, self.masks) {
            (Some(g), _) => g.clone(),
            (None, Some(n)) => Grouping::with_count(n, languages)?,
            (None, None) => Grouping::individual(&ids),
        };
        g.validate(&ids)?;
        Ok(g)
    }
}

/// Grid of an ablation sweep. Empty axes fall back to the base config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub strategies: Vec<Strategy>,
    pub scopes: Vec<Scope>,
    pub prune_rates: Vec<f64>,
    pub masks: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Refuse grids whose total optimizer steps exceed this.
    pub max_steps: Option<u64>,
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub sampling: SamplingPolicy,
    #[serde(default)]
    pub train: StagesConfig,
    #[serde(default)]
    pub pruning: PruningConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl RunConfig {
    /// Desk defaults with the given seed.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            model: ModelConfig::desk(),
            data: DataConfig::default(),
            objective: ObjectiveConfig::default(),
            sampling: SamplingPolicy::default(),
            train: StagesConfig::default(),
            pruning: PruningConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }

    /// Parses and validates.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e.span().map_or("config".to_string(), |s| format!("config (bytes {}..{})", s.start, s.end));
            Error::validation(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let c = &self.data.corpus;
        c.validate()?;
        if c.sample_rate != self.model.sample_rate {
            return Err(Error::validation("data.corpus.sample_rate", "must equal model.sample_rate"));
        }
        if self.model.frames_for(c.window_samples).is_none_or(|t| t < 2) {
            return Err(Error::validation("data.corpus.window_samples", "too short for the model's encoder"));
        }
        if self.data.languages.is_empty() {
            self.data.family.validate()?;
        } else {
            for l in &self.data.languages {
                l.validate(c.sample_rate)?;
            }
            let mut ids: Vec<&str> = self.data.languages.iter().map(|l| l.id.as_str()).collect();
            ids.sort_unstable();
            if ids.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::validation("data.languages", "duplicate language id"));
            }
        }
        self.objective.validate()?;
        self.sampling.validate()?;
        for s in [Stage::Pretrain, Stage::Warmup, Stage::Adapt] {
            self.train.get(s).validate()?;
        }
        self.pruning.validate()?;
        if self.eval.batch_size == 0 {
            return Err(Error::validation("eval.batch_size", "must be >= 1"));
        }
        if self.sweep.prune_rates.iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(Error::validation("sweep.prune_rates", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// The languages of the corpus this config generates.
    pub fn language_specs(&self) -> Result<Vec<LanguageSpec>> {
        if self.data.languages.is_empty() {
            synthetic_family(&self.data.family, self.data.corpus.sample_rate, self.data_seed())
        } else {
            Ok(self.data.languages.clone())
        }
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    /// The config with defaults resolved, as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::invalid(format!("cannot serialize config: {e}")))
    }

    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}
