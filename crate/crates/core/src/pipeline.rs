//! The end-to-end stage graph over one run directory, and ablation sweeps.
//!
//! A run directory holds `config.toml` (the effective config) and one
//! subdirectory per stage: `pretrain/`, `warmup/<group>/`, `masks/`,
//! `adapt/`, plus `eval.*`, `masks_report.*` and `summary.json`. Each stage
//! directory is built under a temporary name and renamed into place with a
//! `stamp.json` hashing its inputs, so a rerun reuses every stage whose
//! inputs are unchanged and redoes the rest.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{eval_heldout, mask_stats, sweep_report, EvalReport, MaskReport, RunSummary, SweepTable};
use crate::config::RunConfig;
use crate::data::{make_corpus, Corpus, CorpusManifest, Split};
use crate::error::{Error, Result};
use crate::model::{ParamTree, SpeechModel};
use crate::pruning::{
    extract_mask, group_masks, language_masks, magnitude_scores, read_mask, write_mask, Group, Grouping,
    ImportanceTable, MaskScorer, Scope, Strategy, SubnetMask,
};
use crate::train::{
    adapt_s3net, config_digest, pretrain, warmup_language, Checkpoint, Stage, StageScorer, TrainContext,
};

type Ckpt = Checkpoint<f32>;

/// Generates the corpus described by `cfg` under `out`.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<CorpusManifest> {
    cfg.validate()?;
    let specs = cfg.language_specs()?;
    make_corpus(&specs, &cfg.data.corpus, out, cfg.data_seed())
}

/// Stages of [`cmd_pipeline`], in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineStage {
    Pretrain,
    Warmup,
    ExtractMasks,
    Adapt,
    Eval,
    Analyze,
}

impl PipelineStage {
    pub const ALL: [PipelineStage; 6] = [
        PipelineStage::Pretrain,
        PipelineStage::Warmup,
        PipelineStage::ExtractMasks,
        PipelineStage::Adapt,
        PipelineStage::Eval,
        PipelineStage::Analyze,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PipelineStage::Pretrain => "pretrain",
            PipelineStage::Warmup => "warmup",
            PipelineStage::ExtractMasks => "extract-masks",
            PipelineStage::Adapt => "adapt",
            PipelineStage::Eval => "eval",
            PipelineStage::Analyze => "analyze",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }
}

impl fmt::Display for PipelineStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn in_stage<T>(stage: PipelineStage, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        e => Error::Stage { stage: stage.to_string(), source: Box::new(e) },
    })
}

fn hash_json(v: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

const STAMP: &str = "stamp.json";

fn read_stamp(dir: &Path) -> Option<String> {
    let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.join(STAMP)).ok()?).ok()?;
    v.get("inputs")?.as_str().map(String::from)
}

fn is_current(dir: &Path, stamp: &str) -> bool {
    read_stamp(dir).as_deref() == Some(stamp)
}

/// Builds a stage directory under a temporary sibling, stamps it, and
/// renames it over `dir`.
fn build_stage<T>(dir: &Path, stamp: &str, f: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    let name = dir.file_name().and_then(|n| n.to_str()).ok_or_else(|| Error::invalid("bad stage directory"))?;
    let tmp = dir.with_file_name(format!(".{name}.partial"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let out = f(&tmp)?;
    let s = serde_json::to_vec_pretty(&serde_json::json!({ "inputs": stamp }))?;
    fs::write(tmp.join(STAMP), s).map_err(|e| Error::io(&tmp, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    Ok(out)
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Options of [`cmd_pipeline`].
#[derive(Clone, Debug, Default)]
pub struct PipelineOptions {
    /// Trust the artifacts of every earlier stage instead of checking them.
    pub skip_to: Option<PipelineStage>,
    /// Pre-training directory shared with other runs of the same seed.
    pub pretrain_dir: Option<PathBuf>,
}

/// One run directory opened against its corpus.
pub struct Run {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    pub corpus: Corpus,
    pub model: SpeechModel,
    corpus_digest: String,
    pretrain_dir: PathBuf,
    trust_before: Option<PipelineStage>,
}

impl Run {
    /// Validates `cfg`, opens the corpus and writes the effective config
    /// into `dir`.
    pub fn open(cfg: &RunConfig, corpus_dir: &Path, dir: &Path, opts: &PipelineOptions) -> Result<Self> {
        cfg.validate()?;
        let corpus = Corpus::open(corpus_dir)?;
        let m = corpus.manifest();
        if m.sample_rate != cfg.model.sample_rate {
            return Err(Error::validation("data.corpus.sample_rate", "corpus sample rate differs from model.sample_rate"));
        }
        if cfg.model.frames_for(m.window_samples).is_none_or(|t| t < 2) {
            return Err(Error::validation("data.corpus.window_samples", "corpus windows are too short for the model"));
        }
        for g in cfg.pruning.grouping_for(&corpus.languages())?.groups {
            if g.id.is_empty() || !g.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::validation("pruning.grouping", format!("group id '{}' must be [A-Za-z0-9_-]", g.id)));
            }
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join("config.toml"), &cfg.to_toml()?)?;
        Ok(Self {
            model: SpeechModel::new(cfg.model.clone())?,
            corpus_digest: m.digest()?,
            corpus,
            cfg: cfg.clone(),
            dir: dir.to_path_buf(),
            pretrain_dir: opts.pretrain_dir.clone().unwrap_or_else(|| dir.join("pretrain")),
            trust_before: opts.skip_to,
        })
    }

    fn ctx(&self) -> TrainContext<'_> {
        TrainContext {
            corpus: &self.corpus,
            model: &self.model,
            objective: &self.cfg.objective,
            sampling: self.cfg.sampling,
            seed: self.cfg.seed,
        }
    }

    fn trusted(&self, stage: PipelineStage) -> bool {
        self.trust_before.is_some_and(|s| stage < s)
    }

    fn load_trusted(&self, stage: PipelineStage, dir: &Path) -> Result<Option<Ckpt>> {
        if !self.trusted(stage) {
            return Ok(None);
        }
        if !Checkpoint::<f32>::exists(dir) {
            return Err(Error::Stage {
                stage: stage.to_string(),
                source: Box::new(Error::invalid(format!("skipped, but {} holds no checkpoint", dir.display()))),
            });
        }
        in_stage(stage, Checkpoint::load(dir)).map(Some)
    }

    pub fn grouping(&self) -> Result<Grouping> {
        self.cfg.pruning.grouping_for(&self.corpus.languages())
    }

    fn pretrain_stamp(&self) -> String {
        let c = &self.cfg;
        hash_json(&serde_json::json!({
            "trainer": config_digest(&c.model, &c.objective, &c.train.pretrain, &c.sampling, c.seed, &["pretrain"]),
            "corpus": self.corpus_digest,
        }))
    }

    /// Pre-trained checkpoint, trained unless already current.
    pub fn pretrain(&self) -> Result<Ckpt> {
        let stage = PipelineStage::Pretrain;
        if let Some(c) = self.load_trusted(stage, &self.pretrain_dir)? {
            return Ok(c);
        }
        let stamp = self.pretrain_stamp();
        if is_current(&self.pretrain_dir, &stamp) {
            return in_stage(stage, Checkpoint::load(&self.pretrain_dir));
        }
        in_stage(
            stage,
            build_stage(&self.pretrain_dir, &stamp, |tmp| {
                let ckpt = pretrain::<f32>(&self.ctx(), &self.cfg.train.pretrain, Some(&tmp.join("metrics.jsonl")))?;
                ckpt.save(tmp)?;
                Ok(ckpt)
            }),
        )
    }

    fn warmup_dir(&self, group: &Group) -> PathBuf {
        self.dir.join("warmup").join(&group.id)
    }

    fn warmup_stamp(&self, base: &Ckpt, group: &Group) -> String {
        let c = &self.cfg;
        hash_json(&serde_json::json!({
            "trainer": config_digest(&c.model, &c.objective, &c.train.warmup, &c.sampling, c.seed, &["warmup", &group.id]),
            "languages": group.languages,
            "base": base.params.digest(),
            "corpus": self.corpus_digest,
        }))
    }

    /// Parameters of `base` fine-tuned on the pooled data of `group`.
    pub fn warmup_group(&self, base: &Ckpt, group: &Group) -> Result<ParamTree<f32>> {
        let stage = PipelineStage::Warmup;
        let dir = self.warmup_dir(group);
        if let Some(c) = self.load_trusted(stage, &dir)? {
            return Ok(c.params);
        }
        let stamp = self.warmup_stamp(base, group);
        if is_current(&dir, &stamp) {
            return in_stage(stage, Checkpoint::<f32>::load(&dir).map(|c| c.params));
        }
        fs::create_dir_all(self.dir.join("warmup")).map_err(|e| Error::io(&self.dir, e))?;
        in_stage(
            stage,
            build_stage(&dir, &stamp, |tmp| {
                let params =
                    warmup_language(&self.ctx(), base, group, &self.cfg.train.warmup, Some(&tmp.join("metrics.jsonl")))?;
                let mut c = base.clone();
                c.params = params.clone();
                c.stage = Stage::Warmup;
                c.step = self.cfg.train.warmup.steps;
                c.global_step = base.global_step + c.step;
                c.config_digest = stamp.clone();
                c.save(tmp)?;
                Ok(params)
            }),
        )
    }

    /// Warms up every group, as mask extraction with LTH would.
    pub fn warmup(&self, base: &Ckpt) -> Result<()> {
        for g in &self.grouping()?.groups {
            self.warmup_group(base, g)?;
        }
        Ok(())
    }

    fn masks_stamp(&self, base: &Ckpt, grouping: &Grouping) -> String {
        let p = &self.cfg.pruning;
        let warm = (p.strategy == Strategy::Lth && p.prune_rate > 0.0)
            .then(|| grouping.groups.iter().map(|g| self.warmup_stamp(base, g)).collect::<Vec<_>>());
        hash_json(&serde_json::json!({
            "strategy": p.strategy,
            "scope": p.scope,
            "prune_rate": p.prune_rate,
            "taylor_batches": p.taylor_batches,
            "grouping": grouping,
            "seed": self.cfg.seed,
            "base": base.params.digest(),
            "warmup": warm,
            "objective": self.cfg.objective,
            "corpus": self.corpus_digest,
        }))
    }

    /// Per-group masks, extracted unless already current.
    pub fn extract_masks(&self, base: &Ckpt) -> Result<(Grouping, BTreeMap<String, SubnetMask>)> {
        let stage = PipelineStage::ExtractMasks;
        let dir = self.dir.join("masks");
        if self.trusted(stage) || is_current(&dir, &self.masks_stamp(base, &self.grouping()?)) {
            return in_stage(stage, read_masks(&dir));
        }
        let grouping = self.grouping()?;
        let stamp = self.masks_stamp(base, &grouping);
        let p = &self.cfg.pruning;
        let masks = if p.prune_rate == 0.0 {
            let scores = magnitude_scores(&base.params);
            grouping
                .groups
                .iter()
                .map(|g| Ok((g.id.clone(), extract_mask(&scores, 0.0, p.scope, p.strategy, g.id.clone(), Some(self.cfg.seed))?)))
                .collect::<Result<BTreeMap<_, _>>>()?
        } else {
            let mut scorer = RunScorer {
                run: self,
                inner: StageScorer {
                    ctx: &self.ctx(),
                    base,
                    warmup: self.cfg.train.warmup.clone(),
                    taylor_batches: p.taylor_batches,
                    metrics: None,
                },
            };
            let ids = self.corpus.language_ids();
            let r = group_masks(p.strategy, &grouping, &ids, &base.params, p.prune_rate, p.scope, self.cfg.seed, &mut scorer);
            match r {
                Err(e @ Error::Stage { .. }) => return Err(e),
                r => in_stage(stage, r)?,
            }
        };
        in_stage(
            stage,
            build_stage(&dir, &stamp, |tmp| {
                for (id, m) in &masks {
                    write_mask(&tmp.join(format!("{id}.mask")), m)?;
                }
                write_text(&tmp.join("grouping.json"), &serde_json::to_string_pretty(&grouping)?)?;
                Ok(())
            }),
        )?;
        Ok((grouping, masks))
    }

    fn adapt_stamp(&self, base: &Ckpt) -> Result<String> {
        let c = &self.cfg;
        Ok(hash_json(&serde_json::json!({
            "trainer": config_digest(&c.model, &c.objective, &c.train.adapt, &c.sampling, c.seed, &["adapt"]),
            "base": base.params.digest(),
            "masks": dir_digest(&self.dir.join("masks"))?,
            "corpus": self.corpus_digest,
        })))
    }

    /// Jointly adapted checkpoint, trained unless already current.
    pub fn adapt(&self, base: &Ckpt, grouping: &Grouping, masks: &BTreeMap<String, SubnetMask>) -> Result<Ckpt> {
        let stage = PipelineStage::Adapt;
        let dir = self.dir.join("adapt");
        if let Some(c) = self.load_trusted(stage, &dir)? {
            return Ok(c);
        }
        let stamp = in_stage(stage, self.adapt_stamp(base))?;
        if is_current(&dir, &stamp) {
            return in_stage(stage, Checkpoint::load(&dir));
        }
        let per_lang = in_stage(stage, language_masks(grouping, masks))?;
        in_stage(
            stage,
            build_stage(&dir, &stamp, |tmp| {
                let ckpt = adapt_s3net(&self.ctx(), base, per_lang, &self.cfg.train.adapt, Some(&tmp.join("metrics.jsonl")))?;
                ckpt.save(tmp)?;
                Ok(ckpt)
            }),
        )
    }

    /// Held-out test loss of `ckpt` through the per-language masks.
    pub fn eval(&self, ckpt: &Ckpt, masks: Option<&BTreeMap<String, SubnetMask>>) -> Result<EvalReport> {
        let r = in_stage(
            PipelineStage::Eval,
            eval_heldout(&self.model, &ckpt.params, masks, &self.corpus, Split::Test, &self.cfg.objective, &self.cfg.eval),
        )?;
        write_text(&self.dir.join("eval.json"), &serde_json::to_string_pretty(&r)?)?;
        write_text(&self.dir.join("eval.txt"), &r.to_text())?;
        Ok(r)
    }

    pub fn analyze(&self, per_lang: &BTreeMap<String, SubnetMask>) -> Result<MaskReport> {
        let r = in_stage(PipelineStage::Analyze, mask_stats(per_lang))?;
        write_text(&self.dir.join("masks_report.json"), &serde_json::to_string_pretty(&r)?)?;
        write_text(&self.dir.join("masks_report.txt"), &r.to_text())?;
        Ok(r)
    }

    /// Per-language masks from `masks/`.
    pub fn language_masks(&self) -> Result<BTreeMap<String, SubnetMask>> {
        let (g, m) = read_masks(&self.dir.join("masks"))?;
        language_masks(&g, &m)
    }

    pub fn corpus_digest(&self) -> &str {
        &self.corpus_digest
    }
}

/// Reads `grouping.json` and one `<group>.mask` per group.
pub fn read_masks(dir: &Path) -> Result<(Grouping, BTreeMap<String, SubnetMask>)> {
    let gp = dir.join("grouping.json");
    let text = fs::read(&gp).map_err(|e| Error::io(&gp, e))?;
    let grouping: Grouping = serde_json::from_slice(&text).map_err(|e| Error::format(&gp, e.to_string()))?;
    let mut masks = BTreeMap::new();
    for g in &grouping.groups {
        masks.insert(g.id.clone(), read_mask(&dir.join(format!("{}.mask", g.id)))?);
    }
    Ok((grouping, masks))
}

fn dir_digest(dir: &Path) -> Result<String> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().is_some_and(|n| n != STAMP))
        .collect();
    names.sort();
    let mut h = Sha256::new();
    for p in names {
        h.update(p.file_name().expect("listed").as_encoded_bytes());
        h.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

struct RunScorer<'a, 'b, 'c> {
    run: &'a Run,
    inner: StageScorer<'b, 'c, f32>,
}

impl MaskScorer<f32> for RunScorer<'_, '_, '_> {
    fn warmed_magnitude(&mut self, group: &Group) -> Result<ImportanceTable> {
        Ok(magnitude_scores(&self.run.warmup_group(self.inner.base, group)?))
    }

    fn taylor(&mut self, language: &str) -> Result<ImportanceTable> {
        self.inner.taylor(language)
    }
}

/// Runs every stage from `opts.skip_to` (or the start) into `run_dir`.
pub fn cmd_pipeline(cfg: &RunConfig, corpus_dir: &Path, run_dir: &Path, opts: &PipelineOptions) -> Result<RunSummary> {
    let run = Run::open(cfg, corpus_dir, run_dir, opts)?;
    let base = run.pretrain()?;
    let (grouping, masks) = run.extract_masks(&base)?;
    let adapted = run.adapt(&base, &grouping, &masks)?;
    let per_lang = language_masks(&grouping, &masks)?;
    let eval = run.eval(&adapted, Some(&per_lang))?;
    run.analyze(&per_lang)?;
    let summary = RunSummary {
        strategy: cfg.pruning.strategy,
        scope: cfg.pruning.scope,
        n_masks: grouping.len(),
        prune_rate: cfg.pruning.prune_rate,
        seed: cfg.seed,
        corpus_digest: run.corpus_digest.clone(),
        config_digest: cfg.digest()?,
        eval,
    };
    summary.save(run_dir)?;
    Ok(summary)
}

/// One cell of a sweep grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub name: String,
    pub strategy: Strategy,
    pub scope: Scope,
    pub prune_rate: f64,
    /// `None` keeps the base config's grouping.
    pub masks: Option<usize>,
    pub seed: u64,
}

impl SweepCell {
    pub fn config(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.seed = self.seed;
        c.pruning.strategy = self.strategy;
        c.pruning.scope = self.scope;
        c.pruning.prune_rate = self.prune_rate;
        if let Some(n) = self.masks {
            c.pruning.masks = Some(n);
            c.pruning.grouping = None;
        }
        c.sweep = Default::default();
        c
    }
}

fn or<T: Clone>(v: &[T], d: T) -> Vec<T> {
    if v.is_empty() {
        vec![d]
    } else {
        v.to_vec()
    }
}

/// Cartesian grid of `cfg.sweep`; empty axes take the base value.
pub fn sweep_grid(cfg: &RunConfig) -> Vec<SweepCell> {
    let s = &cfg.sweep;
    let strategies = or(&s.strategies, cfg.pruning.strategy);
    let scopes = or(&s.scopes, cfg.pruning.scope);
    let rates = or(&s.prune_rates, cfg.pruning.prune_rate);
    let masks: Vec<Option<usize>> =
        if s.masks.is_empty() { vec![cfg.pruning.masks] } else { s.masks.iter().map(|&n| Some(n)).collect() };
    let seeds = or(&s.seeds, cfg.seed);
    let mut out = Vec::new();
    for &seed in &seeds {
        for &strategy in &strategies {
            for &scope in &scopes {
                for &masks in &masks {
                    for &p in &rates {
                        let m = masks.map_or("base".to_string(), |n| n.to_string());
                        out.push(SweepCell {
                            name: format!("{strategy}-{scope}-m{m}-p{p:.2}-s{seed}"),
                            strategy,
                            scope,
                            prune_rate: p,
                            masks,
                            seed,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Optimizer steps the grid would take, counting shared pre-training once
/// per seed and Taylor batches as steps.
pub fn sweep_cost(cfg: &RunConfig, cells: &[SweepCell], languages: &[crate::data::LanguageInfo]) -> Result<u64> {
    let mut seeds: Vec<u64> = cells.iter().map(|c| c.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut total = seeds.len() as u64 * cfg.train.pretrain.steps;
    for c in cells {
        let cc = c.config(cfg);
        total += cc.train.adapt.steps;
        if c.prune_rate > 0.0 {
            match c.strategy {
                Strategy::Lth => total += cc.pruning.grouping_for(languages)?.len() as u64 * cc.train.warmup.steps,
                Strategy::Te => total += languages.len() as u64 * cc.pruning.taylor_batches as u64,
                Strategy::Random => {}
            }
        }
    }
    Ok(total)
}

/// Runs the grid of `cfg.sweep` under `out`, skipping finished cells, and
/// writes the comparison table. Pre-training is shared by cells of one seed.
pub fn cmd_sweep(cfg: &RunConfig, corpus_dir: &Path, out: &Path, jobs: usize) -> Result<SweepTable> {
    cfg.validate()?;
    let cells = sweep_grid(cfg);
    let corpus = Corpus::open(corpus_dir)?;
    let cost = sweep_cost(cfg, &cells, &corpus.languages())?;
    if let Some(max) = cfg.sweep.max_steps {
        if cost > max {
            return Err(Error::validation(
                "sweep.max_steps",
                format!("grid of {} runs needs an estimated {cost} optimizer steps, over the budget of {max}", cells.len()),
            ));
        }
    }
    drop(corpus);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("config.toml"), &cfg.to_toml()?)?;
    write_text(&out.join("grid.json"), &serde_json::to_string_pretty(&cells)?)?;
    let pre_dir = |seed: u64| out.join(format!("pretrain-s{seed}"));

    let mut seeds: Vec<u64> = cells.iter().map(|c| c.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let jobs = jobs.max(1);
    parallel(jobs, &seeds, |&seed| {
        let c = cells.iter().find(|c| c.seed == seed).expect("seed from cells").config(cfg);
        let opts = PipelineOptions { skip_to: None, pretrain_dir: Some(pre_dir(seed)) };
        let run = Run::open(&c, corpus_dir, &out.join(format!(".pretrain-s{seed}-run")), &opts)?;
        run.pretrain().map(|_| ())
    })?;
    parallel(jobs, &cells, |cell| {
        let dir = out.join(&cell.name);
        if RunSummary::load(&dir).is_ok_and(|s| cell.config(cfg).digest().is_ok_and(|d| d == s.config_digest)) {
            return Ok(());
        }
        let opts = PipelineOptions { skip_to: None, pretrain_dir: Some(pre_dir(cell.seed)) };
        cmd_pipeline(&cell.config(cfg), corpus_dir, &dir, &opts).map(|_| ())
    })?;
    let runs = cells
        .iter()
        .map(|c| Ok((c.name.clone(), RunSummary::load(&out.join(&c.name))?)))
        .collect::<Result<Vec<_>>>()?;
    let table = sweep_report(&runs)?;
    table.write(out)?;
    Ok(table)
}

/// Applies `f` to every item on up to `jobs` threads; the first error wins.
fn parallel<T: Sync>(jobs: usize, items: &[T], f: impl Fn(&T) -> Result<()> + Sync) -> Result<()> {
    let next = AtomicUsize::new(0);
    let errors = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                if let Err(e) = f(item) {
                    errors.lock().expect("no panics while locked").push((i, e));
                    break;
                }
            });
        }
    });
    let mut errors = errors.into_inner().expect("threads joined");
    errors.sort_by_key(|(i, _)| *i);
    match errors.into_iter().next() {
        Some((_, e)) => Err(e),
        None => Ok(()),
    }
}
