use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::Checkpoint;
use super::config::{Stage, TrainConfig};
use super::optim::AdamState;
use crate::autodiff::Bindings;
use crate::data::{Corpus, LanguageInfo, LanguageSampler, SamplingPolicy, Split};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamTree, SpeechModel};
use crate::objective::{LossGraph, Mode, ObjectiveConfig};
use crate::pruning::{apply_mask, SubnetMask};
use crate::rng::Stream;
use crate::scalar::Scalar;

/// Shared, read-only inputs of every training stage.
#[derive(Clone, Copy)]
pub struct TrainContext<'a> {
    pub corpus: &'a Corpus,
    pub model: &'a SpeechModel,
    pub objective: &'a ObjectiveConfig,
    pub sampling: SamplingPolicy,
    /// Root seed; every stream is derived from it by name.
    pub seed: u64,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub step: u64,
    pub global_step: u64,
    pub language: String,
    pub contrastive: f64,
    pub diversity: f64,
    pub total: f64,
    pub n_masked: usize,
    pub codebook_perplexity: Vec<f64>,
    pub lr: f64,
    pub temperature: f64,
    pub grad_norm: f64,
}

const STREAMS: [&str; 4] = ["language", "batch", "mask", "gumbel"];

/// Single-writer training loop over one stage.
pub struct Trainer<S: Scalar> {
    model: SpeechModel,
    objective: ObjectiveConfig,
    cfg: TrainConfig,
    params: ParamTree<S>,
    adam: AdamState<S>,
    streams: BTreeMap<String, Stream>,
    step: u64,
    global_step: u64,
    config_digest: String,
    sampler: LanguageSampler,
    masks: Option<BTreeMap<String, SubnetMask>>,
    log: Option<BufWriter<File>>,
    last: Option<StepRecord>,
}

/// Digest of everything that determines a stage's trajectory.
pub fn config_digest(
    model: &ModelConfig,
    objective: &ObjectiveConfig,
    cfg: &TrainConfig,
    sampling: &SamplingPolicy,
    seed: u64,
    scope: &[&str],
) -> String {
    let v = serde_json::json!({
        "model": model,
        "objective": objective,
        "train": cfg,
        "sampling": sampling,
        "seed": seed,
        "scope": scope,
    });
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

fn subset(ctx: &TrainContext<'_>, languages: Option<&[String]>) -> Result<Vec<LanguageInfo>> {
    let all = ctx.corpus.languages();
    match languages {
        None => Ok(all),
        Some(ids) => ids
            .iter()
            .map(|id| all.iter().find(|l| &l.id == id).cloned().ok_or_else(|| Error::UnknownLanguage(id.clone())))
            .collect(),
    }
}

impl<S: Scalar> Trainer<S> {
    /// Starts a stage from `params` with fresh optimizer moments and fresh
    /// streams named `scope` under the root seed. `languages` restricts the
    /// batches to a subset (warmup); `None` uses the whole corpus, and then
    /// the language stream is the unscoped `language`.
    pub fn start(
        ctx: &TrainContext<'_>,
        cfg: &TrainConfig,
        params: ParamTree<S>,
        global_step: u64,
        scope: &[&str],
        languages: Option<&[String]>,
    ) -> Result<Self> {
        cfg.validate()?;
        ctx.objective.validate()?;
        params.check_layout(ctx.model.config())?;
        let sampler = LanguageSampler::new(&subset(ctx, languages)?, ctx.sampling)?;
        let streams = STREAMS
            .iter()
            .map(|&n| {
                // stages over the whole corpus visit languages in the same order
                let mut path = if n == "language" && languages.is_none() { Vec::new() } else { scope.to_vec() };
                path.push(n);
                (n.to_string(), Stream::new(ctx.seed, &path))
            })
            .collect();
        Ok(Self {
            model: ctx.model.clone(),
            objective: *ctx.objective,
            cfg: cfg.clone(),
            adam: AdamState::new(&params),
            params,
            streams,
            step: 0,
            global_step,
            config_digest: config_digest(ctx.model.config(), ctx.objective, cfg, &ctx.sampling, ctx.seed, scope),
            sampler,
            masks: None,
            log: None,
            last: None,
        })
    }

    /// Continues a stage from a checkpoint written by [`Trainer::checkpoint`]
    /// with the same configuration.
    pub fn resume(
        ctx: &TrainContext<'_>,
        cfg: &TrainConfig,
        ckpt: Checkpoint<S>,
        scope: &[&str],
        languages: Option<&[String]>,
    ) -> Result<Self> {
        let mut t = Self::start(ctx, cfg, ckpt.params, ckpt.global_step - ckpt.step, scope, languages)?;
        if ckpt.stage != cfg.stage {
            return Err(Error::invalid(format!("checkpoint is from stage {}, not {}", ckpt.stage, cfg.stage)));
        }
        if ckpt.config_digest != t.config_digest {
            return Err(Error::invalid("checkpoint was written under a different configuration"));
        }
        for n in STREAMS {
            let state = ckpt.rng.get(n).ok_or_else(|| Error::invalid(format!("checkpoint lacks rng stream {n}")))?;
            let s = Stream::restore(state).ok_or_else(|| Error::invalid(format!("bad rng state for {n}")))?;
            t.streams.insert(n.to_string(), s);
        }
        t.adam = ckpt.adam;
        t.step = ckpt.step;
        t.global_step = ckpt.global_step;
        Ok(t)
    }

    /// Restricts every batch of language `l` to the sub-network `masks[l]`.
    /// Positions pruned by every mask are zeroed once here.
    pub fn with_masks(mut self, masks: BTreeMap<String, SubnetMask>) -> Result<Self> {
        for id in self.sampler.ids() {
            let m = masks.get(id).ok_or_else(|| Error::MaskMismatch(format!("no mask for language '{id}'")))?;
            m.check_aligned(&self.params)?;
        }
        let active: Vec<&SubnetMask> = self.sampler.ids().iter().map(|id| &masks[id]).collect();
        for name in self.params.prunable().into_iter().map(String::from).collect::<Vec<_>>() {
            let t = self.params.get_mut(&name).expect("listed").data_mut();
            for (i, v) in t.iter_mut().enumerate() {
                if active.iter().all(|m| !m.keeps(&name, i)) {
                    *v = S::zero();
                }
            }
        }
        self.masks = Some(masks);
        Ok(self)
    }

    /// Appends one JSON line per step to `path`.
    pub fn with_metrics(mut self, path: &Path) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        self.log = Some(BufWriter::new(f));
        Ok(self)
    }

    pub fn params(&self) -> &ParamTree<S> {
        &self.params
    }

    pub fn into_params(self) -> ParamTree<S> {
        self.params
    }

    pub fn adam(&self) -> &AdamState<S> {
        &self.adam
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.steps
    }

    fn stream(&mut self, name: &str) -> &mut Stream {
        self.streams.get_mut(name).expect("fixed stream set")
    }

    fn diverged(&self) -> Error {
        Error::Diverged {
            step: self.step,
            last_finite: self.last.as_ref().map_or("none".into(), |r| serde_json::to_string(r).unwrap_or_default()),
        }
    }

    /// One optimizer step on a freshly drawn monolingual batch.
    pub fn step(&mut self, corpus: &Corpus) -> Result<StepRecord> {
        if self.is_done() {
            return Err(Error::invalid(format!("stage {} already ran its {} steps", self.cfg.stage, self.cfg.steps)));
        }
        let li = {
            let sampler = self.sampler.clone();
            sampler.sample_index(self.stream("language"))
        };
        let language = self.sampler.ids()[li].clone();
        let lineage = format!("{}/step/{}", self.cfg.stage, self.step);
        let bs = self.cfg.batch_size;
        let plan = corpus.batch(&language, Split::Train, bs, lineage, self.stream("batch"))?;
        let batch: Vec<Vec<S>> =
            plan.windows.iter().map(|w| w.iter().map(|&x| S::lit(x as f64)).collect()).collect();
        let lr = self.cfg.lr.at(self.step, self.cfg.steps);
        let temperature = self.objective.temperature.at(self.global_step);

        let mut mask_rng = self.streams.remove("mask").expect("fixed stream set");
        let built = LossGraph::build(&self.model, &batch, &self.objective, temperature, Mode::Train, &mut mask_rng);
        self.streams.insert("mask".into(), mask_rng);
        let mut lg = built?;

        let mask = self.masks.as_ref().map(|m| &m[&language]);
        let mut gumbel = self.streams.remove("gumbel").expect("fixed stream set");
        let parts = match mask {
            Some(m) => apply_mask(&self.params, m).and_then(|view| lg.evaluate(&view, &mut gumbel)),
            None => lg.evaluate(&self.params as &dyn Bindings<S>, &mut gumbel),
        };
        self.streams.insert("gumbel".into(), gumbel);
        let parts = match parts {
            Err(Error::NonFinite { .. }) => return Err(self.diverged()),
            other => other?,
        };
        let mut grads = lg.gradients()?;
        if let Some(m) = mask {
            for (name, g) in grads.by_name.iter_mut() {
                if let Some(keep) = m.keep_bits(name) {
                    for (v, &k) in g.data_mut().iter_mut().zip(keep) {
                        if !k {
                            *v = S::zero();
                        }
                    }
                }
            }
        }
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(self.diverged());
        }
        if let Some(c) = self.cfg.grad_clip {
            let c = S::lit(c);
            if norm > c {
                let f = c / norm;
                for g in grads.by_name.values_mut() {
                    g.data_mut().iter_mut().for_each(|v| *v *= f);
                }
            }
        }
        self.adam.step(&mut self.params, &grads, lr, &self.cfg.adam, mask)?;
        let record = StepRecord {
            stage: self.cfg.stage,
            step: self.step,
            global_step: self.global_step,
            language,
            contrastive: parts.contrastive,
            diversity: parts.diversity,
            total: parts.total,
            n_masked: parts.n_masked,
            codebook_perplexity: parts.codebook_perplexity,
            lr,
            temperature,
            grad_norm: norm.as_f64(),
        };
        self.step += 1;
        self.global_step += 1;
        if let Some(log) = self.log.as_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| Error::io("metrics log", e))?;
        }
        self.last = Some(record.clone());
        Ok(record)
    }

    /// Runs the remaining steps of the stage.
    pub fn run(&mut self, corpus: &Corpus) -> Result<Vec<StepRecord>> {
        let mut out = Vec::with_capacity((self.cfg.steps - self.step) as usize);
        while !self.is_done() {
            out.push(self.step(corpus)?);
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint<S> {
        Checkpoint {
            params: self.params.clone(),
            adam: self.adam.clone(),
            rng: self.streams.iter().map(|(k, s)| (k.clone(), s.state())).collect(),
            step: self.step,
            global_step: self.global_step,
            config_digest: self.config_digest.clone(),
            stage: self.cfg.stage,
        }
    }
}
