//! Contrastive pre-training objective: time masking, distractor sampling,
//! the cosine-similarity InfoNCE term and the codebook diversity term.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Gradients, Graph, GumbelNoise, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::model::{normalize_waveform, LatentSequence, SpeechModel};
use crate::scalar::Scalar;

/// Span masking: every step starts a span with probability `start_prob`;
/// spans cover `span` steps and are clipped to the sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSpec {
    pub start_prob: f64,
    pub span: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self { start_prob: 0.065, span: 10 }
    }
}

/// Gumbel temperature, decayed geometrically per step down to a floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
    pub decay: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self { start: 2.0, end: 0.5, decay: 0.9995 }
    }
}

impl TemperatureSchedule {
    pub fn at(&self, step: u64) -> f64 {
        (self.start * self.decay.powf(step as f64)).max(self.end)
    }
}

/// Constants of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub mask: MaskSpec,
    /// Distractors per masked step (`K`).
    pub num_distractors: usize,
    /// Similarity temperature `kappa`.
    pub kappa: f64,
    /// Diversity weight `lambda`.
    pub lambda: f64,
    pub temperature: TemperatureSchedule,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            mask: MaskSpec::default(),
            num_distractors: 10,
            kappa: 0.1,
            lambda: 0.1,
            temperature: TemperatureSchedule::default(),
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask.start_prob) {
            return Err(Error::validation("objective.mask.start_prob", "must lie in [0, 1]"));
        }
        if self.mask.span == 0 {
            return Err(Error::validation("objective.mask.span", "must be positive"));
        }
        if self.num_distractors == 0 {
            return Err(Error::validation("objective.num_distractors", "must be positive"));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::validation("objective.kappa", "must be positive"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::validation("objective.lambda", "must be non-negative"));
        }
        let t = &self.temperature;
        if !(t.start > 0.0 && t.end > 0.0 && t.decay > 0.0 && t.decay <= 1.0) {
            return Err(Error::validation("objective.temperature", "start/end must be positive, decay in (0, 1]"));
        }
        Ok(())
    }
}

/// Loss components of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub contrastive: f64,
    pub diversity: f64,
    pub total: f64,
    pub kappa: f64,
    pub lambda: f64,
    /// Masked steps that contributed a contrastive term.
    pub n_masked: usize,
    /// Utterances that contributed a contrastive term.
    pub n_utterances: usize,
    /// Perplexity `exp(H)` of the averaged usage, one per codebook.
    pub codebook_perplexity: Vec<f64>,
    /// Masked steps whose distractors had to be drawn with replacement.
    pub distractor_replacements: usize,
}

/// Sorted union of the masked spans for a sequence of `t` steps.
pub fn sample_time_mask(t: usize, spec: &MaskSpec, rng: &mut dyn RngCore) -> Result<Vec<usize>> {
    if t == 0 {
        return Err(Error::invalid("time mask requested for an empty sequence"));
    }
    let mut covered = vec![false; t];
    for start in 0..t {
        if rng.gen::<f64>() < spec.start_prob {
            for c in covered.iter_mut().skip(start).take(spec.span) {
                *c = true;
            }
        }
    }
    Ok(covered.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect())
}

/// Distractor indices for one masked step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Distractors {
    pub indices: Vec<usize>,
    /// Fewer than `K` candidates existed, so draws were with replacement.
    pub with_replacement: bool,
}

/// Draws `k` distractors uniformly from `masked \ {t}`: without replacement
/// when enough candidates exist, otherwise with replacement.
pub fn sample_distractors(masked: &[usize], t: usize, k: usize, rng: &mut dyn RngCore) -> Result<Distractors> {
    if !masked.contains(&t) {
        return Err(Error::invalid(format!("step {t} is not masked")));
    }
    let candidates: Vec<usize> = masked.iter().copied().filter(|&m| m != t).collect();
    if candidates.is_empty() {
        return Err(Error::NoDistractor(t));
    }
    if candidates.len() >= k {
        let picks = index::sample(rng, candidates.len(), k);
        Ok(Distractors { indices: picks.iter().map(|i| candidates[i]).collect(), with_replacement: false })
    } else {
        let indices = (0..k).map(|_| candidates[rng.gen_range(0..candidates.len())]).collect();
        Ok(Distractors { indices, with_replacement: true })
    }
}

/// Emits the mean InfoNCE loss over `terms` (masked step, distractors):
/// `-log softmax_0(sim(c_t, [q_t, q_d1, ..]) / kappa)` with cosine `sim`.
/// The positive target is part of the denominator.
pub fn contrastive_node<S: Scalar>(
    g: &mut Graph<S>,
    c: NodeId,
    q: NodeId,
    terms: &[(usize, Vec<usize>)],
    kappa: S,
) -> Result<NodeId> {
    let Some(width) = terms.first().map(|(_, d)| d.len() + 1) else {
        return Err(Error::invalid("contrastive loss needs at least one masked step"));
    };
    if terms.iter().any(|(_, d)| d.len() + 1 != width) {
        return Err(Error::invalid("all masked steps need the same number of distractors"));
    }
    let mut ci = Vec::with_capacity(terms.len() * width);
    let mut qi = Vec::with_capacity(terms.len() * width);
    for (t, ds) in terms {
        ci.extend(std::iter::repeat(*t).take(width));
        qi.push(*t);
        qi.extend_from_slice(ds);
    }
    let cs = g.gather_rows(c, &ci)?;
    let qs = g.gather_rows(q, &qi)?;
    let sims = g.cosine_rows(cs, qs)?;
    let logits = g.reshape(sims, &[terms.len(), width])?;
    let logits = g.scale(logits, S::one() / kappa);
    let lse = g.logsumexp(logits)?;
    let pos = g.column(logits, 0)?;
    let per = g.sub(lse, pos)?;
    Ok(g.mean(per))
}

/// `(1 / GV) * sum p ln p` over a flat `(G * V)` usage node.
pub fn diversity_node<S: Scalar>(g: &mut Graph<S>, usage: NodeId, codebooks: usize, entries: usize) -> NodeId {
    let plogp = g.xlogx(usage);
    let s = g.sum(plogp);
    g.scale(s, S::one() / S::from_usize_lossy(codebooks * entries))
}

/// Contrastive loss of given contexts and targets.
pub fn contrastive_loss<S: Scalar>(
    c: &LatentSequence<S>,
    q: &LatentSequence<S>,
    distractors: &BTreeMap<usize, Vec<usize>>,
    kappa: S,
) -> Result<S> {
    if !(kappa > S::zero()) {
        return Err(Error::invalid("kappa must be positive"));
    }
    let mut g = Graph::new();
    let cn = g.input("c", c.frames.shape())?;
    let qn = g.input("q", q.frames.shape())?;
    let terms: Vec<(usize, Vec<usize>)> = distractors.iter().map(|(k, v)| (*k, v.clone())).collect();
    let loss = contrastive_node(&mut g, cn, qn, &terms, kappa)?;
    g.set_output("loss", loss);
    let mut b = BTreeMap::new();
    b.insert("c".to_string(), c.frames.clone());
    b.insert("q".to_string(), q.frames.clone());
    g.forward(&b, &mut rand::rngs::mock::StepRng::new(0, 0))?["loss"].item()
}

/// Diversity term of a `(G, V)` usage table whose rows are distributions.
pub fn diversity_loss<S: Scalar>(usage: &Tensor<S>) -> Result<S> {
    let [gc, v] = usage.shape()[..] else {
        return Err(Error::invalid(format!("usage table must be (G, V), got {:?}", usage.shape())));
    };
    for r in 0..gc {
        let row = usage.row(r);
        if row.iter().any(|&p| p < S::zero()) {
            return Err(Error::invalid(format!("usage row {r} has a negative entry")));
        }
        let sum = row.iter().copied().sum::<S>().as_f64();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::invalid(format!("usage row {r} sums to {sum}, not 1")));
        }
    }
    let mut g = Graph::new();
    let u = g.input("usage", &[gc * v])?;
    let d = diversity_node(&mut g, u, gc, v);
    g.set_output("d", d);
    let mut b = BTreeMap::new();
    b.insert("usage".to_string(), usage.clone().reshape([gc * v])?);
    g.forward(&b, &mut rand::rngs::mock::StepRng::new(0, 0))?["d"].item()
}

/// Loss graph for one batch of equal-length waveforms.
pub struct LossGraph<S: Scalar> {
    graph: Graph<S>,
    inputs: BTreeMap<String, Tensor<S>>,
    total: NodeId,
    contrastive: NodeId,
    diversity: NodeId,
    usage: NodeId,
    n_masked: usize,
    n_utterances: usize,
    replacements: usize,
    codebooks: usize,
    entries: usize,
    kappa: f64,
    lambda: f64,
}

/// How the quantizer draws its selections.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    /// Noise-free argmax selections.
    Eval,
    /// Sampled noise but relaxed (soft) selections, so the loss is smooth in
    /// every parameter. Used for finite-difference checks.
    Relaxed,
}

impl<S: Scalar> LossGraph<S> {
    /// Builds the graph. Time masks and distractors are drawn here from
    /// `mask_rng`, utterance by utterance; Gumbel noise is drawn later, at
    /// evaluation.
    pub fn build(
        model: &SpeechModel,
        batch: &[Vec<S>],
        cfg: &ObjectiveConfig,
        temperature: f64,
        mode: Mode,
        mask_rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mcfg = model.config();
        let (gc, v) = (mcfg.codebooks, mcfg.entries);
        let (noise, hard) = match mode {
            Mode::Train => (GumbelNoise::Sampled, true),
            Mode::Eval => (GumbelNoise::Disabled, true),
            Mode::Relaxed => (GumbelNoise::Sampled, false),
        };
        let mut g = Graph::new();
        let mut inputs = BTreeMap::new();
        let mut closses = Vec::new();
        let mut usages = Vec::new();
        let (mut n_masked, mut replacements) = (0, 0);
        for (u, wave) in batch.iter().enumerate() {
            let name = format!("waveform{u}");
            let rf = mcfg.receptive_field();
            if wave.len() < rf {
                return Err(Error::InputTooShort { got: wave.len(), min: rf });
            }
            let w = g.input(&name, &[wave.len(), 1])?;
            inputs.insert(name, Tensor::new([wave.len(), 1], normalize_waveform(wave))?);
            let z = model.encoder_node(&mut g, w)?;
            let t = g.shape(z)[0];
            let masked = sample_time_mask(t, &cfg.mask, mask_rng)?;
            let mut terms = Vec::new();
            if masked.len() >= 2 {
                for &step in &masked {
                    let d = sample_distractors(&masked, step, cfg.num_distractors, mask_rng)?;
                    replacements += d.with_replacement as usize;
                    terms.push((step, d.indices));
                }
            }
            let qn = model.quantizer_node(&mut g, z, S::lit(temperature), noise, hard)?;
            usages.push(qn.usage);
            if !terms.is_empty() {
                let c = model.context_node(&mut g, z, &masked)?;
                n_masked += terms.len();
                closses.push(contrastive_node(&mut g, c, qn.q, &terms, S::lit(cfg.kappa))?);
            }
        }
        let contrastive = match closses.split_first() {
            None => g.constant(Tensor::scalar(S::zero())),
            Some((&first, rest)) => {
                let mut acc = first;
                for &c in rest {
                    acc = g.add(acc, c)?;
                }
                g.scale(acc, S::one() / S::from_usize_lossy(closses.len()))
            }
        };
        let mut usage = usages[0];
        for &u in &usages[1..] {
            usage = g.add(usage, u)?;
        }
        let usage = g.scale(usage, S::one() / S::from_usize_lossy(usages.len()));
        let diversity = diversity_node(&mut g, usage, gc, v);
        let weighted = g.scale(diversity, S::lit(cfg.lambda));
        let total = g.add(contrastive, weighted)?;
        Ok(Self {
            graph: g,
            inputs,
            total,
            contrastive,
            diversity,
            usage,
            n_masked,
            n_utterances: closses.len(),
            replacements,
            codebooks: gc,
            entries: v,
            kappa: cfg.kappa,
            lambda: cfg.lambda,
        })
    }

    /// Forward pass with `params`; Gumbel noise comes from `gumbel_rng`.
    pub fn evaluate(&mut self, params: &dyn Bindings<S>, gumbel_rng: &mut dyn RngCore) -> Result<LossParts> {
        self.graph.forward(&(&self.inputs, params), gumbel_rng)?;
        let val = |id: NodeId| -> Result<f64> { Ok(self.graph.value(id)?.item()?.as_f64()) };
        let usage = self.graph.value(self.usage)?;
        let codebook_perplexity = usage
            .data()
            .chunks(self.entries)
            .map(|row| {
                let h: f64 = row
                    .iter()
                    .map(|p| p.as_f64())
                    .filter(|&p| p > 0.0)
                    .map(|p| -p * p.ln())
                    .sum();
                h.exp()
            })
            .collect();
        Ok(LossParts {
            contrastive: val(self.contrastive)?,
            diversity: val(self.diversity)?,
            total: val(self.total)?,
            kappa: self.kappa,
            lambda: self.lambda,
            n_masked: self.n_masked,
            n_utterances: self.n_utterances,
            codebook_perplexity,
            distractor_replacements: self.replacements,
        })
    }

    /// Gradient of the total loss for every parameter used.
    pub fn gradients(&self) -> Result<Gradients<S>> {
        let mut grads = self.graph.backward(self.total, &Tensor::scalar(S::one()))?;
        let input_names: Vec<String> = self.inputs.keys().cloned().collect();
        for n in input_names {
            grads.by_name.remove(&n);
        }
        Ok(grads)
    }

    pub fn codebooks(&self) -> usize {
        self.codebooks
    }
}

/// Total loss of one batch.
pub fn total_loss<S: Scalar>(
    model: &SpeechModel,
    batch: &[Vec<S>],
    params: &dyn Bindings<S>,
    cfg: &ObjectiveConfig,
    temperature: f64,
    mask_rng: &mut dyn RngCore,
    gumbel_rng: &mut dyn RngCore,
) -> Result<LossParts> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    LossGraph::build(model, batch, cfg, temperature, Mode::Train, mask_rng)?.evaluate(params, gumbel_rng)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn mask_extremes() {
        let none = MaskSpec { start_prob: 0.0, span: 10 };
        assert!(sample_time_mask(50, &none, &mut rng(1)).unwrap().is_empty());
        let all = MaskSpec { start_prob: 1.0, span: 1 };
        assert_eq!(sample_time_mask(50, &all, &mut rng(1)).unwrap(), (0..50).collect::<Vec<_>>());
        assert!(sample_time_mask(0, &all, &mut rng(1)).is_err());
    }

    #[test]
    fn spans_are_clipped_to_the_sequence() {
        let spec = MaskSpec { start_prob: 1.0, span: 10 };
        assert_eq!(sample_time_mask(3, &spec, &mut rng(2)).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn forced_and_exhaustive_distractors() {
        let d = sample_distractors(&[3, 7], 3, 1, &mut rng(3)).unwrap();
        assert_eq!(d.indices, vec![7]);
        assert!(!d.with_replacement);

        let masked: Vec<usize> = (1..=11).collect();
        let mut d = sample_distractors(&masked, 5, 10, &mut rng(3)).unwrap();
        d.indices.sort_unstable();
        assert_eq!(d.indices, vec![1, 2, 3, 4, 6, 7, 8, 9, 10, 11]);

        let d = sample_distractors(&[2, 4, 6], 4, 5, &mut rng(3)).unwrap();
        assert!(d.with_replacement);
        assert_eq!(d.indices.len(), 5);
        assert!(d.indices.iter().all(|i| [2, 6].contains(i)));

        assert!(matches!(sample_distractors(&[4], 4, 1, &mut rng(3)), Err(Error::NoDistractor(4))));
        assert!(sample_distractors(&[1, 2], 3, 1, &mut rng(3)).is_err());
    }

    fn seq(rows: &[&[f64]]) -> LatentSequence<f64> {
        let d = rows[0].len();
        LatentSequence::new(Tensor::new([rows.len(), d], rows.concat()).unwrap()).unwrap()
    }

    #[test]
    fn contrastive_closed_forms() {
        // sim(c, q_pos) = 1, sim(c, q_neg) = 0
        let c = seq(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let q = seq(&[&[2.0, 0.0], &[0.0, 3.0]]);
        let d: BTreeMap<usize, Vec<usize>> = [(0, vec![1])].into();
        let l = contrastive_loss(&c, &q, &d, 0.1).unwrap();
        let expected = (1.0 + (-10.0f64).exp()).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 4.54e-5).abs() < 1e-7);

        // distractor identical to the positive
        let q2 = seq(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let l = contrastive_loss(&c, &q2, &d, 0.1).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);

        // equal similarities over 1 + K candidates
        let c3 = seq(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let q3 = seq(&[&[0.0, 1.0], &[0.0, 2.0], &[0.0, 0.5], &[0.0, 4.0]]);
        let d3: BTreeMap<usize, Vec<usize>> = [(0, vec![1, 2, 3])].into();
        assert!((contrastive_loss(&c3, &q3, &d3, 0.1).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn contrastive_rejects_zero_vectors() {
        let c = seq(&[&[0.0, 0.0], &[0.0, 1.0]]);
        let q = seq(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let d: BTreeMap<usize, Vec<usize>> = [(0, vec![1])].into();
        assert!(matches!(contrastive_loss(&c, &q, &d, 0.1), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn diversity_closed_forms() {
        let uniform4 = Tensor::<f64>::full([3, 4], 0.25);
        let d = diversity_loss(&uniform4).unwrap();
        assert!((d - (-(4f64.ln()) / 4.0)).abs() < 1e-12);
        assert!((d + 0.34657).abs() < 1e-5);

        let mut onehot = Tensor::<f64>::zeros([2, 5]);
        onehot.data_mut()[1] = 1.0;
        onehot.data_mut()[9] = 1.0;
        assert_eq!(diversity_loss(&onehot).unwrap(), 0.0);

        let uniform320 = Tensor::<f64>::full([2, 320], 1.0 / 320.0);
        let d = diversity_loss(&uniform320).unwrap();
        assert!((d - (-(320f64.ln()) / 320.0)).abs() < 1e-12);
        assert!((d + 0.018026).abs() < 1e-6);
    }

    #[test]
    fn diversity_rejects_bad_rows() {
        let bad = Tensor::<f64>::full([1, 4], 0.3);
        assert!(diversity_loss(&bad).is_err());
        let neg = Tensor::<f64>::from_f64([1, 2], &[1.5, -0.5]).unwrap();
        assert!(diversity_loss(&neg).is_err());
    }

    #[test]
    fn temperature_schedule_floors() {
        let s = TemperatureSchedule { start: 2.0, end: 0.5, decay: 0.5 };
        assert_eq!(s.at(0), 2.0);
        assert_eq!(s.at(1), 1.0);
        assert_eq!(s.at(10), 0.5);
    }
}
