use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::autodiff::{Bindings, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    FeatureEncoder,
    /// Weight matrices of the attention projections and feed-forward layers.
    /// This is exactly the prunable set.
    ContextLinear,
    ContextOther,
    Quantizer,
    MaskEmbedding,
}

impl Section {
    pub const ALL: [Section; 5] = [
        Section::FeatureEncoder,
        Section::ContextLinear,
        Section::ContextOther,
        Section::Quantizer,
        Section::MaskEmbedding,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Section::FeatureEncoder => "feature_encoder",
            Section::ContextLinear => "context_linear",
            Section::ContextOther => "context_other",
            Section::Quantizer => "quantizer",
            Section::MaskEmbedding => "mask_embedding",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<S> {
    pub tensor: Tensor<S>,
    pub section: Section,
}

/// Named, sectioned collection of every trainable tensor of the model.
/// Iteration order is lexicographic by name.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamTree<S> {
    entries: BTreeMap<String, ParamEntry<S>>,
}

/// Names and shapes of every parameter for `cfg`, in declaration order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Section)> {
    use Section::*;
    let d = cfg.d_model;
    let mut out = Vec::new();
    let mut cin = 1;
    for (i, l) in cfg.encoder_layers.iter().enumerate() {
        out.push((format!("feature_encoder.conv{i}.weight"), vec![l.kernel, cin, l.channels], FeatureEncoder));
        out.push((format!("feature_encoder.conv{i}.bias"), vec![l.channels], FeatureEncoder));
        cin = l.channels;
    }
    out.push(("feature_encoder.norm.gamma".into(), vec![cin], FeatureEncoder));
    out.push(("feature_encoder.norm.beta".into(), vec![cin], FeatureEncoder));
    out.push(("feature_encoder.proj.weight".into(), vec![cin, d], FeatureEncoder));
    out.push(("feature_encoder.proj.bias".into(), vec![d], FeatureEncoder));

    out.push(("context.pos_conv.weight".into(), vec![cfg.pos_conv_kernel, d], ContextOther));
    out.push(("context.pos_conv.bias".into(), vec![d], ContextOther));
    for b in 0..cfg.n_blocks {
        let p = format!("context.block{b}");
        out.push((format!("{p}.ln1.gamma"), vec![d], ContextOther));
        out.push((format!("{p}.ln1.beta"), vec![d], ContextOther));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{p}.attn.{w}"), vec![d, d], ContextLinear));
            out.push((format!("{p}.attn.b{}", &w[1..]), vec![d], ContextOther));
        }
        out.push((format!("{p}.ln2.gamma"), vec![d], ContextOther));
        out.push((format!("{p}.ln2.beta"), vec![d], ContextOther));
        out.push((format!("{p}.ffn.w1"), vec![d, cfg.ffn_dim], ContextLinear));
        out.push((format!("{p}.ffn.b1"), vec![cfg.ffn_dim], ContextOther));
        out.push((format!("{p}.ffn.w2"), vec![cfg.ffn_dim, d], ContextLinear));
        out.push((format!("{p}.ffn.b2"), vec![d], ContextOther));
    }
    out.push(("context.final_norm.gamma".into(), vec![d], ContextOther));
    out.push(("context.final_norm.beta".into(), vec![d], ContextOther));
    out.push(("context.final_proj.weight".into(), vec![d, d], ContextOther));
    out.push(("context.final_proj.bias".into(), vec![d], ContextOther));

    let gv = cfg.codebooks * cfg.entries;
    out.push(("quantizer.logits.weight".into(), vec![d, gv], Quantizer));
    out.push(("quantizer.logits.bias".into(), vec![gv], Quantizer));
    out.push(("quantizer.codebook".into(), vec![cfg.codebooks, cfg.entries, cfg.codeword_dim], Quantizer));
    out.push(("quantizer.proj.weight".into(), vec![cfg.codebooks * cfg.codeword_dim, d], Quantizer));
    out.push(("quantizer.proj.bias".into(), vec![d], Quantizer));

    out.push(("mask_embedding".into(), vec![d], MaskEmbedding));
    out
}

impl<S: Scalar> ParamTree<S> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    /// Fresh initialization: Xavier-uniform weights, zero biases, unit
    /// layer-norm gains, uniform codebook and mask embedding.
    pub fn init(cfg: &ModelConfig, rng: &mut dyn RngCore) -> Self {
        let mut tree = Self::new();
        for (name, shape, section) in param_layout(cfg) {
            let n: usize = shape.iter().product();
            let data: Vec<S> = if name.ends_with(".gamma") {
                vec![S::one(); n]
            } else if name.ends_with(".beta") || is_bias(&name) {
                vec![S::zero(); n]
            } else if name == "quantizer.codebook" {
                (0..n).map(|_| S::lit(rng.gen_range(-1.0..1.0))).collect()
            } else if name == "mask_embedding" {
                (0..n).map(|_| S::lit(rng.gen_range(0.0..1.0))).collect()
            } else {
                let (fan_in, fan_out) = fans(&shape);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| S::lit(rng.gen_range(-a..a))).collect()
            };
            let tensor = Tensor::new(shape, data).expect("layout shape matches data");
            tree.entries.insert(name, ParamEntry { tensor, section });
        }
        tree
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>, section: Section) {
        self.entries.insert(name.into(), ParamEntry { tensor, section });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn section(&self, name: &str) -> Option<Section> {
        self.entries.get(name).map(|e| e.section)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<S>> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<S>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry<S>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Names of the prunable entries (section `context_linear`), sorted.
    pub fn prunable(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, e)| e.section == Section::ContextLinear)
            .map(|(k, _)| k.as_str())
            .collect()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    /// Number of scalar values per section.
    pub fn section_counts(&self) -> BTreeMap<Section, usize> {
        let mut out: BTreeMap<Section, usize> = Section::ALL.iter().map(|&s| (s, 0)).collect();
        for e in self.entries.values() {
            *out.entry(e.section).or_default() += e.tensor.len();
        }
        out
    }

    pub fn cast<T: Scalar>(&self) -> ParamTree<T> {
        ParamTree {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| (k.clone(), ParamEntry { tensor: e.tensor.cast(), section: e.section }))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes, sections and value bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, e) in &self.entries {
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update(e.section.as_str().as_bytes());
            for &d in e.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in e.tensor.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Euclidean distance between two trees with the same layout.
    pub fn distance(&self, other: &Self) -> Result<f64> {
        let mut acc = 0.0;
        for (name, e) in &self.entries {
            let o = other.get(name).ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
            if o.shape() != e.tensor.shape() {
                return Err(Error::invalid(format!("shape mismatch for {name}")));
            }
            acc += e.tensor.data().iter().zip(o.data()).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum::<f64>();
        }
        Ok(acc.sqrt())
    }

    /// Checks names, shapes and sections against the layout of `cfg`.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let layout = param_layout(cfg);
        if layout.len() != self.entries.len() {
            return Err(Error::invalid(format!(
                "parameter tree has {} entries, model expects {}",
                self.entries.len(),
                layout.len()
            )));
        }
        for (name, shape, section) in layout {
            let e = self.entries.get(&name).ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
            if e.tensor.shape() != shape.as_slice() || e.section != section {
                return Err(Error::invalid(format!("parameter {name} does not match the model layout")));
            }
        }
        Ok(())
    }
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".bias") || name.contains(".attn.b") || name.contains(".ffn.b")
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [k, cin, cout] => (k * cin, k * cout),
        [i, o] => (*i, *o),
        [n] => (*n, *n),
        _ => (1, 1),
    }
}

impl<S: Scalar> Bindings<S> for ParamTree<S> {
    fn lookup(&self, name: &str) -> Option<Tensor<S>> {
        self.get(name).cloned()
    }
}
