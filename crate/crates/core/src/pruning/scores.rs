use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Gradients};
use crate::error::{Error, Result};
use crate::model::{ParamTree, SpeechModel};
use crate::objective::{LossGraph, Mode, ObjectiveConfig};
use crate::scalar::Scalar;

/// How an importance table was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Magnitude,
    Taylor,
    Random,
}

/// Non-negative scores over the prunable entries, stored flat per entry.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceTable {
    pub provenance: Provenance,
    entries: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl ImportanceTable {
    /// Builds a table from `(name, shape, scores)` triples.
    pub fn new(provenance: Provenance, entries: impl IntoIterator<Item = (String, Vec<usize>, Vec<f64>)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (name, shape, scores) in entries {
            if shape.iter().product::<usize>() != scores.len() {
                return Err(Error::invalid(format!("scores for {name} do not match shape {shape:?}")));
            }
            if scores.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
                return Err(Error::invalid(format!("scores for {name} must be finite and >= 0")));
            }
            map.insert(name, (shape, scores));
        }
        Ok(Self { provenance, entries: map })
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(|(_, s)| s.as_slice())
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.entries.get(name).map(|(s, _)| s.as_slice())
    }

    /// `(name, shape, scores)` in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize], &[f64])> {
        self.entries.iter().map(|(n, (sh, sc))| (n.as_str(), sh.as_slice(), sc.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(|(_, s)| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Element-wise mean of aligned tables.
    pub fn average(tables: &[ImportanceTable]) -> Result<Self> {
        let Some(first) = tables.first() else {
            return Err(Error::invalid("no importance tables to average"));
        };
        let mut entries = first.entries.clone();
        for t in &tables[1..] {
            if t.entries.len() != entries.len() {
                return Err(Error::invalid("importance tables cover different entries"));
            }
            for (name, (shape, acc)) in entries.iter_mut() {
                let (s2, v) = t.entries.get(name).ok_or_else(|| Error::invalid(format!("table lacks {name}")))?;
                if s2 != shape {
                    return Err(Error::invalid(format!("shape mismatch for {name}")));
                }
                acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
            }
        }
        let k = tables.len() as f64;
        for (_, acc) in entries.values_mut() {
            acc.iter_mut().for_each(|a| *a /= k);
        }
        Ok(Self { provenance: first.provenance, entries })
    }

    /// Errors unless the table covers exactly the prunable set of `params`.
    pub fn check_aligned<S: Scalar>(&self, params: &ParamTree<S>) -> Result<()> {
        let prunable = params.prunable();
        if prunable.len() != self.entries.len() {
            return Err(Error::MaskMismatch(format!(
                "table has {} entries, prunable set has {}",
                self.entries.len(),
                prunable.len()
            )));
        }
        for name in prunable {
            match self.entries.get(name) {
                Some((shape, _)) if shape.as_slice() == params.get(name).expect("listed").shape() => {}
                _ => return Err(Error::MaskMismatch(format!("entry {name} missing or misshaped"))),
            }
        }
        Ok(())
    }
}

fn prunable_entries<S: Scalar>(params: &ParamTree<S>, f: impl Fn(&str, usize, S) -> f64) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    params
        .prunable()
        .into_iter()
        .map(|name| {
            let t = params.get(name).expect("listed");
            let scores = t.data().iter().enumerate().map(|(i, &v)| f(name, i, v)).collect();
            (name.to_string(), t.shape().to_vec(), scores)
        })
        .collect()
}

/// `|theta_i|` over the prunable entries.
pub fn magnitude_scores<S: Scalar>(params: &ParamTree<S>) -> ImportanceTable {
    ImportanceTable::new(Provenance::Magnitude, prunable_entries(params, |_, _, v| v.as_f64().abs()))
        .expect("absolute values are finite and non-negative")
}

/// Uniform scores in [0, 1); extraction on them yields a uniformly random
/// subset of the required size.
pub fn random_scores<S: Scalar>(params: &ParamTree<S>, rng: &mut dyn RngCore) -> ImportanceTable {
    let names: Vec<(String, Vec<usize>, usize)> = params
        .prunable()
        .into_iter()
        .map(|n| {
            let t = params.get(n).expect("listed");
            (n.to_string(), t.shape().to_vec(), t.len())
        })
        .collect();
    let entries = names
        .into_iter()
        .map(|(n, shape, len)| (n, shape, (0..len).map(|_| rng.gen::<f64>()).collect()))
        .collect::<Vec<_>>();
    ImportanceTable::new(Provenance::Random, entries).expect("uniform draws are valid scores")
}

/// `mean_b (g_{b,i} * theta_i)^2` over the gradients of several batches.
pub fn taylor_from_gradients<S: Scalar>(params: &ParamTree<S>, grads: &[Gradients<S>]) -> Result<ImportanceTable> {
    if grads.is_empty() {
        return Err(Error::invalid("taylor scores need at least one batch"));
    }
    for g in grads {
        for name in params.prunable() {
            let t = g.get(name).ok_or_else(|| Error::invalid(format!("no gradient for {name}")))?;
            if t.shape() != params.get(name).expect("listed").shape() {
                return Err(Error::invalid(format!("gradient shape mismatch for {name}")));
            }
        }
    }
    let n = grads.len() as f64;
    let entries = prunable_entries(params, |name, i, theta| {
        let theta = theta.as_f64();
        grads.iter().map(|g| (g.get(name).expect("checked").data()[i].as_f64() * theta).powi(2)).sum::<f64>() / n
    });
    ImportanceTable::new(Provenance::Taylor, entries)
}

/// Taylor importance of the objective on `batches`, with `params` frozen:
/// gradients are computed but nothing is updated. Quantizer selections use
/// sampled noise from `rng`, as in training.
pub fn taylor_scores<S: Scalar>(
    model: &SpeechModel,
    params: &ParamTree<S>,
    batches: &[Vec<Vec<S>>],
    cfg: &ObjectiveConfig,
    temperature: f64,
    rng: &mut dyn RngCore,
) -> Result<ImportanceTable> {
    if batches.is_empty() {
        return Err(Error::invalid("taylor scores need a non-empty data stream"));
    }
    let mut grads = Vec::with_capacity(batches.len());
    for batch in batches {
        let mut lg = LossGraph::build(model, batch, cfg, temperature, Mode::Train, rng)?;
        lg.evaluate(params as &dyn Bindings<S>, rng)?;
        grads.push(lg.gradients()?);
    }
    taylor_from_gradients(params, &grads)
}
