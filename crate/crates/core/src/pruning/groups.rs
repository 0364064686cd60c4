use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::mask::{extract_mask, Scope, Strategy, SubnetMask};
use super::scores::{random_scores, ImportanceTable};
use crate::data::{LanguageInfo, Tier};
use crate::error::{Error, Result};
use crate::model::ParamTree;
use crate::rng::Stream;
use crate::scalar::Scalar;

/// Languages that share one mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Group {
    pub id: String,
    pub languages: Vec<String>,
}

/// A partition of the languages into mask groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grouping {
    pub groups: Vec<Group>,
}

impl Grouping {
    /// One mask per language.
    pub fn individual(languages: &[String]) -> Self {
        Self { groups: languages.iter().map(|l| Group { id: l.clone(), languages: vec![l.clone()] }).collect() }
    }

    /// A single mask shared by all languages.
    pub fn joint(languages: &[String]) -> Self {
        Self { groups: vec![Group { id: "all".into(), languages: languages.to_vec() }] }
    }

    /// One mask per high-resource language plus one for all low-resource
    /// languages together.
    pub fn high_individual_low_joint(languages: &[LanguageInfo]) -> Self {
        let mut groups: Vec<Group> = languages
            .iter()
            .filter(|l| l.tier == Tier::High)
            .map(|l| Group { id: l.id.clone(), languages: vec![l.id.clone()] })
            .collect();
        let low: Vec<String> = languages.iter().filter(|l| l.tier == Tier::Low).map(|l| l.id.clone()).collect();
        if !low.is_empty() {
            groups.push(Group { id: "low".into(), languages: low });
        }
        Self { groups }
    }

    /// Grouping with `n` masks: 1 is joint, the language count is
    /// individual, and `#high + 1` is high-individual/low-joint.
    pub fn with_count(n: usize, languages: &[LanguageInfo]) -> Result<Self> {
        let ids: Vec<String> = languages.iter().map(|l| l.id.clone()).collect();
        let n_high = languages.iter().filter(|l| l.tier == Tier::High).count();
        let g = if n == ids.len() {
            Self::individual(&ids)
        } else if n == 1 {
            Self::joint(&ids)
        } else if n == n_high + 1 && n_high < ids.len() {
            Self::high_individual_low_joint(languages)
        } else {
            return Err(Error::validation(
                "pruning.masks",
                format!("{n} masks is not 1, {}, or {} for this corpus; use a grouping file", ids.len(), n_high + 1),
            ));
        };
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Errors unless the groups partition `languages` with no empty group.
    pub fn validate(&self, languages: &[String]) -> Result<()> {
        let mut seen = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for g in &self.groups {
            if g.languages.is_empty() {
                return Err(Error::validation("pruning.grouping", format!("group '{}' is empty", g.id)));
            }
            if !ids.insert(g.id.as_str()) {
                return Err(Error::validation("pruning.grouping", format!("duplicate group id '{}'", g.id)));
            }
            for l in &g.languages {
                if !languages.contains(l) {
                    return Err(Error::validation("pruning.grouping", format!("unknown language '{l}'")));
                }
                if !seen.insert(l.as_str()) {
                    return Err(Error::validation("pruning.grouping", format!("language '{l}' is in two groups")));
                }
            }
        }
        if let Some(missing) = languages.iter().find(|l| !seen.contains(l.as_str())) {
            return Err(Error::validation("pruning.grouping", format!("language '{missing}' has no group")));
        }
        Ok(())
    }

    pub fn group_of(&self, language: &str) -> Option<&Group> {
        self.groups.iter().find(|g| g.languages.iter().any(|l| l == language))
    }
}

/// Score sources needed by [`group_masks`].
pub trait MaskScorer<S: Scalar> {
    /// Magnitudes of a copy of the parameters after warmup on the pooled
    /// data of `languages`.
    fn warmed_magnitude(&mut self, group: &Group) -> Result<ImportanceTable>;
    /// Taylor importance of the frozen parameters on one language.
    fn taylor(&mut self, language: &str) -> Result<ImportanceTable>;
}

/// One mask per group. LTH groups are warmed up on their pooled data and
/// magnitude-pruned; TE groups average their languages' Taylor tables;
/// random groups draw from a per-group stream under `seed`.
#[allow(clippy::too_many_arguments)]
pub fn group_masks<S: Scalar>(
    strategy: Strategy,
    grouping: &Grouping,
    languages: &[String],
    params: &ParamTree<S>,
    p: f64,
    scope: Scope,
    seed: u64,
    scorer: &mut dyn MaskScorer<S>,
) -> Result<BTreeMap<String, SubnetMask>> {
    grouping.validate(languages)?;
    let mut out = BTreeMap::new();
    for g in &grouping.groups {
        let scores = match strategy {
            Strategy::Lth => scorer.warmed_magnitude(g)?,
            Strategy::Te => {
                let tables = g.languages.iter().map(|l| scorer.taylor(l)).collect::<Result<Vec<_>>>()?;
                ImportanceTable::average(&tables)?
            }
            Strategy::Random => random_scores(params, &mut Stream::new(seed, &["masks", "random", &g.id])),
        };
        scores.check_aligned(params)?;
        out.insert(g.id.clone(), extract_mask(&scores, p, scope, strategy, g.id.clone(), Some(seed))?);
    }
    Ok(out)
}

/// Resolves each language to its group's mask.
pub fn language_masks(grouping: &Grouping, masks: &BTreeMap<String, SubnetMask>) -> Result<BTreeMap<String, SubnetMask>> {
    let mut out = BTreeMap::new();
    for g in &grouping.groups {
        let m = masks.get(&g.id).ok_or_else(|| Error::MaskMismatch(format!("no mask for group '{}'", g.id)))?;
        for l in &g.languages {
            out.insert(l.clone(), m.clone());
        }
    }
    Ok(out)
}
