use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scores::ImportanceTable;
use crate::autodiff::{Bindings, Tensor};
use crate::error::{Error, Result};
use crate::model::ParamTree;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Lth,
    Te,
    Random,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Lth => "lth",
            Strategy::Te => "te",
            Strategy::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Strategy::Lth, Strategy::Te, Strategy::Random].into_iter().find(|v| v.as_str() == s)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Layerwise,
    Global,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Layerwise => "layerwise",
            Scope::Global => "global",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Scope::Layerwise, Scope::Global].into_iter().find(|v| v.as_str() == s)
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Zeros required for `n` positions at rate `p`: `floor(p * n)`. The small
/// epsilon keeps products such as `0.29 * 100` from rounding down a step.
pub fn zero_count(p: f64, n: usize) -> usize {
    ((p * n as f64) + 1e-9).floor() as usize
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct MaskEntry {
    shape: Vec<usize>,
    keep: Vec<bool>,
}

/// Binary keep-mask over the prunable entries; every other parameter is
/// implicitly kept. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct SubnetMask {
    id: String,
    strategy: Strategy,
    scope: Scope,
    prune_rate: f64,
    seed: Option<u64>,
    entries: BTreeMap<String, MaskEntry>,
}

fn check_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("prune rate must lie in [0, 1), got {p}")));
    }
    Ok(())
}

/// Prunes the `floor(p * n)` lowest-scoring positions per entry (layerwise)
/// or over all prunable positions (global). Ties are broken by ascending
/// (entry name, flat index).
pub fn extract_mask(
    scores: &ImportanceTable,
    p: f64,
    scope: Scope,
    strategy: Strategy,
    id: impl Into<String>,
    seed: Option<u64>,
) -> Result<SubnetMask> {
    check_rate(p)?;
    let mut entries: BTreeMap<String, MaskEntry> = scores
        .iter()
        .map(|(n, shape, s)| (n.to_string(), MaskEntry { shape: shape.to_vec(), keep: vec![true; s.len()] }))
        .collect();
    match scope {
        Scope::Layerwise => {
            for (name, _, s) in scores.iter() {
                let mut order: Vec<usize> = (0..s.len()).collect();
                order.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b)));
                let keep = &mut entries.get_mut(name).expect("same keys").keep;
                for &i in &order[..zero_count(p, s.len())] {
                    keep[i] = false;
                }
            }
        }
        Scope::Global => {
            let mut all: Vec<(f64, &str, usize)> = scores
                .iter()
                .flat_map(|(n, _, s)| s.iter().enumerate().map(move |(i, &v)| (v, n, i)))
                .collect();
            let k = zero_count(p, all.len());
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
            for &(_, name, i) in &all[..k] {
                entries.get_mut(name).expect("same keys").keep[i] = false;
            }
        }
    }
    Ok(SubnetMask { id: id.into(), strategy, scope, prune_rate: p, seed, entries })
}

impl SubnetMask {
    /// All-ones mask over the prunable set of `params`.
    pub fn ones<S: Scalar>(params: &ParamTree<S>, id: impl Into<String>) -> Self {
        let entries = params
            .prunable()
            .into_iter()
            .map(|n| {
                let t = params.get(n).expect("listed");
                (n.to_string(), MaskEntry { shape: t.shape().to_vec(), keep: vec![true; t.len()] })
            })
            .collect();
        Self { id: id.into(), strategy: Strategy::Random, scope: Scope::Layerwise, prune_rate: 0.0, seed: None, entries }
    }

    /// Builds a mask from explicit keep bits.
    pub fn from_bits(
        id: impl Into<String>,
        strategy: Strategy,
        scope: Scope,
        prune_rate: f64,
        seed: Option<u64>,
        bits: BTreeMap<String, (Vec<usize>, Vec<bool>)>,
    ) -> Result<Self> {
        check_rate(prune_rate)?;
        let mut entries = BTreeMap::new();
        for (name, (shape, keep)) in bits {
            if shape.iter().product::<usize>() != keep.len() {
                return Err(Error::MaskMismatch(format!("bits of {name} do not match shape {shape:?}")));
            }
            entries.insert(name, MaskEntry { shape, keep });
        }
        Ok(Self { id: id.into(), strategy, scope, prune_rate, seed, entries })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Same bits under another id.
    pub fn relabel(&self, id: impl Into<String>) -> Self {
        Self { id: id.into(), ..self.clone() }
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    pub fn prune_rate(&self) -> f64 {
        self.prune_rate
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn keep_bits(&self, name: &str) -> Option<&[bool]> {
        self.entries.get(name).map(|e| e.keep.as_slice())
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.entries.get(name).map(|e| e.shape.as_slice())
    }

    /// Whether position `i` of `name` is kept; unmasked entries are kept.
    pub fn keeps(&self, name: &str, i: usize) -> bool {
        self.entries.get(name).is_none_or(|e| e.keep[i])
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(|e| e.keep.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros(&self) -> usize {
        self.entries.values().map(|e| e.keep.iter().filter(|k| !**k).count()).sum()
    }

    pub fn entry_zeros(&self, name: &str) -> Option<usize> {
        self.entries.get(name).map(|e| e.keep.iter().filter(|k| !**k).count())
    }

    /// Kept fraction over the prunable set.
    pub fn density(&self) -> f64 {
        (self.len() - self.zeros()) as f64 / self.len().max(1) as f64
    }

    /// Errors unless the mask covers exactly the prunable set of `params`
    /// with matching shapes.
    pub fn check_aligned<S: Scalar>(&self, params: &ParamTree<S>) -> Result<()> {
        let prunable = params.prunable();
        if prunable.len() != self.entries.len() {
            return Err(Error::MaskMismatch(format!(
                "mask '{}' has {} entries, prunable set has {}",
                self.id,
                self.entries.len(),
                prunable.len()
            )));
        }
        for name in prunable {
            match self.entries.get(name) {
                Some(e) if e.shape.as_slice() == params.get(name).expect("listed").shape() => {}
                Some(_) => return Err(Error::MaskMismatch(format!("mask '{}' has the wrong shape for {name}", self.id))),
                None => return Err(Error::MaskMismatch(format!("mask '{}' lacks {name}", self.id))),
            }
        }
        Ok(())
    }

    fn masked_tensor<S: Scalar>(&self, name: &str, t: &Tensor<S>) -> Tensor<S> {
        let mut out = t.clone();
        if let Some(e) = self.entries.get(name) {
            for (v, &k) in out.data_mut().iter_mut().zip(&e.keep) {
                if !k {
                    *v = S::zero();
                }
            }
        }
        out
    }
}

/// `m ⊙ theta` as bindings: masked positions read as literal zeros.
pub struct MaskedParams<'a, S: Scalar> {
    params: &'a ParamTree<S>,
    mask: &'a SubnetMask,
}

impl<S: Scalar> Bindings<S> for MaskedParams<'_, S> {
    fn lookup(&self, name: &str) -> Option<Tensor<S>> {
        self.params.get(name).map(|t| self.mask.masked_tensor(name, t))
    }
}

/// Read-only masked view of `params`.
pub fn apply_mask<'a, S: Scalar>(params: &'a ParamTree<S>, mask: &'a SubnetMask) -> Result<MaskedParams<'a, S>> {
    mask.check_aligned(params)?;
    Ok(MaskedParams { params, mask })
}

/// Copy of `params` with masked positions set to zero.
pub fn materialize<S: Scalar>(params: &ParamTree<S>, mask: &SubnetMask) -> Result<ParamTree<S>> {
    mask.check_aligned(params)?;
    let mut out = params.clone();
    for (name, e) in out.iter_mut() {
        e.tensor = mask.masked_tensor(name, &e.tensor);
    }
    Ok(out)
}

const MAGIC: &[u8; 8] = b"S3MASK01";
const MASK_FORMAT: &str = "s3net-mask-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset of the entry's bits in the payload.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileManifest {
    format: String,
    id: String,
    strategy: Strategy,
    scope: Scope,
    prune_rate: f64,
    seed: Option<u64>,
    entries: Vec<FileEntry>,
}

/// Writes `mask` as: magic `S3MASK01`, u32 LE manifest length, manifest
/// JSON, then each entry's bits packed LSB-first and padded to whole bytes,
/// in manifest order.
pub fn write_mask(path: &Path, mask: &SubnetMask) -> Result<()> {
    let mut payload = Vec::new();
    let mut entries = Vec::new();
    for (name, e) in &mask.entries {
        entries.push(FileEntry { name: name.clone(), shape: e.shape.clone(), offset: payload.len() });
        for chunk in e.keep.chunks(8) {
            payload.push(chunk.iter().enumerate().fold(0u8, |b, (i, &k)| b | ((k as u8) << i)));
        }
    }
    let manifest = FileManifest {
        format: MASK_FORMAT.into(),
        id: mask.id.clone(),
        strategy: mask.strategy,
        scope: mask.scope,
        prune_rate: mask.prune_rate,
        seed: mask.seed,
        entries,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut bytes = Vec::with_capacity(12 + json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: &Path) -> Result<SubnetMask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a mask file"));
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + mlen).ok_or_else(|| Error::format(path, "truncated manifest"))?;
    let m: FileManifest = serde_json::from_slice(body).map_err(|e| Error::format(path, e.to_string()))?;
    if m.format != MASK_FORMAT {
        return Err(Error::format(path, format!("unsupported format '{}'", m.format)));
    }
    let payload = &bytes[12 + mlen..];
    let mut bits = BTreeMap::new();
    for e in m.entries {
        let n: usize = e.shape.iter().product();
        let raw = payload
            .get(e.offset..e.offset + n.div_ceil(8))
            .ok_or_else(|| Error::format(path, format!("truncated bits for {}", e.name)))?;
        let keep = (0..n).map(|i| raw[i / 8] >> (i % 8) & 1 == 1).collect();
        bits.insert(e.name, (e.shape, keep));
    }
    SubnetMask::from_bits(m.id, m.strategy, m.scope, m.prune_rate, m.seed, bits)
}
