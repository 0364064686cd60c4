//! Mask structure statistics, held-out evaluation and sweep tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Bindings;
use crate::data::{Corpus, Split, Tier};
use crate::error::{Error, Result};
use crate::model::{ParamTree, SpeechModel};
use crate::objective::{LossGraph, Mode, ObjectiveConfig};
use crate::pruning::{apply_mask, Scope, Strategy, SubnetMask};
use crate::rng::Stream;
use crate::scalar::Scalar;

/// Structure of a set of per-language masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub languages: Vec<String>,
    pub layers: Vec<String>,
    /// `density[language][layer]`: kept fraction.
    pub density: BTreeMap<String, BTreeMap<String, f64>>,
    pub overall_density: BTreeMap<String, f64>,
    /// Intersection over union of kept positions, in `languages` order.
    pub iou: Vec<Vec<f64>>,
    /// `usage_counts[k]`: positions kept by exactly `k` languages.
    pub usage_counts: Vec<usize>,
    pub positions: usize,
    /// Kept by no language.
    pub dead_fraction: f64,
    /// Kept by two or more languages.
    pub shared_fraction: f64,
    /// Kept by this language only.
    pub exclusive_fraction: BTreeMap<String, f64>,
}

/// Exact counts over the masks, keyed by language.
pub fn mask_stats(masks: &BTreeMap<String, SubnetMask>) -> Result<MaskReport> {
    let (first_id, first) = masks.iter().next().ok_or_else(|| Error::invalid("no masks to analyze"))?;
    let layers: Vec<String> = first.names().map(String::from).collect();
    for (id, m) in masks {
        let names: Vec<&str> = m.names().collect();
        if names != layers.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::MaskMismatch(format!("masks '{first_id}' and '{id}' cover different tensors")));
        }
        for l in &layers {
            if m.shape(l) != first.shape(l) {
                return Err(Error::MaskMismatch(format!("masks '{first_id}' and '{id}' disagree on the shape of {l}")));
            }
        }
    }
    let languages: Vec<String> = masks.keys().cloned().collect();
    let n_lang = languages.len();
    let ms: Vec<&SubnetMask> = masks.values().collect();

    let mut density = BTreeMap::new();
    let mut overall_density = BTreeMap::new();
    for (id, m) in masks {
        let per: BTreeMap<String, f64> = layers
            .iter()
            .map(|l| {
                let bits = m.keep_bits(l).expect("aligned");
                (l.clone(), bits.iter().filter(|&&b| b).count() as f64 / bits.len() as f64)
            })
            .collect();
        density.insert(id.clone(), per);
        overall_density.insert(id.clone(), m.density());
    }

    let mut inter = vec![vec![0usize; n_lang]; n_lang];
    let mut kept = vec![0usize; n_lang];
    let mut usage_counts = vec![0usize; n_lang + 1];
    let mut exclusive = vec![0usize; n_lang];
    let mut positions = 0;
    let mut keepers = Vec::with_capacity(n_lang);
    for l in &layers {
        let bits: Vec<&[bool]> = ms.iter().map(|m| m.keep_bits(l).expect("aligned")).collect();
        for i in 0..bits[0].len() {
            positions += 1;
            keepers.clear();
            keepers.extend((0..n_lang).filter(|&a| bits[a][i]));
            usage_counts[keepers.len()] += 1;
            if let [only] = keepers[..] {
                exclusive[only] += 1;
            }
            for (x, &a) in keepers.iter().enumerate() {
                kept[a] += 1;
                for &b in &keepers[x..] {
                    inter[a][b] += 1;
                }
            }
        }
    }
    let iou = (0..n_lang)
        .map(|a| {
            (0..n_lang)
                .map(|b| {
                    let i = inter[a.min(b)][a.max(b)];
                    let u = kept[a] + kept[b] - i;
                    if u == 0 {
                        1.0
                    } else {
                        i as f64 / u as f64
                    }
                })
                .collect()
        })
        .collect();
    let frac = |c: usize| if positions == 0 { 0.0 } else { c as f64 / positions as f64 };
    Ok(MaskReport {
        dead_fraction: frac(usage_counts[0]),
        shared_fraction: frac(usage_counts.iter().skip(2).sum()),
        exclusive_fraction: languages.iter().zip(&exclusive).map(|(l, &c)| (l.clone(), frac(c))).collect(),
        languages,
        layers,
        density,
        overall_density,
        iou,
        usage_counts,
        positions,
    })
}

impl MaskReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = self.languages.iter().map(String::len).max().unwrap_or(0).max(8);
        let _ = writeln!(s, "positions {}  dead {:.4}  shared {:.4}", self.positions, self.dead_fraction, self.shared_fraction);
        let _ = writeln!(s, "\n{:<w$}  {:>8}  {:>9}", "language", "density", "exclusive");
        for l in &self.languages {
            let _ = writeln!(s, "{:<w$}  {:>8.4}  {:>9.4}", l, self.overall_density[l], self.exclusive_fraction[l]);
        }
        let _ = writeln!(s, "\nIoU");
        let _ = write!(s, "{:<w$}", "");
        for l in &self.languages {
            let _ = write!(s, "  {l:>w$}");
        }
        s.push('\n');
        for (a, row) in self.iou.iter().enumerate() {
            let _ = write!(s, "{:<w$}", self.languages[a]);
            for v in row {
                let _ = write!(s, "  {v:>w$.4}");
            }
            s.push('\n');
        }
        let lw = self.layers.iter().map(String::len).max().unwrap_or(5);
        let _ = writeln!(s, "\nper-layer density");
        let _ = write!(s, "{:<lw$}", "layer");
        for l in &self.languages {
            let _ = write!(s, "  {l:>w$}");
        }
        s.push('\n');
        for layer in &self.layers {
            let _ = write!(s, "{layer:<lw$}");
            for l in &self.languages {
                let _ = write!(s, "  {:>w$.4}", self.density[l][layer]);
            }
            s.push('\n');
        }
        s
    }
}

/// Fixed settings of held-out evaluation. Reports are comparable only when
/// these match.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Cap on windows per language; `None` evaluates the whole split.
    pub max_windows: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { seed: 0x5eed_e7a1, batch_size: 8, max_windows: None }
    }
}

/// Mean loss parts over a set of batches or languages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalParts {
    pub contrastive: f64,
    pub diversity: f64,
    pub total: f64,
}

impl EvalParts {
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a EvalParts>) -> Option<EvalParts> {
        let mut acc = EvalParts::default();
        let mut n = 0usize;
        for p in items {
            acc.contrastive += p.contrastive;
            acc.diversity += p.diversity;
            acc.total += p.total;
            n += 1;
        }
        (n > 0).then(|| EvalParts {
            contrastive: acc.contrastive / n as f64,
            diversity: acc.diversity / n as f64,
            total: acc.total / n as f64,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageEval {
    pub language: String,
    pub tier: Tier,
    pub windows: usize,
    pub parts: EvalParts,
}

/// Per-language held-out loss with tier aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eval: EvalConfig,
    pub split: Split,
    pub languages: Vec<LanguageEval>,
    pub high: Option<EvalParts>,
    pub low: Option<EvalParts>,
    pub all: EvalParts,
}

impl EvalReport {
    /// Builds the aggregates from `languages`.
    pub fn new(eval: EvalConfig, split: Split, languages: Vec<LanguageEval>) -> Result<Self> {
        let tier = |t: Tier| EvalParts::mean(languages.iter().filter(|l| l.tier == t).map(|l| &l.parts));
        let all = EvalParts::mean(languages.iter().map(|l| &l.parts)).ok_or_else(|| Error::invalid("no languages evaluated"))?;
        Ok(Self { eval, split, high: tier(Tier::High), low: tier(Tier::Low), all, languages })
    }

    pub fn language(&self, id: &str) -> Option<&LanguageEval> {
        self.languages.iter().find(|l| l.language == id)
    }

    pub fn to_text(&self) -> String {
        let w = self.languages.iter().map(|l| l.language.len()).max().unwrap_or(0).max(8);
        let mut s = format!(
            "{:<w$}  {:>4}  {:>7}  {:>11}  {:>9}  {:>9}\n",
            "language", "tier", "windows", "contrastive", "diversity", "total"
        );
        let mut row = |name: &str, tier: &str, n: String, p: &EvalParts| {
            let _ = writeln!(s, "{name:<w$}  {tier:>4}  {n:>7}  {:>11.5}  {:>9.5}  {:>9.5}", p.contrastive, p.diversity, p.total);
        };
        for l in &self.languages {
            let t = match l.tier {
                Tier::High => "high",
                Tier::Low => "low",
            };
            row(&l.language, t, l.windows.to_string(), &l.parts);
        }
        if let Some(h) = &self.high {
            row("[high]", "", String::new(), h);
        }
        if let Some(l) = &self.low {
            row("[low]", "", String::new(), l);
        }
        row("[all]", "", String::new(), &self.all);
        s
    }
}

/// Held-out loss per language with fixed time masks and distractors drawn
/// from `eval.seed`, and noise-free quantizer selections. With masks,
/// language `l` is evaluated through `masks[l]`. The contrastive part is
/// averaged over the utterances that have masked steps, the diversity part
/// over batches.
pub fn eval_heldout<S: Scalar>(
    model: &SpeechModel,
    params: &ParamTree<S>,
    masks: Option<&BTreeMap<String, SubnetMask>>,
    corpus: &Corpus,
    split: Split,
    objective: &ObjectiveConfig,
    eval: &EvalConfig,
) -> Result<EvalReport> {
    if eval.batch_size == 0 {
        return Err(Error::validation("eval.batch_size", "must be >= 1"));
    }
    let mut out = Vec::new();
    for info in corpus.languages() {
        let id = &info.id;
        let n = corpus.num_windows(id, split)?;
        if n == 0 {
            return Err(Error::invalid(format!("split {} of '{id}' is empty", split.as_str())));
        }
        let n = eval.max_windows.map_or(n, |m| n.min(m.max(1)));
        let mask = match masks {
            Some(m) => Some(m.get(id).ok_or_else(|| Error::MaskMismatch(format!("no mask for language '{id}'")))?),
            None => None,
        };
        let view = mask.map(|m| apply_mask(params, m)).transpose()?;
        let bind: &dyn Bindings<S> = match &view {
            Some(v) => v,
            None => params,
        };
        let (mut c_sum, mut c_n, mut d_sum, mut batches) = (0.0, 0usize, 0.0, 0usize);
        for (b, start) in (0..n).step_by(eval.batch_size).enumerate() {
            let batch: Vec<Vec<S>> = (start..n.min(start + eval.batch_size))
                .map(|i| corpus.window(id, split, i).map(|w| w.iter().map(|&x| S::lit(x as f64)).collect()))
                .collect::<Result<_>>()?;
            let mut rng = Stream::new(eval.seed, &["eval", split.as_str(), id, &b.to_string()]);
            let mut lg = LossGraph::build(model, &batch, objective, objective.temperature.end, Mode::Eval, &mut rng)?;
            let p = lg.evaluate(bind, &mut rng)?;
            c_sum += p.contrastive * p.n_utterances as f64;
            c_n += p.n_utterances;
            d_sum += p.diversity;
            batches += 1;
        }
        if c_n == 0 {
            return Err(Error::invalid(format!("no held-out window of '{id}' has enough masked steps; use a larger split")));
        }
        let (contrastive, diversity) = (c_sum / c_n as f64, d_sum / batches as f64);
        out.push(LanguageEval {
            language: id.clone(),
            tier: info.tier,
            windows: n,
            parts: EvalParts { contrastive, diversity, total: contrastive + objective.lambda * diversity },
        });
    }
    EvalReport::new(*eval, split, out)
}

/// What a finished pipeline run records about itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: Strategy,
    pub scope: Scope,
    pub n_masks: usize,
    pub prune_rate: f64,
    pub seed: u64,
    pub corpus_digest: String,
    pub config_digest: String,
    pub eval: EvalReport,
}

pub const SUMMARY_FILE: &str = "summary.json";

impl RunSummary {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(SUMMARY_FILE);
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_slice(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join(SUMMARY_FILE);
        fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run: String,
    pub strategy: Strategy,
    pub scope: Scope,
    pub n_masks: usize,
    pub prune_rate: f64,
    pub seed: u64,
    pub high: Option<f64>,
    pub low: Option<f64>,
    pub avg: f64,
    /// `avg` minus the p = 0 run with the same seed, when present.
    pub delta_vs_dense: Option<f64>,
}

/// Paired comparison of finished runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub eval: EvalConfig,
    pub corpus_digest: String,
    pub rows: Vec<SweepRow>,
    /// Mean `avg` over seeds for each (strategy, scope, #masks, p).
    pub curve: Vec<SweepRow>,
}

/// Table over runs that share the corpus and the evaluation settings.
pub fn sweep_report(runs: &[(String, RunSummary)]) -> Result<SweepTable> {
    let (_, first) = runs.first().ok_or_else(|| Error::invalid("no runs to compare"))?;
    for (name, r) in runs {
        if r.eval.eval != first.eval.eval || r.eval.split != first.eval.split {
            return Err(Error::invalid(format!("run '{name}' was evaluated with different settings; comparisons must be paired")));
        }
        if r.corpus_digest != first.corpus_digest {
            return Err(Error::invalid(format!("run '{name}' used a different corpus")));
        }
    }
    let key = |r: &SweepRow| (r.strategy, r.scope, r.n_masks, r.prune_rate.to_bits(), r.seed);
    let mut rows: Vec<SweepRow> = runs
        .iter()
        .map(|(name, r)| SweepRow {
            run: name.clone(),
            strategy: r.strategy,
            scope: r.scope,
            n_masks: r.n_masks,
            prune_rate: r.prune_rate,
            seed: r.seed,
            high: r.eval.high.map(|p| p.total),
            low: r.eval.low.map(|p| p.total),
            avg: r.eval.all.total,
            delta_vs_dense: None,
        })
        .collect();
    rows.sort_by(|a, b| key(a).cmp(&key(b)).then_with(|| a.run.cmp(&b.run)));
    let dense: BTreeMap<u64, f64> = rows.iter().filter(|r| r.prune_rate == 0.0).map(|r| (r.seed, r.avg)).collect();
    for r in &mut rows {
        r.delta_vs_dense = dense.get(&r.seed).map(|d| r.avg - d);
    }

    let mut cells: BTreeMap<(Strategy, Scope, usize, u64), Vec<&SweepRow>> = BTreeMap::new();
    for r in &rows {
        cells.entry((r.strategy, r.scope, r.n_masks, r.prune_rate.to_bits())).or_default().push(r);
    }
    let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let curve = cells
        .into_values()
        .map(|c| SweepRow {
            run: format!("mean of {}", c.len()),
            strategy: c[0].strategy,
            scope: c[0].scope,
            n_masks: c[0].n_masks,
            prune_rate: c[0].prune_rate,
            seed: c[0].seed,
            high: mean(c.iter().filter_map(|r| r.high).collect()),
            low: mean(c.iter().filter_map(|r| r.low).collect()),
            avg: mean(c.iter().map(|r| r.avg).collect()).expect("non-empty cell"),
            delta_vs_dense: mean(c.iter().filter_map(|r| r.delta_vs_dense).collect()),
        })
        .collect();
    Ok(SweepTable { eval: first.eval.eval, corpus_digest: first.corpus_digest.clone(), rows, curve })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.5}"))
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("run,strategy,scope,masks,prune_rate,seed,high,low,avg,delta_vs_dense\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{:.6},{}",
                r.run,
                r.strategy,
                r.scope,
                r.n_masks,
                r.prune_rate,
                r.seed,
                opt(r.high),
                opt(r.low),
                r.avg,
                opt(r.delta_vs_dense)
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let header = ["run", "strategy", "scope", "masks", "p", "seed", "high", "low", "avg", "delta"];
        let cells = |rows: &[SweepRow]| -> Vec<[String; 10]> {
            rows.iter()
                .map(|r| {
                    [
                        r.run.clone(),
                        r.strategy.to_string(),
                        r.scope.to_string(),
                        r.n_masks.to_string(),
                        format!("{:.2}", r.prune_rate),
                        r.seed.to_string(),
                        opt(r.high),
                        opt(r.low),
                        format!("{:.5}", r.avg),
                        opt(r.delta_vs_dense),
                    ]
                })
                .collect()
        };
        let mut s = String::new();
        for (title, rows) in [("runs", cells(&self.rows)), ("curve (mean over seeds)", cells(&self.curve))] {
            let mut w: Vec<usize> = header.iter().map(|h| h.len()).collect();
            for r in &rows {
                for (i, c) in r.iter().enumerate() {
                    w[i] = w[i].max(c.len());
                }
            }
            let _ = writeln!(s, "{title}");
            let line = |cols: &[&str]| {
                cols.iter().enumerate().map(|(i, c)| format!("{c:>width$}", width = w[i])).collect::<Vec<_>>().join("  ")
            };
            let _ = writeln!(s, "{}", line(&header));
            for r in &rows {
                let _ = writeln!(s, "{}", line(&r.iter().map(String::as_str).collect::<Vec<_>>()));
            }
            s.push('\n');
        }
        s
    }

    /// Writes `sweep.json`, `sweep.txt` and `sweep.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("sweep.json", serde_json::to_string_pretty(self)?),
            ("sweep.txt", self.to_text()),
            ("sweep.csv", self.to_csv()),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: Vec<bool>) -> SubnetMask {
        let n = bits.len();
        SubnetMask::from_bits("m", Strategy::Random, Scope::Layerwise, 0.5, None, [("w".to_string(), (vec![n], bits))].into())
            .unwrap()
    }

    #[test]
    fn identical_masks() {
        let m = mask(vec![true, false, true, true]);
        let r = mask_stats(&[("a".to_string(), m.clone()), ("b".to_string(), m)].into()).unwrap();
        assert_eq!(r.iou, vec![vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(r.exclusive_fraction["a"], 0.0);
        assert_eq!(r.dead_fraction, 0.25);
        assert_eq!(r.shared_fraction, 0.75);
    }

    #[test]
    fn complementary_masks() {
        let a = mask(vec![true, false, true, false]);
        let b = mask(vec![false, true, false, true]);
        let r = mask_stats(&[("a".to_string(), a), ("b".to_string(), b)].into()).unwrap();
        assert_eq!(r.iou[0][1], 0.0);
        assert_eq!(r.dead_fraction, 0.0);
        assert_eq!(r.exclusive_fraction["a"] + r.exclusive_fraction["b"], 1.0);
        assert_eq!(r.density["a"]["w"], 0.5);
    }

    #[test]
    fn misaligned_rejected() {
        let r = mask_stats(&[("a".to_string(), mask(vec![true; 4])), ("b".to_string(), mask(vec![true; 5]))].into());
        assert!(matches!(r, Err(Error::MaskMismatch(_))));
    }

    #[test]
    fn aggregates_are_means() {
        let le = |id: &str, tier, t| LanguageEval {
            language: id.into(),
            tier,
            windows: 1,
            parts: EvalParts { contrastive: t, diversity: 0.0, total: t },
        };
        let r = EvalReport::new(
            EvalConfig::default(),
            Split::Test,
            vec![le("a", Tier::High, 1.0), le("b", Tier::High, 3.0), le("c", Tier::Low, 5.0)],
        )
        .unwrap();
        assert_eq!(r.high.unwrap().total, 2.0);
        assert_eq!(r.low.unwrap().total, 5.0);
        assert_eq!(r.all.total, 3.0);
    }
}
