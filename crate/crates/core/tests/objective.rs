//! The contrastive and diversity terms against independent reimplementations,
//! and the time-masking process against a Monte-Carlo oracle.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s3net::autodiff::Tensor;
use s3net::model::{LatentSequence, ModelConfig, SpeechModel};
use s3net::objective::{
    contrastive_loss, diversity_loss, sample_distractors, sample_time_mask, total_loss, LossGraph, MaskSpec, Mode,
    ObjectiveConfig, TemperatureSchedule,
};
use s3net::rng::Stream;
use s3net::{ParamTree32, ParamTree64};

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// One term at a time: -log(exp(s_pos / k) / sum over {pos} + distractors).
pub fn brute_force(c: &[Vec<f64>], q: &[Vec<f64>], terms: &BTreeMap<usize, Vec<usize>>, kappa: f64) -> f64 {
    let mut total = 0.0;
    for (&t, ds) in terms {
        let pos = (cosine(&c[t], &q[t]) / kappa).exp();
        let mut denom = pos;
        for &d in ds {
            denom += (cosine(&c[t], &q[d]) / kappa).exp();
        }
        total += -(pos / denom).ln();
    }
    total / terms.len() as f64
}

pub fn seq(rows: &[Vec<f64>]) -> LatentSequence<f64> {
    let flat: Vec<f64> = rows.concat();
    LatentSequence::new(Tensor::from_f64([rows.len(), rows[0].len()], &flat).unwrap()).unwrap()
}

#[test]
fn contrastive_matches_per_term_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let t = rng.gen_range(3..14);
        let d = rng.gen_range(2..9);
        let k = rng.gen_range(1..6);
        let kappa = rng.gen_range(0.05..1.0);
        let c: Vec<Vec<f64>> = (0..t).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let q: Vec<Vec<f64>> = (0..t).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut steps: Vec<usize> = (0..t).collect();
        steps.shuffle(&mut rng);
        let masked = &steps[..rng.gen_range(2..=t)];
        let terms: BTreeMap<usize, Vec<usize>> = masked
            .iter()
            .map(|&s| {
                let others: Vec<usize> = masked.iter().copied().filter(|&m| m != s).collect();
                (s, (0..k).map(|_| *others.choose(&mut rng).unwrap()).collect())
            })
            .collect();
        let got = contrastive_loss(&seq(&c), &seq(&q), &terms, kappa).unwrap();
        let want = brute_force(&c, &q, &terms, kappa);
        worst = worst.max((got - want).abs());
    }
    assert!(worst <= 1e-6, "max deviation {worst:e}");
}

#[test]
fn positive_identical_to_context_and_orthogonal_distractors() {
    // sim(c, q_t) = 1, sim(c, q_d) = 0: loss = -ln(e^(1/k) / (e^(1/k) + K))
    let c = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
    let q = c.clone();
    let terms: BTreeMap<usize, Vec<usize>> = [(0, vec![1, 2])].into();
    let kappa = 0.1;
    let got = contrastive_loss(&seq(&c), &seq(&q), &terms, kappa).unwrap();
    let e = (1.0f64 / kappa).exp();
    assert!((got - (-(e / (e + 2.0)).ln())).abs() < 1e-12);
}

#[test]
fn diversity_closed_forms() {
    for (g, v) in [(1, 2), (2, 40), (2, 320), (3, 7)] {
        let uniform = Tensor::full([g, v], 1.0 / v as f64);
        let got = diversity_loss(&uniform).unwrap();
        let want = -(v as f64).ln() / v as f64;
        assert!((got - want).abs() <= 1e-15 * want.abs().max(1.0) * v as f64, "G={g} V={v}: {got} vs {want}");

        let mut onehot = Tensor::zeros([g, v]);
        for r in 0..g {
            onehot.data_mut()[r * v + (r * 3) % v] = 1.0;
        }
        assert_eq!(diversity_loss(&onehot).unwrap(), 0.0);
    }
}

#[test]
fn diversity_rejects_non_distributions() {
    assert!(diversity_loss(&Tensor::<f64>::from_f64([1, 2], &[0.7, 0.7]).unwrap()).is_err());
    assert!(diversity_loss(&Tensor::<f64>::from_f64([1, 2], &[1.5, -0.5]).unwrap()).is_err());
    assert!(diversity_loss(&Tensor::<f64>::from_f64([4], &[0.25; 4]).unwrap()).is_err());
}

/// Start each span with probability `s`, cover `m` steps, clip at the end.
pub fn oracle_fraction(t: usize, s: f64, m: usize, rng: &mut ChaCha8Rng) -> f64 {
    let starts: Vec<usize> = (0..t).filter(|_| rng.gen_bool(s)).collect();
    let covered = (0..t).filter(|&i| starts.iter().any(|&st| st <= i && i < st + m)).count();
    covered as f64 / t as f64
}

#[test]
fn masked_fraction_matches_monte_carlo() {
    let spec = MaskSpec { start_prob: 0.065, span: 10 };
    let (t, trials) = (100, 10_000);
    let mut ours = 0.0;
    let mut stream = Stream::new(3, &["mask-test"]);
    for _ in 0..trials {
        ours += sample_time_mask(t, &spec, &mut stream).unwrap().len() as f64 / t as f64;
    }
    let mut oracle = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..trials {
        oracle += oracle_fraction(t, 0.065, 10, &mut rng);
    }
    let (ours, oracle) = (ours / trials as f64, oracle / trials as f64);
    assert!((ours - oracle).abs() <= 0.01, "ours {ours:.4} oracle {oracle:.4}");

    // step i is uncovered iff none of the min(i + 1, M) steps that could cover it started a span
    let exact = 1.0 - (0..t).map(|i| (1.0f64 - 0.065).powi((i + 1).min(10) as i32)).sum::<f64>() / t as f64;
    assert!((ours - exact).abs() <= 0.01, "ours {ours:.4} exact {exact:.4}");
}

#[test]
fn masks_are_sorted_unique_and_in_range() {
    let mut s = Stream::new(1, &["m"]);
    for t in [1, 5, 24, 100] {
        for _ in 0..200 {
            let m = sample_time_mask(t, &MaskSpec { start_prob: 0.2, span: 4 }, &mut s).unwrap();
            assert!(m.windows(2).all(|w| w[0] < w[1]));
            assert!(m.iter().all(|&i| i < t));
        }
    }
    assert!(sample_time_mask(0, &MaskSpec::default(), &mut s).is_err());
}

#[test]
fn distractors_come_from_other_masked_steps() {
    let mut s = Stream::new(2, &["d"]);
    let masked: Vec<usize> = (3..20).collect();
    for &t in &masked {
        let d = sample_distractors(&masked, t, 10, &mut s).unwrap();
        assert_eq!(d.indices.len(), 10);
        assert!(!d.with_replacement);
        assert!(d.indices.iter().all(|i| masked.contains(i) && *i != t));
        let mut u = d.indices.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), 10);
    }
    let few = sample_distractors(&[4, 5, 6], 5, 10, &mut s).unwrap();
    assert!(few.with_replacement);
    assert!(few.indices.iter().all(|&i| i == 4 || i == 6));
    assert!(sample_distractors(&[7], 7, 10, &mut s).is_err());
    assert!(sample_distractors(&[1, 2], 3, 10, &mut s).is_err());
}

#[test]
fn temperature_decays_to_its_floor() {
    let t = TemperatureSchedule::default();
    assert_eq!(t.at(0), 2.0);
    assert!((t.at(1) - 2.0 * 0.9995).abs() < 1e-15);
    assert_eq!(t.at(1_000_000), 0.5);
    assert!((1..5000).all(|s| t.at(s) <= t.at(s - 1)));
}

#[test]
fn total_is_contrastive_plus_weighted_diversity() {
    let model = SpeechModel::new(ModelConfig::desk()).unwrap();
    let params: ParamTree32 = model.init_params(&mut Stream::new(5, &["init"]));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch: Vec<Vec<f32>> = (0..3).map(|_| (0..4000).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let cfg = ObjectiveConfig::default();
    let run = || {
        let mut lg = LossGraph::build(&model, &batch, &cfg, 0.5, Mode::Eval, &mut Stream::new(8, &["m"])).unwrap();
        lg.evaluate(&params, &mut Stream::new(8, &["g"])).unwrap()
    };
    let a = run();
    assert_eq!(a, run());
    assert!((a.total - (a.contrastive + cfg.lambda * a.diversity)).abs() < 1e-5);
    assert!(a.diversity < 0.0 && a.diversity >= -(40f64).ln() / 40.0 - 1e-6);
    assert!(a.contrastive > 0.0);
}

#[test]
fn distractor_candidates_are_uniform() {
    let masked: Vec<usize> = (0..30).map(|i| i * 2).collect();
    let t = 20;
    let candidates = masked.len() - 1;
    let mut s = Stream::new(9, &["uniform"]);
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let draws = 10_000;
    for _ in 0..draws {
        let d = sample_distractors(&masked, t, 1, &mut s).unwrap();
        *counts.entry(d.indices[0]).or_default() += 1;
    }
    assert_eq!(counts.len(), candidates);
    for (&i, &c) in &counts {
        assert!((c as f64 / draws as f64 - 1.0 / candidates as f64).abs() <= 0.02, "{i}: {c}");
    }
}

/// Recomputes a batch loss from the model's pieces: latents, quantized
/// targets and contexts per utterance, then every contrastive term and the
/// diversity of the averaged usage by hand.
#[test]
fn batch_loss_matches_step_by_step_recomputation() {
    let model = SpeechModel::new(ModelConfig::desk()).unwrap();
    let params: ParamTree64 = model.init_params::<f32>(&mut Stream::new(12, &["init"])).cast();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let batch: Vec<Vec<f64>> = (0..4).map(|_| (0..4000).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let cfg = ObjectiveConfig { mask: MaskSpec { start_prob: 0.15, span: 5 }, ..ObjectiveConfig::default() };
    let temperature = 1.7;

    let got = total_loss(&model, &batch, &params, &cfg, temperature, &mut Stream::new(1, &["m"]), &mut Stream::new(1, &["g"]))
        .unwrap();

    let mut mask_rng = Stream::new(1, &["m"]);
    let mut gumbel = Stream::new(1, &["g"]);
    let mut utterance_losses = Vec::new();
    let mut usage_sum: Vec<f64> = Vec::new();
    for wave in &batch {
        let z = model.feature_encode(wave, &params).unwrap();
        let masked = sample_time_mask(z.len(), &cfg.mask, &mut mask_rng).unwrap();
        let mut terms = BTreeMap::new();
        if masked.len() >= 2 {
            for &step in &masked {
                terms.insert(step, sample_distractors(&masked, step, cfg.num_distractors, &mut mask_rng).unwrap().indices);
            }
        }
        let (q, usage) = model.quantize(&z, &params, temperature, &mut gumbel).unwrap();
        if usage_sum.is_empty() {
            usage_sum = vec![0.0; usage.len()];
        }
        for (a, u) in usage_sum.iter_mut().zip(usage.data()) {
            *a += u / batch.len() as f64;
        }
        if !terms.is_empty() {
            let c = model.contextualize(&z, &masked, &params).unwrap();
            let rows = |s: &LatentSequence<f64>| (0..s.len()).map(|t| s.frame(t).to_vec()).collect::<Vec<_>>();
            utterance_losses.push(brute_force(&rows(&c), &rows(&q), &terms, cfg.kappa));
        }
    }
    assert!(!utterance_losses.is_empty());
    let contrastive = utterance_losses.iter().sum::<f64>() / utterance_losses.len() as f64;
    let diversity = usage_sum.iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>() / usage_sum.len() as f64;
    let total = contrastive + cfg.lambda * diversity;
    assert_eq!(got.n_utterances, utterance_losses.len());
    assert!((got.contrastive - contrastive).abs() <= 1e-6, "{} vs {contrastive}", got.contrastive);
    assert!((got.diversity - diversity).abs() <= 1e-6, "{} vs {diversity}", got.diversity);
    assert!((got.total - total).abs() <= 1e-6);
}
