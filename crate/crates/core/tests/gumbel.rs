//! Hard Gumbel selections against a Monte-Carlo oracle of argmax(logits + G).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s3net::autodiff::{GumbelNoise, Tensor};
use s3net::Graph64;

#[test]
fn hard_selection_frequencies_follow_the_perturbed_argmax() {
    let logits = [1.2, -0.4, 0.0, 2.1, 0.7];
    let v = logits.len();
    let draws = 10_000;

    let mut g = Graph64::new();
    let x = g.input("x", &[1, v]).unwrap();
    let y = g.gumbel_softmax(x, 1.0, true, GumbelNoise::Sampled).unwrap();
    g.set_output("y", y);
    let bind: std::collections::BTreeMap<String, Tensor<f64>> =
        [("x".to_string(), Tensor::from_f64([1, v], &logits).unwrap())].into();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ours = vec![0.0; v];
    for _ in 0..draws {
        let out = g.forward(&bind, &mut rng).unwrap();
        let row = out["y"].data();
        assert_eq!(row.iter().filter(|&&p| p == 1.0).count(), 1);
        assert_eq!(row.iter().filter(|&&p| p == 0.0).count(), v - 1);
        let k = row.iter().position(|&p| p == 1.0).unwrap();
        ours[k] += 1.0 / draws as f64;
    }

    let mut orng = ChaCha8Rng::seed_from_u64(2);
    let mut oracle = vec![0.0; v];
    for _ in 0..draws {
        let k = (0..v)
            .map(|i| {
                let u: f64 = orng.gen_range(f64::MIN_POSITIVE..1.0);
                (i, logits[i] - (-u.ln()).ln())
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        oracle[k] += 1.0 / draws as f64;
    }

    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    for i in 0..v {
        assert!((ours[i] - oracle[i]).abs() <= 0.02, "{ours:?} vs {oracle:?}");
        assert!((ours[i] - logits[i].exp() / z).abs() <= 0.02, "{ours:?}");
    }
}

#[test]
fn disabled_noise_picks_the_plain_argmax() {
    let mut g = Graph64::new();
    let x = g.input("x", &[2, 3]).unwrap();
    let y = g.gumbel_softmax(x, 0.5, true, GumbelNoise::Disabled).unwrap();
    g.set_output("y", y);
    let bind: std::collections::BTreeMap<String, Tensor<f64>> =
        [("x".to_string(), Tensor::from_f64([2, 3], &[0.1, 3.0, -1.0, 2.0, 1.9, 0.0]).unwrap())].into();
    let out = g.forward(&bind, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(out["y"].data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
}
