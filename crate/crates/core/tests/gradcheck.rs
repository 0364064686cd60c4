//! Reverse-mode gradients against central finite differences, evaluated in
//! 64-bit.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s3net::autodiff::{Graph, GumbelNoise, NodeId, Tensor};
use s3net::model::{ConvLayer, ModelConfig, SpeechModel};
use s3net::objective::{LossGraph, MaskSpec, Mode, ObjectiveConfig};
use s3net::{Graph64, ParamTree64, Result};

pub type Build = dyn Fn(&mut Graph64) -> Result<NodeId>;

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Builds `build`, reduces its output to `sum(y * w)` with random `w`, and
/// compares the gradient of every parameter leaf with central differences
/// at `points` random points (base step 1e-3). Returns the worst relative
/// error.
pub fn check(build: &Build, sample: &dyn Fn(&mut ChaCha8Rng) -> f64, points: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph64::new();
    let y = build(&mut g).unwrap();
    let wshape = g.shape(y).to_vec();
    let n: usize = wshape.iter().product();
    let w = Tensor::new(wshape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let wn = g.constant(w);
    let prod = g.mul(y, wn).unwrap();
    let out = g.sum(prod);
    g.set_output("out", out);

    let leaves = g.grad_leaves();
    let h = 1e-3;
    let mut worst = 0.0f64;
    for p in 0..points {
        let mut bind: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
        for (name, shape) in &leaves {
            let n: usize = shape.iter().product();
            bind.insert(name.clone(), Tensor::new(shape.clone(), (0..n).map(|_| sample(&mut rng)).collect()).unwrap());
        }
        let noise_seed = seed * 1000 + p as u64;
        let eval = |g: &mut Graph64, b: &BTreeMap<String, Tensor<f64>>| -> f64 {
            g.forward(b, &mut ChaCha8Rng::seed_from_u64(noise_seed)).unwrap()["out"].item().unwrap()
        };
        eval(&mut g, &bind);
        let grads = g.backward(out, &Tensor::scalar(1.0)).unwrap();
        for (name, _) in &leaves {
            let analytic = grads.get(name).unwrap().clone();
            for i in 0..analytic.len() {
                let orig = bind[name].data()[i];
                let mut central = |step: f64| {
                    bind.get_mut(name).unwrap().data_mut()[i] = orig + step;
                    let fp = eval(&mut g, &bind);
                    bind.get_mut(name).unwrap().data_mut()[i] = orig - step;
                    let fm = eval(&mut g, &bind);
                    bind.get_mut(name).unwrap().data_mut()[i] = orig;
                    (fp - fm) / (2.0 * step)
                };
                // Richardson extrapolation of the step-h and step-h/2 central
                // differences cancels the h^2 truncation term.
                let numeric = (4.0 * central(h / 2.0) - central(h)) / 3.0;
                worst = worst.max(rel_err(analytic.data()[i], numeric, 1e-6));
            }
        }
    }
    worst
}

pub fn uniform(r: &mut ChaCha8Rng) -> f64 {
    r.gen_range(-1.0..1.0)
}

pub fn positive(r: &mut ChaCha8Rng) -> f64 {
    r.gen_range(0.1..1.5)
}

pub fn primitives() -> Vec<(&'static str, Box<Build>, fn(&mut ChaCha8Rng) -> f64)> {
    vec![
        ("matmul", Box::new(|g| { let a = g.param("a", &[3, 4])?; let b = g.param("b", &[4, 2])?; g.matmul(a, b) }), uniform),
        ("batched_matmul", Box::new(|g| { let a = g.param("a", &[2, 3, 4])?; let b = g.param("b", &[2, 4, 2])?; g.matmul(a, b) }), uniform),
        ("matmul_nt", Box::new(|g| { let a = g.param("a", &[2, 3, 4])?; let b = g.param("b", &[2, 5, 4])?; g.matmul_nt(a, b) }), uniform),
        ("add", Box::new(|g| { let a = g.param("a", &[3, 2])?; let b = g.param("b", &[3, 2])?; g.add(a, b) }), uniform),
        ("sub", Box::new(|g| { let a = g.param("a", &[3, 2])?; let b = g.param("b", &[3, 2])?; g.sub(a, b) }), uniform),
        ("mul", Box::new(|g| { let a = g.param("a", &[3, 2])?; let b = g.param("b", &[3, 2])?; g.mul(a, b) }), uniform),
        ("add_row", Box::new(|g| { let a = g.param("a", &[3, 4])?; let b = g.param("b", &[4])?; g.add_row(a, b) }), uniform),
        ("scale", Box::new(|g| { let a = g.param("a", &[5])?; Ok(g.scale(a, -2.5)) }), uniform),
        ("gelu", Box::new(|g| { let a = g.param("a", &[6])?; Ok(g.gelu(a)) }), |r| r.gen_range(-3.0..3.0)),
        ("layer_norm", Box::new(|g| { let a = g.param("a", &[3, 5])?; let b = g.param("b", &[5])?; let c = g.param("c", &[5])?; g.layer_norm(a, b, c, 1e-5) }), uniform),
        ("softmax", Box::new(|g| { let a = g.param("a", &[3, 4])?; g.softmax(a) }), |r| r.gen_range(-3.0..3.0)),
        ("logsumexp", Box::new(|g| { let a = g.param("a", &[3, 4])?; g.logsumexp(a) }), |r| r.gen_range(-3.0..3.0)),
        ("gumbel_softmax_soft", Box::new(|g| { let a = g.param("a", &[3, 4])?; g.gumbel_softmax(a, 0.7, false, GumbelNoise::Sampled) }), uniform),
        ("reshape", Box::new(|g| { let a = g.param("a", &[2, 6])?; let r = g.reshape(a, &[3, 4])?; Ok(g.gelu(r)) }), uniform),
        ("transpose", Box::new(|g| { let a = g.param("a", &[2, 3])?; let t = g.transpose(a)?; let b = g.param("b", &[2, 2])?; g.matmul(t, b) }), uniform),
        ("swap_axes01", Box::new(|g| { let a = g.param("a", &[2, 3, 2])?; let s = g.swap_axes01(a)?; Ok(g.gelu(s)) }), uniform),
        ("conv1d", Box::new(|g| { let a = g.param("a", &[11, 2])?; let b = g.param("b", &[3, 2, 3])?; g.conv1d(a, b, 2) }), uniform),
        ("depthwise_conv", Box::new(|g| { let a = g.param("a", &[6, 3])?; let b = g.param("b", &[3, 3])?; g.depthwise_conv(a, b) }), uniform),
        ("replace_rows", Box::new(|g| { let a = g.param("a", &[5, 3])?; let b = g.param("b", &[3])?; g.replace_rows(a, &[1, 3], b) }), uniform),
        ("gather_rows", Box::new(|g| { let a = g.param("a", &[4, 3])?; g.gather_rows(a, &[2, 0, 2, 3]) }), uniform),
        ("cosine_rows", Box::new(|g| { let a = g.param("a", &[4, 3])?; let b = g.param("b", &[4, 3])?; g.cosine_rows(a, b) }), uniform),
        ("column", Box::new(|g| { let a = g.param("a", &[4, 3])?; g.column(a, 1) }), uniform),
        ("sum", Box::new(|g| { let a = g.param("a", &[2, 3])?; Ok(g.sum(a)) }), uniform),
        ("mean", Box::new(|g| { let a = g.param("a", &[2, 3])?; Ok(g.mean(a)) }), uniform),
        ("mean_axis0", Box::new(|g| { let a = g.param("a", &[4, 3])?; g.mean_axis0(a) }), uniform),
        ("xlogx", Box::new(|g| { let a = g.param("a", &[5])?; Ok(g.xlogx(a)) }), positive),
    ]
}

#[test]
fn every_primitive_matches_finite_differences() {
    for (i, (name, build, sample)) in primitives().into_iter().enumerate() {
        let worst = check(build.as_ref(), &sample, 100, 17 + i as u64);
        assert!(worst < 1e-4, "{name}: max relative error {worst:e}");
    }
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let mlp: Box<Build> = Box::new(|g| {
        let x = g.constant(Tensor::from_f64([2, 3], &[0.3, -0.8, 0.5, 1.1, 0.2, -0.4])?);
        let a = g.param("a", &[3, 5])?;
        let b = g.param("b", &[5, 5])?;
        let c = g.param("c", &[5, 2])?;
        let h = g.matmul(x, a)?;
        let h = g.gelu(h);
        let h = g.matmul(h, b)?;
        let h = g.gelu(h);
        let o = g.matmul(h, c)?;
        g.logsumexp(o)
    });
    let worst = check(mlp.as_ref(), &uniform, 100, 5);
    assert!(worst < 1e-4, "max relative error {worst:e}");
}

pub fn tiny_model() -> SpeechModel {
    SpeechModel::new(ModelConfig {
        encoder_layers: vec![ConvLayer::new(6, 25, 5), ConvLayer::new(8, 8, 4), ConvLayer::new(12, 8, 8)],
        d_model: 12,
        n_heads: 2,
        n_blocks: 1,
        ffn_dim: 16,
        codebooks: 2,
        entries: 5,
        codeword_dim: 4,
        ..ModelConfig::desk()
    })
    .unwrap()
}

/// Central differences of the full loss at `coords` chosen parameter entries.
pub fn end_to_end(coords: &[(String, usize)], params: &mut ParamTree64, lg: &mut LossGraph<f64>) -> f64 {
    let noise = 99;
    lg.evaluate(params, &mut ChaCha8Rng::seed_from_u64(noise)).unwrap();
    let grads = lg.gradients().unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (name, i) in coords {
        let orig = params.get(name).unwrap().data()[*i];
        params.get_mut(name).unwrap().data_mut()[*i] = orig + h;
        let fp = lg.evaluate(params, &mut ChaCha8Rng::seed_from_u64(noise)).unwrap().total;
        params.get_mut(name).unwrap().data_mut()[*i] = orig - h;
        let fm = lg.evaluate(params, &mut ChaCha8Rng::seed_from_u64(noise)).unwrap().total;
        params.get_mut(name).unwrap().data_mut()[*i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = grads.get(name).unwrap().data()[*i];
        worst = worst.max(rel_err(analytic, numeric, 1e-7));
    }
    worst
}

pub fn setup(mode: Mode, seed: u64) -> (ParamTree64, LossGraph<f64>) {
    let model = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: ParamTree64 = model.init_params(&mut rng);
    let batch: Vec<Vec<f64>> =
        (0..2).map(|_| (0..1400).map(|i| (i as f64 * 0.07).sin() + rng.gen_range(-0.3..0.3)).collect()).collect();
    let cfg = ObjectiveConfig { mask: MaskSpec { start_prob: 0.4, span: 2 }, num_distractors: 3, ..Default::default() };
    let lg = LossGraph::build(&model, &batch, &cfg, 1.5, mode, &mut rng).unwrap();
    (params, lg)
}

#[test]
fn relaxed_loss_matches_finite_differences_everywhere() {
    let (mut params, mut lg) = setup(Mode::Relaxed, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let names: Vec<String> = params.names().cloned().collect();
    let coords: Vec<(String, usize)> = (0..100)
        .map(|_| {
            let n = names[rng.gen_range(0..names.len())].clone();
            let len = params.get(&n).unwrap().len();
            (n, rng.gen_range(0..len))
        })
        .collect();
    let worst = end_to_end(&coords, &mut params, &mut lg);
    assert!(worst < 1e-3, "max relative error {worst:e}");
}

#[test]
fn hard_loss_matches_finite_differences_off_the_straight_through_path() {
    // Parameters downstream of the hard selection (context network, codebook,
    // target projection, mask embedding) see exact gradients.
    let (mut params, mut lg) = setup(Mode::Train, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let names: Vec<String> = params
        .names()
        .filter(|n| n.starts_with("context.") || n.starts_with("quantizer.codebook") || n.starts_with("quantizer.proj") || *n == "mask_embedding")
        .cloned()
        .collect();
    let coords: Vec<(String, usize)> = (0..100)
        .map(|_| {
            let n = names[rng.gen_range(0..names.len())].clone();
            let len = params.get(&n).unwrap().len();
            (n, rng.gen_range(0..len))
        })
        .collect();
    let worst = end_to_end(&coords, &mut params, &mut lg);
    assert!(worst < 1e-3, "max relative error {worst:e}");
}

#[test]
fn straight_through_gradient_equals_soft_gradient() {
    let logits = Tensor::from_f64([2, 3], &[0.2, -0.5, 1.0, 0.0, 0.3, -0.1]).unwrap();
    let w = Tensor::from_f64([2, 3], &[1.0, -2.0, 0.5, 0.3, 0.7, -1.1]).unwrap();
    let grad = |hard: bool| {
        let mut g = Graph::<f64>::new();
        let a = g.param("a", &[2, 3]).unwrap();
        let y = g.gumbel_softmax(a, 0.8, hard, GumbelNoise::Sampled).unwrap();
        let wn = g.constant(w.clone());
        let p = g.mul(y, wn).unwrap();
        let o = g.sum(p);
        let mut b = BTreeMap::new();
        b.insert("a".to_string(), logits.clone());
        g.forward(&b, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        g.backward(o, &Tensor::scalar(1.0)).unwrap().get("a").unwrap().clone()
    };
    assert_eq!(grad(true), grad(false));
}
