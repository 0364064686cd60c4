//! Dense-tensor reverse-mode differentiation.
//!
//! A [`Graph`] is built node by node with shape inference, evaluated with
//! [`Graph::forward`] against named bindings and a seeded RNG, and
//! differentiated with [`Graph::backward`].

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{sample_gumbel, Bindings, Gradients, Graph, GumbelNoise, NodeId};
pub use tensor::Tensor;

use rand::RngCore;

use crate::error::Result;
use crate::scalar::Scalar;

/// Gumbel-softmax of a `(rows, V)` logits tensor as a standalone function.
pub fn gumbel_softmax<S: Scalar>(
    logits: &Tensor<S>,
    temperature: S,
    hard: bool,
    rng: &mut dyn RngCore,
) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let x = g.input("logits", logits.shape())?;
    let y = g.gumbel_softmax(x, temperature, hard, GumbelNoise::Sampled)?;
    g.set_output("y", y);
    let mut bind = std::collections::BTreeMap::new();
    bind.insert("logits".to_string(), logits.clone());
    let mut out = g.forward(&bind, rng)?;
    Ok(out.remove("y").expect("output registered"))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::error::Error;

    fn bind(pairs: &[(&str, Tensor<f64>)]) -> BTreeMap<String, Tensor<f64>> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn identity_graph() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[3]).unwrap();
        g.set_output("y", x);
        let out = g.forward(&bind(&[("x", Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap())]), &mut rng()).unwrap();
        assert_eq!(out["y"].data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn matmul_by_identity() {
        let mut g = Graph::<f64>::new();
        let i = g.input("i", &[2, 2]).unwrap();
        let m = g.input("m", &[2, 2]).unwrap();
        let y = g.matmul(i, m).unwrap();
        g.set_output("y", y);
        let mv = Tensor::from_f64([2, 2], &[1.5, -2.0, 0.25, 4.0]).unwrap();
        let b = bind(&[("i", Tensor::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap()), ("m", mv.clone())]);
        assert_eq!(g.forward(&b, &mut rng()).unwrap()["y"], mv);
    }

    #[test]
    fn softmax_of_zeros() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[2]).unwrap();
        let y = g.softmax(x).unwrap();
        g.set_output("y", y);
        let out = g.forward(&bind(&[("x", Tensor::zeros([2]))]), &mut rng()).unwrap();
        assert_eq!(out["y"].data(), &[0.5, 0.5]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", &[]).unwrap();
        let y = g.mul(x, x).unwrap();
        g.forward(&bind(&[("x", Tensor::scalar(3.0))]), &mut rng()).unwrap();
        let grads = g.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[6.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", &[5]).unwrap();
        let s = g.softmax(x).unwrap();
        let y = g.sum(s);
        let xv = Tensor::from_f64([5], &[0.3, -1.2, 2.0, 0.0, 0.7]).unwrap();
        g.forward(&bind(&[("x", xv)]), &mut rng()).unwrap();
        let grads = g.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert!(grads.get("x").unwrap().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn backward_before_forward_fails() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", &[]).unwrap();
        let y = g.mul(x, x).unwrap();
        assert!(matches!(g.backward(y, &Tensor::scalar(1.0)), Err(Error::NotEvaluated)));
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g = Graph::<f64>::new();
        g.set_scope("block0");
        let a = g.input("a", &[2, 3]).unwrap();
        let b = g.input("b", &[2, 3]).unwrap();
        match g.matmul(a, b) {
            Err(Error::Shape { node, .. }) => assert!(node.starts_with("block0/matmul")),
            other => panic!("unexpected {other:?}"),
        }
        let c = g.input("c", &[4]).unwrap();
        assert!(matches!(g.add(a, c), Err(Error::Shape { .. })));
    }

    #[test]
    fn bound_shape_is_checked() {
        let mut g = Graph::<f64>::new();
        g.input("x", &[3]).unwrap();
        let err = g.forward(&bind(&[("x", Tensor::zeros([4]))]), &mut rng()).unwrap_err();
        assert!(matches!(err, Error::Shape { node, .. } if node == "x"));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[2]).unwrap();
        let y = g.xlogx(x);
        g.set_output("y", y);
        let err = g.forward(&bind(&[("x", Tensor::from_f64([2], &[0.5, -1.0]).unwrap())]), &mut rng()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { node } if node.starts_with("xlogx")));
    }

    #[test]
    fn unbound_input_is_an_error() {
        let mut g = Graph::<f64>::new();
        g.input("x", &[2]).unwrap();
        assert!(matches!(g.forward(&bind(&[]), &mut rng()), Err(Error::Unbound(n)) if n == "x"));
    }

    #[test]
    fn hard_gumbel_rows_are_one_hot() {
        let logits = Tensor::<f64>::from_f64([3, 4], &[0.1, 2.0, -1.0, 0.5, 3.0, 3.0, 3.0, 3.0, -5.0, 0.0, 5.0, 1.0]).unwrap();
        let y = gumbel_softmax(&logits, 0.7, true, &mut rng()).unwrap();
        for r in 0..3 {
            let row = y.row(r);
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), 3);
        }
    }

    #[test]
    fn high_temperature_is_uniform() {
        let logits = Tensor::<f64>::from_f64([1, 2], &[5.0, 1.0]).unwrap();
        let y = gumbel_softmax(&logits, 1e9, false, &mut rng()).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-6 && (y.data()[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn non_positive_temperature_rejected() {
        let logits = Tensor::<f64>::zeros([1, 2]);
        assert!(gumbel_softmax(&logits, 0.0, true, &mut rng()).is_err());
        assert!(gumbel_softmax(&logits, -1.0, false, &mut rng()).is_err());
    }

    #[test]
    fn straight_through_gradient_equals_soft_gradient() {
        let lv = Tensor::<f64>::from_f64([2, 3], &[0.2, -0.4, 1.1, 0.0, 0.3, -0.9]).unwrap();
        let w = Tensor::<f64>::from_f64([2, 3], &[1.0, 2.0, -1.0, 0.5, -3.0, 0.25]).unwrap();
        let grad = |hard: bool| {
            let mut g = Graph::<f64>::new();
            let l = g.param("l", &[2, 3]).unwrap();
            let wn = g.input("w", &[2, 3]).unwrap();
            let y = g.gumbel_softmax(l, 0.5, hard, GumbelNoise::Sampled).unwrap();
            let p = g.mul(y, wn).unwrap();
            let s = g.sum(p);
            g.forward(&bind(&[("l", lv.clone()), ("w", w.clone())]), &mut rng()).unwrap();
            g.backward(s, &Tensor::scalar(1.0)).unwrap().get("l").unwrap().clone()
        };
        assert_eq!(grad(true), grad(false));
    }

    #[test]
    fn forward_is_reproducible_with_same_seed() {
        let run = || {
            let logits = Tensor::<f32>::from_f64([4, 6], &(0..24).map(|v| (v as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap();
            gumbel_softmax(&logits, 0.9, false, &mut ChaCha8Rng::seed_from_u64(99)).unwrap()
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
