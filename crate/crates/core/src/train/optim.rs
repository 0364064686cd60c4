use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::model::ParamTree;
use crate::pruning::SubnetMask;
use crate::scalar::Scalar;

/// Adaptive-moment optimizer constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-6 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(Error::validation("train.adam", "betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }
}

/// First and second moments per parameter, plus the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub t: u64,
    pub m: BTreeMap<String, Vec<S>>,
    pub v: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    /// Zero moments shaped like `params`.
    pub fn new(params: &ParamTree<S>) -> Self {
        let zeros = |p: &ParamTree<S>| p.iter().map(|(k, e)| (k.clone(), vec![S::zero(); e.tensor.len()])).collect();
        Self { t: 0, m: zeros(params), v: zeros(params) }
    }

    /// One bias-corrected update with learning rate `lr`. With a mask,
    /// masked-out positions are skipped entirely: value and both moments
    /// stay bit-identical. Non-finite gradients abort before any change.
    pub fn step(
        &mut self,
        params: &mut ParamTree<S>,
        grads: &Gradients<S>,
        lr: f64,
        cfg: &AdamConfig,
        mask: Option<&SubnetMask>,
    ) -> Result<()> {
        for (name, g) in grads.iter() {
            let Some(p) = params.get(name) else {
                return Err(Error::invalid(format!("gradient for unknown parameter {name}")));
            };
            if p.shape() != g.shape() {
                return Err(Error::invalid(format!("gradient shape mismatch for {name}")));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { node: format!("gradient of {name}") });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (S::lit(cfg.beta1), S::lit(cfg.beta2));
        let bc1 = S::one() - b1.powi(t);
        let bc2 = S::one() - b2.powi(t);
        let (lr, eps) = (S::lit(lr), S::lit(cfg.eps));
        for (name, g) in grads.iter() {
            let theta = params.get_mut(name).expect("checked").data_mut();
            let m = self.m.get_mut(name).ok_or_else(|| Error::invalid(format!("no moments for {name}")))?;
            let v = self.v.get_mut(name).expect("m and v share keys");
            let keep = mask.and_then(|mk| mk.keep_bits(name));
            for (i, &gi) in g.data().iter().enumerate() {
                if keep.is_some_and(|k| !k[i]) {
                    continue;
                }
                m[i] = b1 * m[i] + (S::one() - b1) * gi;
                v[i] = b2 * v[i] + (S::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                theta[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::model::Section;
    use crate::pruning::{Scope, Strategy};

    fn one(v: f64) -> ParamTree<f64> {
        let mut p = ParamTree::new();
        p.insert("w", Tensor::from_f64([1], &[v]).unwrap(), Section::ContextLinear);
        p
    }

    fn grad(v: f64) -> Gradients<f64> {
        let mut g = Gradients::default();
        g.by_name.insert("w".into(), Tensor::from_f64([1], &[v]).unwrap());
        g
    }

    #[test]
    fn hand_computed_first_step() {
        let mut p = one(1.0);
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        s.step(&mut p, &grad(0.5), 0.1, &cfg, None).unwrap();
        // m = 0.05, v = 0.00025; mhat = 0.5, vhat = 0.25; update = 0.1 * 0.5 / (0.5 + 1e-8)
        let expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-7);
        assert!((s.m["w"][0] - 0.05).abs() < 1e-15);
        assert!((s.v["w"][0] - 0.00025).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = one(0.7);
        let mut s = AdamState::new(&p);
        s.step(&mut p, &grad(0.0), 0.1, &AdamConfig::default(), None).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.7);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn masked_position_is_untouched() {
        let mut p = one(0.7);
        let mut s = AdamState::new(&p);
        s.step(&mut p, &grad(0.3), 0.1, &AdamConfig::default(), None).unwrap();
        let before = (p.clone(), s.m.clone(), s.v.clone());
        let mask = SubnetMask::from_bits(
            "x",
            Strategy::Random,
            Scope::Layerwise,
            0.0,
            None,
            [("w".to_string(), (vec![1], vec![false]))].into(),
        )
        .unwrap();
        s.step(&mut p, &grad(0.9), 0.1, &AdamConfig::default(), Some(&mask)).unwrap();
        assert_eq!((p, s.m, s.v), before);
    }

    #[test]
    fn non_finite_gradient_rejected_without_side_effects() {
        let mut p = one(0.7);
        let mut s = AdamState::new(&p);
        assert!(s.step(&mut p, &grad(f64::NAN), 0.1, &AdamConfig::default(), None).is_err());
        assert_eq!(s.t, 0);
        assert_eq!(p.get("w").unwrap().data()[0], 0.7);
    }
}
