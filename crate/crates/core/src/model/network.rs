//! Graph construction for the feature encoder, the context network and the
//! product quantizer, plus standalone evaluation helpers.

use std::collections::BTreeMap;

use rand::RngCore;

use super::config::ModelConfig;
use super::params::ParamTree;
use crate::autodiff::{Bindings, Graph, GumbelNoise, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A `(T, d_model)` sequence of frame vectors (latents `z`, contexts `c`
/// or quantized targets `q`).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence<S> {
    pub frames: Tensor<S>,
}

impl<S: Scalar> LatentSequence<S> {
    pub fn new(frames: Tensor<S>) -> Result<Self> {
        if frames.shape().len() != 2 {
            return Err(Error::invalid(format!("latent sequence must be 2-D, got {:?}", frames.shape())));
        }
        Ok(Self { frames })
    }

    /// Frame count `T`.
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frame(&self, t: usize) -> &[S] {
        self.frames.row(t)
    }
}

/// Graph nodes produced by the quantizer.
#[derive(Clone, Copy, Debug)]
pub struct QuantizerNodes {
    /// Quantized targets `(T, d_model)`.
    pub q: NodeId,
    /// Hard one-hot selections `(T * G, V)`.
    pub selection: NodeId,
    /// Noise-free selection probabilities averaged over frames, `(G * V)`.
    pub usage: NodeId,
}

/// The miniature model: a stateless description that emits graph nodes.
/// Parameters are bound at evaluation time by name.
#[derive(Clone, Debug)]
pub struct SpeechModel {
    config: ModelConfig,
}

/// Zero-mean, unit-variance normalization applied to raw waveforms before
/// the encoder.
pub fn normalize_waveform<S: Scalar>(wave: &[S]) -> Vec<S> {
    let n = S::from_usize_lossy(wave.len().max(1));
    let mean = wave.iter().copied().sum::<S>() / n;
    let var = wave.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    let inv = S::one() / (var + S::lit(1e-5)).sqrt();
    wave.iter().map(|&v| (v - mean) * inv).collect()
}

impl SpeechModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn init_params<S: Scalar>(&self, rng: &mut dyn RngCore) -> ParamTree<S> {
        ParamTree::init(&self.config, rng)
    }

    fn eps<S: Scalar>(&self) -> S {
        S::lit(self.config.layer_norm_eps)
    }

    fn linear<S: Scalar>(&self, g: &mut Graph<S>, x: NodeId, w: &str, b: &str, din: usize, dout: usize) -> Result<NodeId> {
        let wn = g.param(w, &[din, dout])?;
        let bn = g.param(b, &[dout])?;
        let y = g.matmul(x, wn)?;
        g.add_row(y, bn)
    }

    fn norm<S: Scalar>(&self, g: &mut Graph<S>, x: NodeId, prefix: &str, n: usize) -> Result<NodeId> {
        let gamma = g.param(&format!("{prefix}.gamma"), &[n])?;
        let beta = g.param(&format!("{prefix}.beta"), &[n])?;
        g.layer_norm(x, gamma, beta, self.eps())
    }

    /// Feature encoder on a `(L, 1)` normalized waveform node, producing
    /// latents `z: (T, d_model)`.
    pub fn encoder_node<S: Scalar>(&self, g: &mut Graph<S>, wave: NodeId) -> Result<NodeId> {
        let cfg = &self.config;
        let len = g.shape(wave)[0];
        let rf = cfg.receptive_field();
        if len < rf {
            return Err(Error::InputTooShort { got: len, min: rf });
        }
        g.set_scope("feature_encoder");
        let mut x = wave;
        let mut cin = 1;
        for (i, l) in cfg.encoder_layers.iter().enumerate() {
            let w = g.param(&format!("feature_encoder.conv{i}.weight"), &[l.kernel, cin, l.channels])?;
            let b = g.param(&format!("feature_encoder.conv{i}.bias"), &[l.channels])?;
            let y = g.conv1d(x, w, l.stride)?;
            let y = g.add_row(y, b)?;
            x = g.gelu(y);
            cin = l.channels;
        }
        let x = self.norm(g, x, "feature_encoder.norm", cin)?;
        let z = self.linear(g, x, "feature_encoder.proj.weight", "feature_encoder.proj.bias", cin, cfg.d_model);
        g.set_scope("");
        z
    }

    /// Context network on latents `z`, with the rows in `masked` replaced by
    /// the learned mask embedding first.
    pub fn context_node<S: Scalar>(&self, g: &mut Graph<S>, z: NodeId, masked: &[usize]) -> Result<NodeId> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let t = g.shape(z)[0];
        if let Some(&bad) = masked.iter().find(|&&m| m >= t) {
            return Err(Error::OutOfRange { index: bad, len: t });
        }
        g.set_scope("context");
        let emb = g.param("mask_embedding", &[d])?;
        let mut x = g.replace_rows(z, masked, emb)?;

        let pw = g.param("context.pos_conv.weight", &[cfg.pos_conv_kernel, d])?;
        let pb = g.param("context.pos_conv.bias", &[d])?;
        let pos = g.depthwise_conv(x, pw)?;
        let pos = g.add_row(pos, pb)?;
        let pos = g.gelu(pos);
        x = g.add(x, pos)?;

        let (h, dh) = (cfg.n_heads, cfg.head_dim());
        let att_scale = S::lit(1.0 / (dh as f64).sqrt());
        for b in 0..cfg.n_blocks {
            let p = format!("context.block{b}");
            g.set_scope(p.clone());
            let hn = self.norm(g, x, &format!("{p}.ln1"), d)?;
            let mut heads = Vec::with_capacity(3);
            for w in ["q", "k", "v"] {
                let proj = self.linear(g, hn, &format!("{p}.attn.w{w}"), &format!("{p}.attn.b{w}"), d, d)?;
                let split = g.reshape(proj, &[t, h, dh])?;
                heads.push(g.swap_axes01(split)?);
            }
            let scores = g.matmul_nt(heads[0], heads[1])?;
            let scores = g.scale(scores, att_scale);
            let att = g.softmax(scores)?;
            let mixed = g.matmul(att, heads[2])?;
            let merged = g.swap_axes01(mixed)?;
            let merged = g.reshape(merged, &[t, d])?;
            let out = self.linear(g, merged, &format!("{p}.attn.wo"), &format!("{p}.attn.bo"), d, d)?;
            x = g.add(x, out)?;

            let hn = self.norm(g, x, &format!("{p}.ln2"), d)?;
            let f = self.linear(g, hn, &format!("{p}.ffn.w1"), &format!("{p}.ffn.b1"), d, cfg.ffn_dim)?;
            let f = g.gelu(f);
            let f = self.linear(g, f, &format!("{p}.ffn.w2"), &format!("{p}.ffn.b2"), cfg.ffn_dim, d)?;
            x = g.add(x, f)?;
        }
        g.set_scope("context");
        let x = self.norm(g, x, "context.final_norm", d)?;
        let c = self.linear(g, x, "context.final_proj.weight", "context.final_proj.bias", d, d);
        g.set_scope("");
        c
    }

    /// Product quantizer on latents `z`: per frame, one Gumbel-selected entry
    /// per codebook; the chosen codewords are concatenated and projected.
    /// With `hard = false` the selections stay relaxed (soft mixtures).
    pub fn quantizer_node<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        z: NodeId,
        temperature: S,
        noise: GumbelNoise,
        hard: bool,
    ) -> Result<QuantizerNodes> {
        let cfg = &self.config;
        let (d, gc, v, cw) = (cfg.d_model, cfg.codebooks, cfg.entries, cfg.codeword_dim);
        let t = g.shape(z)[0];
        g.set_scope("quantizer");
        let logits = self.linear(g, z, "quantizer.logits.weight", "quantizer.logits.bias", d, gc * v)?;
        let rows = g.reshape(logits, &[t * gc, v])?;
        let selection = g.gumbel_softmax(rows, temperature, hard, noise)?;
        let sel = g.reshape(selection, &[t, gc, v])?;
        let sel = g.swap_axes01(sel)?;
        let codebook = g.param("quantizer.codebook", &[gc, v, cw])?;
        let words = g.matmul(sel, codebook)?;
        let words = g.swap_axes01(words)?;
        let words = g.reshape(words, &[t, gc * cw])?;
        let q = self.linear(g, words, "quantizer.proj.weight", "quantizer.proj.bias", gc * cw, d)?;

        let probs = g.softmax(rows)?;
        let probs = g.reshape(probs, &[t, gc * v])?;
        let usage = g.mean_axis0(probs)?;
        g.set_scope("");
        Ok(QuantizerNodes { q, selection, usage })
    }

    fn wave_tensor<S: Scalar>(&self, waveform: &[S]) -> Result<Tensor<S>> {
        let rf = self.config.receptive_field();
        if waveform.len() < rf {
            return Err(Error::InputTooShort { got: waveform.len(), min: rf });
        }
        Tensor::new([waveform.len(), 1], normalize_waveform(waveform))
    }

    /// Latents `z` for one raw waveform.
    pub fn feature_encode<S: Scalar>(&self, waveform: &[S], params: &ParamTree<S>) -> Result<LatentSequence<S>> {
        let wave = self.wave_tensor(waveform)?;
        let mut g = Graph::new();
        let w = g.input("waveform", wave.shape())?;
        let z = self.encoder_node(&mut g, w)?;
        g.set_output("z", z);
        let inputs = single("waveform", wave);
        let mut out = g.forward(&(&inputs, params), &mut NoRng)?;
        LatentSequence::new(out.remove("z").expect("output"))
    }

    /// Quantized targets and the `(G, V)` usage table for latents `z`.
    pub fn quantize<S: Scalar>(
        &self,
        z: &LatentSequence<S>,
        params: &dyn Bindings<S>,
        temperature: S,
        rng: &mut dyn RngCore,
    ) -> Result<(LatentSequence<S>, Tensor<S>)> {
        let mut g = Graph::new();
        let zn = g.input("z", z.frames.shape())?;
        let qn = self.quantizer_node(&mut g, zn, temperature, GumbelNoise::Sampled, true)?;
        g.set_output("q", qn.q);
        g.set_output("usage", qn.usage);
        let inputs = single("z", z.frames.clone());
        let mut out = g.forward(&(&inputs, params), rng)?;
        let usage = out.remove("usage").expect("output").reshape([self.config.codebooks, self.config.entries])?;
        Ok((LatentSequence::new(out.remove("q").expect("output"))?, usage))
    }

    /// Hard selections `(T * G, V)` of the quantizer (for inspection).
    pub fn quantizer_selection<S: Scalar>(
        &self,
        z: &LatentSequence<S>,
        params: &dyn Bindings<S>,
        temperature: S,
        rng: &mut dyn RngCore,
    ) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let zn = g.input("z", z.frames.shape())?;
        let qn = self.quantizer_node(&mut g, zn, temperature, GumbelNoise::Sampled, true)?;
        g.set_output("sel", qn.selection);
        let inputs = single("z", z.frames.clone());
        Ok(g.forward(&(&inputs, params), rng)?.remove("sel").expect("output"))
    }

    /// Contextual representations `c` for latents `z` under a time mask.
    pub fn contextualize<S: Scalar>(
        &self,
        z: &LatentSequence<S>,
        time_mask: &[usize],
        params: &dyn Bindings<S>,
    ) -> Result<LatentSequence<S>> {
        let mut g = Graph::new();
        let zn = g.input("z", z.frames.shape())?;
        let c = self.context_node(&mut g, zn, time_mask)?;
        g.set_output("c", c);
        let inputs = single("z", z.frames.clone());
        let mut out = g.forward(&(&inputs, params), &mut NoRng)?;
        LatentSequence::new(out.remove("c").expect("output"))
    }
}

fn single<S: Scalar>(name: &str, t: Tensor<S>) -> BTreeMap<String, Tensor<S>> {
    let mut m = BTreeMap::new();
    m.insert(name.to_string(), t);
    m
}

/// RNG for graphs without stochastic nodes; drawing from it is a bug.
struct NoRng;

impl RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("deterministic graph drew a random number")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("deterministic graph drew a random number")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("deterministic graph drew a random number")
    }
    fn try_fill_bytes(&mut self, _: &mut [u8]) -> std::result::Result<(), rand::Error> {
        unreachable!("deterministic graph drew a random number")
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn setup() -> (SpeechModel, ParamTree<f64>) {
        let model = SpeechModel::new(ModelConfig::desk()).unwrap();
        let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(11));
        (model, params)
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_waveform_gives_finite_latents_of_expected_shape() {
        let (model, params) = setup();
        let z = model.feature_encode(&vec![0.0; 4000], &params).unwrap();
        assert_eq!(z.frames.shape(), &[24, 64]);
        assert!(z.frames.is_finite());
    }

    #[test]
    fn one_receptive_field_gives_one_frame() {
        let (model, params) = setup();
        let rf = model.config().receptive_field();
        assert_eq!(model.feature_encode(&noise(rf, 1), &params).unwrap().len(), 1);
        match model.feature_encode(&noise(rf - 1, 1), &params) {
            Err(Error::InputTooShort { min, .. }) => assert_eq!(min, rf),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn doubling_input_doubles_frames() {
        let (model, params) = setup();
        for len in [1000usize, 2400, 4000, 7777] {
            let t1 = model.feature_encode(&noise(len, 2), &params).unwrap().len() as i64;
            let t2 = model.feature_encode(&noise(2 * len, 2), &params).unwrap().len() as i64;
            assert!((t2 - 2 * t1).abs() <= 1, "len {len}: {t1} -> {t2}");
            assert_eq!(Some(t2 as usize), model.config().frames_for(2 * len));
        }
    }

    #[test]
    fn quantizer_selects_one_entry_per_codebook_and_usage_rows_sum_to_one() {
        let (model, params) = setup();
        let z = model.feature_encode(&noise(4000, 3), &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sel = model.quantizer_selection(&z, &params, 2.0, &mut rng).unwrap();
        assert_eq!(sel.shape(), &[24 * 2, 40]);
        for r in 0..sel.shape()[0] {
            assert_eq!(sel.row(r).iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(sel.row(r).iter().sum::<f64>(), 1.0);
        }
        let (q, usage) = model.quantize(&z, &params, 2.0, &mut rng).unwrap();
        assert_eq!(q.frames.shape(), &[24, 64]);
        assert_eq!(usage.shape(), &[2, 40]);
        for g in 0..2 {
            assert!((usage.row(g).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_mask_equals_plain_encoding_and_full_mask_ignores_latents() {
        let (model, params) = setup();
        let z1 = model.feature_encode(&noise(4000, 4), &params).unwrap();
        let z2 = model.feature_encode(&noise(4000, 5), &params).unwrap();
        let c1 = model.contextualize(&z1, &[], &params).unwrap();
        assert_ne!(c1, model.contextualize(&z2, &[], &params).unwrap());
        let all: Vec<usize> = (0..z1.len()).collect();
        let f1 = model.contextualize(&z1, &all, &params).unwrap();
        let f2 = model.contextualize(&z2, &all, &params).unwrap();
        assert_eq!(f1, f2);
    }

    #[test]
    fn masked_latent_perturbation_probe() {
        let (model, params) = setup();
        let z = model.feature_encode(&noise(4000, 6), &params).unwrap();
        let masked = [3usize, 4, 5, 6];
        let c = model.contextualize(&z, &masked, &params).unwrap();
        let perturb = |t: usize| {
            let mut zp = z.clone();
            for v in zp.frames.data_mut()[t * 64..(t + 1) * 64].iter_mut() {
                *v += 0.5;
            }
            zp
        };
        // a masked latent is invisible to the context network
        assert_eq!(model.contextualize(&perturb(4), &masked, &params).unwrap(), c);
        // an unmasked latent influences every context frame via attention
        let cu = model.contextualize(&perturb(10), &masked, &params).unwrap();
        for t in 0..z.len() {
            assert_ne!(cu.frame(t), c.frame(t), "frame {t}");
        }
        // the target path of other frames is unaffected by the perturbation
        let mut r1 = ChaCha8Rng::seed_from_u64(8);
        let mut r2 = ChaCha8Rng::seed_from_u64(8);
        let (q, _) = model.quantize(&z, &params, 1.0, &mut r1).unwrap();
        let (qp, _) = model.quantize(&perturb(4), &params, 1.0, &mut r2).unwrap();
        for t in (0..z.len()).filter(|&t| t != 4) {
            assert_eq!(q.frame(t), qp.frame(t));
        }
    }

    #[test]
    fn out_of_range_mask_index_is_rejected() {
        let (model, params) = setup();
        let z = model.feature_encode(&noise(4000, 7), &params).unwrap();
        assert!(matches!(
            model.contextualize(&z, &[24], &params),
            Err(Error::OutOfRange { index: 24, len: 24 })
        ));
    }
}
