//! Transformer encoder for token classification.
//!
//! Pre-norm blocks with learned absolute positions. Every layer uses the same
//! limited-lookahead mask, so the output at position `i` depends only on
//! tokens `0..=i + n_layers * per_layer_lookahead`. Two heads sit on top:
//! a boundary logit per token and auxiliary punctuation logits.
//!
//! All weights are `Array2<f64>`; biases and norm parameters are `1 x n`
//! rows. Linear weights are stored `out x in` and applied as `x W^T`.

mod forward;
mod lora;
pub mod mask;

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use forward::{forward, loss, loss_and_grad, ForwardOutput, TrainExample};
pub use lora::{attach_lora, merge_lora, LoraAdapter, LoraSpec, LoraTarget};
pub use mask::{build_lookahead_mask, per_layer_lookahead, AttentionMask};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_context: usize,
    /// Total lookahead budget `N`; `None` disables the limit.
    pub lookahead_total: Option<usize>,
    /// Per-layer lookahead actually applied; `N / n_layers` rounded down.
    pub lookahead_per_layer: Option<usize>,
    pub aux_vocab: usize,
}

impl ModelConfig {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vocab_size: usize,
        dim: usize,
        n_layers: usize,
        n_heads: usize,
        ffn_dim: usize,
        max_context: usize,
        lookahead_total: Option<usize>,
        aux_vocab: usize,
    ) -> Result<Self> {
        let cfg = ModelConfig {
            vocab_size,
            dim,
            n_layers,
            n_heads,
            ffn_dim,
            max_context,
            lookahead_total,
            lookahead_per_layer: lookahead_total.map(|n| per_layer_lookahead(n, n_layers)),
            aux_vocab,
        };
        if let Some(n) = lookahead_total {
            if n % n_layers.max(1) != 0 {
                return Err(Error::Config(format!(
                    "lookahead {n} must be divisible by the number of layers {n_layers}"
                )));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// 2 layers, dim 64, 4 heads, 128 positions, lookahead 8.
    pub fn tiny(vocab_size: usize, aux_vocab: usize) -> Self {
        Self::new(vocab_size, 64, 2, 4, 256, 128, Some(8), aux_vocab).expect("valid tiny config")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.dim == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return fail("vocab_size, dim, n_layers and n_heads must be positive".into());
        }
        if !self.dim.is_multiple_of(self.n_heads) {
            return fail(format!(
                "dim {} is not divisible by n_heads {}",
                self.dim, self.n_heads
            ));
        }
        if self.max_context == 0 || self.ffn_dim == 0 || self.aux_vocab == 0 {
            return fail("max_context, ffn_dim and aux_vocab must be positive".into());
        }
        match (self.lookahead_total, self.lookahead_per_layer) {
            (None, None) => {}
            (Some(n), Some(per)) if per * self.n_layers <= n => {}
            _ => return fail("lookahead_per_layer is inconsistent with lookahead_total".into()),
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    /// Furthest future offset any output can depend on.
    pub fn horizon(&self) -> Option<usize> {
        self.lookahead_per_layer.map(|n| n * self.n_layers)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Linear {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array2::zeros((1, out_dim)),
            lora: None,
        }
    }

    fn random(out_dim: usize, in_dim: usize, std: f64, rng: &mut rng::Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Linear {
            weight: Array2::from_shape_simple_fn((out_dim, in_dim), || normal.sample(rng)),
            bias: Array2::zeros((1, out_dim)),
            lora: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array2<f64>,
    pub bias: Array2<f64>,
}

impl LayerNorm {
    fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Array2::ones((1, dim)),
            bias: Array2::zeros((1, dim)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub ln1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ln2: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<Layer>,
    pub ln_f: LayerNorm,
    pub boundary_head: Linear,
    pub aux_head: Linear,
    /// Description of the attached adapters, if any.
    pub lora: Option<LoraSpec>,
}

fn push_linear<'a>(out: &mut Vec<(String, &'a Array2<f64>)>, name: &str, l: &'a Linear) {
    out.push((format!("{name}.weight"), &l.weight));
    out.push((format!("{name}.bias"), &l.bias));
    if let Some(a) = &l.lora {
        out.push((format!("{name}.lora_a"), &a.a));
        out.push((format!("{name}.lora_b"), &a.b));
    }
}

fn push_linear_mut<'a>(
    out: &mut Vec<(String, &'a mut Array2<f64>)>,
    name: &str,
    l: &'a mut Linear,
) {
    out.push((format!("{name}.weight"), &mut l.weight));
    out.push((format!("{name}.bias"), &mut l.bias));
    if let Some(a) = &mut l.lora {
        out.push((format!("{name}.lora_a"), &mut a.a));
        out.push((format!("{name}.lora_b"), &mut a.b));
    }
}

impl ModelParams {
    /// Random backbone, zero-initialized heads.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng(seed);
        let d = config.dim;
        let emb = Normal::new(0.0, 0.1).expect("finite std");
        let proj_std = 1.0 / (d as f64).sqrt();
        let resid_std = proj_std / (2.0 * config.n_layers as f64).sqrt();
        let tok_emb = Array2::from_shape_simple_fn((config.vocab_size, d), || emb.sample(&mut rng));
        let pos_emb =
            Array2::from_shape_simple_fn((config.max_context, d), || emb.sample(&mut rng));
        let layers = (0..config.n_layers)
            .map(|_| Layer {
                ln1: LayerNorm::new(d),
                query: Linear::random(d, d, proj_std, &mut rng),
                key: Linear::random(d, d, proj_std, &mut rng),
                value: Linear::random(d, d, proj_std, &mut rng),
                output: Linear::random(d, d, resid_std, &mut rng),
                ln2: LayerNorm::new(d),
                ffn_in: Linear::random(config.ffn_dim, d, proj_std, &mut rng),
                ffn_out: Linear::random(d, config.ffn_dim, resid_std / 2.0, &mut rng),
            })
            .collect();
        Ok(ModelParams {
            tok_emb,
            pos_emb,
            layers,
            ln_f: LayerNorm::new(d),
            boundary_head: Linear::zeros(1, d),
            aux_head: Linear::zeros(config.aux_vocab, d),
            lora: None,
            config,
        })
    }

    /// Same structure with every tensor zeroed; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Every tensor in a fixed order, with a stable dotted name.
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.ln1.gain"), &l.ln1.gain));
            out.push((format!("layers.{i}.ln1.bias"), &l.ln1.bias));
            push_linear(&mut out, &format!("layers.{i}.attn.query"), &l.query);
            push_linear(&mut out, &format!("layers.{i}.attn.key"), &l.key);
            push_linear(&mut out, &format!("layers.{i}.attn.value"), &l.value);
            push_linear(&mut out, &format!("layers.{i}.attn.output"), &l.output);
            out.push((format!("layers.{i}.ln2.gain"), &l.ln2.gain));
            out.push((format!("layers.{i}.ln2.bias"), &l.ln2.bias));
            push_linear(&mut out, &format!("layers.{i}.ffn.in"), &l.ffn_in);
            push_linear(&mut out, &format!("layers.{i}.ffn.out"), &l.ffn_out);
        }
        out.push(("ln_f.gain".to_string(), &self.ln_f.gain));
        out.push(("ln_f.bias".to_string(), &self.ln_f.bias));
        push_linear(&mut out, "head.boundary", &self.boundary_head);
        push_linear(&mut out, "head.aux", &self.aux_head);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.ln1.gain"), &mut l.ln1.gain));
            out.push((format!("layers.{i}.ln1.bias"), &mut l.ln1.bias));
            push_linear_mut(&mut out, &format!("layers.{i}.attn.query"), &mut l.query);
            push_linear_mut(&mut out, &format!("layers.{i}.attn.key"), &mut l.key);
            push_linear_mut(&mut out, &format!("layers.{i}.attn.value"), &mut l.value);
            push_linear_mut(&mut out, &format!("layers.{i}.attn.output"), &mut l.output);
            out.push((format!("layers.{i}.ln2.gain"), &mut l.ln2.gain));
            out.push((format!("layers.{i}.ln2.bias"), &mut l.ln2.bias));
            push_linear_mut(&mut out, &format!("layers.{i}.ffn.in"), &mut l.ffn_in);
            push_linear_mut(&mut out, &format!("layers.{i}.ffn.out"), &mut l.ffn_out);
        }
        out.push(("ln_f.gain".to_string(), &mut self.ln_f.gain));
        out.push(("ln_f.bias".to_string(), &mut self.ln_f.bias));
        push_linear_mut(&mut out, "head.boundary", &mut self.boundary_head);
        push_linear_mut(&mut out, "head.aux", &mut self.aux_head);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Keeps the first `k` layers and both heads; the per-layer lookahead is
    /// recomputed as `N / k` rounded down.
    pub fn truncate_layers(&self, k: usize) -> Result<Self> {
        let l = self.config.n_layers;
        if k == 0 || k > l {
            return Err(Error::Config(format!("cannot keep {k} of {l} layers")));
        }
        let mut out = self.clone();
        out.layers.truncate(k);
        out.config.n_layers = k;
        out.config.lookahead_per_layer = self
            .config
            .lookahead_total
            .map(|n| per_layer_lookahead(n, k));
        Ok(out)
    }

    /// Lookahead not used because `N` is not a multiple of the layer count.
    pub fn lookahead_remainder(&self) -> usize {
        match (self.config.lookahead_total, self.config.lookahead_per_layer) {
            (Some(n), Some(per)) => n - per * self.config.n_layers,
            _ => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelParams {
        let cfg = ModelConfig::new(20, 8, 3, 2, 16, 16, Some(6), 4).unwrap();
        ModelParams::init(cfg, 1).unwrap()
    }

    #[test]
    fn config_invariants() {
        assert!(ModelConfig::new(10, 8, 3, 3, 16, 16, Some(6), 2).is_err());
        assert!(ModelConfig::new(10, 8, 3, 2, 16, 16, Some(7), 2).is_err());
        let c = ModelConfig::new(10, 48, 3, 4, 16, 64, Some(48), 2).unwrap();
        assert_eq!(c.lookahead_per_layer, Some(16));
        let c = ModelConfig::new(10, 8, 2, 2, 16, 16, None, 2).unwrap();
        assert_eq!(c.horizon(), None);
    }

    #[test]
    fn truncate_keeps_prefix_and_heads() {
        let p = small();
        assert_eq!(p.truncate_layers(3).unwrap(), p);
        let t = p.truncate_layers(1).unwrap();
        assert_eq!(t.layers.len(), 1);
        assert_eq!(t.layers[0], p.layers[0]);
        assert_eq!(t.boundary_head, p.boundary_head);
        assert_eq!(t.aux_head, p.aux_head);
        assert_eq!(t.config.lookahead_per_layer, Some(6));
        assert!(p.truncate_layers(0).is_err());
        assert!(p.truncate_layers(4).is_err());
    }

    #[test]
    fn truncate_rounds_lookahead_down() {
        let cfg = ModelConfig::new(20, 8, 4, 2, 16, 16, Some(8), 4).unwrap();
        let p = ModelParams::init(cfg, 0).unwrap();
        let t = p.truncate_layers(3).unwrap();
        assert_eq!(t.config.lookahead_per_layer, Some(2));
        assert_eq!(t.lookahead_remainder(), 2);
        t.config.validate().unwrap();
    }

    #[test]
    fn twelve_layers_truncated_to_three() {
        let cfg = ModelConfig::new(30, 8, 12, 2, 16, 16, Some(48), 4).unwrap();
        let p = ModelParams::init(cfg, 0).unwrap();
        let t = p.truncate_layers(3).unwrap();
        assert_eq!(t.layers.len(), 3);
        assert_eq!(t.config.lookahead_per_layer, Some(16));
        assert_eq!(t.aux_head, p.aux_head);
    }

    #[test]
    fn tensor_names_are_unique() {
        let p = small();
        let names: std::collections::HashSet<String> =
            p.tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), p.tensors().len());
    }
}
