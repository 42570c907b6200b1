//! Low-rank adapters. An adapter on a weight `W` (`out x in`) adds
//! `(alpha / rank) * B A` with `A: rank x in` and `B: out x rank`.

use ndarray::Array2;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::{Linear, ModelParams};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Query,
    Value,
    FfnIntermediate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraSpec {
    fn default() -> Self {
        LoraSpec::new(16, 32.0)
    }
}

impl LoraSpec {
    /// Adapters on the query, value and feed-forward intermediate weights.
    pub fn new(rank: usize, alpha: f64) -> Self {
        LoraSpec {
            rank,
            alpha,
            targets: vec![
                LoraTarget::Query,
                LoraTarget::Value,
                LoraTarget::FfnIntermediate,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// `(alpha / rank) * B A`.
    pub fn delta(&self) -> Array2<f64> {
        self.b.dot(&self.a) * self.scale()
    }
}

fn new_adapter(target: &Linear, spec: &LoraSpec, rng: &mut rng::Rng) -> LoraAdapter {
    let bound = 1.0 / (target.in_dim() as f64).sqrt();
    let dist = Uniform::new(-bound, bound).expect("valid bounds");
    LoraAdapter {
        a: Array2::from_shape_simple_fn((spec.rank, target.in_dim()), || dist.sample(rng)),
        b: Array2::zeros((target.out_dim(), spec.rank)),
        alpha: spec.alpha,
    }
}

/// Returns a copy of `params` with fresh adapters on every targeted weight.
/// `B` starts at zero so the adapted model initially equals the base.
pub fn attach_lora(params: &ModelParams, spec: &LoraSpec, seed: u64) -> Result<ModelParams> {
    if spec.rank == 0 {
        return Err(Error::Config("LoRA rank must be at least 1".into()));
    }
    if params.lora.is_some() {
        return Err(Error::Config(
            "model already carries adapters; merge them first".into(),
        ));
    }
    let mut rng = rng::rng(seed);
    let mut out = params.clone();
    for layer in &mut out.layers {
        for target in &spec.targets {
            let linear = match target {
                LoraTarget::Query => &mut layer.query,
                LoraTarget::Value => &mut layer.value,
                LoraTarget::FfnIntermediate => &mut layer.ffn_in,
            };
            if linear.lora.is_none() {
                linear.lora = Some(new_adapter(linear, spec, &mut rng));
            }
        }
    }
    out.lora = Some(spec.clone());
    Ok(out)
}

/// Folds every adapter into its base weight and removes it. A model
/// without adapters is returned unchanged.
pub fn merge_lora(params: &ModelParams) -> ModelParams {
    let mut out = params.clone();
    for layer in &mut out.layers {
        for linear in [
            &mut layer.query,
            &mut layer.key,
            &mut layer.value,
            &mut layer.output,
            &mut layer.ffn_in,
            &mut layer.ffn_out,
        ] {
            if let Some(adapter) = linear.lora.take() {
                linear.weight += &adapter.delta();
            }
        }
    }
    out.lora = None;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, ModelConfig};
    use ndarray::array;
    use rand::Rng;

    fn base() -> ModelParams {
        let cfg = ModelConfig::new(13, 8, 2, 2, 16, 16, Some(2), 3).unwrap();
        ModelParams::init(cfg, 3).unwrap()
    }

    #[test]
    fn zero_b_merges_to_base() {
        let p = base();
        let adapted = attach_lora(&p, &LoraSpec::new(4, 8.0), 1).unwrap();
        let merged = merge_lora(&adapted);
        assert_eq!(merged, p);
    }

    #[test]
    fn dense_example() {
        let adapter = LoraAdapter {
            a: array![[0.0, 1.0]],
            b: array![[1.0], [0.0]],
            alpha: 2.0,
        };
        let mut w = array![[1.0, 0.0], [0.0, 1.0]];
        w += &adapter.delta();
        assert_eq!(w, array![[1.0, 2.0], [0.0, 1.0]]);
    }

    #[test]
    fn merged_forward_matches_adapter_forward() {
        let p = base();
        let mut adapted = attach_lora(&p, &LoraSpec::new(4, 8.0), 1).unwrap();
        let mut rng = crate::rng::rng(2);
        for (name, t) in adapted.tensors_mut() {
            if name.ends_with("lora_b") || name.starts_with("head") {
                t.mapv_inplace(|_| rng.random_range(-0.3..0.3));
            }
        }
        let merged = merge_lora(&adapted);
        assert!(merged.layers.iter().all(|l| l.query.lora.is_none()));
        let ids = [1, 4, 2, 8, 5, 12, 0];
        let a = forward(&adapted, &ids).unwrap();
        let b = forward(&merged, &ids).unwrap();
        for (x, y) in a.boundary_probs.iter().zip(&b.boundary_probs) {
            assert!((x - y).abs() <= 1e-5);
        }
        assert_eq!(merge_lora(&merged), merged);
    }

    #[test]
    fn attach_rejects_double_and_zero_rank() {
        let p = base();
        assert!(attach_lora(&p, &LoraSpec::new(0, 1.0), 0).is_err());
        let a = attach_lora(&p, &LoraSpec::default(), 0).unwrap();
        assert!(attach_lora(&a, &LoraSpec::default(), 0).is_err());
        assert_eq!(a.layers[0].query.lora.as_ref().unwrap().rank(), 16);
        assert!(a.layers[0].key.lora.is_none());
        assert!(a.layers[0].ffn_in.lora.is_some());
    }
}
