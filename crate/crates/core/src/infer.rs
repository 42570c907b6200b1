//! Sliding-window inference and thresholded decoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, ModelParams};
use crate::tokenize::Tokenizer;

/// Threshold presets for the three training regimes.
pub const ALPHA_PRETRAINED: f64 = 0.01;
pub const ALPHA_SM: f64 = 0.25;
pub const ALPHA_LORA_DEFAULT: f64 = 0.025;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub alpha: f64,
    pub stride: usize,
    /// Window length in tokens; capped at the model context.
    pub context: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            alpha: ALPHA_LORA_DEFAULT,
            stride: 64,
            context: 512,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "threshold must be in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.stride == 0 || self.context == 0 {
            return Err(Error::Config("stride and context must be positive".into()));
        }
        if self.stride > self.context {
            return Err(Error::Config(format!(
                "stride {} exceeds the window length {}",
                self.stride, self.context
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub char_probs: Vec<f64>,
    /// Char indices whose probability exceeds the threshold.
    pub boundaries: Vec<usize>,
    pub sentences: Vec<String>,
}

/// Half-open token windows of length `context` starting every `stride`
/// tokens; the last window is pulled back to end at `n`.
pub fn window_plan(n: usize, context: usize, stride: usize) -> Vec<(usize, usize)> {
    assert!(
        context > 0 && stride > 0,
        "context and stride must be positive"
    );
    if n == 0 {
        return Vec::new();
    }
    if n <= context {
        return vec![(0, n)];
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + context < n {
        out.push((start, start + context));
        start += stride;
    }
    out.push((n - context, n));
    out
}

/// Boundary probability for every token, averaged over all windows that
/// cover it.
pub fn token_probs(
    params: &ModelParams,
    ids: &[u32],
    context: usize,
    stride: usize,
) -> Result<Vec<f64>> {
    let context = context.min(params.config.max_context);
    if stride == 0 || context == 0 || stride > context {
        return Err(Error::Config(format!(
            "invalid window: context {context}, stride {stride}"
        )));
    }
    let mut sum = vec![0.0; ids.len()];
    let mut count = vec![0u32; ids.len()];
    for (s, e) in window_plan(ids.len(), context, stride) {
        let out = forward(params, &ids[s..e])?;
        for (k, p) in out.boundary_probs.iter().enumerate() {
            sum[s + k] += p;
            count[s + k] += 1;
        }
    }
    Ok(sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect())
}

/// Per-character probabilities: each token's probability sits on the last
/// character of its span; every other character gets zero.
pub fn char_probs(
    params: &ModelParams,
    tok: &Tokenizer,
    text: &str,
    dec: &DecodeConfig,
) -> Result<Vec<f64>> {
    let seq = tok.encode(text);
    let probs = token_probs(params, &seq.ids, dec.context, dec.stride)?;
    let mut out = vec![0.0; text.chars().count()];
    for (&(_, end), p) in seq.spans.iter().zip(probs) {
        out[end - 1] = p;
    }
    Ok(out)
}

/// Thresholds `char_probs` at `alpha` and splits `text` after each boundary.
/// The last character always closes a sentence.
pub fn decode(text: &str, char_probs: &[f64], alpha: f64) -> SegmentationResult {
    let chars: Vec<char> = text.chars().collect();
    assert_eq!(
        chars.len(),
        char_probs.len(),
        "one probability per character"
    );
    let boundaries: Vec<usize> = (0..chars.len())
        .filter(|&i| char_probs[i] > alpha)
        .collect();
    let mut sentences = Vec::new();
    let mut start = 0;
    for &b in &boundaries {
        sentences.push(chars[start..=b].iter().collect());
        start = b + 1;
    }
    if start < chars.len() {
        sentences.push(chars[start..].iter().collect());
    }
    SegmentationResult {
        char_probs: char_probs.to_vec(),
        boundaries,
        sentences,
    }
}

/// Segments `text` into sentences whose concatenation is `text`.
pub fn segment(
    params: &ModelParams,
    tok: &Tokenizer,
    text: &str,
    dec: &DecodeConfig,
) -> Result<SegmentationResult> {
    dec.validate()?;
    if text.trim().is_empty() {
        let n = text.chars().count();
        return Ok(SegmentationResult {
            char_probs: vec![0.0; n],
            boundaries: Vec::new(),
            sentences: if n == 0 {
                Vec::new()
            } else {
                vec![text.to_string()]
            },
        });
    }
    let probs = char_probs(params, tok, text, dec)?;
    Ok(decode(text, &probs, dec.alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    #[test]
    fn window_plan_examples() {
        assert_eq!(window_plan(10, 4, 2), vec![(0, 4), (2, 6), (4, 8), (6, 10)]);
        assert_eq!(window_plan(5, 4, 4), vec![(0, 4), (1, 5)]);
        assert_eq!(window_plan(3, 4, 2), vec![(0, 3)]);
        assert!(window_plan(0, 4, 2).is_empty());
    }

    proptest! {
        #[test]
        fn windows_cover_every_token(n in 1usize..300, context in 1usize..64, stride_frac in 0.01f64..1.0) {
            let stride = ((context as f64 * stride_frac).ceil() as usize).clamp(1, context);
            let plan = window_plan(n, context, stride);
            let mut covered = vec![false; n];
            for &(s, e) in &plan {
                prop_assert!(e <= n && s < e && e - s <= context);
                covered[s..e].iter_mut().for_each(|c| *c = true);
            }
            prop_assert!(covered.iter().all(|&c| c));
            prop_assert_eq!(plan.last().unwrap().1, n);
        }
    }

    #[test]
    fn decode_example() {
        let r = decode("a b", &[0.9, 0.1, 0.6], 0.5);
        assert_eq!(r.boundaries, vec![0, 2]);
        assert_eq!(r.sentences, vec!["a".to_string(), " b".to_string()]);
        let r = decode("abc", &[0.0, 0.0, 0.0], 0.5);
        assert_eq!(r.sentences, vec!["abc".to_string()]);
    }

    #[test]
    fn segment_is_lossless() {
        let tok = Tokenizer::char_level(&["abc. de? f"]);
        let cfg = ModelConfig::new(tok.vocab_size(), 8, 1, 2, 16, 4, Some(1), 2).unwrap();
        let mut params = ModelParams::init(cfg, 1).unwrap();
        params.boundary_head.weight.mapv_inplace(|_| 0.7);
        let text = "abc. de? f abc. de";
        for stride in [1, 2, 4] {
            let dec = DecodeConfig {
                alpha: 0.4,
                stride,
                context: 4,
            };
            let r = segment(&params, &tok, text, &dec).unwrap();
            assert_eq!(r.sentences.concat(), text);
            assert_eq!(r.char_probs.len(), text.chars().count());
        }
        let r = segment(&params, &tok, "   ", &DecodeConfig::default()).unwrap();
        assert_eq!(r.sentences, vec!["   ".to_string()]);
    }

    #[test]
    fn rejects_bad_config() {
        let bad = DecodeConfig {
            alpha: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = DecodeConfig {
            stride: 600,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
